use crate::error::Result;
use crate::param::ParamStore;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::of(1e-8));
    (analytic - numeric).abs() / denom
}

/// Finite-difference formula used by the checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central,
    /// Fourth-order central difference over `x ± h` and `x ± 2h`; tolerates a
    /// larger `h`, which keeps rounding noise down on small components.
    FivePoint,
}

impl Stencil {
    fn estimate<T: Real>(self, mut at: impl FnMut(T) -> Result<T>, h: T) -> Result<T> {
        match self {
            Self::Central => Ok((at(h)? - at(-h)?) / (T::of(2.0) * h)),
            Self::FivePoint => {
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(T::of(2.0) * h)?, at(T::of(-2.0) * h)?);
                Ok((T::of(8.0) * (p1 - m1) - (p2 - m2)) / (T::of(12.0) * h))
            }
        }
    }
}

/// Tape gradients next to their finite-difference estimates, one pair per
/// checked scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPairs<T> {
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

impl<T: Real> GradPairs<T> {
    /// Largest [`relative_error`].
    pub fn max_relative(&self) -> T {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .fold(T::zero(), |w, (&a, &n)| w.max(relative_error(a, n)))
    }

    /// Largest `|a - n| / max(|a|, |n|, floor · max|a|)`: components far below
    /// the gradient's scale are held to an absolute bound at that scale.
    pub fn max_scaled(&self, floor: T) -> T {
        let scale = self.analytic.iter().fold(T::zero(), |m, a| m.max(a.abs())) * floor;
        self.analytic.iter().zip(&self.numeric).fold(T::zero(), |w, (&a, &n)| {
            let denom = a.abs().max(n.abs()).max(scale).max(T::of(1e-8));
            w.max((a - n).abs() / denom)
        })
    }
}

/// Max relative error between the tape gradient of a scalar function and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, over every coordinate
/// of `input`.
pub fn grad_check<T, F>(f: F, input: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    Ok(grad_pairs(f, input, eps, Stencil::Central)?.max_relative())
}

/// [`grad_check`] with a chosen stencil.
pub fn grad_check_with<T, F>(f: F, input: &Tensor<T>, eps: T, stencil: Stencil) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    Ok(grad_pairs(f, input, eps, stencil)?.max_relative())
}

/// Gradient of `f` at `input` and its finite-difference estimate.
pub fn grad_pairs<T, F>(f: F, input: &Tensor<T>, eps: T, stencil: Stencil) -> Result<GradPairs<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let eval = |t: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let x = tape.input(t)?;
        let l = f(&mut tape, x)?;
        Ok(tape.value(l).item())
    };
    let mut numeric = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        numeric.push(stencil.estimate(
            |h| {
                let mut x = input.clone();
                x[i] += h;
                eval(x)
            },
            eps,
        )?);
    }
    Ok(GradPairs {
        analytic: analytic.data().to_vec(),
        numeric,
    })
}

/// Same check over every scalar of every parameter in `store`.
/// `f` must bind parameters through [`Tape::param`].
pub fn grad_check_params<T, F>(f: F, store: &ParamStore<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    Ok(param_grad_pairs(f, store, eps, Stencil::Central)?.max_relative())
}

/// [`grad_check_params`] with a chosen stencil.
pub fn grad_check_params_with<T, F>(f: F, store: &ParamStore<T>, eps: T, stencil: Stencil) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    Ok(param_grad_pairs(f, store, eps, stencil)?.max_relative())
}

/// Parameter gradients and their estimates, in store order.
pub fn param_grad_pairs<T, F>(f: F, store: &ParamStore<T>, eps: T, stencil: Stencil) -> Result<GradPairs<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward_into(loss, &mut work)?;
    let analytic: Vec<T> = work.ids().flat_map(|id| work.get(id).grad.data().to_vec()).collect();

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::new();
        let l = f(&mut tape, s)?;
        Ok(tape.value(l).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        for i in 0..work.get(id).value.len() {
            let orig = work.get(id).value[i];
            numeric.push(stencil.estimate(
                |h| {
                    work.get_mut(id).value[i] = orig + h;
                    eval(&work)
                },
                eps,
            )?);
            work.get_mut(id).value[i] = orig;
        }
    }
    Ok(GradPairs { analytic, numeric })
}

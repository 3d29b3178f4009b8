//! Central-difference checks for every primitive with a backward rule,
//! shared by the gradient tests and the acceptance target.

use mady_tensor::{grad_check, Real, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(lo..hi)))
}

/// Values with magnitude in `[0.1, 1]` and random sign (away from kinks at 0).
pub fn off_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        T::of(if rng.random_bool(0.5) { m } else { -m })
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate matters.
pub fn weighted_sum<T: Real>(t: &mut Tape<T>, y: Var, r: &Tensor<T>) -> Result<Var> {
    let rv = t.constant(r.clone())?;
    let p = t.mul(y, rv)?;
    t.sum(p)
}

pub struct Case<T: Real> {
    pub name: &'static str,
    pub err: T,
}

/// Every primitive, checked with respect to each differentiable input.
/// `signed` selects fully signed random data (f64); otherwise positive data
/// keeps f32 gradients away from zero so rounding stays below tolerance.
/// `eps_smooth` is used for exp/softplus; every other primitive is
/// piecewise polynomial of degree ≤ 2 in the perturbed input, where central
/// differences are exact and the larger `eps_piecewise` only cuts rounding.
pub fn primitive_suite<T: Real>(seed: u64, signed: bool, eps_smooth: T, eps_piecewise: T) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = if signed { (-1.0, 1.0) } else { (0.5, 1.0) };
    let dims = [rng.random_range(1..4), rng.random_range(2..4), rng.random_range(1..4)];
    let x: Tensor<T> = uniform(&mut rng, &dims, lo, hi);
    let c: Tensor<T> = uniform(&mut rng, &dims, lo, hi);
    let r: Tensor<T> = uniform(&mut rng, &dims, lo, hi);
    let mut out = Vec::new();
    let mut run = |name, f: &dyn Fn(&mut Tape<T>, Var) -> Result<Var>, input: &Tensor<T>| {
        let eps = if matches!(name, "exp" | "softplus") { eps_smooth } else { eps_piecewise };
        let err = grad_check(f, input, eps).expect(name);
        out.push(Case { name, err });
    };

    run("add", &|t, v| {
        let cv = t.constant(c.clone())?;
        let y = t.add(v, cv)?;
        weighted_sum(t, y, &r)
    }, &x);
    run("sub", &|t, v| {
        let cv = t.constant(c.clone())?;
        let y = t.sub(cv, v)?;
        weighted_sum(t, y, &r)
    }, &x);
    run("mul", &|t, v| {
        let cv = t.constant(c.clone())?;
        let y = t.mul(v, cv)?;
        weighted_sum(t, y, &r)
    }, &x);
    run("mul-self", &|t, v| {
        let y = t.mul(v, v)?;
        weighted_sum(t, y, &r)
    }, &x);
    run("scale", &|t, v| {
        let y = t.scale(v, T::of(-1.7))?;
        weighted_sum(t, y, &r)
    }, &x);
    let rr = Tensor::concat(&[&r, &r], 1).unwrap();
    run("concat", &|t, v| {
        let cv = t.constant(c.clone())?;
        let y = t.concat(&[v, cv], 1)?;
        weighted_sum(t, y, &rr)
    }, &x);
    let rs = r.slice_axis(1, 1, dims[1] - 1).unwrap();
    run("slice", &|t, v| {
        let y = t.slice(v, 1, 1, dims[1] - 1)?;
        weighted_sum(t, y, &rs)
    }, &x);
    let rflat = r.clone().reshape(vec![r.len()]).unwrap();
    run("reshape", &|t, v| {
        let y = t.reshape(v, &[dims.iter().product()])?;
        weighted_sum(t, y, &rflat)
    }, &x);
    let rsum = r.slice_axis(0, 0, 1).unwrap().reshape(vec![dims[1], dims[2]]).unwrap();
    run("sum-axes", &|t, v| {
        let y = t.sum_axes(v, &[0])?;
        weighted_sum(t, y, &rsum)
    }, &x);
    let rmean = r.slice_axis(2, 0, 1).unwrap().reshape(vec![dims[0], dims[1]]).unwrap();
    run("mean-axes", &|t, v| {
        let y = t.mean_axes(v, &[2])?;
        weighted_sum(t, y, &rmean)
    }, &x);
    run("exp", &|t, v| {
        let y = t.exp(v)?;
        weighted_sum(t, y, &r)
    }, &x);
    run("softplus", &|t, v| {
        let y = t.softplus(v)?;
        weighted_sum(t, y, &r)
    }, &x);
    let xk: Tensor<T> = if signed { off_zero(&mut rng, &dims) } else { x.clone() };
    run("leaky-relu", &|t, v| {
        let y = t.leaky_relu(v, T::of(0.1))?;
        weighted_sum(t, y, &r)
    }, &xk);
    // keep samples clear of the clamp bounds
    let xc = xk.map(|v| if (v.abs() - T::of(0.6)).abs() < T::of(0.05) { v * T::of(0.8) } else { v });
    run("clamp", &|t, v| {
        let y = t.clamp(v, T::of(-0.6), T::of(0.6))?;
        weighted_sum(t, y, &r)
    }, &xc);

    // conv3d with respect to input, kernel, bias
    let (h, w, d, cin, cout) = (3, 4, 2, 2, 2);
    let cx: Tensor<T> = uniform(&mut rng, &[h, w, d, cin], lo, hi);
    let ck: Tensor<T> = uniform(&mut rng, &[3, 3, 3, cin, cout], lo, hi);
    let cb: Tensor<T> = uniform(&mut rng, &[cout], lo, hi);
    let cr: Tensor<T> = uniform(&mut rng, &[h, w, d, cout], lo, hi);
    run("conv3d-x", &|t, v| {
        let k = t.constant(ck.clone())?;
        let b = t.constant(cb.clone())?;
        let y = t.conv3d(v, k, Some(b))?;
        weighted_sum(t, y, &cr)
    }, &cx);
    run("conv3d-w", &|t, v| {
        let xv = t.constant(cx.clone())?;
        let y = t.conv3d(xv, v, None)?;
        weighted_sum(t, y, &cr)
    }, &ck);
    run("conv3d-b", &|t, v| {
        let xv = t.constant(cx.clone())?;
        let k = t.constant(ck.clone())?;
        let y = t.conv3d(xv, k, Some(v))?;
        weighted_sum(t, y, &cr)
    }, &cb);

    // conv2d
    let px: Tensor<T> = uniform(&mut rng, &[4, 3, cin], lo, hi);
    let pk: Tensor<T> = uniform(&mut rng, &[3, 3, cin, cout], lo, hi);
    let pr: Tensor<T> = uniform(&mut rng, &[4, 3, cout], lo, hi);
    run("conv2d-x", &|t, v| {
        let k = t.constant(pk.clone())?;
        let y = t.conv2d(v, k, None)?;
        weighted_sum(t, y, &pr)
    }, &px);
    run("conv2d-w", &|t, v| {
        let xv = t.constant(px.clone())?;
        let y = t.conv2d(xv, v, None)?;
        weighted_sum(t, y, &pr)
    }, &pk);

    // pointwise linear
    let lx: Tensor<T> = uniform(&mut rng, &[2, 3, 3], lo, hi);
    let lw: Tensor<T> = uniform(&mut rng, &[3, 2], lo, hi);
    let lb: Tensor<T> = uniform(&mut rng, &[2], lo, hi);
    let lr: Tensor<T> = uniform(&mut rng, &[2, 3, 2], lo, hi);
    run("pointwise-x", &|t, v| {
        let wv = t.constant(lw.clone())?;
        let bv = t.constant(lb.clone())?;
        let y = t.pointwise(v, wv, Some(bv))?;
        weighted_sum(t, y, &lr)
    }, &lx);
    run("pointwise-w", &|t, v| {
        let xv = t.constant(lx.clone())?;
        let bv = t.constant(lb.clone())?;
        let y = t.pointwise(xv, v, Some(bv))?;
        weighted_sum(t, y, &lr)
    }, &lw);
    run("pointwise-b", &|t, v| {
        let xv = t.constant(lx.clone())?;
        let wv = t.constant(lw.clone())?;
        let y = t.pointwise(xv, wv, Some(v))?;
        weighted_sum(t, y, &lr)
    }, &lb);

    // bilinear grid sample at fractional coordinates
    let (fh, fw, fc) = (5, 6, 2);
    let feat: Tensor<T> = if signed {
        uniform(&mut rng, &[fh, fw, fc], -1.0, 1.0)
    } else {
        // increasing along both axes so position slopes stay positive
        let noise: Tensor<T> = uniform(&mut rng, &[fh, fw, fc], 0.0, 0.2);
        Tensor::from_fn(vec![fh, fw, fc], |i| {
            let (r, c) = (i / (fw * fc), (i / fc) % fw);
            T::of(0.5 * r as f64 + 0.4 * c as f64) + noise[i]
        })
    };
    let npos = 4;
    let pos: Tensor<T> = Tensor::from_fn(vec![npos, 2], |i| {
        let lim = if i % 2 == 0 { fh - 1 } else { fw - 1 };
        let base = rng.random_range(0..lim) as f64;
        T::of(base + rng.random_range(0.25..0.75))
    });
    let gr: Tensor<T> = uniform(&mut rng, &[npos, fc], lo.max(0.5), hi);
    run("grid-sample-feat", &|t, v| {
        let p = t.constant(pos.clone())?;
        let y = t.grid_sample(v, p)?;
        weighted_sum(t, y, &gr)
    }, &feat);
    run("grid-sample-pos", &|t, v| {
        let f = t.constant(feat.clone())?;
        let y = t.grid_sample(f, v)?;
        weighted_sum(t, y, &gr)
    }, &pos);

    out
}

//! Raw kernels shared by the tape ops. Layouts are channels-last.

use crate::real::Real;

/// Geometry of a stride-1, zero-padded ("same") 3-D convolution over a
/// `[H, W, D, Cin]` volume with a `[kh, kw, kd, Cin, Cout]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub kd: usize,
}

impl ConvGeom {
    pub fn kdim(&self) -> usize {
        self.kh * self.kw * self.kd * self.cin
    }

    fn voxels_per_row(&self) -> usize {
        self.w * self.d
    }

    /// Output rows (along H) processed per im2col block.
    fn rows_per_block(&self) -> usize {
        const BUDGET: usize = 1 << 21;
        (BUDGET / (self.voxels_per_row() * self.kdim()).max(1)).clamp(1, self.h.max(1))
    }

    fn im2col<T: Real>(&self, x: &[T], h_start: usize, rows: usize, cols: &mut [T]) {
        let (ph, pw, pd) = (self.kh / 2, self.kw / 2, self.kd / 2);
        let kdim = self.kdim();
        let cin = self.cin;
        let mut m = 0;
        for h in h_start..h_start + rows {
            for w in 0..self.w {
                for d in 0..self.d {
                    let row = &mut cols[m * kdim..(m + 1) * kdim];
                    let mut k = 0;
                    for i in 0..self.kh {
                        let hh = h as isize + i as isize - ph as isize;
                        for j in 0..self.kw {
                            let ww = w as isize + j as isize - pw as isize;
                            for l in 0..self.kd {
                                let dd = d as isize + l as isize - pd as isize;
                                let dst = &mut row[k..k + cin];
                                if hh >= 0
                                    && (hh as usize) < self.h
                                    && ww >= 0
                                    && (ww as usize) < self.w
                                    && dd >= 0
                                    && (dd as usize) < self.d
                                {
                                    let src = ((hh as usize * self.w + ww as usize) * self.d + dd as usize) * cin;
                                    dst.copy_from_slice(&x[src..src + cin]);
                                } else {
                                    dst.iter_mut().for_each(|v| *v = T::zero());
                                }
                                k += cin;
                            }
                        }
                    }
                    m += 1;
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], h_start: usize, rows: usize, dx: &mut [T]) {
        let (ph, pw, pd) = (self.kh / 2, self.kw / 2, self.kd / 2);
        let kdim = self.kdim();
        let cin = self.cin;
        let mut m = 0;
        for h in h_start..h_start + rows {
            for w in 0..self.w {
                for d in 0..self.d {
                    let row = &cols[m * kdim..(m + 1) * kdim];
                    let mut k = 0;
                    for i in 0..self.kh {
                        let hh = h as isize + i as isize - ph as isize;
                        for j in 0..self.kw {
                            let ww = w as isize + j as isize - pw as isize;
                            for l in 0..self.kd {
                                let dd = d as isize + l as isize - pd as isize;
                                if hh >= 0
                                    && (hh as usize) < self.h
                                    && ww >= 0
                                    && (ww as usize) < self.w
                                    && dd >= 0
                                    && (dd as usize) < self.d
                                {
                                    let dst = ((hh as usize * self.w + ww as usize) * self.d + dd as usize) * cin;
                                    for (a, &b) in dx[dst..dst + cin].iter_mut().zip(&row[k..k + cin]) {
                                        *a += b;
                                    }
                                }
                                k += cin;
                            }
                        }
                    }
                    m += 1;
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let kdim = self.kdim();
        let per_row = self.voxels_per_row();
        let mut out = vec![T::zero(); self.h * per_row * self.cout];
        let block = self.rows_per_block();
        let mut cols = vec![T::zero(); block * per_row * kdim];
        let mut h0 = 0;
        while h0 < self.h {
            let rows = block.min(self.h - h0);
            let m = rows * per_row;
            self.im2col(x, h0, rows, &mut cols[..m * kdim]);
            let dst = &mut out[h0 * per_row * self.cout..(h0 * per_row + m) * self.cout];
            T::gemm(
                m,
                kdim,
                self.cout,
                T::one(),
                &cols[..m * kdim],
                (kdim, 1),
                weight,
                (self.cout, 1),
                T::zero(),
                dst,
                (self.cout, 1),
            );
            h0 += rows;
        }
        if let Some(b) = bias {
            for px in out.chunks_exact_mut(self.cout) {
                for (v, &bb) in px.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        out
    }

    /// Returns `(dx, dweight, dbias)`; `dx` only when requested.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        weight: &[T],
        dy: &[T],
        need_dx: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let kdim = self.kdim();
        let per_row = self.voxels_per_row();
        let mut dw = vec![T::zero(); kdim * self.cout];
        let mut db = vec![T::zero(); self.cout];
        for px in dy.chunks_exact(self.cout) {
            for (a, &b) in db.iter_mut().zip(px) {
                *a += b;
            }
        }
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let block = self.rows_per_block();
        let mut cols = vec![T::zero(); block * per_row * kdim];
        let mut h0 = 0;
        while h0 < self.h {
            let rows = block.min(self.h - h0);
            let m = rows * per_row;
            let dy_blk = &dy[h0 * per_row * self.cout..(h0 * per_row + m) * self.cout];
            self.im2col(x, h0, rows, &mut cols[..m * kdim]);
            // dW += colsᵀ · dy
            T::gemm(
                kdim,
                m,
                self.cout,
                T::one(),
                &cols[..m * kdim],
                (1, kdim),
                dy_blk,
                (self.cout, 1),
                T::one(),
                &mut dw,
                (self.cout, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dcols = dy · Wᵀ
                T::gemm(
                    m,
                    self.cout,
                    kdim,
                    T::one(),
                    dy_blk,
                    (self.cout, 1),
                    weight,
                    (1, self.cout),
                    T::zero(),
                    &mut cols[..m * kdim],
                    (kdim, 1),
                );
                self.col2im_add(&cols[..m * kdim], h0, rows, dx);
            }
            h0 += rows;
        }
        (dx, dw, db)
    }
}

/// Bilinear interpolation stencil for one fractional `(row, col)` position
/// on an `h × w` grid, with the position clamped to the grid.
///
/// At exactly-integer coordinates the stencil uses the cell to the right
/// (and below), so the position derivative is the right-continuous one.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fr: T,
    pub fc: T,
    /// Whether the clamp passes the row derivative through.
    pub pass_r: bool,
    pub pass_c: bool,
}

fn axis_tap<T: Real>(p: T, n: usize) -> (usize, usize, T, bool) {
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::of((n - 1) as f64);
    let pass = p >= T::zero() && p < hi;
    let q = p.max(T::zero()).min(hi);
    let i0 = (q.floor().to_usize().unwrap_or(0)).min(n - 2);
    let f = q - T::of(i0 as f64);
    (i0, i0 + 1, f, pass)
}

impl<T: Real> BilinearTap<T> {
    pub fn new(row: T, col: T, h: usize, w: usize) -> Self {
        let (r0, r1, fr, pass_r) = axis_tap(row, h);
        let (c0, c1, fc, pass_c) = axis_tap(col, w);
        Self {
            r0,
            r1,
            c0,
            c1,
            fr,
            fc,
            pass_r,
            pass_c,
        }
    }

    /// Weights of the corners `(r0,c0), (r0,c1), (r1,c0), (r1,c1)`.
    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fr) * (one - self.fc),
            (one - self.fr) * self.fc,
            self.fr * (one - self.fc),
            self.fr * self.fc,
        ]
    }

    /// Pixel indices `row * w + col` of the four corners.
    #[inline]
    pub fn corners(&self, w: usize) -> [usize; 4] {
        [
            self.r0 * w + self.c0,
            self.r0 * w + self.c1,
            self.r1 * w + self.c0,
            self.r1 * w + self.c1,
        ]
    }

    /// Derivatives of the four corner weights with respect to row and col,
    /// already masked by the clamp.
    #[inline]
    pub fn weight_grads(&self) -> ([T; 4], [T; 4]) {
        let one = T::one();
        let z = T::zero();
        let dr = if self.pass_r {
            [-(one - self.fc), -self.fc, one - self.fc, self.fc]
        } else {
            [z; 4]
        };
        let dc = if self.pass_c {
            [-(one - self.fr), one - self.fr, -self.fr, self.fr]
        } else {
            [z; 4]
        };
        (dr, dc)
    }
}

/// Sample a `[h, w, c]` map at `positions` (flattened `(row, col)` pairs).
pub fn grid_sample<T: Real>(feat: &[T], h: usize, w: usize, c: usize, positions: &[T]) -> Vec<T> {
    let n = positions.len() / 2;
    let mut out = vec![T::zero(); n * c];
    for (p, dst) in positions.chunks_exact(2).zip(out.chunks_exact_mut(c)) {
        let tap = BilinearTap::new(p[0], p[1], h, w);
        let wts = tap.weights();
        for (&corner, &wt) in tap.corners(w).iter().zip(&wts) {
            if wt == T::zero() {
                continue;
            }
            let src = &feat[corner * c..(corner + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Adjoint of [`grid_sample`]: returns `(dfeat, dpositions)`.
pub fn grid_sample_backward<T: Real>(
    feat: &[T],
    h: usize,
    w: usize,
    c: usize,
    positions: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dfeat = vec![T::zero(); feat.len()];
    let mut dpos = vec![T::zero(); positions.len()];
    for ((p, g), dp) in positions
        .chunks_exact(2)
        .zip(dy.chunks_exact(c))
        .zip(dpos.chunks_exact_mut(2))
    {
        let tap = BilinearTap::new(p[0], p[1], h, w);
        let wts = tap.weights();
        let (wr, wc) = tap.weight_grads();
        let corners = tap.corners(w);
        for q in 0..4 {
            let base = corners[q] * c;
            let mut dot = T::zero();
            for ch in 0..c {
                dfeat[base + ch] += wts[q] * g[ch];
                dot += feat[base + ch] * g[ch];
            }
            dp[0] += wr[q] * dot;
            dp[1] += wc[q] * dot;
        }
    }
    (dfeat, dpos)
}

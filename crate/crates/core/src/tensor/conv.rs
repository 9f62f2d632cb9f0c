//! im2col-based valid-padding 2-D cross-correlation.

use rayon::prelude::*;

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn ow(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh() * self.ow()
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Unfolds one sample `[c, h, w]` into `[c*kh*kw, oh*ow]`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let src = &x[ci * g.h * g.w + (oy * g.stride + ky) * g.w + kx..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[ox * g.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[c, h, w]`.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let base = ci * g.h * g.w + (oy * g.stride + ky) * g.w + kx;
                    for ox in 0..ow {
                        dx[base + ox * g.stride] = dx[base + ox * g.stride] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeom, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.co * plane];
    out.par_chunks_mut(g.co * plane)
        .zip(x.par_chunks(g.in_sample()))
        .for_each(|(y, xs)| {
            let mut cols = vec![T::zero(); patch * plane];
            im2col(g, xs, &mut cols);
            if let Some(b) = bias {
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    row.fill(b[o]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                g.co,
                patch,
                plane,
                kernel,
                patch as isize,
                1,
                &cols,
                plane as isize,
                1,
                beta,
                y,
                plane as isize,
                1,
            );
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch();

    let input = want_input.then(|| {
        let mut dx = vec![T::zero(); g.n * g.in_sample()];
        dx.par_chunks_mut(g.in_sample())
            .zip(dy.par_chunks(g.co * plane))
            .for_each(|(dxs, dys)| {
                let mut dcols = vec![T::zero(); patch * plane];
                // dcols = K^T · dY
                T::gemm(
                    patch,
                    g.co,
                    plane,
                    kernel,
                    1,
                    patch as isize,
                    dys,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane as isize,
                    1,
                );
                col2im(g, &dcols, dxs);
            });
        dx
    });

    // Per-sample partials are summed in sample order so the result does not
    // depend on the thread schedule.
    let kernel_grad = want_kernel.then(|| {
        let partials: Vec<Vec<T>> = x
            .par_chunks(g.in_sample())
            .zip(dy.par_chunks(g.co * plane))
            .map(|(xs, dys)| {
                let mut cols = vec![T::zero(); patch * plane];
                im2col(g, xs, &mut cols);
                let mut dk = vec![T::zero(); g.co * patch];
                // dK = dY · cols^T
                T::gemm(
                    g.co,
                    plane,
                    patch,
                    dys,
                    plane as isize,
                    1,
                    &cols,
                    1,
                    plane as isize,
                    T::zero(),
                    &mut dk,
                    patch as isize,
                    1,
                );
                dk
            })
            .collect();
        let mut total = vec![T::zero(); g.co * patch];
        for p in &partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t = *t + *v;
            }
        }
        total
    });

    let bias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.co];
        for dys in dy.chunks(g.co * plane) {
            for (o, row) in dys.chunks(plane).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

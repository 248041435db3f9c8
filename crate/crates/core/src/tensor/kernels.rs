//! Raw numeric kernels behind the graph ops. Shapes are validated by callers.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one sample into a `(cin*k*k) x (ho*wo)` column matrix.
fn im2col<T: Scalar>(geo: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let plane = geo.out_plane();
    for ci in 0..geo.in_channels {
        let chan = &input[ci * geo.height * geo.width..(ci + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * geo.out_width..(oy + 1) * geo.out_width];
                    if iy < 0 || iy >= geo.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= geo.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an input gradient.
fn col2im<T: Scalar>(geo: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.padding as isize);
    let plane = geo.out_plane();
    for ci in 0..geo.in_channels {
        let chan = &mut grad_input[ci * geo.height * geo.width..(ci + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..geo.out_width {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * geo.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane = geo.out_plane();
    let kk = geo.patch_len();
    let mut out = vec![T::zero(); geo.batch * geo.out_sample()];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    for n in 0..geo.batch {
        let x = &input[n * geo.in_sample()..(n + 1) * geo.in_sample()];
        let y = &mut out[n * geo.out_sample()..(n + 1) * geo.out_sample()];
        for (co, b) in bias.iter().enumerate() {
            y[co * plane..(co + 1) * plane].fill(*b);
        }
        let cols_ref: &[T] = if geo.is_pointwise() {
            x
        } else {
            im2col(geo, x, &mut cols);
            &cols
        };
        T::gemm(
            geo.out_channels,
            kk,
            plane,
            T::one(),
            weight,
            (kk as isize, 1),
            cols_ref,
            (plane as isize, 1),
            T::one(),
            y,
            plane as isize,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    weight: &[T],
    upstream: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = geo.out_plane();
    let kk = geo.patch_len();
    let mut g_in = want.0.then(|| vec![T::zero(); input.len()]);
    let mut g_w = want.1.then(|| vec![T::zero(); weight.len()]);
    let mut g_b = want.2.then(|| vec![T::zero(); geo.out_channels]);
    let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kk * plane }];
    let mut dcols = vec![T::zero(); if want.0 { kk * plane } else { 0 }];

    for n in 0..geo.batch {
        let x = &input[n * geo.in_sample()..(n + 1) * geo.in_sample()];
        let dy = &upstream[n * geo.out_sample()..(n + 1) * geo.out_sample()];
        if let Some(gb) = g_b.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc = *acc + dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = g_w.as_mut() {
            let cols_ref: &[T] = if geo.is_pointwise() {
                x
            } else {
                im2col(geo, x, &mut cols);
                &cols
            };
            // dW (cout x kk) += dY (cout x plane) * cols^T (plane x kk)
            T::gemm(
                geo.out_channels,
                plane,
                kk,
                T::one(),
                dy,
                (plane as isize, 1),
                cols_ref,
                (1, plane as isize),
                T::one(),
                gw,
                kk as isize,
            );
        }
        if let Some(gi) = g_in.as_mut() {
            let dx = &mut gi[n * geo.in_sample()..(n + 1) * geo.in_sample()];
            // dcols (kk x plane) = W^T (kk x cout) * dY (cout x plane)
            let pointwise = geo.is_pointwise();
            {
                let target: &mut [T] = if pointwise { &mut *dx } else { &mut dcols };
                T::gemm(
                    kk,
                    geo.out_channels,
                    plane,
                    T::one(),
                    weight,
                    (1, kk as isize),
                    dy,
                    (plane as isize, 1),
                    T::zero(),
                    target,
                    plane as isize,
                );
            }
            if !pointwise {
                col2im(geo, &dcols, dx);
            }
        }
    }
    ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    }
}

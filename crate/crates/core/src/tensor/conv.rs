//! im2col convolution kernels.
//!
//! Samples of a batch are processed independently (and in parallel when the
//! rayon pool has more than one thread); cross-sample reductions are summed
//! serially in sample order so results do not depend on the thread count.

use rayon::prelude::*;

use super::Real;

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn dilated(padding: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding,
            dilation,
        }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// `floor((input + 2·padding − dilation·(kernel − 1) − 1) / stride) + 1`,
/// or `None` when the dilated kernel does not fit the padded input.
pub fn conv2d_output_size(input: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    let span = geom.dilation * (kernel - 1) + 1;
    let padded = input + 2 * geom.padding;
    if geom.stride == 0 || span > padded {
        return None;
    }
    Some((padded - span) / geom.stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.o * self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let p = d.positions();
    let pad = g.padding as isize;
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let off_y = (ki * g.dilation) as isize - pad;
                let off_x = (kj * g.dilation) as isize - pad;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, g: ConvGeometry, dx: &mut [T]) {
    let p = d.positions();
    let pad = g.padding as isize;
    for ci in 0..d.c {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let off_y = (ki * g.dilation) as isize - pad;
                let off_x = (kj * g.dilation) as isize - pad;
                for oy in 0..d.ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &src[oy * d.wo..(oy + 1) * d.wo];
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: ConvGeometry,
) -> Vec<T> {
    let mut out = vec![T::ZERO; d.n * d.out_len()];
    let (rows, p) = (d.col_rows(), d.positions());
    out.par_chunks_mut(d.out_len())
        .zip(x.par_chunks(d.in_len()))
        .for_each_init(
            || vec![T::ZERO; rows * p],
            |cols, (y, xs)| {
                im2col(xs, d, g, cols);
                // SAFETY: weight is o×rows, cols is rows×p, y is o×p, all row-major.
                unsafe {
                    T::gemm(
                        d.o, rows, p, T::ONE, weight, rows as isize, 1, cols, p as isize, 1,
                        T::ZERO, y, p as isize, 1,
                    );
                }
                if let Some(b) = bias {
                    for (oc, chunk) in y.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += b[oc]);
                    }
                }
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &ConvDims,
    g: ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, p) = (d.col_rows(), d.positions());
    let [need_x, need_w, need_b] = need;

    let input = need_x.then(|| {
        let mut dx = vec![T::ZERO; d.n * d.in_len()];
        dx.par_chunks_mut(d.in_len())
            .zip(dy.par_chunks(d.out_len()))
            .for_each_init(
                || vec![T::ZERO; rows * p],
                |dcols, (dxs, dys)| {
                    // SAFETY: weight viewed transposed as rows×o, dys is o×p.
                    unsafe {
                        T::gemm(
                            rows, d.o, p, T::ONE, weight, 1, rows as isize, dys, p as isize, 1,
                            T::ZERO, dcols, p as isize, 1,
                        );
                    }
                    col2im(dcols, d, g, dxs);
                },
            );
        dx
    });

    let weight = need_w.then(|| {
        let partials: Vec<Vec<T>> = x
            .par_chunks(d.in_len())
            .zip(dy.par_chunks(d.out_len()))
            .map_init(
                || vec![T::ZERO; rows * p],
                |cols, (xs, dys)| {
                    im2col(xs, d, g, cols);
                    let mut dw = vec![T::ZERO; d.o * rows];
                    // SAFETY: dys is o×p, cols viewed transposed as p×rows.
                    unsafe {
                        T::gemm(
                            d.o, p, rows, T::ONE, dys, p as isize, 1, cols, 1, p as isize,
                            T::ZERO, &mut dw, rows as isize, 1,
                        );
                    }
                    dw
                },
            )
            .collect();
        let mut total = vec![T::ZERO; d.o * rows];
        for part in &partials {
            total.iter_mut().zip(part).for_each(|(t, &v)| *t += v);
        }
        total
    });

    let bias = need_b.then(|| {
        let mut db = vec![T::ZERO; d.o];
        for dys in dy.chunks(d.out_len()) {
            for (oc, chunk) in dys.chunks(p).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}

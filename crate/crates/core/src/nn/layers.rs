//! Convolution, dense, group-normalization and activation primitives.
//!
//! Convolutions run as im2col + one matrix multiply; the backward pass
//! recomputes the column buffer from the cached input instead of caching it.

use ndarray::{Array1, Array2, Array4, Axis, Ix2};

use super::El;

/// 2D convolution parameters, kernel `(c_out, c_in, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

/// Dense layer parameters, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Per-channel affine parameters of a group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<F> {
    pub g: Array1<F>,
    pub b: Array1<F>,
}

pub fn conv_out_dim(h: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (h + 2 * pad - k) / stride + 1
}

fn im2col<F: El>(x: &Array4<F>, kh: usize, kw: usize, stride: usize) -> Array2<F> {
    let (n, cin, h, w) = x.dim();
    let pad = (kh - 1) / 2;
    let ho = conv_out_dim(h, kh, stride);
    let wo = conv_out_dim(w, kw, stride);
    let k = cin * kh * kw;
    let mut cols = Array2::zeros((n * ho * wo, k));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for fi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((fi * ho + oy) * wo + ox) * k;
                for ci in 0..cin {
                    let xbase = (fi * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = row + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[crow + kx] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: El>(
    dcols: &Array2<F>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Array4<F> {
    let pad = (kh - 1) / 2;
    let ho = conv_out_dim(h, kh, stride);
    let wo = conv_out_dim(w, kw, stride);
    let k = cin * kh * kw;
    let mut dx = Array4::zeros((n, cin, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for fi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((fi * ho + oy) * wo + ox) * k;
                for ci in 0..cin {
                    let xbase = (fi * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = row + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[xrow + ix as usize] = xs[xrow + ix as usize] + ds[crow + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `y = conv(x) + b` with "same" padding for odd kernels.
pub fn conv2d_fwd<F: El>(p: &Conv2d<F>, x: &Array4<F>, stride: usize) -> Array4<F> {
    let (n, cin, h, w) = x.dim();
    let (cout, cin_w, kh, kw) = p.w.dim();
    assert_eq!(cin, cin_w, "conv input channels");
    let ho = conv_out_dim(h, kh, stride);
    let wo = conv_out_dim(w, kw, stride);
    let cols = im2col(x, kh, kw, stride);
    let w2 = p
        .w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut y2 = cols.dot(&w2.t()); // (n*ho*wo, cout)
    y2 += &p.b.view().insert_axis(Axis(0));
    let y = y2
        .into_shape_with_order((n, ho, wo, cout))
        .unwrap()
        .permuted_axes([0, 3, 1, 2]);
    y.as_standard_layout().into_owned()
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_bwd<F: El>(
    p: &Conv2d<F>,
    x: &Array4<F>,
    dy: &Array4<F>,
    stride: usize,
) -> (Array4<F>, Conv2d<F>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = p.w.dim();
    let (ho, wo) = (dy.dim().2, dy.dim().3);
    let cols = im2col(x, kh, kw, stride);
    let dy2 = dy
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * ho * wo, cout))
        .unwrap();
    let dw = dy2.t().dot(&cols).into_shape_with_order((cout, cin, kh, kw)).unwrap();
    let db = dy2.sum_axis(Axis(0));
    let w2 = p
        .w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let dcols = dy2.dot(&w2);
    let dx = col2im(&dcols, n, cin, h, w, kh, kw, stride);
    (dx, Conv2d { w: dw, b: db })
}

/// `y = x W^T + b`, rows of `x` are batch entries.
pub fn dense_fwd<F: El>(p: &Dense<F>, x: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(&p.w.t());
    y += &p.b.view().insert_axis(Axis(0));
    y
}

pub fn dense_bwd<F: El>(p: &Dense<F>, x: &Array2<F>, dy: &Array2<F>) -> (Array2<F>, Dense<F>) {
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    let dx = dy.dot(&p.w);
    (dx, Dense { w: dw, b: db })
}

pub struct NormCache<F> {
    /// Normalized activations before the affine.
    pub xhat: Array4<F>,
    /// Reciprocal standard deviation per (frame, group).
    pub inv_std: Array2<F>,
}

const NORM_EPS: f64 = 1e-5;

/// Group normalization over `(channels/groups, h, w)` per frame, followed by
/// a per-channel affine.
pub fn group_norm_fwd<F: El>(p: &Norm<F>, x: &Array4<F>, groups: usize) -> (Array4<F>, NormCache<F>) {
    let (n, c, h, w) = x.dim();
    assert_eq!(c % groups, 0, "groups must divide channels");
    let gc = c / groups;
    let m = F::from_f64((gc * h * w) as f64);
    let eps = F::from_f64(NORM_EPS);

    let mut xhat = x.as_standard_layout().into_owned();
    let mut inv_std = Array2::zeros((n, groups));
    {
        let mut grouped = xhat
            .view_mut()
            .into_shape_with_order((n, groups, gc * h * w))
            .unwrap();
        for fi in 0..n {
            for gi in 0..groups {
                let mut lane = grouped.slice_mut(ndarray::s![fi, gi, ..]);
                let mean = lane.sum() / m;
                lane -= mean;
                let var = lane.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / m;
                let istd = F::one() / (var + eps).sqrt();
                lane *= istd;
                inv_std[[fi, gi]] = istd;
            }
        }
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let mut lane = y.slice_mut(ndarray::s![.., ci, .., ..]);
        lane *= p.g[ci];
        lane += p.b[ci];
    }
    (y, NormCache { xhat, inv_std })
}

pub fn group_norm_bwd<F: El>(
    p: &Norm<F>,
    cache: &NormCache<F>,
    dy: &Array4<F>,
    groups: usize,
) -> (Array4<F>, Norm<F>) {
    let (n, c, h, w) = dy.dim();
    let gc = c / groups;
    let m = F::from_f64((gc * h * w) as f64);

    let mut dg = Array1::zeros(c);
    let mut db = Array1::zeros(c);
    for ci in 0..c {
        let dyl = dy.slice(ndarray::s![.., ci, .., ..]);
        let xl = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
        dg[ci] = dyl.iter().zip(xl.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b);
        db[ci] = dyl.sum();
    }

    // dxhat = dy * gamma, then the standard normalization backward per group
    let mut dxhat = dy.clone();
    for ci in 0..c {
        let mut lane = dxhat.slice_mut(ndarray::s![.., ci, .., ..]);
        lane *= p.g[ci];
    }
    let mut dx = dxhat.clone();
    {
        let xhat = cache
            .xhat
            .view()
            .into_shape_with_order((n, groups, gc * h * w))
            .unwrap();
        let dxh = dxhat
            .view()
            .into_shape_with_order((n, groups, gc * h * w))
            .unwrap();
        let mut dxg = dx
            .view_mut()
            .into_shape_with_order((n, groups, gc * h * w))
            .unwrap();
        for fi in 0..n {
            for gi in 0..groups {
                let xl = xhat.slice(ndarray::s![fi, gi, ..]);
                let dl = dxh.slice(ndarray::s![fi, gi, ..]);
                let sum_d = dl.sum();
                let sum_dx = dl.iter().zip(xl.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b);
                let istd = cache.inv_std[[fi, gi]];
                let mut out = dxg.slice_mut(ndarray::s![fi, gi, ..]);
                ndarray::Zip::from(&mut out).and(&dl).and(&xl).for_each(|o, d, x| {
                    *o = istd * (*d - sum_d / m - *x * sum_dx / m);
                });
            }
        }
    }
    (dx, Norm { g: dg, b: db })
}

pub fn silu_fwd<F: El>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_bwd<F: El>(x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, v| {
        let s = sigmoid(*v);
        *d = *d * s * (F::one() + *v * (F::one() - s));
    });
    dx
}

pub fn silu_vec_fwd<F: El>(x: &Array1<F>) -> Array1<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_bwd<F: El>(x: &Array1<F>, dy: &Array1<F>) -> Array1<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, v| {
        let s = sigmoid(*v);
        *d = *d * s * (F::one() + *v * (F::one() - s));
    });
    dx
}

fn sigmoid<F: El>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_fwd<F: El>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for fi in 0..n {
        for ci in 0..c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    y[[fi, ci, yy, xx]] = x[[fi, ci, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

pub fn upsample2_bwd<F: El>(dy: &Array4<F>) -> Array4<F> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((n, c, h2 / 2, w2 / 2));
    for fi in 0..n {
        for ci in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[[fi, ci, yy / 2, xx / 2]] = dx[[fi, ci, yy / 2, xx / 2]] + dy[[fi, ci, yy, xx]];
                }
            }
        }
    }
    dx
}

/// Flattens a rank-4 view into `(rows, cols)` without copying when possible.
pub fn as_rows<F: El>(x: &Array4<F>, rows: usize, cols: usize) -> Array2<F> {
    x.view()
        .into_shape_with_order((rows, cols))
        .unwrap()
        .to_owned()
        .into_dimensionality::<Ix2>()
        .unwrap()
}

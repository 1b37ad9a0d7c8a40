//! Temporal self-attention: each spatial location attends across the frame
//! axis. Pre-normalized, single head, residual.

use ndarray::{Array2, Array3, Array4, Axis};

use super::layers::{dense_bwd, dense_fwd, group_norm_bwd, group_norm_fwd, Dense, Norm, NormCache};
use super::El;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttn<F> {
    pub norm: Norm<F>,
    pub q: Dense<F>,
    pub k: Dense<F>,
    pub v: Dense<F>,
    pub o: Dense<F>,
}

pub struct AttnCache<F> {
    norm: NormCache<F>,
    /// Normalized input as tokens, `(hw * n, c)` with spatial-major rows.
    tok: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax probabilities per spatial location, `(hw, n, n)`.
    probs: Array3<F>,
    /// Attention output before the out-projection, `(hw * n, c)`.
    gathered: Array2<F>,
    dims: (usize, usize, usize, usize),
}

/// `(n, c, h, w)` -> spatial-major token matrix `(h * w * n, c)`.
fn to_tokens<F: El>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([2, 3, 0, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w * n, c))
        .unwrap()
}

fn from_tokens<F: El>(tok: &Array2<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
    let (n, c, h, w) = dims;
    tok.view()
        .into_shape_with_order((h, w, n, c))
        .unwrap()
        .permuted_axes([2, 3, 0, 1])
        .as_standard_layout()
        .into_owned()
}

pub fn attn_fwd<F: El>(
    p: &TemporalAttn<F>,
    x: &Array4<F>,
    groups: usize,
) -> (Array4<F>, AttnCache<F>) {
    let dims = x.dim();
    let (n, c, h, w) = dims;
    let hw = h * w;
    let scale = F::from_f64(1.0 / (c as f64).sqrt());

    let (xn, norm) = group_norm_fwd(&p.norm, x, groups);
    let tok = to_tokens(&xn);
    let q = dense_fwd(&p.q, &tok);
    let k = dense_fwd(&p.k, &tok);
    let v = dense_fwd(&p.v, &tok);

    let mut probs = Array3::zeros((hw, n, n));
    let mut gathered = Array2::zeros((hw * n, c));
    for s in 0..hw {
        let rows = s * n..(s + 1) * n;
        let qs = q.slice(ndarray::s![rows.clone(), ..]);
        let ks = k.slice(ndarray::s![rows.clone(), ..]);
        let vs = v.slice(ndarray::s![rows.clone(), ..]);
        let mut scores = qs.dot(&ks.t());
        scores *= scale;
        // row-wise softmax
        for mut row in scores.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        gathered.slice_mut(ndarray::s![rows, ..]).assign(&scores.dot(&vs));
        probs.index_axis_mut(Axis(0), s).assign(&scores);
    }
    let out_tok = dense_fwd(&p.o, &gathered);
    let y = x + &from_tokens(&out_tok, dims);
    (y, AttnCache { norm, tok, q, k, v, probs, gathered, dims })
}

pub fn attn_bwd<F: El>(
    p: &TemporalAttn<F>,
    cache: &AttnCache<F>,
    dy: &Array4<F>,
    groups: usize,
) -> (Array4<F>, TemporalAttn<F>) {
    let (n, c, h, w) = cache.dims;
    let hw = h * w;
    let scale = F::from_f64(1.0 / (c as f64).sqrt());

    let dy_tok = to_tokens(dy);
    let (dgathered, d_o) = dense_bwd(&p.o, &cache.gathered, &dy_tok);

    let mut dq = Array2::zeros((hw * n, c));
    let mut dk = Array2::zeros((hw * n, c));
    let mut dv = Array2::zeros((hw * n, c));
    for s in 0..hw {
        let rows = s * n..(s + 1) * n;
        let probs = cache.probs.index_axis(Axis(0), s);
        let dg = dgathered.slice(ndarray::s![rows.clone(), ..]);
        let vs = cache.v.slice(ndarray::s![rows.clone(), ..]);
        let qs = cache.q.slice(ndarray::s![rows.clone(), ..]);
        let ks = cache.k.slice(ndarray::s![rows.clone(), ..]);

        dv.slice_mut(ndarray::s![rows.clone(), ..]).assign(&probs.t().dot(&dg));
        let dprobs = dg.dot(&vs.t());
        // softmax backward per row: ds = p * (dp - sum(dp * p))
        let mut dscores = dprobs.clone();
        for (mut ds_row, p_row) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let dot = ds_row
                .iter()
                .zip(p_row.iter())
                .map(|(a, b)| *a * *b)
                .fold(F::zero(), |a, b| a + b);
            ndarray::Zip::from(&mut ds_row).and(&p_row).for_each(|d, p| {
                *d = *p * (*d - dot);
            });
        }
        dscores *= scale;
        dq.slice_mut(ndarray::s![rows.clone(), ..]).assign(&dscores.dot(&ks));
        dk.slice_mut(ndarray::s![rows, ..]).assign(&dscores.t().dot(&qs));
    }

    let (dtok_q, d_q) = dense_bwd(&p.q, &cache.tok, &dq);
    let (dtok_k, d_k) = dense_bwd(&p.k, &cache.tok, &dk);
    let (dtok_v, d_v) = dense_bwd(&p.v, &cache.tok, &dv);
    let dtok = dtok_q + dtok_k + dtok_v;

    let dxn = from_tokens(&dtok, cache.dims);
    let (dx_norm, d_norm) = group_norm_bwd(&p.norm, &cache.norm, &dxn, groups);
    let dx = dy + &dx_norm;
    (dx, TemporalAttn { norm: d_norm, q: d_q, k: d_k, v: d_v, o: d_o })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use crate::nn::testutil::fd_check;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_attn(c: usize, rng: &mut ChaCha8Rng) -> TemporalAttn<f64> {
        let dense = |rng: &mut ChaCha8Rng| Dense {
            w: Array2::from_shape_fn((c, c), |_| randn::<f64, _>(rng) * 0.5),
            b: Array1::from_shape_fn(c, |_| randn::<f64, _>(rng) * 0.1),
        };
        TemporalAttn {
            norm: Norm {
                g: Array1::from_shape_fn(c, |_| 1.0 + 0.2 * randn::<f64, _>(rng)),
                b: Array1::from_shape_fn(c, |_| 0.1 * randn::<f64, _>(rng)),
            },
            q: dense(rng),
            k: dense(rng),
            v: dense(rng),
            o: dense(rng),
        }
    }

    #[test]
    fn token_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((3, 4, 2, 5), |_| randn::<f64, _>(&mut rng));
        let back = from_tokens(&to_tokens(&x), x.dim());
        assert_eq!(back, x);
    }

    #[test]
    fn attention_propagates_across_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_attn(4, &mut rng);
        let x = Array4::from_shape_fn((2, 4, 2, 2), |_| randn::<f64, _>(&mut rng));
        let mut x2 = x.clone();
        x2[[0, 1, 0, 0]] += 1.0; // frame 0 only
        let (y, _) = attn_fwd(&p, &x, 2);
        let (y2, _) = attn_fwd(&p, &x2, 2);
        // frame 1 sees the change through temporal attention
        let d = (y[[1, 0, 0, 0]] - y2[[1, 0, 0, 0]]).abs();
        assert!(d > 1e-6, "no temporal mixing {d}");
    }

    #[test]
    fn zero_weights_make_attention_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut p = rand_attn(4, &mut rng);
        p.o.w.fill(0.0);
        p.o.b.fill(0.0);
        let x = Array4::from_shape_fn((3, 4, 2, 2), |_| randn::<f64, _>(&mut rng));
        let (y, _) = attn_fwd(&p, &x, 2);
        assert_eq!(y, x);
    }

    #[test]
    fn attention_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let groups = 2;
        let p = rand_attn(c, &mut rng);
        let x = Array4::from_shape_fn((3, c, 2, 2), |_| randn::<f64, _>(&mut rng));
        let wts = Array4::from_shape_fn((3, c, 2, 2), |_| randn::<f64, _>(&mut rng));
        let (_, cache) = attn_fwd(&p, &x, groups);
        let (dx, dp) = attn_bwd(&p, &cache, &wts, groups);

        let loss = |p2: &TemporalAttn<f64>, x2: &Array4<f64>| -> f64 {
            attn_fwd(p2, x2, groups)
                .0
                .iter()
                .zip(wts.iter())
                .map(|(a, b)| a * b)
                .sum()
        };

        fd_check(
            |xm| loss(&p, &xm.clone().into_dimensionality().unwrap()),
            &x.clone().into_dyn(),
            &dx.into_dyn(),
            30,
            4,
            1e-5,
        );
        fd_check(
            |wm| {
                let mut p2 = p.clone();
                p2.q.w = wm.clone().into_dimensionality().unwrap();
                loss(&p2, &x)
            },
            &p.q.w.clone().into_dyn(),
            &dp.q.w.clone().into_dyn(),
            16,
            5,
            1e-5,
        );
        fd_check(
            |wm| {
                let mut p2 = p.clone();
                p2.k.w = wm.clone().into_dimensionality().unwrap();
                loss(&p2, &x)
            },
            &p.k.w.clone().into_dyn(),
            &dp.k.w.clone().into_dyn(),
            16,
            6,
            1e-5,
        );
        fd_check(
            |wm| {
                let mut p2 = p.clone();
                p2.v.w = wm.clone().into_dimensionality().unwrap();
                loss(&p2, &x)
            },
            &p.v.w.clone().into_dyn(),
            &dp.v.w.clone().into_dyn(),
            16,
            7,
            1e-5,
        );
        fd_check(
            |wm| {
                let mut p2 = p.clone();
                p2.o.w = wm.clone().into_dimensionality().unwrap();
                loss(&p2, &x)
            },
            &p.o.w.clone().into_dyn(),
            &dp.o.w.clone().into_dyn(),
            16,
            8,
            1e-5,
        );
        fd_check(
            |gm| {
                let mut p2 = p.clone();
                p2.norm.g = gm.clone().into_dimensionality().unwrap();
                loss(&p2, &x)
            },
            &p.norm.g.clone().into_dyn(),
            &dp.norm.g.clone().into_dyn(),
            4,
            9,
            1e-5,
        );
    }
}

//! The compact spatio-temporal noise-prediction network.
//!
//! Two resolution levels (widths `width1`, `width2`), per-frame 2D residual
//! conv blocks, one temporal self-attention layer per level, sinusoidal
//! timestep embedding injected through per-block scale-shift, and a caption
//! embedding added onto the timestep embedding. The output head is
//! zero-initialized so an untrained network predicts exactly zero noise.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::attention::{attn_bwd, attn_fwd, AttnCache, TemporalAttn};
use super::embed::{sinusoidal_embedding, token_mean_bwd, token_mean_fwd};
use super::layers::{
    conv2d_bwd, conv2d_fwd, dense_bwd, dense_fwd, group_norm_bwd, group_norm_fwd, silu_bwd,
    silu_fwd, silu_vec_bwd, silu_vec_fwd, upsample2_bwd, upsample2_fwd, Conv2d, Dense, Norm,
    NormCache,
};
use super::{randn, El};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::mask::{ConditionalInput, FrameMask};

/// Architecture hyperparameters; the parameter manifest is a pure function
/// of this config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Latent channels `c` of one block of the conditional input (input has `3c`).
    pub latent_channels: usize,
    /// Level-1 (full resolution) width.
    pub width1: usize,
    /// Level-2 (half resolution) width.
    pub width2: usize,
    /// Conditioning vector dimension.
    pub time_embed_dim: usize,
    /// Sinusoidal timestep embedding dimension.
    pub sin_dim: usize,
    /// Caption embedding dimension.
    pub text_embed_dim: usize,
    /// Group count for all normalization layers.
    pub norm_groups: usize,
    /// Token vocabulary rows in the caption embedding table.
    pub vocab_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            width1: 32,
            width2: 64,
            time_embed_dim: 128,
            sin_dim: 64,
            text_embed_dim: 64,
            norm_groups: 8,
            vocab_size: crate::data::vocab_size(),
        }
    }
}

impl ArchConfig {
    /// Small config used by gradient checks: 1 latent channel, 4x4 frames.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 1,
            width1: 8,
            width2: 16,
            time_embed_dim: 16,
            sin_dim: 8,
            text_embed_dim: 8,
            norm_groups: 4,
            vocab_size: crate::data::vocab_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latent_channels >= 1
            && self.width1 >= self.norm_groups
            && self.width2 >= self.norm_groups
            && self.width1 % self.norm_groups == 0
            && self.width2 % self.norm_groups == 0
            && (2 * self.width1) % self.norm_groups == 0
            && self.sin_dim >= 2
            && self.sin_dim % 2 == 0
            && self.time_embed_dim >= 1
            && self.text_embed_dim >= 1
            && self.vocab_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArg(format!("inconsistent architecture config: {self:?}")))
        }
    }
}

/// Residual block with conditioning injected as a per-channel scale-shift
/// after the second normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<F> {
    pub norm1: Norm<F>,
    pub conv1: Conv2d<F>,
    /// Conditioning projection to `2 * c_out` (scale, shift).
    pub cond: Dense<F>,
    pub norm2: Norm<F>,
    pub conv2: Conv2d<F>,
    /// 1x1 projection on the residual path when channel counts differ.
    pub skip: Option<Conv2d<F>>,
}

pub struct ResCache<F> {
    x: Array4<F>,
    n1: NormCache<F>,
    s1_in: Array4<F>,
    c1_in: Array4<F>,
    cond_raw: Array1<F>,
    cond_act: Array2<F>,
    scale: Array1<F>,
    n2: NormCache<F>,
    hn: Array4<F>,
    h2: Array4<F>,
    c2_in: Array4<F>,
}

impl<F: El> ResBlock<F> {
    fn fwd(&self, x: &Array4<F>, cond: &Array1<F>, groups: usize) -> (Array4<F>, ResCache<F>) {
        let c_out = self.conv1.w.dim().0;
        let (s1_in, n1) = group_norm_fwd(&self.norm1, x, groups);
        let c1_in = silu_fwd(&s1_in);
        let h1 = conv2d_fwd(&self.conv1, &c1_in, 1);

        let cond_act_vec = silu_vec_fwd(cond);
        let cond_act = cond_act_vec.insert_axis(Axis(0)).to_owned();
        let sb = dense_fwd(&self.cond, &cond_act);
        let scale = sb.slice(ndarray::s![0, 0..c_out]).to_owned();
        let shift = sb.slice(ndarray::s![0, c_out..]).to_owned();

        let (hn, n2) = group_norm_fwd(&self.norm2, &h1, groups);
        let mut h2 = hn.clone();
        for ci in 0..c_out {
            let mut lane = h2.slice_mut(ndarray::s![.., ci, .., ..]);
            lane *= F::one() + scale[ci];
            lane += shift[ci];
        }
        let c2_in = silu_fwd(&h2);
        let h4 = conv2d_fwd(&self.conv2, &c2_in, 1);

        let y = match &self.skip {
            Some(sc) => h4 + conv2d_fwd(sc, x, 1),
            None => h4 + x,
        };
        let cache = ResCache {
            x: x.clone(),
            n1,
            s1_in,
            c1_in,
            cond_raw: cond.clone(),
            cond_act,
            scale,
            n2,
            hn,
            h2,
            c2_in,
        };
        (y, cache)
    }

    /// Returns `(dx, dcond, grads)`.
    fn bwd(&self, cache: &ResCache<F>, dy: &Array4<F>, groups: usize) -> (Array4<F>, Array1<F>, ResBlock<F>) {
        let c_out = self.conv1.w.dim().0;

        let (dx_skip, d_skip) = match &self.skip {
            Some(sc) => {
                let (dxs, dsc) = conv2d_bwd(sc, &cache.x, dy, 1);
                (dxs, Some(dsc))
            }
            None => (dy.clone(), None),
        };

        let (dc2_in, d_conv2) = conv2d_bwd(&self.conv2, &cache.c2_in, dy, 1);
        let dh2 = silu_bwd(&cache.h2, &dc2_in);

        let mut dhn = dh2.clone();
        let mut dsb = Array2::zeros((1, 2 * c_out));
        for ci in 0..c_out {
            let mut lane = dhn.slice_mut(ndarray::s![.., ci, .., ..]);
            lane *= F::one() + cache.scale[ci];
            let dh2_lane = dh2.slice(ndarray::s![.., ci, .., ..]);
            let hn_lane = cache.hn.slice(ndarray::s![.., ci, .., ..]);
            dsb[[0, ci]] = dh2_lane
                .iter()
                .zip(hn_lane.iter())
                .map(|(a, b)| *a * *b)
                .fold(F::zero(), |a, b| a + b);
            dsb[[0, c_out + ci]] = dh2_lane.sum();
        }
        let (dcond_act, d_cond) = dense_bwd(&self.cond, &cache.cond_act, &dsb);
        let dcond = silu_vec_bwd(&cache.cond_raw, &dcond_act.index_axis(Axis(0), 0).to_owned());

        let (dh1, d_norm2) = group_norm_bwd(&self.norm2, &cache.n2, &dhn, groups);
        let (dc1_in, d_conv1) = conv2d_bwd(&self.conv1, &cache.c1_in, &dh1, 1);
        let ds1_in = silu_bwd(&cache.s1_in, &dc1_in);
        let (dx_main, d_norm1) = group_norm_bwd(&self.norm1, &cache.n1, &ds1_in, groups);

        let dx = dx_main + dx_skip;
        let grads = ResBlock {
            norm1: d_norm1,
            conv1: d_conv1,
            cond: d_cond,
            norm2: d_norm2,
            conv2: d_conv2,
            skip: d_skip,
        };
        (dx, dcond, grads)
    }
}

/// All learnable tensors of the denoiser plus the architecture they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub arch: ArchConfig,
    pub time1: Dense<F>,
    pub time2: Dense<F>,
    pub text_table: Array2<F>,
    pub text_proj: Dense<F>,
    pub conv_in: Conv2d<F>,
    pub res1: ResBlock<F>,
    pub attn1: TemporalAttn<F>,
    pub down: Conv2d<F>,
    pub res2: ResBlock<F>,
    pub attn2: TemporalAttn<F>,
    pub up: Conv2d<F>,
    pub res3: ResBlock<F>,
    pub out_norm: Norm<F>,
    pub out_conv: Conv2d<F>,
}

fn he_conv<F: El>(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv2d<F> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    Conv2d {
        w: Array4::from_shape_fn((cout, cin, k, k), |_| randn::<F, _>(rng) * F::from_f64(std)),
        b: Array1::zeros(cout),
    }
}

fn he_dense<F: El>(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Dense<F> {
    let std = (2.0 / inp as f64).sqrt();
    Dense {
        w: Array2::from_shape_fn((out, inp), |_| randn::<F, _>(rng) * F::from_f64(std)),
        b: Array1::zeros(out),
    }
}

fn unit_norm<F: El>(c: usize) -> Norm<F> {
    Norm { g: Array1::ones(c), b: Array1::zeros(c) }
}

fn init_res<F: El>(cin: usize, cout: usize, de: usize, rng: &mut ChaCha8Rng) -> ResBlock<F> {
    ResBlock {
        norm1: unit_norm(cin),
        conv1: he_conv(cout, cin, 3, rng),
        cond: he_dense(2 * cout, de, rng),
        norm2: unit_norm(cout),
        conv2: he_conv(cout, cout, 3, rng),
        skip: (cin != cout).then(|| he_conv(cout, cin, 1, rng)),
    }
}

fn init_attn<F: El>(c: usize, rng: &mut ChaCha8Rng) -> TemporalAttn<F> {
    TemporalAttn {
        norm: unit_norm(c),
        q: he_dense(c, c, rng),
        k: he_dense(c, c, rng),
        v: he_dense(c, c, rng),
        o: he_dense(c, c, rng),
    }
}

impl<F: El> DenoiserParams<F> {
    /// Deterministic initialization from a seed; the output head starts at
    /// zero so the initial prediction is zero everywhere.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w1, w2, de) =
            (arch.latent_channels, arch.width1, arch.width2, arch.time_embed_dim);
        Ok(Self {
            arch: arch.clone(),
            time1: he_dense(de, arch.sin_dim, &mut rng),
            time2: he_dense(de, de, &mut rng),
            text_table: Array2::from_shape_fn((arch.vocab_size, arch.text_embed_dim), |_| {
                randn::<F, _>(&mut rng)
            }),
            text_proj: he_dense(de, arch.text_embed_dim, &mut rng),
            conv_in: he_conv(w1, 3 * c, 3, &mut rng),
            res1: init_res(w1, w1, de, &mut rng),
            attn1: init_attn(w1, &mut rng),
            down: he_conv(w2, w1, 3, &mut rng),
            res2: init_res(w2, w2, de, &mut rng),
            attn2: init_attn(w2, &mut rng),
            up: he_conv(w1, w2, 3, &mut rng),
            res3: init_res(2 * w1, w1, de, &mut rng),
            out_norm: unit_norm(w1),
            out_conv: Conv2d { w: Array4::zeros((c, w1, 3, 3)), b: Array1::zeros(c) },
        })
    }

    /// Named views over every parameter tensor, in a fixed order.
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        fn dense<'a, F: El>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, p: &str, d: &'a Dense<F>) {
            out.push((format!("{p}.w"), d.w.view().into_dyn()));
            out.push((format!("{p}.b"), d.b.view().into_dyn()));
        }
        fn conv<'a, F: El>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, p: &str, c: &'a Conv2d<F>) {
            out.push((format!("{p}.w"), c.w.view().into_dyn()));
            out.push((format!("{p}.b"), c.b.view().into_dyn()));
        }
        fn norm<'a, F: El>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, p: &str, n: &'a Norm<F>) {
            out.push((format!("{p}.g"), n.g.view().into_dyn()));
            out.push((format!("{p}.b"), n.b.view().into_dyn()));
        }
        fn res<'a, F: El>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, p: &str, r: &'a ResBlock<F>) {
            norm(out, &format!("{p}.norm1"), &r.norm1);
            conv(out, &format!("{p}.conv1"), &r.conv1);
            dense(out, &format!("{p}.cond"), &r.cond);
            norm(out, &format!("{p}.norm2"), &r.norm2);
            conv(out, &format!("{p}.conv2"), &r.conv2);
            if let Some(sc) = &r.skip {
                conv(out, &format!("{p}.skip"), sc);
            }
        }
        fn attn<'a, F: El>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, p: &str, a: &'a TemporalAttn<F>) {
            norm(out, &format!("{p}.norm"), &a.norm);
            dense(out, &format!("{p}.q"), &a.q);
            dense(out, &format!("{p}.k"), &a.k);
            dense(out, &format!("{p}.v"), &a.v);
            dense(out, &format!("{p}.o"), &a.o);
        }

        let mut out: Vec<(String, ArrayViewD<'_, F>)> = Vec::new();
        dense(&mut out, "time1", &self.time1);
        dense(&mut out, "time2", &self.time2);
        out.push(("text.table".to_string(), self.text_table.view().into_dyn()));
        dense(&mut out, "text_proj", &self.text_proj);
        conv(&mut out, "conv_in", &self.conv_in);
        res(&mut out, "res1", &self.res1);
        attn(&mut out, "attn1", &self.attn1);
        conv(&mut out, "down", &self.down);
        res(&mut out, "res2", &self.res2);
        attn(&mut out, "attn2", &self.attn2);
        conv(&mut out, "up", &self.up);
        res(&mut out, "res3", &self.res3);
        norm(&mut out, "out_norm", &self.out_norm);
        conv(&mut out, "out_conv", &self.out_conv);
        out
    }

    /// Mutable twin of [`Self::named_views`]; same names, same order.
    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        fn dense<'a, F: El>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, p: &str, d: &'a mut Dense<F>) {
            out.push((format!("{p}.w"), d.w.view_mut().into_dyn()));
            out.push((format!("{p}.b"), d.b.view_mut().into_dyn()));
        }
        fn conv<'a, F: El>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, p: &str, c: &'a mut Conv2d<F>) {
            out.push((format!("{p}.w"), c.w.view_mut().into_dyn()));
            out.push((format!("{p}.b"), c.b.view_mut().into_dyn()));
        }
        fn norm<'a, F: El>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, p: &str, n: &'a mut Norm<F>) {
            out.push((format!("{p}.g"), n.g.view_mut().into_dyn()));
            out.push((format!("{p}.b"), n.b.view_mut().into_dyn()));
        }
        fn res<'a, F: El>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, p: &str, r: &'a mut ResBlock<F>) {
            norm(out, &format!("{p}.norm1"), &mut r.norm1);
            conv(out, &format!("{p}.conv1"), &mut r.conv1);
            dense(out, &format!("{p}.cond"), &mut r.cond);
            norm(out, &format!("{p}.norm2"), &mut r.norm2);
            conv(out, &format!("{p}.conv2"), &mut r.conv2);
            if let Some(sc) = &mut r.skip {
                conv(out, &format!("{p}.skip"), sc);
            }
        }
        fn attn<'a, F: El>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, p: &str, a: &'a mut TemporalAttn<F>) {
            norm(out, &format!("{p}.norm"), &mut a.norm);
            dense(out, &format!("{p}.q"), &mut a.q);
            dense(out, &format!("{p}.k"), &mut a.k);
            dense(out, &format!("{p}.v"), &mut a.v);
            dense(out, &format!("{p}.o"), &mut a.o);
        }

        let mut out: Vec<(String, ArrayViewMutD<'_, F>)> = Vec::new();
        dense(&mut out, "time1", &mut self.time1);
        dense(&mut out, "time2", &mut self.time2);
        out.push(("text.table".to_string(), self.text_table.view_mut().into_dyn()));
        dense(&mut out, "text_proj", &mut self.text_proj);
        conv(&mut out, "conv_in", &mut self.conv_in);
        res(&mut out, "res1", &mut self.res1);
        attn(&mut out, "attn1", &mut self.attn1);
        conv(&mut out, "down", &mut self.down);
        res(&mut out, "res2", &mut self.res2);
        attn(&mut out, "attn2", &mut self.attn2);
        conv(&mut out, "up", &mut self.up);
        res(&mut out, "res3", &mut self.res3);
        norm(&mut out, "out_norm", &mut self.out_norm);
        conv(&mut out, "out_conv", &mut self.out_conv);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut v) in z.named_views_mut() {
            v.fill(F::zero());
        }
        z
    }

    /// `self += scale * other`, tensorwise.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let theirs = other.named_views();
        for ((_, mut mine), (_, their)) in self.named_views_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(&their, |m, t| *m = *m + *t * scale);
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// Name -> shape manifest; total and reproducible from the config alone.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.named_views()
            .into_iter()
            .map(|(n, v)| (n, v.shape().to_vec()))
            .collect()
    }
}

pub struct CondCache<F> {
    sin: Array2<F>,
    e1: Array2<F>,
    e1_act: Array2<F>,
    text_emb: Array1<F>,
}

pub struct FwdCache<F> {
    pub x: Array4<F>,
    cond: CondCache<F>,
    r1: ResCache<F>,
    a1_in_cache: AttnCache<F>,
    a1: Array4<F>,
    r2: ResCache<F>,
    a2_in_cache: AttnCache<F>,
    u0: Array4<F>,
    r3: ResCache<F>,
    on_cache: NormCache<F>,
    on: Array4<F>,
    oa: Array4<F>,
    tokens: Option<Vec<usize>>,
}

fn cond_fwd<F: El>(p: &DenoiserParams<F>, t: usize, text_emb: &Array1<F>) -> (Array1<F>, CondCache<F>) {
    let sin = sinusoidal_embedding::<F>(t, p.arch.sin_dim)
        .insert_axis(Axis(0))
        .to_owned();
    let e1 = dense_fwd(&p.time1, &sin);
    let e1_act = Array2::from_shape_fn(e1.dim(), |(i, j)| {
        let v = e1[[i, j]];
        v * (F::one() / (F::one() + (-v).exp()))
    });
    let e2 = dense_fwd(&p.time2, &e1_act);
    let tp = dense_fwd(&p.text_proj, &text_emb.clone().insert_axis(Axis(0)).to_owned());
    let cond = (&e2 + &tp).index_axis(Axis(0), 0).to_owned();
    (cond, CondCache { sin, e1, e1_act, text_emb: text_emb.clone() })
}

fn cond_bwd<F: El>(
    p: &DenoiserParams<F>,
    cache: &CondCache<F>,
    dcond: &Array1<F>,
    grads: &mut DenoiserParams<F>,
) -> Array1<F> {
    let d2 = dcond.clone().insert_axis(Axis(0)).to_owned();
    let (de1_act, d_time2) = dense_bwd(&p.time2, &cache.e1_act, &d2);
    grads.time2.w += &d_time2.w;
    grads.time2.b += &d_time2.b;
    // silu backward on the (1, de) row
    let e1_row = cache.e1.index_axis(Axis(0), 0).to_owned();
    let de1 = silu_vec_bwd(&e1_row, &de1_act.index_axis(Axis(0), 0).to_owned());
    let (_, d_time1) = dense_bwd(&p.time1, &cache.sin, &de1.insert_axis(Axis(0)).to_owned());
    grads.time1.w += &d_time1.w;
    grads.time1.b += &d_time1.b;

    let text_in = cache.text_emb.clone().insert_axis(Axis(0)).to_owned();
    let (d_text_emb, d_proj) = dense_bwd(&p.text_proj, &text_in, &d2);
    grads.text_proj.w += &d_proj.w;
    grads.text_proj.b += &d_proj.b;
    d_text_emb.index_axis(Axis(0), 0).to_owned()
}

/// Forward pass; `tokens` enables the caption-table gradient on backward.
pub fn forward_with_cache<F: El>(
    p: &DenoiserParams<F>,
    x: &Array4<F>,
    t: usize,
    text_emb: &Array1<F>,
    tokens: Option<&[usize]>,
) -> Result<(Array4<F>, FwdCache<F>)> {
    let (n, cx, h, w) = x.dim();
    let c = p.arch.latent_channels;
    if cx != 3 * c {
        return Err(Error::ShapeMismatch(format!(
            "conditional input has {cx} channels, architecture expects {}",
            3 * c
        )));
    }
    if n == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "spatial dims must be even and >= 2, got {n} x {h} x {w}"
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArg("timestep must be >= 1".into()));
    }
    if text_emb.len() != p.arch.text_embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "caption embedding dim {} vs config {}",
            text_emb.len(),
            p.arch.text_embed_dim
        )));
    }
    let groups = p.arch.norm_groups;

    let (cond, cond_cache) = cond_fwd(p, t, text_emb);
    let h0 = conv2d_fwd(&p.conv_in, x, 1);
    let (r1_out, r1) = p.res1.fwd(&h0, &cond, groups);
    let (a1, a1_in_cache) = attn_fwd(&p.attn1, &r1_out, groups);
    let h1 = conv2d_fwd(&p.down, &a1, 2);
    let (r2_out, r2) = p.res2.fwd(&h1, &cond, groups);
    let (a2, a2_in_cache) = attn_fwd(&p.attn2, &r2_out, groups);
    let u0 = upsample2_fwd(&a2);
    let u1 = conv2d_fwd(&p.up, &u0, 1);
    let cat = ndarray::concatenate(Axis(1), &[u1.view(), a1.view()])
        .unwrap()
        .as_standard_layout()
        .into_owned();
    let (r3_out, r3) = p.res3.fwd(&cat, &cond, groups);
    let (on, on_cache) = group_norm_fwd(&p.out_norm, &r3_out, groups);
    let oa = silu_fwd(&on);
    let eps = conv2d_fwd(&p.out_conv, &oa, 1);

    let cache = FwdCache {
        x: x.clone(),
        cond: cond_cache,
        r1,
        a1_in_cache,
        a1,
        r2,
        a2_in_cache,
        u0,
        r3,
        on_cache,
        on,
        oa,
        tokens: tokens.map(|t| t.to_vec()),
    };
    Ok((eps, cache))
}

/// Backward pass from `d_eps`; returns parameter gradients.
pub fn backward<F: El>(
    p: &DenoiserParams<F>,
    cache: &FwdCache<F>,
    d_eps: &Array4<F>,
) -> DenoiserParams<F> {
    let groups = p.arch.norm_groups;
    let w1 = p.arch.width1;
    let mut grads = p.zeros_like();

    let (doa, d_out_conv) = conv2d_bwd(&p.out_conv, &cache.oa, d_eps, 1);
    grads.out_conv = d_out_conv;
    let don = silu_bwd(&cache.on, &doa);
    let (dr3, d_out_norm) = group_norm_bwd(&p.out_norm, &cache.on_cache, &don, groups);
    grads.out_norm = d_out_norm;

    let (dcat, dcond3, d_res3) = p.res3.bwd(&cache.r3, &dr3, groups);
    grads.res3 = d_res3;
    let du1 = dcat.slice(ndarray::s![.., 0..w1, .., ..]).to_owned();
    let da1_skip = dcat.slice(ndarray::s![.., w1.., .., ..]).to_owned();

    let (du0, d_up) = conv2d_bwd(&p.up, &cache.u0, &du1, 1);
    grads.up = d_up;
    let da2 = upsample2_bwd(&du0);
    let (dr2, d_attn2) = attn_bwd(&p.attn2, &cache.a2_in_cache, &da2, groups);
    grads.attn2 = d_attn2;
    let (dh1, dcond2, d_res2) = p.res2.bwd(&cache.r2, &dr2, groups);
    grads.res2 = d_res2;
    let (da1_main, d_down) = conv2d_bwd(&p.down, &cache.a1, &dh1, 2);
    grads.down = d_down;
    let da1 = da1_main + da1_skip;
    let (dr1, d_attn1) = attn_bwd(&p.attn1, &cache.a1_in_cache, &da1, groups);
    grads.attn1 = d_attn1;
    let (dh0, dcond1, d_res1) = p.res1.bwd(&cache.r1, &dr1, groups);
    grads.res1 = d_res1;
    let (_, d_conv_in) = conv2d_bwd(&p.conv_in, &cache.x, &dh0, 1);
    grads.conv_in = d_conv_in;

    let dcond = dcond1 + dcond2 + dcond3;
    let d_text_emb = cond_bwd(p, &cache.cond, &dcond, &mut grads);
    if let Some(tokens) = &cache.tokens {
        grads.text_table = token_mean_bwd(p.text_table.dim(), tokens, &d_text_emb);
    }
    grads
}

/// Caption embedding vector as produced by the parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding(pub Array1<f32>);

pub fn embed_caption(params: &DenoiserParams<f32>, tokens: &[usize]) -> Result<CaptionEmbedding> {
    if tokens.is_empty() {
        return Err(Error::InvalidArg("caption has no tokens".into()));
    }
    if let Some(bad) = tokens.iter().find(|t| **t >= params.arch.vocab_size) {
        return Err(Error::Vocab(format!("token id {bad} outside the embedding table")));
    }
    Ok(CaptionEmbedding(token_mean_fwd(&params.text_table, tokens)))
}

/// Predicts the corrupting noise for a conditional input at timestep `t`.
/// Deterministic given `(params, input, t, text)`.
pub fn predict_noise(
    params: &DenoiserParams<f32>,
    input: &ConditionalInput,
    t: usize,
    text: &CaptionEmbedding,
) -> Result<LatentGrid> {
    let (eps, _) = forward_with_cache(params, &input.values, t, &text.0, None)?;
    Ok(LatentGrid { values: eps })
}

/// Which frames contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSupport {
    /// All frames, visible conditioning frames included.
    AllFrames,
    /// Only frames the mask marks as to-generate (bit 0).
    MaskedOnly,
}

/// One training example.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub input: ConditionalInput,
    pub t: usize,
    pub tokens: Vec<usize>,
    pub eps_true: LatentGrid,
    pub mask: FrameMask,
}

/// Loss and gradients of one training sample; the generic core behind
/// [`loss_and_gradients`]. `mask_bits` selects the supported frames when
/// `support` is `MaskedOnly`.
pub fn sample_loss_and_grads<F: El>(
    params: &DenoiserParams<F>,
    input: &Array4<F>,
    t: usize,
    tokens: &[usize],
    eps_true: &Array4<F>,
    mask_bits: &[u8],
    support: LossSupport,
) -> Result<(F, DenoiserParams<F>)> {
    let text_emb = token_mean_fwd(&params.text_table, tokens);
    let (pred, cache) = forward_with_cache(params, input, t, &text_emb, Some(tokens))?;
    if pred.dim() != eps_true.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs eps_true {:?}",
            pred.dim(),
            eps_true.dim()
        )));
    }
    if mask_bits.len() != pred.dim().0 {
        return Err(Error::ShapeMismatch("mask length vs frame count".into()));
    }
    let mut residual = &pred - eps_true;
    let count = match support {
        LossSupport::AllFrames => residual.len(),
        LossSupport::MaskedOnly => {
            let per_frame = residual.len() / residual.dim().0;
            let mut kept = 0usize;
            for (i, bit) in mask_bits.iter().enumerate() {
                if *bit == 1 {
                    residual.index_axis_mut(Axis(0), i).fill(F::zero());
                } else {
                    kept += per_frame;
                }
            }
            kept
        }
    };
    if count == 0 {
        return Ok((F::zero(), params.zeros_like()));
    }
    let inv = F::one() / F::from_f64(count as f64);
    let loss = residual.iter().map(|r| *r * *r).fold(F::zero(), |a, b| a + b) * inv;
    let two = F::from_f64(2.0);
    let d_pred = residual.mapv(|r| two * r * inv);
    let grads = backward(params, &cache, &d_pred);
    Ok((loss, grads))
}

/// Batch-mean loss and manifest-shaped gradients.
///
/// Items are processed in parallel; the reduction order is fixed, so results
/// are bit-identical across runs on one platform.
pub fn loss_and_gradients(
    params: &DenoiserParams<f32>,
    batch: &[BatchItem],
    support: LossSupport,
) -> Result<(f32, DenoiserParams<f32>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let results: Vec<Result<(f32, DenoiserParams<f32>)>> = batch
        .par_iter()
        .map(|item| {
            sample_loss_and_grads(
                params,
                &item.input.values,
                item.t,
                &item.tokens,
                &item.eps_true.values,
                item.mask.bits(),
                support,
            )
        })
        .collect();

    let mut total = params.zeros_like();
    let mut loss_sum = 0.0f64;
    let scale = 1.0 / batch.len() as f32;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss as f64;
        total.add_scaled(&grads, scale);
    }
    let loss = (loss_sum / batch.len() as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;
    use crate::diffusion::sample_noise_grid;
    use crate::mask::{assemble_input, apply_mask, sample_mask};
    use crate::nn::testutil::fd_check;
    use rand::Rng;

    fn demo_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ConditionalInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_t = sample_noise_grid(n, c, h, w, &mut rng);
        let z0 = sample_noise_grid(n, c, h, w, &mut rng);
        let mask = sample_mask(n, 0.3, &mut rng).unwrap();
        let z0m = apply_mask(&z0, &mask).unwrap();
        assemble_input(&z_t, &mask, &z0m).unwrap()
    }

    fn caption_tokens() -> Vec<usize> {
        tokenize("a red circle staying still on a white background").unwrap()
    }

    #[test]
    fn output_shape_matches_latent_block() {
        let arch = ArchConfig::default();
        let params = DenoiserParams::<f32>::init(&arch, 1).unwrap();
        let input = demo_input(4, 3, 16, 16, 2);
        let text = embed_caption(&params, &caption_tokens()).unwrap();
        let pred = predict_noise(&params, &input, 10, &text).unwrap();
        assert_eq!(pred.shape(), (4, 3, 16, 16));
    }

    #[test]
    fn prediction_is_deterministic() {
        let arch = ArchConfig::tiny();
        let mut params = DenoiserParams::<f32>::init(&arch, 3).unwrap();
        randomize_all(&mut params, 7);
        let input = demo_input(2, 1, 4, 4, 4);
        let text = embed_caption(&params, &caption_tokens()).unwrap();
        let a = predict_noise(&params, &input, 5, &text).unwrap();
        let b = predict_noise(&params, &input, 5, &text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_initialized_head_predicts_zero() {
        let arch = ArchConfig::tiny();
        let params = DenoiserParams::<f32>::init(&arch, 5).unwrap();
        let input = demo_input(2, 1, 4, 4, 6);
        let text = embed_caption(&params, &caption_tokens()).unwrap();
        let pred = predict_noise(&params, &input, 3, &text).unwrap();
        assert!(pred.values.iter().all(|v| *v == 0.0));
    }

    fn randomize_all(params: &mut DenoiserParams<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, mut view) in params.named_views_mut() {
            for v in view.iter_mut() {
                *v += 0.05 * rng.random::<f32>();
            }
        }
    }

    #[test]
    fn timestep_reaches_the_network() {
        let arch = ArchConfig::tiny();
        let mut params = DenoiserParams::<f32>::init(&arch, 8).unwrap();
        randomize_all(&mut params, 9);
        let input = demo_input(2, 1, 4, 4, 10);
        let text = embed_caption(&params, &caption_tokens()).unwrap();
        let a = predict_noise(&params, &input, 1, &text).unwrap();
        let b = predict_noise(&params, &input, 200, &text).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn caption_reaches_the_network() {
        let arch = ArchConfig::tiny();
        let mut params = DenoiserParams::<f32>::init(&arch, 11).unwrap();
        randomize_all(&mut params, 12);
        let input = demo_input(2, 1, 4, 4, 13);
        let t1 = embed_caption(&params, &caption_tokens()).unwrap();
        let t2 = embed_caption(
            &params,
            &tokenize("a blue square growing on a navy background").unwrap(),
        )
        .unwrap();
        let a = predict_noise(&params, &input, 5, &t1).unwrap();
        let b = predict_noise(&params, &input, 5, &t2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_mismatched_input() {
        let arch = ArchConfig::tiny();
        let params = DenoiserParams::<f32>::init(&arch, 14).unwrap();
        let text = embed_caption(&params, &caption_tokens()).unwrap();
        // 2 channels instead of 3*c=3
        let bad = ConditionalInput { values: ndarray::Array4::zeros((2, 2, 4, 4)) };
        assert!(predict_noise(&params, &bad, 3, &text).is_err());
        // odd spatial dims
        let odd = ConditionalInput { values: ndarray::Array4::zeros((2, 3, 5, 4)) };
        assert!(predict_noise(&params, &odd, 3, &text).is_err());
        // t = 0
        let ok = ConditionalInput { values: ndarray::Array4::zeros((2, 3, 4, 4)) };
        assert!(predict_noise(&params, &ok, 0, &text).is_err());
    }

    #[test]
    fn manifest_is_total_and_reproducible() {
        let arch = ArchConfig::tiny();
        let a = DenoiserParams::<f32>::init(&arch, 1).unwrap();
        let b = DenoiserParams::<f32>::init(&arch, 99).unwrap();
        // same manifest regardless of seed
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.param_count(), b.param_count());
        // names unique
        let names: std::collections::HashSet<_> =
            a.manifest().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), a.manifest().len());
        // res3 bridges 2*w1 -> w1, so it carries a skip projection
        assert!(a.manifest().iter().any(|(n, _)| n == "res3.skip.w"));
    }

    #[test]
    fn full_network_gradients_match_fd() {
        // f64 instantiation of the exact training-loss path
        let arch = ArchConfig::tiny();
        let mut params = DenoiserParams::<f64>::init(&arch, 15).unwrap();
        // the zero head must move too; give it small random values
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for v in params.out_conv.w.iter_mut() {
            *v = 0.02 * randn::<f64, _>(&mut rng);
        }
        let n = 2;
        let input = ndarray::Array4::from_shape_fn((n, 3, 4, 4), |_| randn::<f64, _>(&mut rng));
        let eps_true = ndarray::Array4::from_shape_fn((n, 1, 4, 4), |_| randn::<f64, _>(&mut rng));
        let tokens = caption_tokens();
        let bits = vec![1u8, 0];

        let (_, grads) = sample_loss_and_grads(
            &params,
            &input,
            3,
            &tokens,
            &eps_true,
            &bits,
            LossSupport::AllFrames,
        )
        .unwrap();

        // spot-check a few load-bearing tensors end to end
        for (name, analytic) in [
            ("conv_in.w", grads.conv_in.w.clone().into_dyn()),
            ("res2.cond.w", grads.res2.cond.w.clone().into_dyn()),
            ("attn1.q.w", grads.attn1.q.w.clone().into_dyn()),
            ("out_conv.w", grads.out_conv.w.clone().into_dyn()),
            ("text.table", grads.text_table.clone().into_dyn()),
            ("time1.w", grads.time1.w.clone().into_dyn()),
        ] {
            let base = params
                .named_views()
                .iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .to_owned();
            fd_check(
                |tensor| {
                    let mut p2 = params.clone();
                    for (n2, mut view) in p2.named_views_mut() {
                        if n2 == name {
                            view.assign(tensor);
                        }
                    }
                    let (loss, _) = sample_loss_and_grads(
                        &p2,
                        &input,
                        3,
                        &tokens,
                        &eps_true,
                        &bits,
                        LossSupport::AllFrames,
                    )
                    .unwrap();
                    loss
                },
                &base,
                &analytic,
                10,
                17,
                1e-3,
            );
        }
    }

    #[test]
    fn masked_only_support_ignores_visible_frames() {
        let arch = ArchConfig::tiny();
        let mut params = DenoiserParams::<f64>::init(&arch, 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for v in params.out_conv.w.iter_mut() {
            *v = 0.02 * randn::<f64, _>(&mut rng);
        }
        let input = ndarray::Array4::from_shape_fn((2, 3, 4, 4), |_| randn::<f64, _>(&mut rng));
        let eps = ndarray::Array4::from_shape_fn((2, 1, 4, 4), |_| randn::<f64, _>(&mut rng));
        let tokens = caption_tokens();

        // changing eps_true on the visible frame must not change the loss
        let (l1, _) = sample_loss_and_grads(&params, &input, 2, &tokens, &eps, &[1, 0], LossSupport::MaskedOnly).unwrap();
        let mut eps2 = eps.clone();
        eps2.index_axis_mut(Axis(0), 0).fill(9.0);
        let (l2, _) = sample_loss_and_grads(&params, &input, 2, &tokens, &eps2, &[1, 0], LossSupport::MaskedOnly).unwrap();
        assert_eq!(l1, l2);

        // fully visible sample contributes nothing
        let (l3, g3) = sample_loss_and_grads(&params, &input, 2, &tokens, &eps, &[1, 1], LossSupport::MaskedOnly).unwrap();
        assert_eq!(l3, 0.0);
        assert!(g3.named_views().iter().all(|(_, v)| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn batch_duplication_leaves_loss_and_grads_unchanged() {
        let arch = ArchConfig::tiny();
        let params = {
            let mut p = DenoiserParams::<f32>::init(&arch, 20).unwrap();
            randomize_all(&mut p, 21);
            p
        };
        let item = BatchItem {
            input: demo_input(2, 1, 4, 4, 22),
            t: 4,
            tokens: caption_tokens(),
            eps_true: sample_noise_grid(2, 1, 4, 4, &mut ChaCha8Rng::seed_from_u64(23)),
            mask: sample_mask(2, 0.5, &mut ChaCha8Rng::seed_from_u64(24)).unwrap(),
        };
        let (l1, g1) = loss_and_gradients(&params, &[item.clone()], LossSupport::AllFrames).unwrap();
        let batch: Vec<BatchItem> = vec![item.clone(), item.clone(), item];
        let (l2, g2) = loss_and_gradients(&params, &batch, LossSupport::AllFrames).unwrap();
        assert!((l1 - l2).abs() < 1e-7, "{l1} vs {l2}");
        for ((_, a), (_, b)) in g1.named_views().iter().zip(g2.named_views().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn perfect_prediction_means_zero_loss_and_zero_grads() {
        // zero head predicts zero; zero target noise makes that perfect
        let arch = ArchConfig::tiny();
        let params = DenoiserParams::<f32>::init(&arch, 25).unwrap();
        let item = BatchItem {
            input: demo_input(2, 1, 4, 4, 26),
            t: 3,
            tokens: caption_tokens(),
            eps_true: LatentGrid::zeros(2, 1, 4, 4),
            mask: sample_mask(2, 0.5, &mut ChaCha8Rng::seed_from_u64(27)).unwrap(),
        };
        let (loss, grads) = loss_and_gradients(&params, &[item], LossSupport::AllFrames).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.named_views().iter().all(|(_, v)| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let params = DenoiserParams::<f32>::init(&ArchConfig::tiny(), 28).unwrap();
        assert!(loss_and_gradients(&params, &[], LossSupport::AllFrames).is_err());
    }
}

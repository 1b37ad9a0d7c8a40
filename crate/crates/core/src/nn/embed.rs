//! Timestep and caption embeddings.

use ndarray::{Array1, Array2};

use super::El;

/// Sinusoidal position embedding of a diffusion timestep, `dim` must be even.
pub fn sinusoidal_embedding<F: El>(t: usize, dim: usize) -> Array1<F> {
    assert!(dim >= 2 && dim % 2 == 0, "sinusoidal dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = F::from_f64(arg.sin());
        out[half + i] = F::from_f64(arg.cos());
    }
    out
}

/// Caption embedding: mean of the token embedding-table rows.
pub fn token_mean_fwd<F: El>(table: &Array2<F>, tokens: &[usize]) -> Array1<F> {
    assert!(!tokens.is_empty(), "caption must have at least one token");
    let d = table.dim().1;
    let mut out = Array1::zeros(d);
    for &tok in tokens {
        out += &table.row(tok);
    }
    out / F::from_f64(tokens.len() as f64)
}

/// Scatter-adds the mean gradient back into the table rows.
pub fn token_mean_bwd<F: El>(
    table_shape: (usize, usize),
    tokens: &[usize],
    d_emb: &Array1<F>,
) -> Array2<F> {
    let mut grad = Array2::zeros(table_shape);
    let scale = F::one() / F::from_f64(tokens.len() as f64);
    for &tok in tokens {
        let mut row = grad.row_mut(tok);
        ndarray::Zip::from(&mut row).and(d_emb).for_each(|g, d| *g = *g + *d * scale);
    }
    grad
}

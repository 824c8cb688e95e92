//! Random-feature projection matrices for the linear-attention heads.
//!
//! Rows come from QR-orthogonalized Gaussian blocks, then each row is rescaled
//! to the norm of a fresh Gaussian vector. Orthogonal directions with
//! chi-distributed lengths keep the feature map unbiased for the softmax
//! kernel while cutting its variance relative to independent rows.

use lifeseq_tensor::{kernels::axpy, kernels::dot, Tensor};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::rng::substream_indexed;

/// One projection matrix (`n_random_features x head_dim`) per global head per
/// layer, drawn deterministically from a seed. Training redraws with a fresh
/// seed each epoch; generation rebuilds from the seed stored in the checkpoint.
#[derive(Debug, Clone)]
pub struct Projections {
    seed: u64,
    per_layer: Vec<Vec<Tensor>>,
}

impl Projections {
    pub fn draw(config: &ModelConfig, seed: u64) -> Self {
        let n_global = config.n_global_heads();
        let per_layer = (0..config.n_layers)
            .map(|layer| {
                (0..n_global)
                    .map(|h| {
                        let idx = (layer * n_global + h) as u64;
                        let mut rng = substream_indexed(seed, "performer-projection", idx);
                        orthogonal_features(config.n_random_features, config.head_dim(), &mut rng)
                    })
                    .collect()
            })
            .collect();
        Projections { seed, per_layer }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Projection for global head `g` (0-based among global heads) of `layer`.
    pub fn head(&self, layer: usize, g: usize) -> &Tensor {
        &self.per_layer[layer][g]
    }
}

/// `m x d` matrix whose rows are orthogonal within each block of `d` and have
/// independently chi(d)-distributed norms.
pub fn orthogonal_features(m: usize, d: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let mut out = Tensor::zeros(m, d);
    let mut done = 0;
    while done < m {
        let block = orthonormal_block(d, rng);
        let take = d.min(m - done);
        for r in 0..take {
            let norm = gaussian_norm(d, rng);
            let row = out.row_mut(done + r);
            for (o, &q) in row.iter_mut().zip(block.row(r)) {
                *o = q * norm;
            }
        }
        done += take;
    }
    out
}

/// Orthonormal `d x d` matrix via modified Gram-Schmidt on a Gaussian draw.
/// A degenerate row (never seen in practice with continuous draws) is redrawn.
fn orthonormal_block(d: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let mut q = Tensor::zeros(d, d);
    let mut i = 0;
    while i < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for j in 0..i {
            let c = -dot(&v, q.row(j));
            axpy(c, q.row(j), &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-12 {
            continue;
        }
        let row = q.row_mut(i);
        for (o, x) in row.iter_mut().zip(&v) {
            *o = x / norm;
        }
        i += 1;
    }
    q
}

/// Norm of a fresh `d`-dimensional standard Gaussian vector.
fn gaussian_norm(d: usize, rng: &mut ChaCha12Rng) -> f64 {
    (0..d).map(|_| -> f64 { StandardNormal.sample(rng) }).map(|g| g * g).sum::<f64>().sqrt()
}

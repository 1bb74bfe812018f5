//! Low-rank adapter algebra for the selected matrices.
//!
//! Each adapter is a pair (A, B) with A of shape m_k x r and B of shape
//! r x h_k; the adapted weight is W + A B. A starts as a small Gaussian
//! and B as exact zero, so freshly attached adapters leave the forward
//! pass untouched. No extra scaling factor is applied; any such constant
//! is absorbed into the learning rate.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{AdapterView, DenoiserParams, ModelDims};
use crate::error::{Error, Result};
use crate::ids::MatrixId;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor2D;

/// Standard deviation of the Gaussian used to initialize A.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// A rank-r adapter attached to one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: MatrixId,
    pub a: Tensor2D,
    pub b: Tensor2D,
    pub rank: usize,
}

impl LoraAdapter {
    /// The low-rank update A B, materialized.
    pub fn delta(&self) -> Tensor2D {
        self.a.matmul(&self.b)
    }

    pub fn trainable_len(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Adapters for every selected matrix, keyed canonically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub adapters: BTreeMap<MatrixId, LoraAdapter>,
}

impl TrainableSet {
    /// Total trainable parameter count: sum of r (m_k + h_k).
    pub fn trainable_len(&self) -> usize {
        self.adapters.values().map(LoraAdapter::trainable_len).sum()
    }

    /// Borrowed views for the denoiser's forward pass.
    pub fn views(&self) -> BTreeMap<MatrixId, AdapterView<'_>> {
        self.adapters
            .iter()
            .map(|(id, ad)| (*id, AdapterView { a: &ad.a, b: &ad.b }))
            .collect()
    }
}

/// Attach fresh adapters of the given rank to every selected matrix.
///
/// A is seeded Gaussian (std 0.02), B is zero, so the effective weights
/// initially equal the frozen weights.
pub fn attach(
    selected: &[MatrixId],
    dims: &ModelDims,
    rank: usize,
    seed: u64,
) -> Result<TrainableSet> {
    if rank == 0 {
        return Err(Error::InvalidParameter {
            name: "rank",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = substream(seed, Stream::AdapterInit);
    let dist = Normal::new(0.0, ADAPTER_INIT_STD).unwrap();
    let mut adapters = BTreeMap::new();
    for &id in selected {
        let (rows, cols) = dims.shape(&id);
        if rank > rows.min(cols) {
            return Err(Error::RankTooLarge {
                rank,
                id: id.to_string(),
                rows,
                cols,
            });
        }
        let a = Tensor2D::from_values(
            rows,
            rank,
            (0..rows * rank).map(|_| dist.sample(&mut rng)).collect(),
        )?;
        let b = Tensor2D::zeros(rank, cols);
        adapters.insert(
            id,
            LoraAdapter {
                target: id,
                a,
                b,
                rank,
            },
        );
    }
    Ok(TrainableSet { adapters })
}

/// Adapted weight W + A B.
pub fn effective_weight(frozen: &Tensor2D, adapter: &LoraAdapter) -> Result<Tensor2D> {
    if frozen.rows != adapter.a.rows || frozen.cols != adapter.b.cols {
        return Err(Error::InvalidParameter {
            name: "adapter",
            reason: format!(
                "adapter {}x{} * {}x{} does not match weight {}x{}",
                adapter.a.rows, adapter.a.cols, adapter.b.rows, adapter.b.cols, frozen.rows, frozen.cols
            ),
        });
    }
    Ok(frozen.add(&adapter.delta()))
}

/// Substitute W' = W + A B for every adapted matrix; everything else is
/// carried over bit-identically.
pub fn merge(frozen: &DenoiserParams, set: &TrainableSet) -> Result<DenoiserParams> {
    let mut merged = frozen.clone();
    for (id, adapter) in &set.adapters {
        let w = frozen.get(id);
        merged.matrices.insert(*id, effective_weight(w, adapter)?);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, ModelDims, IMAGE_DIM};
    use crate::ids::{AttnSite, Role};

    fn dims() -> ModelDims {
        ModelDims::default()
    }

    fn some_pool() -> Vec<MatrixId> {
        vec![
            MatrixId::attn(0, AttnSite::SelfAttn, Role::V),
            MatrixId::attn(2, AttnSite::Cross, Role::V),
        ]
    }

    #[test]
    fn fresh_adapters_leave_forward_pass_unchanged() {
        let params = DenoiserParams::init(dims(), 10, 42);
        let model = Denoiser::new(params.clone()).unwrap();
        let set = attach(&some_pool(), &dims(), 4, 7).unwrap();

        let x: Vec<f64> = (0..IMAGE_DIM).map(|i| (i as f64 * 0.11).cos()).collect();
        let frozen_out = model.predict_noise(&x, 3, 1).unwrap();

        let merged = merge(&params, &set).unwrap();
        assert_eq!(merged, params);
        let merged_out = Denoiser::new(merged).unwrap().predict_noise(&x, 3, 1).unwrap();
        for (a, b) in frozen_out.iter().zip(&merged_out) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trainable_count_is_r_times_m_plus_h() {
        // For a square 64x64 matrix at rank 4 that is 512 vs 4096.
        let d = ModelDims {
            blocks: 1,
            token_dim: 64,
            embed_dim: 64,
            n_classes: 2,
        };
        let pool = vec![MatrixId::attn(0, AttnSite::SelfAttn, Role::Q)];
        let set = attach(&pool, &d, 4, 0).unwrap();
        assert_eq!(set.trainable_len(), 4 * (64 + 64));
        let (r, c) = d.shape(&pool[0]);
        assert_eq!(r * c, 4096);
    }

    #[test]
    fn adapter_init_is_reproducible_and_b_is_zero() {
        let s1 = attach(&some_pool(), &dims(), 3, 5).unwrap();
        let s2 = attach(&some_pool(), &dims(), 3, 5).unwrap();
        assert_eq!(s1, s2);
        for ad in s1.adapters.values() {
            assert!(ad.b.values.iter().all(|&v| v == 0.0));
            assert!(ad.a.values.iter().any(|&v| v != 0.0));
        }
        let s3 = attach(&some_pool(), &dims(), 3, 6).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn rank_too_large_names_the_matrix() {
        let err = attach(&some_pool(), &dims(), 17, 0).unwrap_err().to_string();
        assert!(err.contains("b0.self.v"), "{err}");
    }

    #[test]
    fn effective_weight_zero_b_returns_frozen() {
        let w = Tensor2D::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ad = LoraAdapter {
            target: MatrixId::attn(0, AttnSite::SelfAttn, Role::Q),
            a: Tensor2D::from_values(2, 1, vec![0.3, -0.7]).unwrap(),
            b: Tensor2D::zeros(1, 2),
            rank: 1,
        };
        assert_eq!(effective_weight(&w, &ad).unwrap(), w);
    }

    #[test]
    fn rank_one_adapter_is_outer_product() {
        let w = Tensor2D::zeros(3, 2);
        let u = vec![1.0, -2.0, 0.5];
        let v = vec![3.0, 4.0];
        let ad = LoraAdapter {
            target: MatrixId::attn(0, AttnSite::SelfAttn, Role::Q),
            a: Tensor2D::from_values(3, 1, u.clone()).unwrap(),
            b: Tensor2D::from_values(1, 2, v.clone()).unwrap(),
            rank: 1,
        };
        let eff = effective_weight(&w, &ad).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((eff.get(r, c) - u[r] * v[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn effective_weight_matches_independent_recomputation() {
        let mut rng = substream(9, Stream::AdapterInit);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let w = Tensor2D::from_values(4, 5, (0..20).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let a = Tensor2D::from_values(4, 2, (0..8).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let b = Tensor2D::from_values(2, 5, (0..10).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let ad = LoraAdapter {
            target: MatrixId::attn(0, AttnSite::SelfAttn, Role::Q),
            a: a.clone(),
            b: b.clone(),
            rank: 2,
        };
        let eff = effective_weight(&w, &ad).unwrap();
        // Second route: naive triple loop.
        for r in 0..4 {
            for c in 0..5 {
                let mut dot = 0.0;
                for k in 0..2 {
                    dot += a.get(r, k) * b.get(k, c);
                }
                assert!((eff.get(r, c) - (w.get(r, c) + dot)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_weight_rejects_shape_mismatch() {
        let w = Tensor2D::zeros(3, 3);
        let ad = LoraAdapter {
            target: MatrixId::attn(0, AttnSite::SelfAttn, Role::Q),
            a: Tensor2D::zeros(2, 1),
            b: Tensor2D::zeros(1, 3),
            rank: 1,
        };
        assert!(effective_weight(&w, &ad).is_err());
    }

    #[test]
    fn merge_then_forward_equals_adapter_aware_forward() {
        let params = DenoiserParams::init(dims(), 10, 21);
        let mut set = attach(&some_pool(), &dims(), 4, 3).unwrap();
        // Give B nonzero content so the adapters actually do something.
        let mut rng = substream(17, Stream::AdapterInit);
        let dist = Normal::new(0.0, 0.05).unwrap();
        for ad in set.adapters.values_mut() {
            for v in &mut ad.b.values {
                *v = dist.sample(&mut rng);
            }
        }

        let model = Denoiser::new(params.clone()).unwrap();
        let x: Vec<f64> = (0..IMAGE_DIM).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect();

        // Adapter-aware forward.
        let mut tape = crate::autodiff::Tape::new();
        let bindings = crate::denoiser::ForwardBindings {
            adapters: set.views(),
            ..Default::default()
        };
        let node = model.build_forward(&mut tape, &bindings, &x, 2, 0).unwrap();
        let adapter_out = crate::denoiser::unpatchify(tape.value(node));

        // Merged forward.
        let merged = merge(&params, &set).unwrap();
        let merged_out = Denoiser::new(merged).unwrap().predict_noise(&x, 2, 0).unwrap();

        for (a, b) in adapter_out.iter().zip(&merged_out) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn merge_is_idempotent_once_adapters_are_zeroed() {
        let params = DenoiserParams::init(dims(), 10, 2);
        let mut set = attach(&some_pool(), &dims(), 2, 4).unwrap();
        for ad in set.adapters.values_mut() {
            for v in &mut ad.b.values {
                *v = 0.25;
            }
        }
        let merged = merge(&params, &set).unwrap();
        // Zero the adapters after merging; merging again changes nothing.
        for ad in set.adapters.values_mut() {
            for v in &mut ad.b.values {
                *v = 0.0;
            }
        }
        let merged_again = merge(&merged, &set).unwrap();
        assert_eq!(merged, merged_again);
    }
}

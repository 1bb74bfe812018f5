//! Saliency-aware parameter-matrix selection under differential privacy.
//!
//! One pass over the sensitive dataset computes a per-sample gradient of
//! the denoising loss with respect to every candidate matrix, clips the
//! joint (concatenated) gradient to `clip_s`, averages with the fixed
//! normalizer N*, adds Gaussian noise scaled to the query's sensitivity
//! `clip_s / N*`, and keeps the top-c matrices by privatized gradient
//! norm. The whole pass is a single Gaussian mechanism; its RDP cost is
//! `alpha / (2 sigma_s^2)` regardless of how many matrices compete.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::accountant::SelectionQueryParams;
use crate::denoiser::{Denoiser, ForwardBindings, Sample, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::ids::{AttnSite, MatrixId};
use crate::rng::{substream_indexed, Stream};
use crate::tensor::Tensor2D;

/// Outcome of one selection query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// Candidate pool, canonical order.
    pub pool: Vec<MatrixId>,
    /// Number of matrices kept: max(1, round(c * K)).
    pub h: usize,
    /// Noise multiplier used (0 = test-only, no noise).
    pub sigma_s: f64,
    /// Query sensitivity clip_s / N*.
    pub sensitivity: f64,
    /// Averaged clipped gradients S_k (pre-noise).
    pub s_k: BTreeMap<MatrixId, Tensor2D>,
    /// Privatized averages G~_k.
    pub g_tilde: BTreeMap<MatrixId, Tensor2D>,
    /// L2 norms of the privatized averages.
    pub norms: BTreeMap<MatrixId, f64>,
    /// Selected set, canonical order.
    pub selected: Vec<MatrixId>,
    /// Per-matrix noise-to-signal ratio:
    /// sigma_s * sensitivity * sqrt(dim_k) / ||G~_k||.
    pub ratio_table: BTreeMap<MatrixId, f64>,
}

/// Joint clipping: g / max(1, ||g||_2 / clip).
///
/// Returns the (possibly rescaled) vector; a zero vector passes through.
pub fn joint_clip(g: &[f64], clip: f64) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = 1.0 / (norm / clip).max(1.0);
    g.iter().map(|v| v * scale).collect()
}

/// Number of matrices kept for ratio c over a pool of size k: rounds half
/// away from zero and never drops below 1.
pub fn selection_count(c: f64, k: usize) -> usize {
    ((c * k as f64).round() as usize).clamp(1, k)
}

/// Per-sample gradients of the denoising loss over `pool`, one map per
/// sample in dataset order.
///
/// Each sample draws one uniform timestep and one noise vector from a
/// stream keyed by its index, independent of the training streams, so
/// neighboring datasets share the draws of their common samples.
pub fn per_sample_pool_grads(
    model: &Denoiser,
    dataset: &[Sample],
    pool: &[MatrixId],
    seed: u64,
) -> Result<Vec<BTreeMap<MatrixId, Tensor2D>>> {
    let bindings = ForwardBindings::tracking(pool.iter().cloned());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let t_max = model.schedule.len();
    let mut out = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.iter().enumerate() {
        let mut rng = substream_indexed(seed, Stream::Selection, i as u64);
        let t = rng.gen_range(1..=t_max);
        let noise: Vec<f64> = (0..IMAGE_DIM).map(|_| normal.sample(&mut rng)).collect();
        let eval = model.loss_eval(&bindings, sample, t, &noise)?;
        let grads = eval.backward()?;
        let mut per_matrix = BTreeMap::new();
        for (key, tensor) in grads.entries {
            if let crate::autodiff::LeafKey::Weight(id) = key {
                per_matrix.insert(id, tensor);
            }
        }
        out.push(per_matrix);
    }
    Ok(out)
}

/// Clip-and-average stage: jointly clip each per-sample gradient and
/// average with the fixed normalizer N*, in dataset order.
pub fn averaged_clipped_grads(
    pool: &[MatrixId],
    shapes: &dyn Fn(&MatrixId) -> (usize, usize),
    per_sample: &[BTreeMap<MatrixId, Tensor2D>],
    query: &SelectionQueryParams,
) -> BTreeMap<MatrixId, Tensor2D> {
    let mut sums: BTreeMap<MatrixId, Tensor2D> = pool
        .iter()
        .map(|id| {
            let (r, c) = shapes(id);
            (*id, Tensor2D::zeros(r, c))
        })
        .collect();
    for grads in per_sample {
        // Flatten in canonical pool order, clip jointly, partition back.
        let mut flat = Vec::new();
        for id in pool {
            match grads.get(id) {
                Some(t) => flat.extend_from_slice(&t.values),
                None => {
                    let (r, c) = shapes(id);
                    flat.extend(std::iter::repeat(0.0).take(r * c));
                }
            }
        }
        let clipped = joint_clip(&flat, query.clip_s);
        let mut offset = 0;
        for id in pool {
            let sum = sums.get_mut(id).unwrap();
            let n = sum.len();
            for (s, v) in sum.values.iter_mut().zip(&clipped[offset..offset + n]) {
                *s += v;
            }
            offset += n;
        }
    }
    let inv_n_star = 1.0 / query.n_star as f64;
    for sum in sums.values_mut() {
        sum.scale_in_place(inv_n_star);
    }
    sums
}

/// Privatize averaged gradients and rank matrices by privatized norm.
///
/// Noise is drawn in canonical matrix order, row-major within each
/// matrix; at `sigma_s = 0` (test-only mode) no noise is added. Ties in
/// the noisy norms break toward the canonical order.
pub fn privatize_and_rank<R: Rng>(
    pool: &[MatrixId],
    s_k: BTreeMap<MatrixId, Tensor2D>,
    query: &SelectionQueryParams,
    ratio_c: f64,
    rng: &mut R,
) -> Result<SaliencyReport> {
    if pool.is_empty() {
        return Err(Error::InvalidParameter {
            name: "pool",
            reason: "selection pool is empty".into(),
        });
    }
    query.validate()?;
    let sensitivity = query.sensitivity();
    let noise_std = query.sigma_s * sensitivity;
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut g_tilde = BTreeMap::new();
    let mut norms = BTreeMap::new();
    let mut ratio_table = BTreeMap::new();
    for id in pool {
        let mut noisy = s_k[id].clone();
        if noise_std > 0.0 {
            for v in &mut noisy.values {
                *v += noise_std * normal.sample(rng);
            }
        }
        let norm = noisy.l2_norm();
        let total_noise = query.sigma_s * sensitivity * (noisy.len() as f64).sqrt();
        ratio_table.insert(*id, if norm > 0.0 { total_noise / norm } else { f64::INFINITY });
        norms.insert(*id, norm);
        g_tilde.insert(*id, noisy);
    }

    let h = selection_count(ratio_c, pool.len());
    let mut ranked: Vec<MatrixId> = pool.to_vec();
    ranked.sort_by(|a, b| {
        norms[b]
            .partial_cmp(&norms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut selected: Vec<MatrixId> = ranked.into_iter().take(h).collect();
    selected.sort();

    Ok(SaliencyReport {
        pool: pool.to_vec(),
        h,
        sigma_s: query.sigma_s,
        sensitivity,
        s_k,
        g_tilde,
        norms,
        selected,
        ratio_table,
    })
}

/// Matrix-wise saliency-aware selection over the sensitive dataset.
pub fn select(
    model: &Denoiser,
    dataset: &[Sample],
    pool: &[MatrixId],
    query: &SelectionQueryParams,
    ratio_c: f64,
    seed: u64,
) -> Result<SaliencyReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter {
            name: "dataset",
            reason: "selection dataset is empty".into(),
        });
    }
    if pool.is_empty() {
        return Err(Error::InvalidParameter {
            name: "pool",
            reason: "selection pool is empty".into(),
        });
    }
    let mut pool = pool.to_vec();
    pool.sort();
    let per_sample = per_sample_pool_grads(model, dataset, &pool, seed)?;
    let dims = model.params.dims;
    let shapes = move |id: &MatrixId| dims.shape(id);
    let s_k = averaged_clipped_grads(&pool, &shapes, &per_sample, query);
    let mut noise_rng = substream_indexed(seed, Stream::SelectionNoise, 0);
    privatize_and_rank(&pool, s_k, query, ratio_c, &mut noise_rng)
}

/// Layer-level variant: rank whole attention layers (the pooled q, k, v
/// of one self- or cross-attention site) by the norm of their
/// concatenated privatized gradients and keep every matrix of each
/// selected layer.
pub fn select_layer_level(
    model: &Denoiser,
    dataset: &[Sample],
    pool: &[MatrixId],
    query: &SelectionQueryParams,
    ratio_c: f64,
    seed: u64,
) -> Result<SaliencyReport> {
    let mut report = select(model, dataset, pool, query, ratio_c, seed)?;

    // Group by attention layer; non-attention matrices cannot be ranked
    // at layer granularity.
    let mut layers: Vec<(usize, AttnSite)> = Vec::new();
    for id in &report.pool {
        let key = id.layer_key().ok_or_else(|| Error::InvalidParameter {
            name: "pool",
            reason: format!("layer-level selection needs attention matrices, got {id}"),
        })?;
        if !layers.contains(&key) {
            layers.push(key);
        }
    }
    layers.sort();

    // Norm of the concatenated privatized gradient of a layer.
    let layer_norm = |key: &(usize, AttnSite)| -> f64 {
        report
            .pool
            .iter()
            .filter(|id| id.layer_key().as_ref() == Some(key))
            .map(|id| report.norms[id].powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let h_layers = selection_count(ratio_c, layers.len());
    let mut ranked = layers.clone();
    ranked.sort_by(|a, b| {
        layer_norm(b)
            .partial_cmp(&layer_norm(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let chosen: Vec<(usize, AttnSite)> = ranked.into_iter().take(h_layers).collect();

    let mut selected: Vec<MatrixId> = report
        .pool
        .iter()
        .filter(|id| {
            id.layer_key()
                .map(|k| chosen.contains(&k))
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    selected.sort();
    report.h = selected.len();
    report.selected = selected;
    Ok(report)
}

/// Data-independent uniform selection; consumes no privacy budget.
pub fn select_random<R: Rng>(pool: &[MatrixId], ratio_c: f64, rng: &mut R) -> Result<SaliencyReport> {
    if pool.is_empty() {
        return Err(Error::InvalidParameter {
            name: "pool",
            reason: "selection pool is empty".into(),
        });
    }
    let mut pool = pool.to_vec();
    pool.sort();
    let h = selection_count(ratio_c, pool.len());
    let idx = sample_indices(rng, pool.len(), h);
    let mut selected: Vec<MatrixId> = idx.iter().map(|i| pool[i]).collect();
    selected.sort();
    Ok(SaliencyReport {
        pool,
        h,
        sigma_s: 0.0,
        sensitivity: 0.0,
        s_k: BTreeMap::new(),
        g_tilde: BTreeMap::new(),
        norms: BTreeMap::new(),
        selected,
        ratio_table: BTreeMap::new(),
    })
}

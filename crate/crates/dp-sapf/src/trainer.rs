//! DP-SGD fine-tuning of the selected parameters.
//!
//! Each iteration Poisson-samples a sub-batch, computes per-sample
//! gradients of the trainable vector (LoRA factors, or the selected
//! weight matrices themselves in the direct mode), clips each flattened
//! gradient to `clip`, sums, normalizes by the fixed expected batch size
//! B* (never the realized batch size), adds Gaussian noise with
//! per-coordinate deviation `clip * sigma_d / b_star`, and applies a
//! plain SGD step. An empty batch still adds noise and counts toward the
//! iteration budget, so the accounting of t_d sub-sampled Gaussian steps
//! stays exact.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::accountant::{
    budget_ratios, calibrate_sigma_d, compose, gaussian_rdp, rdp_to_dp, sgm_rdp, PrivacySpec,
    RdpCurve, RenyiOrderGrid, SelectionQueryParams, SgmParams,
};
use crate::autodiff::LeafKey;
use crate::denoiser::{Denoiser, DenoiserParams, ForwardBindings, Sample, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::ids::MatrixId;
use crate::lora::{attach, merge, TrainableSet};
use crate::rng::{substream, substream_indexed, Stream};
use crate::saliency::{
    joint_clip, select, select_layer_level, select_random, SaliencyReport,
};

/// Which parameters the selection stage nominates for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Matrix-wise saliency-aware selection, LoRA fine-tuning.
    Saliency,
    /// Uniform random matrix selection, LoRA fine-tuning.
    Random,
    /// Layer-wise saliency selection, LoRA fine-tuning.
    Layer,
    /// Every attention matrix, LoRA fine-tuning (no selection query).
    AllAttention,
    /// Saliency selection over all learnable matrices.
    AllParameter,
    /// Saliency selection, then DP-SGD directly on the selected weights.
    NoLora,
}

impl SelectionMode {
    /// Whether the selection stage reads the sensitive data (and hence
    /// consumes the one-shot Gaussian query budget).
    pub fn consumes_selection_budget(&self) -> bool {
        !matches!(self, SelectionMode::Random | SelectionMode::AllAttention)
    }

    /// Whether fine-tuning updates LoRA factors rather than the weights.
    pub fn uses_adapters(&self) -> bool {
        !matches!(self, SelectionMode::NoLora)
    }
}

/// Full hyperparameter tuple for one fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Poisson sampling rate.
    pub q: f64,
    /// Fixed normalization constant B* = q N.
    pub b_star: f64,
    /// Iteration count.
    pub t_d: u64,
    /// DP-SGD noise multiplier; omit to calibrate from `epsilon`.
    pub sigma_d: Option<f64>,
    /// Clipping bound C for the flattened per-sample gradient.
    pub clip: f64,
    /// Learning rate.
    pub lr: f64,
    /// LoRA rank.
    pub rank: usize,
    /// Selection ratio c.
    pub ratio_c: f64,
    /// Target privacy budget; `None` means the non-private mode, which
    /// disables clipping and both noise injections.
    pub epsilon: Option<f64>,
    pub delta: f64,
    /// Selection-stage noise multiplier.
    pub sigma_s: f64,
    /// Selection-stage clipping bound.
    pub clip_s: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "q",
                reason: format!("must lie in (0, 1], got {}", self.q),
            });
        }
        if self.b_star <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "b_star",
                reason: "must be positive".into(),
            });
        }
        if self.t_d == 0 {
            return Err(Error::InvalidParameter {
                name: "t_d",
                reason: "must be at least 1".into(),
            });
        }
        if self.clip <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "clip",
                reason: "must be positive".into(),
            });
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "lr",
                reason: "must be positive".into(),
            });
        }
        if let Some(sd) = self.sigma_d {
            if sd < 0.0 {
                return Err(Error::InvalidParameter {
                    name: "sigma_d",
                    reason: "must be non-negative".into(),
                });
            }
        }
        Ok(())
    }

    pub fn non_private(&self) -> bool {
        self.epsilon.is_none()
    }
}

/// Desk-scale defaults; values the reference configuration fixes
/// (clipping bounds, learning rate, rank, ratio, sigma_s, iteration
/// count, expected batch size) are kept verbatim, only dataset sizes
/// shrink.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 0.125,
            b_star: 64.0,
            t_d: 1000,
            sigma_d: None,
            clip: 1.0,
            lr: 5e-4,
            rank: 4,
            ratio_c: 0.30,
            epsilon: Some(10.0),
            delta: 1e-4,
            sigma_s: 5.0,
            clip_s: 1.0,
            seed: 0,
        }
    }
}

/// Per-iteration bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// Iteration index h.
    pub h: u64,
    /// Realized Poisson batch size B.
    pub batch_size: usize,
    /// Mean loss over the batch (absent for empty batches).
    pub loss_mean: Option<f64>,
    /// Mean pre-clip gradient norm over the batch.
    pub grad_norm_mean: Option<f64>,
    /// Max pre-clip gradient norm over the batch.
    pub grad_norm_max: Option<f64>,
}

/// The accountant's certificate for a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyCertificate {
    pub non_private: bool,
    /// Achieved epsilon (absent in the non-private mode).
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub alpha_star: Option<f64>,
    pub gamma_total: Option<f64>,
    /// Fraction of the RDP cost spent by selection / DP-SGD.
    pub r_s: Option<f64>,
    pub r_d: Option<f64>,
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub q: f64,
    pub t_d: u64,
    /// Per-coordinate standard deviation of the noise in each update:
    /// lr * clip * sigma_d / b_star.
    pub update_noise_std: f64,
}

/// Everything a fine-tuning run produces besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: SelectionMode,
    pub certificate: PrivacyCertificate,
    pub selection: SaliencyReport,
    pub steps: Vec<StepRecord>,
    pub final_loss_mean: Option<f64>,
}

/// Result of [`train`]: fine-tuned parameters plus the run report and,
/// when adapters were used, the trained adapter set.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub adapters: Option<TrainableSet>,
    pub report: RunReport,
}

/// Poisson sub-sampling: each index enters independently with rate q.
pub fn poisson_sample<R: Rng>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "q",
            reason: format!("must lie in (0, 1], got {q}"),
        });
    }
    let mut out = Vec::new();
    for i in 0..n {
        if q >= 1.0 || rng.gen_bool(q) {
            out.push(i);
        }
    }
    Ok(out)
}

/// The trainable vector of a run: LoRA factors or raw selected weights.
enum Trainables {
    Adapters(TrainableSet),
    Weights(Vec<MatrixId>),
}

/// Fine-tuning engine; owns a working copy of the model.
pub struct DpTrainer {
    model: Denoiser,
    trainables: Trainables,
    flat_order: Vec<LeafKey>,
    shapes: BTreeMap<LeafKey, (usize, usize)>,
    config: TrainConfig,
}

impl DpTrainer {
    pub fn new(params: DenoiserParams, selected: &[MatrixId], mode: SelectionMode, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dims = params.dims;
        let trainables = if mode.uses_adapters() {
            Trainables::Adapters(attach(selected, &dims, config.rank, config.seed)?)
        } else {
            Trainables::Weights(selected.to_vec())
        };
        let mut flat_order = Vec::new();
        let mut shapes = BTreeMap::new();
        match &trainables {
            Trainables::Adapters(set) => {
                for (id, ad) in &set.adapters {
                    let ka = LeafKey::AdapterA(*id);
                    let kb = LeafKey::AdapterB(*id);
                    flat_order.push(ka);
                    flat_order.push(kb);
                    shapes.insert(ka, ad.a.shape());
                    shapes.insert(kb, ad.b.shape());
                }
            }
            Trainables::Weights(ids) => {
                for id in ids {
                    let key = LeafKey::Weight(*id);
                    flat_order.push(key);
                    shapes.insert(key, dims.shape(id));
                }
            }
        }
        Ok(Self {
            model: Denoiser::new(params)?,
            trainables,
            flat_order,
            shapes,
            config,
        })
    }

    /// Length of the flattened trainable vector.
    pub fn trainable_len(&self) -> usize {
        self.flat_order
            .iter()
            .map(|k| {
                let (r, c) = self.shapes[k];
                r * c
            })
            .sum()
    }

    fn bindings(&self) -> ForwardBindings<'_> {
        match &self.trainables {
            Trainables::Adapters(set) => ForwardBindings {
                adapters: set.views(),
                track_adapters: true,
                ..Default::default()
            },
            Trainables::Weights(ids) => ForwardBindings::tracking(ids.iter().cloned()),
        }
    }

    /// One DP-SGD iteration over a Poisson batch of (dataset index,
    /// sample) pairs. Returns the step record; the update is applied to
    /// the trainables in place.
    pub fn dp_step<R: Rng>(
        &mut self,
        batch: &[(usize, &Sample)],
        step_idx: u64,
        noise_rng: &mut R,
    ) -> Result<StepRecord> {
        let dim = self.trainable_len();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t_max = self.model.schedule.len();
        let non_private = self.config.non_private();

        let mut sum = vec![0.0; dim];
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut norm_max: f64 = 0.0;
        {
            let bindings = self.bindings();
            for &(sample_idx, sample) in batch {
                let key = (step_idx << 24) ^ sample_idx as u64;
                let mut rng = substream_indexed(self.config.seed, Stream::TrainSample, key);
                let t = rng.gen_range(1..=t_max);
                let noise: Vec<f64> = (0..IMAGE_DIM).map(|_| normal.sample(&mut rng)).collect();
                let eval = self.model.loss_eval(&bindings, sample, t, &noise)?;
                loss_sum += eval.loss();
                let flat = eval
                    .backward()?
                    .flatten(&self.flat_order, &|k| self.shapes[k]);
                if flat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "per-sample gradient at step {step_idx}, sample {sample_idx}"
                    )));
                }
                let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm_sum += norm;
                norm_max = norm_max.max(norm);
                let clipped = if non_private {
                    flat
                } else {
                    joint_clip(&flat, self.config.clip)
                };
                for (s, v) in sum.iter_mut().zip(&clipped) {
                    *s += v;
                }
            }
        }

        let inv_b_star = 1.0 / self.config.b_star;
        for s in sum.iter_mut() {
            *s *= inv_b_star;
        }
        let sigma_d = self.config.sigma_d.unwrap_or(0.0);
        if !non_private && sigma_d > 0.0 {
            let noise_std = self.config.clip * sigma_d * inv_b_star;
            for s in sum.iter_mut() {
                *s += noise_std * normal.sample(noise_rng);
            }
        }

        // Apply update = -lr * g_p.
        let lr = self.config.lr;
        let mut offset = 0;
        match &mut self.trainables {
            Trainables::Adapters(set) => {
                for (_, ad) in set.adapters.iter_mut() {
                    for v in ad.a.values.iter_mut() {
                        *v -= lr * sum[offset];
                        offset += 1;
                    }
                    for v in ad.b.values.iter_mut() {
                        *v -= lr * sum[offset];
                        offset += 1;
                    }
                }
            }
            Trainables::Weights(ids) => {
                for id in ids.iter() {
                    let w = self.model.params.matrices.get_mut(id).unwrap();
                    for v in w.values.iter_mut() {
                        *v -= lr * sum[offset];
                        offset += 1;
                    }
                }
            }
        }
        debug_assert_eq!(offset, dim);

        let b = batch.len();
        Ok(StepRecord {
            h: step_idx,
            batch_size: b,
            loss_mean: (b > 0).then(|| loss_sum / b as f64),
            grad_norm_mean: (b > 0).then(|| norm_sum / b as f64),
            grad_norm_max: (b > 0).then_some(norm_max),
        })
    }

    /// Current adapter set (adapter modes only).
    pub fn adapters(&self) -> Option<&TrainableSet> {
        match &self.trainables {
            Trainables::Adapters(set) => Some(set),
            Trainables::Weights(_) => None,
        }
    }

    /// Working parameters (updated in place only in the direct mode).
    pub fn params(&self) -> &DenoiserParams {
        &self.model.params
    }

    /// Fine-tuned parameters: merged adapters, or the updated weights.
    pub fn into_outcome(self) -> Result<(DenoiserParams, Option<TrainableSet>)> {
        match self.trainables {
            Trainables::Adapters(set) => {
                let merged = merge(&self.model.params, &set)?;
                Ok((merged, Some(set)))
            }
            Trainables::Weights(_) => Ok((self.model.params, None)),
        }
    }
}

/// Compute the privacy certificate for a run configuration.
///
/// The composed curve is `gaussian(sigma_s)` (when the selection stage
/// touched the data) plus `sgm(q, sigma_d, t_d)`; the certificate
/// depends only on this tuple, never on the trainable dimensionality.
pub fn certificate_for(
    config: &TrainConfig,
    mode: SelectionMode,
    grid: &RenyiOrderGrid,
) -> Result<PrivacyCertificate> {
    let sigma_d = config.sigma_d.unwrap_or(0.0);
    let update_noise_std = if config.non_private() {
        0.0
    } else {
        config.lr * config.clip * sigma_d / config.b_star
    };
    if config.non_private() {
        return Ok(PrivacyCertificate {
            non_private: true,
            epsilon: None,
            delta: config.delta,
            alpha_star: None,
            gamma_total: None,
            r_s: None,
            r_d: None,
            sigma_d,
            sigma_s: 0.0,
            q: config.q,
            t_d: config.t_d,
            update_noise_std,
        });
    }

    let selection_curve = if mode.consumes_selection_budget() && config.sigma_s > 0.0 {
        gaussian_rdp(config.sigma_s, grid)?
    } else {
        RdpCurve::zero(grid.clone())
    };
    let dpsgd_curve = sgm_rdp(
        &SgmParams {
            q: config.q,
            sigma: sigma_d,
            steps: config.t_d,
        },
        grid,
    )?;
    let composed = compose(&selection_curve, &dpsgd_curve)?;
    let (epsilon, alpha_star) = rdp_to_dp(&composed, config.delta)?;
    let split = budget_ratios(&selection_curve, &dpsgd_curve, config.delta)?;
    Ok(PrivacyCertificate {
        non_private: false,
        epsilon: Some(epsilon),
        delta: config.delta,
        alpha_star: Some(alpha_star),
        gamma_total: Some(split.gamma_total),
        r_s: Some(split.r_s),
        r_d: Some(split.r_d),
        sigma_d,
        sigma_s: if mode.consumes_selection_budget() {
            config.sigma_s
        } else {
            0.0
        },
        q: config.q,
        t_d: config.t_d,
        update_noise_std,
    })
}

/// Resolve an open noise multiplier by calibrating against the target;
/// leaves an explicit `sigma_d` untouched.
pub fn resolve_sigma_d(
    config: &mut TrainConfig,
    mode: SelectionMode,
    n_star: u64,
    grid: &RenyiOrderGrid,
) -> Result<()> {
    if config.sigma_d.is_some() {
        return Ok(());
    }
    match config.epsilon {
        Some(eps) => {
            let target = PrivacySpec {
                epsilon: eps,
                delta: config.delta,
            };
            let sel_for_budget = SelectionQueryParams {
                sigma_s: if mode.consumes_selection_budget() {
                    config.sigma_s
                } else {
                    0.0
                },
                clip_s: config.clip_s,
                n_star,
            };
            let sd = calibrate_sigma_d(&target, &sel_for_budget, config.q, config.t_d, grid)?;
            config.sigma_d = Some(sd);
        }
        None => config.sigma_d = Some(0.0),
    }
    Ok(())
}

/// The selection stage of a run: dispatches on the mode and returns
/// which matrices will be fine-tuned.
pub fn run_selection(
    public_params: &DenoiserParams,
    dataset: &[Sample],
    config: &TrainConfig,
    mode: SelectionMode,
) -> Result<SaliencyReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter {
            name: "dataset",
            reason: "training dataset is empty".into(),
        });
    }
    let query = SelectionQueryParams {
        // The non-private mode runs the selection pass without noise.
        sigma_s: if config.non_private() { 0.0 } else { config.sigma_s },
        clip_s: config.clip_s,
        n_star: dataset.len() as u64,
    };
    let model = Denoiser::new(public_params.clone())?;
    let dims = public_params.dims;
    let attention_pool = dims.attention_pool();
    match mode {
        SelectionMode::Saliency | SelectionMode::NoLora => select(
            &model,
            dataset,
            &attention_pool,
            &query,
            config.ratio_c,
            config.seed,
        ),
        SelectionMode::Layer => select_layer_level(
            &model,
            dataset,
            &attention_pool,
            &query,
            config.ratio_c,
            config.seed,
        ),
        SelectionMode::AllParameter => select(
            &model,
            dataset,
            &dims.full_pool(),
            &query,
            config.ratio_c,
            config.seed,
        ),
        SelectionMode::Random => {
            let mut rng = substream(config.seed, Stream::RandomSelect);
            select_random(&attention_pool, config.ratio_c, &mut rng)
        }
        SelectionMode::AllAttention => {
            let mut rng = substream(config.seed, Stream::RandomSelect);
            // Data-independent: the whole pool, no budget consumed.
            select_random(&attention_pool, 1.0, &mut rng)
        }
    }
}

/// Fine-tune against an already-computed selection: attach adapters (or
/// bind the selected weights directly), iterate `t_d` DP-SGD steps,
/// merge, and certify.
pub fn train_selected(
    start_params: &DenoiserParams,
    dataset: &[Sample],
    mut config: TrainConfig,
    mode: SelectionMode,
    selection: SaliencyReport,
    grid: &RenyiOrderGrid,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = dataset.len();
    resolve_sigma_d(&mut config, mode, n as u64, grid)?;
    let certificate = certificate_for(&config, mode, grid)?;

    let mut trainer = DpTrainer::new(
        start_params.clone(),
        &selection.selected,
        mode,
        config.clone(),
    )?;
    let mut batch_rng = substream(config.seed, Stream::BatchSampling);
    let mut noise_rng = substream(config.seed, Stream::TrainNoise);
    let mut steps = Vec::with_capacity(config.t_d as usize);
    for h in 0..config.t_d {
        let idx = poisson_sample(n, config.q, &mut batch_rng)?;
        let batch: Vec<(usize, &Sample)> = idx.into_iter().map(|i| (i, &dataset[i])).collect();
        steps.push(trainer.dp_step(&batch, h, &mut noise_rng)?);
    }

    let final_loss_mean = steps.iter().rev().find_map(|s| s.loss_mean);
    let (params, adapters) = trainer.into_outcome()?;
    Ok(TrainOutcome {
        params,
        adapters,
        report: RunReport {
            mode,
            certificate,
            selection,
            steps,
            final_loss_mean,
        },
    })
}

/// Run the full workflow: select (per mode), attach adapters, iterate
/// `t_d` DP-SGD steps, merge.
///
/// When `config.sigma_d` is absent and a finite target is set, the noise
/// multiplier is calibrated first; an infeasible target propagates as an
/// error.
pub fn train(
    public_params: &DenoiserParams,
    dataset: &[Sample],
    mut config: TrainConfig,
    mode: SelectionMode,
    grid: &RenyiOrderGrid,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter {
            name: "dataset",
            reason: "training dataset is empty".into(),
        });
    }
    resolve_sigma_d(&mut config, mode, dataset.len() as u64, grid)?;
    let selection = run_selection(public_params, dataset, &config, mode)?;
    train_selected(public_params, dataset, config, mode, selection, grid)
}

//! Experiment orchestration: public-model pretraining, fine-tuning
//! variants, metric evaluation, and hyperparameter sweeps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::accountant::RenyiOrderGrid;
use crate::data::Datasets;
use crate::denoiser::{Denoiser, DenoiserParams, ForwardBindings, ModelDims, Sample, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::rng::{substream, substream_indexed, Stream};
use crate::trainer::{
    run_selection, train_selected, RunReport, SelectionMode, TrainConfig, TrainOutcome,
};

/// The experiment variants... the saliency pipeline, its ablations, and
/// the two baselines (all-attention LoRA and the non-private mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Matrix-wise saliency selection + DP LoRA (the full pipeline).
    DpSapf,
    /// Random matrix selection instead of saliency.
    Random,
    /// Saliency selection, but unselected pool matrices are replaced
    /// with random values before fine-tuning.
    Noisy,
    /// Saliency selection, DP-SGD directly on the selected weights.
    WithoutLora,
    /// Layer-wise instead of matrix-wise selection.
    LayerLevel,
    /// Saliency selection over every learnable matrix.
    AllParameter,
    /// LoRA on the whole attention pool (no selection).
    AllAttention,
    /// The full pipeline without privacy (epsilon = infinity).
    NonPrivate,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::DpSapf,
        Variant::Random,
        Variant::Noisy,
        Variant::WithoutLora,
        Variant::LayerLevel,
        Variant::AllParameter,
        Variant::AllAttention,
        Variant::NonPrivate,
    ];

    pub fn mode(&self) -> SelectionMode {
        match self {
            Variant::DpSapf | Variant::Noisy | Variant::NonPrivate => SelectionMode::Saliency,
            Variant::Random => SelectionMode::Random,
            Variant::WithoutLora => SelectionMode::NoLora,
            Variant::LayerLevel => SelectionMode::Layer,
            Variant::AllParameter => SelectionMode::AllParameter,
            Variant::AllAttention => SelectionMode::AllAttention,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::DpSapf => "dp-sapf",
            Variant::Random => "random",
            Variant::Noisy => "noisy",
            Variant::WithoutLora => "without-lora",
            Variant::LayerLevel => "layer-level",
            Variant::AllParameter => "all-parameter",
            Variant::AllAttention => "all-attention",
            Variant::NonPrivate => "non-private",
        }
    }
}

/// Scale of the replacement values used by the noisy variant, matching
/// the adapter A-init scale.
pub const NOISY_REPLACEMENT_STD: f64 = 0.02;

/// Plain (non-private) mini-batch SGD over every learnable matrix.
///
/// Manufactures the public model by fitting the public split; aborts if
/// the loss leaves the finite range.
pub fn pretrain_public(
    public_data: &[Sample],
    dims: ModelDims,
    t_steps: usize,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<DenoiserParams> {
    if steps == 0 {
        return Err(Error::InvalidParameter {
            name: "steps",
            reason: "pretraining needs at least one step".into(),
        });
    }
    if public_data.is_empty() {
        return Err(Error::InvalidParameter {
            name: "public_data",
            reason: "pretraining data is empty".into(),
        });
    }
    let mut model = Denoiser::new(DenoiserParams::init(dims, t_steps, seed))?;
    let pool = dims.full_pool();
    let bindings = ForwardBindings::tracking(pool.iter().cloned());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut batch_rng = substream(seed, Stream::BatchSampling);
    let n = public_data.len();
    let t_max = model.schedule.len();

    for step in 0..steps {
        // Mean gradient over a uniformly drawn batch.
        let mut grads: Option<crate::autodiff::PerSampleGrad> = None;
        let mut loss_sum = 0.0;
        for b in 0..batch_size {
            let idx = batch_rng.gen_range(0..n);
            let mut rng =
                substream_indexed(seed, Stream::TrainSample, ((step as u64) << 24) ^ b as u64);
            let t = rng.gen_range(1..=t_max);
            let noise: Vec<f64> = (0..IMAGE_DIM).map(|_| normal.sample(&mut rng)).collect();
            let eval = model.loss_eval(&bindings, &public_data[idx], t, &noise)?;
            loss_sum += eval.loss();
            let g = eval.backward()?;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (k, t) in g.entries {
                        acc.entries
                            .entry(k)
                            .and_modify(|a| a.add_in_place(&t))
                            .or_insert(t);
                    }
                }
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let scale = lr / batch_size as f64;
        if let Some(grads) = grads {
            for (key, g) in grads.entries {
                if let crate::autodiff::LeafKey::Weight(id) = key {
                    let w = model.params.matrices.get_mut(&id).unwrap();
                    for (wv, gv) in w.values.iter_mut().zip(&g.values) {
                        *wv -= scale * gv;
                    }
                }
            }
        }
    }
    Ok(model.params)
}

/// Mean denoising loss over a dataset with draws from a fixed stream;
/// used for train-progress checks.
pub fn mean_loss(model: &Denoiser, data: &[Sample], seed: u64) -> Result<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let t_max = model.schedule.len();
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let mut rng = substream_indexed(seed, Stream::Selection, i as u64);
        let t = rng.gen_range(1..=t_max);
        let noise: Vec<f64> = (0..IMAGE_DIM).map(|_| normal.sample(&mut rng)).collect();
        total += model.loss(s, t, &noise)?;
    }
    Ok(total / data.len() as f64)
}

/// Sample a class-balanced synthetic set of `count` images.
pub fn sample_synthetic(
    params: &DenoiserParams,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let model = Denoiser::new(params.clone())?;
    let k = params.dims.n_classes;
    let per_class = count / k;
    let mut out = Vec::with_capacity(per_class * k);
    let mut rng = substream(seed, Stream::ImageSampling);
    for label in 0..k {
        for x0 in model.sample_images(label, per_class, &mut rng)? {
            out.push(Sample { x0, label });
        }
    }
    Ok(out)
}

/// Replace the listed matrices with i.i.d. Gaussian values (std 0.02).
pub fn randomize_matrices(
    params: &mut DenoiserParams,
    ids: &[crate::ids::MatrixId],
    seed: u64,
) {
    let mut rng = substream(seed, Stream::NoisyVariant);
    let dist = Normal::new(0.0, NOISY_REPLACEMENT_STD).unwrap();
    for id in ids {
        if let Some(w) = params.matrices.get_mut(id) {
            for v in w.values.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }
}

/// One variant run: fine-tune, sample synthetic images, evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub report: RunReport,
}

/// Fine-tune one variant against the sensitive split and evaluate it
/// with 4 x n_test class-balanced synthetic images.
pub fn run_variant(
    variant: Variant,
    public_params: &DenoiserParams,
    datasets: &Datasets,
    base_config: &TrainConfig,
    seed: u64,
    grid: &RenyiOrderGrid,
) -> Result<VariantResult> {
    let mut config = base_config.clone();
    config.seed = seed;
    if variant == Variant::NonPrivate {
        config.epsilon = None;
        config.sigma_d = None;
    }
    let mode = variant.mode();
    let data = &datasets.sensitive_train;

    crate::trainer::resolve_sigma_d(&mut config, mode, data.len() as u64, grid)?;
    let selection = run_selection(public_params, data, &config, mode)?;

    // The noisy ablation replaces the unselected pool matrices with
    // random values before fine-tuning.
    let mut start_params = public_params.clone();
    if variant == Variant::Noisy {
        let unselected: Vec<crate::ids::MatrixId> = selection
            .pool
            .iter()
            .filter(|id| !selection.selected.contains(id))
            .cloned()
            .collect();
        randomize_matrices(&mut start_params, &unselected, seed);
    }

    let outcome: TrainOutcome =
        train_selected(&start_params, data, config, mode, selection, grid)?;

    let synthetic = sample_synthetic(&outcome.params, 4 * datasets.sensitive_test.len(), seed)?;
    let metrics = evaluate(
        &synthetic,
        &datasets.sensitive_test,
        public_params.dims.n_classes,
    )?;
    Ok(VariantResult {
        variant,
        seed,
        metrics,
        report: outcome.report,
    })
}

/// Sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Epsilon,
    RatioC,
    SigmaS,
}

/// One sweep row: a (value, seed) cell with its metrics and certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub epsilon: Option<f64>,
    pub alpha_star: Option<f64>,
    pub sigma_d: f64,
    pub r_s: Option<f64>,
    pub r_d: Option<f64>,
}

/// Run the saliency pipeline across one hyperparameter axis; one row per
/// (value, seed).
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    public_params: &DenoiserParams,
    datasets: &Datasets,
    base_config: &TrainConfig,
    grid: &RenyiOrderGrid,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter {
            name: "values",
            reason: "sweep needs at least one value".into(),
        });
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut config = base_config.clone();
            config.sigma_d = None; // recalibrate per cell
            match axis {
                SweepAxis::Epsilon => config.epsilon = Some(value),
                SweepAxis::RatioC => config.ratio_c = value,
                SweepAxis::SigmaS => config.sigma_s = value,
            }
            let result = run_variant(
                Variant::DpSapf,
                public_params,
                datasets,
                &config,
                seed,
                grid,
            )?;
            let cert = &result.report.certificate;
            rows.push(SweepRow {
                axis,
                value,
                seed,
                metrics: result.metrics,
                epsilon: cert.epsilon,
                alpha_star: cert.alpha_star,
                sigma_d: cert.sigma_d,
                r_s: cert.r_s,
                r_d: cert.r_d,
            });
        }
    }
    Ok(rows)
}

//! Toy class-conditional attention denoiser with forward diffusion,
//! training loss, and ancestral sampling.
//!
//! Images are 8x8 grids in [-1, 1], split into 16 patches of 4 pixels.
//! Patches are embedded by a fixed random projection, a sinusoidal
//! timestep embedding is added, and L = 4 blocks of {self-attention ->
//! residual -> cross-attention against one class token -> residual ->
//! GELU MLP -> residual} feed a fixed linear read-out back to pixels.
//! Only the weight matrices listed in [`MatrixId`] are learnable; the
//! patch embedding and read-out are seeded constants shared by every
//! model.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{LeafKey, NodeId, PerSampleGrad, Tape};
use crate::error::{Error, Result};
use crate::ids::{AttnSite, MatrixId, MlpLayer, Role};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor2D;

/// Side length of the square image.
pub const IMAGE_SIDE: usize = 8;
/// Total pixels per image.
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Patches per side (2x2-pixel patches on an 8x8 grid).
pub const PATCH_GRID: usize = 4;
/// Number of patch tokens.
pub const N_TOKENS: usize = PATCH_GRID * PATCH_GRID;
/// Pixels per patch token.
pub const PATCH_DIM: usize = (IMAGE_SIDE / PATCH_GRID) * (IMAGE_SIDE / PATCH_GRID);

/// Architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of transformer blocks (L).
    pub blocks: usize,
    /// Token dimension (m).
    pub token_dim: usize,
    /// Class-embedding dimension (e).
    pub embed_dim: usize,
    /// Number of classes.
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            blocks: 4,
            token_dim: 16,
            embed_dim: 16,
            n_classes: 4,
        }
    }
}

impl ModelDims {
    /// Shape of one weight matrix.
    pub fn shape(&self, id: &MatrixId) -> (usize, usize) {
        let m = self.token_dim;
        let e = self.embed_dim;
        match id {
            MatrixId::Attn { site, role, .. } => match (site, role) {
                (AttnSite::SelfAttn, _) => (m, m),
                (AttnSite::Cross, Role::Q) => (m, m),
                (AttnSite::Cross, _) => (e, m),
            },
            MatrixId::Proj { .. } => (m, m),
            MatrixId::Mlp { layer, .. } => match layer {
                MlpLayer::Fc1 => (m, 4 * m),
                MlpLayer::Fc2 => (4 * m, m),
            },
            MatrixId::ClassEmbed => (self.n_classes, e),
        }
    }

    /// The attention q/k/v candidate pool, in canonical order.
    pub fn attention_pool(&self) -> Vec<MatrixId> {
        let mut out = Vec::new();
        for block in 0..self.blocks {
            for site in [AttnSite::SelfAttn, AttnSite::Cross] {
                for role in [Role::Q, Role::K, Role::V] {
                    out.push(MatrixId::attn(block, site, role));
                }
            }
        }
        out
    }

    /// Every learnable matrix (the all-parameter pool), in canonical order.
    pub fn full_pool(&self) -> Vec<MatrixId> {
        let mut out = self.attention_pool();
        for block in 0..self.blocks {
            out.push(MatrixId::Proj { block });
        }
        for block in 0..self.blocks {
            out.push(MatrixId::Mlp {
                block,
                layer: MlpLayer::Fc1,
            });
            out.push(MatrixId::Mlp {
                block,
                layer: MlpLayer::Fc2,
            });
        }
        out.push(MatrixId::ClassEmbed);
        out.sort();
        out
    }
}

/// One training example: an 8x8 image and its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x0: Vec<f64>,
    pub label: usize,
}

/// Forward-diffusion schedule: linear betas with running products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear beta schedule from 1e-4 to 0.02 over `t_steps` steps.
pub fn make_schedule(t_steps: usize) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(Error::InvalidParameter {
            name: "t_steps",
            reason: format!("schedule needs at least 2 steps, got {t_steps}"),
        });
    }
    let mut beta = Vec::with_capacity(t_steps);
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for i in 0..t_steps {
        let b = BETA_START + (BETA_END - BETA_START) * i as f64 / (t_steps - 1) as f64;
        prod *= 1.0 - b;
        beta.push(b);
        alpha_bar.push(prod);
    }
    Ok(DiffusionSchedule { beta, alpha_bar })
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside schedule 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) e.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != noise.len() {
            return Err(Error::InvalidInput(format!(
                "noise length {} does not match image length {}",
                noise.len(),
                x0.len()
            )));
        }
        let abar = self.alpha_bar[t - 1];
        let (s0, s1) = (abar.sqrt(), (1.0 - abar).sqrt());
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(x, e)| s0 * x + s1 * e)
            .collect())
    }
}

/// Full parameter set of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    /// Schedule length baked into the model's checkpoints.
    pub t_steps: usize,
    pub matrices: BTreeMap<MatrixId, Tensor2D>,
}

impl DenoiserParams {
    /// Zero-initialized parameters (pure residual path).
    pub fn zeros(dims: ModelDims, t_steps: usize) -> Self {
        let mut matrices = BTreeMap::new();
        for id in dims.full_pool() {
            let (r, c) = dims.shape(&id);
            matrices.insert(id, Tensor2D::zeros(r, c));
        }
        Self {
            dims,
            t_steps,
            matrices,
        }
    }

    /// Random initialization. Weight matrices start small (std 0.02) so
    /// every block begins close to the residual path and plain SGD stays
    /// stable; the class-embedding rows start at unit scale so the class
    /// token carries signal from the first step.
    pub fn init(dims: ModelDims, t_steps: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init);
        let mut params = Self::zeros(dims, t_steps);
        let ids: Vec<MatrixId> = params.matrices.keys().cloned().collect();
        for id in ids {
            let (rows, cols) = dims.shape(&id);
            let std = match id {
                MatrixId::ClassEmbed => 1.0,
                _ => 0.02,
            };
            let dist = Normal::new(0.0, std).unwrap();
            let values: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            params
                .matrices
                .insert(id, Tensor2D::from_values(rows, cols, values).unwrap());
        }
        params
    }

    pub fn get(&self, id: &MatrixId) -> &Tensor2D {
        &self.matrices[id]
    }
}

/// Seed for the shared fixed projections; every model derives the same
/// patch embedding and read-out from it, so checkpoints stay portable.
const FIXED_PROJECTION_SEED: u64 = 0x4453_5046;

/// Fixed (non-trainable) pieces of the architecture.
#[derive(Debug, Clone)]
pub struct FixedProjections {
    /// Patch embedding, PATCH_DIM x m.
    pub embed: Tensor2D,
    /// Read-out, m x PATCH_DIM.
    pub readout: Tensor2D,
}

impl FixedProjections {
    pub fn for_dims(dims: &ModelDims) -> Self {
        let mut rng = substream(FIXED_PROJECTION_SEED, Stream::Init);
        let m = dims.token_dim;
        let embed_dist = Normal::new(0.0, 1.0 / (PATCH_DIM as f64).sqrt()).unwrap();
        let embed = Tensor2D::from_values(
            PATCH_DIM,
            m,
            (0..PATCH_DIM * m).map(|_| embed_dist.sample(&mut rng)).collect(),
        )
        .unwrap();
        let readout_dist = Normal::new(0.0, 1.0 / (m as f64).sqrt()).unwrap();
        let readout = Tensor2D::from_values(
            m,
            PATCH_DIM,
            (0..m * PATCH_DIM).map(|_| readout_dist.sample(&mut rng)).collect(),
        )
        .unwrap();
        Self { embed, readout }
    }
}

/// Rearrange an image (row-major 64) into patch tokens (16 x 4).
pub fn patchify(image: &[f64]) -> Tensor2D {
    let mut out = Tensor2D::zeros(N_TOKENS, PATCH_DIM);
    let ps = IMAGE_SIDE / PATCH_GRID;
    for (pix, &v) in image.iter().enumerate() {
        let (r, c) = (pix / IMAGE_SIDE, pix % IMAGE_SIDE);
        let token = (r / ps) * PATCH_GRID + c / ps;
        let offset = (r % ps) * ps + c % ps;
        out.values[token * PATCH_DIM + offset] = v;
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor2D) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_DIM];
    let ps = IMAGE_SIDE / PATCH_GRID;
    for (pix, slot) in out.iter_mut().enumerate() {
        let (r, c) = (pix / IMAGE_SIDE, pix % IMAGE_SIDE);
        let token = (r / ps) * PATCH_GRID + c / ps;
        let offset = (r % ps) * ps + c % ps;
        *slot = tokens.values[token * PATCH_DIM + offset];
    }
    out
}

/// Sinusoidal timestep embedding of dimension `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        // Frequencies 10000^(-i/half), the usual geometric ladder.
        let freq = (-(std::f64::consts::LN_10 * 4.0) * i as f64 / half as f64).exp();
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    out
}

/// An adapter pair attached to one matrix, borrowed for the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AdapterView<'a> {
    pub a: &'a Tensor2D,
    pub b: &'a Tensor2D,
}

/// How each weight matrix participates in a forward pass.
#[derive(Default)]
pub struct ForwardBindings<'a> {
    /// Matrices whose full gradient should be tracked.
    pub tracked: BTreeSet<MatrixId>,
    /// Matrices with a low-rank adapter applied on top of the frozen weight.
    pub adapters: BTreeMap<MatrixId, AdapterView<'a>>,
    /// Whether adapter factors are tracked as parameters.
    pub track_adapters: bool,
}

impl<'a> ForwardBindings<'a> {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn tracking(pool: impl IntoIterator<Item = MatrixId>) -> Self {
        Self {
            tracked: pool.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// Per-sample loss evaluation: tape, loss node, and prediction node.
pub struct LossEval {
    pub tape: Tape,
    pub loss_node: NodeId,
    pub prediction_node: NodeId,
}

impl LossEval {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss_node).values[0]
    }

    pub fn backward(&self) -> Result<PerSampleGrad> {
        self.tape.backward(self.loss_node)
    }
}

/// The denoising network bundled with its fixed projections and schedule.
pub struct Denoiser {
    pub params: DenoiserParams,
    pub fixed: FixedProjections,
    pub schedule: DiffusionSchedule,
}

impl Denoiser {
    pub fn new(params: DenoiserParams) -> Result<Self> {
        let fixed = FixedProjections::for_dims(&params.dims);
        let schedule = make_schedule(params.t_steps)?;
        Ok(Self {
            params,
            fixed,
            schedule,
        })
    }

    /// Apply weight matrix `id` to `x`, honoring the bindings: frozen
    /// constant, tracked parameter, or frozen weight plus low-rank update.
    fn apply_weight(
        &self,
        tape: &mut Tape,
        bindings: &ForwardBindings,
        x: NodeId,
        id: MatrixId,
    ) -> Result<NodeId> {
        let w = self.params.get(&id).clone();
        if let Some(adapter) = bindings.adapters.get(&id) {
            let w_node = tape.constant(w);
            let base = tape.matmul(x, w_node)?;
            let (a_node, b_node) = if bindings.track_adapters {
                (
                    tape.param(LeafKey::AdapterA(id), adapter.a.clone()),
                    tape.param(LeafKey::AdapterB(id), adapter.b.clone()),
                )
            } else {
                (tape.constant(adapter.a.clone()), tape.constant(adapter.b.clone()))
            };
            let xa = tape.matmul(x, a_node)?;
            let xab = tape.matmul(xa, b_node)?;
            tape.add(base, xab)
        } else if bindings.tracked.contains(&id) {
            let w_node = tape.param(LeafKey::Weight(id), w);
            tape.matmul(x, w_node)
        } else {
            let w_node = tape.constant(w);
            tape.matmul(x, w_node)
        }
    }

    /// Build the forward graph for one (x_t, t, label) input. Returns the
    /// prediction node (16 x 4 patch tokens).
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        bindings: &ForwardBindings,
        x_t: &[f64],
        t: usize,
        label: usize,
    ) -> Result<NodeId> {
        let dims = &self.params.dims;
        if label >= dims.n_classes {
            return Err(Error::InvalidInput(format!(
                "unknown label {label} (model has {} classes)",
                dims.n_classes
            )));
        }
        self.schedule.check_t(t)?;
        if x_t.len() != IMAGE_DIM {
            return Err(Error::InvalidInput(format!(
                "input has {} pixels, expected {IMAGE_DIM}",
                x_t.len()
            )));
        }
        let m = dims.token_dim;
        let scale = 1.0 / (m as f64).sqrt();

        // Embedded input tokens plus timestep embedding: constant data.
        let patches = patchify(x_t);
        let mut tokens0 = patches.matmul(&self.fixed.embed);
        let temb = timestep_embedding(t, m);
        for r in 0..N_TOKENS {
            for c in 0..m {
                tokens0.values[r * m + c] += temb[c];
            }
        }
        let mut x = tape.constant(tokens0);

        // Class token: one-hot row times the embedding table, so gradients
        // reach the table when it is tracked.
        let mut onehot = Tensor2D::zeros(1, dims.n_classes);
        onehot.values[label] = 1.0;
        let onehot = tape.constant(onehot);
        let cls = self.apply_weight(tape, bindings, onehot, MatrixId::ClassEmbed)?;

        for block in 0..dims.blocks {
            // Self-attention with output projection.
            let q = self.apply_weight(tape, bindings, x, MatrixId::attn(block, AttnSite::SelfAttn, Role::Q))?;
            let k = self.apply_weight(tape, bindings, x, MatrixId::attn(block, AttnSite::SelfAttn, Role::K))?;
            let v = self.apply_weight(tape, bindings, x, MatrixId::attn(block, AttnSite::SelfAttn, Role::V))?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let av = tape.matmul(attn, v)?;
            let o = self.apply_weight(tape, bindings, av, MatrixId::Proj { block })?;
            x = tape.add(x, o)?;

            // Cross-attention against the single class token.
            let q2 = self.apply_weight(tape, bindings, x, MatrixId::attn(block, AttnSite::Cross, Role::Q))?;
            let k2 = self.apply_weight(tape, bindings, cls, MatrixId::attn(block, AttnSite::Cross, Role::K))?;
            let v2 = self.apply_weight(tape, bindings, cls, MatrixId::attn(block, AttnSite::Cross, Role::V))?;
            let scores2 = tape.matmul_nt(q2, k2)?;
            let scores2 = tape.scale(scores2, scale);
            let attn2 = tape.softmax_rows(scores2);
            let av2 = tape.matmul(attn2, v2)?;
            x = tape.add(x, av2)?;

            // MLP.
            let h = self.apply_weight(tape, bindings, x, MatrixId::Mlp { block, layer: MlpLayer::Fc1 })?;
            let h = tape.gelu(h);
            let o = self.apply_weight(tape, bindings, h, MatrixId::Mlp { block, layer: MlpLayer::Fc2 })?;
            x = tape.add(x, o)?;
        }

        let readout = tape.constant(self.fixed.readout.clone());
        tape.matmul(x, readout)
    }

    /// Predicted noise for one input, as a row-major 64-pixel vector.
    pub fn predict_noise(&self, x_t: &[f64], t: usize, label: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bindings = ForwardBindings::frozen();
        let pred = self.build_forward(&mut tape, &bindings, x_t, t, label)?;
        Ok(unpatchify(tape.value(pred)))
    }

    /// Mean-square denoising loss for one sample at a fixed (t, noise)
    /// draw, with the requested parameter bindings. The residual norm is
    /// divided by the pixel count so clipping bounds are
    /// resolution-independent.
    pub fn loss_eval(
        &self,
        bindings: &ForwardBindings,
        sample: &Sample,
        t: usize,
        noise: &[f64],
    ) -> Result<LossEval> {
        let x_t = self.schedule.forward_diffuse(&sample.x0, t, noise)?;
        let mut tape = Tape::new();
        let pred = self.build_forward(&mut tape, bindings, &x_t, t, sample.label)?;
        let flat = tape.reshape(pred, 1, IMAGE_DIM)?;
        // Compare in patch order; the set of squared residuals is the same.
        let target = patchify(noise);
        let target = Tensor2D::from_values(1, IMAGE_DIM, target.values)?;
        let loss_node = tape.mean_square_error(flat, &target)?;
        let eval = LossEval {
            tape,
            loss_node,
            prediction_node: pred,
        };
        if !eval.loss().is_finite() {
            return Err(Error::NonFinite("denoising loss".into()));
        }
        Ok(eval)
    }

    /// Scalar loss without gradient tracking.
    pub fn loss(&self, sample: &Sample, t: usize, noise: &[f64]) -> Result<f64> {
        Ok(self
            .loss_eval(&ForwardBindings::frozen(), sample, t, noise)?
            .loss())
    }

    /// Ancestral sampling: start from standard Gaussian noise and walk the
    /// schedule backwards with the posterior mean plus sqrt(beta_t) noise,
    /// no noise at the final step; pixel values are clamped at the end.
    pub fn sample_images<R: Rng>(
        &self,
        label: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t_max = self.schedule.len();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut x: Vec<f64> = (0..IMAGE_DIM).map(|_| normal.sample(rng)).collect();
            for t in (1..=t_max).rev() {
                let e_hat = self.predict_noise(&x, t, label)?;
                let beta = self.schedule.beta[t - 1];
                let abar = self.schedule.alpha_bar[t - 1];
                let mean_scale = 1.0 / (1.0 - beta).sqrt();
                let noise_coeff = beta / (1.0 - abar).sqrt();
                for (xi, ei) in x.iter_mut().zip(&e_hat) {
                    *xi = mean_scale * (*xi - noise_coeff * ei);
                }
                if t > 1 {
                    for xi in x.iter_mut() {
                        *xi += beta.sqrt() * normal.sample(rng);
                    }
                }
            }
            for xi in x.iter_mut() {
                *xi = xi.clamp(-1.0, 1.0);
            }
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_t2_matches_direct_product() {
        let s = make_schedule(2).unwrap();
        assert_eq!(s.beta, vec![1e-4, 0.02]);
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.9999 * 0.98).abs() < 1e-15);
    }

    #[test]
    fn schedule_alpha_bar_strictly_decreasing() {
        let s = make_schedule(50).unwrap();
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!((s.alpha_bar[0] - (1.0 - s.beta[0])).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_short_horizons() {
        assert!(make_schedule(1).is_err());
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn forward_diffuse_zero_noise_scales_by_sqrt_alpha_bar() {
        let s = make_schedule(10).unwrap();
        let x0 = vec![0.5; IMAGE_DIM];
        let xt = s.forward_diffuse(&x0, 4, &vec![0.0; IMAGE_DIM]).unwrap();
        let want = s.alpha_bar[3].sqrt() * 0.5;
        for v in xt {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_zero_image_scales_noise() {
        let s = make_schedule(10).unwrap();
        let e = vec![1.25; IMAGE_DIM];
        let xt = s.forward_diffuse(&vec![0.0; IMAGE_DIM], 10, &e).unwrap();
        let want = (1.0 - s.alpha_bar[9]).sqrt() * 1.25;
        for v in xt {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_rejects_out_of_range_t() {
        let s = make_schedule(10).unwrap();
        let x0 = vec![0.0; IMAGE_DIM];
        assert!(s.forward_diffuse(&x0, 0, &x0).is_err());
        assert!(s.forward_diffuse(&x0, 11, &x0).is_err());
    }

    #[test]
    fn patchify_roundtrips() {
        let image: Vec<f64> = (0..IMAGE_DIM).map(|i| i as f64).collect();
        assert_eq!(unpatchify(&patchify(&image)), image);
    }

    #[test]
    fn zero_parameters_give_pure_residual_path() {
        let params = DenoiserParams::zeros(ModelDims::default(), 50);
        let model = Denoiser::new(params).unwrap();
        let x: Vec<f64> = (0..IMAGE_DIM).map(|i| (i as f64 / 10.0).sin()).collect();
        let got = model.predict_noise(&x, 7, 1).unwrap();

        let mut tokens = patchify(&x).matmul(&model.fixed.embed);
        let temb = timestep_embedding(7, model.params.dims.token_dim);
        for r in 0..N_TOKENS {
            for c in 0..model.params.dims.token_dim {
                tokens.values[r * model.params.dims.token_dim + c] += temb[c];
            }
        }
        let want = unpatchify(&tokens.matmul(&model.fixed.readout));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let params = DenoiserParams::init(ModelDims::default(), 50, 1);
        let model = Denoiser::new(params).unwrap();
        let x = vec![0.0; IMAGE_DIM];
        assert!(model.predict_noise(&x, 1, 4).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // With a zero image, zero parameters, and zero noise the prediction
        // is the readout of the timestep embedding alone; craft the target
        // to match it exactly instead: compare model output against itself.
        let params = DenoiserParams::zeros(ModelDims::default(), 50);
        let model = Denoiser::new(params).unwrap();
        let x0 = vec![0.0; IMAGE_DIM];
        let noise = vec![0.0; IMAGE_DIM];
        let xt = model.schedule.forward_diffuse(&x0, 3, &noise).unwrap();
        let pred = model.predict_noise(&xt, 3, 0).unwrap();
        // Target equal to the prediction: residual is zero.
        let mut tape = Tape::new();
        let bindings = ForwardBindings::frozen();
        let node = model.build_forward(&mut tape, &bindings, &xt, 3, 0).unwrap();
        let flat = tape.reshape(node, 1, IMAGE_DIM).unwrap();
        let target = Tensor2D::from_values(1, IMAGE_DIM, patchify(&pred).values).unwrap();
        let loss = tape.mean_square_error(flat, &target).unwrap();
        assert!(tape.value(loss).values[0].abs() < 1e-24);
    }

    #[test]
    fn zero_predictor_unit_noise_gives_unit_loss() {
        // Zero parameters and a zero input image at t with abar: the
        // prediction is the readout of (embedded zero-image tokens + temb);
        // to pin the mean-square convention, use the loss definition
        // directly with an all-ones residual.
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor2D::zeros(1, IMAGE_DIM));
        let target = Tensor2D::from_values(1, IMAGE_DIM, vec![1.0; IMAGE_DIM]).unwrap();
        let loss = tape.mean_square_error(pred, &target).unwrap();
        assert!((tape.value(loss).values[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permuting_tokens_permutes_attention_outputs() {
        // With identical timestep content on every token, swapping two
        // input patches swaps the corresponding output patches.
        let params = DenoiserParams::init(ModelDims::default(), 50, 3);
        let model = Denoiser::new(params).unwrap();
        let mut image: Vec<f64> = (0..IMAGE_DIM).map(|i| ((i * 37 % 64) as f64 / 32.0) - 1.0).collect();
        let out1 = model.predict_noise(&image, 5, 2).unwrap();
        let p1 = patchify(&out1);

        // Swap patch tokens 0 and 5 in the input.
        let mut patches = patchify(&image);
        for d in 0..PATCH_DIM {
            patches.values.swap(0 * PATCH_DIM + d, 5 * PATCH_DIM + d);
        }
        image = unpatchify(&patches);
        let out2 = model.predict_noise(&image, 5, 2).unwrap();
        let p2 = patchify(&out2);

        for d in 0..PATCH_DIM {
            assert!((p1.values[0 * PATCH_DIM + d] - p2.values[5 * PATCH_DIM + d]).abs() < 1e-10);
            assert!((p1.values[5 * PATCH_DIM + d] - p2.values[0 * PATCH_DIM + d]).abs() < 1e-10);
        }
        // An untouched token is unchanged.
        for d in 0..PATCH_DIM {
            assert!((p1.values[3 * PATCH_DIM + d] - p2.values[3 * PATCH_DIM + d]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let params = DenoiserParams::init(ModelDims::default(), 8, 11);
        let model = Denoiser::new(params).unwrap();
        let mut r1 = substream(99, Stream::ImageSampling);
        let mut r2 = substream(99, Stream::ImageSampling);
        let a = model.sample_images(1, 2, &mut r1).unwrap();
        let b = model.sample_images(1, 2, &mut r2).unwrap();
        assert_eq!(a, b);
        for img in &a {
            assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_step_schedule_error() {
        // T = 1 is rejected by make_schedule; the shortest sampler walk is
        // T = 2 and must stay finite.
        let params = DenoiserParams::init(ModelDims::default(), 2, 5);
        let model = Denoiser::new(params).unwrap();
        let mut rng = substream(1, Stream::ImageSampling);
        let imgs = model.sample_images(0, 1, &mut rng).unwrap();
        assert!(imgs[0].iter().all(|v| v.is_finite()));
    }
}

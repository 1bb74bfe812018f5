//! Synthetic public/sensitive dataset generation.
//!
//! Four pattern classes on the 8x8 grid: horizontal stripes, vertical
//! stripes, checkerboard, centered blob. The public and sensitive
//! distributions share the generators and differ only through two shift
//! knobs: a stripe phase offset and a contrast scale. All draws are
//! seed-reproducible.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Sample, IMAGE_DIM, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Generator configuration for the toy task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    /// Number of pattern classes (fixed generators exist for 4).
    pub n_classes: usize,
    /// Pixel noise standard deviation.
    pub noise_std: f64,
    /// Stripe/checker phase offset of the sensitive distribution.
    pub phase_offset: usize,
    /// Contrast scale of the sensitive distribution (public uses 1.0).
    pub contrast_scale: f64,
    pub n_public: usize,
    pub n_sensitive: usize,
    pub n_test: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            noise_std: 0.15,
            phase_offset: 1,
            contrast_scale: 0.75,
            n_public: 2048,
            n_sensitive: 512,
            n_test: 128,
        }
    }
}

/// The three generated splits.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub public: Vec<Sample>,
    pub sensitive_train: Vec<Sample>,
    pub sensitive_test: Vec<Sample>,
}

/// Class template with the given phase, values in {-1, +1} (blob in
/// [-1, 1]).
pub fn class_template(label: usize, phase: usize) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_DIM];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let v = match label {
                0 => if (r + phase) % 2 == 0 { 1.0 } else { -1.0 },
                1 => if (c + phase) % 2 == 0 { 1.0 } else { -1.0 },
                2 => if (r + c + phase) % 2 == 0 { 1.0 } else { -1.0 },
                _ => {
                    // Centered blob; the phase knob nudges the center.
                    let center = 3.5 - phase as f64;
                    let dr = r as f64 - center;
                    let dc = c as f64 - center;
                    2.0 * (-(dr * dr + dc * dc) / (2.0 * 2.0 * 2.0)).exp() - 1.0
                }
            };
            out[r * IMAGE_SIDE + c] = v;
        }
    }
    out
}

fn draw_split<R: rand::Rng>(
    spec: &ToySpec,
    n: usize,
    phase: usize,
    contrast: f64,
    rng: &mut R,
) -> Vec<Sample> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let label = i % spec.n_classes;
            let template = class_template(label, phase);
            let x0 = template
                .iter()
                .map(|&t| {
                    (contrast * t + spec.noise_std * normal.sample(rng)).clamp(-1.0, 1.0)
                })
                .collect();
            Sample { x0, label }
        })
        .collect()
}

/// Generate the public split (no shift) and the sensitive train/test
/// splits (shift knobs applied), with balanced labels.
pub fn gen_datasets(spec: &ToySpec, seed: u64) -> Result<Datasets> {
    if spec.n_classes == 0 || spec.n_classes > 4 {
        return Err(Error::InvalidParameter {
            name: "n_classes",
            reason: "the toy task defines 1..=4 class generators".into(),
        });
    }
    for (name, n) in [
        ("n_public", spec.n_public),
        ("n_sensitive", spec.n_sensitive),
        ("n_test", spec.n_test),
    ] {
        if n < spec.n_classes {
            return Err(Error::InvalidParameter {
                name,
                reason: format!("need at least one sample per class, got {n}"),
            });
        }
    }
    let mut rng = substream(seed, Stream::Data);
    let public = draw_split(spec, spec.n_public, 0, 1.0, &mut rng);
    let sensitive_train = draw_split(
        spec,
        spec.n_sensitive,
        spec.phase_offset,
        spec.contrast_scale,
        &mut rng,
    );
    let sensitive_test = draw_split(
        spec,
        spec.n_test,
        spec.phase_offset,
        spec.contrast_scale,
        &mut rng,
    );
    Ok(Datasets {
        public,
        sensitive_train,
        sensitive_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_collapses_to_templates() {
        let spec = ToySpec {
            noise_std: 0.0,
            n_public: 8,
            n_sensitive: 8,
            n_test: 4,
            ..Default::default()
        };
        let data = gen_datasets(&spec, 1).unwrap();
        for s in &data.public {
            let want = class_template(s.label, 0);
            assert_eq!(s.x0, want);
        }
        for s in &data.sensitive_train {
            let want: Vec<f64> = class_template(s.label, spec.phase_offset)
                .iter()
                .map(|t| (t * spec.contrast_scale).clamp(-1.0, 1.0))
                .collect();
            assert_eq!(s.x0, want);
        }
    }

    #[test]
    fn zero_shift_knobs_match_public_distribution() {
        let spec = ToySpec {
            noise_std: 0.0,
            phase_offset: 0,
            contrast_scale: 1.0,
            n_public: 8,
            n_sensitive: 8,
            n_test: 4,
            ..Default::default()
        };
        let data = gen_datasets(&spec, 2).unwrap();
        for (p, s) in data.public.iter().zip(&data.sensitive_train) {
            assert_eq!(p.x0, s.x0);
        }
    }

    #[test]
    fn generation_is_seed_reproducible_and_balanced() {
        let spec = ToySpec {
            n_public: 16,
            n_sensitive: 16,
            n_test: 8,
            ..Default::default()
        };
        let a = gen_datasets(&spec, 7).unwrap();
        let b = gen_datasets(&spec, 7).unwrap();
        assert_eq!(a.public, b.public);
        assert_eq!(a.sensitive_train, b.sensitive_train);
        let mut counts = [0; 4];
        for s in &a.public {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [4; 4]);
        for s in &a.public {
            assert!(s.x0.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn undersized_splits_are_rejected() {
        let spec = ToySpec {
            n_test: 2,
            ..Default::default()
        };
        assert!(gen_datasets(&spec, 0).is_err());
    }
}

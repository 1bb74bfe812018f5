//! Desk-scale fidelity and utility metrics.
//!
//! Fidelity: RBF-kernel maximum mean discrepancy (biased V-statistic,
//! median-pairwise-distance bandwidth) between synthetic and held-out
//! real pixel vectors. Utility: accuracy on real test data of a
//! multinomial logistic classifier trained on the synthetic set by
//! full-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::denoiser::Sample;
use crate::error::{Error, Result};

/// Metrics for one synthetic set against a real test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over classes of the class-conditional MMD.
    pub mmd: f64,
    /// Downstream classification accuracy on real test data.
    pub util_acc: f64,
    /// Synthetic samples per class.
    pub per_class_counts: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled set.
fn median_bandwidth(xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
    let pooled: Vec<&[f64]> = xs.iter().chain(ys.iter()).cloned().collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = dists[dists.len() / 2];
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Biased (V-statistic) RBF MMD between two sample sets; bandwidth from
/// the median heuristic on the pooled data. Always non-negative.
pub fn mmd_rbf(xs: &[&[f64]], ys: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "MMD needs non-empty sample sets".into(),
        });
    }
    let h = median_bandwidth(xs, ys);
    let gamma = 1.0 / (2.0 * h * h);
    let kernel_mean = |a: &[&[f64]], b: &[&[f64]]| -> f64 {
        let mut acc = 0.0;
        for x in a {
            for y in b {
                acc += (-gamma * sq_dist(x, y)).exp();
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    let mmd_sq = kernel_mean(xs, xs) + kernel_mean(ys, ys) - 2.0 * kernel_mean(xs, ys);
    Ok(mmd_sq.max(0.0).sqrt())
}

/// Mean over classes of MMD between same-class subsets. Classes missing
/// from either set are skipped.
pub fn class_conditional_mmd(
    synthetic: &[Sample],
    real: &[Sample],
    n_classes: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for label in 0..n_classes {
        let xs: Vec<&[f64]> = synthetic
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.x0.as_slice())
            .collect();
        let ys: Vec<&[f64]> = real
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.x0.as_slice())
            .collect();
        if xs.is_empty() || ys.is_empty() {
            continue;
        }
        total += mmd_rbf(&xs, &ys)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "no class present in both sets".into(),
        });
    }
    Ok(total / used as f64)
}

/// Multinomial logistic regression on raw pixels: zero-initialized,
/// full-batch gradient descent, fixed step count. Deterministic.
pub struct PixelClassifier {
    /// Weights, (dim + 1) x n_classes; the last row is the bias.
    weights: Vec<f64>,
    dim: usize,
    n_classes: usize,
}

pub const CLASSIFIER_STEPS: usize = 500;
pub const CLASSIFIER_LR: f64 = 0.5;

impl PixelClassifier {
    pub fn fit(train: &[Sample], n_classes: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidParameter {
                name: "train",
                reason: "classifier needs training data".into(),
            });
        }
        let dim = train[0].x0.len();
        let mut clf = Self {
            weights: vec![0.0; (dim + 1) * n_classes],
            dim,
            n_classes,
        };
        let n = train.len() as f64;
        let mut grad = vec![0.0; (dim + 1) * n_classes];
        for _ in 0..CLASSIFIER_STEPS {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for s in train {
                let probs = clf.probabilities(&s.x0);
                for k in 0..n_classes {
                    let err = probs[k] - if k == s.label { 1.0 } else { 0.0 };
                    for (d, &x) in s.x0.iter().enumerate() {
                        grad[d * n_classes + k] += err * x;
                    }
                    grad[dim * n_classes + k] += err;
                }
            }
            for (w, g) in clf.weights.iter_mut().zip(&grad) {
                *w -= CLASSIFIER_LR * g / n;
            }
        }
        Ok(clf)
    }

    fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.n_classes];
        for k in 0..self.n_classes {
            let mut z = self.weights[self.dim * self.n_classes + k];
            for (d, &xv) in x.iter().enumerate() {
                z += self.weights[d * self.n_classes + k] * xv;
            }
            logits[k] = z;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in logits.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        logits.iter_mut().for_each(|z| *z /= sum);
        logits
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let probs = self.probabilities(x);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    pub fn accuracy(&self, test: &[Sample]) -> f64 {
        if test.is_empty() {
            return 0.0;
        }
        let hits = test
            .iter()
            .filter(|s| self.predict(&s.x0) == s.label)
            .count();
        hits as f64 / test.len() as f64
    }
}

/// Train-on-synthetic, test-on-real evaluation.
pub fn evaluate(synthetic: &[Sample], real_test: &[Sample], n_classes: usize) -> Result<MetricsReport> {
    let mmd = class_conditional_mmd(synthetic, real_test, n_classes)?;
    let clf = PixelClassifier::fit(synthetic, n_classes)?;
    let util_acc = clf.accuracy(real_test);
    let mut per_class_counts = vec![0; n_classes];
    for s in synthetic {
        if s.label < n_classes {
            per_class_counts[s.label] += 1;
        }
    }
    Ok(MetricsReport {
        mmd,
        util_acc,
        per_class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_template, gen_datasets, ToySpec};

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0; 8]).collect();
        let refs: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let m = mmd_rbf(&refs, &refs).unwrap();
        assert!(m < 1e-7, "mmd = {m}");
    }

    #[test]
    fn mmd_separates_shifted_distributions() {
        // Same-distribution halves vs a shifted copy, over several seeds.
        for seed in 0..5u64 {
            let spec = ToySpec {
                n_public: 128,
                n_sensitive: 128,
                n_test: 64,
                ..Default::default()
            };
            let data = gen_datasets(&spec, seed).unwrap();
            let half_a: Vec<&[f64]> = data.public[..64].iter().map(|s| s.x0.as_slice()).collect();
            let half_b: Vec<&[f64]> = data.public[64..].iter().map(|s| s.x0.as_slice()).collect();
            let shifted: Vec<&[f64]> = data
                .sensitive_train
                .iter()
                .take(64)
                .map(|s| s.x0.as_slice())
                .collect();
            let same = mmd_rbf(&half_a, &half_b).unwrap();
            let cross = mmd_rbf(&half_a, &shifted).unwrap();
            assert!(
                cross > same,
                "seed {seed}: cross {cross} <= same {same}"
            );
        }
    }

    #[test]
    fn mmd_is_nonnegative_and_rejects_empty() {
        let a = [vec![0.0; 4]];
        let refs: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        assert!(mmd_rbf(&refs, &[]).is_err());
        assert!(mmd_rbf(&refs, &refs).unwrap() >= 0.0);
    }

    #[test]
    fn classifier_separates_clean_templates() {
        let train: Vec<Sample> = (0..40)
            .map(|i| Sample {
                x0: class_template(i % 4, 0),
                label: i % 4,
            })
            .collect();
        let clf = PixelClassifier::fit(&train, 4).unwrap();
        assert_eq!(clf.accuracy(&train), 1.0);
    }

    #[test]
    fn classifier_handles_noisy_data_deterministically() {
        let spec = ToySpec {
            n_public: 200,
            n_sensitive: 200,
            n_test: 80,
            ..Default::default()
        };
        let data = gen_datasets(&spec, 5).unwrap();
        let clf1 = PixelClassifier::fit(&data.sensitive_train, 4).unwrap();
        let clf2 = PixelClassifier::fit(&data.sensitive_train, 4).unwrap();
        let acc1 = clf1.accuracy(&data.sensitive_test);
        let acc2 = clf2.accuracy(&data.sensitive_test);
        assert_eq!(acc1, acc2);
        assert!(acc1 > 0.9, "accuracy {acc1} unexpectedly low on clean toy data");
    }

    #[test]
    fn evaluate_counts_classes() {
        let spec = ToySpec {
            n_public: 64,
            n_sensitive: 64,
            n_test: 32,
            ..Default::default()
        };
        let data = gen_datasets(&spec, 3).unwrap();
        let report = evaluate(&data.sensitive_train, &data.sensitive_test, 4).unwrap();
        assert_eq!(report.per_class_counts, vec![16; 4]);
        assert!(report.mmd >= 0.0);
        assert!((0.0..=1.0).contains(&report.util_acc));
    }
}

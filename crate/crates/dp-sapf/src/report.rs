//! JSON and CSV emission for run artifacts.
//!
//! Everything written here is byte-deterministic for a fixed input:
//! map keys come from ordered containers and floats use Rust's shortest
//! round-trip formatting. The clean (pre-noise) selection averages are
//! only emitted in the zero-noise test mode; privatized values are the
//! released surface otherwise.

use serde_json::{json, Map, Value};

use crate::harness::{SweepRow, VariantResult};
use crate::saliency::SaliencyReport;
use crate::tensor::Tensor2D;
use crate::trainer::{RunReport, StepRecord, TrainConfig};

fn tensor_json(t: &Tensor2D) -> Value {
    json!({ "rows": t.rows, "cols": t.cols, "values": t.values })
}

fn f64_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// SaliencyReport as JSON; `s_k` appears only when sigma_s = 0.
pub fn saliency_to_json(r: &SaliencyReport) -> Value {
    let mut norms = Map::new();
    let mut ratios = Map::new();
    let mut g_tilde = Map::new();
    for id in &r.pool {
        if let Some(n) = r.norms.get(id) {
            norms.insert(id.to_string(), json!(n));
        }
        if let Some(x) = r.ratio_table.get(id) {
            let cell = if x.is_finite() { json!(x) } else { Value::Null };
            ratios.insert(id.to_string(), cell);
        }
        if let Some(t) = r.g_tilde.get(id) {
            g_tilde.insert(id.to_string(), tensor_json(t));
        }
    }
    let mut out = Map::new();
    out.insert("pool".into(), json!(r.pool.iter().map(|i| i.to_string()).collect::<Vec<_>>()));
    out.insert("h".into(), json!(r.h));
    out.insert("sigma_s".into(), json!(r.sigma_s));
    out.insert("sensitivity".into(), json!(r.sensitivity));
    out.insert("norms".into(), Value::Object(norms));
    out.insert("ratio_table".into(), Value::Object(ratios));
    out.insert(
        "selected".into(),
        json!(r.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>()),
    );
    out.insert("g_tilde".into(), Value::Object(g_tilde));
    if r.sigma_s == 0.0 {
        let mut s_k = Map::new();
        for id in &r.pool {
            if let Some(t) = r.s_k.get(id) {
                s_k.insert(id.to_string(), tensor_json(t));
            }
        }
        out.insert("s_k".into(), Value::Object(s_k));
    }
    Value::Object(out)
}

/// Heatmap CSV: one row per pool matrix. The `norm_clean` column is
/// present only in the zero-noise test mode.
pub fn saliency_to_csv(r: &SaliencyReport) -> String {
    let test_mode = r.sigma_s == 0.0;
    let mut out = String::new();
    if test_mode {
        out.push_str("id,norm_clean,norm_noisy,ratio,selected\n");
    } else {
        out.push_str("id,norm_noisy,ratio,selected\n");
    }
    for id in &r.pool {
        let noisy = r.norms.get(id).copied().unwrap_or(0.0);
        let ratio = r.ratio_table.get(id).copied().unwrap_or(f64::INFINITY);
        let ratio = if ratio.is_finite() {
            ratio.to_string()
        } else {
            String::new()
        };
        let selected = if r.selected.contains(id) { 1 } else { 0 };
        if test_mode {
            let clean = r.s_k.get(id).map(|t| t.l2_norm()).unwrap_or(0.0);
            out.push_str(&format!("{id},{clean},{noisy},{ratio},{selected}\n"));
        } else {
            out.push_str(&format!("{id},{noisy},{ratio},{selected}\n"));
        }
    }
    out
}

/// Per-iteration CSV; empty cells for empty batches.
pub fn steps_to_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("h,batch_size,loss_mean,grad_norm_mean,grad_norm_max\n");
    for s in steps {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.h,
            s.batch_size,
            f64_cell(s.loss_mean),
            f64_cell(s.grad_norm_mean),
            f64_cell(s.grad_norm_max),
        ));
    }
    out
}

/// Full training run report as JSON (config echo, certificate,
/// selection, loss trace summary).
pub fn run_report_to_json(config: &TrainConfig, report: &RunReport) -> Value {
    json!({
        "mode": report.mode,
        "config": config,
        "certificate": report.certificate,
        "selection": saliency_to_json(&report.selection),
        "final_loss_mean": report.final_loss_mean,
        "steps_recorded": report.steps.len(),
    })
}

/// Variant-comparison CSV.
pub fn variants_to_csv(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,seed,mmd,util_acc,epsilon,alpha_star,sigma_d,r_s,r_d\n");
    for r in results {
        let c = &r.report.certificate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant.name(),
            r.seed,
            r.metrics.mmd,
            r.metrics.util_acc,
            f64_cell(c.epsilon),
            f64_cell(c.alpha_star),
            c.sigma_d,
            f64_cell(c.r_s),
            f64_cell(c.r_d),
        ));
    }
    out
}

/// Sweep CSV; the budget-ratio columns serve the sigma_s axis and are
/// harmless elsewhere.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("axis,value,seed,mmd,util_acc,epsilon,alpha_star,sigma_d,r_s,r_d\n");
    for r in rows {
        let axis = match r.axis {
            crate::harness::SweepAxis::Epsilon => "epsilon",
            crate::harness::SweepAxis::RatioC => "ratio-c",
            crate::harness::SweepAxis::SigmaS => "sigma-s",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            axis,
            r.value,
            r.seed,
            r.metrics.mmd,
            r.metrics.util_acc,
            f64_cell(r.epsilon),
            f64_cell(r.alpha_star),
            r.sigma_d,
            f64_cell(r.r_s),
            f64_cell(r.r_d),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::SelectionQueryParams;
    use crate::denoiser::{DenoiserParams, ModelDims};
    use crate::saliency::privatize_and_rank;
    use crate::rng::{substream, Stream};
    use std::collections::BTreeMap;

    fn report(sigma_s: f64) -> SaliencyReport {
        let dims = ModelDims::default();
        let params = DenoiserParams::init(dims, 10, 1);
        let pool = dims.attention_pool();
        let s_k: BTreeMap<_, _> = pool
            .iter()
            .map(|id| {
                let (r, c) = dims.shape(id);
                let mut t = params.matrices[id].clone();
                t.scale_in_place(1e-3);
                assert_eq!(t.shape(), (r, c));
                (*id, t)
            })
            .collect();
        let q = SelectionQueryParams {
            sigma_s,
            clip_s: 1.0,
            n_star: 10,
        };
        let mut rng = substream(1, Stream::SelectionNoise);
        privatize_and_rank(&pool, s_k, &q, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn clean_norms_only_in_test_mode() {
        let private = saliency_to_csv(&report(5.0));
        assert!(private.starts_with("id,norm_noisy"));
        let test_mode = saliency_to_csv(&report(0.0));
        assert!(test_mode.starts_with("id,norm_clean,norm_noisy"));
        let private_json = saliency_to_json(&report(5.0));
        assert!(private_json.get("s_k").is_none());
        let test_json = saliency_to_json(&report(0.0));
        assert!(test_json.get("s_k").is_some());
    }

    #[test]
    fn csv_emission_is_deterministic() {
        assert_eq!(saliency_to_csv(&report(5.0)), saliency_to_csv(&report(5.0)));
        let steps = vec![
            StepRecord {
                h: 0,
                batch_size: 0,
                loss_mean: None,
                grad_norm_mean: None,
                grad_norm_max: None,
            },
            StepRecord {
                h: 1,
                batch_size: 2,
                loss_mean: Some(0.5),
                grad_norm_mean: Some(1.25),
                grad_norm_max: Some(2.0),
            },
        ];
        let csv = steps_to_csv(&steps);
        assert!(csv.contains("0,0,,,\n"));
        assert!(csv.contains("1,2,0.5,1.25,2\n"));
    }
}

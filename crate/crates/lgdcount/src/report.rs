//! JSON and plain-text renderings of evaluation and ablation results.

use lgd_core::config::RunConfig;
use lgd_core::eval::{AblationTable, EvalReport};
use serde_json::{json, Map, Value};

/// Published results on real benchmarks. They are printed for orientation
/// only; the synthetic benchmark cannot reproduce them.
pub const REFERENCES: &[&str] = &[
    "WorldExpo'10 average MAE 5.8",
    "Venice MAE 12.4, MSE 18.0",
    "UHK MAE 2.1",
    "prototype count, WorldExpo'10 MAE: K=3 5.8 vs K=1 7.4",
    "guidance removal, WorldExpo'10 MAE: full 5.8 < w/o GDG 6.5 < w/o LDG 7.7",
];

pub const REFERENCE_NOTE: &str =
    "reference values come from full-scale training on real datasets; they are not reproducible here and are not targets";

fn config_json(cfg: &RunConfig) -> Value {
    let mut m = Map::new();
    for (k, v) in cfg.entries() {
        m.insert(k.to_string(), Value::String(v));
    }
    Value::Object(m)
}

pub fn eval_json(report: &EvalReport, cfg: &RunConfig, checkpoint_hash: &str) -> Value {
    json!({
        "seed": report.seed,
        "config": config_json(cfg),
        "config_fingerprint": format!("{:016x}", cfg.fingerprint()),
        "checkpoint_sha256": checkpoint_hash,
        "overall": { "mae": report.mae, "mse": report.mse },
        "scene_mean": { "mae": report.scene_mean_mae, "mse": report.scene_mean_mse },
        "per_scene": report.per_scene.iter().map(|s| json!({
            "scene_id": s.scene_id,
            "support": s.support,
            "mae": s.mae,
            "mse": s.mse,
            "n_queries": s.n_queries,
        })).collect::<Vec<_>>(),
        "queries": report.queries.iter().map(|q| json!({
            "scene_id": q.scene_id,
            "image": q.image,
            "predicted": q.predicted,
            "actual": q.actual,
        })).collect::<Vec<_>>(),
        "references": REFERENCES,
        "reference_note": REFERENCE_NOTE,
    })
}

fn footnotes(out: &mut String) {
    out.push_str("\nreferences (");
    out.push_str(REFERENCE_NOTE);
    out.push_str("):\n");
    for r in REFERENCES {
        out.push_str(&format!("  {r}\n"));
    }
}

pub fn eval_table(report: &EvalReport) -> String {
    let w = report
        .per_scene
        .iter()
        .map(|s| s.scene_id.len())
        .chain([10])
        .max()
        .unwrap_or(10);
    let mut out = format!("{:<w$}  {:>7}  {:>9}  {:>9}\n", "scene", "queries", "MAE", "MSE");
    for s in &report.per_scene {
        out.push_str(&format!("{:<w$}  {:>7}  {:>9.3}  {:>9.3}\n", s.scene_id, s.n_queries, s.mae, s.mse));
    }
    let n: usize = report.per_scene.iter().map(|s| s.n_queries).sum();
    out.push_str(&format!("{:<w$}  {:>7}  {:>9.3}  {:>9.3}\n", "pooled", n, report.mae, report.mse));
    out.push_str(&format!(
        "{:<w$}  {:>7}  {:>9.3}  {:>9.3}\n",
        "scene-mean",
        report.per_scene.len(),
        report.scene_mean_mae,
        report.scene_mean_mse
    ));
    out.push_str(&format!("seed {}\n", report.seed));
    footnotes(&mut out);
    out
}

pub fn ablation_json(table: &AblationTable, base: &RunConfig) -> Value {
    json!({
        "suite": table.suite,
        "seeds": table.seeds,
        "config": config_json(base),
        "config_fingerprint": format!("{:016x}", base.fingerprint()),
        "variants": table.variants.iter().map(|v| json!({
            "name": v.name,
            "changed": v.changed.iter().map(|(k, val)| json!({ "key": k, "value": val })).collect::<Vec<_>>(),
            "median_mae": v.median_mae,
            "median_mse": v.median_mse,
            "median_untrained_mae": v.median_untrained_mae,
            "runs": v.runs.iter().map(|r| json!({
                "seed": r.seed,
                "mae": r.mae,
                "mse": r.mse,
                "untrained_mae": r.untrained_mae,
                "skipped_episodes": r.skipped,
                "final_loss": r.final_loss,
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "references": REFERENCES,
        "reference_note": REFERENCE_NOTE,
    })
}

pub fn ablation_table(table: &AblationTable) -> String {
    let w = table.variants.iter().map(|v| v.name.len()).chain([7]).max().unwrap_or(7);
    let mut out = format!(
        "suite {} (medians over seeds {:?})\n{:<w$}  {:>9}  {:>9}  {:>13}  changed\n",
        table.suite, table.seeds, "variant", "MAE", "MSE", "untrained MAE"
    );
    for v in &table.variants {
        let changed = if v.changed.is_empty() {
            "-".to_string()
        } else {
            v.changed.iter().map(|(k, val)| format!("{k}={val}")).collect::<Vec<_>>().join(" ")
        };
        out.push_str(&format!(
            "{:<w$}  {:>9.3}  {:>9.3}  {:>13.3}  {}\n",
            v.name, v.median_mae, v.median_mse, v.median_untrained_mae, changed
        ));
    }
    footnotes(&mut out);
    out
}

/// Stable, human-readable JSON text.
pub fn to_text(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgd_core::eval::{QueryRecord, SceneReport};

    fn report() -> EvalReport {
        EvalReport {
            seed: 3,
            per_scene: vec![SceneReport {
                scene_id: "a".into(),
                support: "a/000".into(),
                mae: 1.0,
                mse: 1.0,
                n_queries: 1,
            }],
            mae: 1.0,
            mse: 1.0,
            scene_mean_mae: 1.0,
            scene_mean_mse: 1.0,
            queries: vec![QueryRecord {
                scene_id: "a".into(),
                image: "a/001".into(),
                predicted: 4.0,
                actual: 5.0,
            }],
        }
    }

    #[test]
    fn json_embeds_audit_fields() {
        let v = eval_json(&report(), &RunConfig::default(), "abc");
        assert_eq!(v["checkpoint_sha256"], "abc");
        assert_eq!(v["seed"], 3);
        assert_eq!(v["queries"][0]["actual"], 5.0);
        assert_eq!(v["config"]["mldl.prototypes"], "3");
        assert_eq!(v["references"].as_array().unwrap().len(), REFERENCES.len());
    }

    #[test]
    fn table_lists_pooled_and_scene_mean_rows() {
        let t = eval_table(&report());
        assert!(t.contains("pooled"));
        assert!(t.contains("scene-mean"));
        assert!(t.contains("not reproducible"));
    }
}

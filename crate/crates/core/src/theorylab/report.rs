//! Report records emitted by the theory commands, as JSON or aligned text.

use serde::{Deserialize, Serialize};

use super::McVariance;

/// Human-readable rendering as `key  value` lines with aligned values.
pub trait TextReport: Serialize {
    fn title(&self) -> &'static str;

    fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("reports serialize");
        let mut rows = Vec::new();
        flatten("", &value, &mut rows);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{}\n", self.title());
        for (k, v) in rows {
            out.push_str(&format!("  {k:<width$}  {v}\n"));
        }
        out
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        serde_json::Value::Array(xs) if xs.iter().any(|x| x.is_object()) => {
            for (i, x) in xs.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        serde_json::Value::Null => out.push((prefix.to_string(), "-".into())),
        serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_outputs: usize,
    pub n_rewarded_outputs: usize,
    pub correct_probability: f64,
    pub exact_variance: f64,
    /// `p (1 - p) |grad log pi(y*)|^2`, only when exactly one output is rewarded.
    pub single_answer_formula: Option<f64>,
    pub relative_error: Option<f64>,
    pub monte_carlo: Option<McVariance>,
    pub mc_within_3_std_errors: Option<bool>,
}

impl TextReport for VarianceReport {
    fn title(&self) -> &'static str {
        "estimator variance"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub n_outputs: usize,
    pub gold_mass: f64,
    pub answer_gradient_norm: f64,
    pub final_gradient_norm: f64,
    pub non_neutral_support: bool,
    pub stationary_under_answer: bool,
}

impl TextReport for StationarityReport {
    fn title(&self) -> &'static str {
        "stationarity"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub gold_mass: f64,
    pub answer_gradient_norm: f64,
    pub final_gradient_norm: f64,
    pub ratio: Option<f64>,
}

impl TextReport for EscapeReport {
    fn title(&self) -> &'static str {
        "escape signal"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub eps: f64,
    pub k: usize,
    pub v: usize,
    pub floor: f64,
    /// Where the floor value comes from.
    pub floor_source: String,
    pub grid_denominator: usize,
    pub grid_points: u64,
    pub grid_min: f64,
    pub grid_gap: f64,
    pub n_samples: usize,
    pub min_sampled_entropy: f64,
    pub violations: usize,
}

impl TextReport for EntropyReport {
    fn title(&self) -> &'static str {
        "entropy floor"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingReport {
    pub trials: usize,
    pub cap: usize,
    pub capped: usize,
    pub mean: f64,
    pub std_error: f64,
    pub success_probability: Option<f64>,
    /// Geometric expectation `1 / p`.
    pub expected: Option<f64>,
}

impl TextReport for HittingReport {
    fn title(&self) -> &'static str {
        "hitting time"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst_state: Option<u64>,
    pub worst_token: Option<u32>,
}

impl TextReport for GradcheckReport {
    fn title(&self) -> &'static str {
        "gradient check"
    }
}

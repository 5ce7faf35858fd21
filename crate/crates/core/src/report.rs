//! Structured results for verification checks.
//!
//! Every numerical check in this crate reduces to one of two shapes:
//! a residual measured at a sequence of grid resolutions (pass when the
//! observed convergence order reaches the expected one, or the residual
//! is already at rounding level), or a single value compared against a
//! pinned tolerance.  `CheckReport` captures either; `Report` bundles a
//! run.  The report body is deterministic for a fixed seed and config;
//! wall-clock metadata lives outside the body so two runs can be
//! compared byte for byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Residual below this is treated as "converged to rounding"; order
/// estimates are meaningless past it.
pub const ROUNDING_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    /// Stable machine id, e.g. "covariance/n3/l4".
    pub id: String,
    /// Human description of what was verified.
    pub what: String,
    /// Grid sizes (nodes per bounded axis) for convergence checks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sizes: Vec<usize>,
    /// Residuals, one per size (or a single entry for value checks).
    pub residuals: Vec<f64>,
    /// Observed convergence order from the last size pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_order: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    pub pass: bool,
}

impl CheckReport {
    /// Convergence-style check: residuals at increasing resolutions.
    /// Passes when the observed order reaches `expected - 0.5`, or the
    /// final residual is already below the rounding floor.
    pub fn from_residuals(
        id: impl Into<String>,
        what: impl Into<String>,
        sizes: &[usize],
        residuals: &[f64],
        expected_order: f64,
    ) -> Self {
        assert_eq!(sizes.len(), residuals.len());
        assert!(!residuals.is_empty());
        let last = *residuals.last().unwrap();
        let order = if sizes.len() >= 2 {
            let r1 = residuals[residuals.len() - 2];
            let r2 = last;
            let h1 = 1.0 / (sizes[sizes.len() - 2] as f64 - 1.0);
            let h2 = 1.0 / (sizes[sizes.len() - 1] as f64 - 1.0);
            if r1 > 1e-14 && r2 > 1e-14 {
                Some((r1 / r2).ln() / (h1 / h2).ln())
            } else {
                None
            }
        } else {
            None
        };
        let pass = last < ROUNDING_FLOOR || order.map_or(false, |p| p >= expected_order - 0.5);
        CheckReport {
            id: id.into(),
            what: what.into(),
            sizes: sizes.to_vec(),
            residuals: residuals.to_vec(),
            order,
            expected_order: Some(expected_order),
            abs_tol: None,
            pass,
        }
    }

    /// Single-value check against a pinned absolute tolerance.
    pub fn from_value(
        id: impl Into<String>,
        what: impl Into<String>,
        residual: f64,
        abs_tol: f64,
    ) -> Self {
        CheckReport {
            id: id.into(),
            what: what.into(),
            sizes: Vec::new(),
            residuals: vec![residual],
            order: None,
            expected_order: None,
            abs_tol: Some(abs_tol),
            pass: residual.abs() <= abs_tol,
        }
    }

    /// One-sided check: `value >= -abs_tol` (used for sharp-inequality
    /// deficits, where any materially negative value is a failure).
    pub fn from_lower_bound(
        id: impl Into<String>,
        what: impl Into<String>,
        value: f64,
        abs_tol: f64,
    ) -> Self {
        CheckReport {
            id: id.into(),
            what: what.into(),
            sizes: Vec::new(),
            residuals: vec![value],
            order: None,
            expected_order: None,
            abs_tol: Some(abs_tol),
            pass: value >= -abs_tol,
        }
    }

    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().unwrap()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
}

/// Deterministic part of a run: configuration echo, ordered checks,
/// tallies.  Serializing this with `body_json` yields byte-identical
/// output for identical seeds and configs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportBody {
    pub config: BTreeMap<String, String>,
    pub checks: Vec<CheckReport>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Unix seconds at generation time.
    pub generated_at: u64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub meta: ReportMeta,
    pub body: ReportBody,
}

impl Report {
    pub fn new(config: BTreeMap<String, String>, checks: Vec<CheckReport>) -> Self {
        let passed = checks.iter().filter(|c| c.pass).count();
        let summary = Summary {
            total: checks.len(),
            passed,
            failed: checks.len() - passed,
        };
        let generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Report {
            schema_version: 1,
            meta: ReportMeta {
                generated_at,
                elapsed_seconds: 0.0,
            },
            body: ReportBody {
                config,
                checks,
                summary,
            },
        }
    }

    pub fn all_pass(&self) -> bool {
        self.body.summary.failed == 0
    }

    /// Deterministic serialization of the body only.
    pub fn body_json(&self) -> String {
        serde_json::to_string_pretty(&self.body).expect("report body serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV: one row per check.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,what,order,final_residual,abs_tol,pass\n");
        for c in &self.body.checks {
            let order = c.order.map(|p| format!("{p:.3}")).unwrap_or_default();
            let tol = c.abs_tol.map(|t| format!("{t:e}")).unwrap_or_default();
            let what = c.what.replace('"', "'");
            out.push_str(&format!(
                "{},\"{}\",{},{:e},{},{}\n",
                c.id,
                what,
                order,
                c.final_residual(),
                tol,
                c.pass
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_estimate_and_pass_logic() {
        // Fourth-order residuals halving the grid: ratio 16.
        let c = CheckReport::from_residuals("t", "test", &[17, 33], &[1.6e-3, 1.0e-4], 4.0);
        assert!((c.order.unwrap() - 4.0).abs() < 1e-12);
        assert!(c.pass);

        // Too slow: order 1 against expected 2.
        let c = CheckReport::from_residuals("t", "test", &[17, 33], &[1.0e-3, 5.0e-4], 2.0);
        assert!(!c.pass);

        // Rounding-floor escape hatch.
        let c = CheckReport::from_residuals("t", "test", &[17, 33], &[1.0e-9, 9.0e-10], 2.0);
        assert!(c.pass);
    }

    #[test]
    fn value_checks() {
        assert!(CheckReport::from_value("a", "x", 1e-13, 1e-12).pass);
        assert!(!CheckReport::from_value("a", "x", 1e-11, 1e-12).pass);
        assert!(CheckReport::from_lower_bound("b", "y", 0.3, 1e-8).pass);
        assert!(CheckReport::from_lower_bound("b", "y", -1e-9, 1e-8).pass);
        assert!(!CheckReport::from_lower_bound("b", "y", -1e-3, 1e-8).pass);
    }

    #[test]
    fn body_serialization_is_deterministic() {
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_string(), "42".to_string());
        let checks = vec![CheckReport::from_value("a", "x", 0.0, 1e-12)];
        let r1 = Report::new(cfg.clone(), checks.clone());
        std::thread::sleep(std::time::Duration::from_millis(5));
        let r2 = Report::new(cfg, checks);
        assert_eq!(r1.body_json(), r2.body_json());
        assert!(r1.to_csv().contains("a,"));
    }
}

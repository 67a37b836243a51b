//! The four-variant ablation: baseline, +FGPA, +AFF, +both.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::harness::coco::Dataset;
use crate::harness::config::RunConfig;
use crate::harness::eval::evaluate;
use crate::metrics::ApReport;
use crate::model::{AffMode, Model};
use crate::training::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub fgpa_enabled: bool,
    pub aff_mode: AffMode,
}

/// Row order of the ablation table.
pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "baseline",
        fgpa_enabled: false,
        aff_mode: AffMode::Off,
    },
    Variant {
        name: "+FGPA",
        fgpa_enabled: true,
        aff_mode: AffMode::Off,
    },
    Variant {
        name: "+AFF",
        fgpa_enabled: false,
        aff_mode: AffMode::ElementwiseGate,
    },
    Variant {
        name: "+both",
        fgpa_enabled: true,
        aff_mode: AffMode::ElementwiseGate,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: Option<ApReport>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Why the variant produced no report.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,AP,AP50,AP75,AP_S,AP_M,AP_L,status";

impl AblationReport {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.report.is_some())
    }

    /// One row per variant; failed variants keep their row with empty metrics.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            match (&r.report, &r.error) {
                (Some(rep), _) => {
                    let _ = writeln!(s, "{},{},ok", r.variant.name, rep.to_csv_row());
                }
                (None, e) => {
                    let msg = e.as_deref().unwrap_or("no report").replace([',', '\n'], ";");
                    let _ = writeln!(s, "{},,,,,,,failed: {msg}", r.variant.name);
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Small-object AP of baseline against +both, reported without judgement.
    pub fn small_object_trend(&self) -> Option<String> {
        let ap_s = |name: &str| {
            self.rows
                .iter()
                .find(|r| r.variant.name == name)
                .and_then(|r| r.report.as_ref())
                .map(|r| r.ap_s)
        };
        let (base, both) = (ap_s("baseline")?, ap_s("+both")?);
        let direction = if both > base {
            "higher"
        } else if both < base {
            "lower"
        } else {
            "equal"
        };
        Some(format!("AP_S baseline {base:.4} -> +both {both:.4} ({direction})"))
    }
}

/// The base config with one variant's switches applied.
pub fn variant_config(base: &RunConfig, v: &Variant) -> RunConfig {
    let mut c = base.clone();
    c.model.fgpa_enabled = v.fgpa_enabled;
    c.model.aff_mode = v.aff_mode;
    c
}

/// Trains and evaluates every variant on the same data with the same seed.
///
/// A failing variant is recorded in its row and the remaining ones still run.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    mut progress: impl FnMut(&Variant, usize, f64),
) -> AblationReport {
    let samples = train_set.samples();
    let rows = VARIANTS
        .iter()
        .map(|v| {
            let cfg = variant_config(base, v);
            let outcome = (|| -> Result<(ApReport, f64, f64)> {
                let mut model = Model::new(cfg.model_config())?;
                let log = train(&mut model, &samples, &cfg.train_config(), |r| progress(v, r.iter, r.total))?;
                let first = log.first().map_or(f64::NAN, |r| r.total);
                let last = log.last().map_or(f64::NAN, |r| r.total);
                Ok((evaluate(&model, eval_set)?, first, last))
            })();
            match outcome {
                Ok((report, first, last)) => AblationRow {
                    variant: *v,
                    report: Some(report),
                    initial_loss: Some(first),
                    final_loss: Some(last),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: *v,
                    report: None,
                    initial_loss: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    AblationReport { rows }
}

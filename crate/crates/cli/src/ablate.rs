//! Component ablation: the same data and seeds under different switches.

use serde::{Deserialize, Serialize};
use skdf::eval::MetricsReport;

use crate::config::{RunConfig, TeacherMode};
use crate::CliError;

pub const VARIANTS: [&str; 5] = ["baseline", "distill", "distill-dw", "distill-cs", "full"];

/// Switches of one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub distill: bool,
    pub down_weight: bool,
    pub cascade: bool,
}

/// `baseline` keeps the cascade detector and pseudo labels but no teacher.
/// The `distill*` rows add the teacher with a single coupled decoder,
/// optionally with down-weighting (`-dw`) or the cascade (`-cs`); `full`
/// has everything.
pub fn switches(name: &str) -> Result<Switches, CliError> {
    let s = |distill, down_weight, cascade| Switches {
        distill,
        down_weight,
        cascade,
    };
    Ok(match name {
        "baseline" => s(false, true, true),
        "distill" => s(true, false, false),
        "distill-dw" => s(true, true, false),
        "distill-cs" => s(true, false, true),
        "full" => s(true, true, true),
        other => return Err(CliError::Config(format!("ablate.variants: unknown variant {other:?} (expected one of {VARIANTS:?})"))),
    })
}

/// `base` with the variant's switches applied.
pub fn apply(base: &RunConfig, name: &str, seed: u64) -> Result<RunConfig, CliError> {
    let sw = switches(name)?;
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.train.distill = sw.distill;
    cfg.train.loss.down_weight = sw.down_weight;
    cfg.model.cascade = sw.cascade;
    if !sw.distill {
        cfg.teacher = TeacherMode::Off;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub known_map: Option<f64>,
    pub u_recall: Option<f64>,
    pub unknown_precision: Option<f64>,
    pub unknown_ap: Option<f64>,
}

impl AblationRow {
    pub fn from_report(variant: &str, seed: u64, r: &MetricsReport) -> Self {
        AblationRow {
            variant: variant.to_string(),
            seed,
            known_map: r.map_both,
            u_recall: r.unknown.u_recall,
            unknown_precision: r.unknown.precision,
            unknown_ap: r.unknown.ap,
        }
    }
}

/// Median of the present values.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub data_seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Per-variant medians over seeds, as an aligned table.
    pub fn table(&self) -> String {
        let mut variants: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!("{:<12}  {:>9}  {:>9}  {:>9}  {:>9}\n", "Variant", "Known mAP", "U-Recall", "Unk Prec", "Unk AP");
        for v in variants {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
            out += &format!(
                "{:<12}  {:>9}  {:>9}  {:>9}  {:>9}\n",
                v,
                pct(median(rows.iter().map(|r| r.known_map))),
                pct(median(rows.iter().map(|r| r.u_recall))),
                pct(median(rows.iter().map(|r| r.unknown_precision))),
                pct(median(rows.iter().map(|r| r.unknown_ap))),
            );
        }
        out
    }
}

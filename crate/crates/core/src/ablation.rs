//! Component and distillation-mode sweeps.
//!
//! The component grid switches distillation (D), the pseudo-residual term on
//! unlabelled pixels (M) and background noise on the supervised view (N).
//! With all three off the row is the single-network combined objective.
//! The mode study reruns the full D+M+N system with each weighting rule.

use serde::{Deserialize, Serialize};

use crate::config::{BranchTag, Config, TrainMode};
use crate::error::Result;
use crate::eval::{select_final_branch, Metrics};
use crate::losses::DistillMode;
use crate::train::{fit, TrainData};

/// Which study a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Grid,
    Distill,
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Grid => "grid",
            Self::Distill => "distill",
        }
    }
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub study: Study,
    pub name: String,
    pub distill: bool,
    pub filtering: bool,
    pub noise: bool,
    pub mode: DistillMode,
    pub config: Config,
}

fn component_name(d: bool, m: bool, n: bool) -> String {
    let parts: Vec<&str> = [(d, "D"), (m, "M"), (n, "N")].iter().filter(|p| p.0).map(|p| p.1).collect();
    if parts.is_empty() {
        "baseline".into()
    } else {
        parts.join("+")
    }
}

/// Applies the D/M/N switches to `base`. D off zeroes both distillation
/// weights; all three off selects the single-network baseline.
pub fn component_config(base: &Config, d: bool, m: bool, n: bool) -> Config {
    let mut c = base.clone();
    c.train.mode = if d || m || n { TrainMode::Semi } else { TrainMode::Baseline };
    if !d {
        c.loss.lambda_s = 0.0;
        c.loss.lambda_u = if c.train.mode == TrainMode::Baseline {
            base.loss.lambda_u
        } else {
            0.0
        };
    }
    c.objective.filtering = m;
    c.augment.background_noise = n;
    c
}

/// The 8 grid rows in a fixed order, then UW/UT/UWT on the full system.
pub fn variants(base: &Config) -> Vec<Variant> {
    let mut out = Vec::new();
    for code in 0..8u8 {
        let (d, m, n) = (code & 4 != 0, code & 2 != 0, code & 1 != 0);
        out.push(Variant {
            study: Study::Grid,
            name: component_name(d, m, n),
            distill: d,
            filtering: m,
            noise: n,
            mode: base.objective.distill_mode,
            config: component_config(base, d, m, n),
        });
    }
    for mode in DistillMode::ALL {
        let mut config = component_config(base, true, true, true);
        config.objective.distill_mode = mode;
        out.push(Variant {
            study: Study::Distill,
            name: mode.name().to_uppercase(),
            distill: true,
            filtering: true,
            noise: true,
            mode,
            config,
        });
    }
    out
}

/// Outcome of one variant, evaluated on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: Study,
    pub name: String,
    pub distill: bool,
    pub filtering: bool,
    pub noise: bool,
    pub mode: DistillMode,
    /// Branch whose metrics are reported.
    pub branch: BranchTag,
    pub metrics: Metrics,
}

pub const CSV_HEADER: &str = "study,name,distill,filtering,noise,mode,branch,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.study.name(),
            r.name,
            r.distill,
            r.filtering,
            r.noise,
            r.mode,
            r.branch,
            r.metrics.csv_fields()
        ));
    }
    out
}

/// Trains and evaluates every variant on the same data. Identical
/// configurations (the UW mode row duplicates D+M+N when UW is the base
/// mode) are trained once.
pub fn run_ablation(
    base: &Config,
    data: &TrainData,
    mut progress: impl FnMut(&Variant, &AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut done: Vec<(Config, BranchTag, Metrics)> = Vec::new();
    let mut rows = Vec::new();
    for v in variants(base) {
        let cached = done.iter().find(|(c, _, _)| *c == v.config).map(|(_, b, m)| (*b, *m));
        let (branch, metrics) = match cached {
            Some(hit) => hit,
            None => {
                let fitted = fit(&v.config, data, None)?;
                let sel = select_final_branch(
                    &fitted.trainer.networks(),
                    &data.val,
                    v.config.eval.branch,
                    v.config.eval.median_scale,
                )?;
                done.push((v.config.clone(), sel.branch, sel.metrics));
                (sel.branch, sel.metrics)
            }
        };
        let row = AblationRow {
            study: v.study,
            name: v.name.clone(),
            distill: v.distill,
            filtering: v.filtering,
            noise: v.noise,
            mode: v.mode,
            branch,
            metrics,
        };
        progress(&v, &row);
        rows.push(row);
    }
    Ok(rows)
}

//! DPO loss in terms of the policy/reference ratios `t1 = π(y_c)/π_ref(y_c)`
//! and `t2 = π(y_r)/π_ref(y_r)`, its partial derivatives, and the empirical
//! reject-bias report over training trajectories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid_f64;
use crate::error::{Error, Result};
use crate::train::TrajectoryLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub t1: f64,
    pub t2: f64,
    pub beta: f64,
}

impl RatioPoint {
    pub fn new(t1: f64, t2: f64, beta: f64) -> Result<Self> {
        let p = Self { t1, t2, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !(ok(self.t1) && ok(self.t2) && ok(self.beta)) {
            return Err(Error::contract(format!(
                "ratio point {self:?} must be strictly positive"
            )));
        }
        Ok(())
    }

    /// `β (ln t2 - ln t1)`, the negated scaled DPO logit.
    fn z(&self) -> f64 {
        self.beta * (self.t2.ln() - self.t1.ln())
    }
}

/// `-log(t1^β / (t1^β + t2^β))`, evaluated as `softplus(β (ln t2 - ln t1))`.
pub fn dpo_loss_t(p: &RatioPoint) -> Result<f64> {
    p.validate()?;
    let z = p.z();
    Ok(z.max(0.0) + (-z.abs()).exp().ln_1p())
}

/// `(∂L/∂t1, ∂L/∂t2)`.
pub fn dpo_partials(p: &RatioPoint) -> Result<(f64, f64)> {
    p.validate()?;
    // s = t2^β / (t1^β + t2^β)
    let s = sigmoid_f64(p.z());
    Ok((-p.beta * s / p.t1, p.beta * s / p.t2))
}

/// `|∂L/∂t1 / ∂L/∂t2|`, which equals `t2 / t1`.
pub fn update_rate_ratio(p: &RatioPoint) -> Result<f64> {
    let (d1, d2) = dpo_partials(p)?;
    Ok((d1 / d2).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub step: usize,
    pub t1: f64,
    pub t2: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub steps: usize,
    pub warmup_steps: usize,
    pub evaluated_steps: usize,
    /// Fraction of post-warmup steps with `t2/t1 < 1`.
    pub fraction_below_one: f64,
    pub mean_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    pub summary: BiasSummary,
}

pub const DEFAULT_WARMUP_FRAC: f64 = 0.1;

/// Per-step `(t1, t2, t2/t1)` from a DPO trajectory and the fraction of
/// post-warmup steps where the rejected ratio updates faster.
pub fn bias_trajectory_report(log: &TrajectoryLog, warmup_frac: f64) -> Result<BiasReport> {
    if log.is_empty() {
        return Err(Error::contract("bias report needs a non-empty trajectory"));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::contract(format!("warmup fraction {warmup_frac} outside [0, 1)")));
    }
    let rows = log
        .records
        .iter()
        .map(|r| match (r.t1, r.t2) {
            (Some(t1), Some(t2)) => Ok(BiasRow {
                step: r.step,
                t1,
                t2,
                ratio: t2 / t1,
            }),
            _ => Err(Error::contract(format!(
                "step {} has no t1/t2; not a DPO trajectory",
                r.step
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let warmup_steps = (warmup_frac * rows.len() as f64).ceil() as usize;
    let tail = &rows[warmup_steps.min(rows.len() - 1)..];
    let below = tail.iter().filter(|r| r.ratio < 1.0).count();
    Ok(BiasReport {
        summary: BiasSummary {
            steps: rows.len(),
            warmup_steps,
            evaluated_steps: tail.len(),
            fraction_below_one: below as f64 / tail.len() as f64,
            mean_ratio: tail.iter().map(|r| r.ratio).sum::<f64>() / tail.len() as f64,
        },
        rows,
    })
}

impl BiasReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "t1", "t2", "ratio"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.t1.to_string(),
                r.t2.to_string(),
                r.ratio.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::StepRecord;

    fn pt(t1: f64, t2: f64, beta: f64) -> RatioPoint {
        RatioPoint::new(t1, t2, beta).unwrap()
    }

    #[test]
    fn equal_ratios_cost_ln2() {
        assert!((dpo_loss_t(&pt(3.0, 3.0, 0.7)).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn vanishing_rejected_ratio_costs_nothing() {
        assert!(dpo_loss_t(&pt(1.0, 1e-12, 1.0)).unwrap() < 1e-9);
    }

    #[test]
    fn symmetric_point_partials() {
        let (a, b) = dpo_partials(&pt(1.0, 1.0, 1.0)).unwrap();
        assert!((a + 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ratio_is_t2_over_t1() {
        assert!((update_rate_ratio(&pt(4.0, 1.0, 0.3)).unwrap() - 0.25).abs() < 1e-15);
        assert!((update_rate_ratio(&pt(2.0, 2.0, 2.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_positive_points_are_rejected() {
        assert!(RatioPoint::new(0.0, 1.0, 1.0).is_err());
        assert!(RatioPoint::new(1.0, 1.0, -1.0).is_err());
    }

    fn log(ts: &[(f64, f64)]) -> TrajectoryLog {
        TrajectoryLog {
            records: ts
                .iter()
                .enumerate()
                .map(|(step, &(t1, t2))| StepRecord {
                    step,
                    lr: 0.0,
                    loss: 0.0,
                    chosen_logprob: 0.0,
                    rejected_logprob: 0.0,
                    t1: Some(t1),
                    t2: Some(t2),
                    p_dpo: Some(t1.ln() - t2.ln()),
                    kl: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn diverging_ratios_are_all_biased() {
        let l = log(&(0..20)
            .map(|i| (1.0 + 0.1 * i as f64, 1.0 / (1.0 + 0.1 * i as f64)))
            .collect::<Vec<_>>());
        let r = bias_trajectory_report(&l, 0.1).unwrap();
        assert_eq!(r.summary.fraction_below_one, 1.0);
        assert_eq!(r.summary.warmup_steps, 2);
    }

    #[test]
    fn unit_ratio_is_not_below_one() {
        let r = bias_trajectory_report(&log(&[(1.5, 1.5); 10]), 0.1).unwrap();
        assert_eq!(r.summary.fraction_below_one, 0.0);
        assert!(bias_trajectory_report(&TrajectoryLog::default(), 0.1).is_err());
    }
}

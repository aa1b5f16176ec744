//! Relative improvement of one method over baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Whether smaller or larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Suboptimality and regret.
    LowerIsBetter,
    /// Return.
    HigherIsBetter,
}

/// Improvement of `ours` over `baseline` as a fraction (1.0 = 100%).
///
/// Lower-is-better: `(baseline - ours) / ours`.
/// Higher-is-better: `(ours - baseline) / baseline`.
pub fn improvement(ours: f64, baseline: f64, direction: Direction) -> Result<f64, HarnessError> {
    let (num, den) = match direction {
        Direction::LowerIsBetter => (baseline - ours, ours),
        Direction::HigherIsBetter => (ours - baseline, baseline),
    };
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return Err(HarnessError::ZeroDenominator { ours, baseline });
    }
    Ok(num / den)
}

/// One line of the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub environment: String,
    pub method: String,
    pub baseline: String,
    /// `offline` or `online`.
    pub setting: String,
    pub metric: String,
    pub ours: f64,
    pub baseline_value: f64,
    /// Percent.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub rows: Vec<ImprovementRow>,
}

impl ImprovementTable {
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        environment: &str,
        method: &str,
        baseline: &str,
        setting: &str,
        metric: &str,
        direction: Direction,
        ours: f64,
        baseline_value: f64,
    ) -> Result<(), HarnessError> {
        let pct = 100.0 * improvement(ours, baseline_value, direction)?;
        self.rows.push(ImprovementRow {
            environment: environment.into(),
            method: method.into(),
            baseline: baseline.into(),
            setting: setting.into(),
            metric: metric.into(),
            ours,
            baseline_value,
            improvement_pct: pct,
        });
        Ok(())
    }

    /// CSV preceded by a `# config_hash=` provenance line.
    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: &str) -> std::io::Result<()> {
        writeln!(w, "# config_hash={config_hash}")?;
        writeln!(w, "environment,method,baseline,setting,metric,ours,baseline_value,improvement_pct")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.environment, r.method, r.baseline, r.setting, r.metric, r.ours, r.baseline_value, r.improvement_pct
            )?;
        }
        Ok(())
    }
}

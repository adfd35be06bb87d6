use serde::Serialize;

use crate::cache_sharing::FusionWeight;
use crate::error::{Error, Result};
use crate::numerics::Real;

use super::params::Model;

/// Fusion weights summarised as `target × source` matrices, one for keys and
/// one for values. Scalar weights appear as they are; vector weights as
/// their mean absolute entry. Sources a target does not read are 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionHeatmap {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub key: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapCell {
    pub cache: &'static str,
    pub target: usize,
    pub source: usize,
    pub weight: f64,
}

fn summary<T: Real>(w: &FusionWeight<T>) -> f64 {
    match w {
        FusionWeight::Scalar(s) => s.as_f64(),
        other => other.mean_abs(),
    }
}

pub fn fusion_weight_heatmap<T: Real>(model: &Model<T>) -> Result<FusionHeatmap> {
    let plan = model.plan();
    if !plan.has_fusion() {
        return Err(Error::Config(format!("{} has no fusion weights", plan.strategy())));
    }
    let weights = model.fusion_weights()?;
    let targets: Vec<usize> = plan.rules().iter().map(|r| r.layer).collect();
    let sources = plan.all_sources();
    let grid = |get: &dyn Fn(usize, usize) -> Option<f64>| -> Vec<Vec<f64>> {
        targets
            .iter()
            .map(|&i| sources.iter().map(|&j| get(i, j).unwrap_or(0.0)).collect())
            .collect()
    };
    let key = grid(&|i, j| weights.key(i, j).map(summary));
    let value = grid(&|i, j| weights.value(i, j).map(summary));
    Ok(FusionHeatmap {
        targets,
        sources,
        key,
        value,
    })
}

impl FusionHeatmap {
    /// Long-form cells, keys first, row-major.
    pub fn cells(&self) -> Vec<HeatmapCell> {
        let mut out = Vec::new();
        for (cache, m) in [("key", &self.key), ("value", &self.value)] {
            for (r, &target) in self.targets.iter().enumerate() {
                for (c, &source) in self.sources.iter().enumerate() {
                    out.push(HeatmapCell {
                        cache,
                        target,
                        source,
                        weight: m[r][c],
                    });
                }
            }
        }
        out
    }

    /// Share of each row's value-weight mass on the lowest source, averaged
    /// over targets. Reported for inspection, not asserted.
    pub fn value_mass_on_first_source(&self) -> f64 {
        let shares: Vec<f64> = self
            .value
            .iter()
            .map(|row| {
                let total: f64 = row.iter().map(|x| x.abs()).sum();
                if total > 0.0 {
                    row[0].abs() / total
                } else {
                    0.0
                }
            })
            .collect();
        shares.iter().sum::<f64>() / shares.len().max(1) as f64
    }
}

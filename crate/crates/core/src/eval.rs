//! Count extraction and error metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::density::{self, DensityMap};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::train::TrainSample;

/// Ground-truth and predicted count for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub gt: f64,
    pub pred: f64,
    /// Optional grouping key (e.g. a camera scene).
    pub scene: Option<String>,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, gt: f64, pred: f64) -> Self {
        Self {
            id: id.into(),
            gt,
            pred,
            scene: None,
        }
    }

    pub fn abs_error(&self) -> f64 {
        (self.gt - self.pred).abs()
    }
}

/// Plain element sum; negative predictions are included.
pub fn count_from_map(map: &DensityMap) -> f64 {
    map.sum()
}

/// Predicts every sample on its padded grid, crops the final high-resolution
/// map back to the original extent and records its count.
pub fn evaluate(net: &Network, samples: &[TrainSample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            let out = net.predict(&s.image)?;
            let y = density::crop_back(&out.y_hat, s.original)?;
            Ok(EvalRecord::new(s.id.clone(), s.count, count_from_map(&y)))
        })
        .collect()
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no records to evaluate".into()));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::abs_error).sum::<f64>() / records.len() as f64)
}

/// Root mean squared count error.
pub fn rmse(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let mse = records
        .iter()
        .map(|r| (r.gt - r.pred) * (r.gt - r.pred))
        .sum::<f64>()
        / records.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountGroup {
    pub size: usize,
    pub mean_gt: f64,
    pub mean_pred: f64,
}

/// Sorts by ground-truth count and splits into `n_groups` contiguous groups
/// of `n / n_groups` records, the remainder going to the last group.
pub fn group_analysis(records: &[EvalRecord], n_groups: usize) -> Result<Vec<CountGroup>> {
    if n_groups == 0 {
        return Err(Error::Usage("need at least one group".into()));
    }
    if n_groups > records.len() {
        return Err(Error::Usage(format!(
            "{n_groups} groups requested for {} records",
            records.len()
        )));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.gt.total_cmp(&b.gt));
    let base = records.len() / n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let end = if g + 1 == n_groups { sorted.len() } else { start + base };
        let chunk = &sorted[start..end];
        let n = chunk.len() as f64;
        groups.push(CountGroup {
            size: chunk.len(),
            mean_gt: chunk.iter().map(|r| r.gt).sum::<f64>() / n,
            mean_pred: chunk.iter().map(|r| r.pred).sum::<f64>() / n,
        });
        start = end;
    }
    Ok(groups)
}

/// Per-scene `(mean gt, mean pred, mae)` for records carrying a scene tag.
pub fn scene_means(records: &[EvalRecord]) -> BTreeMap<String, (f64, f64, f64)> {
    let mut by_scene: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(s) = &r.scene {
            by_scene.entry(s.clone()).or_default().push(r);
        }
    }
    by_scene
        .into_iter()
        .map(|(scene, rs)| {
            let n = rs.len() as f64;
            let gt = rs.iter().map(|r| r.gt).sum::<f64>() / n;
            let pred = rs.iter().map(|r| r.pred).sum::<f64>() / n;
            let err = rs.iter().map(|r| r.abs_error()).sum::<f64>() / n;
            (scene, (gt, pred, err))
        })
        .collect()
}

/// Tab-separated report: `id gt pred abs_err` rows, then `MAE` and `RMSE`
/// lines, then the count groups when requested.
pub fn format_report(records: &[EvalRecord], groups: Option<usize>) -> Result<String> {
    let mut out = String::from("id\tgt\tpred\tabs_err\n");
    for r in records {
        writeln!(out, "{}\t{:.3}\t{:.3}\t{:.3}", r.id, r.gt, r.pred, r.abs_error()).unwrap();
    }
    writeln!(out, "MAE {:.3}", mae(records)?).unwrap();
    writeln!(out, "RMSE {:.3}", rmse(records)?).unwrap();
    if let Some(n) = groups {
        out.push_str("group\tsize\tmean_gt\tmean_pred\n");
        for (i, g) in group_analysis(records, n)?.iter().enumerate() {
            writeln!(out, "{}\t{}\t{:.3}\t{:.3}", i + 1, g.size, g.mean_gt, g.mean_pred).unwrap();
        }
    }
    Ok(out)
}

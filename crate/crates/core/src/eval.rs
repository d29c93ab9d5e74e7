//! PCK and NME, normalized by the longest side of the ground-truth box, and
//! their aggregation over folds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::heatmap::KeypointSet;

/// Predicted location per keypoint; `None` when the model reports nothing.
pub type Predictions = [Option<(f64, f64)>];

fn check(pred: &Predictions, gt: &KeypointSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(KdsmError::Dimension {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    gt.validate()
}

/// Normalized error of each visible keypoint; invalid predictions count 1.0.
pub fn normalized_errors(pred: &Predictions, gt: &KeypointSet) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let l = gt.bbox_longest_side();
    Ok(pred
        .iter()
        .zip(&gt.coords)
        .zip(&gt.visible)
        .filter(|(_, &v)| v)
        .map(|((p, &(gx, gy)), _)| match p {
            Some((px, py)) => ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() / l,
            None => 1.0,
        })
        .collect())
}

/// Fraction of visible keypoints within `threshold * L` (inclusive); `None`
/// when nothing is visible.
pub fn pck(pred: &Predictions, gt: &KeypointSet, threshold: f64) -> Result<Option<f64>> {
    let errs = normalized_errors(pred, gt)?;
    if errs.is_empty() {
        return Ok(None);
    }
    let hits = errs.iter().filter(|&&e| e <= threshold).count();
    Ok(Some(hits as f64 / errs.len() as f64))
}

/// Mean normalized error over visible keypoints, times 100.
pub fn nme(pred: &Predictions, gt: &KeypointSet) -> Result<Option<f64>> {
    let errs = normalized_errors(pred, gt)?;
    if errs.is_empty() {
        return Ok(None);
    }
    Ok(Some(100.0 * errs.iter().sum::<f64>() / errs.len() as f64))
}

/// Keypoint-level running totals for one fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub hits_02: usize,
    pub hits_005: usize,
    pub err_sum: f64,
    pub keypoints: usize,
    pub instances: usize,
    pub skipped: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &Predictions, gt: &KeypointSet) -> Result<()> {
        let errs = normalized_errors(pred, gt)?;
        if errs.is_empty() {
            self.skipped += 1;
            return Ok(());
        }
        self.instances += 1;
        for e in errs {
            self.keypoints += 1;
            self.err_sum += e;
            self.hits_02 += usize::from(e <= 0.2);
            self.hits_005 += usize::from(e <= 0.05);
        }
        Ok(())
    }

    pub fn finish(&self, fold: usize) -> Result<FoldMetrics> {
        if self.keypoints == 0 {
            return Err(KdsmError::Data(format!("fold {fold} has no visible keypoints to score")));
        }
        let n = self.keypoints as f64;
        Ok(FoldMetrics {
            fold,
            pck_02: self.hits_02 as f64 / n,
            pck_005: self.hits_005 as f64 / n,
            nme: 100.0 * self.err_sum / n,
            keypoints: self.keypoints,
            instances: self.instances,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub pck_02: f64,
    pub pck_005: f64,
    pub nme: f64,
    pub keypoints: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub folds: Vec<FoldMetrics>,
    pub mean_pck_02: f64,
    pub mean_pck_005: f64,
    pub mean_nme: f64,
}

/// Unweighted mean over folds; per-fold values are kept.
pub fn aggregate(label: &str, folds: &[FoldMetrics]) -> Result<MetricReport> {
    if folds.is_empty() {
        return Err(KdsmError::Validation("cannot aggregate zero folds".into()));
    }
    let n = folds.len() as f64;
    let mean = |f: fn(&FoldMetrics) -> f64| folds.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        label: label.to_string(),
        folds: folds.to_vec(),
        mean_pck_02: mean(|f| f.pck_02),
        mean_pck_005: mean(|f| f.pck_005),
        mean_nme: mean(|f| f.nme),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| KdsmError::Parse(format!("metric report: {e}")))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.label);
        let _ = writeln!(s, "{:>6}  {:>8}  {:>9}  {:>7}  {:>9}", "fold", "PCK@0.2", "PCK@0.05", "NME", "keypoints");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>6}  {:>8.4}  {:>9.4}  {:>7.3}  {:>9}",
                f.fold, f.pck_02, f.pck_005, f.nme, f.keypoints
            );
        }
        let _ = writeln!(
            s,
            "{:>6}  {:>8.4}  {:>9.4}  {:>7.3}",
            "mean", self.mean_pck_02, self.mean_pck_005, self.mean_nme
        );
        s
    }
}

/// Table over several reports, one row per report.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>5}  {:>8}  {:>9}  {:>7}", "label", "folds", "PCK@0.2", "PCK@0.05", "NME");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>5}  {:>8.4}  {:>9.4}  {:>7.3}",
            r.label,
            r.folds.len(),
            r.mean_pck_02,
            r.mean_pck_005,
            r.mean_nme
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt1(x: f64, y: f64) -> KeypointSet {
        KeypointSet::new(vec![(x, y)], vec![true], [0.0, 0.0, 100.0, 50.0]).unwrap()
    }

    #[test]
    fn worked_values() {
        let g = gt1(50.0, 25.0);
        assert_eq!(pck(&[Some((50.0, 25.0))], &g, 0.2).unwrap(), Some(1.0));
        assert_eq!(pck(&[Some((70.0, 25.0))], &g, 0.2).unwrap(), Some(1.0));
        assert_eq!(pck(&[Some((71.0, 25.0))], &g, 0.2).unwrap(), Some(0.0));
        let two = KeypointSet::new(vec![(0.0, 0.0), (0.0, 0.0)], vec![true, true], [0.0, 0.0, 100.0, 100.0]).unwrap();
        assert_eq!(nme(&[Some((10.0, 0.0)), Some((0.0, 30.0))], &two).unwrap(), Some(20.0));
        assert_eq!(nme(&[Some((50.0, 25.0))], &g).unwrap(), Some(0.0));
    }

    #[test]
    fn invisible_and_invalid() {
        let g = KeypointSet::new(vec![(0.0, 0.0), (5.0, 5.0)], vec![true, false], [0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(nme(&[Some((1.0, 0.0)), Some((90.0, 90.0))], &g).unwrap(), Some(10.0));
        assert_eq!(pck(&[None, None], &g, 0.2).unwrap(), Some(0.0));
        assert_eq!(nme(&[None, None], &g).unwrap(), Some(100.0));
        let hidden = KeypointSet::new(vec![(0.0, 0.0)], vec![false], [0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(pck(&[None], &hidden, 0.2).unwrap(), None);
    }

    #[test]
    fn aggregation() {
        let f = |fold, p| FoldMetrics {
            fold,
            pck_02: p,
            pck_005: p / 2.0,
            nme: 10.0,
            keypoints: 3,
            instances: 1,
        };
        let r = aggregate("x", &[f(1, 0.8), f(2, 0.9)]).unwrap();
        assert!((r.mean_pck_02 - 0.85).abs() < 1e-15);
        let r2 = aggregate("x", &[f(2, 0.9), f(1, 0.8)]).unwrap();
        assert_eq!(r.mean_pck_02, r2.mean_pck_02);
        assert_eq!(aggregate("x", &[f(1, 0.8)]).unwrap().mean_pck_02, 0.8);
        assert!(aggregate("x", &[]).is_err());
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_table().contains("mean"));
    }
}

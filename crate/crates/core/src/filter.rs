//! Confidence thresholding and the precision / loss-ratio calibration sweep.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{match_candidates, MatchParams};
use crate::locator::GcpCandidate;
use crate::synth::{MarkerTruth, SceneTruth};

/// Operating threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error("{0} is undefined (zero denominator)")]
    Undefined(&'static str),
}

/// Keeps candidates with `confidence >= t`, preserving order.
pub fn apply_threshold(cands: &[GcpCandidate], t: f64) -> Result<Vec<GcpCandidate>, FilterError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FilterError::BadThreshold(t));
    }
    Ok(cands.iter().filter(|c| c.confidence >= t).cloned().collect())
}

/// Unit at which precision is counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Granularity {
    /// Source images: an image retaining any candidate is a true positive
    /// when it contains a real marker.
    Image,
    /// Individual candidates, one-to-one matched against truth.
    Detection(MatchParams),
}

fn by_image(cands: &[GcpCandidate]) -> HashMap<&str, Vec<&GcpCandidate>> {
    let mut map: HashMap<&str, Vec<&GcpCandidate>> = HashMap::new();
    for c in cands {
        map.entry(c.image_id.as_str()).or_default().push(c);
    }
    map
}

/// TP / (TP + FP) over images that retain at least one candidate.
pub fn image_precision(after: &[GcpCandidate], truth: &SceneTruth) -> Result<f64, FilterError> {
    let truth = truth.by_id();
    let retained: HashSet<&str> = after.iter().map(|c| c.image_id.as_str()).collect();
    let tp = retained
        .iter()
        .filter(|id| truth.get(*id).is_some_and(|t| !t.markers.is_empty()))
        .count();
    let fp = retained.len() - tp;
    ratio(tp, tp + fp, "image precision")
}

pub fn precision(after: &[GcpCandidate], truth: &SceneTruth, granularity: Granularity) -> Result<f64, FilterError> {
    match granularity {
        Granularity::Image => image_precision(after, truth),
        Granularity::Detection(params) => {
            let groups = by_image(after);
            let truth_by_id = truth.by_id();
            let (mut tp, mut total) = (0usize, 0usize);
            for (id, cands) in groups {
                let owned: Vec<GcpCandidate> = cands.into_iter().cloned().collect();
                let markers: &[MarkerTruth] = truth_by_id.get(id).map_or(&[], |t| &t.markers);
                let m = match_candidates(&owned, markers, params);
                tp += m.pairs.len();
                total += owned.len();
            }
            ratio(tp, total, "detection precision")
        }
    }
}

fn ratio(num: usize, den: usize, what: &'static str) -> Result<f64, FilterError> {
    if den == 0 {
        Err(FilterError::Undefined(what))
    } else {
        Ok(num as f64 / den as f64)
    }
}

fn matches_any(obs: &MarkerTruth, cands: Option<&Vec<&GcpCandidate>>, params: MatchParams) -> bool {
    cands.is_some_and(|list| {
        list.iter().any(|c| {
            (!params.class_aware || c.class == obs.class) && c.position.distance(&obs.gcp) <= params.epsilon
        })
    })
}

/// Counts true observations that had a matching candidate before filtering
/// and none after. A candidate matches an observation when it is in the
/// same image, within `epsilon` px and (if class-aware) of the same class.
pub fn lost_observations(
    before: &[GcpCandidate],
    after: &[GcpCandidate],
    truth: &SceneTruth,
    params: MatchParams,
) -> (usize, usize) {
    let before = by_image(before);
    let after = by_image(after);
    let mut lost = 0;
    let mut total = 0;
    for img in &truth.images {
        for obs in &img.markers {
            total += 1;
            let id = img.image_id.as_str();
            if matches_any(obs, before.get(id), params) && !matches_any(obs, after.get(id), params) {
                lost += 1;
            }
        }
    }
    (lost, total)
}

/// Share of all true observations dropped by the filter.
pub fn loss_ratio(
    before: &[GcpCandidate],
    after: &[GcpCandidate],
    truth: &SceneTruth,
    params: MatchParams,
) -> Result<f64, FilterError> {
    let (lost, total) = lost_observations(before, after, truth, params);
    ratio(lost, total, "loss ratio")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub precision: Option<f64>,
    pub loss_ratio: Option<f64>,
    pub images_retained: usize,
    pub true_gcps_lost: Option<usize>,
}

/// Evaluates every threshold against the same candidate set. Without truth
/// only retention is reported.
pub fn sweep(
    cands: &[GcpCandidate],
    truth: Option<&SceneTruth>,
    thresholds: &[f64],
    granularity: Granularity,
    params: MatchParams,
) -> Result<Vec<ThresholdReport>, FilterError> {
    if let Some(bad) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(FilterError::BadThreshold(*bad));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(FilterError::UnsortedThresholds);
    }
    thresholds
        .par_iter()
        .map(|&t| {
            let after = apply_threshold(cands, t)?;
            let images_retained = after.iter().map(|c| c.image_id.as_str()).collect::<HashSet<_>>().len();
            let (precision, loss, lost) = match truth {
                Some(truth) => {
                    let (lost, total) = lost_observations(cands, &after, truth, params);
                    (
                        precision(&after, truth, granularity).ok(),
                        ratio(lost, total, "loss ratio").ok(),
                        Some(lost),
                    )
                }
                None => (None, None, None),
            };
            Ok(ThresholdReport {
                threshold: t,
                precision,
                loss_ratio: loss,
                images_retained,
                true_gcps_lost: lost,
            })
        })
        .collect()
}

/// `n` evenly spaced thresholds from `from` to `to` inclusive.
pub fn threshold_grid(from: f64, to: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || to < from {
        return vec![from];
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| ((from + k as f64 * step) * 1e9).round() / 1e9).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Sweep CSV. With truth: `threshold,precision,loss_ratio,images_retained,gcps_lost`
/// (undefined values left empty); without: `threshold,images_retained`.
pub fn write_sweep<W: Write>(out: W, reports: &[ThresholdReport], with_truth: bool) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if with_truth {
        w.write_record(["threshold", "precision", "loss_ratio", "images_retained", "gcps_lost"])?;
        for r in reports {
            w.write_record([
                format!("{:.4}", r.threshold),
                opt(r.precision),
                opt(r.loss_ratio),
                r.images_retained.to_string(),
                r.true_gcps_lost.map_or_else(String::new, |n| n.to_string()),
            ])?;
        }
    } else {
        w.write_record(["threshold", "images_retained"])?;
        for r in reports {
            w.write_record([format!("{:.4}", r.threshold), r.images_retained.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

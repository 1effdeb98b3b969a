//! Scoring located control points against synthetic ground truth.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::locator::GcpCandidate;
use crate::ranker::{pona, select_top_k, GcpGroup, ScoredCandidate};
use crate::synth::{MarkerTruth, SceneTruth};

pub const DEFAULT_MATCH_EPSILON: f64 = 5.0;
pub const DEFAULT_TOP_K_LIST: [usize; 4] = [3, 5, 8, 10];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no matched control points to summarise")]
    NoMatches,
    #[error("band edges must be strictly increasing and at least two")]
    BadBands,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub epsilon: f64,
    pub class_aware: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_MATCH_EPSILON,
            class_aware: true,
        }
    }
}

impl MatchParams {
    fn compatible(&self, c: &GcpCandidate, t: &MarkerTruth) -> bool {
        !self.class_aware || c.class == t.class
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub candidate: usize,
    pub truth: usize,
    pub dx: f64,
    pub dy: f64,
}

impl MatchPair {
    pub fn error(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_candidates: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// One-to-one greedy matching inside a single image: admissible pairs
/// (within `epsilon`, class-compatible) are taken in ascending distance,
/// ties by candidate then truth index.
pub fn match_candidates(cands: &[GcpCandidate], truth: &[MarkerTruth], params: MatchParams) -> MatchResult {
    let mut edges = Vec::new();
    for (ci, c) in cands.iter().enumerate() {
        for (ti, t) in truth.iter().enumerate() {
            let d = c.position.distance(&t.gcp);
            if d <= params.epsilon && params.compatible(c, t) {
                edges.push((d, ci, ti));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut c_used = vec![false; cands.len()];
    let mut t_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (_, ci, ti) in edges {
        if c_used[ci] || t_used[ti] {
            continue;
        }
        c_used[ci] = true;
        t_used[ti] = true;
        pairs.push(MatchPair {
            candidate: ci,
            truth: ti,
            dx: cands[ci].position.x - truth[ti].gcp.x,
            dy: cands[ci].position.y - truth[ti].gcp.y,
        });
    }
    MatchResult {
        pairs,
        unmatched_candidates: (0..cands.len()).filter(|&k| !c_used[k]).collect(),
        unmatched_truth: (0..truth.len()).filter(|&k| !t_used[k]).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPoint {
    pub image_id: String,
    pub marker_id: String,
    pub candidate: GcpCandidate,
    pub truth: MarkerTruth,
    pub dx: f64,
    pub dy: f64,
}

impl MatchedPoint {
    pub fn error(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurveyMatch {
    pub matched: Vec<MatchedPoint>,
    pub false_positives: Vec<GcpCandidate>,
    pub missed: Vec<(String, MarkerTruth)>,
}

/// Matches every image; candidates for images absent from truth are false
/// positives. Output order follows the truth image order.
pub fn match_survey(cands: &[GcpCandidate], truth: &SceneTruth, params: MatchParams) -> SurveyMatch {
    let mut by_image: HashMap<&str, Vec<GcpCandidate>> = HashMap::new();
    for c in cands {
        by_image.entry(c.image_id.as_str()).or_default().push(c.clone());
    }
    let mut out = SurveyMatch::default();
    for img in &truth.images {
        let list = by_image.remove(img.image_id.as_str()).unwrap_or_default();
        let m = match_candidates(&list, &img.markers, params);
        for p in &m.pairs {
            let t = &img.markers[p.truth];
            out.matched.push(MatchedPoint {
                image_id: img.image_id.clone(),
                marker_id: t.marker_id.clone(),
                candidate: list[p.candidate].clone(),
                truth: t.clone(),
                dx: p.dx,
                dy: p.dy,
            });
        }
        out.false_positives.extend(m.unmatched_candidates.iter().map(|&k| list[k].clone()));
        out.missed.extend(m.unmatched_truth.iter().map(|&k| (img.image_id.clone(), img.markers[k].clone())));
    }
    let mut rest: Vec<_> = by_image.into_iter().collect();
    rest.sort_by(|a, b| a.0.cmp(b.0));
    out.false_positives.extend(rest.into_iter().flat_map(|(_, v)| v));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub rmse: f64,
    pub max: f64,
    /// Fractions within 1, 2, 3 and 4 px.
    pub within: [f64; 4],
    pub mean_dx: f64,
    pub mean_dy: f64,
}

pub fn error_stats(matched: &[MatchedPoint]) -> Result<ErrorStats, EvalError> {
    if matched.is_empty() {
        return Err(EvalError::NoMatches);
    }
    let n = matched.len() as f64;
    let errs: Vec<f64> = matched.iter().map(MatchedPoint::error).collect();
    let within = [1.0, 2.0, 3.0, 4.0].map(|r| errs.iter().filter(|&&e| e <= r).count() as f64 / n);
    Ok(ErrorStats {
        count: matched.len(),
        mean: errs.iter().sum::<f64>() / n,
        rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        max: errs.iter().copied().fold(0.0, f64::max),
        within,
        mean_dx: matched.iter().map(|m| m.dx).sum::<f64>() / n,
        mean_dy: matched.iter().map(|m| m.dy).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandRow {
    pub lo_m: f64,
    pub hi_m: f64,
    pub images: usize,
    pub markers: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_px: f64,
}

/// Detection quality per altitude band `[edges[k], edges[k+1])`. Bands with
/// no images are omitted, as are images without an altitude.
pub fn band_report(
    cands: &[GcpCandidate],
    truth: &SceneTruth,
    band_edges: &[f64],
    params: MatchParams,
) -> Result<Vec<BandRow>, EvalError> {
    if band_edges.len() < 2 || band_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadBands);
    }
    let band_of = |alt: f64| band_edges.windows(2).position(|w| alt >= w[0] && alt < w[1]);
    let mut buckets: BTreeMap<usize, SceneTruth> = BTreeMap::new();
    let mut band_by_image = HashMap::new();
    for img in &truth.images {
        if let Some(b) = img.altitude_m.and_then(band_of) {
            buckets.entry(b).or_default().images.push(img.clone());
            band_by_image.insert(img.image_id.as_str(), b);
        }
    }
    let mut cand_buckets: BTreeMap<usize, Vec<GcpCandidate>> = BTreeMap::new();
    for c in cands {
        if let Some(&b) = band_by_image.get(c.image_id.as_str()) {
            cand_buckets.entry(b).or_default().push(c.clone());
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(b, scene)| {
            let m = match_survey(cand_buckets.get(&b).map_or(&[][..], Vec::as_slice), &scene, params);
            let (tp, fp, fn_) = (m.matched.len(), m.false_positives.len(), m.missed.len());
            let markers = scene.observation_count();
            let sizes: Vec<f64> = scene.images.iter().flat_map(|i| &i.markers).map(|t| t.px_size).collect();
            BandRow {
                lo_m: band_edges[b],
                hi_m: band_edges[b + 1],
                images: scene.images.len(),
                markers,
                tp,
                fp,
                fn_,
                precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
                recall: (markers > 0).then(|| tp as f64 / markers as f64),
                mean_px: if sizes.is_empty() { 0.0 } else { sizes.iter().sum::<f64>() / sizes.len() as f64 },
            }
        })
        .collect())
}

/// Marker id used for the pooled row of the ranking report.
pub const POOLED: &str = "ALL";

#[derive(Clone, Debug, PartialEq)]
pub struct RankingRow {
    pub marker_id: String,
    pub group_size: usize,
    pub k: usize,
    pub selected: usize,
    /// The group had fewer than `k` members; figures cover what exists.
    pub short: bool,
    /// Share of the top-k that truly observe this marker.
    pub precision: Option<f64>,
    pub pona: Option<f64>,
}

/// Top-k precision and PONA per marker and per `k`, followed by one pooled
/// row per `k` (marker id [`POOLED`]).
pub fn ranking_report(groups: &[GcpGroup], truth: Option<&SceneTruth>, k_list: &[usize], params: MatchParams) -> Vec<RankingRow> {
    let truth = truth.map(SceneTruth::by_id);
    let is_true = |marker_id: &str, s: &ScoredCandidate| -> bool {
        truth.as_ref().and_then(|t| t.get(s.candidate.image_id.as_str())).is_some_and(|img| {
            img.markers.iter().any(|t| {
                t.marker_id == marker_id
                    && params.compatible(&s.candidate, t)
                    && s.candidate.position.distance(&t.gcp) <= params.epsilon
            })
        })
    };
    let ks: Vec<usize> = k_list.iter().copied().filter(|&k| k > 0).collect();
    let mut rows = Vec::new();
    let mut pooled: Vec<(Vec<ScoredCandidate>, usize, bool)> = vec![(Vec::new(), 0, false); ks.len()];
    for g in groups {
        for (slot, &k) in ks.iter().enumerate() {
            let top = select_top_k(g, k).unwrap_or_default();
            let correct = top.iter().filter(|s| is_true(&g.marker_id, s)).count();
            let short = g.members.len() < k;
            rows.push(RankingRow {
                marker_id: g.marker_id.clone(),
                group_size: g.members.len(),
                k,
                selected: top.len(),
                short,
                precision: (truth.is_some() && !top.is_empty()).then(|| correct as f64 / top.len() as f64),
                pona: pona(&top).ok(),
            });
            let p = &mut pooled[slot];
            p.0.extend(top);
            p.1 += correct;
            p.2 |= short;
        }
    }
    let total: usize = groups.iter().map(|g| g.members.len()).sum();
    for (&k, (sel, correct, short)) in ks.iter().zip(pooled) {
        rows.push(RankingRow {
            marker_id: POOLED.into(),
            group_size: total,
            k,
            selected: sel.len(),
            short,
            precision: (truth.is_some() && !sel.is_empty()).then(|| correct as f64 / sel.len() as f64),
            pona: pona(&sel).ok(),
        });
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn write_error_stats<W: Write>(out: W, s: &ErrorStats) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["count", "mean_px", "rmse_px", "max_px", "within_1px", "within_2px", "within_3px", "within_4px", "mean_dx", "mean_dy"])?;
    let mut row = vec![s.count.to_string()];
    row.extend([s.mean, s.rmse, s.max].iter().map(|v| format!("{v:.4}")));
    row.extend(s.within.iter().map(|v| format!("{v:.4}")));
    row.extend([s.mean_dx, s.mean_dy].iter().map(|v| format!("{v:.4}")));
    w.write_record(row)?;
    w.flush()?;
    Ok(())
}

pub fn write_band_report<W: Write>(out: W, rows: &[BandRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["band_lo_m", "band_hi_m", "images", "markers", "tp", "fp", "fn", "precision", "recall", "mean_px"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.lo_m),
            format!("{}", r.hi_m),
            r.images.to_string(),
            r.markers.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            opt(r.precision),
            opt(r.recall),
            format!("{:.2}", r.mean_px),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ranking_report<W: Write>(out: W, rows: &[RankingRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["marker_id", "group_size", "k", "selected", "short", "precision", "pona"])?;
    for r in rows {
        w.write_record([
            r.marker_id.clone(),
            r.group_size.to_string(),
            r.k.to_string(),
            r.selected.to_string(),
            r.short.to_string(),
            opt(r.precision),
            opt(r.pona),
        ])?;
    }
    w.flush()?;
    Ok(())
}

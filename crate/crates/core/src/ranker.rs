//! Distortion-aware ranking of redundant control-point observations.
//!
//! Radial lens distortion grows with distance from the principal point, so
//! each candidate is scored by how central it is in its frame plus how
//! confident the detector was:
//!
//! ```text
//! d          = |p - (w/2, h/2)|
//! d_max      = |(w/2, h/2)|
//! centrality = 1 - d / d_max
//! score      = sigma * centrality + confidence
//! ```
//!
//! Candidates of the same physical marker are ranked by score and the top
//! few are handed to bundle adjustment.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::PixelPoint;
use crate::locator::{round_centi, GcpCandidate};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_TOP_K: usize = 5;
/// Centrality above which a candidate counts as outside the distortion zone.
pub const CENTRAL_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ASSOCIATION_RADIUS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("top-k needs k >= 1")]
    ZeroK,
    #[error("PONA of an empty selection is undefined")]
    EmptySelection,
    #[error("association line {line}: {message}")]
    Association { line: u64, message: String },
}

/// Distance of `p` from the frame centre and the largest such distance.
pub fn distortion_distance(p: PixelPoint, image_w: u32, image_h: u32) -> (f64, f64) {
    let (cx, cy) = (f64::from(image_w) / 2.0, f64::from(image_h) / 2.0);
    ((p.x - cx).hypot(p.y - cy), cx.hypot(cy))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: GcpCandidate,
    pub d: f64,
    pub d_max: f64,
    pub centrality: f64,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn is_central(&self) -> bool {
        self.centrality > CENTRAL_THRESHOLD
    }
}

pub fn score(cand: &GcpCandidate, image_w: u32, image_h: u32, sigma: f64) -> Result<ScoredCandidate, RankError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(RankError::BadSigma(sigma));
    }
    let (d, d_max) = distortion_distance(cand.position, image_w, image_h);
    let d = d.min(d_max);
    let centrality = 1.0 - d / d_max;
    Ok(ScoredCandidate {
        candidate: cand.clone(),
        d,
        d_max,
        centrality,
        score: sigma * centrality + cand.confidence,
    })
}

/// All observations of one physical marker.
#[derive(Clone, Debug, PartialEq)]
pub struct GcpGroup {
    pub marker_id: String,
    pub members: Vec<ScoredCandidate>,
}

fn rank_cmp(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.candidate.confidence.total_cmp(&a.candidate.confidence))
        .then(a.candidate.image_id.cmp(&b.candidate.image_id))
        .then(a.candidate.position.y.total_cmp(&b.candidate.position.y))
        .then(a.candidate.position.x.total_cmp(&b.candidate.position.x))
}

/// Sorts members by score, then confidence (both descending), then image id.
pub fn rank_group(mut group: GcpGroup) -> GcpGroup {
    group.members.sort_by(rank_cmp);
    group
}

pub fn select_top_k(group: &GcpGroup, k: usize) -> Result<Vec<ScoredCandidate>, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    let mut members = group.members.clone();
    members.sort_by(rank_cmp);
    members.truncate(k);
    Ok(members)
}

/// Share of `selected` lying in the low-distortion centre (centrality > 0.5).
pub fn pona(selected: &[ScoredCandidate]) -> Result<f64, RankError> {
    if selected.is_empty() {
        return Err(RankError::EmptySelection);
    }
    let central = selected.iter().filter(|s| s.is_central()).count();
    Ok(central as f64 / selected.len() as f64)
}

/// Where a known marker is expected in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub image_id: String,
    pub marker_id: String,
    pub position: PixelPoint,
}

/// Groups scored candidates by marker: each candidate joins the nearest
/// association point of its image within `radius`; the rest are dropped.
/// Groups come out sorted by marker id and ranked.
pub fn group_candidates(scored: Vec<ScoredCandidate>, associations: &[Association], radius: f64) -> Vec<GcpGroup> {
    let mut by_image: HashMap<&str, Vec<&Association>> = HashMap::new();
    for a in associations {
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let mut groups: BTreeMap<String, Vec<ScoredCandidate>> = BTreeMap::new();
    for s in scored {
        let nearest = by_image.get(s.candidate.image_id.as_str()).and_then(|list| {
            list.iter()
                .map(|a| (a, a.position.distance(&s.candidate.position)))
                .filter(|(_, d)| *d <= radius)
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.marker_id.cmp(&y.0.marker_id)))
                .map(|(a, _)| a.marker_id.clone())
        });
        if let Some(marker_id) = nearest {
            groups.entry(marker_id).or_default().push(s);
        }
    }
    groups
        .into_iter()
        .map(|(marker_id, members)| rank_group(GcpGroup { marker_id, members }))
        .collect()
}

/// Association file: `image_id,marker_id,x,y` with a header row.
pub fn read_associations<R: Read>(input: R) -> Result<Vec<Association>, RankError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RankError::Association {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(RankError::Association {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let num = |k: usize| {
            rec[k].parse::<f64>().map_err(|_| RankError::Association {
                line,
                message: format!("`{}` is not a number", &rec[k]),
            })
        };
        out.push(Association {
            image_id: rec[0].to_string(),
            marker_id: rec[1].to_string(),
            position: PixelPoint::new(num(2)?, num(3)?),
        });
    }
    Ok(out)
}

/// Bundle-adjustment handoff:
/// `marker_id,rank,image_id,x,y,score,confidence,centrality`.
pub fn write_selection<W: Write>(out: W, selections: &[(String, Vec<ScoredCandidate>)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["marker_id", "rank", "image_id", "x", "y", "score", "confidence", "centrality"])?;
    for (marker_id, picks) in selections {
        for (rank, s) in picks.iter().enumerate() {
            w.write_record([
                marker_id.clone(),
                (rank + 1).to_string(),
                s.candidate.image_id.clone(),
                format!("{:.2}", round_centi(s.candidate.position.x)),
                format!("{:.2}", round_centi(s.candidate.position.y)),
                format!("{:.6}", s.score),
                format!("{:.6}", s.candidate.confidence),
                format!("{:.6}", s.centrality),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MarkerClass;
    use crate::tiler::TileIndex;
    use proptest::prelude::*;

    const W: u32 = 5472;
    const H: u32 = 3648;

    fn cand(image_id: &str, x: f64, y: f64, confidence: f64) -> GcpCandidate {
        GcpCandidate {
            image_id: image_id.into(),
            position: PixelPoint::new(x, y),
            class: MarkerClass::Cross,
            confidence,
            source_tile: TileIndex::new(1, 1),
            clipped: false,
        }
    }

    fn scored(image_id: &str, score: f64, confidence: f64) -> ScoredCandidate {
        ScoredCandidate {
            candidate: cand(image_id, 0.0, 0.0, confidence),
            d: 0.0,
            d_max: 1.0,
            centrality: 1.0,
            score,
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distortion_distance(PixelPoint::new(2736.0, 1824.0), W, H).0, 0.0);
        let (d, d_max) = distortion_distance(PixelPoint::new(0.0, 0.0), W, H);
        let independent = (2736.0f64 * 2736.0 + 1824.0 * 1824.0).sqrt();
        assert_eq!(d, d_max);
        assert!((d_max - independent).abs() < 1e-9);
        assert!((d_max - 3288.26).abs() < 0.005);
        let s = score(&cand("a", 2736.0, 0.0, 0.5), W, H, 2.0).unwrap();
        assert_eq!(s.d, 1824.0);
        assert!((s.centrality - (1.0 - 1824.0 / independent)).abs() < 1e-15);
        assert!((s.centrality - 0.4453).abs() < 5e-5);
    }

    #[test]
    fn score_examples() {
        let centre = score(&cand("a", 2736.0, 1824.0, 0.9), W, H, 2.0).unwrap();
        assert_eq!(centre.score, 2.9);
        let corner = score(&cand("a", 0.0, 0.0, 0.9), W, H, 2.0).unwrap();
        assert_eq!(corner.centrality, 0.0);
        assert_eq!(corner.score, 0.9);
        // Point at half the corner distance along the diagonal: centrality 0.5.
        let half = score(&cand("a", 1368.0, 912.0, 0.7), W, H, 2.0).unwrap();
        assert!((half.centrality - 0.5).abs() < 1e-15);
        assert!((half.score - 1.7).abs() < 1e-15);
        assert!(matches!(score(&centre.candidate, W, H, 0.0), Err(RankError::BadSigma(_))));
        assert!(matches!(score(&centre.candidate, W, H, -1.0), Err(RankError::BadSigma(_))));
    }

    #[test]
    fn ranking_and_ties() {
        let g = GcpGroup {
            marker_id: "M".into(),
            members: vec![scored("a", 2.9, 0.9), scored("b", 1.7, 0.7), scored("c", 0.9, 0.9)],
        };
        let ranked = rank_group(g.clone());
        assert_eq!(ranked, g);
        let mut rev = g.clone();
        rev.members.reverse();
        assert_eq!(rank_group(rev), ranked);

        let tie = GcpGroup {
            marker_id: "M".into(),
            members: vec![scored("a", 1.7, 0.8), scored("b", 1.7, 0.9)],
        };
        assert_eq!(rank_group(tie).members[0].candidate.confidence, 0.9);
        let tie_id = GcpGroup {
            marker_id: "M".into(),
            members: vec![scored("b", 1.7, 0.8), scored("a", 1.7, 0.8)],
        };
        assert_eq!(rank_group(tie_id).members[0].candidate.image_id, "a");
    }

    #[test]
    fn top_k_and_pona() {
        let members: Vec<ScoredCandidate> = (0..33).map(|k| scored(&format!("I{k:02}"), f64::from(k) / 10.0, 0.8)).collect();
        let g = GcpGroup { marker_id: "GCP1".into(), members };
        let top = select_top_k(&g, 5).unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].score, 3.2);
        assert_eq!(top[4].score, 2.8);
        assert_eq!(select_top_k(&g, 1).unwrap()[0].score, 3.2);
        let short = GcpGroup { marker_id: "x".into(), members: g.members[..3].to_vec() };
        assert_eq!(select_top_k(&short, 5).unwrap().len(), 3);
        assert!(matches!(select_top_k(&g, 0), Err(RankError::ZeroK)));

        let mut ten: Vec<ScoredCandidate> = (0..10).map(|_| scored("a", 1.0, 0.5)).collect();
        for s in ten.iter_mut().take(3) {
            s.centrality = 0.3;
        }
        assert_eq!(pona(&ten).unwrap(), 0.7);
        assert_eq!(pona(&ten[3..8]).unwrap(), 1.0);
        let corner = score(&cand("a", 0.0, 0.0, 0.9), W, H, 2.0).unwrap();
        assert_eq!(pona(&[corner]).unwrap(), 0.0);
        assert!(matches!(pona(&[]), Err(RankError::EmptySelection)));
    }

    #[test]
    fn grouping_uses_nearest_association() {
        let assoc = vec![
            Association { image_id: "a".into(), marker_id: "M1".into(), position: PixelPoint::new(100.0, 100.0) },
            Association { image_id: "a".into(), marker_id: "M2".into(), position: PixelPoint::new(160.0, 100.0) },
            Association { image_id: "b".into(), marker_id: "M1".into(), position: PixelPoint::new(900.0, 900.0) },
        ];
        let s = |img: &str, x: f64, y: f64| score(&cand(img, x, y, 0.8), W, H, 2.0).unwrap();
        let groups = group_candidates(vec![s("a", 125.0, 100.0), s("a", 140.0, 100.0), s("b", 905.0, 900.0), s("b", 10.0, 10.0)], &assoc, 50.0);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].marker_id, "M1");
        assert_eq!(groups[0].members.len(), 2);
        assert_eq!(groups[1].members.len(), 1);
        assert_eq!(groups[1].members[0].candidate.position.x, 140.0);
    }

    #[test]
    fn association_file_parses() {
        let text = "image_id,marker_id,x,y\nIMG_1,GCP1,10.5,20\n# note\nIMG_2,GCP1,30,40\n";
        let a = read_associations(text.as_bytes()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].position, PixelPoint::new(10.5, 20.0));
        assert!(read_associations("image_id,marker_id,x,y\nIMG,G,nope,1\n".as_bytes()).is_err());
    }

    /// Exhaustive oracle: the ranked order must be a permutation in which no
    /// adjacent pair is out of order under the (score, confidence, image_id)
    /// key, checked by comparing to a selection sort on tuples.
    fn oracle_sort(members: &[ScoredCandidate]) -> Vec<(f64, f64, String)> {
        let mut keys: Vec<(f64, f64, String)> = members
            .iter()
            .map(|m| (m.score, m.candidate.confidence, m.candidate.image_id.clone()))
            .collect();
        let n = keys.len();
        for a in 0..n {
            let mut best = a;
            for b in (a + 1)..n {
                let (kb, kbest) = (&keys[b], &keys[best]);
                let better = kb.0 > kbest.0 || (kb.0 == kbest.0 && (kb.1 > kbest.1 || (kb.1 == kbest.1 && kb.2 < kbest.2)));
                if better {
                    best = b;
                }
            }
            keys.swap(a, best);
        }
        keys
    }

    proptest! {
        #[test]
        fn score_monotone(conf in 0.0f64..1.0, x1 in 0.0f64..5472.0, y in 0.0f64..3648.0, dx in 1.0f64..500.0, dc in 0.001f64..0.5) {
            let near = score(&cand("a", x1.min(2736.0), y, conf), W, H, 2.0).unwrap();
            let far = score(&cand("a", x1.min(2736.0) - dx, y, conf), W, H, 2.0).unwrap();
            if far.d > near.d {
                prop_assert!(far.score < near.score);
            }
            let hi = score(&cand("a", x1, y, conf + dc), W, H, 2.0).unwrap();
            let lo = score(&cand("a", x1, y, conf), W, H, 2.0).unwrap();
            prop_assert!(hi.score > lo.score);
        }

        #[test]
        fn centrality_scale_invariant(fx in 0.0f64..1.0, fy in 0.0f64..1.0, lambda in 1u32..4) {
            let (w, h) = (600u32, 400u32);
            let a = score(&cand("a", fx * 600.0, fy * 400.0, 0.5), w, h, 2.0).unwrap();
            let l = f64::from(lambda);
            let b = score(&cand("a", fx * 600.0 * l, fy * 400.0 * l, 0.5), w * lambda, h * lambda, 2.0).unwrap();
            prop_assert!((a.centrality - b.centrality).abs() < 1e-12);
        }

        #[test]
        fn tiny_sigma_ranks_by_confidence(pts in proptest::collection::vec((0.0f64..5472.0, 0.0f64..3648.0, 0u32..1000), 1..20)) {
            let members: Vec<ScoredCandidate> = pts.iter().enumerate()
                .map(|(k, (x, y, c))| score(&cand(&format!("I{k:02}"), *x, *y, f64::from(*c) / 1000.0), W, H, 1e-9).unwrap())
                .collect();
            let ranked = rank_group(GcpGroup { marker_id: "m".into(), members });
            for w in ranked.members.windows(2) {
                prop_assert!(w[0].candidate.confidence >= w[1].candidate.confidence);
            }
        }

        #[test]
        fn top_k_is_prefix_of_ranking(scores in proptest::collection::vec((0u32..30, 0u32..5), 1..40), k in 1usize..12) {
            let members: Vec<ScoredCandidate> = scores.iter().enumerate()
                .map(|(n, (s, c))| scored(&format!("I{n:02}"), f64::from(*s) / 10.0, f64::from(*c) / 5.0))
                .collect();
            let g = GcpGroup { marker_id: "m".into(), members };
            let ranked = rank_group(g.clone());
            let top = select_top_k(&g, k).unwrap();
            prop_assert_eq!(&top[..], &ranked.members[..k.min(ranked.members.len())]);
            let keys: Vec<(f64, f64, String)> = ranked.members.iter()
                .map(|m| (m.score, m.candidate.confidence, m.candidate.image_id.clone()))
                .collect();
            prop_assert_eq!(keys, oracle_sort(&g.members));
        }
    }
}

//! Tile detections → full-image control-point candidates.

use std::cmp::Ordering;
use std::io::Write;

use thiserror::Error;

use crate::detector::Detection;
use crate::geometry::{MarkerClass, PixelPoint};
use crate::tiler::{TileGrid, TileIndex, TilerError};

/// Default clustering radius for seam duplicates. Markers are at least
/// 12 px across, so two distinct markers never come this close.
pub const DEFAULT_DEDUPE_RADIUS: f64 = 10.0;

/// Clipped positions stay this far inside the right/bottom frame edge so
/// they survive rounding to 0.01 px on export.
const CLIP_INSET: f64 = 0.01;

#[derive(Debug, Error)]
pub enum LocateError {
    #[error("detection in {image_id} tile {tile} lies entirely in the padding")]
    PadRegionOnly { image_id: String, tile: TileIndex },
    #[error(transparent)]
    Grid(#[from] TilerError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcpCandidate {
    pub image_id: String,
    pub position: PixelPoint,
    pub class: MarkerClass,
    pub confidence: f64,
    pub source_tile: TileIndex,
    /// The raw position fell outside the frame and was clipped back in.
    pub clipped: bool,
}

/// Full-image control-point position for one detection: the class vertex of
/// the box plus the tile's offset, one addition per axis.
pub fn locate(det: &Detection, grid: &TileGrid) -> Result<GcpCandidate, LocateError> {
    let offset = grid.tile_offset(det.tile)?;
    let (w, h) = (f64::from(grid.image_w), f64::from(grid.image_h));
    let in_padding = det.obb.vertices().iter().all(|v| {
        let g = offset + *v;
        g.x >= w || g.y >= h
    });
    if in_padding {
        return Err(LocateError::PadRegionOnly {
            image_id: det.image_id.clone(),
            tile: det.tile,
        });
    }
    let raw = offset + det.obb.gcp_vertex(det.class);
    let position = PixelPoint::new(raw.x.clamp(0.0, w - CLIP_INSET), raw.y.clamp(0.0, h - CLIP_INSET));
    Ok(GcpCandidate {
        image_id: det.image_id.clone(),
        position,
        class: det.class,
        confidence: det.confidence,
        source_tile: det.tile,
        clipped: position != raw,
    })
}

/// Deterministic output order for candidates of one image.
fn canonical_cmp(a: &GcpCandidate, b: &GcpCandidate) -> Ordering {
    a.image_id
        .cmp(&b.image_id)
        .then(a.position.y.total_cmp(&b.position.y))
        .then(a.position.x.total_cmp(&b.position.x))
        .then(a.class.cmp(&b.class))
        .then(b.confidence.total_cmp(&a.confidence))
        .then(a.source_tile.cmp(&b.source_tile))
}

/// Preference inside a duplicate cluster: highest confidence, then the
/// smaller (y, x).
fn keep_cmp(a: &GcpCandidate, b: &GcpCandidate) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.position.y.total_cmp(&b.position.y))
        .then(a.position.x.total_cmp(&b.position.x))
        .then(a.source_tile.cmp(&b.source_tile))
}

/// Collapses same-class candidates that chain together within `radius`
/// (single linkage) to their best member. The result is sorted, so it does
/// not depend on input order.
pub fn dedupe_seams(cands: &[GcpCandidate], radius: f64) -> Vec<GcpCandidate> {
    let n = cands.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut k: usize) -> usize {
        while parent[k] != k {
            parent[k] = parent[parent[k]];
            k = parent[k];
        }
        k
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let (ca, cb) = (&cands[a], &cands[b]);
            if ca.class == cb.class && ca.image_id == cb.image_id && ca.position.distance(&cb.position) <= radius {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut best: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        let root = find(&mut parent, k);
        best[root] = match best[root] {
            Some(cur) if keep_cmp(&cands[cur], &cands[k]) != Ordering::Greater => Some(cur),
            _ => Some(k),
        };
    }
    let mut out: Vec<GcpCandidate> = best.into_iter().flatten().map(|k| cands[k].clone()).collect();
    out.sort_by(canonical_cmp);
    out
}

/// Rounds to 0.01 px for export.
pub fn round_centi(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Candidate export: `image_id,x,y,class_code,confidence,tile_i,tile_j`.
pub fn write_candidates<W: Write>(out: W, cands: &[GcpCandidate]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "x", "y", "class_code", "confidence", "tile_i", "tile_j"])?;
    for c in cands {
        w.write_record([
            c.image_id.clone(),
            format!("{:.2}", round_centi(c.position.x)),
            format!("{:.2}", round_centi(c.position.y)),
            c.class.code().to_string(),
            format!("{:.6}", c.confidence),
            c.source_tile.i.to_string(),
            c.source_tile.j.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox;
    use crate::tiler::plan_grid;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> PixelPoint {
        PixelPoint::new(x, y)
    }

    fn det(tile: (u32, u32), pts: [PixelPoint; 4], class: MarkerClass) -> Detection {
        Detection {
            image_id: "IMG".into(),
            tile: TileIndex::new(tile.0, tile.1),
            obb: OrientedBox::canonicalize(pts).unwrap(),
            class,
            confidence: 0.9,
        }
    }

    fn cand(x: f64, y: f64, class: MarkerClass, confidence: f64) -> GcpCandidate {
        GcpCandidate {
            image_id: "IMG".into(),
            position: p(x, y),
            class,
            confidence,
            source_tile: TileIndex::new(1, 1),
            clipped: false,
        }
    }

    #[test]
    fn cross_in_interior_tile() {
        let grid = plan_grid(5472, 3648, 608, 608, 0, 0).unwrap();
        let d = det((2, 3), [p(0.0, 10.0), p(20.0, 10.0), p(20.0, 30.0), p(0.0, 30.0)], MarkerClass::Cross);
        let c = locate(&d, &grid).unwrap();
        assert_eq!(c.position, p(1226.0, 628.0));
        assert!(!c.clipped);
    }

    #[test]
    fn first_tile_is_identity() {
        let grid = plan_grid(5472, 3648, 608, 608, 0, 0).unwrap();
        let d = det(
            (1, 1),
            [p(100.5, 200.25), p(80.5, 200.25), p(80.5, 180.25), p(100.5, 180.25)],
            MarkerClass::BottomRight,
        );
        assert_eq!(locate(&d, &grid).unwrap().position, p(100.5, 200.25));
    }

    #[test]
    fn padding_phantoms_and_clipping() {
        let grid = plan_grid(5000, 3000, 608, 608, 0, 0).unwrap();
        // Tile (1, 9) starts at x = 4864; x >= 136 local is padding.
        let phantom = det((1, 9), [p(200.0, 10.0), p(220.0, 10.0), p(220.0, 30.0), p(200.0, 30.0)], MarkerClass::Cross);
        assert!(matches!(locate(&phantom, &grid), Err(LocateError::PadRegionOnly { .. })));

        let straddling = det((1, 9), [p(120.0, 10.0), p(140.0, 10.0), p(140.0, 30.0), p(120.0, 30.0)], MarkerClass::BottomRight);
        let c = locate(&straddling, &grid).unwrap();
        assert!(c.clipped);
        assert_eq!(c.position, p(4999.99, 30.0));

        let negative = det((1, 1), [p(-3.0, 10.0), p(17.0, 10.0), p(17.0, 30.0), p(-3.0, 30.0)], MarkerClass::TopLeft);
        let c = locate(&negative, &grid).unwrap();
        assert_eq!(c.position, p(0.0, 10.0));
        assert!(c.clipped);
    }

    #[test]
    fn seam_pair_collapses_to_best() {
        let a = cand(520.0, 10.0, MarkerClass::Cross, 0.8);
        let b = cand(520.4, 10.1, MarkerClass::Cross, 0.9);
        let out = dedupe_seams(&[a, b.clone()], DEFAULT_DEDUPE_RADIUS);
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn dedupe_edge_cases() {
        assert!(dedupe_seams(&[], 10.0).is_empty());
        let far = [cand(0.0, 0.0, MarkerClass::Cross, 0.5), cand(50.0, 0.0, MarkerClass::Cross, 0.5)];
        assert_eq!(dedupe_seams(&far, 10.0).len(), 2);
        let other_class = [cand(0.0, 0.0, MarkerClass::Cross, 0.5), cand(1.0, 0.0, MarkerClass::TopLeft, 0.5)];
        assert_eq!(dedupe_seams(&other_class, 10.0).len(), 2);
        // Equal confidence: the smaller (y, x) wins.
        let tie = [cand(5.0, 3.0, MarkerClass::Cross, 0.7), cand(4.0, 3.0, MarkerClass::Cross, 0.7)];
        assert_eq!(dedupe_seams(&tie, 10.0)[0].position, p(4.0, 3.0));
    }

    /// Brute force: repeatedly merge any two same-class clusters with a pair
    /// of members within radius, then pick each cluster's best member.
    fn dedupe_oracle(cands: &[GcpCandidate], radius: f64) -> Vec<GcpCandidate> {
        let mut clusters: Vec<Vec<GcpCandidate>> = cands.iter().map(|c| vec![c.clone()]).collect();
        loop {
            let mut merged = false;
            'outer: for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let close = clusters[a].iter().any(|x| {
                        clusters[b].iter().any(|y| x.class == y.class && x.position.distance(&y.position) <= radius)
                    });
                    if close {
                        let moved = clusters.remove(b);
                        clusters[a].extend(moved);
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                break;
            }
        }
        let mut out: Vec<GcpCandidate> = clusters
            .into_iter()
            .map(|c| c.into_iter().min_by(keep_cmp).unwrap())
            .collect();
        out.sort_by(canonical_cmp);
        out
    }

    fn arb_cands() -> impl Strategy<Value = Vec<GcpCandidate>> {
        proptest::collection::vec((0.0f64..80.0, 0.0f64..80.0, 0usize..2, 0.0f64..1.0), 0..14).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, c, conf)| cand(x, y, [MarkerClass::Cross, MarkerClass::TopLeft][c], conf))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedupe_matches_oracle_and_is_order_free(cands in arb_cands(), shift in 0usize..14) {
            let out = dedupe_seams(&cands, 10.0);
            prop_assert_eq!(&out, &dedupe_oracle(&cands, 10.0));
            let mut rotated = cands.clone();
            if !rotated.is_empty() {
                let k = shift % rotated.len();
                rotated.rotate_left(k);
                rotated.reverse();
            }
            prop_assert_eq!(&dedupe_seams(&rotated, 10.0), &out);
            prop_assert_eq!(dedupe_seams(&out, 10.0), out);
        }
    }

    #[test]
    fn export_rounds_to_centipixels() {
        let mut buf = Vec::new();
        let mut c = cand(1226.004, 628.995, MarkerClass::Cross, 0.91);
        c.source_tile = TileIndex::new(2, 3);
        write_candidates(&mut buf, &[c]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "image_id,x,y,class_code,confidence,tile_i,tile_j\nIMG,1226.00,629.00,CR,0.910000,2,3\n");
    }
}

//! Sources of oriented detections.
//!
//! Real inference runs outside this crate and hands its output over in the
//! detection interchange format, one record per line:
//!
//! ```text
//! image_id,i,j,x1,y1,x2,y2,x3,y3,x4,y4,class_code,confidence
//! ```
//!
//! with tile-local pixel coordinates and `#` comment lines. The
//! [`oracle_detect`] source fabricates the same records from synthetic
//! ground truth with controllable noise, misses and false positives.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, MarkerClass, OrientedBox, PixelPoint};
use crate::ranker::distortion_distance;
use crate::seeding::derive_seed;
use crate::survey::SurveyIndex;
use crate::synth::{ImageTruth, DETECTABLE_MARKER_PX};
use crate::tiler::{TileGrid, TileIndex};

/// How far (px) a detected vertex may stray outside its tile.
pub const MAX_EXCURSION_PX: f64 = 8.0;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: unknown class code `{code}`")]
    UnknownClass { line: u64, code: String },
    #[error("line {line}: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { line: u64, value: f64 },
    #[error("line {line}: image `{image_id}` is not in the survey index")]
    UnknownImage { line: u64, image_id: String },
    #[error("line {line}: tile {tile} is outside the image's grid")]
    BadTile { line: u64, tile: TileIndex },
    #[error("line {line}: vertex {vertex} is more than {MAX_EXCURSION_PX} px outside tile {tile}")]
    OutOfTile { line: u64, tile: TileIndex, vertex: PixelPoint },
    #[error("line {line}: {source}")]
    BadBox {
        line: u64,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DetectionError {
    pub fn line(&self) -> Option<u64> {
        match self {
            DetectionError::Parse { line, .. }
            | DetectionError::UnknownClass { line, .. }
            | DetectionError::ConfidenceOutOfRange { line, .. }
            | DetectionError::UnknownImage { line, .. }
            | DetectionError::BadTile { line, .. }
            | DetectionError::OutOfTile { line, .. }
            | DetectionError::BadBox { line, .. } => Some(*line),
            DetectionError::Io { .. } => None,
        }
    }
}

/// One oriented detection, in the local frame of the tile it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub tile: TileIndex,
    pub obb: OrientedBox,
    pub class: MarkerClass,
    pub confidence: f64,
}

fn within_tile(grid: &TileGrid, p: &PixelPoint) -> bool {
    let (tw, th) = (f64::from(grid.tile_w), f64::from(grid.tile_h));
    p.x >= -MAX_EXCURSION_PX && p.y >= -MAX_EXCURSION_PX && p.x <= tw + MAX_EXCURSION_PX && p.y <= th + MAX_EXCURSION_PX
}

/// Parses interchange records, validating each against the survey index.
/// Blank lines and `#` comments are skipped; errors cite physical line numbers.
pub fn read_detections<R: Read>(input: R, index: &SurveyIndex) -> Result<Vec<Detection>, DetectionError> {
    let mut out = Vec::new();
    for (k, text) in BufReader::new(input).lines().enumerate() {
        let line = k as u64 + 1;
        let text = text.map_err(|e| DetectionError::Parse {
            line,
            message: e.to_string(),
        })?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(trimmed.as_bytes());
        let mut record = csv::StringRecord::new();
        rdr.read_record(&mut record).map_err(|e| DetectionError::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(parse_record(&record, line, index)?);
    }
    Ok(out)
}

fn parse_record(rec: &csv::StringRecord, line: u64, index: &SurveyIndex) -> Result<Detection, DetectionError> {
    if rec.len() != 13 {
        return Err(DetectionError::Parse {
            line,
            message: format!("expected 13 fields, found {}", rec.len()),
        });
    }
    let num = |k: usize, name: &str| -> Result<f64, DetectionError> {
        let v: f64 = rec[k].parse().map_err(|_| DetectionError::Parse {
            line,
            message: format!("{name} `{}` is not a number", &rec[k]),
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DetectionError::Parse {
                line,
                message: format!("{name} is not finite"),
            })
        }
    };
    let int = |k: usize, name: &str| -> Result<u32, DetectionError> {
        rec[k].parse().map_err(|_| DetectionError::Parse {
            line,
            message: format!("{name} `{}` is not a positive integer", &rec[k]),
        })
    };

    let image_id = rec[0].to_string();
    let entry = index.get(&image_id).ok_or_else(|| DetectionError::UnknownImage {
        line,
        image_id: image_id.clone(),
    })?;
    let tile = TileIndex::new(int(1, "row i")?, int(2, "column j")?);
    if !entry.grid.contains_index(tile) {
        return Err(DetectionError::BadTile { line, tile });
    }
    let mut pts = [PixelPoint::default(); 4];
    for (k, p) in pts.iter_mut().enumerate() {
        *p = PixelPoint::new(num(3 + 2 * k, "x")?, num(4 + 2 * k, "y")?);
        if !within_tile(&entry.grid, p) {
            return Err(DetectionError::OutOfTile { line, tile, vertex: *p });
        }
    }
    let class: MarkerClass = rec[11].parse().map_err(|_| DetectionError::UnknownClass {
        line,
        code: rec[11].to_string(),
    })?;
    let confidence = num(12, "confidence")?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(DetectionError::ConfidenceOutOfRange { line, value: confidence });
    }
    let obb = OrientedBox::canonicalize(pts).map_err(|source| DetectionError::BadBox { line, source })?;
    Ok(Detection {
        image_id,
        tile,
        obb,
        class,
        confidence,
    })
}

pub fn load_detections(path: &Path, index: &SurveyIndex) -> Result<Vec<Detection>, DetectionError> {
    let file = File::open(path).map_err(|source| DetectionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_detections(file, index)
}

/// Writes records with shortest round-trip float formatting, so reading
/// them back yields identical values.
pub fn write_detections<W: Write>(mut out: W, detections: &[Detection]) -> std::io::Result<()> {
    writeln!(out, "# image_id,i,j,x1,y1,x2,y2,x3,y3,x4,y4,class_code,confidence")?;
    for d in detections {
        write!(out, "{},{},{}", d.image_id, d.tile.i, d.tile.j)?;
        for v in d.obb.vertices() {
            write!(out, ",{},{}", v.x, v.y)?;
        }
        writeln!(out, ",{},{}", d.class.code(), d.confidence)?;
    }
    out.flush()
}

pub fn save_detections(path: &Path, detections: &[Detection]) -> Result<(), DetectionError> {
    let io = |source| DetectionError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_detections(BufWriter::new(file), detections).map_err(io)
}

/// Maps marker size and position to the oracle's mean confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceModel {
    /// Mean confidence of a large marker at the image centre.
    pub base: f64,
    /// Confidence lost at the frame corner, scaled linearly by d / d_max.
    pub edge_penalty: f64,
    /// Markers smaller than this (px) are never detected.
    pub size_floor_px: f64,
    /// Markers at least this large (px) take no size penalty.
    pub size_full_px: f64,
    /// Confidence lost right at the floor.
    pub size_weight: f64,
    pub jitter_sigma: f64,
    pub max_confidence: f64,
    /// Beta(alpha, beta) for false-positive confidences.
    pub fp_alpha: f64,
    pub fp_beta: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            base: 0.93,
            edge_penalty: 0.08,
            size_floor_px: DETECTABLE_MARKER_PX,
            size_full_px: 17.0,
            size_weight: 0.9,
            jitter_sigma: 0.02,
            max_confidence: 0.99,
            fp_alpha: 2.0,
            fp_beta: 5.0,
        }
    }
}

impl ConfidenceModel {
    /// Mean confidence for a true marker of `px_size` at centrality ratio
    /// `d / d_max`, or `None` when the marker is below the detectable floor.
    pub fn mean(&self, px_size: f64, distance_ratio: f64) -> Option<f64> {
        if px_size < self.size_floor_px {
            return None;
        }
        let span = (self.size_full_px - self.size_floor_px).max(f64::EPSILON);
        let shortfall = ((self.size_full_px - px_size) / span).clamp(0.0, 1.0);
        Some(self.base - self.edge_penalty * distance_ratio - self.size_weight * shortfall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub vertex_noise_sigma: f64,
    /// Expected false positives per tile.
    pub false_positive_rate: f64,
    pub miss_rate: f64,
    pub confidence_model: ConfidenceModel,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            vertex_noise_sigma: 1.0,
            false_positive_rate: 0.1,
            miss_rate: 0.0,
            confidence_model: ConfidenceModel::default(),
            rng_seed: 7,
        }
    }
}

impl OracleConfig {
    /// Exact detections: no noise, no misses, no false positives.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            vertex_noise_sigma: 0.0,
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.vertex_noise_sigma >= 0.0 && self.vertex_noise_sigma.is_finite()) {
            return Err(format!("vertex_noise_sigma {} must be >= 0", self.vertex_noise_sigma));
        }
        for (name, v) in [("false_positive_rate", self.false_positive_rate), ("miss_rate", self.miss_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [0, 1]"));
            }
        }
        let m = &self.confidence_model;
        if !(m.fp_alpha > 0.0 && m.fp_beta > 0.0) {
            return Err("Beta parameters must be positive".into());
        }
        if !(m.jitter_sigma >= 0.0) {
            return Err("jitter_sigma must be >= 0".into());
        }
        Ok(())
    }
}

struct Assignment<'a> {
    tile: TileIndex,
    local: [PixelPoint; 4],
    truth: &'a crate::synth::MarkerTruth,
}

fn tile_bounds(grid: &TileGrid, idx: TileIndex) -> (f64, f64, f64, f64) {
    let (x0, y0) = grid.tile_origin(idx).expect("index from grid");
    let (x0, y0) = (f64::from(x0), f64::from(y0));
    (x0, y0, x0 + f64::from(grid.tile_w), y0 + f64::from(grid.tile_h))
}

/// Tiles that see the whole marker; seam-cut markers fall back to a
/// clamped box in the tile holding their control point.
fn assign_tiles<'a>(grid: &TileGrid, truth: &'a crate::synth::MarkerTruth) -> Vec<Assignment<'a>> {
    let (lo, hi) = truth.obb.bounds();
    let global = *truth.obb.vertices();
    let mut out: Vec<Assignment<'a>> = grid
        .indices()
        .filter(|&idx| {
            let (x0, y0, x1, y1) = tile_bounds(grid, idx);
            lo.x >= x0 && lo.y >= y0 && hi.x < x1 && hi.y < y1
        })
        .map(|idx| {
            let offset = grid.tile_offset(idx).expect("index from grid");
            Assignment {
                tile: idx,
                local: global.map(|v| v - offset),
                truth,
            }
        })
        .collect();
    if out.is_empty() {
        if let Some((idx, _)) = grid.global_to_tile(truth.gcp).ok().and_then(|hits| hits.into_iter().next()) {
            let offset = grid.tile_offset(idx).expect("index from grid");
            let (tw, th) = (f64::from(grid.tile_w), f64::from(grid.tile_h));
            let local = global.map(|v| {
                let l = v - offset;
                PixelPoint::new(l.x.clamp(0.0, tw), l.y.clamp(0.0, th))
            });
            out.push(Assignment { tile: idx, local, truth });
        }
    }
    out
}

/// Synthesises detections for one image from its ground truth.
///
/// Randomness for tile `(i, j)` comes from a stream seeded by
/// `(rng_seed, image_id, i, j)`, so the output does not depend on how tiles
/// are scheduled.
pub fn oracle_detect(scene: &ImageTruth, grid: &TileGrid, cfg: &OracleConfig) -> Vec<Detection> {
    let mut per_tile: Vec<Vec<Assignment<'_>>> = (0..grid.tile_count()).map(|_| Vec::new()).collect();
    for m in &scene.markers {
        for a in assign_tiles(grid, m) {
            let slot = (a.tile.i as usize - 1) * grid.cols as usize + (a.tile.j as usize - 1);
            per_tile[slot].push(a);
        }
    }
    let indices: Vec<TileIndex> = grid.indices().collect();
    indices
        .into_par_iter()
        .zip(per_tile.into_par_iter())
        .flat_map_iter(|(idx, assigned)| detect_tile(scene, grid, cfg, idx, &assigned))
        .collect()
}

fn detect_tile(
    scene: &ImageTruth,
    grid: &TileGrid,
    cfg: &OracleConfig,
    idx: TileIndex,
    assigned: &[Assignment<'_>],
) -> Vec<Detection> {
    let seed = derive_seed(cfg.rng_seed, &["oracle", &scene.image_id, &idx.i.to_string(), &idx.j.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.vertex_noise_sigma).expect("sigma validated");
    let jitter = Normal::new(0.0, cfg.confidence_model.jitter_sigma).expect("sigma validated");
    let model = &cfg.confidence_model;
    let offset = grid.tile_offset(idx).expect("index from grid");
    let mut out = Vec::new();

    for a in assigned {
        // Fixed number of draws per marker keeps streams aligned across configs.
        let miss_draw: f64 = rng.random();
        let mut pts = a.local;
        for p in pts.iter_mut() {
            p.x += noise.sample(&mut rng);
            p.y += noise.sample(&mut rng);
        }
        let conf_jitter = jitter.sample(&mut rng);
        if miss_draw < cfg.miss_rate {
            continue;
        }
        let (d, d_max) = distortion_distance(a.truth.gcp, scene.width, scene.height);
        let Some(mean) = model.mean(a.truth.px_size, d / d_max) else {
            continue;
        };
        let Ok(obb) = OrientedBox::canonicalize(pts) else {
            continue;
        };
        out.push(Detection {
            image_id: scene.image_id.clone(),
            tile: idx,
            obb,
            class: a.truth.class,
            confidence: (mean + conf_jitter).clamp(0.0, model.max_confidence),
        });
    }

    if cfg.false_positive_rate > 0.0 {
        let count = Poisson::new(cfg.false_positive_rate).expect("rate validated").sample(&mut rng) as u32;
        let beta = Beta::new(model.fp_alpha, model.fp_beta).expect("params validated");
        // Only the part of the tile that overlaps the real image.
        let usable_w = (f64::from(scene.width) - offset.x).min(f64::from(grid.tile_w));
        let usable_h = (f64::from(scene.height) - offset.y).min(f64::from(grid.tile_h));
        for _ in 0..count {
            let size: f64 = rng.random_range(DETECTABLE_MARKER_PX..40.0);
            let half = size / 2.0;
            let cx = sample_span(&mut rng, half, usable_w - half);
            let cy = sample_span(&mut rng, half, usable_h - half);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let class = MarkerClass::ALL[rng.random_range(0..MarkerClass::ALL.len())];
            let confidence = beta.sample(&mut rng).min(model.max_confidence);
            let (s, c) = angle.sin_cos();
            let pts = [(-half, -half), (half, -half), (half, half), (-half, half)]
                .map(|(u, v)| PixelPoint::new(cx + u * c - v * s, cy + u * s + v * c));
            if let Ok(obb) = OrientedBox::canonicalize(pts) {
                out.push(Detection {
                    image_id: scene.image_id.clone(),
                    tile: idx,
                    obb,
                    class,
                    confidence,
                });
            }
        }
    }
    out
}

fn sample_span(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        (lo + hi) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::IndexEntry;
    use crate::tiler::plan_grid;

    fn index() -> SurveyIndex {
        SurveyIndex::new(vec![IndexEntry {
            image_id: "IMG_0042".into(),
            path: String::new(),
            grid: plan_grid(5472, 3648, 608, 608, 0, 0).unwrap(),
            altitude_m: None,
        }])
        .unwrap()
    }

    #[test]
    fn parses_golden_cross_record() {
        let text = "# header comment\nIMG_0042,2,3,10,20,30,20,30,40,10,40,CR,0.91\n";
        let dets = read_detections(text.as_bytes(), &index()).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.tile, TileIndex::new(2, 3));
        assert_eq!(d.class, MarkerClass::Cross);
        assert_eq!(d.confidence, 0.91);
        assert_eq!(d.obb.vertex(0), PixelPoint::new(30.0, 40.0));
        assert_eq!(d.obb.gcp_vertex(MarkerClass::Cross), PixelPoint::new(20.0, 30.0));
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(read_detections("".as_bytes(), &index()).unwrap().is_empty());
        assert!(read_detections("# only a comment\n".as_bytes(), &index()).unwrap().is_empty());
    }

    #[test]
    fn excursion_beyond_tolerance_cites_line() {
        let text = "IMG_0042,2,3,10,20,30,20,30,40,10,40,CR,0.9\nIMG_0042,2,3,610.0,20,630,20,630,40,610,40,BR,0.9\n";
        let err = read_detections(text.as_bytes(), &index()).unwrap_err();
        assert!(matches!(err, DetectionError::OutOfTile { line: 2, .. }), "{err}");
        // 615 px is within the 8 px allowance.
        let ok = "IMG_0042,2,3,590,20,615,20,615,40,590,40,BR,0.9\n";
        assert_eq!(read_detections(ok.as_bytes(), &index()).unwrap().len(), 1);
    }

    #[test]
    fn validation_errors() {
        let idx = index();
        let cases = [
            ("IMG_0042,2,3,10,20,30,20,30,40,10,40,XX,0.9", "class"),
            ("IMG_0042,2,3,10,20,30,20,30,40,10,40,CR,1.5", "conf"),
            ("IMG_9999,2,3,10,20,30,20,30,40,10,40,CR,0.5", "image"),
            ("IMG_0042,7,3,10,20,30,20,30,40,10,40,CR,0.5", "tile"),
            ("IMG_0042,2,3,10,20,30,20,30,40,10,CR,0.5", "fields"),
            ("IMG_0042,2,3,abc,20,30,20,30,40,10,40,CR,0.5", "number"),
            ("IMG_0042,2,3,10,20,10,20,30,40,10,40,CR,0.5", "box"),
        ];
        for (line, what) in cases {
            let text = format!("# c\n\n{line}\n");
            let err = read_detections(text.as_bytes(), &idx).unwrap_err();
            assert_eq!(err.line(), Some(3), "{what}: {err}");
            match what {
                "class" => assert!(matches!(err, DetectionError::UnknownClass { .. })),
                "conf" => assert!(matches!(err, DetectionError::ConfidenceOutOfRange { .. })),
                "image" => assert!(matches!(err, DetectionError::UnknownImage { .. })),
                "tile" => assert!(matches!(err, DetectionError::BadTile { .. })),
                "box" => assert!(matches!(err, DetectionError::BadBox { .. })),
                _ => assert!(matches!(err, DetectionError::Parse { .. })),
            }
        }
    }

    #[test]
    fn confidence_model_shape() {
        let m = ConfidenceModel::default();
        assert_eq!(m.mean(11.9, 0.0), None);
        let full = m.mean(30.0, 0.0).unwrap();
        assert!((full - 0.93).abs() < 1e-12);
        assert!(m.mean(14.0, 0.0).unwrap() < m.mean(16.0, 0.0).unwrap());
        assert!(m.mean(30.0, 1.0).unwrap() < full);
        // Bands below 200 m (≥ 16.85 px) stay clear of a 0.7 threshold.
        assert!(m.mean(16.85, 1.0).unwrap() - 5.0 * m.jitter_sigma > 0.7);
    }
}

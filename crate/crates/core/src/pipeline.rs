//! File-level pipeline stages: synth, tile, run, sweep and eval.
//!
//! Outputs are written into a hidden staging directory first and moved into
//! place only when the whole stage succeeds.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detector::{load_detections, oracle_detect, write_detections, Detection};
use crate::eval::{
    band_report, error_stats, match_survey, ranking_report, write_band_report, write_error_stats, write_ranking_report,
    BandRow, ErrorStats, RankingRow, SurveyMatch,
};
use crate::filter::{apply_threshold, sweep, threshold_grid, write_sweep, Granularity, ThresholdReport};
use crate::geometry::{MarkerClass, OrientedBox, PixelPoint};
use crate::locator::{dedupe_seams, locate, write_candidates, GcpCandidate, LocateError};
use crate::plot::{error_scatter, line_chart, Series};
use crate::ranker::{
    group_candidates, pona, read_associations, score, select_top_k, write_selection, Association, GcpGroup,
    ScoredCandidate,
};
use crate::survey::{IndexEntry, SurveyIndex};
use crate::synth::{altitude_ladder, redundant_survey, render_survey, ImageTruth, MarkerTruth, SceneTruth, SurveySpec, SynthWarning};
use crate::tiler::{load_rgb8, plan_grid, write_tiles};

pub const SURVEY_INDEX_FILE: &str = "survey_index.csv";
pub const SCENE_TRUTH_FILE: &str = "scene_truth.csv";
pub const FLIGHTPLAN_FILE: &str = "flightplan.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Tile,
    Load,
    Detect,
    Locate,
    Group,
    Rank,
    Sweep,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Tile => "tile",
            Stage::Load => "load",
            Stage::Detect => "detect",
            Stage::Locate => "locate",
            Stage::Group => "group",
            Stage::Rank => "rank",
            Stage::Sweep => "sweep",
            Stage::Eval => "eval",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad or missing input: exit code 2.
    Validation,
    /// Anything else: exit code 1.
    Pipeline,
}

#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn invalid(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind: FailureKind::Validation,
            message: message.to_string(),
        }
    }

    pub fn failed(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind: FailureKind::Pipeline,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => 2,
            FailureKind::Pipeline => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Scene truth file

#[derive(Debug, Error)]
pub enum TruthError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: image `{image_id}` is not in the survey index")]
    UnknownImage { line: u64, image_id: String },
}

const TRUTH_HEADER: [&str; 14] = [
    "image_id", "marker_id", "class_code", "x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4", "gcp_x", "gcp_y", "px_size",
];

/// One row per marker observation; floats use shortest round-trip form.
pub fn write_scene_truth<W: Write>(out: W, truth: &SceneTruth) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER)?;
    for img in &truth.images {
        for m in &img.markers {
            let mut row = vec![img.image_id.clone(), m.marker_id.clone(), m.class.code().to_string()];
            for v in m.obb.vertices() {
                row.push(v.x.to_string());
                row.push(v.y.to_string());
            }
            row.extend([m.gcp.x.to_string(), m.gcp.y.to_string(), m.px_size.to_string()]);
            w.write_record(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a truth file; image sizes and altitudes come from the index, and
/// every indexed image appears in the result, marker-free or not.
pub fn read_scene_truth<R: Read>(input: R, index: &SurveyIndex) -> Result<SceneTruth, TruthError> {
    let mut images: Vec<ImageTruth> = index
        .entries()
        .iter()
        .map(|e| ImageTruth {
            image_id: e.image_id.clone(),
            width: e.width(),
            height: e.height(),
            altitude_m: e.altitude_m,
            markers: Vec::new(),
        })
        .collect();
    let pos: std::collections::HashMap<String, usize> =
        images.iter().enumerate().map(|(k, t)| (t.image_id.clone(), k)).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TruthError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |message: String| TruthError::Parse { line, message };
        if rec.len() != TRUTH_HEADER.len() {
            return Err(parse_err(format!("expected {} fields, found {}", TRUTH_HEADER.len(), rec.len())));
        }
        let num = |k: usize| -> Result<f64, TruthError> {
            rec[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("field `{}` is not a finite number: `{}`", TRUTH_HEADER[k], &rec[k])))
        };
        let class: MarkerClass = rec[2].parse().map_err(|_| parse_err(format!("unknown class code `{}`", &rec[2])))?;
        let mut pts = [PixelPoint::default(); 4];
        for (k, p) in pts.iter_mut().enumerate() {
            *p = PixelPoint::new(num(3 + 2 * k)?, num(4 + 2 * k)?);
        }
        let obb = OrientedBox::canonicalize(pts).map_err(|e| parse_err(e.to_string()))?;
        let &slot = pos.get(&rec[0]).ok_or_else(|| TruthError::UnknownImage {
            line,
            image_id: rec[0].to_string(),
        })?;
        images[slot].markers.push(MarkerTruth {
            marker_id: rec[1].to_string(),
            class,
            obb,
            gcp: PixelPoint::new(num(11)?, num(12)?),
            px_size: num(13)?,
        });
    }
    Ok(SceneTruth { images })
}

// ---------------------------------------------------------------------------
// Staged output

struct Staging {
    dest: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(dest: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dest).map_err(|e| PipelineError::failed(Stage::Write, format!("{}: {e}", dest.display())))?;
        let tmp = dest.join(format!(".gcpx-partial-{}", std::process::id()));
        if tmp.exists() {
            let _ = fs::remove_dir_all(&tmp);
        }
        fs::create_dir(&tmp).map_err(|e| PipelineError::failed(Stage::Write, format!("{}: {e}", tmp.display())))?;
        Ok(Self {
            dest: dest.to_path_buf(),
            tmp,
            committed: false,
        })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.tmp.join(name);
        fs::create_dir_all(&p).map_err(|e| PipelineError::failed(Stage::Write, format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn write_with<F>(&self, name: &str, f: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), String>,
    {
        let path = self.tmp.join(name);
        let fail = |e: String| PipelineError::failed(Stage::Write, format!("{}: {e}", self.dest.join(name).display()));
        let file = File::create(&path).map_err(|e| fail(e.to_string()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(fail)?;
        w.flush().map_err(|e| fail(e.to_string()))
    }

    fn write_csv<F>(&self, name: &str, f: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut BufWriter<File>) -> csv::Result<()>,
    {
        self.write_with(name, |w| f(w).map_err(|e| e.to_string()))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), PipelineError> {
        self.write_with(name, |w| w.write_all(text.as_bytes()).map_err(|e| e.to_string()))
    }

    /// Moves every staged entry into the destination, replacing old ones.
    fn commit(mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let fail = |p: &Path, e: std::io::Error| PipelineError::failed(Stage::Write, format!("{}: {e}", p.display()));
        let mut names: Vec<_> = fs::read_dir(&self.tmp)
            .map_err(|e| fail(&self.tmp, e))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(|e| fail(&self.tmp, e))?;
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let target = self.dest.join(&name);
            if target.is_dir() {
                fs::remove_dir_all(&target).map_err(|e| fail(&target, e))?;
            }
            fs::rename(self.tmp.join(&name), &target).map_err(|e| fail(&target, e))?;
            out.push(target);
        }
        fs::remove_dir(&self.tmp).map_err(|e| fail(&self.tmp, e))?;
        self.committed = true;
        Ok(out)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn report_name(stem: &str, ext: &str, timestamp: Option<&str>) -> String {
    match timestamp {
        Some(ts) => format!("{stem}_{ts}.{ext}"),
        None => format!("{stem}.{ext}"),
    }
}

fn now_stamp(enabled: bool) -> Option<String> {
    enabled.then(|| chrono::Local::now().format("%Y%m%dT%H%M%S").to_string())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, PartialEq)]
pub enum SurveyPreset {
    /// Four sites, eleven markers, heavy redundancy.
    Redundant,
    /// One site per altitude.
    Ladder { altitudes_m: Vec<f64>, markers_per_site: u32 },
    /// A flight plan previously written by `synth`.
    Flightplan(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub preset: SurveyPreset,
    /// Skip raster rendering; only truth, index and flight plan are written.
    pub truth_only: bool,
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub images: usize,
    pub observations: usize,
    pub warnings: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn survey_spec(preset: &SurveyPreset, seed: u64) -> Result<SurveySpec, PipelineError> {
    match preset {
        SurveyPreset::Redundant => Ok(redundant_survey(seed)),
        SurveyPreset::Ladder { altitudes_m, markers_per_site } => {
            if altitudes_m.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return Err(PipelineError::invalid(Stage::Config, "altitudes must be positive"));
            }
            Ok(altitude_ladder(altitudes_m, *markers_per_site, seed))
        }
        SurveyPreset::Flightplan(path) => {
            let text = fs::read_to_string(path).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", path.display())))
        }
    }
}

pub fn build_index(spec: &SurveySpec, config: &PipelineConfig, with_paths: bool) -> Result<SurveyIndex, PipelineError> {
    let t = &config.tiling;
    let cam = &spec.camera;
    let grid = plan_grid(cam.image_w, cam.image_h, t.tile_w, t.tile_h, t.overlap_x, t.overlap_y)
        .map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    let entries = spec
        .exposures
        .iter()
        .map(|e| IndexEntry {
            image_id: e.image_id.clone(),
            path: if with_paths { format!("{IMAGES_DIR}/{}.png", e.image_id) } else { String::new() },
            grid,
            altitude_m: Some(e.altitude_m),
        })
        .collect();
    SurveyIndex::new(entries).map_err(|e| PipelineError::invalid(Stage::Synth, e))
}

/// Renders a synthetic survey into `out_dir`: truth, index, flight plan,
/// config and (unless truth-only) PNG rasters.
pub fn cmd_synth(config: &PipelineConfig, opts: &SynthOptions, out_dir: &Path) -> Result<SynthSummary, PipelineError> {
    config.validate().map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    let spec = survey_spec(&opts.preset, config.seed)?;
    let survey = render_survey(&spec, config.seed).map_err(|e| PipelineError::invalid(Stage::Synth, e))?;
    let index = build_index(&spec, config, !opts.truth_only)?;
    let staging = Staging::new(out_dir)?;

    staging.write_csv(SCENE_TRUTH_FILE, |w| write_scene_truth(w, &survey.truth))?;
    staging.write_with(SURVEY_INDEX_FILE, |w| index.write(w).map_err(|e| e.to_string()))?;
    let plan = toml::to_string_pretty(&spec).map_err(|e| PipelineError::failed(Stage::Synth, e))?;
    staging.write_text(FLIGHTPLAN_FILE, &plan)?;
    staging.write_text(CONFIG_FILE, &config.to_toml())?;

    if !opts.truth_only {
        let dir = staging.subdir(IMAGES_DIR)?;
        (0..survey.image_count()).into_par_iter().try_for_each(|k| {
            let id = &spec.exposures[k].image_id;
            let path = dir.join(format!("{id}.png"));
            survey
                .raster(k)
                .save(&path)
                .map_err(|e| PipelineError::failed(Stage::Write, format!("{}: {e}", out_dir.join(IMAGES_DIR).join(format!("{id}.png")).display())))
        })?;
    }
    let outputs = staging.commit()?;
    Ok(SynthSummary {
        images: survey.image_count(),
        observations: survey.truth.observation_count(),
        warnings: survey
            .warnings
            .iter()
            .map(|SynthWarning::MarkerOutOfFrame { image_id, marker_id }| {
                format!("marker {marker_id} is only partly inside image {image_id}; left out of truth")
            })
            .collect(),
        outputs,
    })
}

// ---------------------------------------------------------------------------
// tile

#[derive(Clone, Debug)]
pub struct TileSummary {
    pub images: usize,
    pub tiles: usize,
}

const RASTER_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "jpg", "jpeg"];

fn scan_images(survey_dir: &Path, config: &PipelineConfig) -> Result<SurveyIndex, PipelineError> {
    let dir = survey_dir.join(IMAGES_DIR);
    let read = fs::read_dir(&dir).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| RASTER_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let t = &config.tiling;
    let mut entries = Vec::new();
    for p in paths {
        let (w, h) = image::image_dimensions(&p).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", p.display())))?;
        let grid = plan_grid(w, h, t.tile_w, t.tile_h, t.overlap_x, t.overlap_y).map_err(|e| PipelineError::invalid(Stage::Tile, e))?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        entries.push(IndexEntry {
            image_id: stem,
            path: format!("{IMAGES_DIR}/{name}"),
            grid,
            altitude_m: None,
        });
    }
    SurveyIndex::new(entries).map_err(|e| PipelineError::invalid(Stage::Load, e))
}

/// Crops every raster of the survey into `tiles_dir` and rewrites the survey
/// index with the grid actually used. Without an index, `images/` is scanned.
pub fn cmd_tile(config: &PipelineConfig, survey_dir: &Path, tiles_dir: &Path) -> Result<TileSummary, PipelineError> {
    config.validate().map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    let index_path = survey_dir.join(SURVEY_INDEX_FILE);
    let old = if index_path.exists() {
        SurveyIndex::load(&index_path).map_err(|e| PipelineError::invalid(Stage::Load, e))?
    } else {
        scan_images(survey_dir, config)?
    };
    let t = &config.tiling;
    let mut entries = Vec::with_capacity(old.len());
    for e in old.entries() {
        let grid = plan_grid(e.width(), e.height(), t.tile_w, t.tile_h, t.overlap_x, t.overlap_y)
            .map_err(|err| PipelineError::invalid(Stage::Tile, format!("image {}: {err}", e.image_id)))?;
        entries.push(IndexEntry { grid, ..e.clone() });
    }
    let index = SurveyIndex::new(entries).map_err(|e| PipelineError::invalid(Stage::Tile, e))?;

    let staging = Staging::new(tiles_dir)?;
    let mut tiles = 0;
    let mut images = 0;
    for e in index.entries().iter().filter(|e| !e.path.is_empty()) {
        let raster = load_rgb8(&survey_dir.join(&e.path)).map_err(|err| PipelineError::invalid(Stage::Tile, err))?;
        let written = write_tiles(&raster, &e.grid, t.pad_fill, &e.image_id, &staging.tmp)
            .map_err(|err| PipelineError::failed(Stage::Tile, err))?;
        tiles += written.len();
        images += 1;
    }
    staging.commit()?;

    let tmp_index = survey_dir.join(format!(".{SURVEY_INDEX_FILE}.partial"));
    index
        .save(&tmp_index)
        .map_err(|e| PipelineError::failed(Stage::Write, e))?;
    fs::rename(&tmp_index, &index_path)
        .map_err(|e| PipelineError::failed(Stage::Write, format!("{}: {e}", index_path.display())))?;
    Ok(TileSummary { images, tiles })
}

// ---------------------------------------------------------------------------
// run / sweep / eval

#[derive(Clone, Debug, PartialEq)]
pub enum DetectionSource {
    File(PathBuf),
    Oracle,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub survey_dir: PathBuf,
    pub out_dir: PathBuf,
    pub source: DetectionSource,
    /// Marker association file (`image_id,marker_id,x,y`); defaults to the
    /// scene truth when present.
    pub associations: Option<PathBuf>,
    pub timestamps: bool,
}

/// Everything the later stages read from a survey directory.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub index: SurveyIndex,
    pub truth: Option<SceneTruth>,
    pub associations: Option<Vec<Association>>,
}

pub fn load_inputs(survey_dir: &Path, associations: Option<&Path>) -> Result<Inputs, PipelineError> {
    let index_path = survey_dir.join(SURVEY_INDEX_FILE);
    let index = SurveyIndex::load(&index_path).map_err(|e| PipelineError::invalid(Stage::Load, e))?;
    let truth_path = survey_dir.join(SCENE_TRUTH_FILE);
    let truth = if truth_path.exists() {
        let file = File::open(&truth_path).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", truth_path.display())))?;
        Some(read_scene_truth(file, &index).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", truth_path.display())))?)
    } else {
        None
    };
    let associations = match associations {
        Some(p) => {
            let file = File::open(p).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", p.display())))?;
            Some(read_associations(file).map_err(|e| PipelineError::invalid(Stage::Load, format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    Ok(Inputs { index, truth, associations })
}

/// Reads detections from a file or runs the oracle over every indexed image.
pub fn gather_detections(inputs: &Inputs, source: &DetectionSource, config: &PipelineConfig) -> Result<Vec<Detection>, PipelineError> {
    match source {
        DetectionSource::File(path) => {
            load_detections(path, &inputs.index).map_err(|e| PipelineError::invalid(Stage::Detect, format!("{}: {e}", path.display())))
        }
        DetectionSource::Oracle => {
            let truth = inputs
                .truth
                .as_ref()
                .ok_or_else(|| PipelineError::invalid(Stage::Detect, format!("the oracle detector needs {SCENE_TRUTH_FILE}")))?;
            config.oracle.validate().map_err(|e| PipelineError::invalid(Stage::Config, e))?;
            let by_id = truth.by_id();
            let per_image: Vec<Vec<Detection>> = inputs
                .index
                .entries()
                .par_iter()
                .map(|e| by_id.get(e.image_id.as_str()).map_or_else(Vec::new, |t| oracle_detect(t, &e.grid, &config.oracle)))
                .collect();
            Ok(per_image.into_iter().flatten().collect())
        }
    }
}

/// Global positions for every detection, seam duplicates merged. Returns the
/// candidates and the number of detections lying wholly in padding.
pub fn locate_all(detections: &[Detection], index: &SurveyIndex, dedupe_radius: f64) -> Result<(Vec<GcpCandidate>, usize), PipelineError> {
    let located: Vec<Result<Option<GcpCandidate>, PipelineError>> = detections
        .par_iter()
        .map(|d| {
            let entry = index
                .get(&d.image_id)
                .ok_or_else(|| PipelineError::invalid(Stage::Locate, format!("image `{}` is not in the survey index", d.image_id)))?;
            match locate(d, &entry.grid) {
                Ok(c) => Ok(Some(c)),
                Err(LocateError::PadRegionOnly { .. }) => Ok(None),
                Err(e) => Err(PipelineError::invalid(Stage::Locate, e)),
            }
        })
        .collect();
    let mut cands = Vec::with_capacity(located.len());
    let mut dropped = 0;
    for r in located {
        match r? {
            Some(c) => cands.push(c),
            None => dropped += 1,
        }
    }
    Ok((dedupe_seams(&cands, dedupe_radius), dropped))
}

/// In-memory result of a full run.
#[derive(Clone, Debug, Default)]
pub struct RunResult {
    pub detections: Vec<Detection>,
    /// Deduplicated candidates before thresholding.
    pub candidates: Vec<GcpCandidate>,
    pub kept: Vec<GcpCandidate>,
    pub sweep: Vec<ThresholdReport>,
    pub groups: Vec<GcpGroup>,
    pub selections: Vec<(String, Vec<ScoredCandidate>)>,
    pub pona: Option<f64>,
    pub matched: Option<SurveyMatch>,
    pub error_stats: Option<ErrorStats>,
    pub bands: Vec<BandRow>,
    pub ranking: Vec<RankingRow>,
    pub warnings: Vec<String>,
}

fn truth_associations(truth: &SceneTruth) -> Vec<Association> {
    truth
        .images
        .iter()
        .flat_map(|img| {
            img.markers.iter().map(|m| Association {
                image_id: img.image_id.clone(),
                marker_id: m.marker_id.clone(),
                position: m.gcp,
            })
        })
        .collect()
}

/// locate → dedupe → sweep → threshold → group → rank → select → PONA, plus
/// the truth-based reports when truth is available.
pub fn run_pipeline(inputs: &Inputs, detections: Vec<Detection>, config: &PipelineConfig) -> Result<RunResult, PipelineError> {
    config.validate().map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    let mut warnings = Vec::new();
    let (candidates, dropped) = locate_all(&detections, &inputs.index, config.dedupe_radius_px)?;
    if dropped > 0 {
        warnings.push(format!("{dropped} detection(s) lay entirely in tile padding and were dropped"));
    }

    let grid = threshold_grid(config.sweep.from, config.sweep.to, config.sweep.step);
    let sweep_rows = sweep(&candidates, inputs.truth.as_ref(), &grid, Granularity::Image, config.matching)
        .map_err(|e| PipelineError::invalid(Stage::Sweep, e))?;

    let kept = apply_threshold(&candidates, config.threshold).map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    if kept.is_empty() {
        warnings.push(format!("no candidate reaches confidence {}; the selection is empty", config.threshold));
    }

    let scored: Vec<ScoredCandidate> = kept
        .iter()
        .map(|c| {
            let e = inputs.index.get(&c.image_id).expect("located candidates are indexed");
            score(c, e.width(), e.height(), config.sigma).map_err(|err| PipelineError::invalid(Stage::Rank, err))
        })
        .collect::<Result<_, _>>()?;

    let associations = match (&inputs.associations, &inputs.truth) {
        (Some(a), _) => Some(a.clone()),
        (None, Some(t)) => Some(truth_associations(t)),
        (None, None) => None,
    };
    let groups = match &associations {
        Some(a) => group_candidates(scored, a, config.association_radius_px),
        None => {
            warnings.push("no associations or scene truth; candidates were not grouped by marker".into());
            Vec::new()
        }
    };
    let selections: Vec<(String, Vec<ScoredCandidate>)> = groups
        .iter()
        .map(|g| Ok((g.marker_id.clone(), select_top_k(g, config.top_k).map_err(|e| PipelineError::invalid(Stage::Rank, e))?)))
        .collect::<Result<_, PipelineError>>()?;
    let all_selected: Vec<ScoredCandidate> = selections.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    let pona = pona(&all_selected).ok();

    let mut result = RunResult {
        detections,
        candidates,
        sweep: sweep_rows,
        selections,
        pona,
        ..Default::default()
    };
    if let Some(truth) = &inputs.truth {
        let m = match_survey(&kept, truth, config.matching);
        result.error_stats = error_stats(&m.matched).ok();
        if result.error_stats.is_none() {
            warnings.push("no candidate matched a true control point; error statistics skipped".into());
        }
        result.bands = band_report(&kept, truth, &config.band_edges_m, config.matching).map_err(|e| PipelineError::invalid(Stage::Eval, e))?;
        result.matched = Some(m);
    }
    if !groups.is_empty() {
        result.ranking = ranking_report(&groups, inputs.truth.as_ref(), &config.top_k_report, config.matching);
    }
    result.kept = kept;
    result.groups = groups;
    result.warnings = warnings;
    Ok(result)
}

fn sweep_chart(rows: &[ThresholdReport], with_truth: bool) -> String {
    if with_truth {
        let pick = |f: fn(&ThresholdReport) -> Option<f64>| rows.iter().map(|r| (r.threshold, f(r).unwrap_or(f64::NAN))).collect();
        line_chart(
            "Precision and loss ratio by confidence threshold",
            "confidence threshold",
            "ratio",
            &[
                Series { name: "precision", points: pick(|r| r.precision) },
                Series { name: "loss ratio", points: pick(|r| r.loss_ratio) },
            ],
        )
    } else {
        line_chart(
            "Images retained by confidence threshold",
            "confidence threshold",
            "images",
            &[Series {
                name: "images retained",
                points: rows.iter().map(|r| (r.threshold, r.images_retained as f64)).collect(),
            }],
        )
    }
}

fn stage_sweep(staging: &Staging, result: &RunResult, with_truth: bool, ts: Option<&str>) -> Result<(), PipelineError> {
    staging.write_csv(&report_name("sweep", "csv", ts), |w| write_sweep(w, &result.sweep, with_truth))?;
    staging.write_text(&report_name("sweep", "svg", ts), &sweep_chart(&result.sweep, with_truth))
}

fn stage_eval(staging: &Staging, result: &RunResult, ts: Option<&str>) -> Result<(), PipelineError> {
    if let Some(stats) = &result.error_stats {
        staging.write_csv(&report_name("error_stats", "csv", ts), |w| write_error_stats(w, stats))?;
        let offsets: Vec<(f64, f64)> = result.matched.iter().flat_map(|m| &m.matched).map(|p| (p.dx, p.dy)).collect();
        staging.write_text(&report_name("error_scatter", "svg", ts), &error_scatter("Control point error (px)", &offsets))?;
    }
    if result.matched.is_some() {
        staging.write_csv(&report_name("band_report", "csv", ts), |w| write_band_report(w, &result.bands))?;
    }
    if !result.ranking.is_empty() {
        staging.write_csv(&report_name("ranking_report", "csv", ts), |w| write_ranking_report(w, &result.ranking))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub result: RunResult,
}

fn prepare(config: &PipelineConfig, opts: &RunOptions) -> Result<(Inputs, RunResult), PipelineError> {
    config.validate().map_err(|e| PipelineError::invalid(Stage::Config, e))?;
    let inputs = load_inputs(&opts.survey_dir, opts.associations.as_deref())?;
    let detections = gather_detections(&inputs, &opts.source, config)?;
    let result = run_pipeline(&inputs, detections, config)?;
    Ok((inputs, result))
}

/// Full pipeline over a survey directory; writes candidates, sweep, selection
/// and (with truth) evaluation reports into `opts.out_dir`.
pub fn cmd_run(config: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let (inputs, result) = prepare(config, opts)?;
    let ts = now_stamp(opts.timestamps);
    let ts = ts.as_deref();
    let staging = Staging::new(&opts.out_dir)?;
    if opts.source == DetectionSource::Oracle {
        staging.write_with(&report_name("detections", "csv", ts), |w| write_detections(w, &result.detections).map_err(|e| e.to_string()))?;
    }
    staging.write_csv(&report_name("candidates", "csv", ts), |w| write_candidates(w, &result.candidates))?;
    stage_sweep(&staging, &result, inputs.truth.is_some(), ts)?;
    staging.write_csv(&report_name("selection", "csv", ts), |w| write_selection(w, &result.selections))?;
    stage_eval(&staging, &result, ts)?;
    staging.write_text(&report_name("config", "toml", ts), &config.to_toml())?;
    let outputs = staging.commit()?;
    Ok(RunSummary { outputs, result })
}

/// Threshold sweep only.
pub fn cmd_sweep(config: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let (inputs, result) = prepare(config, opts)?;
    let ts = now_stamp(opts.timestamps);
    let staging = Staging::new(&opts.out_dir)?;
    stage_sweep(&staging, &result, inputs.truth.is_some(), ts.as_deref())?;
    let outputs = staging.commit()?;
    Ok(RunSummary { outputs, result })
}

/// Truth-based reports only; fails without scene truth.
pub fn cmd_eval(config: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    if !opts.survey_dir.join(SCENE_TRUTH_FILE).exists() {
        return Err(PipelineError::invalid(
            Stage::Eval,
            format!("{}: evaluation needs scene truth", opts.survey_dir.join(SCENE_TRUTH_FILE).display()),
        ));
    }
    let (_, result) = prepare(config, opts)?;
    let ts = now_stamp(opts.timestamps);
    let staging = Staging::new(&opts.out_dir)?;
    stage_eval(&staging, &result, ts.as_deref())?;
    let outputs = staging.commit()?;
    Ok(RunSummary { outputs, result })
}

//! Survey index: which images exist, how big they are and how they were
//! tiled. Persisted as a commented CSV so surveyors can read it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tiler::{plan_grid, TileGrid, TilerError};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate image id `{0}` in survey index")]
    DuplicateImage(String),
    #[error("image `{image_id}`: stored grid does not match a fresh plan ({detail})")]
    GridMismatch { image_id: String, detail: String },
    #[error("image `{image_id}`: {source}")]
    Grid {
        image_id: String,
        #[source]
        source: TilerError,
    },
    #[error("unsupported survey index format_version {0} (expected {INDEX_FORMAT_VERSION})")]
    Version(u32),
    #[error("survey index line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: String,
    /// Raster path relative to the survey directory (may be empty for
    /// truth-only surveys).
    pub path: String,
    pub grid: TileGrid,
    pub altitude_m: Option<f64>,
}

impl IndexEntry {
    pub fn width(&self) -> u32 {
        self.grid.image_w
    }

    pub fn height(&self) -> u32 {
        self.grid.image_h
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurveyIndex {
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: String,
    path: String,
    width: u32,
    height: u32,
    tile_w: u32,
    tile_h: u32,
    overlap_x: u32,
    overlap_y: u32,
    pad_right: u32,
    pad_bottom: u32,
    rows: u32,
    cols: u32,
    altitude_m: Option<f64>,
}

impl SurveyIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self, IndexError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            if by_id.insert(e.image_id.clone(), k).is_some() {
                return Err(IndexError::DuplicateImage(e.image_id.clone()));
            }
            let g = &e.grid;
            let fresh = plan_grid(g.image_w, g.image_h, g.tile_w, g.tile_h, g.overlap_x, g.overlap_y)
                .map_err(|source| IndexError::Grid {
                    image_id: e.image_id.clone(),
                    source,
                })?;
            if &fresh != g {
                return Err(IndexError::GridMismatch {
                    image_id: e.image_id.clone(),
                    detail: format!(
                        "stored rows={} cols={} pads=({}, {}), planned rows={} cols={} pads=({}, {})",
                        g.rows, g.cols, g.pad_right, g.pad_bottom, fresh.rows, fresh.cols, fresh.pad_right, fresh.pad_bottom
                    ),
                });
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, image_id: &str) -> Option<&IndexEntry> {
        self.by_id.get(image_id).map(|&k| &self.entries[k])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), IndexError> {
        let io = |source| IndexError::Io { path: "<survey index>".into(), source };
        writeln!(out, "# format_version={INDEX_FORMAT_VERSION}").map_err(io)?;
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            let g = &e.grid;
            w.serialize(Row {
                image_id: e.image_id.clone(),
                path: e.path.clone(),
                width: g.image_w,
                height: g.image_h,
                tile_w: g.tile_w,
                tile_h: g.tile_h,
                overlap_x: g.overlap_x,
                overlap_y: g.overlap_y,
                pad_right: g.pad_right,
                pad_bottom: g.pad_bottom,
                rows: g.rows,
                cols: g.cols,
                altitude_m: e.altitude_m,
            })
            .map_err(|e| IndexError::Io {
                path: "<survey index>".into(),
                source: std::io::Error::other(e),
            })?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, IndexError> {
        let mut buf = BufReader::new(input);
        let mut first = String::new();
        buf.read_line(&mut first).map_err(|source| IndexError::Io {
            path: "<survey index>".into(),
            source,
        })?;
        let version = first
            .trim()
            .strip_prefix("# format_version=")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| IndexError::Parse {
                line: 1,
                message: "expected `# format_version=N` header".into(),
            })?;
        if version != INDEX_FORMAT_VERSION {
            return Err(IndexError::Version(version));
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(buf);
        let mut entries = Vec::new();
        for rec in rdr.deserialize::<Row>() {
            let row = rec.map_err(|e| IndexError::Parse {
                line: e.position().map_or(0, |p| p.line() + 1),
                message: e.to_string(),
            })?;
            entries.push(IndexEntry {
                image_id: row.image_id,
                path: row.path,
                grid: TileGrid {
                    image_w: row.width,
                    image_h: row.height,
                    tile_w: row.tile_w,
                    tile_h: row.tile_h,
                    overlap_x: row.overlap_x,
                    overlap_y: row.overlap_y,
                    pad_right: row.pad_right,
                    pad_bottom: row.pad_bottom,
                    rows: row.rows,
                    cols: row.cols,
                },
                altitude_m: row.altitude_m,
            });
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let file = File::create(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write(file)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let file = File::open(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(file)
    }
}

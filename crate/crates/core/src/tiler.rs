//! Padded tile grids over full-resolution frames.
//!
//! Images are padded on the right and bottom only, so the tile at row `i`,
//! column `j` (both 1-based) starts at `((j-1)·stride_x, (i-1)·stride_y)`
//! in full-image pixels.

use std::fmt;
use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelPoint;

/// Neutral gray used for padding.
pub const DEFAULT_PAD_FILL: u8 = 114;

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("tile size {0}x{1} is not a positive multiple of 32")]
    BadTileSize(u32, u32),
    #[error("overlap {overlap} must be smaller than tile dimension {tile}")]
    OverlapTooLarge { overlap: u32, tile: u32 },
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("point {0} lies outside tile bounds")]
    OutOfTile(PixelPoint),
    #[error("point {0} lies outside the padded image")]
    OutOfImage(PixelPoint),
    #[error("tile index {0} is outside the {1}x{2} grid")]
    BadTileIndex(TileIndex, u32, u32),
    #[error("raster is {got_w}x{got_h} but grid expects {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("unsupported raster format in {path}: {kind} (only 8-bit RGB is accepted)")]
    UnsupportedRaster { path: String, kind: String },
    #[error("cannot read raster {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write tile {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// 1-based (row, column) position of a tile in its grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub i: u32,
    pub j: u32,
}

impl TileIndex {
    pub const fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }
}

impl fmt::Display for TileIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(r{}, c{})", self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_w: u32,
    pub image_h: u32,
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap_x: u32,
    pub overlap_y: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
    pub rows: u32,
    pub cols: u32,
}

/// Smallest tile count along one axis and the padding it implies.
fn axis_plan(image: u32, tile: u32, stride: u32) -> (u32, u32) {
    let count = if image <= tile {
        1
    } else {
        (image - tile).div_ceil(stride) + 1
    };
    let covered = (count - 1) * stride + tile;
    (count, covered - image)
}

/// Plans the minimal padded grid of `tile_w x tile_h` tiles over an image.
pub fn plan_grid(
    image_w: u32,
    image_h: u32,
    tile_w: u32,
    tile_h: u32,
    overlap_x: u32,
    overlap_y: u32,
) -> Result<TileGrid, TilerError> {
    if image_w == 0 || image_h == 0 {
        return Err(TilerError::EmptyImage(image_w, image_h));
    }
    if tile_w == 0 || tile_h == 0 || !tile_w.is_multiple_of(32) || !tile_h.is_multiple_of(32) {
        return Err(TilerError::BadTileSize(tile_w, tile_h));
    }
    if overlap_x >= tile_w {
        return Err(TilerError::OverlapTooLarge { overlap: overlap_x, tile: tile_w });
    }
    if overlap_y >= tile_h {
        return Err(TilerError::OverlapTooLarge { overlap: overlap_y, tile: tile_h });
    }
    let (cols, pad_right) = axis_plan(image_w, tile_w, tile_w - overlap_x);
    let (rows, pad_bottom) = axis_plan(image_h, tile_h, tile_h - overlap_y);
    Ok(TileGrid {
        image_w,
        image_h,
        tile_w,
        tile_h,
        overlap_x,
        overlap_y,
        pad_right,
        pad_bottom,
        rows,
        cols,
    })
}

impl TileGrid {
    pub fn stride_x(&self) -> u32 {
        self.tile_w - self.overlap_x
    }

    pub fn stride_y(&self) -> u32 {
        self.tile_h - self.overlap_y
    }

    pub fn padded_w(&self) -> u32 {
        self.image_w + self.pad_right
    }

    pub fn padded_h(&self) -> u32 {
        self.image_h + self.pad_bottom
    }

    pub fn tile_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn contains_index(&self, idx: TileIndex) -> bool {
        (1..=self.rows).contains(&idx.i) && (1..=self.cols).contains(&idx.j)
    }

    /// Tile indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = TileIndex> + '_ {
        (1..=self.rows).flat_map(move |i| (1..=self.cols).map(move |j| TileIndex::new(i, j)))
    }

    /// Full-image pixel position of the tile's top-left corner.
    pub fn tile_origin(&self, idx: TileIndex) -> Result<(u32, u32), TilerError> {
        if !self.contains_index(idx) {
            return Err(TilerError::BadTileIndex(idx, self.rows, self.cols));
        }
        Ok(((idx.j - 1) * self.stride_x(), (idx.i - 1) * self.stride_y()))
    }

    /// Like [`tile_origin`](Self::tile_origin) but as a point, for offset arithmetic.
    pub fn tile_offset(&self, idx: TileIndex) -> Result<PixelPoint, TilerError> {
        let (x0, y0) = self.tile_origin(idx)?;
        Ok(PixelPoint::new(f64::from(x0), f64::from(y0)))
    }

    pub fn tile_to_global(&self, idx: TileIndex, p: PixelPoint) -> Result<PixelPoint, TilerError> {
        let offset = self.tile_offset(idx)?;
        let inside = p.x >= 0.0
            && p.y >= 0.0
            && p.x < f64::from(self.tile_w)
            && p.y < f64::from(self.tile_h);
        if !inside {
            return Err(TilerError::OutOfTile(p));
        }
        Ok(offset + p)
    }

    /// Every tile containing `g`, with the point in that tile's local frame.
    pub fn global_to_tile(&self, g: PixelPoint) -> Result<Vec<(TileIndex, PixelPoint)>, TilerError> {
        let inside = g.x >= 0.0
            && g.y >= 0.0
            && g.x < f64::from(self.padded_w())
            && g.y < f64::from(self.padded_h());
        if !inside {
            return Err(TilerError::OutOfImage(g));
        }
        let rows = axis_hits(g.y, self.stride_y(), self.tile_h, self.rows);
        let cols = axis_hits(g.x, self.stride_x(), self.tile_w, self.cols);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &i in &rows {
            for &j in &cols {
                let idx = TileIndex::new(i, j);
                let offset = self.tile_offset(idx)?;
                out.push((idx, g - offset));
            }
        }
        Ok(out)
    }
}

/// 1-based positions along one axis whose `[start, start + tile)` span holds `v`.
fn axis_hits(v: f64, stride: u32, tile: u32, count: u32) -> Vec<u32> {
    let last = ((v / f64::from(stride)).floor() as u32).min(count - 1);
    let mut hits = Vec::new();
    let mut k = last as i64;
    while k >= 0 {
        let start = f64::from(k as u32 * stride);
        if v >= start + f64::from(tile) {
            break;
        }
        if v >= start {
            hits.push(k as u32 + 1);
        }
        k -= 1;
    }
    hits.reverse();
    hits
}

/// Crops `image` into the grid's tiles in row-major order. Pixels beyond the
/// source frame take the `fill` value.
pub fn crop_tiles(
    image: &RgbImage,
    grid: &TileGrid,
    fill: u8,
) -> Result<Vec<(TileIndex, RgbImage)>, TilerError> {
    if image.width() != grid.image_w || image.height() != grid.image_h {
        return Err(TilerError::DimensionMismatch {
            got_w: image.width(),
            got_h: image.height(),
            want_w: grid.image_w,
            want_h: grid.image_h,
        });
    }
    let indices: Vec<TileIndex> = grid.indices().collect();
    indices
        .into_par_iter()
        .map(|idx| {
            let (x0, y0) = grid.tile_origin(idx)?;
            Ok((idx, crop_one(image, x0, y0, grid.tile_w, grid.tile_h, fill)))
        })
        .collect()
}

fn crop_one(image: &RgbImage, x0: u32, y0: u32, w: u32, h: u32, fill: u8) -> RgbImage {
    let mut tile = RgbImage::from_pixel(w, h, Rgb([fill; 3]));
    let copy_w = image.width().saturating_sub(x0).min(w) as usize;
    let copy_h = image.height().saturating_sub(y0).min(h);
    let src_stride = image.width() as usize * 3;
    let dst_stride = w as usize * 3;
    let src = image.as_raw();
    let dst: &mut [u8] = &mut tile;
    for row in 0..copy_h {
        let s = (y0 + row) as usize * src_stride + x0 as usize * 3;
        let d = row as usize * dst_stride;
        dst[d..d + copy_w * 3].copy_from_slice(&src[s..s + copy_w * 3]);
    }
    tile
}

/// Pastes tiles back into a padded canvas. Later tiles overwrite earlier ones
/// where they overlap.
pub fn assemble_tiles(grid: &TileGrid, tiles: &[(TileIndex, RgbImage)]) -> Result<RgbImage, TilerError> {
    let mut canvas = RgbImage::new(grid.padded_w(), grid.padded_h());
    for (idx, tile) in tiles {
        let (x0, y0) = grid.tile_origin(*idx)?;
        image::imageops::replace(&mut canvas, tile, i64::from(x0), i64::from(y0));
    }
    Ok(canvas)
}

/// Loads an 8-bit RGB raster; other pixel layouts are rejected.
pub fn load_rgb8(path: &Path) -> Result<RgbImage, TilerError> {
    let img = image::open(path).map_err(|source| TilerError::Read {
        path: path.display().to_string(),
        source,
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(TilerError::UnsupportedRaster {
            path: path.display().to_string(),
            kind: format!("{:?}", other.color()),
        }),
    }
}

/// File name of a tile: `{stem}_r{i}_c{j}.png`.
pub fn tile_file_name(image_stem: &str, idx: TileIndex) -> String {
    format!("{image_stem}_r{}_c{}.png", idx.i, idx.j)
}

/// Crops and writes every tile of `image` into `dir`, returning the paths.
pub fn write_tiles(
    image: &RgbImage,
    grid: &TileGrid,
    fill: u8,
    image_stem: &str,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>, TilerError> {
    let tiles = crop_tiles(image, grid, fill)?;
    tiles
        .into_par_iter()
        .map(|(idx, tile)| {
            let path = dir.join(tile_file_name(image_stem, idx));
            tile.save(&path).map_err(|source| TilerError::Write {
                path: path.display().to_string(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ceil_div_oracle(image: u32, tile: u32, stride: u32) -> u32 {
        // Smallest n with (n-1)*stride + tile >= image, by counting.
        let mut n = 1;
        while (n - 1) * stride + tile < image {
            n += 1;
        }
        n
    }

    #[test]
    fn full_frame_grid_is_exact() {
        let g = plan_grid(5472, 3648, 608, 608, 0, 0).unwrap();
        assert_eq!((g.rows, g.cols, g.pad_right, g.pad_bottom), (6, 9, 0, 0));
        assert_eq!(g.tile_count(), 54);
    }

    #[test]
    fn ragged_frame_gets_padded() {
        let g = plan_grid(5000, 3000, 608, 608, 0, 0).unwrap();
        assert_eq!(g.cols, ceil_div_oracle(5000, 608, 608));
        assert_eq!(g.rows, ceil_div_oracle(3000, 608, 608));
        assert_eq!((g.cols, g.pad_right, g.rows, g.pad_bottom), (9, 472, 5, 40));
    }

    #[test]
    fn single_tile_grid() {
        let g = plan_grid(608, 608, 608, 608, 0, 0).unwrap();
        assert_eq!((g.rows, g.cols, g.pad_right, g.pad_bottom), (1, 1, 0, 0));
        let small = plan_grid(100, 50, 608, 608, 0, 0).unwrap();
        assert_eq!((small.rows, small.cols, small.pad_right, small.pad_bottom), (1, 1, 508, 558));
    }

    #[test]
    fn rejects_bad_tiles_and_overlaps() {
        assert!(matches!(plan_grid(100, 100, 600, 608, 0, 0), Err(TilerError::BadTileSize(..))));
        assert!(matches!(plan_grid(100, 100, 0, 608, 0, 0), Err(TilerError::BadTileSize(..))));
        assert!(matches!(
            plan_grid(100, 100, 608, 608, 608, 0),
            Err(TilerError::OverlapTooLarge { .. })
        ));
        assert!(matches!(plan_grid(0, 100, 608, 608, 0, 0), Err(TilerError::EmptyImage(..))));
    }

    #[test]
    fn tile_to_global_examples() {
        let g = plan_grid(5472, 3648, 608, 608, 0, 0).unwrap();
        let p = |x, y| PixelPoint::new(x, y);
        assert_eq!(g.tile_to_global(TileIndex::new(2, 3), p(10.0, 20.0)).unwrap(), p(1226.0, 628.0));
        assert_eq!(g.tile_to_global(TileIndex::new(1, 1), p(5.0, 7.0)).unwrap(), p(5.0, 7.0));
        assert_eq!(
            g.tile_to_global(TileIndex::new(6, 9), p(607.0, 607.0)).unwrap(),
            p(5471.0, 3647.0)
        );
        assert!(matches!(
            g.tile_to_global(TileIndex::new(1, 1), p(608.0, 0.0)),
            Err(TilerError::OutOfTile(_))
        ));
        assert!(matches!(
            g.tile_to_global(TileIndex::new(7, 1), p(1.0, 1.0)),
            Err(TilerError::BadTileIndex(..))
        ));
    }

    #[test]
    fn global_to_tile_examples() {
        let g = plan_grid(5472, 3648, 608, 608, 0, 0).unwrap();
        let p = |x, y| PixelPoint::new(x, y);
        assert_eq!(g.global_to_tile(p(1226.0, 628.0)).unwrap(), vec![(TileIndex::new(2, 3), p(10.0, 20.0))]);
        assert_eq!(g.global_to_tile(p(0.0, 0.0)).unwrap(), vec![(TileIndex::new(1, 1), p(0.0, 0.0))]);
        assert!(matches!(g.global_to_tile(p(5472.0, 0.0)), Err(TilerError::OutOfImage(_))));

        let o = plan_grid(5472, 3648, 608, 608, 96, 0).unwrap();
        assert_eq!(o.stride_x(), 512);
        assert_eq!(
            o.global_to_tile(p(520.0, 10.0)).unwrap(),
            vec![(TileIndex::new(1, 1), p(520.0, 10.0)), (TileIndex::new(1, 2), p(8.0, 10.0))]
        );
    }

    fn brute_force_hits(grid: &TileGrid, g: PixelPoint) -> Vec<(TileIndex, PixelPoint)> {
        grid.indices()
            .filter_map(|idx| {
                let (x0, y0) = grid.tile_origin(idx).unwrap();
                let (x0, y0) = (f64::from(x0), f64::from(y0));
                let inside = g.x >= x0
                    && g.x < x0 + f64::from(grid.tile_w)
                    && g.y >= y0
                    && g.y < y0 + f64::from(grid.tile_h);
                inside.then(|| (idx, PixelPoint::new(g.x - x0, g.y - y0)))
            })
            .collect()
    }

    #[test]
    fn crop_pads_with_fill_and_keeps_pixels() {
        let mut img = RgbImage::new(100, 70);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = Rgb([(x % 251) as u8, (y % 251) as u8, ((x + y) % 7) as u8]);
        }
        let grid = plan_grid(100, 70, 64, 32, 0, 0).unwrap();
        assert_eq!((grid.cols, grid.rows, grid.pad_right, grid.pad_bottom), (2, 3, 28, 26));
        let tiles = crop_tiles(&img, &grid, DEFAULT_PAD_FILL).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[1].0, TileIndex::new(1, 2));
        let (_, last) = &tiles[5];
        assert_eq!(last.get_pixel(35, 5), &Rgb([99, 69, 0]));
        assert_eq!(last.get_pixel(36, 5), &Rgb([114; 3]));
        assert_eq!(last.get_pixel(0, 6), &Rgb([114; 3]));

        let canvas = assemble_tiles(&grid, &tiles).unwrap();
        for (x, y, px) in img.enumerate_pixels() {
            assert_eq!(canvas.get_pixel(x, y), px);
        }
        let wrong = RgbImage::new(99, 70);
        assert!(matches!(crop_tiles(&wrong, &grid, 114), Err(TilerError::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn grid_is_minimal_and_covers(w in 1u32..4000, h in 1u32..4000, tk in 1u32..8, ov in 0u32..200) {
            let tile = tk * 32;
            let ov = ov.min(tile - 1);
            let g = plan_grid(w, h, tile, tile, ov, ov).unwrap();
            prop_assert_eq!((g.cols - 1) * g.stride_x() + g.tile_w, w + g.pad_right);
            prop_assert_eq!((g.rows - 1) * g.stride_y() + g.tile_h, h + g.pad_bottom);
            prop_assert_eq!(g.cols, ceil_div_oracle(w, tile, tile - ov));
            prop_assert_eq!(g.rows, ceil_div_oracle(h, tile, tile - ov));
            if g.cols > 1 {
                prop_assert!((g.cols - 2) * g.stride_x() + g.tile_w < w);
            }
        }

        #[test]
        fn global_to_tile_matches_brute_force(x in 0.0f64..5000.0, y in 0.0f64..3000.0, ov in 0u32..300) {
            let g = plan_grid(5000, 3000, 608, 608, ov, ov).unwrap();
            let p = PixelPoint::new(x, y);
            let hits = g.global_to_tile(p).unwrap();
            prop_assert_eq!(&hits, &brute_force_hits(&g, p));
            prop_assert!(!hits.is_empty());
            if ov == 0 {
                prop_assert_eq!(hits.len(), 1);
            }
            for (idx, local) in hits {
                prop_assert_eq!(g.tile_to_global(idx, local).unwrap(), p);
            }
        }
    }
}

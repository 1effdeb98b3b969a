//! Synthetic UAV surveys with exact ground truth.
//!
//! A survey is a set of ground markers plus a list of nadir exposures. Each
//! marker's square footprint is projected through a pinhole camera with
//! two-term radial distortion; the resulting quadrilateral is the marker's
//! true box in that image. Vertex coordinates are snapped to a 2⁻¹⁰ px
//! lattice so that sums, quarter-centroids and tile offsets stay exact in
//! `f64`.

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, MarkerClass, OrientedBox, PixelPoint};
use crate::seeding::derive_seed;

/// Truth coordinates are multiples of this step.
pub const TRUTH_LATTICE: f64 = 1.0 / 1024.0;

/// Detectability floor for marker footprints, in pixels per side.
pub const DETECTABLE_MARKER_PX: f64 = 12.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("camera distortion k1={k1}, k2={k2} folds the frame (radial map not monotone)")]
    NonInvertible { k1: f64, k2: f64 },
    #[error("invalid camera: {0}")]
    BadCamera(&'static str),
    #[error("marker {marker_id} produced an invalid box: {source}")]
    BadMarker {
        marker_id: String,
        #[source]
        source: GeometryError,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
}

/// Pinhole camera with radial distortion, flying nadir at `altitude_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub image_w: u32,
    pub image_h: u32,
    pub focal_px: f64,
    pub k1: f64,
    pub k2: f64,
    pub altitude_m: f64,
}

impl Default for CameraModel {
    /// 20 MP 1" sensor, 8.8 mm lens: 5472×3648 px with f = 3648 px.
    fn default() -> Self {
        Self {
            image_w: 5472,
            image_h: 3648,
            focal_px: 3648.0,
            k1: -0.05,
            k2: 0.01,
            altitude_m: 100.0,
        }
    }
}

impl CameraModel {
    pub fn with_altitude(&self, altitude_m: f64) -> Self {
        Self { altitude_m, ..self.clone() }
    }

    /// Ground sample distance in metres per pixel.
    pub fn gsd(&self) -> f64 {
        self.altitude_m / self.focal_px
    }

    pub fn principal_point(&self) -> PixelPoint {
        PixelPoint::new(f64::from(self.image_w) / 2.0, f64::from(self.image_h) / 2.0)
    }

    /// Normalised radius of the frame corner.
    pub fn max_radius(&self) -> f64 {
        let c = self.principal_point();
        c.x.hypot(c.y) / self.focal_px
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(SynthError::BadCamera("image dimensions must be positive"));
        }
        if !(self.focal_px > 0.0) {
            return Err(SynthError::BadCamera("focal length must be positive"));
        }
        if !(self.altitude_m > 0.0) {
            return Err(SynthError::BadCamera("altitude must be positive"));
        }
        if !self.is_invertible() {
            return Err(SynthError::NonInvertible { k1: self.k1, k2: self.k2 });
        }
        Ok(())
    }

    /// The radial map r ↦ r(1 + k1 r² + k2 r⁴) is invertible over the frame
    /// when its derivative 1 + 3k1 s + 5k2 s² (s = r²) stays positive on
    /// [0, r_max²]. The derivative is a quadratic in s, so checking the ends
    /// and the interior vertex is enough.
    pub fn is_invertible(&self) -> bool {
        let s_max = self.max_radius().powi(2);
        let deriv = |s: f64| 1.0 + 3.0 * self.k1 * s + 5.0 * self.k2 * s * s;
        let mut min = deriv(0.0).min(deriv(s_max));
        if self.k2 != 0.0 {
            let vertex = -3.0 * self.k1 / (10.0 * self.k2);
            if vertex > 0.0 && vertex < s_max {
                min = min.min(deriv(vertex));
            }
        }
        min > 0.0
    }

    fn radial_factor(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Applies radial distortion to an ideal (undistorted) pixel position.
    pub fn distort(&self, p: PixelPoint) -> Result<PixelPoint, SynthError> {
        if !self.is_invertible() {
            return Err(SynthError::NonInvertible { k1: self.k1, k2: self.k2 });
        }
        Ok(self.distort_unchecked(p))
    }

    fn distort_unchecked(&self, p: PixelPoint) -> PixelPoint {
        let c = self.principal_point();
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        let r2 = (dx * dx + dy * dy) / (self.focal_px * self.focal_px);
        let f = self.radial_factor(r2);
        PixelPoint::new(c.x + dx * f, c.y + dy * f)
    }

    /// Inverts [`distort`](Self::distort) by Newton iteration on the radius.
    pub fn undistort(&self, p: PixelPoint) -> PixelPoint {
        let c = self.principal_point();
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        let rd = dx.hypot(dy) / self.focal_px;
        if rd == 0.0 {
            return p;
        }
        let mut ru = rd;
        for _ in 0..50 {
            let r2 = ru * ru;
            let g = ru * self.radial_factor(r2) - rd;
            let dg = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2;
            let step = g / dg;
            ru -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let scale = ru / rd;
        PixelPoint::new(c.x + dx * scale, c.y + dy * scale)
    }
}

/// Side length of a square marker in pixels at `altitude_m`.
pub fn marker_pixel_size(marker_side_m: f64, altitude_m: f64, camera: &CameraModel) -> f64 {
    marker_side_m * camera.focal_px / altitude_m
}

/// Altitude above which a marker of the given side falls below
/// [`DETECTABLE_MARKER_PX`].
pub fn detectability_ceiling_m(marker_side_m: f64, camera: &CameraModel) -> f64 {
    marker_side_m * camera.focal_px / DETECTABLE_MARKER_PX
}

/// Marker side that puts 130 m at ≈26 px and 210 m at ≈16 px on the
/// default camera.
pub const DEFAULT_MARKER_SIDE_M: f64 = 0.924;

/// A physical marker on flat ground. Ground axes follow the image axes of a
/// zero-yaw nadir camera: `x` east, `y` south, metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundMarker {
    pub marker_id: String,
    pub class: MarkerClass,
    pub x_m: f64,
    pub y_m: f64,
    pub side_m: f64,
    pub rotation_rad: f64,
}

impl GroundMarker {
    fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.rotation_rad.sin_cos();
        let h = self.side_m / 2.0;
        [(-h, -h), (h, -h), (h, h), (-h, h)].map(|(u, v)| (self.x_m + u * c - v * s, self.y_m + u * s + v * c))
    }

    /// Ground point → marker frame, scaled so the marker spans [-0.5, 0.5]².
    fn to_local(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (gx - self.x_m, gy - self.y_m);
        ((dx * c + dy * s) / self.side_m, (-dx * s + dy * c) / self.side_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub image_id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub altitude_m: f64,
}

/// Everything needed to render a survey deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveySpec {
    pub camera: CameraModel,
    pub markers: Vec<GroundMarker>,
    pub exposures: Vec<Exposure>,
    /// White rectangles scattered over rendered rasters.
    pub confusers_per_image: u32,
}

/// One site of a survey: a rectangular lawnmower flight grid at constant
/// altitude with markers scattered inside the fully-covered interior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub altitude_m: f64,
    pub origin_m: (f64, f64),
    pub spacing_m: (f64, f64),
    pub grid: (u32, u32),
    pub marker_count: u32,
}

impl SiteSpec {
    /// Ground rectangle seen by every exposure footprint of the grid (with a
    /// small margin), i.e. where markers get full redundancy.
    fn interior(&self, camera: &CameraModel) -> ((f64, f64), (f64, f64)) {
        let gsd = self.altitude_m / camera.focal_px;
        let half_w = f64::from(camera.image_w) * gsd / 2.0;
        let half_h = f64::from(camera.image_h) * gsd / 2.0;
        let (ox, oy) = self.origin_m;
        let x_end = ox + f64::from(self.grid.0 - 1) * self.spacing_m.0;
        let y_end = oy + f64::from(self.grid.1 - 1) * self.spacing_m.1;
        let lo = (ox + half_w, oy + half_h);
        let hi = (x_end - half_w, y_end - half_h);
        (lo, hi)
    }
}

/// Builds a survey from a list of sites. Markers are placed uniformly in
/// each site's interior with random rotation; classes cycle through the
/// five marker types.
pub fn build_survey(
    camera: &CameraModel,
    sites: &[SiteSpec],
    marker_side_m: f64,
    confusers_per_image: u32,
    seed: u64,
) -> SurveySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["layout"]));
    let mut markers = Vec::new();
    let mut exposures = Vec::new();
    let mut class_cursor = 0usize;
    for site in sites {
        let mut k = 0u32;
        for b in 0..site.grid.1 {
            for a in 0..site.grid.0 {
                k += 1;
                exposures.push(Exposure {
                    image_id: format!("{}_{:04}", site.name, k),
                    x_m: site.origin_m.0 + f64::from(a) * site.spacing_m.0,
                    y_m: site.origin_m.1 + f64::from(b) * site.spacing_m.1,
                    altitude_m: site.altitude_m,
                });
            }
        }
        let (lo, hi) = site.interior(camera);
        let mut placed: Vec<(f64, f64)> = Vec::new();
        for m in 0..site.marker_count {
            let mut pos = (lo.0, lo.1);
            for _ in 0..1000 {
                pos = (
                    if hi.0 > lo.0 { rng.random_range(lo.0..hi.0) } else { (lo.0 + hi.0) / 2.0 },
                    if hi.1 > lo.1 { rng.random_range(lo.1..hi.1) } else { (lo.1 + hi.1) / 2.0 },
                );
                if placed.iter().all(|q| (q.0 - pos.0).hypot(q.1 - pos.1) > 5.0) {
                    break;
                }
            }
            placed.push(pos);
            markers.push(GroundMarker {
                marker_id: format!("{}_GCP{}", site.name, m + 1),
                class: MarkerClass::ALL[class_cursor % MarkerClass::ALL.len()],
                x_m: pos.0,
                y_m: pos.1,
                side_m: marker_side_m,
                rotation_rad: rng.random_range(0.0..std::f64::consts::TAU),
            });
            class_cursor += 1;
        }
    }
    SurveySpec {
        camera: camera.clone(),
        markers,
        exposures,
        confusers_per_image,
    }
}

/// Four sites, eleven markers, group sizes within 19–71 observations.
pub fn redundant_survey(seed: u64) -> SurveySpec {
    let sites = [
        SiteSpec {
            name: "S1".into(),
            altitude_m: 100.0,
            origin_m: (0.0, 0.0),
            spacing_m: (30.0, 20.0),
            grid: (9, 8),
            marker_count: 3,
        },
        SiteSpec {
            name: "S2".into(),
            altitude_m: 120.0,
            origin_m: (1000.0, 0.0),
            spacing_m: (24.0, 17.0),
            grid: (11, 10),
            marker_count: 3,
        },
        SiteSpec {
            name: "S3".into(),
            altitude_m: 80.0,
            origin_m: (2000.0, 0.0),
            spacing_m: (23.0, 19.0),
            grid: (8, 7),
            marker_count: 3,
        },
        SiteSpec {
            name: "S4".into(),
            altitude_m: 90.0,
            origin_m: (3000.0, 0.0),
            spacing_m: (20.0, 15.0),
            grid: (10, 9),
            marker_count: 2,
        },
    ];
    build_survey(&CameraModel::default(), &sites, DEFAULT_MARKER_SIDE_M, 3, seed)
}

/// One site per altitude, each with a small flight grid and `markers_per_site`
/// markers; used for altitude-band reports.
pub fn altitude_ladder(altitudes_m: &[f64], markers_per_site: u32, seed: u64) -> SurveySpec {
    let sites: Vec<SiteSpec> = altitudes_m
        .iter()
        .enumerate()
        .map(|(k, &alt)| SiteSpec {
            name: format!("A{:03}", alt.round() as i64),
            altitude_m: alt,
            origin_m: (k as f64 * 2000.0, 0.0),
            spacing_m: (0.3 * alt, 0.25 * alt),
            grid: (8, 7),
            marker_count: markers_per_site,
        })
        .collect();
    build_survey(&CameraModel::default(), &sites, DEFAULT_MARKER_SIDE_M, 0, seed)
}

/// One marker observation in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerTruth {
    pub marker_id: String,
    pub class: MarkerClass,
    pub obb: OrientedBox,
    pub gcp: PixelPoint,
    pub px_size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTruth {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub altitude_m: Option<f64>,
    pub markers: Vec<MarkerTruth>,
}

/// Ground truth for every image of a survey, including marker-free images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneTruth {
    pub images: Vec<ImageTruth>,
}

impl SceneTruth {
    pub fn image(&self, image_id: &str) -> Option<&ImageTruth> {
        self.images.iter().find(|t| t.image_id == image_id)
    }

    pub fn by_id(&self) -> HashMap<&str, &ImageTruth> {
        self.images.iter().map(|t| (t.image_id.as_str(), t)).collect()
    }

    pub fn observation_count(&self) -> usize {
        self.images.iter().map(|t| t.markers.len()).sum()
    }

    /// Number of images observing each marker.
    pub fn group_sizes(&self) -> HashMap<String, usize> {
        let mut sizes = HashMap::new();
        for m in self.images.iter().flat_map(|t| &t.markers) {
            *sizes.entry(m.marker_id.clone()).or_insert(0) += 1;
        }
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthWarning {
    /// The marker is only partly inside the frame and was left out of the truth.
    MarkerOutOfFrame { image_id: String, marker_id: String },
}

/// A rendered survey: truth is computed eagerly, rasters on demand.
#[derive(Clone, Debug)]
pub struct Survey {
    pub spec: SurveySpec,
    pub seed: u64,
    pub truth: SceneTruth,
    pub warnings: Vec<SynthWarning>,
}

fn snap(v: f64) -> f64 {
    (v / TRUTH_LATTICE).round() * TRUTH_LATTICE
}

/// Ground point seen from `exposure` → distorted pixel position.
fn project(camera: &CameraModel, exposure: &Exposure, gx: f64, gy: f64) -> PixelPoint {
    let gsd = exposure.altitude_m / camera.focal_px;
    let c = camera.principal_point();
    let ideal = PixelPoint::new(c.x + (gx - exposure.x_m) / gsd, c.y + (gy - exposure.y_m) / gsd);
    camera.distort_unchecked(ideal)
}

fn unproject(camera: &CameraModel, exposure: &Exposure, p: PixelPoint) -> (f64, f64) {
    let gsd = exposure.altitude_m / camera.focal_px;
    let c = camera.principal_point();
    let ideal = camera.undistort(p);
    (exposure.x_m + (ideal.x - c.x) * gsd, exposure.y_m + (ideal.y - c.y) * gsd)
}

/// Projects every marker into every exposure and records the truth.
pub fn render_survey(spec: &SurveySpec, seed: u64) -> Result<Survey, SynthError> {
    spec.camera.validate()?;
    let mut seen = std::collections::HashSet::new();
    for e in &spec.exposures {
        if !seen.insert(e.image_id.as_str()) {
            return Err(SynthError::DuplicateImage(e.image_id.clone()));
        }
    }
    let per_image: Vec<Result<(ImageTruth, Vec<SynthWarning>), SynthError>> = spec
        .exposures
        .par_iter()
        .map(|exposure| image_truth(spec, exposure))
        .collect();
    let mut truth = SceneTruth::default();
    let mut warnings = Vec::new();
    for item in per_image {
        let (t, w) = item?;
        truth.images.push(t);
        warnings.extend(w);
    }
    Ok(Survey {
        spec: spec.clone(),
        seed,
        truth,
        warnings,
    })
}

fn image_truth(spec: &SurveySpec, exposure: &Exposure) -> Result<(ImageTruth, Vec<SynthWarning>), SynthError> {
    let cam = &spec.camera;
    let (w, h) = (f64::from(cam.image_w), f64::from(cam.image_h));
    let gsd = exposure.altitude_m / cam.focal_px;
    let mut markers = Vec::new();
    let mut warnings = Vec::new();
    for m in &spec.markers {
        // Cheap rejection in ground units before projecting.
        let reach = m.side_m + 0.6 * w.hypot(h) * gsd;
        if (m.x_m - exposure.x_m).hypot(m.y_m - exposure.y_m) > reach {
            continue;
        }
        let pts = m.corners().map(|(gx, gy)| {
            let p = project(cam, exposure, gx, gy);
            PixelPoint::new(snap(p.x), snap(p.y))
        });
        let inside = |p: &PixelPoint| p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0;
        let n_inside = pts.iter().filter(|p| inside(p)).count();
        if n_inside == 0 {
            continue;
        }
        if n_inside < 4 {
            warnings.push(SynthWarning::MarkerOutOfFrame {
                image_id: exposure.image_id.clone(),
                marker_id: m.marker_id.clone(),
            });
            continue;
        }
        let obb = OrientedBox::canonicalize(pts).map_err(|source| SynthError::BadMarker {
            marker_id: m.marker_id.clone(),
            source,
        })?;
        markers.push(MarkerTruth {
            marker_id: m.marker_id.clone(),
            class: m.class,
            obb,
            gcp: obb.gcp_vertex(m.class),
            px_size: marker_pixel_size(m.side_m, exposure.altitude_m, cam),
        });
    }
    Ok((
        ImageTruth {
            image_id: exposure.image_id.clone(),
            width: cam.image_w,
            height: cam.image_h,
            altitude_m: Some(exposure.altitude_m),
            markers,
        },
        warnings,
    ))
}

impl Survey {
    pub fn image_count(&self) -> usize {
        self.spec.exposures.len()
    }

    /// Renders the raster of exposure `k`: seeded ground texture, optional
    /// confuser rectangles, and the visible markers in white.
    pub fn raster(&self, k: usize) -> RgbImage {
        let spec = &self.spec;
        let exposure = &spec.exposures[k];
        let truth = &self.truth.images[k];
        let cam = &spec.camera;
        let tex_seed = derive_seed(self.seed, &["texture", &exposure.image_id]);
        let mut img = RgbImage::from_fn(cam.image_w, cam.image_h, |x, y| {
            let n = crate::seeding::mix64(tex_seed ^ (u64::from(x) << 32 | u64::from(y)));
            let v = 60 + (n % 48) as u8;
            Rgb([v, v.saturating_add(8), v.saturating_sub(6)])
        });

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["confusers", &exposure.image_id]));
        for _ in 0..spec.confusers_per_image {
            let rw = rng.random_range(8..40u32);
            let rh = rng.random_range(4..20u32);
            let x0 = rng.random_range(0..cam.image_w.saturating_sub(rw).max(1));
            let y0 = rng.random_range(0..cam.image_h.saturating_sub(rh).max(1));
            for y in y0..(y0 + rh).min(cam.image_h) {
                for x in x0..(x0 + rw).min(cam.image_w) {
                    img.put_pixel(x, y, Rgb([235, 235, 230]));
                }
            }
        }

        let ground: HashMap<&str, &GroundMarker> = spec.markers.iter().map(|m| (m.marker_id.as_str(), m)).collect();
        for mt in &truth.markers {
            let gm = ground[mt.marker_id.as_str()];
            let corner = painted_corner(gm, cam, exposure, mt);
            let (lo, hi) = mt.obb.bounds();
            let x_range = (lo.x.floor().max(0.0) as u32)..=(hi.x.ceil().min(f64::from(cam.image_w - 1)) as u32);
            for y in (lo.y.floor().max(0.0) as u32)..=(hi.y.ceil().min(f64::from(cam.image_h - 1)) as u32) {
                for x in x_range.clone() {
                    let (gx, gy) = unproject(cam, exposure, PixelPoint::new(f64::from(x) + 0.5, f64::from(y) + 0.5));
                    let (u, v) = gm.to_local(gx, gy);
                    if marker_ink(u, v, corner) {
                        img.put_pixel(x, y, Rgb([245, 245, 245]));
                    }
                }
            }
        }
        img
    }
}

/// Marker-frame corner (±0.5, ±0.5) that projects onto the control point, or
/// `None` for crosses.
fn painted_corner(gm: &GroundMarker, cam: &CameraModel, exposure: &Exposure, mt: &MarkerTruth) -> Option<(f64, f64)> {
    mt.class.vertex_slot()?;
    let local = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
    gm.corners()
        .iter()
        .zip(local)
        .min_by(|(a, _), (b, _)| {
            let pa = project(cam, exposure, a.0, a.1);
            let pb = project(cam, exposure, b.0, b.1);
            pa.distance(&mt.gcp).total_cmp(&pb.distance(&mt.gcp))
        })
        .map(|(_, l)| l)
}

/// Marker shape in its own frame: L with arms 1 and 1/2 along the two edges
/// meeting at `corner`, or a centred cross. Strokes are 1/5 of the side.
fn marker_ink(u: f64, v: f64, corner: Option<(f64, f64)>) -> bool {
    if u.abs() > 0.5 || v.abs() > 0.5 {
        return false;
    }
    const STROKE: f64 = 0.2;
    match corner {
        None => u.abs() <= STROKE / 2.0 || v.abs() <= STROKE / 2.0,
        Some((cu, cv)) => {
            let du = (u - cu).abs();
            let dv = (v - cv).abs();
            (dv <= STROKE && du <= 1.0) || (du <= STROKE && dv <= 0.5)
        }
    }
}

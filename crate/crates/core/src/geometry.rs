//! Pixel-space primitives: points, marker classes and oriented boxes.
//!
//! All coordinates are image pixels with the origin at the top-left corner,
//! `x` growing to the right and `y` growing downwards. Vertices keep their
//! sub-pixel value end to end; nothing in this module rounds.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest quadrilateral area (px²) accepted as a real box.
pub const MIN_BOX_AREA: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: {0}")]
    DegenerateBox(&'static str),
    #[error("vertices do not form a simple quadrilateral")]
    SelfIntersecting,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown marker class code `{0}` (expected TL, TR, BL, BR or CR)")]
pub struct UnknownClassCode(pub String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Total order on (x, y); used wherever a permutation-independent
    /// arrangement of points is needed.
    fn lex_cmp(&self, other: &PixelPoint) -> Ordering {
        self.x.total_cmp(&other.x).then(self.y.total_cmp(&other.y))
    }
}

impl Add for PixelPoint {
    type Output = PixelPoint;
    fn add(self, rhs: PixelPoint) -> PixelPoint {
        PixelPoint::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for PixelPoint {
    type Output = PixelPoint;
    fn sub(self, rhs: PixelPoint) -> PixelPoint {
        PixelPoint::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl fmt::Display for PixelPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// The five painted marker types. The four L-shaped variants are named
/// after the box corner that holds the control point; the cross marks its
/// own centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MarkerClass {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Cross,
}

impl MarkerClass {
    pub const ALL: [MarkerClass; 5] = [
        MarkerClass::TopLeft,
        MarkerClass::TopRight,
        MarkerClass::BottomLeft,
        MarkerClass::BottomRight,
        MarkerClass::Cross,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MarkerClass::TopLeft => "TL",
            MarkerClass::TopRight => "TR",
            MarkerClass::BottomLeft => "BL",
            MarkerClass::BottomRight => "BR",
            MarkerClass::Cross => "CR",
        }
    }

    /// Index into the canonical vertex array, or `None` for the cross.
    pub fn vertex_slot(self) -> Option<usize> {
        match self {
            MarkerClass::BottomRight => Some(0),
            MarkerClass::BottomLeft => Some(1),
            MarkerClass::TopLeft => Some(2),
            MarkerClass::TopRight => Some(3),
            MarkerClass::Cross => None,
        }
    }
}

impl fmt::Display for MarkerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MarkerClass {
    type Err = UnknownClassCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TL" => Ok(MarkerClass::TopLeft),
            "TR" => Ok(MarkerClass::TopRight),
            "BL" => Ok(MarkerClass::BottomLeft),
            "BR" => Ok(MarkerClass::BottomRight),
            "CR" => Ok(MarkerClass::Cross),
            other => Err(UnknownClassCode(other.to_string())),
        }
    }
}

/// Four box vertices in canonical order.
///
/// `v1` is the bottom-right-most vertex (largest `x + y`, ties broken by the
/// larger `y`, then the larger `x`) and the remaining vertices follow
/// clockwise as seen on screen. The only way to build one is
/// [`OrientedBox::canonicalize`], so every box in the pipeline is ordered
/// the same way regardless of what the detector emitted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    vertices: [PixelPoint; 4],
}

impl OrientedBox {
    pub fn canonicalize(points: [PixelPoint; 4]) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::DegenerateBox("non-finite vertex"));
        }
        // Work from a lexicographically sorted copy so the centroid and every
        // later step depend on the vertex set only, not on input order.
        let mut pts = points;
        pts.sort_by(PixelPoint::lex_cmp);
        if pts.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeometryError::DegenerateBox("repeated vertex"));
        }

        let cx = ((pts[0].x + pts[1].x) + (pts[2].x + pts[3].x)) / 4.0;
        let cy = ((pts[0].y + pts[1].y) + (pts[2].y + pts[3].y)) / 4.0;
        let key = |p: &PixelPoint| ((p.y - cy).atan2(p.x - cx), (p.x - cx).hypot(p.y - cy));
        // Ascending atan2 with y pointing down is clockwise on screen.
        pts.sort_by(|a, b| {
            let (ta, ra) = key(a);
            let (tb, rb) = key(b);
            ta.total_cmp(&tb).then(ra.total_cmp(&rb)).then(a.lex_cmp(b))
        });

        if shoelace(&pts).abs() < MIN_BOX_AREA {
            return Err(GeometryError::DegenerateBox("area below 1e-6 px²"));
        }
        if segments_intersect(pts[0], pts[1], pts[2], pts[3])
            || segments_intersect(pts[1], pts[2], pts[3], pts[0])
        {
            return Err(GeometryError::SelfIntersecting);
        }

        let start = (0..4)
            .max_by(|&a, &b| v1_rank(&pts[a], &pts[b]))
            .expect("four vertices");
        pts.rotate_left(start);
        Ok(Self { vertices: pts })
    }

    pub fn vertices(&self) -> &[PixelPoint; 4] {
        &self.vertices
    }

    pub fn vertex(&self, slot: usize) -> PixelPoint {
        self.vertices[slot]
    }

    pub fn centroid(&self) -> PixelPoint {
        let v = &self.vertices;
        PixelPoint::new(
            ((v[0].x + v[1].x) + (v[2].x + v[3].x)) / 4.0,
            ((v[0].y + v[1].y) + (v[2].y + v[3].y)) / 4.0,
        )
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).abs()
    }

    /// Control-point position for a marker of class `class` drawn in this box.
    pub fn gcp_vertex(&self, class: MarkerClass) -> PixelPoint {
        match class.vertex_slot() {
            Some(slot) => self.vertices[slot],
            None => self.centroid(),
        }
    }

    /// Axis-aligned extent as `(min, max)`.
    pub fn bounds(&self) -> (PixelPoint, PixelPoint) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Whether `p` lies inside or on the convex hull of the vertices.
    pub fn hull_contains(&self, p: PixelPoint, tolerance: f64) -> bool {
        let hull = convex_hull(&self.vertices);
        if hull.len() < 3 {
            return false;
        }
        let area_sign = shoelace(&hull).signum();
        (0..hull.len()).all(|k| {
            let a = hull[k];
            let b = hull[(k + 1) % hull.len()];
            let len = a.distance(&b);
            cross(a, b, p) * area_sign / len >= -tolerance
        })
    }
}

/// Free-function form of [`OrientedBox::canonicalize`].
pub fn canonicalize(points: [PixelPoint; 4]) -> Result<OrientedBox, GeometryError> {
    OrientedBox::canonicalize(points)
}

/// Free-function form of [`OrientedBox::gcp_vertex`].
pub fn gcp_vertex(obb: &OrientedBox, class: MarkerClass) -> PixelPoint {
    obb.gcp_vertex(class)
}

fn v1_rank(a: &PixelPoint, b: &PixelPoint) -> Ordering {
    (a.x + a.y)
        .total_cmp(&(b.x + b.y))
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

fn shoelace(pts: &[PixelPoint]) -> f64 {
    let n = pts.len();
    let twice: f64 = (0..n)
        .map(|k| {
            let a = pts[k];
            let b = pts[(k + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum();
    twice / 2.0
}

fn cross(o: PixelPoint, a: PixelPoint, b: PixelPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(a: PixelPoint, b: PixelPoint, p: PixelPoint) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
fn segments_intersect(a: PixelPoint, b: PixelPoint, c: PixelPoint, d: PixelPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Monotone-chain hull; returns vertices in counter-clockwise (math) order.
fn convex_hull(points: &[PixelPoint]) -> Vec<PixelPoint> {
    let mut pts = points.to_vec();
    pts.sort_by(PixelPoint::lex_cmp);
    let mut lower: Vec<PixelPoint> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<PixelPoint> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

//! Oriented boxes, point clouds and the rigid-frame bookkeeping around them.
//!
//! The canonical frame of a box has its origin at the box center, `+x` along
//! the heading (the length axis), `+y` along the width axis and `+z` up.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSize {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

/// Oriented 3D box: center, `(w, l, h)` size and yaw about `+z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: BoxSize,
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], w: f64, l: f64, h: f64, heading: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(Error::DegenerateBox(format!("size ({w}, {l}, {h})")));
        }
        if !center.iter().all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(Error::NonFinite("box parameters".into()));
        }
        Ok(Self {
            center,
            size: BoxSize { w, l, h },
            heading: normalize_angle(heading),
        })
    }

    pub fn volume(&self) -> f64 {
        self.size.w * self.size.l * self.size.h
    }

    /// Half extents along the canonical axes `(x, y, z) = (l, w, h) / 2`.
    pub fn half_extents(&self) -> [f64; 3] {
        [self.size.l / 2.0, self.size.w / 2.0, self.size.h / 2.0]
    }

    /// Extents along the canonical axes `(l, w, h)`.
    pub fn canonical_extents(&self) -> [f64; 3] {
        [self.size.l, self.size.w, self.size.h]
    }

    /// World point → canonical frame.
    pub fn to_canonical(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.heading.sin_cos();
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Canonical frame point → world.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.heading.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }

    /// Whether `p` lies inside or on the boundary.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_canonical(p);
        let h = self.half_extents();
        q[0].abs() <= h[0] && q[1].abs() <= h[1] && q[2].abs() <= h[2]
    }

    /// Bird's-eye-view corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let [hx, hy, _] = self.half_extents();
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[x, y]| {
            let w = self.to_world([x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    /// Same box expressed in the canonical frame of `frame`.
    pub fn relative_to(&self, frame: &Box3D) -> Box3D {
        Box3D {
            center: frame.to_canonical(self.center),
            size: self.size,
            heading: normalize_angle(self.heading - frame.heading),
        }
    }

    /// Inverse of [`Box3D::relative_to`].
    pub fn from_relative(&self, frame: &Box3D) -> Box3D {
        Box3D {
            center: frame.to_world(self.center),
            size: self.size,
            heading: normalize_angle(self.heading + frame.heading),
        }
    }

    pub fn with_size(&self, size: BoxSize) -> Box3D {
        Box3D { size, ..*self }
    }
}

/// `Ṅ×3` point set in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_points(&self.points)
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Four-degree-of-freedom rigid update between consecutive frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Motion4DOF {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtheta: f64,
}

impl Motion4DOF {
    pub fn new(dx: f64, dy: f64, dz: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dy,
            dz,
            dtheta: normalize_angle(dtheta),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.dx, self.dy, self.dz, self.dtheta]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Motion that carries `from` onto `to`, expressed in `from`'s frame.
    pub fn between(from: &Box3D, to: &Box3D) -> Self {
        let c = from.to_canonical(to.center);
        Self::new(c[0], c[1], c[2], to.heading - from.heading)
    }
}

/// Per-point target probabilities in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetnessMask {
    values: Vec<f64>,
}

impl TargetnessMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(len: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            values: vec![value; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Binary mask of the points inside (or on) `bx`.
pub fn points_in_box(cloud: &PointCloud, bx: &Box3D) -> TargetnessMask {
    TargetnessMask {
        values: cloud
            .points()
            .iter()
            .map(|&p| if bx.contains(p) { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Applies `motion` (translation in `bx`'s canonical frame) to `bx`.
pub fn apply_motion(bx: &Box3D, motion: &Motion4DOF) -> Box3D {
    let center = bx.to_world([motion.dx, motion.dy, motion.dz]);
    Box3D {
        center,
        size: bx.size,
        heading: normalize_angle(bx.heading + motion.dtheta),
    }
}

/// Expresses `cloud` in the canonical frame of `bx`.
pub fn canonicalize(cloud: &PointCloud, bx: &Box3D) -> PointCloud {
    cloud.map(|p| bx.to_canonical(p))
}

/// Inverse of [`canonicalize`].
pub fn decanonicalize(cloud: &PointCloud, bx: &Box3D) -> PointCloud {
    cloud.map(|p| bx.to_world(p))
}

/// Fixed-size canonical crop around the previous box.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRegion {
    pub points: PointCloud,
    /// No input point fell inside the enlarged box.
    pub empty: bool,
    /// Number of distinct input points that fell inside.
    pub source_count: usize,
}

/// Keeps the points inside `prev_box` grown by `margin` on every side, in the
/// box frame, resampled to exactly `target_count` points.
pub fn crop_search_region(
    cloud: &PointCloud,
    prev_box: &Box3D,
    margin: f64,
    target_count: usize,
    rng: &mut impl Rng,
) -> Result<SearchRegion> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidInput(format!("negative margin {margin}")));
    }
    if target_count == 0 {
        return Err(Error::InvalidInput(
            "target_count must be at least 1".into(),
        ));
    }
    let h = prev_box.half_extents();
    let lim = [h[0] + margin, h[1] + margin, h[2] + margin];
    let mut inside: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|&p| prev_box.to_canonical(p))
        .filter(|q| q[0].abs() <= lim[0] && q[1].abs() <= lim[1] && q[2].abs() <= lim[2])
        .collect();
    let source_count = inside.len();
    if inside.is_empty() {
        return Ok(SearchRegion {
            points: PointCloud {
                points: vec![[0.0; 3]; target_count],
            },
            empty: true,
            source_count,
        });
    }
    inside.shuffle(rng);
    if inside.len() >= target_count {
        inside.truncate(target_count);
    } else {
        let n = inside.len();
        for _ in n..target_count {
            let j = rng.random_range(0..n);
            inside.push(inside[j]);
        }
    }
    Ok(SearchRegion {
        points: PointCloud { points: inside },
        empty: false,
        source_count,
    })
}

#[inline]
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the point closest to the origin (lowest index on ties).
pub fn nearest_to_origin(points: &[[f64; 3]]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(p, [0.0; 3]);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy max-min subset selection starting from `start`; ties go to the
/// lowest index.
pub fn farthest_point_sampling(points: &[[f64; 3]], n: usize, start: usize) -> Vec<usize> {
    let total = points.len();
    let n = n.min(total);
    if n == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; total];
    let mut current = start;
    for _ in 0..n {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    chosen
}

/// For each query, the `k` nearest points (ascending distance, lowest index on
/// ties), flattened query-major.
pub fn knn(queries: &[[f64; 3]], points: &[[f64; 3]], k: usize) -> Vec<usize> {
    assert!(
        k <= points.len(),
        "knn: k={k} exceeds {} points",
        points.len()
    );
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &q in queries {
        scratch.clear();
        scratch.extend(points.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Exact intersection-over-union of two oriented boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return Err(Error::DegenerateBox("zero-volume box in IoU".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    let inter_bev = polygon_area(&clip_convex_polygon(&a.bev_corners(), &b.bev_corners()));
    let top = (a.center[2] + a.size.h / 2.0).min(b.center[2] + b.size.h / 2.0);
    let bottom = (a.center[2] - a.size.h / 2.0).max(b.center[2] - b.size.h / 2.0);
    let inter = inter_bev * (top - bottom).max(0.0);
    let union = va + vb - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    dist2(a.center, b.center).sqrt()
}

//! Oriented 3D box algebra: canonical transforms, point-in-box masks,
//! rotated IoU via birds-eye polygon clipping, and cross-frame point
//! correspondences between canonicalized foreground points.
//!
//! Everything here is a pure function over plain `f64` data; none of it
//! participates in gradient computation.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("box size must be positive, got ({0}, {1}, {2})")]
    BadSize(f64, f64, f64),
    #[error("heading must be finite")]
    BadHeading,
    #[error("correspondence window needs at least 2 frames, got {0}")]
    WindowTooShort(usize),
    #[error("foreground index {index} out of range for frame with {len} points")]
    BadIndex { index: usize, len: usize },
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % TAU;
    if x <= -PI {
        x += TAU;
    } else if x > PI {
        x -= TAU;
    }
    x
}

/// Oriented box: center, heading about the up-axis, and (w, l, h) size.
/// The size is fixed for the lifetime of a tracked sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub heading: f64,
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], heading: f64, size: [f64; 3]) -> Result<Self, GeomError> {
        if !(size[0] > 0.0 && size[1] > 0.0 && size[2] > 0.0) {
            return Err(GeomError::BadSize(size[0], size[1], size[2]));
        }
        if !heading.is_finite() {
            return Err(GeomError::BadHeading);
        }
        Ok(Self {
            center,
            heading: wrap_angle(heading),
            size,
        })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Same box moved by `delta` and rotated by `dtheta` about its center.
    pub fn shifted(&self, delta: [f64; 3], dtheta: f64) -> Self {
        Self {
            center: [
                self.center[0] + delta[0],
                self.center[1] + delta[1],
                self.center[2] + delta[2],
            ],
            heading: wrap_angle(self.heading + dtheta),
            size: self.size,
        }
    }
}

/// Rotation about the up-axis for canonicalization, used as
/// `canonical = (p − center) · R` with points as row vectors.
/// Canonical x runs along the box length, y along the width, z up.
pub fn heading_rotation(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rotate_row(p: [f64; 3], r: &[[f64; 3]; 3]) -> [f64; 3] {
    [
        p[0] * r[0][0] + p[1] * r[1][0] + p[2] * r[2][0],
        p[0] * r[0][1] + p[1] * r[1][1] + p[2] * r[2][1],
        p[0] * r[0][2] + p[1] * r[1][2] + p[2] * r[2][2],
    ]
}

/// Express one point in the box frame.
pub fn canonicalize_point(p: [f64; 3], b: &Box3D) -> [f64; 3] {
    let r = heading_rotation(b.heading);
    rotate_row(
        [
            p[0] - b.center[0],
            p[1] - b.center[1],
            p[2] - b.center[2],
        ],
        &r,
    )
}

/// Express points in the box frame; the box center maps to the origin.
pub fn canonicalize(points: &[[f64; 3]], b: &Box3D) -> Vec<[f64; 3]> {
    let r = heading_rotation(b.heading);
    points
        .iter()
        .map(|p| {
            rotate_row(
                [
                    p[0] - b.center[0],
                    p[1] - b.center[1],
                    p[2] - b.center[2],
                ],
                &r,
            )
        })
        .collect()
}

fn inside_canonical(c: [f64; 3], b: &Box3D) -> bool {
    // boundary inclusive, so degenerate surface points count as foreground
    c[0].abs() <= b.length() / 2.0 && c[1].abs() <= b.width() / 2.0 && c[2].abs() <= b.height() / 2.0
}

/// 1 for points inside the box (boundary inclusive), 0 elsewhere.
pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> Vec<u8> {
    let r = heading_rotation(b.heading);
    points
        .iter()
        .map(|p| {
            let c = rotate_row(
                [
                    p[0] - b.center[0],
                    p[1] - b.center[1],
                    p[2] - b.center[2],
                ],
                &r,
            );
            u8::from(inside_canonical(c, b))
        })
        .collect()
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let dz = a.center[2] - b.center[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

// ── Rotated IoU ────────────────────────────────────────────────────────

const AREA_EPS: f64 = 1e-12;

/// Birds-eye corners in counter-clockwise order.
fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.heading.sin_cos();
    let hl = b.length() / 2.0;
    let hw = b.width() / 2.0;
    let canonical = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 2]; 4];
    for (i, [x, y]) in canonical.into_iter().enumerate() {
        // world = center + canonical · Rᵀ
        out[i] = [
            b.center[0] + x * c - y * s,
            b.center[1] + x * s + y * c,
        ];
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Clip `subject` against the half-plane left of the directed edge a→b.
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let sc = side(cur);
        let sp = side(prev);
        if sc >= 0.0 {
            if sp < 0.0 {
                out.push(intersect(prev, cur, a, b));
            }
            out.push(cur);
        } else if sp >= 0.0 {
            out.push(intersect(prev, cur, a, b));
        }
    }
    out
}

fn intersect(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    let t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom;
    [p1[0] + t * d1[0], p1[1] + t * d1[1]]
}

/// Intersection area of two convex polygons (Sutherland–Hodgman).
fn convex_intersection_area(subject: &[[f64; 2]; 4], clip: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// Rotated-box IoU: birds-eye intersection area times vertical overlap,
/// divided by the union volume. Degenerate clips (area < 1e-12) count as 0.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let mut area = convex_intersection_area(&bev_corners(a), &bev_corners(b));
    if area < AREA_EPS {
        area = 0.0;
    }
    let za = (a.center[2] - a.height() / 2.0, a.center[2] + a.height() / 2.0);
    let zb = (b.center[2] - b.height() / 2.0, b.center[2] + b.height() / 2.0);
    let overlap = (za.1.min(zb.1) - za.0.max(zb.0)).max(0.0);
    let inter = area * overlap;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

// ── Cross-frame correspondences ────────────────────────────────────────

/// One nearest-neighbor match between canonicalized foreground points of
/// frame `t` and a strictly later frame `t_future`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub t: usize,
    pub i: usize,
    pub t_future: usize,
    pub j: usize,
    pub distance: f64,
}

/// All reliable matches for one training window.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Frame view used for correspondence building: points, the ground-truth
/// box, and the indices of foreground points within `points`.
pub struct CorrFrame<'a> {
    pub points: &'a [[f64; 3]],
    pub gt_box: Box3D,
    pub fg_indices: &'a [usize],
}

/// Match every foreground point of frame `t` to its nearest canonical
/// foreground point in every future frame `t' > t`; keep matches strictly
/// below `tau_dist`. Indices refer to the original point arrays.
pub fn build_correspondences(
    frames: &[CorrFrame<'_>],
    tau_dist: f64,
) -> Result<CorrespondenceSet, GeomError> {
    if frames.len() < 2 {
        return Err(GeomError::WindowTooShort(frames.len()));
    }
    let mut canonical: Vec<Vec<[f64; 3]>> = Vec::with_capacity(frames.len());
    for f in frames {
        for &i in f.fg_indices {
            if i >= f.points.len() {
                return Err(GeomError::BadIndex {
                    index: i,
                    len: f.points.len(),
                });
            }
        }
        let pts: Vec<[f64; 3]> = f.fg_indices.iter().map(|&i| f.points[i]).collect();
        canonical.push(canonicalize(&pts, &f.gt_box));
    }

    let mut set = CorrespondenceSet::default();
    for t in 0..frames.len() {
        for tf in t + 1..frames.len() {
            if canonical[tf].is_empty() {
                continue;
            }
            for (a, &pi) in canonical[t].iter().zip(frames[t].fg_indices) {
                let mut best = (f64::INFINITY, 0usize);
                for (b, &pj) in canonical[tf].iter().zip(frames[tf].fg_indices) {
                    let d = dist3(*a, *b);
                    if d < best.0 {
                        best = (d, pj);
                    }
                }
                if best.0 < tau_dist {
                    set.entries.push(Correspondence {
                        t,
                        i: pi,
                        t_future: tf,
                        j: best.1,
                        distance: best.0,
                    });
                }
            }
        }
    }
    Ok(set)
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

//! Deterministic synthetic LiDAR-style sequences and the line-oriented
//! sequence file format.
//!
//! Targets are point-sampled parametric surfaces (no mesh assets), moved
//! along waypoint paths with per-frame angular occlusion, distractor
//! instances, uniform clutter, and Gaussian jitter. Everything is a pure
//! function of the spec, including its seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::{points_in_box, wrap_angle, Box3D};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
    #[error("no visible target point inside the first-frame box")]
    NoForegroundAtStart,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("file truncated at line {line}: missing {section}")]
    Truncated { line: usize, section: String },
}

/// Target surface family. Doubles as the sequence category label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    CarShell,
    PedestrianCylinders,
    CyclistComposite,
}

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::CarShell => "car",
            Archetype::PedestrianCylinders => "pedestrian",
            Archetype::CyclistComposite => "cyclist",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "car" => Some(Archetype::CarShell),
            "pedestrian" => Some(Archetype::PedestrianCylinders),
            "cyclist" => Some(Archetype::CyclistComposite),
            _ => None,
        }
    }

    /// Box size (w, l, h) in meters, fixed per sequence.
    pub fn box_size(self) -> [f64; 3] {
        match self {
            Archetype::CarShell => [1.8, 4.2, 1.5],
            Archetype::PedestrianCylinders => [0.7, 0.7, 1.75],
            Archetype::CyclistComposite => [0.8, 1.8, 1.8],
        }
    }
}

/// Target surface points per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityProfile {
    Constant(usize),
    /// Linear ramp from `start` at frame 1 to `end` at frame T.
    Linear { start: usize, end: usize },
}

impl DensityProfile {
    fn at(&self, t: usize, frames: usize) -> usize {
        match *self {
            DensityProfile::Constant(n) => n,
            DensityProfile::Linear { start, end } => {
                if frames <= 1 {
                    return start;
                }
                let u = t as f64 / (frames - 1) as f64;
                (start as f64 + (end as f64 - start as f64) * u).round() as usize
            }
        }
    }

    fn max(&self, frames: usize) -> usize {
        (0..frames).map(|t| self.at(t, frames)).max().unwrap_or(0)
    }
}

/// Fraction of the target's angular extent hidden per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcclusionSchedule {
    None,
    Constant(f64),
    /// Hidden sector of `fraction` active every other `period` frames.
    Pulsed { period: usize, fraction: f64 },
}

impl OcclusionSchedule {
    fn at(&self, t: usize) -> f64 {
        match *self {
            OcclusionSchedule::None => 0.0,
            OcclusionSchedule::Constant(f) => f,
            OcclusionSchedule::Pulsed { period, fraction } => {
                if period == 0 {
                    return 0.0;
                }
                if (t / period) % 2 == 1 {
                    fraction
                } else {
                    0.0
                }
            }
        }
    }

    fn valid(&self) -> bool {
        let f = match *self {
            OcclusionSchedule::None => return true,
            OcclusionSchedule::Constant(f) => f,
            OcclusionSchedule::Pulsed { fraction, .. } => fraction,
        };
        (0.0..1.0).contains(&f)
    }
}

/// Everything that defines one synthetic sequence.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub archetype: Archetype,
    pub frames: usize,
    /// Path waypoints: position plus heading. One waypoint means static.
    pub waypoints: Vec<([f64; 3], f64)>,
    pub density: DensityProfile,
    pub occlusion: OcclusionSchedule,
    pub distractors: usize,
    /// Uniform background points per frame.
    pub clutter: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// One timestep: points, the ground-truth box, and the stored mask.
/// The mask always equals `points_in_box(points, gt_box)`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub points: Vec<[f64; 3]>,
    pub gt_box: Box3D,
    pub gt_mask: Vec<u8>,
}

/// An ordered list of frames with a fixed box size.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub category: Archetype,
    pub size: [f64; 3],
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Content-derived key for reproducible per-frame reseeding.
    pub fn content_key(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV offset basis
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        eat(self.frames.len() as u64);
        for s in self.size {
            eat(s.to_bits());
        }
        if let Some(first) = self.frames.first() {
            for c in first.gt_box.center {
                eat(c.to_bits());
            }
            eat(first.gt_box.heading.to_bits());
            eat(first.points.len() as u64);
        }
        h
    }
}

/// splitmix64 step, used to derive independent seeds from one master seed.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ── Surface templates ───────────────────────────────────────────────────

fn sample_rect(r: &mut ChaCha8Rng, c: [f64; 3], ax: [f64; 3], ay: [f64; 3]) -> [f64; 3] {
    let u = r.random_range(-1.0..1.0);
    let v = r.random_range(-1.0..1.0);
    [
        c[0] + u * ax[0] + v * ay[0],
        c[1] + u * ax[1] + v * ay[1],
        c[2] + u * ax[2] + v * ay[2],
    ]
}

fn sample_cylinder(r: &mut ChaCha8Rng, radius: f64, z0: f64, z1: f64) -> [f64; 3] {
    let a = r.random_range(0.0..std::f64::consts::TAU);
    let z = r.random_range(z0..z1);
    [radius * a.cos(), radius * a.sin(), z]
}

fn sample_sphere(r: &mut ChaCha8Rng, radius: f64, cz: f64) -> [f64; 3] {
    let z: f64 = r.random_range(-1.0..1.0);
    let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    [radius * s * a.cos(), radius * s * a.sin(), cz + radius * z]
}

/// Canonical-pose surface points for one archetype instance.
fn sample_template(archetype: Archetype, count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(count);
    match archetype {
        Archetype::CarShell => {
            // shell of the box, no bottom face, inset so jitter-free
            // points stay inside the ground-truth box
            let (hl, hw, hh) = (2.1 * 0.96, 0.9 * 0.96, 0.75 * 0.96);
            let top = hl * hw;
            let side = hl * hh;
            let end = hw * hh;
            let total = top + 2.0 * side + 2.0 * end;
            for _ in 0..count {
                let u = rng.random_range(0.0..total);
                let p = if u < top {
                    sample_rect(rng, [0.0, 0.0, hh], [hl, 0.0, 0.0], [0.0, hw, 0.0])
                } else if u < top + 2.0 * side {
                    let sign = if u < top + side { 1.0 } else { -1.0 };
                    sample_rect(rng, [0.0, sign * hw, 0.0], [hl, 0.0, 0.0], [0.0, 0.0, hh])
                } else {
                    let sign = if u < top + 2.0 * side + end { 1.0 } else { -1.0 };
                    sample_rect(rng, [sign * hl, 0.0, 0.0], [0.0, hw, 0.0], [0.0, 0.0, hh])
                };
                pts.push(p);
            }
        }
        Archetype::PedestrianCylinders => {
            for _ in 0..count {
                if rng.random_range(0.0..1.0) < 0.75 {
                    pts.push(sample_cylinder(rng, 0.28, -0.85, 0.40));
                } else {
                    pts.push(sample_sphere(rng, 0.20, 0.62));
                }
            }
        }
        Archetype::CyclistComposite => {
            for _ in 0..count {
                if rng.random_range(0.0..1.0) < 0.55 {
                    pts.push(sample_cylinder(rng, 0.28, -0.05, 0.85));
                } else {
                    // bike slab under the rider
                    pts.push(sample_rect(
                        rng,
                        [0.0, 0.0, -0.55],
                        [0.82, 0.0, 0.0],
                        [0.0, 0.06, 0.0],
                    ));
                    if let Some(last) = pts.last_mut() {
                        last[2] += rng.random_range(-0.28..0.28);
                    }
                }
            }
        }
    }
    pts
}

// ── Path interpolation ──────────────────────────────────────────────────

/// Pose (position, heading) at each frame along the waypoint polyline,
/// with equal frame counts per segment and wrap-aware heading blending.
fn interpolate_path(
    waypoints: &[([f64; 3], f64)],
    frames: usize,
) -> Result<Vec<([f64; 3], f64)>, SynthError> {
    if waypoints.is_empty() {
        return Err(SynthError::BadSpec("waypoints must not be empty".into()));
    }
    if waypoints.len() == 1 || frames == 1 {
        return Ok(vec![waypoints[0]; frames]);
    }
    let segments = waypoints.len() - 1;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let u = t as f64 / (frames - 1) as f64 * segments as f64;
        let i = (u.floor() as usize).min(segments - 1);
        let frac = u - i as f64;
        let (p0, h0) = waypoints[i];
        let (p1, h1) = waypoints[i + 1];
        let pos = [
            p0[0] + (p1[0] - p0[0]) * frac,
            p0[1] + (p1[1] - p0[1]) * frac,
            p0[2] + (p1[2] - p0[2]) * frac,
        ];
        let heading = wrap_angle(h0 + wrap_angle(h1 - h0) * frac);
        out.push((pos, heading));
    }
    Ok(out)
}

fn to_world(canonical: [f64; 3], pose: ([f64; 3], f64)) -> [f64; 3] {
    let (c, heading) = pose;
    let (s, co) = heading.sin_cos();
    [
        c[0] + canonical[0] * co - canonical[1] * s,
        c[1] + canonical[0] * s + canonical[1] * co,
        c[2] + canonical[2],
    ]
}

// ── Generation ──────────────────────────────────────────────────────────

pub fn generate_sequence(spec: &GeneratorSpec) -> Result<Sequence, SynthError> {
    if spec.frames < 2 {
        return Err(SynthError::TooFewFrames(spec.frames));
    }
    if !spec.occlusion.valid() {
        return Err(SynthError::BadSpec(
            "occlusion fraction must lie in [0, 1)".into(),
        ));
    }
    if spec.noise_sigma < 0.0 {
        return Err(SynthError::BadSpec("noise_sigma must be >= 0".into()));
    }
    if spec.density.max(spec.frames) == 0 {
        return Err(SynthError::BadSpec("density must be positive".into()));
    }

    let size = spec.archetype.box_size();
    let poses = interpolate_path(&spec.waypoints, spec.frames)?;

    let mut template_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1));
    let template = sample_template(
        spec.archetype,
        spec.density.max(spec.frames),
        &mut template_rng,
    );

    // distractor templates and their fixed lateral offsets
    let mut distractor_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2));
    let mut distractors = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let count = (template.len() * 3 / 5).max(1);
        let tpl = sample_template(spec.archetype, count, &mut distractor_rng);
        let angle = distractor_rng.random_range(0.0..std::f64::consts::TAU);
        let dist = distractor_rng.random_range(2.5..5.0);
        let phase = distractor_rng.random_range(-0.6..0.6);
        let offset = [dist * angle.cos(), dist * angle.sin(), 0.0];
        distractors.push((tpl, offset, phase));
    }

    // clutter bounds from the waypoint envelope
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (p, _) in &spec.waypoints {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 8.0;
    let zc = spec.waypoints[0].0[2];

    let mut occlusion_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 3));
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 4));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 5));
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma validated");

    let mut frames = Vec::with_capacity(spec.frames);
    for (t, pose) in poses.iter().enumerate() {
        let n_t = spec.density.at(t, spec.frames).min(template.len());
        let occl = spec.occlusion.at(t);
        let sector_start = occlusion_rng.random_range(0.0..std::f64::consts::TAU);
        let sector = occl * std::f64::consts::TAU;

        let mut points: Vec<[f64; 3]> = Vec::new();
        for p in template.iter().take(n_t) {
            if occl > 0.0 {
                let az = p[1].atan2(p[0]);
                let rel = (az - sector_start).rem_euclid(std::f64::consts::TAU);
                if rel < sector {
                    continue;
                }
            }
            points.push(to_world(*p, *pose));
        }

        for (tpl, offset, phase) in &distractors {
            let dpose = (
                [
                    pose.0[0] + offset[0],
                    pose.0[1] + offset[1],
                    pose.0[2] + offset[2],
                ],
                wrap_angle(pose.1 + phase),
            );
            for p in tpl {
                points.push(to_world(*p, dpose));
            }
        }

        for _ in 0..spec.clutter {
            points.push([
                clutter_rng.random_range(lo[0] - margin..hi[0] + margin),
                clutter_rng.random_range(lo[1] - margin..hi[1] + margin),
                clutter_rng.random_range(zc - 1.5..zc + 2.5),
            ]);
        }

        if spec.noise_sigma > 0.0 {
            for p in &mut points {
                for c in p.iter_mut() {
                    *c += normal.sample(&mut noise_rng);
                }
            }
        }

        let gt_box = Box3D::new(pose.0, pose.1, size).expect("archetype sizes are positive");
        let gt_mask = points_in_box(&points, &gt_box);
        frames.push(Frame {
            points,
            gt_box,
            gt_mask,
        });
    }

    if frames[0].gt_mask.iter().all(|m| *m == 0) {
        return Err(SynthError::NoForegroundAtStart);
    }

    Ok(Sequence {
        category: spec.archetype,
        size,
        frames,
    })
}

// ── Suite generation ────────────────────────────────────────────────────

/// Batch of sequences with randomized paths, driven by one master seed.
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub sequences: usize,
    pub archetypes: Vec<Archetype>,
    pub frames: usize,
    pub density: usize,
    pub occlusion: f64,
    pub occlusion_period: usize,
    pub distractors: usize,
    pub clutter: usize,
    pub noise_sigma: f64,
    /// Target speed in meters per frame; 0 for static targets.
    pub speed: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            sequences: 20,
            archetypes: vec![
                Archetype::CarShell,
                Archetype::PedestrianCylinders,
                Archetype::CyclistComposite,
            ],
            frames: 24,
            density: 160,
            occlusion: 0.4,
            occlusion_period: 4,
            distractors: 1,
            clutter: 60,
            noise_sigma: 0.01,
            speed: 0.15,
            seed: 17,
        }
    }
}

/// Parse a suite spec from `key = value` lines over the defaults.
pub fn parse_suite_spec(text: &str) -> Result<SuiteSpec, SynthError> {
    let mut spec = SuiteSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| SynthError::Parse {
            line,
            message: format!("expected 'key = value', got '{raw}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |line| SynthError::Parse {
            line,
            message: format!("cannot parse value '{value}' for key '{key}'"),
        };
        match key {
            "sequences" => spec.sequences = value.parse().map_err(|_| bad(line))?,
            "archetypes" => {
                let mut list = Vec::new();
                for name in value.split(',') {
                    let name = name.trim();
                    list.push(Archetype::from_name(name).ok_or_else(|| SynthError::Parse {
                        line,
                        message: format!("unknown archetype '{name}'"),
                    })?);
                }
                if list.is_empty() {
                    return Err(SynthError::Parse {
                        line,
                        message: "archetypes list is empty".into(),
                    });
                }
                spec.archetypes = list;
            }
            "frames" => spec.frames = value.parse().map_err(|_| bad(line))?,
            "density" => spec.density = value.parse().map_err(|_| bad(line))?,
            "occlusion" => spec.occlusion = value.parse().map_err(|_| bad(line))?,
            "occlusion_period" => spec.occlusion_period = value.parse().map_err(|_| bad(line))?,
            "distractors" => spec.distractors = value.parse().map_err(|_| bad(line))?,
            "clutter" => spec.clutter = value.parse().map_err(|_| bad(line))?,
            "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad(line))?,
            "speed" => spec.speed = value.parse().map_err(|_| bad(line))?,
            "seed" => spec.seed = value.parse().map_err(|_| bad(line))?,
            _ => {
                return Err(SynthError::Parse {
                    line,
                    message: format!("unknown key '{key}'"),
                })
            }
        }
    }
    Ok(spec)
}

/// Generate the suite; names are `<category>_<index>`.
pub fn generate_suite(suite: &SuiteSpec) -> Result<Vec<(String, Sequence)>, SynthError> {
    let mut out = Vec::with_capacity(suite.sequences);
    for i in 0..suite.sequences {
        let archetype = suite.archetypes[i % suite.archetypes.len()];
        let seed = mix_seed(suite.seed, 1000 + i as u64);
        let mut path_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 11));
        let start = [
            path_rng.random_range(-6.0..6.0),
            path_rng.random_range(-6.0..6.0),
            0.0,
        ];
        let waypoints = if suite.speed <= 0.0 {
            let heading = path_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            vec![(start, heading)]
        } else {
            let heading = path_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let turn = path_rng.random_range(-0.7..0.7);
            let half = suite.speed * suite.frames as f64 / 2.0;
            let mid = [
                start[0] + half * heading.cos(),
                start[1] + half * heading.sin(),
                0.0,
            ];
            let h2 = heading + turn;
            let end = [mid[0] + half * h2.cos(), mid[1] + half * h2.sin(), 0.0];
            vec![(start, heading), (mid, heading), (end, h2)]
        };
        let spec = GeneratorSpec {
            archetype,
            frames: suite.frames,
            waypoints,
            density: DensityProfile::Constant(suite.density),
            occlusion: if suite.occlusion > 0.0 {
                OcclusionSchedule::Pulsed {
                    period: suite.occlusion_period.max(1),
                    fraction: suite.occlusion,
                }
            } else {
                OcclusionSchedule::None
            },
            distractors: suite.distractors,
            clutter: suite.clutter,
            noise_sigma: suite.noise_sigma,
            seed,
        };
        let seq = generate_sequence(&spec)?;
        out.push((format!("{}_{:03}", archetype.name(), i), seq));
    }
    Ok(out)
}

// ── File format ─────────────────────────────────────────────────────────

/// Render a sequence in the line-oriented text format:
///
/// ```text
/// SEQ v1 <category> <T> <w> <l> <h>
/// FRAME <t> <n> <cx> <cy> <cz> <theta>
/// <x> <y> <z> <mask-bit>      (n lines)
/// ```
///
/// Floats use the shortest decimal that round-trips exactly.
pub fn format_sequence(seq: &Sequence) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "SEQ v1 {} {} {} {} {}",
        seq.category.name(),
        seq.frames.len(),
        seq.size[0],
        seq.size[1],
        seq.size[2]
    );
    for (t, f) in seq.frames.iter().enumerate() {
        let _ = writeln!(
            s,
            "FRAME {} {} {} {} {} {}",
            t + 1,
            f.points.len(),
            f.gt_box.center[0],
            f.gt_box.center[1],
            f.gt_box.center[2],
            f.gt_box.heading
        );
        for (p, m) in f.points.iter().zip(&f.gt_mask) {
            let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], m);
        }
    }
    s
}

pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<(), SynthError> {
    fs::write(path, format_sequence(seq)).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a sequence. Returns the sequence plus warnings for stored masks
/// that disagree with the box (the mask is recomputed in that case).
pub fn parse_sequence(text: &str) -> Result<(Sequence, Vec<String>), SynthError> {
    let mut lines = text.lines().enumerate();
    let (lineno, header) = lines.next().ok_or(SynthError::Truncated {
        line: 1,
        section: "SEQ header".into(),
    })?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 7 || toks[0] != "SEQ" || toks[1] != "v1" {
        return Err(SynthError::Parse {
            line: lineno + 1,
            message: format!("expected 'SEQ v1 <category> <T> <w> <l> <h>', got '{header}'"),
        });
    }
    let category = Archetype::from_name(toks[2]).ok_or_else(|| SynthError::Parse {
        line: lineno + 1,
        message: format!("unknown category '{}'", toks[2]),
    })?;
    let parse_f = |line: usize, s: &str| -> Result<f64, SynthError> {
        s.parse().map_err(|_| SynthError::Parse {
            line,
            message: format!("cannot parse number '{s}'"),
        })
    };
    let parse_u = |line: usize, s: &str| -> Result<usize, SynthError> {
        s.parse().map_err(|_| SynthError::Parse {
            line,
            message: format!("cannot parse count '{s}'"),
        })
    };
    let t_count = parse_u(lineno + 1, toks[3])?;
    let size = [
        parse_f(lineno + 1, toks[4])?,
        parse_f(lineno + 1, toks[5])?,
        parse_f(lineno + 1, toks[6])?,
    ];
    if size.iter().any(|s| *s <= 0.0) {
        return Err(SynthError::Parse {
            line: lineno + 1,
            message: "box size must be positive".into(),
        });
    }

    let mut warnings = Vec::new();
    let mut frames = Vec::with_capacity(t_count);
    let mut last_line = lineno + 1;
    for t in 1..=t_count {
        let (lno, fline) = lines.next().ok_or(SynthError::Truncated {
            line: last_line + 1,
            section: format!("FRAME {t}"),
        })?;
        last_line = lno + 1;
        let ftoks: Vec<&str> = fline.split_whitespace().collect();
        if ftoks.len() != 7 || ftoks[0] != "FRAME" {
            return Err(SynthError::Parse {
                line: lno + 1,
                message: format!("expected 'FRAME {t} ...', got '{fline}'"),
            });
        }
        let t_got = parse_u(lno + 1, ftoks[1])?;
        if t_got != t {
            return Err(SynthError::Parse {
                line: lno + 1,
                message: format!("expected frame index {t}, got {t_got}"),
            });
        }
        let n = parse_u(lno + 1, ftoks[2])?;
        let center = [
            parse_f(lno + 1, ftoks[3])?,
            parse_f(lno + 1, ftoks[4])?,
            parse_f(lno + 1, ftoks[5])?,
        ];
        let heading = parse_f(lno + 1, ftoks[6])?;
        let gt_box = Box3D::new(center, heading, size).map_err(|e| SynthError::Parse {
            line: lno + 1,
            message: e.to_string(),
        })?;

        let mut points = Vec::with_capacity(n);
        let mut stored_mask = Vec::with_capacity(n);
        for k in 0..n {
            let (plno, pline) = lines.next().ok_or(SynthError::Truncated {
                line: last_line + 1,
                section: format!("point {} of FRAME {t}", k + 1),
            })?;
            last_line = plno + 1;
            let ptoks: Vec<&str> = pline.split_whitespace().collect();
            if ptoks.len() != 4 {
                return Err(SynthError::Parse {
                    line: plno + 1,
                    message: format!("expected '<x> <y> <z> <mask-bit>', got '{pline}'"),
                });
            }
            points.push([
                parse_f(plno + 1, ptoks[0])?,
                parse_f(plno + 1, ptoks[1])?,
                parse_f(plno + 1, ptoks[2])?,
            ]);
            stored_mask.push(match ptoks[3] {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(SynthError::Parse {
                        line: plno + 1,
                        message: format!("mask bit must be 0 or 1, got '{other}'"),
                    })
                }
            });
        }

        let recomputed = points_in_box(&points, &gt_box);
        if recomputed != stored_mask {
            let diff = recomputed
                .iter()
                .zip(&stored_mask)
                .filter(|(a, b)| a != b)
                .count();
            warnings.push(format!(
                "frame {t}: stored mask disagrees with the box at {diff} points; recomputed"
            ));
        }
        frames.push(Frame {
            points,
            gt_box,
            gt_mask: recomputed,
        });
    }

    Ok((
        Sequence {
            category,
            size,
            frames,
        },
        warnings,
    ))
}

pub fn read_sequence(path: &Path) -> Result<(Sequence, Vec<String>), SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_sequence(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::canonicalize;

    fn moving_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            archetype: Archetype::CarShell,
            frames: 12,
            waypoints: vec![
                ([0.0, 0.0, 0.0], 0.2),
                ([3.0, 1.0, 0.0], 0.5),
            ],
            density: DensityProfile::Constant(120),
            occlusion: OcclusionSchedule::Constant(0.3),
            distractors: 1,
            clutter: 40,
            noise_sigma: 0.01,
            seed,
        }
    }

    #[test]
    fn same_spec_and_seed_is_bit_identical() {
        let a = generate_sequence(&moving_spec(5)).unwrap();
        let b = generate_sequence(&moving_spec(5)).unwrap();
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.points.len(), fb.points.len());
            for (pa, pb) in fa.points.iter().zip(&fb.points) {
                for k in 0..3 {
                    assert_eq!(pa[k].to_bits(), pb[k].to_bits());
                }
            }
            assert_eq!(fa.gt_mask, fb.gt_mask);
        }
    }

    #[test]
    fn clean_spec_marks_every_point_foreground() {
        let spec = GeneratorSpec {
            occlusion: OcclusionSchedule::None,
            distractors: 0,
            clutter: 0,
            noise_sigma: 0.0,
            ..moving_spec(6)
        };
        let seq = generate_sequence(&spec).unwrap();
        for f in &seq.frames {
            assert!(f.gt_mask.iter().all(|m| *m == 1));
        }
    }

    #[test]
    fn stored_mask_always_equals_recomputation() {
        let seq = generate_sequence(&moving_spec(7)).unwrap();
        for f in &seq.frames {
            assert_eq!(f.gt_mask, points_in_box(&f.points, &f.gt_box));
        }
    }

    #[test]
    fn half_occlusion_hides_about_half_the_surface() {
        let spec = GeneratorSpec {
            frames: 100,
            occlusion: OcclusionSchedule::Constant(0.5),
            distractors: 0,
            clutter: 0,
            noise_sigma: 0.0,
            density: DensityProfile::Constant(200),
            waypoints: vec![([0.0, 0.0, 0.0], 0.0)],
            ..moving_spec(8)
        };
        let seq = generate_sequence(&spec).unwrap();
        let visible: usize = seq.frames.iter().map(|f| f.points.len()).sum();
        let frac = visible as f64 / (200.0 * seq.len() as f64);
        assert!((0.4..0.6).contains(&frac), "visible fraction {frac}");
    }

    #[test]
    fn no_noise_canonical_target_points_repeat_across_frames() {
        let spec = GeneratorSpec {
            occlusion: OcclusionSchedule::None,
            distractors: 0,
            clutter: 0,
            noise_sigma: 0.0,
            ..moving_spec(9)
        };
        let seq = generate_sequence(&spec).unwrap();
        let first = canonicalize(&seq.frames[0].points, &seq.frames[0].gt_box);
        for f in &seq.frames[1..] {
            let c = canonicalize(&f.points, &f.gt_box);
            assert_eq!(c.len(), first.len());
            for (a, b) in c.iter().zip(&first) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fully_occluded_first_frame_is_rejected() {
        // one surface point and a nearly full hidden sector: the first
        // frame ends up empty for this seed
        let spec = GeneratorSpec {
            archetype: Archetype::PedestrianCylinders,
            frames: 3,
            waypoints: vec![([0.0, 0.0, 0.0], 0.0)],
            density: DensityProfile::Constant(1),
            occlusion: OcclusionSchedule::Constant(0.99),
            distractors: 0,
            clutter: 0,
            noise_sigma: 0.0,
            seed: 3,
        };
        match generate_sequence(&spec) {
            Err(SynthError::NoForegroundAtStart) => {}
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let seq = generate_sequence(&moving_spec(10)).unwrap();
        let text = format_sequence(&seq);
        let (back, warnings) = parse_sequence(&text).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back.category, seq.category);
        assert_eq!(back.size, seq.size);
        assert_eq!(back.len(), seq.len());
        for (a, b) in back.frames.iter().zip(&seq.frames) {
            assert_eq!(a.gt_mask, b.gt_mask);
            assert_eq!(a.gt_box, b.gt_box);
            for (pa, pb) in a.points.iter().zip(&b.points) {
                for k in 0..3 {
                    assert_eq!(pa[k].to_bits(), pb[k].to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_file_names_missing_section() {
        let seq = generate_sequence(&moving_spec(11)).unwrap();
        let text = format_sequence(&seq);
        let cut: String = text
            .lines()
            .take(3)
            .map(|l| format!("{l}\n"))
            .collect();
        let err = parse_sequence(&cut).unwrap_err();
        match err {
            SynthError::Truncated { section, .. } => {
                assert!(section.contains("FRAME") || section.contains("point"), "{section}");
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_mask_warns_and_recomputes() {
        let spec = GeneratorSpec {
            occlusion: OcclusionSchedule::None,
            distractors: 0,
            clutter: 0,
            noise_sigma: 0.0,
            density: DensityProfile::Constant(5),
            ..moving_spec(12)
        };
        let seq = generate_sequence(&spec).unwrap();
        let mut text = format_sequence(&seq);
        // flip the first point's mask bit (line 3 ends "... 1")
        text = text.replacen(" 1\n", " 0\n", 1);
        let (back, warnings) = parse_sequence(&text).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("recomputed"));
        assert_eq!(back.frames[0].gt_mask, seq.frames[0].gt_mask);
    }

    #[test]
    fn suite_is_deterministic_and_named() {
        let spec = SuiteSpec {
            sequences: 3,
            frames: 6,
            density: 40,
            clutter: 10,
            distractors: 0,
            ..SuiteSpec::default()
        };
        let a = generate_suite(&spec).unwrap();
        let b = generate_suite(&spec).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].0, "car_000");
        assert_eq!(a[1].0, "pedestrian_001");
        for ((na, sa), (nb, sb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(format_sequence(sa), format_sequence(sb));
        }
    }

    #[test]
    fn suite_spec_parses_over_defaults() {
        let spec = parse_suite_spec("sequences = 5\narchetypes = car, cyclist\nspeed = 0\n").unwrap();
        assert_eq!(spec.sequences, 5);
        assert_eq!(
            spec.archetypes,
            vec![Archetype::CarShell, Archetype::CyclistComposite]
        );
        assert_eq!(spec.speed, 0.0);
        assert!(parse_suite_spec("nope = 1").is_err());
    }

    #[test]
    fn density_profiles_cover_their_range() {
        let lin = DensityProfile::Linear { start: 10, end: 30 };
        assert_eq!(lin.at(0, 5), 10);
        assert_eq!(lin.at(4, 5), 30);
        assert_eq!(lin.max(5), 30);
    }
}

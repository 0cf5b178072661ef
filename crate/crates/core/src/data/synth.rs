//! Synthetic tracklets: a template object following a smooth random path,
//! with sector occlusion, same-class distractors and a ground patch.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, Sequence};
use crate::geometry::{apply_motion, clip_convex_polygon, Box3D, Motion4DOF, PointCloud};
use crate::{Error, Result};

/// Surface the target is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Cuboid shell.
    Car,
    /// Elliptic cylinder with a top cap.
    Pedestrian,
}

impl Template {
    /// Nominal `(w, l, h)`.
    pub fn size(self) -> [f64; 3] {
        match self {
            Template::Car => [1.6, 3.9, 1.5],
            Template::Pedestrian => [0.6, 0.8, 1.7],
        }
    }

    pub fn category(self) -> Category {
        match self {
            Template::Car => Category::Car,
            Template::Pedestrian => Category::Pedestrian,
        }
    }
}

/// Rendered surfaces stay this fraction inside their box.
pub const SURFACE_INSET: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub template: Template,
    /// Samples on the target surface per frame, before occlusion.
    pub points_per_frame: usize,
    /// Largest forward motion per frame (m).
    pub max_translation: f64,
    /// Largest heading change per frame (rad).
    pub max_rotation: f64,
    /// Chance that a frame is occluded.
    pub occlusion_prob: f64,
    /// Angular share of the target dropped in an occluded frame.
    pub occlusion_fraction: f64,
    pub distractors: usize,
    pub distractor_points: usize,
    /// When set, distractors may sit anywhere at least this far (m) from the
    /// target's footprint instead of on a ring clear of its bounding circle.
    pub distractor_gap: Option<f64>,
    pub background_points: usize,
    /// Gaussian jitter on every point (m).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            template: Template::Car,
            points_per_frame: 64,
            max_translation: 0.5,
            max_rotation: 0.05,
            occlusion_prob: 0.0,
            occlusion_fraction: 0.0,
            distractors: 2,
            distractor_points: 48,
            distractor_gap: None,
            background_points: 48,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Parses and validates a TOML table of generator settings.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("occlusion_prob", self.occlusion_prob),
            ("occlusion_fraction", self.occlusion_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("max_translation", self.max_translation),
            ("max_rotation", self.max_rotation),
            ("noise_std", self.noise_std),
            ("distractor_gap", self.distractor_gap.unwrap_or(0.0)),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Canonical surface samples of `template` inside extents `(l, w, h)/2 · inset`.
fn sample_surface(
    template: Template,
    half: [f64; 3],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    let [hx, hy, hz] = half.map(|v| v * SURFACE_INSET);
    let mut out = Vec::with_capacity(n);
    match template {
        Template::Car => {
            let areas = [hy * hz, hx * hz, hx * hy];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let u = rng.random_range(0.0..total);
                let axis = if u < areas[0] {
                    0
                } else if u < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let mut q = [
                    rng.random_range(-hx..=hx),
                    rng.random_range(-hy..=hy),
                    rng.random_range(-hz..=hz),
                ];
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                q[axis] = sign * [hx, hy, hz][axis];
                out.push(q);
            }
        }
        Template::Pedestrian => {
            for _ in 0..n {
                let phi = rng.random_range(0.0..TAU);
                if rng.random_bool(0.8) {
                    out.push([hx * phi.cos(), hy * phi.sin(), rng.random_range(-hz..=hz)]);
                } else {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    out.push([r * hx * phi.cos(), r * hy * phi.sin(), hz]);
                }
            }
        }
    }
    out
}

/// Drops the points whose bearing around the box axis falls in the sector
/// starting at `start` and spanning `fraction` of a turn.
fn occlude(points: Vec<[f64; 3]>, start: f64, fraction: f64) -> Vec<[f64; 3]> {
    if fraction <= 0.0 {
        return points;
    }
    if fraction >= 1.0 {
        return Vec::new();
    }
    let width = fraction * TAU;
    points
        .into_iter()
        .filter(|q| {
            let a = (q[1].atan2(q[0]) - start).rem_euclid(TAU);
            a >= width
        })
        .collect()
}

/// Renders `template` posed at `b` with optional occlusion and jitter.
fn render(
    template: Template,
    b: &Box3D,
    n: usize,
    occlusion: Option<(f64, f64)>,
    noise: Option<&Normal<f64>>,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    let mut pts = sample_surface(template, b.half_extents(), n, rng);
    if let Some((start, fraction)) = occlusion {
        pts = occlude(pts, start, fraction);
    }
    pts.into_iter()
        .map(|q| {
            let q = match noise {
                Some(d) => [
                    q[0] + d.sample(rng),
                    q[1] + d.sample(rng),
                    q[2] + d.sample(rng),
                ],
                None => q,
            };
            b.to_world(q)
        })
        .collect()
}

/// Generates one deterministic tracklet of `length` frames.
pub fn generate_sequence(cfg: &SynthConfig, length: usize) -> Result<Sequence> {
    cfg.validate()?;
    if length < 2 {
        return Err(Error::InvalidInput(format!("sequence length {length} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [w, l, h] = cfg.template.size();
    let scale = rng.random_range(0.9..1.1);
    let b0 = Box3D::new(
        [
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            h * scale / 2.0,
        ],
        w * scale,
        l * scale,
        h * scale,
        rng.random_range(-PI..PI),
    )?;
    let speed = rng.random_range(0.3..1.0) * cfg.max_translation;

    let mut boxes = vec![b0];
    let mut omega = 0.0;
    for _ in 1..length {
        let prev = *boxes.last().expect("non-empty");
        let turn = if cfg.max_rotation > 0.0 {
            rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
        } else {
            0.0
        };
        omega = (0.7 * omega + 0.3 * turn).clamp(-cfg.max_rotation, cfg.max_rotation);
        let v = speed * rng.random_range(0.8..1.2);
        let lateral = if cfg.max_translation > 0.0 {
            rng.random_range(-0.05..0.05) * cfg.max_translation
        } else {
            0.0
        };
        boxes.push(apply_motion(
            &prev,
            &Motion4DOF::new(v, lateral, 0.0, omega),
        ));
    }

    // distractors ride along at fixed offsets in the target frame
    let reach = 0.5 * b0.size.w.hypot(b0.size.l);
    let local = |off: [f64; 2], yaw: f64, grow: f64| {
        Box3D::new(
            [off[0], off[1], 0.0],
            b0.size.w + 2.0 * grow,
            b0.size.l + 2.0 * grow,
            b0.size.h,
            yaw,
        )
    };
    let mut offsets: Vec<([f64; 2], f64)> = Vec::with_capacity(cfg.distractors);
    while offsets.len() < cfg.distractors {
        let (lo, hi) = match cfg.distractor_gap {
            None => (2.0 * reach + 0.5, 2.0 * reach + 4.0),
            Some(g) => (0.0, 2.0 * reach + g + 3.5),
        };
        let r = rng.random_range(lo..hi);
        let a = rng.random_range(0.0..TAU);
        let off = [r * a.cos(), r * a.sin()];
        let gap_yaw = cfg.distractor_gap.map(|_| rng.random_range(-PI..PI));
        let clear = match cfg.distractor_gap {
            None => offsets.iter().all(|(o, _)| {
                ((o[0] - off[0]).powi(2) + (o[1] - off[1]).powi(2)).sqrt() > 2.0 * reach + 0.2
            }),
            Some(g) => {
                let cand = local(off, gap_yaw.unwrap_or(0.0), g)?;
                let others = std::iter::once(([0.0, 0.0], 0.0)).chain(offsets.iter().copied());
                let mut ok = true;
                for (o, y) in others {
                    let other = local(o, y, 0.0)?;
                    if !clip_convex_polygon(&cand.bev_corners(), &other.bev_corners()).is_empty() {
                        ok = false;
                        break;
                    }
                }
                ok
            }
        };
        if clear {
            let yaw = gap_yaw.unwrap_or_else(|| rng.random_range(-PI..PI));
            offsets.push((off, yaw));
        }
    }

    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid std"));
    let mut frames = Vec::with_capacity(length);
    for b in &boxes {
        let occ = (cfg.occlusion_fraction > 0.0 && rng.random_bool(cfg.occlusion_prob))
            .then(|| (rng.random_range(0.0..TAU), cfg.occlusion_fraction));
        let mut pts = render(
            cfg.template,
            b,
            cfg.points_per_frame,
            occ,
            noise.as_ref(),
            &mut rng,
        );
        for (off, yaw) in &offsets {
            let c = b.to_world([off[0], off[1], 0.0]);
            let d = Box3D::new(c, b.size.w, b.size.l, b.size.h, b.heading + yaw)?;
            pts.extend(render(
                cfg.template,
                &d,
                cfg.distractor_points,
                None,
                noise.as_ref(),
                &mut rng,
            ));
        }
        let half = b.size.l + 2.0;
        let ground = b.center[2] - b.size.h / 2.0 - 0.05;
        for _ in 0..cfg.background_points {
            let q = [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                0.0,
            ];
            let p = b.to_world(q);
            pts.push([p[0], p[1], ground]);
        }
        frames.push(PointCloud::new(pts)?);
    }
    Sequence::new(
        frames,
        boxes,
        cfg.template.category(),
        format!("synth-{}", cfg.seed),
    )
}

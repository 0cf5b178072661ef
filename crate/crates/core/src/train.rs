//! End-to-end training on fixed-length windows: per-frame crops around the
//! ground-truth box, a rolling memory, the full loss and an Adam optimizer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::downsample_mask;
use crate::data::{make_training_samples, Sequence, TrainingSample};
use crate::defpm::{FrameEntry, MemoryBank};
use crate::geometry::{
    crop_search_region, points_in_box, Box3D, Motion4DOF, PointCloud, TargetnessMask,
};
use crate::losses::{compute_losses, positive_sampling, FrameTargets, LossComponents, LossWeights};
use crate::model::{coords_in_new_frame, Model};
use crate::nn::ParamStore;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Optimization and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch as a fraction of the initial one,
    /// reached along a cosine; `1.0` keeps it constant.
    pub lr_final_ratio: f64,
    /// Frames per window; the first is given, the rest are supervised.
    pub sample_len: usize,
    /// Memory capacity while training.
    pub train_memory: usize,
    pub crop_size: usize,
    pub margin: f64,
    pub weights: LossWeights,
    /// Distance below which a centre counts as positive, meters.
    pub positive_radius: f64,
    pub positive_fraction: f64,
    pub positive_sigma: f64,
    /// Store ground-truth masks in the memory instead of predictions.
    pub gt_memory_masks: bool,
    pub flip_prob: f64,
    /// Largest global yaw rotation applied to a window, radians.
    pub max_rotation: f64,
    /// Std of the crop-box centre perturbation in the ground plane, meters.
    pub jitter_center: f64,
    /// Std of the crop-box heading perturbation, radians.
    pub jitter_heading: f64,
    /// Global gradient-norm bound; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_final_ratio: 1.0,
            sample_len: 8,
            train_memory: 2,
            crop_size: 128,
            margin: 2.0,
            weights: LossWeights::default(),
            positive_radius: crate::losses::POSITIVE_RADIUS,
            positive_fraction: 0.5,
            positive_sigma: 0.075,
            gt_memory_masks: false,
            flip_prob: 0.5,
            max_rotation: 0.1,
            jitter_center: 0.0,
            jitter_heading: 0.0,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad(format!(
                "lr_final_ratio {} must be in (0, 1]",
                self.lr_final_ratio
            ));
        }
        if self.sample_len < 2 {
            return bad(format!("sample_len {} must be at least 2", self.sample_len));
        }
        if self.train_memory == 0 {
            return bad("train_memory must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || !(0.0..=1.0).contains(&self.flip_prob)
        {
            return bad("positive_fraction and flip_prob must lie in [0, 1]".into());
        }
        let nonneg = [
            ("margin", self.margin),
            ("positive_radius", self.positive_radius),
            ("positive_sigma", self.positive_sigma),
            ("max_rotation", self.max_rotation),
            ("jitter_center", self.jitter_center),
            ("jitter_heading", self.jitter_heading),
            ("grad_clip", self.grad_clip),
        ];
        if let Some((k, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("{k} = {v} must be non-negative"));
        }
        self.weights.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(grad.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn accumulate(acc: &mut [Option<Matrix>], grads: Vec<Option<Matrix>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`.
fn clip_gradients(grads: &mut [Option<Matrix>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(max_norm / norm);
        }
    }
}

/// A window with one random global transform applied.
#[derive(Clone, Debug)]
pub struct Window {
    pub frames: Vec<PointCloud>,
    pub boxes: Vec<Box3D>,
    pub rigid: bool,
}

/// Mirrors across the x axis with probability `flip_prob`, then rotates
/// about the vertical axis through the origin by a uniform angle in
/// `±max_rotation`.
pub fn augment_window(
    seq: &Sequence,
    sample: &TrainingSample,
    flip_prob: f64,
    max_rotation: f64,
    rng: &mut impl Rng,
) -> Window {
    let flip = rng.random::<f64>() < flip_prob;
    let angle = if max_rotation > 0.0 {
        rng.random_range(-max_rotation..=max_rotation)
    } else {
        0.0
    };
    let (s, c) = angle.sin_cos();
    let tf = |p: [f64; 3]| {
        let y = if flip { -p[1] } else { p[1] };
        [c * p[0] - s * y, s * p[0] + c * y, p[2]]
    };
    let frames = sample.frames().map(|i| seq.frames[i].map(tf)).collect();
    let boxes = sample
        .frames()
        .map(|i| {
            let b = seq.gt_boxes[i];
            let heading = if flip { -b.heading } else { b.heading };
            Box3D {
                center: tf(b.center),
                heading: crate::geometry::normalize_angle(heading + angle),
                ..b
            }
        })
        .collect();
    Window {
        frames,
        boxes,
        rigid: seq.category.is_rigid(),
    }
}

fn jitter(b: &Box3D, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Box3D> {
    if cfg.jitter_center == 0.0 && cfg.jitter_heading == 0.0 {
        return Ok(*b);
    }
    let n = |s: f64| Normal::new(0.0, s).map_err(|e| Error::InvalidInput(e.to_string()));
    let (nc, nh) = (n(cfg.jitter_center)?, n(cfg.jitter_heading)?);
    Box3D::new(
        [
            b.center[0] + nc.sample(rng),
            b.center[1] + nc.sample(rng),
            b.center[2],
        ],
        b.size.w,
        b.size.l,
        b.size.h,
        b.heading + nh.sample(rng),
    )
}

/// Runs a window frame by frame, accumulating parameter gradients into
/// `grads`. Memory features are constants, so each frame backpropagates on
/// its own. Returns the mean loss components over supervised frames.
pub fn window_gradients(
    model: &Model,
    window: &Window,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    grads: &mut [Option<Matrix>],
) -> Result<LossComponents> {
    let store = &model.params;
    let n = window.frames.len();
    // crop boxes: exact first box, perturbed previous ground truth after
    let mut crops = vec![window.boxes[0]];
    for t in 1..n {
        crops.push(jitter(&window.boxes[t - 1], cfg, rng)?);
    }
    let region = crop_search_region(&window.frames[0], &crops[0], cfg.margin, cfg.crop_size, rng)?;
    if region.empty {
        return Err(Error::EmptyCrop);
    }
    let local0 = window.boxes[0].relative_to(&crops[0]);
    let first = model.initial_entry(store, &region.points, &local0)?;
    let mut memory = MemoryBank::new(cfg.train_memory);
    memory.push(reframe(first, &crops[0], &crops[1])?);

    let extents = window.boxes[0].canonical_extents();
    let mut sum = LossComponents::default();
    let mut frames = 0usize;
    for t in 1..n {
        let region =
            crop_search_region(&window.frames[t], &crops[t], cfg.margin, cfg.crop_size, rng)?;
        let local_gt = window.boxes[t].relative_to(&crops[t]);
        let refs: Vec<&FrameEntry> = memory.entries().collect();
        let mut g = Graph::new();
        let mut sampler = |c: &Matrix| {
            positive_sampling(
                c,
                local_gt.center,
                window.rigid,
                cfg.positive_fraction,
                cfg.positive_sigma,
                rng,
            )
        };
        let rec = model.record_frame(
            &mut g,
            store,
            &region.points,
            &refs,
            extents,
            Some(&mut sampler),
            None,
        )?;
        let full = points_in_box(&region.points, &local_gt);
        let gt_mask = downsample_mask(&full, &region.points, &rec.seed_coords)?;
        let targets = FrameTargets::new(local_gt, gt_mask.clone());
        let loss = compute_losses(
            &mut g,
            &rec.vote,
            &rec.proposals,
            &targets,
            &cfg.weights,
            cfg.positive_radius,
        )?;
        let v = loss.values(&g);
        sum.mask += v.mask;
        sum.center += v.center;
        sum.quality += v.quality;
        sum.score += v.score;
        sum.bbox += v.bbox;
        sum.total += v.total;
        frames += 1;
        accumulate(grads, g.backward(loss.total).into_param_grads(store.len()));

        if t + 1 < n {
            let mask = if cfg.gt_memory_masks {
                gt_mask
            } else {
                let logits = g.value(rec.vote.mask_logits);
                TargetnessMask::new(
                    logits
                        .data()
                        .iter()
                        .map(|&x| crate::autograd::sigmoid(x))
                        .collect(),
                )?
            };
            let feats = rec
                .write_feats
                .iter()
                .map(|&v| g.value(v).clone())
                .collect();
            let entry = FrameEntry::new(rec.seed_coords, feats, mask)?;
            memory.push(reframe(entry, &crops[t], &crops[t + 1])?);
        }
    }
    let k = frames.max(1) as f64;
    Ok(LossComponents {
        mask: sum.mask / k,
        center: sum.center / k,
        quality: sum.quality / k,
        score: sum.score / k,
        bbox: sum.bbox / k,
        total: sum.total / k,
    })
}

/// Moves an entry's coordinates from the `from` crop frame into `to`'s.
fn reframe(entry: FrameEntry, from: &Box3D, to: &Box3D) -> Result<FrameEntry> {
    let coords = coords_in_new_frame(&entry.coords, &Motion4DOF::between(from, to));
    FrameEntry::new(coords, entry.ref_feats, entry.mask)
}

/// Cosine interpolation from the initial rate down to
/// `lr_final_ratio` of it at the last epoch.
pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.learning_rate;
    }
    let p = epoch as f64 / (cfg.epochs - 1) as f64;
    let f = cfg.lr_final_ratio
        + (1.0 - cfg.lr_final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    cfg.learning_rate * f
}

/// Mean loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossComponents,
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train(
    model: &mut Model,
    sequences: &[Sequence],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_with(model, sequences, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if cfg.crop_size < model.min_points() {
        return Err(Error::Config(format!(
            "crop_size {} below the {} points the model needs",
            cfg.crop_size,
            model.min_points()
        )));
    }
    let samples = make_training_samples(sequences, cfg.sample_len);
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no sequence has {} frames",
            cfg.sample_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order = samples.clone();
    for epoch in 0..cfg.epochs {
        opt.learning_rate = scheduled_lr(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Matrix>> = vec![None; model.params.len()];
            let mut used = 0usize;
            for s in batch {
                let window = augment_window(
                    &sequences[s.sequence],
                    s,
                    cfg.flip_prob,
                    cfg.max_rotation,
                    &mut rng,
                );
                match window_gradients(model, &window, cfg, &mut rng, &mut grads) {
                    Ok(l) => {
                        sum.mask += l.mask;
                        sum.center += l.center;
                        sum.quality += l.quality;
                        sum.score += l.score;
                        sum.bbox += l.bbox;
                        sum.total += l.total;
                        used += 1;
                    }
                    Err(Error::EmptyCrop) => log::warn!("skipping window {s:?}: empty first crop"),
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            let per_frame = (used * (cfg.sample_len - 1)) as f64;
            for g in grads.iter_mut().flatten() {
                g.scale_in_place(1.0 / per_frame);
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            opt.step(&mut model.params, &grads);
            steps += used;
        }
        let k = steps.max(1) as f64;
        let entry = EpochLog {
            epoch,
            steps,
            loss: LossComponents {
                mask: sum.mask / k,
                center: sum.center / k,
                quality: sum.quality / k,
                score: sum.score / k,
                bbox: sum.bbox / k,
                total: sum.total / k,
            },
        };
        log::info!(
            "epoch {epoch}: loss {:.4} over {steps} windows",
            entry.loss.total
        );
        on_epoch(&entry, model);
        log.push(entry);
    }
    Ok(log)
}

/// `epoch,windows,total,mask,center,quality,score,bbox` rows.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,windows,total,mask,center,quality,score,bbox\n");
    for e in log {
        let l = &e.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, e.steps, l.total, l.mask, l.center, l.quality, l.score, l.bbox
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, SynthConfig};
    use crate::model::tests::tiny_config;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&store, 0.1);
        let g = Matrix::from_vec(1, 2, vec![2.0, -3.0]).unwrap();
        opt.step(&mut store, &[Some(g)]);
        // first bias-corrected step has magnitude lr
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        opt.step(&mut store, &[None]);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()), None];
        clip_gradients(&mut g, 1.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn augmentation_keeps_points_in_boxes() {
        let seq = generate_sequence(&SynthConfig::default(), 4).unwrap();
        let s = TrainingSample {
            sequence: 0,
            start: 0,
            len: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let w = augment_window(&seq, &s, 0.5, 0.3, &mut rng);
            for t in 0..4 {
                let before = points_in_box(&seq.frames[t], &seq.gt_boxes[t])
                    .values()
                    .iter()
                    .sum::<f64>();
                let after = points_in_box(&w.frames[t], &w.boxes[t])
                    .values()
                    .iter()
                    .sum::<f64>();
                assert!((before - after).abs() <= 1.0, "{before} vs {after}");
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let seqs: Vec<Sequence> = (0..2)
            .map(|s| {
                generate_sequence(
                    &SynthConfig {
                        seed: s,
                        points_per_frame: 48,
                        distractors: 0,
                        background_points: 16,
                        ..SynthConfig::default()
                    },
                    4,
                )
                .unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 1,
            learning_rate: 3e-3,
            sample_len: 4,
            crop_size: 32,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model = Model::new(tiny_config(), &mut rng).unwrap();
            let log = train(&mut model, &seqs, &cfg).unwrap();
            (model.params, log)
        };
        let (p1, log1) = run();
        let (p2, log2) = run();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert!(
            log1.last().unwrap().loss.total < log1[0].loss.total,
            "{log1:?}"
        );
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 11,
            learning_rate: 2.0,
            lr_final_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(scheduled_lr(&cfg, 0), 2.0);
        assert!((scheduled_lr(&cfg, 10) - 0.2).abs() < 1e-12);
        assert!((scheduled_lr(&cfg, 5) - 1.1).abs() < 1e-12);
        let flat = TrainConfig::default();
        assert_eq!(scheduled_lr(&flat, 7), flat.learning_rate);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig {
            sample_len: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

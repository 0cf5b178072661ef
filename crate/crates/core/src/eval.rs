//! One Pass Evaluation: Success and Precision areas under curve,
//! frame-weighted aggregation across categories, and curve export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Category, Sequence};
use crate::geometry::{center_distance, iou3d, Box3D, PointCloud};
use crate::model::Model;
use crate::tracker::{Tracker, TrackerConfig};
use crate::{Error, Result};

/// Upper end of the IoU threshold range.
pub const SUCCESS_MAX_THRESHOLD: f64 = 1.0;
/// Upper end of the center-distance threshold range, meters.
pub const PRECISION_MAX_THRESHOLD: f64 = 2.0;

/// How distances beyond the precision range are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMode {
    /// Counted with zero contribution.
    #[default]
    Clip,
    /// Removed from the frame count.
    Drop,
}

/// Options shared by every evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpeOptions {
    pub include_first_frame: bool,
    pub distance_mode: DistanceMode,
    /// `Some(step)` switches both metrics to trapezoidal integration over a
    /// threshold grid of that spacing.
    pub threshold_step: Option<f64>,
}

impl Default for OpeOptions {
    fn default() -> Self {
        Self {
            include_first_frame: false,
            distance_mode: DistanceMode::Clip,
            threshold_step: None,
        }
    }
}

fn check_nonempty(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        Err(Error::EmptyMetric)
    } else {
        Ok(())
    }
}

fn check_ious(ious: &[f64]) -> Result<()> {
    check_nonempty(ious)?;
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("IoU {bad} outside [0, 1]")));
    }
    Ok(())
}

fn check_dists(dists: &[f64]) -> Result<()> {
    check_nonempty(dists)?;
    if let Some(bad) = dists.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "distance {bad} is negative or NaN"
        )));
    }
    Ok(())
}

/// Success in `[0, 100]`: the exact area under the fraction-above-threshold
/// curve, which equals the mean IoU.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    check_ious(ious)?;
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Precision in `[0, 100]` with distances clipped at 2 m.
pub fn precision_auc(dists: &[f64]) -> Result<f64> {
    precision_auc_with(dists, DistanceMode::Clip)
}

pub fn precision_auc_with(dists: &[f64], mode: DistanceMode) -> Result<f64> {
    check_dists(dists)?;
    let kept = filter_distances(dists, mode);
    if kept.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = kept
        .iter()
        .map(|d| 1.0 - d.min(PRECISION_MAX_THRESHOLD) / PRECISION_MAX_THRESHOLD)
        .sum();
    Ok(100.0 * sum / kept.len() as f64)
}

fn filter_distances(dists: &[f64], mode: DistanceMode) -> Vec<f64> {
    match mode {
        DistanceMode::Clip => dists.to_vec(),
        DistanceMode::Drop => dists
            .iter()
            .copied()
            .filter(|d| *d <= PRECISION_MAX_THRESHOLD)
            .collect(),
    }
}

fn thresholds(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= max) {
        return Err(Error::InvalidInput(format!(
            "threshold step {step} must be in (0, {max}]"
        )));
    }
    let n = (max / step).round() as usize;
    Ok((0..=n).map(|i| (i as f64 * step).min(max)).collect())
}

/// `(τ, fraction of IoU > τ)` over `τ ∈ [0, 1]`.
pub fn success_curve(ious: &[f64], step: f64) -> Result<Vec<(f64, f64)>> {
    check_ious(ious)?;
    let n = ious.len() as f64;
    Ok(thresholds(SUCCESS_MAX_THRESHOLD, step)?
        .into_iter()
        .map(|t| (t, ious.iter().filter(|v| **v > t).count() as f64 / n))
        .collect())
}

/// `(τ, fraction of d < τ)` over `τ ∈ [0, 2]` meters.
pub fn precision_curve(dists: &[f64], step: f64, mode: DistanceMode) -> Result<Vec<(f64, f64)>> {
    check_dists(dists)?;
    let kept = filter_distances(dists, mode);
    let n = kept.len().max(1) as f64;
    Ok(thresholds(PRECISION_MAX_THRESHOLD, step)?
        .into_iter()
        .map(|t| (t, kept.iter().filter(|v| **v < t).count() as f64 / n))
        .collect())
}

/// Trapezoidal area under a sampled curve.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn success_auc_numeric(ious: &[f64], step: f64) -> Result<f64> {
    Ok(100.0 * trapezoid(&success_curve(ious, step)?) / SUCCESS_MAX_THRESHOLD)
}

pub fn precision_auc_numeric(dists: &[f64], step: f64, mode: DistanceMode) -> Result<f64> {
    Ok(100.0 * trapezoid(&precision_curve(dists, step, mode)?) / PRECISION_MAX_THRESHOLD)
}

/// Per-sequence evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct OpeResult {
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
}

impl OpeResult {
    /// Scores predictions against ground truth, frame by frame.
    pub fn from_boxes(pred: &[Box3D], gt: &[Box3D], opts: &OpeOptions) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} frames",
                pred.len(),
                gt.len()
            )));
        }
        let skip = usize::from(!opts.include_first_frame);
        let mut ious = Vec::with_capacity(gt.len());
        let mut distances = Vec::with_capacity(gt.len());
        for (p, g) in pred.iter().zip(gt).skip(skip) {
            ious.push(iou3d(p, g)?.clamp(0.0, 1.0));
            distances.push(center_distance(p, g));
        }
        Self::from_frames(ious, distances, opts)
    }

    pub fn from_frames(ious: Vec<f64>, distances: Vec<f64>, opts: &OpeOptions) -> Result<Self> {
        if ious.len() != distances.len() {
            return Err(Error::InvalidInput("IoU and distance counts differ".into()));
        }
        let (success, precision) = match opts.threshold_step {
            None => (
                success_auc(&ious)?,
                precision_auc_with(&distances, opts.distance_mode)?,
            ),
            Some(step) => (
                success_auc_numeric(&ious, step)?,
                precision_auc_numeric(&distances, step, opts.distance_mode)?,
            ),
        };
        let frames = ious.len();
        Ok(Self {
            ious,
            distances,
            success,
            precision,
            frames,
        })
    }
}

/// Anything that can be driven through a sequence once.
pub trait OpeTracker {
    fn start(&mut self, cloud: &PointCloud, first_box: Box3D) -> Result<()>;
    fn next_box(&mut self, cloud: &PointCloud) -> Result<Box3D>;
}

/// Replays a fixed list of boxes; with the ground truth it is a perfect
/// tracker.
pub struct ReplayTracker {
    boxes: Vec<Box3D>,
    frame: usize,
}

impl ReplayTracker {
    pub fn new(boxes: Vec<Box3D>) -> Self {
        Self { boxes, frame: 0 }
    }
}

impl OpeTracker for ReplayTracker {
    fn start(&mut self, _cloud: &PointCloud, _first_box: Box3D) -> Result<()> {
        self.frame = 0;
        Ok(())
    }

    fn next_box(&mut self, _cloud: &PointCloud) -> Result<Box3D> {
        self.frame += 1;
        self.boxes.get(self.frame).copied().ok_or_else(|| {
            Error::InvalidInput(format!("replay has no box for frame {}", self.frame))
        })
    }
}

/// Never moves from the initial box.
#[derive(Default)]
pub struct StaticTracker {
    current: Option<Box3D>,
}

impl OpeTracker for StaticTracker {
    fn start(&mut self, _cloud: &PointCloud, first_box: Box3D) -> Result<()> {
        self.current = Some(first_box);
        Ok(())
    }

    fn next_box(&mut self, _cloud: &PointCloud) -> Result<Box3D> {
        self.current
            .ok_or_else(|| Error::InvalidInput("tracker not started".into()))
    }
}

/// The learned tracker behind the evaluation interface.
pub struct ModelTracker<'m> {
    model: &'m Model,
    config: TrackerConfig,
    inner: Option<Tracker<'m>>,
}

impl<'m> ModelTracker<'m> {
    pub fn new(model: &'m Model, config: TrackerConfig) -> Self {
        Self {
            model,
            config,
            inner: None,
        }
    }
}

impl OpeTracker for ModelTracker<'_> {
    fn start(&mut self, cloud: &PointCloud, first_box: Box3D) -> Result<()> {
        self.inner = Some(Tracker::init(
            self.model,
            self.config.clone(),
            cloud,
            first_box,
        )?);
        Ok(())
    }

    fn next_box(&mut self, cloud: &PointCloud) -> Result<Box3D> {
        let t = self
            .inner
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("tracker not started".into()))?;
        Ok(t.step(cloud)?.bbox)
    }
}

/// Runs one tracker over `seq` from the ground-truth first box without
/// re-initialization. Returns the score and the predicted boxes.
pub fn ope_run_boxes<T: OpeTracker + ?Sized>(
    tracker: &mut T,
    seq: &Sequence,
    opts: &OpeOptions,
) -> Result<(OpeResult, Vec<Box3D>)> {
    if seq.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "sequence {} has fewer than 2 frames",
            seq.id
        )));
    }
    let first = seq.gt_boxes[0];
    tracker.start(&seq.frames[0], first)?;
    let mut pred = vec![first];
    for cloud in &seq.frames[1..] {
        pred.push(tracker.next_box(cloud)?);
    }
    Ok((OpeResult::from_boxes(&pred, &seq.gt_boxes, opts)?, pred))
}

/// Builds a fresh tracker from `factory` and evaluates it on `seq`.
pub fn ope_run<'a, F>(factory: F, seq: &'a Sequence, opts: &OpeOptions) -> Result<OpeResult>
where
    F: FnOnce(&'a Sequence) -> Box<dyn OpeTracker + 'a>,
{
    let mut t = factory(seq);
    Ok(ope_run_boxes(t.as_mut(), seq, opts)?.0)
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub category: String,
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
}

/// Per-category rows, sorted by name, plus the frame-weighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    pub mean: AggregateRow,
}

/// Frame-weighted means per category and over all categories.
pub fn aggregate(results: &[(Category, OpeResult)]) -> Result<Aggregate> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (cat, r) in results {
        let e = acc.entry(cat.to_string()).or_default();
        e.0 += r.success * r.frames as f64;
        e.1 += r.precision * r.frames as f64;
        e.2 += r.frames;
    }
    let total: usize = acc.values().map(|e| e.2).sum();
    if total == 0 {
        return Err(Error::EmptyMetric);
    }
    let rows: Vec<AggregateRow> = acc
        .into_iter()
        .filter(|(_, e)| e.2 > 0)
        .map(|(category, (s, p, n))| AggregateRow {
            category,
            success: s / n as f64,
            precision: p / n as f64,
            frames: n,
        })
        .collect();
    let weighted = |f: fn(&AggregateRow) -> f64| {
        rows.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / total as f64
    };
    let mean = AggregateRow {
        category: "Mean".into(),
        success: weighted(|r| r.success),
        precision: weighted(|r| r.precision),
        frames: total,
    };
    Ok(Aggregate { rows, mean })
}

impl Aggregate {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>10} {:>8}",
            "Category", "Success", "Precision", "Frames"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>10.2} {:>8}",
                r.category, r.success, r.precision, r.frames
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,success,precision,frames\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.category, r.success, r.precision, r.frames
            );
        }
        s
    }
}

/// Writes `threshold,ratio` rows.
pub fn write_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("threshold,ratio\n");
    for (t, r) in curve {
        let _ = writeln!(s, "{t},{r}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::MalformedLabel {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| bad("expected two columns".into()))?;
        let t = a.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
        let r = b.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
        out.push((t, r));
    }
    Ok(out)
}

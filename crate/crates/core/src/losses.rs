//! Training objectives and positive sampling of proposal centres.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bploc::{ProposalVars, VoteVars};
use crate::geometry::{dist2, Box3D, Motion4DOF, TargetnessMask};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Distance under which a predicted centre counts as positive.
pub const POSITIVE_RADIUS: f64 = 0.3;

/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_q: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 0.2,
            lambda_c: 10.0,
            lambda_q: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_m, self.lambda_c, self.lambda_q, self.lambda_s];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Supervision for one frame, in the search region's canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub gt_box: Box3D,
    /// Binary seed-resolution mask.
    pub gt_mask: TargetnessMask,
    pub gt_center: [f64; 3],
    pub gt_motion: Motion4DOF,
}

impl FrameTargets {
    pub fn new(gt_box: Box3D, gt_mask: TargetnessMask) -> Self {
        Self {
            gt_center: gt_box.center,
            gt_motion: Motion4DOF::new(
                gt_box.center[0],
                gt_box.center[1],
                gt_box.center[2],
                gt_box.heading,
            ),
            gt_box,
            gt_mask,
        }
    }
}

/// Scalar loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mask: f64,
    pub center: f64,
    pub quality: f64,
    pub score: f64,
    pub bbox: f64,
    pub total: f64,
}

impl LossComponents {
    /// Combines components with `weights`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_m * self.mask
            + w.lambda_c * self.center
            + w.lambda_q * self.quality
            + w.lambda_s * self.score
            + self.bbox
    }
}

/// Loss nodes for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameLoss {
    pub total: Var,
    pub mask: Var,
    pub center: Var,
    pub quality: Var,
    pub score: Var,
    pub bbox: Var,
    /// No seed lies inside the ground-truth box, so the centre loss is zero.
    pub no_foreground: bool,
    pub positives: usize,
}

impl FrameLoss {
    pub fn values(&self, g: &Graph) -> LossComponents {
        let v = |x: Var| g.value(x).get(0, 0);
        LossComponents {
            mask: v(self.mask),
            center: v(self.center),
            quality: v(self.quality),
            score: v(self.score),
            bbox: v(self.bbox),
            total: v(self.total),
        }
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn label(d2: f64, radius: f64) -> f64 {
    if d2 < radius * radius {
        1.0
    } else {
        0.0
    }
}

/// Mean smooth-L1 between two equal-length vectors.
pub fn smooth_l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "smooth_l1: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let b = SMOOTH_L1_BETA;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < b {
                0.5 * e * e / b
            } else {
                e - 0.5 * b
            }
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Records every loss term for one frame.
///
/// Mask, quality and score terms are binary cross-entropies on logits. The
/// quality label marks voted centres within `radius` (default
/// [`POSITIVE_RADIUS`]) of the target
/// centre, the score label does the same for each proposal's final centre.
/// The box term covers proposals whose centre is within the radius.
pub fn compute_losses(
    g: &mut Graph,
    vote: &VoteVars,
    proposals: &ProposalVars,
    targets: &FrameTargets,
    weights: &LossWeights,
    radius: f64,
) -> Result<FrameLoss> {
    for (v, what) in [
        (vote.centers, "voted centres"),
        (vote.mask_logits, "mask logits"),
        (vote.quality_logits, "quality logits"),
        (proposals.centers, "proposal centres"),
        (proposals.box_params, "box parameters"),
        (proposals.score_logits, "score logits"),
    ] {
        check_finite(g, v, what)?;
    }
    let gt = targets.gt_center;
    if gt.iter().any(|x| !x.is_finite()) || !targets.gt_motion.is_finite() {
        return Err(Error::NonFinite("targets".into()));
    }
    let n = g.shape(vote.centers).0;
    if targets.gt_mask.len() != n {
        return Err(Error::Shape(format!(
            "{} mask labels for {n} seeds",
            targets.gt_mask.len()
        )));
    }

    let mask_bce = g.bce_with_logits(vote.mask_logits, targets.gt_mask.values().to_vec());
    let l_mask = g.mean(mask_bce);

    let fg: Vec<usize> = (0..n)
        .filter(|&i| targets.gt_mask.values()[i] >= 0.5)
        .collect();
    let no_foreground = fg.is_empty();
    let l_center = if no_foreground {
        g.constant(Matrix::scalar(0.0))
    } else {
        let c = g.gather_rows(vote.centers, fg.clone());
        let t = g.constant(Matrix::filled(fg.len(), 3, 0.0));
        let t_row = g.constant(Matrix::from_vec(1, 3, gt.to_vec()).expect("row"));
        let t = g.add_row(t, t_row);
        let d = g.sub(c, t);
        let d = g.square(d);
        g.mean(d)
    };

    let voted = g.value(vote.centers).to_points();
    let q_labels: Vec<f64> = voted.iter().map(|&c| label(dist2(c, gt), radius)).collect();
    let q_bce = g.bce_with_logits(vote.quality_logits, q_labels);
    let l_quality = g.mean(q_bce);

    let np = proposals.indices.len();
    let pc = g.value(proposals.centers).clone();
    let bp = g.value(proposals.box_params).clone();
    let s_labels: Vec<f64> = (0..np)
        .map(|p| {
            let c = pc.row(p);
            let b = bp.row(p);
            label(dist2([c[0] + b[0], c[1] + b[1], c[2] + b[2]], gt), radius)
        })
        .collect();
    let s_bce = g.bce_with_logits(proposals.score_logits, s_labels);
    let l_score = g.mean(s_bce);

    let positives: Vec<usize> = (0..np)
        .filter(|&p| label(dist2(pc.point(p), gt), radius) == 1.0)
        .collect();
    let l_bbox = if positives.is_empty() {
        g.constant(Matrix::scalar(0.0))
    } else {
        // residual target gt - c, written as (b + c) - gt so it stays differentiable in c
        let goal = Matrix::from_vec(1, 4, vec![gt[0], gt[1], gt[2], targets.gt_motion.dtheta])
            .expect("row");
        let goal = g.constant(goal);
        let pred = g.gather_rows(proposals.box_params, positives.clone());
        let c = g.gather_rows(proposals.centers, positives.clone());
        let pad = g.constant(Matrix::zeros(positives.len(), 1));
        let c = g.concat_cols(&[c, pad]);
        let e = g.add(pred, c);
        let zero = g.constant(Matrix::zeros(positives.len(), 4));
        let goal = g.add_row(zero, goal);
        let e = g.sub(e, goal);
        let e = g.smooth_l1(e, SMOOTH_L1_BETA);
        g.mean(e)
    };

    let terms = [
        (l_mask, weights.lambda_m),
        (l_center, weights.lambda_c),
        (l_quality, weights.lambda_q),
        (l_score, weights.lambda_s),
        (l_bbox, 1.0),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(t, w) in &terms[1..] {
        let s = g.scale(t, w);
        total = g.add(total, s);
    }
    Ok(FrameLoss {
        total,
        mask: l_mask,
        center: l_center,
        quality: l_quality,
        score: l_score,
        bbox: l_bbox,
        no_foreground,
        positives: positives.len(),
    })
}

/// Replaces the `round(fraction·N_p)` proposal centres farthest from
/// `gt_center` by jittered copies of it. Rigid categories are left alone.
///
/// Returns the new centres and a flag per proposal telling whether it was
/// replaced.
pub fn positive_sampling(
    centers: &Matrix,
    gt_center: [f64; 3],
    rigid: bool,
    fraction: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Matrix, Vec<bool>)> {
    let np = centers.rows();
    let mut replaced = vec![false; np];
    if rigid || fraction <= 0.0 {
        return Ok((centers.clone(), replaced));
    }
    if !(0.0..=1.0).contains(&fraction) || !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "positive sampling fraction {fraction}, sigma {sigma}"
        )));
    }
    let count = (fraction * np as f64).round() as usize;
    let mut order: Vec<usize> = (0..np).collect();
    let d: Vec<f64> = (0..np)
        .map(|p| dist2(centers.point(p), gt_center))
        .collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = centers.clone();
    for &p in &order[..count] {
        let row = out.row_mut(p);
        row[0] = gt_center[0] + noise.sample(rng);
        row[1] = gt_center[1] + noise.sample(rng);
        row[2] = gt_center[2] + 0.5 * noise.sample(rng);
        replaced[p] = true;
    }
    Ok((out, replaced))
}

/// Rows flagged in `replaced` come from `values` as constants; the others
/// keep flowing from `x`.
pub fn override_rows(g: &mut Graph, x: Var, replaced: &[bool], values: &Matrix) -> Var {
    if !replaced.iter().any(|&r| r) {
        return x;
    }
    let (n, c) = g.shape(x);
    let mut keep = Matrix::zeros(n, c);
    let mut fill = Matrix::zeros(n, c);
    for (i, &r) in replaced.iter().enumerate() {
        if r {
            fill.row_mut(i).copy_from_slice(values.row(i));
        } else {
            keep.row_mut(i).fill(1.0);
        }
    }
    let keep = g.constant(keep);
    let fill = g.constant(fill);
    let kept = g.mul(x, keep);
    g.add(kept, fill)
}

//! Point feature backbone: stacked edge convolutions over a static k-NN graph,
//! farthest point sampling to the seed set, and one grouping layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::geometry::{self, PointCloud, TargetnessMask};
use crate::nn::{glorot, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Seed count `N`.
    pub num_seeds: usize,
    /// Output channels `C`.
    pub channels: usize,
    /// Hidden widths of the edge-convolution stack; a final layer of width
    /// `channels` is appended.
    pub widths: Vec<usize>,
    /// Neighbourhood size of the edge convolutions.
    pub k: usize,
    /// Neighbourhood size of the seed grouping layer.
    pub group_k: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_seeds: 64,
            channels: 128,
            widths: vec![32, 64],
            k: 8,
            group_k: 8,
        }
    }
}

/// One edge convolution: `max_j ReLU([f_j; f_j - f_i]·W + b)` over the k-NN of `i`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConv {
    /// Rows of `W` that multiply `f_j`.
    pub w_nbr: ParamId,
    /// Rows of `W` that multiply `f_j - f_i`.
    pub w_diff: ParamId,
    pub bias: ParamId,
}

impl EdgeConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = glorot(rng, 2 * c_in, c_out);
        let (top, bottom) = w.data().split_at(c_in * c_out);
        Self {
            w_nbr: store.add(
                format!("{name}.w_nbr"),
                Matrix::from_vec(c_in, c_out, top.to_vec()).expect("sized"),
            ),
            w_diff: store.add(
                format!("{name}.w_diff"),
                Matrix::from_vec(c_in, c_out, bottom.to_vec()).expect("sized"),
            ),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, c_out)),
        }
    }

    /// `nbrs` holds `k` neighbour indices per centre, centre-major.
    fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, nbrs: &[usize], k: usize) -> Var {
        // [f_j; f_j - f_i]·[Wn; Wd] = f_j·(Wn + Wd) - f_i·Wd
        let wn = g.param(store, self.w_nbr);
        let wd = g.param(store, self.w_diff);
        let b = g.param(store, self.bias);
        let pn = g.matmul(f, wn);
        let pd = g.matmul(f, wd);
        let p = g.add(pn, pd);
        let n = nbrs.len() / k;
        let centres: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let pj = g.gather_rows(p, nbrs.to_vec());
        let qi = g.gather_rows(pd, centres);
        let e = g.sub(pj, qi);
        let e = g.add_row(e, b);
        let e = g.relu(e);
        g.group_max(e, k)
    }
}

/// Seed coordinates and features of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedFeatures {
    pub coords: Matrix,
    pub feats: Matrix,
    /// Index of each seed in the input cloud.
    pub indices: Vec<usize>,
}

/// Seed features still attached to a graph.
#[derive(Clone, Debug)]
pub struct SeedVars {
    pub coords: Matrix,
    pub feats: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<EdgeConv>,
    /// Grouping: `max_j ReLU([f_j; x_j - s]·W + b)` over the k-NN of seed `s`.
    pub group_feat: ParamId,
    pub group_rel: ParamId,
    pub group_bias: ParamId,
    pub proj: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![3];
        dims.extend(&config.widths);
        dims.push(config.channels);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| EdgeConv::new(store, &format!("backbone.edge{i}"), w[0], w[1], rng))
            .collect();
        let c = config.channels;
        let gw = glorot(rng, c + 3, c);
        let (top, bottom) = gw.data().split_at(c * c);
        let group_feat = store.add(
            "backbone.group.w_feat",
            Matrix::from_vec(c, c, top.to_vec()).expect("sized"),
        );
        let group_rel = store.add(
            "backbone.group.w_rel",
            Matrix::from_vec(3, c, bottom.to_vec()).expect("sized"),
        );
        let group_bias = store.add("backbone.group.bias", Matrix::zeros(1, c));
        let proj = Linear::new(store, "backbone.proj", c, c, rng);
        Self {
            config,
            layers,
            group_feat,
            group_rel,
            group_bias,
            proj,
        }
    }

    /// Records the backbone on `g`. The seed set starts from the point
    /// closest to the origin.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
    ) -> Result<SeedVars> {
        let pts = cloud.points();
        let cfg = &self.config;
        let need = cfg.num_seeds.max(cfg.k).max(cfg.group_k).max(1);
        if pts.len() < need {
            return Err(Error::TooFewPoints {
                have: pts.len(),
                need,
            });
        }
        let coords_all = cloud.to_matrix();
        let nbrs = geometry::knn(pts, pts, cfg.k);
        let mut f = g.constant(coords_all.clone());
        for layer in &self.layers {
            f = layer.forward(g, store, f, &nbrs, cfg.k);
        }

        let start = geometry::nearest_to_origin(pts).expect("non-empty");
        let indices = geometry::farthest_point_sampling(pts, cfg.num_seeds, start);
        let seeds: Vec<[f64; 3]> = indices.iter().map(|&i| pts[i]).collect();
        let gk = cfg.group_k;
        let group = geometry::knn(&seeds, pts, gk);

        // [f_j; x_j - s]·[Wf; Wr] = f_j·Wf + x_j·Wr - s·Wr
        let wf = g.param(store, self.group_feat);
        let wr = g.param(store, self.group_rel);
        let b = g.param(store, self.group_bias);
        let xall = g.constant(coords_all);
        let seed_m = Matrix::from_points(&seeds);
        let xs = g.constant(seed_m.clone());
        let pf = g.matmul(f, wf);
        let px = g.matmul(xall, wr);
        let per_point = g.add(pf, px);
        let per_seed = g.matmul(xs, wr);
        let centres: Vec<usize> = (0..seeds.len())
            .flat_map(|i| std::iter::repeat_n(i, gk))
            .collect();
        let pj = g.gather_rows(per_point, group);
        let si = g.gather_rows(per_seed, centres);
        let e = g.sub(pj, si);
        let e = g.add_row(e, b);
        let e = g.relu(e);
        let pooled = g.group_max(e, gk);
        let feats = self.proj.forward(g, store, pooled);
        Ok(SeedVars {
            coords: seed_m,
            feats,
            indices,
        })
    }

    /// Inference-only feature extraction.
    pub fn extract_features(&self, store: &ParamStore, cloud: &PointCloud) -> Result<SeedFeatures> {
        let mut g = Graph::inference();
        let s = self.forward(&mut g, store, cloud)?;
        Ok(SeedFeatures {
            coords: s.coords,
            feats: g.value(s.feats).clone(),
            indices: s.indices,
        })
    }
}

/// Transfers a full-resolution mask onto the seeds: each seed takes the value
/// of its nearest input point.
pub fn downsample_mask(
    full_mask: &TargetnessMask,
    cloud: &PointCloud,
    seed_coords: &Matrix,
) -> Result<TargetnessMask> {
    if full_mask.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "mask of {} values for {} points",
            full_mask.len(),
            cloud.len()
        )));
    }
    let seeds = seed_coords.to_points();
    let nn = geometry::knn(&seeds, cloud.points(), 1);
    TargetnessMask::new(nn.iter().map(|&j| full_mask.values()[j]).collect())
}

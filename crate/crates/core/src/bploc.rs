//! Box-prior localization: Hough voting for coarse centres, proposal
//! sampling, reference grids sized by the first-frame box, point-to-reference
//! aggregation into dense maps and a small 3D CNN that refines each proposal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var, PAD};
use crate::geometry::{self, Motion4DOF, TargetnessMask};
use crate::nn::{glorot, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BplocConfig {
    pub channels: usize,
    /// Proposal count `N_p`.
    pub num_proposals: usize,
    /// Reference points per axis `(n_x, n_y, n_z)`.
    pub grid: [usize; 3],
    /// Seeds aggregated into each reference point.
    pub k: usize,
    /// Concatenate the coarse quality score before the final head.
    pub quality_fusion: bool,
}

impl Default for BplocConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            num_proposals: 16,
            grid: [4, 4, 4],
            k: 8,
            quality_fusion: true,
        }
    }
}

/// Reference grid around `center`, lexicographic in `(i, j, k)`.
///
/// Offsets along axis `a` are `(2i - n_a - 1) / (2 n_a) · extent_a` for
/// `i = 1..=n_a`; `extents` are given per canonical axis.
pub fn box_prior_reference_points(
    center: [f64; 3],
    extents: [f64; 3],
    counts: [usize; 3],
) -> Vec<[f64; 3]> {
    let offsets = grid_offsets(extents, counts);
    offsets
        .iter()
        .map(|o| [center[0] + o[0], center[1] + o[1], center[2] + o[2]])
        .collect()
}

/// The grid of [`box_prior_reference_points`] around the origin.
pub fn grid_offsets(extents: [f64; 3], counts: [usize; 3]) -> Vec<[f64; 3]> {
    let axis = |a: usize| -> Vec<f64> {
        let n = counts[a] as f64;
        (1..=counts[a])
            .map(|i| (2.0 * i as f64 - n - 1.0) / (2.0 * n) * extents[a])
            .collect()
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// `n_x × n_y × n_z × C` feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    dims: [usize; 3],
    cells: Matrix,
}

/// Arranges per-reference features into the grid order of
/// [`box_prior_reference_points`].
pub fn assemble_dense_map(ref_feats: &Matrix, dims: [usize; 3]) -> Result<DenseMap> {
    let r = dims.iter().product::<usize>();
    if r == 0 || ref_feats.rows() != r {
        return Err(Error::Shape(format!(
            "{} reference rows for a {dims:?} grid",
            ref_feats.rows()
        )));
    }
    Ok(DenseMap {
        dims,
        cells: ref_feats.clone(),
    })
}

impl DenseMap {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.cells.cols()
    }

    /// Shape as `(n_x, n_y, n_z, C)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2], self.cells.cols())
    }

    /// Features of cell `(i, j, k)`, zero-based.
    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let [_, ny, nz] = self.dims;
        self.cells.row((i * ny + j) * nz + k)
    }

    pub fn flatten(&self) -> Matrix {
        self.cells.clone()
    }
}

/// Row indices for a 3×3×3 zero-padded convolution over `blocks` stacked grids:
/// for every cell, its 27 neighbours in `(di, dj, dk)` lexicographic order.
fn conv_gather_index(dims: [usize; 3], blocks: usize) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let r = nx * ny * nz;
    let mut idx = Vec::with_capacity(blocks * r * 27);
    for b in 0..blocks {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            for dk in -1i64..=1 {
                                let (a, c, e) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                                let inside = (0..nx as i64).contains(&a)
                                    && (0..ny as i64).contains(&c)
                                    && (0..nz as i64).contains(&e);
                                idx.push(if inside {
                                    b * r + ((a as usize * ny + c as usize) * nz + e as usize)
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Farthest point sampling over voted centres, starting from the centre
/// nearest the origin.
pub fn sample_proposals(centers: &[[f64; 3]], n: usize) -> Result<Vec<usize>> {
    if n > centers.len() || n == 0 {
        return Err(Error::ProposalCount {
            requested: n,
            available: centers.len(),
        });
    }
    let start = geometry::nearest_to_origin(centers).expect("non-empty");
    Ok(geometry::farthest_point_sampling(centers, n, start))
}

/// Argmax of `scores` with ties to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Coarse per-seed predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutput {
    pub centers: Matrix,
    pub mask: TargetnessMask,
    pub quality: Vec<f64>,
}

/// Coarse predictions attached to a graph.
#[derive(Clone, Copy, Debug)]
pub struct VoteVars {
    /// `N×3` seed coordinates plus offsets.
    pub centers: Var,
    pub mask_logits: Var,
    pub quality_logits: Var,
}

/// Proposals after refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// Source seed of each proposal.
    pub indices: Vec<usize>,
    pub centers: Matrix,
    /// Flattened dense maps, `N_p·R × C`.
    pub dense_maps: Matrix,
    /// `N_p×4`: translation residual from the proposal centre, then heading change.
    pub box_params: Matrix,
    pub scores: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Final centre of proposal `p`: proposal centre plus residual.
    pub fn final_center(&self, p: usize) -> [f64; 3] {
        let c = self.centers.row(p);
        let b = self.box_params.row(p);
        [c[0] + b[0], c[1] + b[1], c[2] + b[2]]
    }

    pub fn dense_map(&self, p: usize, dims: [usize; 3]) -> Result<DenseMap> {
        let r = dims.iter().product::<usize>();
        let c = self.dense_maps.cols();
        let rows = self.dense_maps.data()[p * r * c..(p + 1) * r * c].to_vec();
        assemble_dense_map(&Matrix::from_vec(r, c, rows)?, dims)
    }
}

/// Proposals attached to a graph.
#[derive(Clone, Debug)]
pub struct ProposalVars {
    pub indices: Vec<usize>,
    pub centers: Var,
    pub dense_maps: Var,
    pub box_params: Var,
    pub score_logits: Var,
}

/// Picks the best-scoring proposal and reads out its motion in the
/// canonical frame.
pub fn select_best(proposals: &ProposalSet) -> Result<(usize, Motion4DOF)> {
    if proposals.is_empty() {
        return Err(Error::ProposalCount {
            requested: 1,
            available: 0,
        });
    }
    let best = argmax(&proposals.scores);
    let c = proposals.final_center(best);
    let m = Motion4DOF::new(c[0], c[1], c[2], proposals.box_params.get(best, 3));
    if !m.is_finite() {
        return Err(Error::NonFinite("selected motion".into()));
    }
    Ok((best, m))
}

#[derive(Clone, Copy, Debug)]
struct Conv3d {
    weight: ParamId,
    bias: ParamId,
}

impl Conv3d {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot(rng, 27 * c_in, c_out)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, c_out)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, index: &[usize]) -> Var {
        let (_, c) = g.shape(x);
        let cols = g.gather_rows(x, index.to_vec());
        let cols = g.reshape(cols, index.len() / 27, 27 * c);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w);
        let y = g.add_row(y, b);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Bploc {
    pub config: BplocConfig,
    vote: Mlp,
    seed_proj: Linear,
    edge_feat: ParamId,
    edge_rel: ParamId,
    edge_abs: ParamId,
    edge_bias: ParamId,
    edge_out: Linear,
    conv1: Conv3d,
    conv2: Conv3d,
    head: Mlp,
}

impl Bploc {
    pub fn new(store: &mut ParamStore, config: BplocConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let vote = Mlp::new(store, "bploc.vote", &[c, c, 5], rng);
        let seed_proj = Linear::new(store, "bploc.seed_proj", c + 1, c, rng);
        let w = glorot(rng, c + 6, c);
        let rows = |from: usize, to: usize| {
            Matrix::from_vec(to - from, c, w.data()[from * c..to * c].to_vec()).expect("sized")
        };
        let edge_feat = store.add("bploc.edge.w_feat", rows(0, c));
        let edge_rel = store.add("bploc.edge.w_rel", rows(c, c + 3));
        let edge_abs = store.add("bploc.edge.w_abs", rows(c + 3, c + 6));
        let edge_bias = store.add("bploc.edge.bias", Matrix::zeros(1, c));
        let edge_out = Linear::new(store, "bploc.edge.out", c, c, rng);
        let conv1 = Conv3d::new(store, "bploc.conv1", c, c, rng);
        let conv2 = Conv3d::new(store, "bploc.conv2", c, c, rng);
        let head_in = c + usize::from(config.quality_fusion);
        let head = Mlp::new(store, "bploc.head", &[head_in, c, 5], rng);
        Self {
            config,
            vote,
            seed_proj,
            edge_feat,
            edge_rel,
            edge_abs,
            edge_bias,
            edge_out,
            conv1,
            conv2,
            head,
        }
    }

    pub fn cells(&self) -> usize {
        self.config.grid.iter().product()
    }

    /// Parameter-name prefix of the refinement head's output layer.
    pub fn head_output_prefix(&self) -> String {
        format!("bploc.head.{}", self.head.layers.len() - 1)
    }

    /// Parameter-name prefix of the voting network's output layer.
    pub fn vote_output_prefix(&self) -> String {
        format!("bploc.vote.{}", self.vote.layers.len() - 1)
    }

    /// Per-seed offsets, mask logit and quality logit.
    pub fn vote(&self, g: &mut Graph, store: &ParamStore, fused: Var, coords: &Matrix) -> VoteVars {
        let out = self.vote.forward(g, store, fused);
        let offsets = g.slice_cols(out, 0, 3);
        let base = g.constant(coords.clone());
        VoteVars {
            centers: g.add(base, offsets),
            mask_logits: g.slice_cols(out, 3, 4),
            quality_logits: g.slice_cols(out, 4, 5),
        }
    }

    pub fn vote_centers(
        &self,
        store: &ParamStore,
        fused: &Matrix,
        coords: &Matrix,
    ) -> Result<VoteOutput> {
        let mut g = Graph::inference();
        let f = g.constant(fused.clone());
        let v = self.vote(&mut g, store, f, coords);
        vote_values(&g, &v)
    }

    /// `max` over the `k` nearest seeds of each reference of
    /// `e([h([f_j; m_j]); x_j - r; r])`.
    #[allow(clippy::too_many_arguments)]
    pub fn point_to_reference(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: Var,
        mask: Var,
        coords: &Matrix,
        refs: Var,
        k: usize,
    ) -> Result<Var> {
        let n = coords.rows();
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!("k = {k} with {n} seeds")));
        }
        let seeds = coords.to_points();
        let ref_pts = g.value(refs).to_points();
        let nbrs = geometry::knn(&ref_pts, &seeds, k);

        let fm = g.concat_cols(&[feats, mask]);
        let fhat = self.seed_proj.forward(g, store, fm);
        let fhat = g.relu(fhat);
        // [f̂_j; x_j - r; r]·[Wf; Wr; Wa] = (f̂_j·Wf + x_j·Wr) + r·(Wa - Wr)
        let wf = g.param(store, self.edge_feat);
        let wr = g.param(store, self.edge_rel);
        let wa = g.param(store, self.edge_abs);
        let b = g.param(store, self.edge_bias);
        let x = g.constant(coords.clone());
        let pf = g.matmul(fhat, wf);
        let px = g.matmul(x, wr);
        let per_seed = g.add(pf, px);
        let ra = g.matmul(refs, wa);
        let rr = g.matmul(refs, wr);
        let per_ref = g.sub(ra, rr);
        let owners: Vec<usize> = (0..ref_pts.len())
            .flat_map(|i| std::iter::repeat_n(i, k))
            .collect();
        let ej = g.gather_rows(per_seed, nbrs);
        let er = g.gather_rows(per_ref, owners);
        let e = g.add(ej, er);
        let e = g.add_row(e, b);
        let e = g.relu(e);
        let e = self.edge_out.forward(g, store, e);
        let e = g.relu(e);
        Ok(g.group_max(e, k))
    }

    /// Two 3×3×3 convolutions, a global max pool, optional quality fusion and
    /// the box/score head. `dense` stacks the proposals' grids row-wise.
    pub fn cnn3d_refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dense: Var,
        quality: Var,
    ) -> (Var, Var) {
        let r = self.cells();
        let blocks = g.shape(dense).0 / r;
        let index = conv_gather_index(self.config.grid, blocks);
        let h = self.conv1.forward(g, store, dense, &index);
        let h = self.conv2.forward(g, store, h, &index);
        let pooled = g.group_max(h, r);
        let input = if self.config.quality_fusion {
            g.concat_cols(&[pooled, quality])
        } else {
            pooled
        };
        let out = self.head.forward(g, store, input);
        (g.slice_cols(out, 0, 4), g.slice_cols(out, 4, 5))
    }

    /// Refines the proposals whose centres are `centers` (`N_p×3`).
    /// `indices` name each proposal's source seed.
    #[allow(clippy::too_many_arguments)]
    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        vote: &VoteVars,
        coords: &Matrix,
        indices: &[usize],
        centers: Var,
        extents: [f64; 3],
    ) -> Result<ProposalVars> {
        let np = indices.len();
        if np == 0 || g.shape(centers) != (np, 3) {
            return Err(Error::Shape(format!(
                "{np} proposal indices with centres {:?}",
                g.shape(centers)
            )));
        }
        if extents.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidInput(format!("grid extents {extents:?}")));
        }
        let r = self.cells();
        let owners: Vec<usize> = (0..np).flat_map(|p| std::iter::repeat_n(p, r)).collect();
        let offsets = grid_offsets(extents, self.config.grid);
        let tiled: Vec<[f64; 3]> = (0..np).flat_map(|_| offsets.iter().copied()).collect();
        let base = g.gather_rows(centers, owners);
        let off = g.constant(Matrix::from_points(&tiled));
        let refs = g.add(base, off);
        let mask = g.sigmoid(vote.mask_logits);
        let k = self.config.k.min(coords.rows());
        let dense = self.point_to_reference(g, store, fused, mask, coords, refs, k)?;
        let quality = g.sigmoid(vote.quality_logits);
        let q = g.gather_rows(quality, indices.to_vec());
        let (box_params, score_logits) = self.cnn3d_refine(g, store, dense, q);
        Ok(ProposalVars {
            indices: indices.to_vec(),
            centers,
            dense_maps: dense,
            box_params,
            score_logits,
        })
    }

    /// Inference: vote, sample proposals, refine.
    pub fn localize(
        &self,
        store: &ParamStore,
        fused: &Matrix,
        coords: &Matrix,
        extents: [f64; 3],
    ) -> Result<(VoteOutput, ProposalSet)> {
        let mut g = Graph::inference();
        let f = g.constant(fused.clone());
        let vote = self.vote(&mut g, store, f, coords);
        let vals = vote_values(&g, &vote)?;
        let idx = sample_proposals(
            &vals.centers.to_points(),
            self.config.num_proposals.min(coords.rows()),
        )?;
        let centers = g.gather_rows(vote.centers, idx.clone());
        let props = self.refine(&mut g, store, f, &vote, coords, &idx, centers, extents)?;
        Ok((vals, proposal_values(&g, &props)?))
    }
}

pub fn vote_values(g: &Graph, v: &VoteVars) -> Result<VoteOutput> {
    let centers = g.value(v.centers).clone();
    if !centers.is_finite() {
        return Err(Error::NonFinite("voted centres".into()));
    }
    let mask = TargetnessMask::new(
        g.value(v.mask_logits)
            .data()
            .iter()
            .map(|&x| sigmoid(x))
            .collect(),
    )?;
    let quality = g
        .value(v.quality_logits)
        .data()
        .iter()
        .map(|&x| sigmoid(x))
        .collect();
    Ok(VoteOutput {
        centers,
        mask,
        quality,
    })
}

pub fn proposal_values(g: &Graph, p: &ProposalVars) -> Result<ProposalSet> {
    let box_params = g.value(p.box_params).clone();
    if !box_params.is_finite() {
        return Err(Error::NonFinite("box parameters".into()));
    }
    Ok(ProposalSet {
        indices: p.indices.clone(),
        centers: g.value(p.centers).clone(),
        dense_maps: g.value(p.dense_maps).clone(),
        box_params,
        scores: g
            .value(p.score_logits)
            .data()
            .iter()
            .map(|&x| sigmoid(x))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn toy(cfg: BplocConfig, seed: u64) -> (ParamStore, Bploc, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = Bploc::new(&mut store, cfg, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") {
                let v = rmat(&mut rng, 1, store.get(id).cols()).map(|x| 0.05 * x);
                *store.get_mut(id) = v;
            }
        }
        (store, b, rng)
    }

    fn small() -> BplocConfig {
        BplocConfig {
            channels: 8,
            num_proposals: 4,
            grid: [2, 2, 2],
            k: 3,
            quality_fusion: true,
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(
            box_prior_reference_points([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [1, 1, 1]),
            vec![[1.0, 2.0, 3.0]]
        );
        let g = grid_offsets([2.0, 1.0, 1.0], [2, 1, 1]);
        assert_eq!(g, vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let g = grid_offsets([3.0, 1.0, 1.0], [3, 1, 1]);
        let xs: Vec<f64> = g.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_is_lexicographic() {
        let g = grid_offsets([1.0, 1.0, 1.0], [2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let p = g[(i * 3 + j) * 4 + k];
                    assert!((p[0] - ((2 * i + 1) as f64 / 4.0 - 0.5)).abs() < 1e-12);
                    assert!((p[1] - ((2 * j + 1) as f64 / 6.0 - 0.5)).abs() < 1e-12);
                    assert!((p[2] - ((2 * k + 1) as f64 / 8.0 - 0.5)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_map_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = rmat(&mut rng, 8, 5);
        let d = assemble_dense_map(&m, [2, 2, 2]).unwrap();
        assert_eq!(d.shape(), (2, 2, 2, 5));
        assert_eq!(d.flatten(), m);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(d.cell(i, j, k), m.row(i * 4 + j * 2 + k));
                }
            }
        }
        assert!(assemble_dense_map(&m, [2, 2, 3]).is_err());
    }

    #[test]
    fn proposal_sampling() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        assert_eq!(sample_proposals(&pts, 4).unwrap().len(), 4);
        assert_eq!(sample_proposals(&pts, 1).unwrap(), vec![0]);
        let mut two = sample_proposals(&pts, 2).unwrap();
        two.sort();
        assert_eq!(two, vec![0, 3]);
        assert!(matches!(
            sample_proposals(&pts, 5),
            Err(Error::ProposalCount {
                requested: 5,
                available: 4
            })
        ));
    }

    fn set(scores: Vec<f64>) -> ProposalSet {
        let n = scores.len();
        ProposalSet {
            indices: (0..n).collect(),
            centers: Matrix::zeros(n, 3),
            dense_maps: Matrix::zeros(n, 1),
            box_params: Matrix::zeros(n, 4),
            scores,
        }
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_best(&set(vec![0.1, 0.9, 0.3])).unwrap().0, 1);
        assert_eq!(select_best(&set(vec![0.4; 3])).unwrap().0, 0);
        let mut p = set(vec![0.9]);
        p.centers.set(0, 0, 1.0);
        p.box_params.set(0, 0, 0.1);
        p.box_params.set(0, 3, 0.05);
        let (_, m) = select_best(&p).unwrap();
        assert!((m.dx - 1.1).abs() < 1e-15 && m.dy == 0.0 && m.dz == 0.0 && m.dtheta == 0.05);
        assert!(select_best(&set(vec![])).is_err());
    }

    #[test]
    fn zero_vote_network() {
        let (mut store, b, mut rng) = toy(small(), 1);
        store.zero_prefix("bploc.vote");
        let coords = rmat(&mut rng, 6, 3);
        let v = b
            .vote_centers(&store, &rmat(&mut rng, 6, 8), &coords)
            .unwrap();
        assert_eq!(v.centers, coords);
        assert!(v.mask.values().iter().all(|&m| m == 0.5));
        assert!(v.quality.iter().all(|&q| q == 0.5));
        assert_eq!(v.quality.len(), 6);
    }

    fn brute_p2r(
        store: &ParamStore,
        b: &Bploc,
        feats: &Matrix,
        mask: &[f64],
        coords: &Matrix,
        refs: &[[f64; 3]],
        k: usize,
    ) -> Matrix {
        let c = feats.cols();
        let w = |id: ParamId| store.get(id).clone();
        let (hw, hb) = (w(b.seed_proj.weight), w(b.seed_proj.bias));
        let (wf, wr, wa, eb) = (w(b.edge_feat), w(b.edge_rel), w(b.edge_abs), w(b.edge_bias));
        let (ow, ob) = (w(b.edge_out.weight), w(b.edge_out.bias));
        let n = coords.rows();
        let fhat: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut input = feats.row(j).to_vec();
                input.push(mask[j]);
                (0..c)
                    .map(|o| {
                        (hb.get(0, o) + (0..=c).map(|i| input[i] * hw.get(i, o)).sum::<f64>())
                            .max(0.0)
                    })
                    .collect()
            })
            .collect();
        let mut out = Matrix::zeros(refs.len(), c);
        for (ri, r) in refs.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &bb| {
                geometry::dist2(coords.point(a), *r)
                    .partial_cmp(&geometry::dist2(coords.point(bb), *r))
                    .unwrap()
                    .then(a.cmp(&bb))
            });
            let mut best = vec![f64::NEG_INFINITY; c];
            for &j in &order[..k] {
                let x = coords.point(j);
                let mut input = fhat[j].clone();
                input.extend([x[0] - r[0], x[1] - r[1], x[2] - r[2]]);
                input.extend(*r);
                let hidden: Vec<f64> = (0..c)
                    .map(|o| {
                        let mut s = eb.get(0, o);
                        for i in 0..c {
                            s += input[i] * wf.get(i, o);
                        }
                        for a in 0..3 {
                            s += input[c + a] * wr.get(a, o) + input[c + 3 + a] * wa.get(a, o);
                        }
                        s.max(0.0)
                    })
                    .collect();
                for o in 0..c {
                    let v = (ob.get(0, o) + (0..c).map(|i| hidden[i] * ow.get(i, o)).sum::<f64>())
                        .max(0.0);
                    best[o] = best[o].max(v);
                }
            }
            out.row_mut(ri).copy_from_slice(&best);
        }
        out
    }

    fn run_p2r(
        store: &ParamStore,
        b: &Bploc,
        feats: &Matrix,
        mask: &[f64],
        coords: &Matrix,
        refs: &[[f64; 3]],
        k: usize,
    ) -> Matrix {
        let mut g = Graph::inference();
        let f = g.constant(feats.clone());
        let m = g.constant(Matrix::column(mask));
        let r = g.constant(Matrix::from_points(refs));
        let out = b
            .point_to_reference(&mut g, store, f, m, coords, r, k)
            .unwrap();
        g.value(out).clone()
    }

    #[test]
    fn point_to_reference_matches_brute_force() {
        let (store, b, mut rng) = toy(small(), 2);
        let feats = rmat(&mut rng, 10, 8);
        let mask: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let coords = rmat(&mut rng, 10, 3);
        let mut refs: Vec<[f64; 3]> = rmat(&mut rng, 6, 3).to_points();
        refs[5] = refs[2];
        let got = run_p2r(&store, &b, &feats, &mask, &coords, &refs, 3);
        let want = brute_p2r(&store, &b, &feats, &mask, &coords, &refs, 3);
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert_eq!(got.row(2), got.row(5));

        // k = 1 reads only the nearest seed
        let one = run_p2r(&store, &b, &feats, &mask, &coords, &refs, 1);
        let nn = geometry::knn(&refs, &coords.to_points(), 1);
        let mut feats2 = feats.clone();
        for j in 0..10 {
            if !nn.contains(&j) {
                feats2.row_mut(j).fill(7.0);
            }
        }
        assert_eq!(one, run_p2r(&store, &b, &feats2, &mask, &coords, &refs, 1));
    }

    #[test]
    fn point_to_reference_ignores_seed_order() {
        let (store, b, mut rng) = toy(small(), 3);
        let feats = rmat(&mut rng, 10, 8);
        let mask: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let coords = rmat(&mut rng, 10, 3);
        let refs = rmat(&mut rng, 5, 3).to_points();
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 5, 8, 2, 6, 4];
        let pf = Matrix::from_rows(
            &perm
                .iter()
                .map(|&i| feats.row(i).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let pc = Matrix::from_rows(
            &perm
                .iter()
                .map(|&i| coords.row(i).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let pm: Vec<f64> = perm.iter().map(|&i| mask[i]).collect();
        let a = run_p2r(&store, &b, &feats, &mask, &coords, &refs, 4);
        let c = run_p2r(&store, &b, &pf, &pm, &pc, &refs, 4);
        assert_eq!(a, c);
    }

    fn refine_values(
        store: &ParamStore,
        b: &Bploc,
        dense: &Matrix,
        q: &[f64],
    ) -> (Matrix, Vec<f64>) {
        let mut g = Graph::inference();
        let d = g.constant(dense.clone());
        let qv = g.constant(Matrix::column(q));
        let (bp, s) = b.cnn3d_refine(&mut g, store, d, qv);
        (
            g.value(bp).clone(),
            g.value(s).data().iter().map(|&x| sigmoid(x)).collect(),
        )
    }

    #[test]
    fn refine_contract() {
        let (mut store, b, mut rng) = toy(small(), 4);
        let dense = rmat(&mut rng, 3 * 8, 8);
        let q = [0.2, 0.5, 0.9];
        let (bp, s) = refine_values(&store, &b, &dense, &q);
        assert_eq!(bp.shape(), (3, 4));
        assert_eq!(s.len(), 3);

        let perm = [2usize, 0, 1];
        let mut pd = Matrix::zeros(24, 8);
        for (dst, &src) in perm.iter().enumerate() {
            for r in 0..8 {
                pd.row_mut(dst * 8 + r)
                    .copy_from_slice(dense.row(src * 8 + r));
            }
        }
        let pq: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let (bp2, s2) = refine_values(&store, &b, &pd, &pq);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(bp2.row(dst), bp.row(src));
            assert_eq!(s2[dst], s[src]);
        }

        store.zero_prefix(&b.head_output_prefix());
        let (bp, s) = refine_values(&store, &b, &dense, &q);
        assert!(bp.data().iter().all(|&v| v == 0.0));
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let (store, b, mut rng) = toy(small(), 5);
        let dims = [2usize, 3, 2];
        let x = rmat(&mut rng, 12, 8);
        let idx = conv_gather_index(dims, 1);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = b.conv1.forward(&mut g, &store, xv, &idx);
        let y = g.value(y).clone();
        let w = store.get(b.conv1.weight);
        let bias = store.get(b.conv1.bias);
        let cell = |i: i64, j: i64, k: i64| -> Option<usize> {
            ((0..2).contains(&i) && (0..3).contains(&j) && (0..2).contains(&k))
                .then(|| ((i * 3 + j) * 2 + k) as usize)
        };
        for i in 0..2i64 {
            for j in 0..3i64 {
                for k in 0..2i64 {
                    for o in 0..8 {
                        let mut s = bias.get(0, o);
                        let mut t = 0;
                        for di in -1..=1 {
                            for dj in -1..=1 {
                                for dk in -1..=1 {
                                    if let Some(src) = cell(i + di, j + dj, k + dk) {
                                        for ci in 0..8 {
                                            s += x.get(src, ci) * w.get(t * 8 + ci, o);
                                        }
                                    }
                                    t += 1;
                                }
                            }
                        }
                        let got = y.get(cell(i, j, k).unwrap(), o);
                        assert!((got - s.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, b, mut rng) = toy(small(), 6);
        let fused = rmat(&mut rng, 8, 8);
        let coords = rmat(&mut rng, 8, 3);
        let probe_b = rmat(&mut rng, 4, 4);
        let probe_s = rmat(&mut rng, 4, 1);
        let loss = |store: &ParamStore, g: &mut Graph| {
            let f = g.variable(fused.clone());
            let v = b.vote(g, store, f, &coords);
            let idx: Vec<usize> = vec![0, 2, 5, 7];
            let centers = g.gather_rows(v.centers, idx.clone());
            let p = b
                .refine(g, store, f, &v, &coords, &idx, centers, [1.5, 1.0, 0.8])
                .unwrap();
            let pb = g.constant(probe_b.clone());
            let ps = g.constant(probe_s.clone());
            let x = g.mul(p.box_params, pb);
            let y = g.mul(p.score_logits, ps);
            let (x, y) = (g.sum(x), g.sum(y));
            let m = g.sigmoid(v.mask_logits);
            let m = g.mean(m);
            let s = g.add(x, y);
            (g.add(s, m), f)
        };
        let mut g = Graph::new();
        let (l, f) = loss(&store, &mut g);
        let grads = g.backward(l);
        let h = 1e-5;
        let eval = |store: &ParamStore| {
            let mut g = Graph::inference();
            let (v, _) = loss(store, &mut g);
            g.value(v).get(0, 0)
        };
        let mut worst: f64 = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads.param(id).cloned().expect("every parameter is used");
            for e in 0..analytic.len() {
                let orig = store.get(id).data()[e];
                store.get_mut(id).data_mut()[e] = orig + h;
                let fp = eval(&store);
                store.get_mut(id).data_mut()[e] = orig - h;
                let fm = eval(&store);
                store.get_mut(id).data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[e];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        assert!(grads.wrt(f).is_some());
    }

    #[test]
    fn localize_runs_end_to_end() {
        let (store, b, mut rng) = toy(small(), 7);
        let (v, p) = b
            .localize(
                &store,
                &rmat(&mut rng, 8, 8),
                &rmat(&mut rng, 8, 3),
                [1.0, 1.0, 1.0],
            )
            .unwrap();
        assert_eq!(v.centers.shape(), (8, 3));
        assert_eq!(p.len(), 4);
        assert_eq!(p.dense_maps.shape(), (32, 8));
        assert_eq!(p.dense_map(1, [2, 2, 2]).unwrap().shape(), (2, 2, 2, 8));
        let (best, _) = select_best(&p).unwrap();
        assert!(best < 4);
    }
}

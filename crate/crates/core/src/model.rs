//! The full network: backbone, memory propagation and box-prior localization,
//! with the per-frame forward passes used by tracking and training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{downsample_mask, Backbone, BackboneConfig};
use crate::bploc::{self, Bploc, BplocConfig, ProposalSet, ProposalVars, VoteOutput, VoteVars};
use crate::defpm::{AttentionRecord, Defpm, DefpmConfig, FrameEntry};
use crate::geometry::{points_in_box, Box3D, Motion4DOF, PointCloud, TargetnessMask};
use crate::nn::ParamStore;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub defpm: DefpmConfig,
    pub bploc: BplocConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            defpm: DefpmConfig::default(),
            bploc: BplocConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.backbone.channels;
        let bad = |msg: String| Err(Error::Config(msg));
        if c == 0 || self.defpm.attn_dim == 0 {
            return bad("channels and attn_dim must be positive".into());
        }
        if self.defpm.channels != c || self.bploc.channels != c {
            return bad(format!(
                "channel widths disagree: backbone {c}, defpm {}, bploc {}",
                self.defpm.channels, self.bploc.channels
            ));
        }
        if self.defpm.num_heads == 0 || self.defpm.attn_dim % self.defpm.num_heads != 0 {
            return bad(format!(
                "attn_dim {} is not divisible by num_heads {}",
                self.defpm.attn_dim, self.defpm.num_heads
            ));
        }
        if self.defpm.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.backbone.num_seeds == 0 || self.backbone.k == 0 || self.backbone.group_k == 0 {
            return bad("num_seeds, backbone_k and group_k must be positive".into());
        }
        if self.bploc.num_proposals == 0 || self.bploc.num_proposals > self.backbone.num_seeds {
            return bad(format!(
                "num_proposals {} must be in 1..={}",
                self.bploc.num_proposals, self.backbone.num_seeds
            ));
        }
        if self.bploc.grid.contains(&0) || self.bploc.k == 0 {
            return bad("grid counts and ref_k must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub defpm: Defpm,
    pub bploc: Bploc,
}

/// Everything a tracked frame produces at inference time.
#[derive(Clone, Debug)]
pub struct FrameInference {
    pub seed_coords: Matrix,
    pub write_feats: Vec<Matrix>,
    pub vote: VoteOutput,
    pub proposals: ProposalSet,
}

/// Graph handles of a frame recorded for training.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub seed_coords: Matrix,
    pub write_feats: Vec<Var>,
    pub vote: VoteVars,
    pub proposals: ProposalVars,
}

/// Replacement of proposal centres before refinement.
pub type ProposalHook<'a> = &'a mut dyn FnMut(&Matrix) -> Result<(Matrix, Vec<bool>)>;

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config.backbone.clone(), rng);
        let defpm = Defpm::new(&mut params, config.defpm.clone(), rng);
        let bploc = Bploc::new(&mut params, config.bploc.clone(), rng);
        Ok(Self {
            config,
            params,
            backbone,
            defpm,
            bploc,
        })
    }

    /// Initialization drawn from a ChaCha stream keyed by `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Points the search region must contain.
    pub fn min_points(&self) -> usize {
        let b = &self.config.backbone;
        b.num_seeds.max(b.k).max(b.group_k)
    }

    /// Memory entry for the first frame. `cloud` is canonical in the frame of
    /// `gt_box` (also canonical). Raw backbone features seed a one-entry
    /// memory, the frame is propagated against it and the write networks
    /// produce the stored features.
    pub fn initial_entry(
        &self,
        store: &ParamStore,
        cloud: &PointCloud,
        gt_box: &Box3D,
    ) -> Result<FrameEntry> {
        let seeds = self.backbone.extract_features(store, cloud)?;
        let full = points_in_box(cloud, gt_box);
        let mask = downsample_mask(&full, cloud, &seeds.coords)?;
        let raw = FrameEntry::new(
            seeds.coords.clone(),
            vec![seeds.feats.clone(); self.defpm.num_layers()],
            mask.clone(),
        )?;
        let mut g = Graph::inference();
        let feats = g.constant(seeds.feats);
        let out = self
            .defpm
            .forward(&mut g, store, &seeds.coords, feats, &mask, &[&raw], None)?;
        FrameEntry::new(
            seeds.coords,
            out.write_feats
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
            mask,
        )
    }

    /// Records backbone, propagation and localization for one canonical
    /// search region. `proposal_hook` may replace proposal centres.
    #[allow(clippy::too_many_arguments)]
    pub fn record_frame(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        memory: &[&FrameEntry],
        extents: [f64; 3],
        proposal_hook: Option<ProposalHook<'_>>,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<FrameRecord> {
        let seeds = self.backbone.forward(g, store, cloud)?;
        let n = seeds.coords.rows();
        let init = TargetnessMask::constant(n, 0.5);
        let prop =
            self.defpm
                .forward(g, store, &seeds.coords, seeds.feats, &init, memory, trace)?;
        let fused = g.add(prop.x, prop.y);
        let vote = self.bploc.vote(g, store, fused, &seeds.coords);
        let voted = g.value(vote.centers).to_points();
        let np = self.config.bploc.num_proposals.min(n);
        let idx = bploc::sample_proposals(&voted, np)?;
        let mut centers = g.gather_rows(vote.centers, idx.clone());
        if let Some(hook) = proposal_hook {
            let (values, replaced) = hook(g.value(centers))?;
            centers = crate::losses::override_rows(g, centers, &replaced, &values);
        }
        let proposals = self.bploc.refine(
            g,
            store,
            fused,
            &vote,
            &seeds.coords,
            &idx,
            centers,
            extents,
        )?;
        Ok(FrameRecord {
            seed_coords: seeds.coords,
            write_feats: prop.write_feats,
            vote,
            proposals,
        })
    }

    /// Inference for one canonical search region. `vote_override` may edit
    /// the coarse predictions before proposals are drawn from them.
    pub fn infer_frame(
        &self,
        cloud: &PointCloud,
        memory: &[&FrameEntry],
        extents: [f64; 3],
        vote_override: Option<&dyn Fn(&mut VoteOutput)>,
    ) -> Result<FrameInference> {
        let store = &self.params;
        let mut g = Graph::inference();
        let seeds = self.backbone.forward(&mut g, store, cloud)?;
        let n = seeds.coords.rows();
        let init = TargetnessMask::constant(n, 0.5);
        let prop = self.defpm.forward(
            &mut g,
            store,
            &seeds.coords,
            seeds.feats,
            &init,
            memory,
            None,
        )?;
        let fused = g.add(prop.x, prop.y);
        let vote = self.bploc.vote(&mut g, store, fused, &seeds.coords);
        let mut vals = bploc::vote_values(&g, &vote)?;
        let np = self.config.bploc.num_proposals.min(n);
        let (idx, centers) = match vote_override {
            Some(edit) => {
                edit(&mut vals);
                let idx = bploc::sample_proposals(&vals.centers.to_points(), np)?;
                let rows: Vec<Vec<f64>> =
                    idx.iter().map(|&i| vals.centers.row(i).to_vec()).collect();
                (idx.clone(), g.constant(Matrix::from_rows(&rows)?))
            }
            None => {
                let idx = bploc::sample_proposals(&vals.centers.to_points(), np)?;
                (idx.clone(), g.gather_rows(vote.centers, idx))
            }
        };
        let props = self.bploc.refine(
            &mut g,
            store,
            fused,
            &vote,
            &seeds.coords,
            &idx,
            centers,
            extents,
        )?;
        Ok(FrameInference {
            seed_coords: seeds.coords,
            write_feats: prop
                .write_feats
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
            vote: vals,
            proposals: bploc::proposal_values(&g, &props)?,
        })
    }
}

/// Seed coordinates of a frame re-expressed relative to the box reached by
/// `motion` from the frame's canonical origin.
pub fn coords_in_new_frame(coords: &Matrix, motion: &Motion4DOF) -> Matrix {
    let frame = Box3D {
        center: [motion.dx, motion.dy, motion.dz],
        size: crate::geometry::BoxSize {
            w: 1.0,
            l: 1.0,
            h: 1.0,
        },
        heading: motion.dtheta,
    };
    let pts: Vec<[f64; 3]> = coords
        .to_points()
        .into_iter()
        .map(|p| frame.to_canonical(p))
        .collect();
    Matrix::from_points(&pts)
}

//! Decoupled feature propagation from the memory bank into the current frame.
//!
//! Each layer runs pre-norm cross-attention against the memory, pre-norm
//! self-attention and a feed-forward refinement, on two parallel branches:
//! geometric features `X` and targetness (mask) features `Y`. The mask branch
//! never computes its own attention map; it reuses the geometric branch's
//! softmax weights verbatim. The geometric branch never reads `Y`.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::geometry::TargetnessMask;
use crate::nn::{glorot, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Which tensor feeds the per-layer memory-write network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteSource {
    /// The layer's output `X^(l)`.
    LayerOutput,
    /// The layer's input `X^(l-1)`.
    LayerInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefpmConfig {
    pub channels: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub write_source: WriteSource,
    /// Mask-branch self-attention reuses the geometric value projection.
    pub share_self_value: bool,
    /// Separate geometric and mask branches. When off, mask embeddings are
    /// added into the geometric stream and the mask branch is idle.
    pub decouple: bool,
}

impl Default for DefpmConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            attn_dim: 128,
            num_heads: 1,
            num_layers: 2,
            ffn_hidden: 256,
            write_source: WriteSource::LayerOutput,
            share_self_value: false,
            decouple: true,
        }
    }
}

/// One memory slot.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub coords: Matrix,
    /// One `N×C` reference feature matrix per layer.
    pub ref_feats: Vec<Matrix>,
    pub mask: TargetnessMask,
}

impl FrameEntry {
    pub fn new(coords: Matrix, ref_feats: Vec<Matrix>, mask: TargetnessMask) -> Result<Self> {
        let n = coords.rows();
        if coords.cols() != 3 || mask.len() != n || ref_feats.iter().any(|f| f.rows() != n) {
            return Err(Error::Shape(format!(
                "frame entry: {} coords, {} mask values, feature rows {:?}",
                n,
                mask.len(),
                ref_feats.iter().map(Matrix::rows).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            coords,
            ref_feats,
            mask,
        })
    }
}

/// FIFO of at most `capacity` frame entries, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<FrameEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be at least 1");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn push(&mut self, entry: FrameEntry) {
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FrameEntry> {
        self.entries.iter()
    }

    pub fn as_refs(&self) -> Vec<&FrameEntry> {
        self.entries.iter().collect()
    }

    /// Hash of every stored bit; equal banks have equal fingerprints.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.capacity.hash(&mut h);
        for e in &self.entries {
            for v in e.coords.data() {
                v.to_bits().hash(&mut h);
            }
            for f in &e.ref_feats {
                for v in f.data() {
                    v.to_bits().hash(&mut h);
                }
            }
            for v in e.mask.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// `softmax(Q·Kᵀ/√d)·V`, returning the output and the weight matrix.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    let d = q.cols();
    if d == 0 {
        return Err(Error::ZeroDim);
    }
    if k.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = Graph::inference();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let w = attention_weights(&mut g, qv, kv);
    let out = g.matmul(w, vv);
    Ok((g.value(out).clone(), g.value(w).clone()))
}

/// Row-stochastic attention map `softmax(Q·Kᵀ/√d)`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Var {
    let d = g.shape(q).1;
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    g.softmax_rows(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Cross,
    SelfAttention,
}

/// Attention maps captured during a forward pass: what the geometric branch
/// computed and what the mask branch consumed, per head.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: AttentionKind,
    pub geometric: Vec<Matrix>,
    pub mask: Vec<Matrix>,
}

/// Projections of one attention block.
#[derive(Clone, Copy, Debug)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv_geo: ParamId,
    wv_mask: ParamId,
    out_geo: ParamId,
    out_mask: ParamId,
}

impl AttnParams {
    fn new(store: &mut ParamStore, name: &str, c: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add(format!("{name}.wq"), glorot(rng, c, d)),
            wk: store.add(format!("{name}.wk"), glorot(rng, c, d)),
            wv_geo: store.add(format!("{name}.mask_free.wv_geo"), glorot(rng, c, d)),
            wv_mask: store.add(format!("{name}.mask.wv"), glorot(rng, c, d)),
            out_geo: store.add(format!("{name}.mask_free.out_geo"), glorot(rng, d, c)),
            out_mask: store.add(format!("{name}.mask.out"), glorot(rng, d, c)),
        }
    }
}

/// Parameters of one propagation layer.
#[derive(Clone, Debug)]
pub struct DefpmLayer {
    pos: Mlp,
    ln_query: LayerNorm,
    ln_memory: LayerNorm,
    mask_memory_proj: Linear,
    ln_mask_memory: LayerNorm,
    cross: AttnParams,
    ln_self_x: LayerNorm,
    ln_self_y: LayerNorm,
    self_attn: AttnParams,
    ln_ffn_x: LayerNorm,
    ln_ffn_y: LayerNorm,
    ffn_geo: Mlp,
    ffn_mask: Mlp,
    write_ffn: Mlp,
}

impl DefpmLayer {
    fn new(store: &mut ParamStore, l: usize, cfg: &DefpmConfig, rng: &mut impl Rng) -> Self {
        let (c, d, hdn) = (cfg.channels, cfg.attn_dim, cfg.ffn_hidden);
        let p = format!("defpm.layer{l}");
        Self {
            pos: Mlp::new(store, &format!("{p}.pos"), &[3, d, d], rng),
            ln_query: LayerNorm::new(store, &format!("{p}.ln_query"), c),
            ln_memory: LayerNorm::new(store, &format!("{p}.ln_memory"), c),
            mask_memory_proj: Linear::new(store, &format!("{p}.mask.memory_proj"), 1, c, rng),
            ln_mask_memory: LayerNorm::new(store, &format!("{p}.mask.ln_memory"), c),
            cross: AttnParams::new(store, &format!("{p}.cross"), c, d, rng),
            ln_self_x: LayerNorm::new(store, &format!("{p}.ln_self_x"), c),
            ln_self_y: LayerNorm::new(store, &format!("{p}.mask.ln_self"), c),
            self_attn: AttnParams::new(store, &format!("{p}.self"), c, d, rng),
            ln_ffn_x: LayerNorm::new(store, &format!("{p}.ln_ffn_x"), c),
            ln_ffn_y: LayerNorm::new(store, &format!("{p}.mask.ln_ffn"), c),
            ffn_geo: Mlp::new(store, &format!("{p}.ffn_geo"), &[c, hdn, c], rng),
            ffn_mask: Mlp::new(store, &format!("{p}.mask.ffn"), &[c, hdn, c], rng),
            write_ffn: Mlp::new(store, &format!("{p}.write_ffn"), &[c, c, c], rng),
        }
    }
}

/// Memory content as graph constants.
struct MemoryTensors {
    coords: Var,
    feats: Vec<Var>,
    masks: Var,
}

/// Result of propagating one frame.
#[derive(Clone, Debug)]
pub struct DefpmOutput {
    pub x: Var,
    pub y: Var,
    /// Reference features for this frame's memory entry, one per layer.
    pub write_feats: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Defpm {
    pub config: DefpmConfig,
    mask_init_proj: Linear,
    layers: Vec<DefpmLayer>,
}

impl Defpm {
    pub fn new(store: &mut ParamStore, config: DefpmConfig, rng: &mut impl Rng) -> Self {
        assert!(config.num_heads >= 1 && config.attn_dim % config.num_heads == 0);
        let mask_init_proj = Linear::new(store, "defpm.mask.init_proj", 1, config.channels, rng);
        let layers = (0..config.num_layers)
            .map(|l| DefpmLayer::new(store, l, &config, rng))
            .collect();
        Self {
            config,
            mask_init_proj,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn memory_tensors(&self, g: &mut Graph, memory: &[&FrameEntry]) -> Result<MemoryTensors> {
        if memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let c = self.config.channels;
        for e in memory {
            if e.ref_feats.len() != self.layers.len() || e.ref_feats.iter().any(|f| f.cols() != c) {
                return Err(Error::Shape(format!(
                    "memory entry has {} feature layers, expected {} of width {c}",
                    e.ref_feats.len(),
                    self.layers.len()
                )));
            }
        }
        let coords = Matrix::vstack(&memory.iter().map(|e| &e.coords).collect::<Vec<_>>())?;
        let masks: Vec<f64> = memory
            .iter()
            .flat_map(|e| e.mask.values().iter().copied())
            .collect();
        let feats = (0..self.layers.len())
            .map(|l| {
                let m =
                    Matrix::vstack(&memory.iter().map(|e| &e.ref_feats[l]).collect::<Vec<_>>())?;
                Ok(g.constant(m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryTensors {
            coords: g.constant(coords),
            feats,
            masks: g.constant(Matrix::column(&masks)),
        })
    }

    /// Multi-head attention on the geometric branch with the same maps applied
    /// to the mask values. Returns (geometric, mask) outputs before the output
    /// projections.
    #[allow(clippy::too_many_arguments)]
    fn shared_attention(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v_geo: Var,
        v_mask: Option<Var>,
        layer: usize,
        kind: AttentionKind,
        trace: &mut Option<&mut Vec<AttentionRecord>>,
    ) -> (Var, Option<Var>) {
        let heads = self.config.num_heads;
        let dh = self.config.attn_dim / heads;
        let mut geo_parts = Vec::with_capacity(heads);
        let mut mask_parts = Vec::with_capacity(heads);
        let mut rec_geo = Vec::new();
        let mut rec_mask = Vec::new();
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v_geo)
            } else {
                (
                    g.slice_cols(q, lo, hi),
                    g.slice_cols(k, lo, hi),
                    g.slice_cols(v_geo, lo, hi),
                )
            };
            let weights = attention_weights(g, qh, kh);
            geo_parts.push(g.matmul(weights, vh));
            if trace.is_some() {
                rec_geo.push(g.value(weights).clone());
            }
            if let Some(vm) = v_mask {
                let vmh = if heads == 1 {
                    vm
                } else {
                    g.slice_cols(vm, lo, hi)
                };
                // the mask branch consumes the geometric map as is
                let shared = weights;
                mask_parts.push(g.matmul(shared, vmh));
                if trace.is_some() {
                    rec_mask.push(g.value(shared).clone());
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(AttentionRecord {
                layer,
                kind,
                geometric: rec_geo,
                mask: rec_mask,
            });
        }
        let geo = if heads == 1 {
            geo_parts[0]
        } else {
            g.concat_cols(&geo_parts)
        };
        let mask = match mask_parts.len() {
            0 => None,
            1 => Some(mask_parts[0]),
            _ => Some(g.concat_cols(&mask_parts)),
        };
        (geo, mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        x: Var,
        y: Var,
        coords: Var,
        mem: &MemoryTensors,
        trace: &mut Option<&mut Vec<AttentionRecord>>,
    ) -> (Var, Var) {
        let p = &self.layers[l];
        let decouple = self.config.decouple;
        let pe_cur = p.pos.forward(g, store, coords);
        let pe_mem = p.pos.forward(g, store, mem.coords);

        // cross-attention
        let xq = p.ln_query.forward(g, store, x);
        let xm = p.ln_memory.forward(g, store, mem.feats[l]);
        let ym_raw = p.mask_memory_proj.forward(g, store, mem.masks);
        let ym = p.ln_mask_memory.forward(g, store, ym_raw);
        let wq = g.param(store, p.cross.wq);
        let wk = g.param(store, p.cross.wk);
        let wvg = g.param(store, p.cross.wv_geo);
        let wvm = g.param(store, p.cross.wv_mask);
        let q = g.matmul(xq, wq);
        let q = g.add(q, pe_cur);
        let k = g.matmul(xm, wk);
        let k = g.add(k, pe_mem);
        let mut vg = g.matmul(xm, wvg);
        let vm = g.matmul(ym, wvm);
        if !decouple {
            vg = g.add(vg, vm);
        }
        let (ag, am) = self.shared_attention(
            g,
            q,
            k,
            vg,
            decouple.then_some(vm),
            l,
            AttentionKind::Cross,
            trace,
        );
        let og = g.param(store, p.cross.out_geo);
        let dx = g.matmul(ag, og);
        let x_t = g.add(x, dx);
        let y_t = match am {
            Some(am) => {
                let om = g.param(store, p.cross.out_mask);
                let dy = g.matmul(am, om);
                g.add(y, dy)
            }
            None => y,
        };

        // self-attention
        let xs = p.ln_self_x.forward(g, store, x_t);
        let wq = g.param(store, p.self_attn.wq);
        let wk = g.param(store, p.self_attn.wk);
        let wvg = g.param(store, p.self_attn.wv_geo);
        let q = g.matmul(xs, wq);
        let q = g.add(q, pe_cur);
        let k = g.matmul(xs, wk);
        let k = g.add(k, pe_cur);
        let vg = g.matmul(xs, wvg);
        let vm = if decouple {
            let ys = p.ln_self_y.forward(g, store, y_t);
            let w = if self.config.share_self_value {
                wvg
            } else {
                g.param(store, p.self_attn.wv_mask)
            };
            Some(g.matmul(ys, w))
        } else {
            None
        };
        let (ag, am) =
            self.shared_attention(g, q, k, vg, vm, l, AttentionKind::SelfAttention, trace);
        let og = g.param(store, p.self_attn.out_geo);
        let dx = g.matmul(ag, og);
        let x_h = g.add(x_t, dx);
        let y_h = match am {
            Some(am) => {
                let om = g.param(store, p.self_attn.out_mask);
                let dy = g.matmul(am, om);
                g.add(y_t, dy)
            }
            None => y_t,
        };

        // feed-forward refinement
        let xn = p.ln_ffn_x.forward(g, store, x_h);
        let fx = p.ffn_geo.forward(g, store, xn);
        let x_out = g.add(x_h, fx);
        let y_out = if decouple {
            let yn = p.ln_ffn_y.forward(g, store, y_h);
            let fy = p.ffn_mask.forward(g, store, yn);
            g.add(y_h, fy)
        } else {
            y_h
        };
        (x_out, y_out)
    }

    /// Propagates memory cues into the current seeds.
    ///
    /// `mask_init` is 0.5 everywhere for a frame being tracked and the
    /// ground-truth seed mask for the first frame.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &Matrix,
        feats: Var,
        mask_init: &TargetnessMask,
        memory: &[&FrameEntry],
        mut trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<DefpmOutput> {
        let n = coords.rows();
        if g.shape(feats) != (n, self.config.channels) || mask_init.len() != n {
            return Err(Error::Shape(format!(
                "defpm input: {n} coords, features {:?}, {} mask values",
                g.shape(feats),
                mask_init.len()
            )));
        }
        let mem = self.memory_tensors(g, memory)?;
        let coords_v = g.constant(coords.clone());
        let m0 = g.constant(Matrix::column(mask_init.values()));
        let y0 = self.mask_init_proj.forward(g, store, m0);
        let (mut x, mut y) = if self.config.decouple {
            (feats, y0)
        } else {
            let x = g.add(feats, y0);
            (x, g.constant(Matrix::zeros(n, self.config.channels)))
        };
        let mut write_feats = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let input = x;
            let (nx, ny) = self.layer_forward(g, store, l, x, y, coords_v, &mem, &mut trace);
            x = nx;
            y = ny;
            let src = match self.config.write_source {
                WriteSource::LayerOutput => x,
                WriteSource::LayerInput => input,
            };
            write_feats.push(self.layers[l].write_ffn.forward(g, store, src));
        }
        Ok(DefpmOutput { x, y, write_feats })
    }

    /// Inference wrapper around one layer.
    pub fn defpm_layer(
        &self,
        store: &ParamStore,
        x: &Matrix,
        y: &Matrix,
        coords: &Matrix,
        memory: &MemoryBank,
        layer: usize,
    ) -> Result<(Matrix, Matrix)> {
        if layer >= self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "layer {layer} out of {}",
                self.layers.len()
            )));
        }
        let mut g = Graph::inference();
        let mem = self.memory_tensors(&mut g, &memory.as_refs())?;
        let (xv, yv, cv) = (
            g.constant(x.clone()),
            g.constant(y.clone()),
            g.constant(coords.clone()),
        );
        let (xo, yo) = self.layer_forward(&mut g, store, layer, xv, yv, cv, &mem, &mut None);
        Ok((g.value(xo).clone(), g.value(yo).clone()))
    }
}

/// Plain-value propagation result.
#[derive(Clone, Debug)]
pub struct DefpmValues {
    pub x: Matrix,
    pub y: Matrix,
    pub write_feats: Vec<Matrix>,
}

impl Defpm {
    /// Inference wrapper around [`Defpm::forward`].
    pub fn defpm_forward(
        &self,
        store: &ParamStore,
        coords: &Matrix,
        feats: &Matrix,
        mask_init: &TargetnessMask,
        memory: &MemoryBank,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<DefpmValues> {
        let mut g = Graph::inference();
        let f = g.constant(feats.clone());
        let out = self.forward(
            &mut g,
            store,
            coords,
            f,
            mask_init,
            &memory.as_refs(),
            trace,
        )?;
        Ok(DefpmValues {
            x: g.value(out.x).clone(),
            y: g.value(out.y).clone(),
            write_feats: out
                .write_feats
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
        })
    }
}

/// Prefix shared by every mask-branch parameter name.
pub fn is_mask_branch_param(name: &str) -> bool {
    name.starts_with("defpm.") && name.contains(".mask.")
}

//! Full operator: encoder, processor blocks, decoder, boundary correction,
//! autoregressive rollout and partitioned inference.

use crate::block::{gto_block, BlockParams, BoundBlock, GraphIndex};
use crate::encoder::{
    edge_geometry_input, encode_edges, normalize_fields, normalized_globals, spe, spe_width,
    BoundEncoder, BoundMlp, CoordScale, EncoderParams, FieldFrame, Mlp, NodeTypeEncoding,
    NormStats,
};
use crate::error::{err, Result};
use crate::flops::FlopsConfig;
use crate::mesh::{DirectedEdgeSet, Mesh, NodeType};
use crate::partition::{merge_predictions, partition_mesh, Partition};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use alloc::sync::Arc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Steady,
    Transient,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "steady" => Ok(Mode::Steady),
            "transient" => Ok(Mode::Transient),
            _ => Err(err!(Config, "unknown mode {s:?}")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Steady => "steady",
            Mode::Transient => "transient",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub global_dim: usize,
    pub latent: usize,
    pub blocks: usize,
    pub queries: usize,
    pub heads: usize,
    pub spe_bands: usize,
    pub edge_ratio: f64,
    pub activation: Activation,
    pub node_type_encoding: NodeTypeEncoding,
}

impl ModelConfig {
    /// Defaults: four blocks of width 128 with four heads and one query per
    /// latent channel.
    pub fn new(mode: Mode, dim: usize, in_channels: usize, out_channels: usize, global_dim: usize) -> ModelConfig {
        ModelConfig {
            mode,
            dim,
            in_channels,
            out_channels,
            global_dim,
            latent: 128,
            blocks: 4,
            queries: 128,
            heads: 4,
            spe_bands: 4,
            edge_ratio: 1.0,
            activation: Activation::Silu,
            node_type_encoding: NodeTypeEncoding::Scalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(err!(Config, "need at least one block"));
        }
        if self.latent % 2 != 0 {
            return Err(err!(Config, "latent width {} must be even", self.latent));
        }
        if self.heads == 0 || self.latent % self.heads != 0 {
            return Err(err!(
                Config,
                "latent {} not divisible by {} heads",
                self.latent,
                self.heads
            ));
        }
        if self.queries < 1 {
            return Err(err!(Config, "need at least one query"));
        }
        if !(self.edge_ratio > 0.0 && self.edge_ratio <= 1.0) {
            return Err(err!(Config, "edge ratio {} not in (0,1]", self.edge_ratio));
        }
        if self.spe_bands < 1 {
            return Err(err!(Config, "positional bands must be >= 1"));
        }
        if !(2..=3).contains(&self.dim) {
            return Err(err!(Config, "dim must be 2 or 3"));
        }
        if self.out_channels < 1 || self.in_channels < 1 {
            return Err(err!(Config, "channel counts must be >= 1"));
        }
        Ok(())
    }

    pub fn spe_cols(&self) -> usize {
        spe_width(self.dim, self.spe_bands)
    }
}

impl From<&ModelConfig> for FlopsConfig {
    fn from(c: &ModelConfig) -> FlopsConfig {
        FlopsConfig {
            dim: c.dim,
            in_channels: c.in_channels,
            global_dim: c.global_dim,
            out_channels: c.out_channels,
            node_feature_width: c.node_type_encoding.width(),
            latent: c.latent,
            queries: c.queries,
            heads: c.heads,
            blocks: c.blocks,
            spe_cols: c.spe_cols(),
        }
    }
}

/// All learnable state plus the normalization statistics it was fit with.
#[derive(Clone, Debug)]
pub struct ModelParams<R> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<R>,
    pub blocks: Vec<BlockParams<R>>,
    /// Decoder head (v_i, V_g) -> out, small-gain initialized.
    pub decoder: Mlp<R>,
    pub stats: NormStats<R>,
}

pub const DECODER_OUT_GAIN: f64 = 0.01;

impl<R: Real> ModelParams<R> {
    pub fn init(config: ModelConfig, stats: NormStats<R>, seed: u64) -> Result<ModelParams<R>> {
        config.validate()?;
        let base = Rng::new(seed);
        let mut enc_rng = base.fork(1);
        let encoder = EncoderParams::init(
            config.dim,
            config.in_channels,
            config.global_dim,
            config.latent,
            config.activation,
            config.node_type_encoding,
            &mut enc_rng,
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut rng = base.fork(10 + b as u64);
            blocks.push(BlockParams::init(
                config.latent,
                config.queries,
                config.heads,
                config.spe_cols(),
                config.activation,
                &mut rng,
            )?);
        }
        let mut dec_rng = base.fork(2);
        let c = config.latent;
        let decoder = Mlp::init(
            &[2 * c, c, c, config.out_channels],
            config.activation,
            DECODER_OUT_GAIN,
            &mut dec_rng,
        );
        Ok(ModelParams {
            config,
            encoder,
            blocks,
            decoder,
            stats,
        })
    }

    /// Stable-order walk over every tensor; `trainable` marks the ones the
    /// optimizer touches (statistics are carried but never updated).
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<R>, bool)) {
        self.encoder.visit(&mut |n, t| f(n, t, true));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&alloc::format!("blk{i}"), &mut |n, t| f(n, t, true));
        }
        self.decoder.visit("dec", &mut |n, t| f(n, t, true));
        f("stats.field_mean".into(), &self.stats.field_mean, false);
        f("stats.field_std".into(), &self.stats.field_std, false);
        f("stats.global_mean".into(), &self.stats.global_mean, false);
        f("stats.global_std".into(), &self.stats.global_std, false);
        f("stats.target_mean".into(), &self.stats.target_mean, false);
        f("stats.target_std".into(), &self.stats.target_std, false);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<R>, bool)) {
        self.encoder.visit_mut(&mut |n, t| f(n, t, true));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&alloc::format!("blk{i}"), &mut |n, t| f(n, t, true));
        }
        self.decoder.visit_mut("dec", &mut |n, t| f(n, t, true));
        f("stats.field_mean".into(), &mut self.stats.field_mean, false);
        f("stats.field_std".into(), &mut self.stats.field_std, false);
        f("stats.global_mean".into(), &mut self.stats.global_mean, false);
        f("stats.global_std".into(), &mut self.stats.global_std, false);
        f("stats.target_mean".into(), &mut self.stats.target_mean, false);
        f("stats.target_std".into(), &mut self.stats.target_std, false);
    }

    pub fn trainable_tensors(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t, trainable| {
            if trainable {
                out.push((n, t.clone()));
            }
        });
        out
    }

    pub fn n_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, trainable| {
            if trainable {
                n += t.len();
            }
        });
        n
    }

    /// Overwrite trainable tensors from a flat list in visit order.
    pub fn set_trainable(&mut self, new: &[Tensor<R>]) {
        let mut k = 0;
        self.visit_mut(&mut |_, t, trainable| {
            if trainable {
                *t = new[k].clone();
                k += 1;
            }
        });
        debug_assert_eq!(k, new.len());
    }

    /// Cast every tensor through f64 (precision switch for checkpoints).
    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        let cast_mlp = |m: &Mlp<R>| Mlp {
            layers: m
                .layers
                .iter()
                .map(|d| crate::encoder::Dense {
                    w: d.w.cast::<S>(),
                    b: d.b.cast::<S>(),
                })
                .collect(),
            act: m.act,
        };
        ModelParams {
            config: self.config.clone(),
            encoder: EncoderParams {
                local: cast_mlp(&self.encoder.local),
                global: cast_mlp(&self.encoder.global),
                edge: cast_mlp(&self.encoder.edge),
                node_type_encoding: self.encoder.node_type_encoding,
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    edge_mlp: cast_mlp(&b.edge_mlp),
                    node_mlp: cast_mlp(&b.node_mlp),
                    ffn: cast_mlp(&b.ffn),
                    ln_gain: b.ln_gain.cast::<S>(),
                    ln_bias: b.ln_bias.cast::<S>(),
                    queries: b.queries.cast::<S>(),
                    heads: b.heads,
                })
                .collect(),
            decoder: cast_mlp(&self.decoder),
            stats: NormStats {
                field_mean: self.stats.field_mean.cast::<S>(),
                field_std: self.stats.field_std.cast::<S>(),
                global_mean: self.stats.global_mean.cast::<S>(),
                global_std: self.stats.global_std.cast::<S>(),
                target_mean: self.stats.target_mean.cast::<S>(),
                target_std: self.stats.target_std.cast::<S>(),
            },
        }
    }
}

/// Handles to every bound parameter of one tape, in `visit` order.
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub blocks: Vec<BoundBlock>,
    pub decoder: BoundMlp,
    /// Trainable vars in the same order as `ModelParams::visit`.
    pub trainable: Vec<Var>,
}

impl<R: Real> ModelParams<R> {
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> BoundModel {
        let encoder = self.encoder.bind(tape, trainable);
        let blocks: Vec<BoundBlock> = self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        let decoder = self.decoder.bind(tape, trainable);
        let mut vars = Vec::new();
        for m in [&encoder.local, &encoder.global, &encoder.edge] {
            for &(w, b) in &m.layers {
                vars.push(w);
                vars.push(b);
            }
        }
        for b in &blocks {
            for m in [&b.edge_mlp, &b.node_mlp, &b.ffn] {
                for &(w, bi) in &m.layers {
                    vars.push(w);
                    vars.push(bi);
                }
            }
            vars.push(b.ln_gain);
            vars.push(b.ln_bias);
            vars.push(b.queries);
        }
        for &(w, b) in &decoder.layers {
            vars.push(w);
            vars.push(b);
        }
        BoundModel {
            encoder,
            blocks,
            decoder,
            trainable: vars,
        }
    }
}

/// Geometry and connectivity prepared once per (mesh, edge set) pair.
#[derive(Clone, Debug)]
pub struct GraphCache<R> {
    pub index: GraphIndex,
    pub scaled: Tensor<R>,
    pub spe: Tensor<R>,
    pub edge_geo: Tensor<R>,
    pub node_types: Vec<NodeType>,
}

impl<R: Real> GraphCache<R> {
    /// `scale_override` lets partitioned inference embed every part with the
    /// full-mesh bounding box.
    pub fn build(
        mesh: &Mesh,
        edges: &DirectedEdgeSet,
        bands: usize,
        scale_override: Option<&CoordScale>,
    ) -> Result<GraphCache<R>> {
        let owned;
        let scale = match scale_override {
            Some(s) => s,
            None => {
                owned = CoordScale::from_mesh(mesh);
                &owned
            }
        };
        let scaled = scale.scaled::<R>(mesh);
        let spe_cols = spe(&scaled, bands)?;
        let edge_geo = edge_geometry_input(&scaled, edges);
        Ok(GraphCache {
            index: GraphIndex::from_edges(edges, mesh.n_nodes()),
            scaled,
            spe: spe_cols,
            edge_geo,
            node_types: mesh.node_types().to_vec(),
        })
    }
}

/// Everything a caller may want from one forward pass.
pub struct ForwardArtifacts {
    /// Normalized decoder output on the tape.
    pub out_norm: Var,
    /// Per-block, per-head stage-one attention maps ([M, N] each).
    pub attention: Vec<Vec<Var>>,
}

/// Encoder -> blocks -> decoder on an existing tape. `fields_norm` is a tape
/// variable (so rollout training can chain steps); globals must already be
/// normalized. Returns the normalized output.
pub fn latent_forward<R: Real>(
    tape: &mut Tape<R>,
    bound: &BoundModel,
    config: &ModelConfig,
    cache: &GraphCache<R>,
    fields_norm: Var,
    globals_norm: &Tensor<R>,
    attention_gate: Option<R>,
) -> Result<ForwardArtifacts> {
    let n = cache.index.n_nodes;
    let stat = tape.constant(crate::encoder::static_node_features(
        &cache.scaled,
        &cache.node_types,
        config.node_type_encoding,
    ));
    let local_in = tape.concat_cols(stat, fields_norm)?;
    let local = bound.encoder.local.forward(tape, local_in)?;
    let gin = tape.constant(globals_norm.clone());
    let vg = bound.encoder.global.forward(tape, gin)?;
    let vg_broadcast = tape.broadcast_rows(vg, n)?;
    let mut v = tape.add(local, vg_broadcast)?;

    let mut e = encode_edges(tape, &bound.encoder, &cache.edge_geo)?;
    let spe_const = tape.constant(cache.spe.clone());
    let mut attention = Vec::with_capacity(bound.blocks.len());
    for block in &bound.blocks {
        let v_aug = tape.concat_cols(v, spe_const)?;
        let out = gto_block(tape, block, v_aug, e, &cache.index, config.latent, attention_gate)?;
        v = out.v;
        e = out.e;
        attention.push(out.attention);
    }
    let vg_rows = tape.broadcast_rows(vg, n)?;
    let dec_in = tape.concat_cols(v, vg_rows)?;
    let out_norm = bound.decoder.forward(tape, dec_in)?;
    Ok(ForwardArtifacts {
        out_norm,
        attention,
    })
}

fn check_frame<R: Real>(params: &ModelParams<R>, mesh: &Mesh, frame: &FieldFrame<R>) -> Result<()> {
    frame.validate(mesh)?;
    if frame.fields.cols() != params.config.in_channels {
        return Err(err!(
            Dim,
            "frame has {} channels, model wants {}",
            frame.fields.cols(),
            params.config.in_channels
        ));
    }
    if frame.globals.len() != params.config.global_dim {
        return Err(err!(
            Dim,
            "frame has {} globals, model wants {}",
            frame.globals.len(),
            params.config.global_dim
        ));
    }
    Ok(())
}

/// Steady-state forward pass; output in physical units.
pub fn forward_steady<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    frame: &FieldFrame<R>,
    cache: &GraphCache<R>,
) -> Result<Tensor<R>> {
    if params.config.mode != Mode::Steady {
        return Err(err!(Usage, "forward_steady on a transient model"));
    }
    let (out, _) = forward_raw(params, mesh, frame, cache)?;
    Ok(out)
}

/// Shared forward: normalized in, denormalized out, attention maps as values.
pub fn forward_raw<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    frame: &FieldFrame<R>,
    cache: &GraphCache<R>,
) -> Result<(Tensor<R>, Vec<Vec<Tensor<R>>>)> {
    check_frame(params, mesh, frame)?;
    let fields_norm = normalize_fields(&frame.fields, &params.stats);
    let globals_norm = normalized_globals(&frame.globals, frame.time, &params.stats)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let fields_var = tape.constant(fields_norm);
    let art = latent_forward(
        &mut tape,
        &bound,
        &params.config,
        cache,
        fields_var,
        &globals_norm,
        None,
    )?;
    let out = crate::encoder::denormalize_target(tape.value(art.out_norm), &params.stats);
    let maps = art
        .attention
        .iter()
        .map(|layer| layer.iter().map(|&m| tape.value(m).clone()).collect())
        .collect();
    Ok((out, maps))
}

/// One explicit-Euler step: state plus predicted increment, in physical
/// units. The frame carries the state at t-1 together with (a, t-1).
pub fn step_transient<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    state: &FieldFrame<R>,
    cache: &GraphCache<R>,
) -> Result<Tensor<R>> {
    if params.config.mode != Mode::Transient {
        return Err(err!(Usage, "step_transient on a steady model"));
    }
    if !state.fields.is_finite() {
        return Err(err!(Numeric, "non-finite state entering a transient step"));
    }
    let (increment, _) = forward_raw(params, mesh, state, cache)?;
    Ok(crate::tensor::add(&state.fields, &increment))
}

/// Dirichlet constraints: one value per (node, channel) pair.
#[derive(Clone, Debug, Default)]
pub struct BcSpec<R> {
    pub constraints: Vec<BcConstraint<R>>,
}

#[derive(Clone, Debug)]
pub struct BcConstraint<R> {
    pub channel: usize,
    pub nodes: Vec<u32>,
    pub values: Vec<R>,
}

impl<R: Real> BcSpec<R> {
    pub fn empty() -> BcSpec<R> {
        BcSpec {
            constraints: Vec::new(),
        }
    }

    /// Pin every boundary node of every channel to its value in `frame`.
    pub fn dirichlet_from_frame(mesh: &Mesh, frame: &FieldFrame<R>) -> BcSpec<R> {
        let nodes = mesh.boundary_nodes();
        let constraints = (0..frame.fields.cols())
            .map(|ch| BcConstraint {
                channel: ch,
                values: nodes
                    .iter()
                    .map(|&n| frame.fields.at(n as usize, ch))
                    .collect(),
                nodes: nodes.clone(),
            })
            .collect();
        BcSpec { constraints }
    }
}

/// Hard-enforce prescribed values; everything else is untouched.
pub fn bc_correct<R: Real>(out: &mut Tensor<R>, bc: &BcSpec<R>) -> Result<()> {
    for c in &bc.constraints {
        if c.channel >= out.cols() {
            return Err(err!(Validation, "bc channel {} out of {}", c.channel, out.cols()));
        }
        if c.nodes.len() != c.values.len() {
            return Err(err!(Validation, "bc nodes/values length mismatch"));
        }
        for (&node, &value) in c.nodes.iter().zip(&c.values) {
            if node as usize >= out.rows() {
                return Err(err!(Validation, "bc node {node} out of {}", out.rows()));
            }
            out.set(node as usize, c.channel, value);
        }
    }
    Ok(())
}

/// Tape version used inside training rollouts; prescribed entries stop
/// gradients.
pub fn bc_correct_t<R: Real>(tape: &mut Tape<R>, out: Var, bc: &BcSpec<R>) -> Result<Var> {
    let mut cur = out;
    for c in &bc.constraints {
        cur = tape.overwrite_rows_col(cur, c.channel, Arc::new(c.nodes.clone()), &c.values)?;
    }
    Ok(cur)
}

/// Autoregressive rollout over `conds` (one (globals, time) per step), with
/// boundary correction after every step. Any non-finite state aborts with a
/// step diagnostic instead of propagating.
pub fn rollout<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    initial: &FieldFrame<R>,
    conds: &[(Vec<R>, R)],
    bc: &BcSpec<R>,
    cache: &GraphCache<R>,
) -> Result<Vec<Tensor<R>>> {
    if conds.is_empty() {
        return Err(err!(Config, "rollout wants at least one step"));
    }
    let mut state = initial.clone();
    let mut out = Vec::with_capacity(conds.len());
    for (k, (globals, time)) in conds.iter().enumerate() {
        state.globals = globals.clone();
        state.time = *time;
        let mut next = step_transient(params, mesh, &state, cache)?;
        bc_correct(&mut next, bc)?;
        if !next.is_finite() {
            return Err(err!(
                Numeric,
                "rollout aborted: non-finite state after step {}",
                k + 1
            ));
        }
        state.fields = next.clone();
        out.push(next);
    }
    Ok(out)
}

/// Partitioned inference: split the mesh into K overlapping subgraphs, run
/// the mode-appropriate forward on each independently and average the
/// overlaps back onto the full mesh. K=1 reproduces the direct forward.
pub fn infer_partitioned<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    frame: &FieldFrame<R>,
    k: usize,
    halo_depth: usize,
) -> Result<Tensor<R>> {
    check_frame(params, mesh, frame)?;
    let undirected = crate::mesh::edges_from_cells(mesh)?;
    let edges = crate::sampler::orient_edges(&undirected, mesh, None)?;
    let partition = partition_mesh(mesh, &edges, k, halo_depth)?;
    let full_scale = CoordScale::from_mesh(mesh);
    infer_on_partition(params, mesh, frame, &partition, &full_scale)
}

pub fn infer_on_partition<R: Real>(
    params: &ModelParams<R>,
    mesh: &Mesh,
    frame: &FieldFrame<R>,
    partition: &Partition,
    full_scale: &CoordScale,
) -> Result<Tensor<R>> {
    let d = mesh.dim();
    let mut outputs = Vec::with_capacity(partition.parts.len());
    for part in &partition.parts {
        let coords: Vec<f64> = part
            .nodes
            .iter()
            .flat_map(|&g| mesh.coord(g as usize).to_vec())
            .collect();
        let types: Vec<NodeType> = part
            .nodes
            .iter()
            .map(|&g| mesh.node_types()[g as usize])
            .collect();
        let sub_mesh = Mesh::new(coords, d, vec![], 3, types)?;
        let cache = GraphCache::build(&sub_mesh, &part.edges, params.config.spe_bands, Some(full_scale))?;
        let sub_fields = Tensor::from_fn(part.nodes.len(), frame.fields.cols(), |i, j| {
            frame.fields.at(part.nodes[i] as usize, j)
        });
        let sub_frame = FieldFrame {
            fields: sub_fields,
            globals: frame.globals.clone(),
            time: frame.time,
        };
        let out = match params.config.mode {
            Mode::Steady => forward_steady(params, &sub_mesh, &sub_frame, &cache)?,
            Mode::Transient => step_transient(params, &sub_mesh, &sub_frame, &cache)?,
        };
        outputs.push(out);
    }
    merge_predictions(partition, &outputs, mesh.n_nodes())
}

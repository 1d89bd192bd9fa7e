//! Unified graph embedding: coordinate scaling, sinusoidal positional
//! encoding, the node/edge/global encoder MLPs and the per-channel
//! normalization statistics they rely on.

use crate::error::{err, Result};
use crate::mesh::{DirectedEdgeSet, Mesh, NodeType};
use crate::real::{r, Real};
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Per-node physical fields at one instant plus the global condition.
#[derive(Clone, Debug)]
pub struct FieldFrame<R> {
    /// [N, c] field values in physical units.
    pub fields: Tensor<R>,
    /// Global parameters, length l.
    pub globals: Vec<R>,
    /// Time in problem units; zero for steady problems.
    pub time: R,
}

impl<R: Real> FieldFrame<R> {
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.fields.rows() != mesh.n_nodes() {
            return Err(err!(
                Dim,
                "frame has {} rows for a {}-node mesh",
                self.fields.rows(),
                mesh.n_nodes()
            ));
        }
        if self.fields.cols() < 1 {
            return Err(err!(Dim, "frame needs at least one field channel"));
        }
        if !self.fields.is_finite() || !self.globals.iter().all(|g| g.is_finite()) {
            return Err(err!(Numeric, "non-finite values in frame"));
        }
        Ok(())
    }
}

/// Axis-aligned box used to scale coordinates into [0,1] before positional
/// encoding. Partitioned inference passes the full-mesh box so every part
/// sees the same embedding.
#[derive(Clone, Debug)]
pub struct CoordScale {
    lo: Vec<f64>,
    span: Vec<f64>,
}

impl CoordScale {
    pub fn from_mesh(mesh: &Mesh) -> CoordScale {
        let (lo, hi) = mesh.bbox();
        let span = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a).max(1e-12))
            .collect();
        CoordScale { lo, span }
    }

    /// [N, d] coordinates scaled to the unit box.
    pub fn scaled<R: Real>(&self, mesh: &Mesh) -> Tensor<R> {
        let d = mesh.dim();
        Tensor::from_fn(mesh.n_nodes(), d, |i, a| {
            r::<R>((mesh.coord(i)[a] - self.lo[a]) / self.span[a])
        })
    }
}

/// Width of the positional encoding for `d` axes and `bands` frequency
/// levels: cos and sin of 2^i pi x for i in -bands..=bands, per axis.
pub fn spe_width(dim: usize, bands: usize) -> usize {
    2 * (2 * bands + 1) * dim
}

/// Sinusoidal positional encoding of unit-scaled coordinates.
///
/// Column layout: for each axis, for i = -bands..=bands, a cos column then a
/// sin column.
pub fn spe<R: Real>(coords: &Tensor<R>, bands: usize) -> Result<Tensor<R>> {
    if bands < 1 {
        return Err(err!(Config, "positional encoding wants bands >= 1"));
    }
    let (n, d) = coords.shape();
    let per_axis = 2 * (2 * bands + 1);
    let mut out = Tensor::zeros(n, per_axis * d);
    let pi = R::PI();
    for i in 0..n {
        let row = out.row_mut(i);
        for a in 0..d {
            let x = coords.at(i, a);
            for (bi, e) in (-(bands as i32)..=bands as i32).enumerate() {
                let freq = r::<R>(libm_pow2(e));
                let arg = freq * pi * x;
                row[a * per_axis + 2 * bi] = arg.cos();
                row[a * per_axis + 2 * bi + 1] = arg.sin();
            }
        }
    }
    Ok(out)
}

fn libm_pow2(e: i32) -> f64 {
    if e >= 0 {
        (1u64 << e) as f64
    } else {
        1.0 / (1u64 << (-e)) as f64
    }
}

// ---------------------------------------------------------------------------
// MLPs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dense<R> {
    /// [in, out]
    pub w: Tensor<R>,
    /// [1, out]
    pub b: Tensor<R>,
}

/// Hidden layers activated, final layer linear.
#[derive(Clone, Debug)]
pub struct Mlp<R> {
    pub layers: Vec<Dense<R>>,
    pub act: Activation,
}

impl<R: Real> Mlp<R> {
    /// Uniform fan-in initialization; the last layer's weights are scaled by
    /// `out_gain` (1.0 for hidden stacks, small for output heads).
    pub fn init(dims: &[usize], act: Activation, out_gain: f64, rng: &mut Rng) -> Mlp<R> {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (li, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = crate::real::fm::sqrt(1.0 / fan_in as f64);
            let gain = if li == dims.len() - 2 { out_gain } else { 1.0 };
            let w = Tensor::from_fn(fan_in, fan_out, |_, _| {
                r::<R>(gain * rng.uniform_in(-bound, bound))
            });
            layers.push(Dense {
                w,
                b: Tensor::zeros(1, fan_out),
            });
        }
        Mlp { layers, act }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|d| (tape.leaf(d.w.clone(), trainable), tape.leaf(d.b.clone(), trainable)))
            .collect();
        BoundMlp {
            layers,
            act: self.act,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<R>)) {
        for (i, d) in self.layers.iter().enumerate() {
            f(alloc::format!("{prefix}.w{i}"), &d.w);
            f(alloc::format!("{prefix}.b{i}"), &d.b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<R>)) {
        for (i, d) in self.layers.iter_mut().enumerate() {
            f(alloc::format!("{prefix}.w{i}"), &mut d.w);
            f(alloc::format!("{prefix}.b{i}"), &mut d.b);
        }
    }
}

/// Tape handles for one MLP's parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub act: Activation,
}

impl BoundMlp {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let zb = tape.add_row(z, b)?;
            h = if li == last {
                zb
            } else {
                tape.activation(zb, self.act)
            };
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Per-channel z-score statistics, fit on the training split only.
/// `global` covers the l parameter channels plus time as the last channel;
/// `target` covers decoder outputs (state increments for transient tasks).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<R> {
    pub field_mean: Tensor<R>,
    pub field_std: Tensor<R>,
    pub global_mean: Tensor<R>,
    pub global_std: Tensor<R>,
    pub target_mean: Tensor<R>,
    pub target_std: Tensor<R>,
}

/// Streaming mean/std accumulator; zero-variance channels clamp to std 1.
#[derive(Clone, Debug)]
pub struct RunningStats {
    n: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            n: 0,
            sum: vec![0.0; channels],
            sumsq: vec![0.0; channels],
        }
    }

    pub fn push_row<R: Real>(&mut self, row: &[R]) {
        debug_assert_eq!(row.len(), self.sum.len());
        self.n += 1;
        for (k, &x) in row.iter().enumerate() {
            let v = x.into_f64();
            self.sum[k] += v;
            self.sumsq[k] += v * v;
        }
    }

    pub fn finish<R: Real>(&self) -> (Tensor<R>, Tensor<R>) {
        let c = self.sum.len();
        let n = self.n.max(1) as f64;
        let mean = Tensor::from_fn(1, c, |_, k| r::<R>(self.sum[k] / n));
        let std = Tensor::from_fn(1, c, |_, k| {
            let m = self.sum[k] / n;
            let var = (self.sumsq[k] / n - m * m).max(0.0);
            let s = crate::real::fm::sqrt(var);
            // Constant channel: keep it finite and exactly round-trippable.
            r::<R>(if s < 1e-12 { 1.0 } else { s })
        });
        (mean, std)
    }
}

/// z-score per channel with the field statistics.
pub fn normalize_fields<R: Real>(fields: &Tensor<R>, stats: &NormStats<R>) -> Tensor<R> {
    apply_z(fields, &stats.field_mean, &stats.field_std)
}

pub fn denormalize_fields<R: Real>(fields: &Tensor<R>, stats: &NormStats<R>) -> Tensor<R> {
    undo_z(fields, &stats.field_mean, &stats.field_std)
}

pub fn normalize_target<R: Real>(t: &Tensor<R>, stats: &NormStats<R>) -> Tensor<R> {
    apply_z(t, &stats.target_mean, &stats.target_std)
}

pub fn denormalize_target<R: Real>(t: &Tensor<R>, stats: &NormStats<R>) -> Tensor<R> {
    undo_z(t, &stats.target_mean, &stats.target_std)
}

/// Normalized [1, l+1] row of (globals..., time).
pub fn normalized_globals<R: Real>(
    globals: &[R],
    time: R,
    stats: &NormStats<R>,
) -> Result<Tensor<R>> {
    let want = stats.global_mean.cols();
    if globals.len() + 1 != want {
        return Err(err!(
            Dim,
            "{} globals + time, stats want {want} channels",
            globals.len()
        ));
    }
    let mut row: Vec<R> = globals.to_vec();
    row.push(time);
    let raw = Tensor::from_vec(1, want, row)?;
    Ok(apply_z(&raw, &stats.global_mean, &stats.global_std))
}

fn apply_z<R: Real>(x: &Tensor<R>, mean: &Tensor<R>, std: &Tensor<R>) -> Tensor<R> {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| {
        (x.at(i, j) - mean.at(0, j)) / std.at(0, j)
    })
}

fn undo_z<R: Real>(x: &Tensor<R>, mean: &Tensor<R>, std: &Tensor<R>) -> Tensor<R> {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| {
        x.at(i, j) * std.at(0, j) + mean.at(0, j)
    })
}

/// Tape version of `denormalize_target`, used inside training rollouts.
pub fn denormalize_target_t<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    stats: &NormStats<R>,
) -> Result<Var> {
    let std = tape.constant(stats.target_std.clone());
    let mean = tape.constant(stats.target_mean.clone());
    let scaled = tape.mul_row(x, std)?;
    tape.add_row(scaled, mean)
}

// ---------------------------------------------------------------------------
// Encoder parameters and forward passes
// ---------------------------------------------------------------------------

/// How the per-node type tag enters the local feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTypeEncoding {
    /// The tag as one real scalar.
    Scalar,
    /// One-hot over the four node types.
    OneHot,
}

impl NodeTypeEncoding {
    pub fn width(self) -> usize {
        match self {
            NodeTypeEncoding::Scalar => 1,
            NodeTypeEncoding::OneHot => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams<R> {
    /// Local features (x_i, n_i, u_i) -> latent.
    pub local: Mlp<R>,
    /// Global condition (a, t) -> latent.
    pub global: Mlp<R>,
    /// Edge geometry (x_ij, x_ji, |x_ij|) -> latent.
    pub edge: Mlp<R>,
    pub node_type_encoding: NodeTypeEncoding,
}

impl<R: Real> EncoderParams<R> {
    pub fn init(
        dim: usize,
        in_channels: usize,
        global_dim: usize,
        latent: usize,
        act: Activation,
        encoding: NodeTypeEncoding,
        rng: &mut Rng,
    ) -> EncoderParams<R> {
        let local_in = dim + encoding.width() + in_channels;
        EncoderParams {
            local: Mlp::init(&[local_in, latent, latent, latent], act, 1.0, rng),
            global: Mlp::init(&[global_dim + 1, latent, latent, latent], act, 1.0, rng),
            edge: Mlp::init(&[2 * dim + 1, latent, latent, latent], act, 1.0, rng),
            node_type_encoding: encoding,
        }
    }
}

pub struct BoundEncoder {
    pub local: BoundMlp,
    pub global: BoundMlp,
    pub edge: BoundMlp,
}

impl<R: Real> EncoderParams<R> {
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            local: self.local.bind(tape, trainable),
            global: self.global.bind(tape, trainable),
            edge: self.edge.bind(tape, trainable),
        }
    }
}

/// The field-independent part of the local input: scaled coordinates and
/// the node-type feature, [N, d + w].
pub fn static_node_features<R: Real>(
    scaled_coords: &Tensor<R>,
    node_types: &[NodeType],
    encoding: NodeTypeEncoding,
) -> Tensor<R> {
    let (n, d) = scaled_coords.shape();
    let w = encoding.width();
    Tensor::from_fn(n, d + w, |i, j| {
        if j < d {
            scaled_coords.at(i, j)
        } else {
            match encoding {
                NodeTypeEncoding::Scalar => r::<R>(node_types[i] as u8 as f64),
                NodeTypeEncoding::OneHot => {
                    if node_types[i] as u8 as usize == j - d {
                        R::one()
                    } else {
                        R::zero()
                    }
                }
            }
        }
    })
}

/// Assemble the [N, d + w + c] local input: scaled coordinates, node-type
/// feature and normalized field channels.
pub fn node_local_input<R: Real>(
    scaled_coords: &Tensor<R>,
    node_types: &[NodeType],
    fields_norm: &Tensor<R>,
    encoding: NodeTypeEncoding,
) -> Tensor<R> {
    let (n, d) = scaled_coords.shape();
    let stat = static_node_features(scaled_coords, node_types, encoding);
    let w = encoding.width();
    let c = fields_norm.cols();
    Tensor::from_fn(n, d + w + c, |i, j| {
        if j < d + w {
            stat.at(i, j)
        } else {
            fields_norm.at(i, j - d - w)
        }
    })
}

/// [E, 2d+1] edge geometry rows: displacement, reversed displacement, norm.
pub fn edge_geometry_input<R: Real>(
    scaled_coords: &Tensor<R>,
    edges: &DirectedEdgeSet,
) -> Tensor<R> {
    let d = scaled_coords.cols();
    let e = edges.len();
    let mut out = Tensor::zeros(e, 2 * d + 1);
    for (k, (s, rcv)) in edges.pairs().enumerate() {
        let xs = scaled_coords.row(s as usize);
        let xr = scaled_coords.row(rcv as usize);
        let row = out.row_mut(k);
        let mut norm_sq = R::zero();
        for a in 0..d {
            let diff = xs[a] - xr[a];
            row[a] = diff;
            row[d + a] = -diff;
            norm_sq = norm_sq + diff * diff;
        }
        row[2 * d] = norm_sq.sqrt();
    }
    out
}

/// Encoded nodes: v_i = local(v_i) + broadcast(global(a, t)). Returns the
/// per-node latent and the [1, C] global encoding reused by the decoder.
pub fn encode_nodes<R: Real>(
    tape: &mut Tape<R>,
    enc: &BoundEncoder,
    local_input: &Tensor<R>,
    global_input: &Tensor<R>,
) -> Result<(Var, Var)> {
    let n = local_input.rows();
    let xin = tape.constant(local_input.clone());
    let local = enc.local.forward(tape, xin)?;
    let gin = tape.constant(global_input.clone());
    let vg = enc.global.forward(tape, gin)?;
    let vg_rows = tape.broadcast_rows(vg, n)?;
    let v = tape.add(local, vg_rows)?;
    Ok((v, vg))
}

/// Encoded edges from precomputed geometry rows.
pub fn encode_edges<R: Real>(
    tape: &mut Tape<R>,
    enc: &BoundEncoder,
    edge_input: &Tensor<R>,
) -> Result<Var> {
    let ein = tape.constant(edge_input.clone());
    enc.edge.forward(tape, ein)
}

impl<R: Real> EncoderParams<R> {
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<R>)) {
        self.local.visit("enc.local", f);
        self.global.visit("enc.global", f);
        self.edge.visit("enc.edge", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<R>)) {
        self.local.visit_mut("enc.local", f);
        self.global.visit_mut("enc.global", f);
        self.edge.visit_mut("enc.edge", f);
    }
}

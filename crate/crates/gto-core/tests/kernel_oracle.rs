//! Equivalence of the engine against scalar loop oracles: the directional
//! message-passing update as a dense local-kernel sum, the projection
//! attention as a composed triple-sum of explicit softmax weights, and the
//! assembled model against a stage-by-stage re-evaluation.

use gto_core::block::{gto_block, message_pass, projection_attention, BlockParams, GraphIndex};
use gto_core::encoder::{Mlp, NormStats};
use gto_core::mesh::{Mesh, NodeType};
use gto_core::model::{forward_steady, step_transient, GraphCache, Mode, ModelConfig, ModelParams};
use gto_core::rng::Rng;
use gto_core::tape::{Activation, Tape};
use gto_core::tensor::Tensor;
use std::sync::Arc;

const TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Scalar oracles: plain loops, no tape, no shared kernels.
// ---------------------------------------------------------------------------

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp_eval(mlp: &Mlp<f64>, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.w.cols()];
        for (jo, o) in out.iter_mut().enumerate() {
            let mut acc = layer.b.at(0, jo);
            for (ji, &x) in h.iter().enumerate() {
                acc += x * layer.w.at(ji, jo);
            }
            *o = acc;
        }
        if li + 1 < mlp.layers.len() {
            for o in out.iter_mut() {
                *o = silu(*o);
            }
        }
        h = out;
    }
    h
}

/// Dense local-kernel form of the message-passing update: every edge update
/// evaluated by loops, halves averaged per node over explicit neighbor sets,
/// empty neighborhoods contributing zero.
fn message_pass_oracle(
    params: &BlockParams<f64>,
    v_aug: &Tensor<f64>,
    e: &Tensor<f64>,
    senders: &[u32],
    receivers: &[u32],
) -> (Tensor<f64>, Tensor<f64>) {
    let n = v_aug.rows();
    let c = e.cols();
    let mut e_new = Tensor::zeros(e.rows(), c);
    for k in 0..e.rows() {
        let mut input = e.row(k).to_vec();
        input.extend_from_slice(v_aug.row(senders[k] as usize));
        input.extend_from_slice(v_aug.row(receivers[k] as usize));
        let delta = mlp_eval(&params.edge_mlp, &input);
        for j in 0..c {
            e_new.set(k, j, e.at(k, j) + delta[j]);
        }
    }
    let mut v_new = Tensor::zeros(n, c);
    for node in 0..n {
        let mut out_half = vec![0.0; c / 2];
        let mut in_half = vec![0.0; c / 2];
        let (mut n_out, mut n_in) = (0usize, 0usize);
        for k in 0..e.rows() {
            if senders[k] as usize == node {
                for j in 0..c / 2 {
                    out_half[j] += e_new.at(k, j);
                }
                n_out += 1;
            }
            if receivers[k] as usize == node {
                for j in 0..c / 2 {
                    in_half[j] += e_new.at(k, c / 2 + j);
                }
                n_in += 1;
            }
        }
        if n_out > 0 {
            out_half.iter_mut().for_each(|x| *x /= n_out as f64);
        }
        if n_in > 0 {
            in_half.iter_mut().for_each(|x| *x /= n_in as f64);
        }
        let mut input = v_aug.row(node).to_vec();
        input.extend_from_slice(&out_half);
        input.extend_from_slice(&in_half);
        let delta = mlp_eval(&params.node_mlp, &input);
        for j in 0..c {
            v_new.set(node, j, v_aug.at(node, j) + delta[j]);
        }
    }
    (v_new, e_new)
}

fn softmax_inplace(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Composed triple-sum attention: explicit alpha (queries over nodes),
/// beta (subspace refinement) and gamma (reprojection) weights.
fn attention_oracle(w0: &Tensor<f64>, q: &Tensor<f64>, scale: f64) -> Tensor<f64> {
    let (n, c) = w0.shape();
    let m = q.rows();
    let mut alpha = vec![vec![0.0; n]; m];
    for mi in 0..m {
        for j in 0..n {
            alpha[mi][j] = scale * (0..c).map(|k| q.at(mi, k) * w0.at(j, k)).sum::<f64>();
        }
        softmax_inplace(&mut alpha[mi]);
    }
    let w1: Vec<Vec<f64>> = (0..m)
        .map(|mi| {
            (0..c)
                .map(|k| (0..n).map(|j| alpha[mi][j] * w0.at(j, k)).sum())
                .collect()
        })
        .collect();
    let mut beta = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            beta[a][b] = scale * (0..c).map(|k| w1[a][k] * w1[b][k]).sum::<f64>();
        }
        softmax_inplace(&mut beta[a]);
    }
    let w2: Vec<Vec<f64>> = (0..m)
        .map(|a| {
            (0..c)
                .map(|k| (0..m).map(|b| beta[a][b] * w1[b][k]).sum())
                .collect()
        })
        .collect();
    let mut gamma = vec![vec![0.0; m]; n];
    for i in 0..n {
        for a in 0..m {
            gamma[i][a] = scale * (0..c).map(|k| w0.at(i, k) * w2[a][k]).sum::<f64>();
        }
        softmax_inplace(&mut gamma[i]);
    }
    // (W3)_i = sum_a gamma sum_b beta sum_j alpha w0_j, composed fully.
    Tensor::from_fn(n, c, |i, k| {
        let mut acc = 0.0;
        for a in 0..m {
            for b in 0..m {
                for j in 0..n {
                    acc += gamma[i][a] * beta[a][b] * alpha[b][j] * w0.at(j, k);
                }
            }
        }
        acc
    })
}

fn multi_head_oracle(w0: &Tensor<f64>, q: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let c = w0.cols();
    let hw = c / heads;
    let scale = 1.0 / (hw as f64).sqrt();
    let mut out = Tensor::zeros(w0.rows(), c);
    for h in 0..heads {
        let w0h = Tensor::from_fn(w0.rows(), hw, |i, j| w0.at(i, h * hw + j));
        let qh = Tensor::from_fn(q.rows(), hw, |i, j| q.at(i, h * hw + j));
        let oh = attention_oracle(&w0h, &qh, scale);
        for i in 0..w0.rows() {
            for j in 0..hw {
                out.set(i, h * hw + j, oh.at(i, j));
            }
        }
    }
    out
}

fn layer_norm_oracle(x: &Tensor<f64>, gain: &Tensor<f64>, bias: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| {
        let row = x.row(i);
        let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        (x.at(i, j) - mean) / (var + eps).sqrt() * gain.at(0, j) + bias.at(0, j)
    })
}

fn rand_graph(rng: &mut Rng, n: usize) -> (Vec<u32>, Vec<u32>) {
    let n_edges = 1 + rng.below(2 * n);
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for _ in 0..n_edges {
        let s = rng.below(n) as u32;
        let mut r = rng.below(n) as u32;
        while r == s {
            r = rng.below(n) as u32;
        }
        senders.push(s);
        receivers.push(r);
    }
    (senders, receivers)
}

// ---------------------------------------------------------------------------
// Random-instance equivalence
// ---------------------------------------------------------------------------

#[test]
fn message_pass_equals_dense_kernel_oracle() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(500 + seed);
        let n = 2 + rng.below(5); // <= 6
        let c = 2 * (1 + rng.below(4)); // even, <= 8
        let s = 2 * (1 + rng.below(3));
        let params = BlockParams::<f64>::init(c, 2, 1, s, Activation::Silu, &mut rng).unwrap();
        let (senders, receivers) = rand_graph(&mut rng, n);
        let v_aug = Tensor::from_fn(n, c + s, |_, _| rng.normal());
        let e = Tensor::from_fn(senders.len(), c, |_, _| rng.normal());

        let (want_v, want_e) = message_pass_oracle(&params, &v_aug, &e, &senders, &receivers);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let vv = tape.constant(v_aug);
        let ev = tape.constant(e);
        let index = GraphIndex {
            senders: Arc::new(senders),
            receivers: Arc::new(receivers),
            n_nodes: n,
        };
        let (v2, e2) = message_pass(&mut tape, &bound, vv, ev, &index, c).unwrap();
        let dv = tape.value(v2).max_abs_diff(&want_v);
        let de = tape.value(e2).max_abs_diff(&want_e);
        assert!(dv < TOL, "seed {seed}: node diff {dv}");
        assert!(de < TOL, "seed {seed}: edge diff {de}");
    }
}

#[test]
fn projection_attention_equals_triple_sum_oracle() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(700 + seed);
        let n = 1 + rng.below(6); // <= 6
        let c = 1 + rng.below(8); // <= 8
        let m = 1 + rng.below(4); // <= 4
        let w0 = Tensor::from_fn(n, c, |_, _| rng.normal());
        let q = Tensor::from_fn(m, c, |_, _| rng.normal());
        let scale = 1.0 / (c as f64).sqrt();

        let want = attention_oracle(&w0, &q, scale);

        let mut tape = Tape::new();
        let wv = tape.constant(w0);
        let qv = tape.constant(q);
        let (w3, _) = projection_attention(&mut tape, wv, qv, scale).unwrap();
        let diff = tape.value(w3).max_abs_diff(&want);
        assert!(diff < TOL, "seed {seed}: diff {diff}");
    }
}

#[test]
fn full_block_matches_composed_oracle() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(900 + seed);
        let n = 3 + rng.below(4);
        let c = 4;
        let s = 2;
        let heads = if rng.below(2) == 0 { 1 } else { 2 };
        let params = BlockParams::<f64>::init(c, 3, heads, s, Activation::Silu, &mut rng).unwrap();
        let (senders, receivers) = rand_graph(&mut rng, n);
        let v_aug = Tensor::from_fn(n, c + s, |_, _| rng.normal());
        let e = Tensor::from_fn(senders.len(), c, |_, _| rng.normal());

        // Oracle composition: message passing, attention, residuals, FFN.
        let (w0, _) = message_pass_oracle(&params, &v_aug, &e, &senders, &receivers);
        let w3 = multi_head_oracle(&w0, &params.queries, heads);
        let v1 = Tensor::from_fn(n, c, |i, j| w0.at(i, j) + w3.at(i, j));
        let normed = layer_norm_oracle(&v1, &params.ln_gain, &params.ln_bias, 1e-5);
        let mut want = v1.clone();
        for i in 0..n {
            let f = mlp_eval(&params.ffn, normed.row(i));
            for j in 0..c {
                want.set(i, j, v1.at(i, j) + f[j]);
            }
        }

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let vv = tape.constant(v_aug);
        let ev = tape.constant(e);
        let index = GraphIndex {
            senders: Arc::new(senders),
            receivers: Arc::new(receivers),
            n_nodes: n,
        };
        let out = gto_block(&mut tape, &bound, vv, ev, &index, c, None).unwrap();
        let diff = tape.value(out.v).max_abs_diff(&want);
        assert!(diff < TOL, "seed {seed}: diff {diff}");
    }
}

// ---------------------------------------------------------------------------
// End-to-end model oracle
// ---------------------------------------------------------------------------

fn toy_mesh() -> Mesh {
    let coords = vec![0.0, 0.0, 1.0, 0.1, 2.0, 0.0, 0.1, 1.0, 1.1, 0.9, 2.0, 1.0];
    let cells = vec![0, 1, 4, 0, 4, 3, 1, 2, 5, 1, 5, 4];
    let mut types = vec![NodeType::Interior; 6];
    types[0] = NodeType::Inlet;
    types[5] = NodeType::Wall;
    Mesh::new(coords, 2, cells, 3, types).unwrap()
}

fn spe_oracle(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &xi in x {
        for e in -(bands as i32)..=bands as i32 {
            let freq = 2.0f64.powi(e);
            out.push((freq * std::f64::consts::PI * xi).cos());
            out.push((freq * std::f64::consts::PI * xi).sin());
        }
    }
    out
}

/// Every pipeline stage recomputed with scalar loops: scaling, positional
/// encoding, encoders, L blocks, decoder, denormalization.
fn model_forward_oracle(
    params: &ModelParams<f64>,
    mesh: &Mesh,
    fields: &Tensor<f64>,
    globals: &[f64],
    time: f64,
    senders: &[u32],
    receivers: &[u32],
) -> Tensor<f64> {
    let cfg = &params.config;
    let n = mesh.n_nodes();
    let d = mesh.dim();
    let (lo, hi) = mesh.bbox();
    let scaled: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|a| (mesh.coord(i)[a] - lo[a]) / (hi[a] - lo[a]).max(1e-12))
                .collect()
        })
        .collect();
    let stats = &params.stats;

    // Encoder.
    let mut grow: Vec<f64> = globals.to_vec();
    grow.push(time);
    let gnorm: Vec<f64> = grow
        .iter()
        .enumerate()
        .map(|(k, &x)| (x - stats.global_mean.at(0, k)) / stats.global_std.at(0, k))
        .collect();
    let vg = mlp_eval(&params.encoder.global, &gnorm);

    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut input = scaled[i].clone();
            input.push(mesh.node_types()[i] as u8 as f64);
            for ch in 0..fields.cols() {
                input.push(
                    (fields.at(i, ch) - stats.field_mean.at(0, ch)) / stats.field_std.at(0, ch),
                );
            }
            let local = mlp_eval(&params.encoder.local, &input);
            local.iter().zip(&vg).map(|(a, b)| a + b).collect()
        })
        .collect();

    let mut e: Vec<Vec<f64>> = (0..senders.len())
        .map(|k| {
            let (s, r) = (senders[k] as usize, receivers[k] as usize);
            let mut input = Vec::with_capacity(2 * d + 1);
            let mut norm_sq = 0.0;
            for a in 0..d {
                let diff = scaled[s][a] - scaled[r][a];
                input.push(diff);
                norm_sq += diff * diff;
            }
            for a in 0..d {
                input.push(-(scaled[s][a] - scaled[r][a]));
            }
            input.push(norm_sq.sqrt());
            mlp_eval(&params.encoder.edge, &input)
        })
        .collect();

    // Blocks.
    for block in &params.blocks {
        let v_aug = Tensor::from_fn(n, cfg.latent + cfg.spe_cols(), |i, j| {
            if j < cfg.latent {
                v[i][j]
            } else {
                spe_oracle(&scaled[i], cfg.spe_bands)[j - cfg.latent]
            }
        });
        let e_t = Tensor::from_fn(e.len(), cfg.latent, |k, j| e[k][j]);
        let (w0, e_new) = message_pass_oracle(block, &v_aug, &e_t, senders, receivers);
        let w3 = multi_head_oracle(&w0, &block.queries, block.heads);
        let v1 = Tensor::from_fn(n, cfg.latent, |i, j| w0.at(i, j) + w3.at(i, j));
        let normed = layer_norm_oracle(&v1, &block.ln_gain, &block.ln_bias, 1e-5);
        for i in 0..n {
            let f = mlp_eval(&block.ffn, normed.row(i));
            v[i] = (0..cfg.latent).map(|j| v1.at(i, j) + f[j]).collect();
        }
        e = (0..e_new.rows()).map(|k| e_new.row(k).to_vec()).collect();
    }

    // Decoder plus denormalization.
    Tensor::from_fn(n, cfg.out_channels, |i, ch| {
        let mut input = v[i].clone();
        input.extend_from_slice(&vg);
        let out = mlp_eval(&params.decoder, &input);
        out[ch] * stats.target_std.at(0, ch) + stats.target_mean.at(0, ch)
    })
}

fn toy_stats() -> NormStats<f64> {
    NormStats {
        field_mean: Tensor::from_vec(1, 2, vec![0.3, -0.1]).unwrap(),
        field_std: Tensor::from_vec(1, 2, vec![1.2, 0.8]).unwrap(),
        global_mean: Tensor::from_vec(1, 2, vec![0.5, 0.2]).unwrap(),
        global_std: Tensor::from_vec(1, 2, vec![2.0, 0.5]).unwrap(),
        target_mean: Tensor::from_vec(1, 2, vec![0.05, -0.02]).unwrap(),
        target_std: Tensor::from_vec(1, 2, vec![0.7, 1.1]).unwrap(),
    }
}

#[test]
fn steady_forward_matches_stage_composed_oracle() {
    let mesh = toy_mesh();
    let mut cfg = ModelConfig::new(Mode::Steady, 2, 2, 2, 1);
    cfg.latent = 6;
    cfg.blocks = 2;
    cfg.queries = 3;
    cfg.heads = 2;
    cfg.spe_bands = 1;
    let params = ModelParams::init(cfg, toy_stats(), 77).unwrap();

    let und = gto_core::mesh::edges_from_cells(&mesh).unwrap();
    let edges = gto_core::sampler::orient_edges(&und, &mesh, None).unwrap();
    let cache = GraphCache::build(&mesh, &edges, 1, None).unwrap();
    let frame = gto_core::encoder::FieldFrame {
        fields: Tensor::from_fn(6, 2, |i, j| ((i * 2 + j) as f64 * 0.45).sin()),
        globals: vec![0.9],
        time: 0.0,
    };
    let got = forward_steady(&params, &mesh, &frame, &cache).unwrap();
    let want = model_forward_oracle(
        &params,
        &mesh,
        &frame.fields,
        &frame.globals,
        frame.time,
        edges.senders(),
        edges.receivers(),
    );
    let diff = got.max_abs_diff(&want);
    assert!(diff < TOL, "diff {diff}");
}

#[test]
fn transient_step_matches_stage_composed_oracle() {
    let mesh = toy_mesh();
    let mut cfg = ModelConfig::new(Mode::Transient, 2, 2, 2, 1);
    cfg.latent = 6;
    cfg.blocks = 1;
    cfg.queries = 2;
    cfg.heads = 1;
    cfg.spe_bands = 1;
    let params = ModelParams::init(cfg, toy_stats(), 78).unwrap();

    let und = gto_core::mesh::edges_from_cells(&mesh).unwrap();
    let edges = gto_core::sampler::orient_edges(&und, &mesh, None).unwrap();
    let cache = GraphCache::build(&mesh, &edges, 1, None).unwrap();
    let frame = gto_core::encoder::FieldFrame {
        fields: Tensor::from_fn(6, 2, |i, j| ((i + 3 * j) as f64 * 0.3).cos()),
        globals: vec![1.4],
        time: 0.25,
    };
    let got = step_transient(&params, &mesh, &frame, &cache).unwrap();
    let inc = model_forward_oracle(
        &params,
        &mesh,
        &frame.fields,
        &frame.globals,
        frame.time,
        edges.senders(),
        edges.receivers(),
    );
    let want = Tensor::from_fn(6, 2, |i, j| frame.fields.at(i, j) + inc.at(i, j));
    let diff = got.max_abs_diff(&want);
    assert!(diff < TOL, "diff {diff}");
}

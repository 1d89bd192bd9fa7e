//! Analytic multiply-add counter for the operator forward pass.
//!
//! MLP and matmul terms are exact multiply-add counts per the layer widths;
//! the attention stage is charged with the 2*N*M*C + M^2*C cost model of the
//! three projection products. Everything is linear in node and edge counts,
//! which the bench command and acceptance suite verify by regression.

use alloc::vec::Vec;

/// Architecture facts the counter needs, decoupled from the model module.
#[derive(Clone, Copy, Debug)]
pub struct FlopsConfig {
    pub dim: usize,
    pub in_channels: usize,
    pub global_dim: usize,
    pub out_channels: usize,
    /// Width of the node-type feature (1 scalar or 4 one-hot).
    pub node_feature_width: usize,
    pub latent: usize,
    pub queries: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Positional-encoding columns per node: 2 (2 bands + 1) dim.
    pub spe_cols: usize,
}

/// Multiply-adds for one row through an MLP with the given layer widths.
fn mlp_macs_per_row(dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsBreakdown {
    /// Edge-count-proportional message-passing work (edge MLP + edge encoder).
    pub message_passing: u64,
    /// Projection attention: 2 N M C + M^2 C per block.
    pub attention: u64,
    /// Node MLPs, FFN, layer norm, encoder and decoder heads.
    pub node_terms: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.message_passing + self.attention + self.node_terms
    }
}

/// Multiply-add count of one processor block.
pub fn flops_block(
    n: u64,
    e_count: u64,
    latent: u64,
    queries: u64,
    _heads: u64,
    spe_cols: u64,
) -> u64 {
    flops_block_breakdown(n, e_count, latent, queries, spe_cols).total()
}

pub fn flops_block_breakdown(
    n: u64,
    e_count: u64,
    latent: u64,
    queries: u64,
    spe_cols: u64,
) -> FlopsBreakdown {
    let c = latent;
    let m = queries;
    let edge_mlp = (3 * c + 2 * spe_cols) * c + 2 * c * c;
    let node_mlp = (2 * c + spe_cols) * c + 2 * c * c;
    // Column-sliced heads cost the same in aggregate as one full-width pass.
    let attention = 2 * n * m * c + m * m * c;
    let ffn = 4 * c * c;
    let ln = 4 * c;
    FlopsBreakdown {
        message_passing: e_count * edge_mlp,
        attention,
        node_terms: n * (node_mlp + ffn + ln),
    }
}

/// Full-model multiply-add count for `steps` autoregressive evaluations.
pub fn count_flops(cfg: &FlopsConfig, n: u64, e_count: u64, steps: u64) -> u64 {
    count_flops_breakdown(cfg, n, e_count, steps).total()
}

pub fn count_flops_breakdown(cfg: &FlopsConfig, n: u64, e_count: u64, steps: u64) -> FlopsBreakdown {
    let c = cfg.latent as u64;
    let local_in = (cfg.dim + cfg.node_feature_width + cfg.in_channels) as u64;
    let edge_in = (2 * cfg.dim + 1) as u64;
    let global_in = (cfg.global_dim + 1) as u64;

    let enc_local = mlp_macs_per_row(&[local_in as usize, c as usize, c as usize, c as usize]);
    let enc_edge = mlp_macs_per_row(&[edge_in as usize, c as usize, c as usize, c as usize]);
    let enc_global = mlp_macs_per_row(&[global_in as usize, c as usize, c as usize, c as usize]);
    let decoder = mlp_macs_per_row(&[
        2 * c as usize,
        c as usize,
        c as usize,
        cfg.out_channels,
    ]);

    let mut acc = FlopsBreakdown {
        message_passing: e_count * enc_edge,
        attention: 0,
        node_terms: n * (enc_local + decoder) + enc_global,
    };
    for _ in 0..cfg.blocks {
        let b = flops_block_breakdown(
            n,
            e_count,
            c,
            cfg.queries as u64,
            cfg.spe_cols as u64,
        );
        acc.message_passing += b.message_passing;
        acc.attention += b.attention;
        acc.node_terms += b.node_terms;
    }
    FlopsBreakdown {
        message_passing: acc.message_passing * steps,
        attention: acc.attention * steps,
        node_terms: acc.node_terms * steps,
    }
}

/// Least-squares line fit returning (slope, intercept, r_squared).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let p = slope * x + intercept;
            (y - p) * (y - p)
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}

/// The configuration referenced by the scaling checks: latent 128, four
/// blocks, four heads, queries matching the latent width.
pub fn reference_config() -> FlopsConfig {
    FlopsConfig {
        dim: 2,
        in_channels: 3,
        global_dim: 1,
        out_channels: 3,
        node_feature_width: 1,
        latent: 128,
        queries: 128,
        heads: 4,
        blocks: 4,
        spe_cols: 36,
    }
}

pub fn counts_over_node_grid(cfg: &FlopsConfig, ns: &[u64], edges_per_node: f64, steps: u64) -> Vec<u64> {
    ns.iter()
        .map(|&n| count_flops(cfg, n, (n as f64 * edges_per_node) as u64, steps))
        .collect()
}

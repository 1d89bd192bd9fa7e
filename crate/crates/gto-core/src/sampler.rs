//! Topology-aware graph sampling: flux orientation, edge filtering, uniform
//! edge sampling and the point-edge consistent scheme for very large meshes.
//!
//! Every function here is a pure function of (input, seed).

use crate::error::{err, Result};
use crate::mesh::{DirectedEdgeSet, Mesh};
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

/// Mesh-size regime driving how aggressively connectivity is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Small,
    Medium,
    Large,
}

/// Node-count thresholds separating the tiers. Defaults: below 1e5 small,
/// up to 1e6 medium, above that large.
#[derive(Clone, Copy, Debug)]
pub struct TierThresholds {
    pub small_below: usize,
    pub medium_max: usize,
}

impl Default for TierThresholds {
    fn default() -> Self {
        TierThresholds {
            small_below: 100_000,
            medium_max: 1_000_000,
        }
    }
}

impl Tier {
    pub fn classify(n_nodes: usize, t: &TierThresholds) -> Tier {
        if n_nodes < t.small_below {
            Tier::Small
        } else if n_nodes <= t.medium_max {
            Tier::Medium
        } else {
            Tier::Large
        }
    }
}

/// Orient each undirected edge by the sign of <u_i, x_j - x_i> where u_i is
/// the per-node flux vector. A zero product, or no flux field at all, falls
/// back to min-index -> max-index.
pub fn orient_edges(
    edges: &[(u32, u32)],
    mesh: &Mesh,
    flux_field: Option<&[f64]>,
) -> Result<DirectedEdgeSet> {
    let d = mesh.dim();
    let n = mesh.n_nodes();
    if let Some(flux) = flux_field {
        if flux.len() != n * d {
            return Err(err!(
                Validation,
                "flux field has {} values, mesh wants {}",
                flux.len(),
                n * d
            ));
        }
    }
    let mut senders = Vec::with_capacity(edges.len());
    let mut receivers = Vec::with_capacity(edges.len());
    for &(i, j) in edges {
        if i as usize >= n || j as usize >= n {
            return Err(err!(Validation, "edge ({i},{j}) out of range"));
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let mut forward = true; // lo -> hi
        if let Some(flux) = flux_field {
            let u = &flux[lo as usize * d..(lo as usize + 1) * d];
            let xi = mesh.coord(lo as usize);
            let xj = mesh.coord(hi as usize);
            let dot: f64 = u
                .iter()
                .zip(xi.iter().zip(xj))
                .map(|(ui, (a, b))| ui * (b - a))
                .sum();
            if dot < 0.0 {
                forward = false;
            }
            // dot == 0 keeps the min->max tie-break.
        }
        if forward {
            senders.push(lo);
            receivers.push(hi);
        } else {
            senders.push(hi);
            receivers.push(lo);
        }
    }
    Ok(DirectedEdgeSet::from_parts_unchecked(senders, receivers))
}

/// Keep exactly one direction per undirected pair: the first occurrence in
/// input order wins, so a symmetric closure built as (originals, reverses)
/// filters back to the originals.
pub fn flux_filter(edges: &DirectedEdgeSet) -> DirectedEdgeSet {
    let mut keys: Vec<(u32, u32, usize)> = edges
        .pairs()
        .enumerate()
        .map(|(k, (s, r))| if s < r { (s, r, k) } else { (r, s, k) })
        .collect();
    keys.sort_unstable();
    let mut keep: Vec<usize> = Vec::with_capacity(keys.len());
    let mut last: Option<(u32, u32)> = None;
    let mut best = usize::MAX;
    for &(a, b, k) in &keys {
        if last == Some((a, b)) {
            best = best.min(k);
        } else {
            if last.is_some() {
                keep.push(best);
            }
            last = Some((a, b));
            best = k;
        }
    }
    if last.is_some() {
        keep.push(best);
    }
    keep.sort_unstable();
    let senders = keep.iter().map(|&k| edges.senders()[k]).collect();
    let receivers = keep.iter().map(|&k| edges.receivers()[k]).collect();
    DirectedEdgeSet::from_parts_unchecked(senders, receivers)
}

/// Sparse subgraph produced by any of the samplers. Node and edge indices
/// refer to the original mesh.
#[derive(Clone, Debug)]
pub struct SampledGraph {
    pub kept_nodes: Vec<u32>,
    pub kept_edges: DirectedEdgeSet,
    pub ratio: f64,
}

impl SampledGraph {
    /// Every endpoint of a kept edge must itself be kept.
    pub fn check_consistent(&self) -> Result<()> {
        let cap = self
            .kept_nodes
            .iter()
            .map(|&n| n as usize + 1)
            .max()
            .unwrap_or(0);
        let mut mask = vec![false; cap];
        for &n in &self.kept_nodes {
            mask[n as usize] = true;
        }
        for (s, r) in self.kept_edges.pairs() {
            let covered = |n: u32| (n as usize) < mask.len() && mask[n as usize];
            if !covered(s) || !covered(r) {
                return Err(err!(Validation, "dangling edge ({s},{r})"));
            }
        }
        Ok(())
    }
}

/// Keep each edge independently with probability `ratio`; one uniform draw
/// per edge in edge order, so a smaller ratio on the same seed keeps a
/// subset of a larger ratio's edges.
pub fn sample_edges(edges: &DirectedEdgeSet, ratio: f64, seed: u64) -> Result<SampledGraph> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(err!(Config, "edge sampling ratio {ratio} not in (0,1]"));
    }
    let mut rng = Rng::new(seed);
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for (s, r) in edges.pairs() {
        let xi = rng.uniform();
        if xi < ratio {
            senders.push(s);
            receivers.push(r);
        }
    }
    let kept_edges = DirectedEdgeSet::from_parts_unchecked(senders, receivers);
    let kept_nodes = endpoint_set(&kept_edges);
    Ok(SampledGraph {
        kept_nodes,
        kept_edges,
        ratio,
    })
}

fn endpoint_set(edges: &DirectedEdgeSet) -> Vec<u32> {
    let mut nodes: Vec<u32> = edges
        .senders()
        .iter()
        .chain(edges.receivers())
        .copied()
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Large-tier sampling: scan edges in a seeded random order, keeping an edge
/// whenever its uncovered endpoints still fit in the node budget, then fill
/// what is left of the budget with uniform draws from uncovered nodes.
pub fn point_edge_consistent_sample(
    mesh: &Mesh,
    edges: &DirectedEdgeSet,
    node_budget: usize,
    seed: u64,
) -> Result<SampledGraph> {
    let n = mesh.n_nodes();
    if node_budget < 2 {
        return Err(err!(Config, "node budget {node_budget} below 2"));
    }
    if node_budget > n {
        return Err(err!(Config, "node budget {node_budget} exceeds {n} nodes"));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..edges.len()).collect();
    rng.shuffle(&mut order);

    let mut covered = vec![false; n];
    let mut n_covered = 0usize;
    let mut keep = Vec::new();
    for &k in &order {
        let (s, r) = (edges.senders()[k], edges.receivers()[k]);
        let new = usize::from(!covered[s as usize]) + usize::from(!covered[r as usize]);
        if n_covered + new <= node_budget {
            keep.push(k);
            for e in [s, r] {
                if !covered[e as usize] {
                    covered[e as usize] = true;
                    n_covered += 1;
                }
            }
        }
    }
    keep.sort_unstable();
    let kept_edges = DirectedEdgeSet::from_parts_unchecked(
        keep.iter().map(|&k| edges.senders()[k]).collect(),
        keep.iter().map(|&k| edges.receivers()[k]).collect(),
    );

    // Fill the remaining budget from uncovered regions.
    let mut uncovered: Vec<u32> = (0..n as u32).filter(|&i| !covered[i as usize]).collect();
    rng.shuffle(&mut uncovered);
    let mut kept_nodes: Vec<u32> = (0..n as u32).filter(|&i| covered[i as usize]).collect();
    for &extra in uncovered.iter().take(node_budget - n_covered) {
        kept_nodes.push(extra);
    }
    kept_nodes.sort_unstable();

    let graph = SampledGraph {
        kept_nodes,
        kept_edges,
        ratio: node_budget as f64 / n as f64,
    };
    graph.check_consistent()?;
    Ok(graph)
}

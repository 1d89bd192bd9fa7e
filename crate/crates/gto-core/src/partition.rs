//! Inference-time mesh partitioning and merging of per-part predictions.

use crate::error::{err, Result};
use crate::mesh::{DirectedEdgeSet, Mesh};
use crate::real::{r, Real};
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// One subgraph of a partition. `nodes` holds global mesh indices (core
/// nodes first, halo after); `edges` are local indices into `nodes`.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub nodes: Vec<u32>,
    pub n_core: usize,
    pub edges: DirectedEdgeSet,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub parts: Vec<Subgraph>,
    /// owners[node] = parts whose node list contains it.
    pub owners: Vec<Vec<u32>>,
}

impl Partition {
    pub fn coverage_complete(&self) -> bool {
        self.owners.iter().all(|o| !o.is_empty())
    }
}

/// Split nodes into K equal-count bins along the longest bounding-box axis,
/// then grow each bin by `halo_depth` hops of the mesh graph. Subgraphs keep
/// the edges whose endpoints both survived.
pub fn partition_mesh(mesh: &Mesh, edges: &DirectedEdgeSet, k: usize, halo_depth: usize) -> Result<Partition> {
    let n = mesh.n_nodes();
    if k < 1 {
        return Err(err!(Config, "partition count must be at least 1"));
    }
    if k > n {
        return Err(err!(Config, "cannot split {n} nodes into {k} parts"));
    }

    // Longest axis of the bounding box.
    let (lo, hi) = mesh.bbox();
    let axis = (0..mesh.dim())
        .max_by(|&a, &b| {
            let da = hi[a] - lo[a];
            let db = hi[b] - lo[b];
            da.partial_cmp(&db).unwrap_or(core::cmp::Ordering::Equal)
        })
        .unwrap_or(0);

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        let xa = mesh.coord(a as usize)[axis];
        let xb = mesh.coord(b as usize)[axis];
        xa.partial_cmp(&xb)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let adj = edges.adjacency(n);
    let mut parts = Vec::with_capacity(k);
    let mut owners: Vec<Vec<u32>> = vec![Vec::new(); n];

    for p in 0..k {
        let from = p * n / k;
        let to = (p + 1) * n / k;
        let mut member = vec![false; n];
        let mut nodes: Vec<u32> = order[from..to].to_vec();
        nodes.sort_unstable();
        for &v in &nodes {
            member[v as usize] = true;
        }
        let n_core = nodes.len();

        // Halo: breadth-first expansion over the undirected adjacency.
        let mut frontier = nodes.clone();
        for _ in 0..halo_depth {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in &adj[v as usize] {
                    if !member[w as usize] {
                        member[w as usize] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort_unstable();
            nodes.extend_from_slice(&next);
            frontier = next;
        }

        // Local index map and induced edge list.
        let mut local = vec![u32::MAX; n];
        for (li, &g) in nodes.iter().enumerate() {
            local[g as usize] = li as u32;
        }
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for (s, rr) in edges.pairs() {
            if member[s as usize] && member[rr as usize] {
                senders.push(local[s as usize]);
                receivers.push(local[rr as usize]);
            }
        }
        for &g in &nodes {
            owners[g as usize].push(p as u32);
        }
        parts.push(Subgraph {
            nodes,
            n_core,
            edges: DirectedEdgeSet::from_parts_unchecked(senders, receivers),
        });
    }

    let partition = Partition { parts, owners };
    debug_assert!(partition.coverage_complete());
    Ok(partition)
}

/// Average per-part predictions back onto the full mesh. Each part supplies
/// one row per node in its `nodes` list.
pub fn merge_predictions<R: Real>(
    partition: &Partition,
    per_part: &[Tensor<R>],
    n_nodes: usize,
) -> Result<Tensor<R>> {
    if per_part.len() != partition.parts.len() {
        return Err(err!(
            Dim,
            "{} outputs for {} parts",
            per_part.len(),
            partition.parts.len()
        ));
    }
    let c = per_part
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| err!(Config, "no parts to merge"))?;
    // Mean as pivot + mean of deviations from the first contribution: when
    // every owner agrees the deviations cancel exactly, so merging an
    // identity predictor reproduces the field bit for bit.
    let mut pivot = Tensor::<R>::zeros(n_nodes, c);
    let mut dev = Tensor::<R>::zeros(n_nodes, c);
    let mut count = vec![0u32; n_nodes];
    for (part, out) in partition.parts.iter().zip(per_part) {
        if out.rows() != part.nodes.len() || out.cols() != c {
            return Err(err!(
                Dim,
                "part output is {}x{}, wanted {}x{c}",
                out.rows(),
                out.cols(),
                part.nodes.len()
            ));
        }
        for (li, &g) in part.nodes.iter().enumerate() {
            let gi = g as usize;
            if count[gi] == 0 {
                pivot.row_mut(gi).copy_from_slice(out.row(li));
            } else {
                let piv = pivot.row(gi).to_vec();
                let drow = dev.row_mut(gi);
                for ((d, &v), p) in drow.iter_mut().zip(out.row(li)).zip(piv) {
                    *d = *d + (v - p);
                }
            }
            count[gi] += 1;
        }
    }
    for (i, &cnt) in count.iter().enumerate() {
        if cnt == 0 {
            return Err(err!(Coverage, "node {i} predicted by no part"));
        }
        let inv = R::one() / r::<R>(cnt as f64);
        let piv = pivot.row(i).to_vec();
        for (v, p) in dev.row_mut(i).iter_mut().zip(piv) {
            *v = p + *v * inv;
        }
    }
    Ok(dev)
}

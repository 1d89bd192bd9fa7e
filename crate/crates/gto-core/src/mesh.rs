//! Unstructured meshes and the directed edge sets built from them.

use crate::error::{err, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Role of a node in the domain; everything but `Interior` is boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeType {
    Interior = 0,
    Inlet = 1,
    Outlet = 2,
    Wall = 3,
}

impl NodeType {
    pub fn from_u8(x: u8) -> Result<NodeType> {
        match x {
            0 => Ok(NodeType::Interior),
            1 => Ok(NodeType::Inlet),
            2 => Ok(NodeType::Outlet),
            3 => Ok(NodeType::Wall),
            _ => Err(err!(Validation, "unknown node type {x}")),
        }
    }

    pub fn is_boundary(self) -> bool {
        self != NodeType::Interior
    }
}

/// Discretized domain: node coordinates plus cells (triangles or quads in
/// 2D, tetrahedra as arity-4 cells in 3D) and per-node type tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    coords: Vec<f64>,
    dim: usize,
    cells: Vec<u32>,
    cell_arity: usize,
    node_type: Vec<NodeType>,
}

impl Mesh {
    pub fn new(
        coords: Vec<f64>,
        dim: usize,
        cells: Vec<u32>,
        cell_arity: usize,
        node_type: Vec<NodeType>,
    ) -> Result<Mesh> {
        if !(2..=3).contains(&dim) {
            return Err(err!(Validation, "dim must be 2 or 3, got {dim}"));
        }
        if coords.len() % dim != 0 {
            return Err(err!(Validation, "coords length not a multiple of dim"));
        }
        let n = coords.len() / dim;
        if node_type.len() != n {
            return Err(err!(Validation, "node_type length {} != {n}", node_type.len()));
        }
        if cell_arity < 3 {
            return Err(err!(Validation, "cells need at least 3 vertices"));
        }
        if cells.len() % cell_arity != 0 {
            return Err(err!(Validation, "cells length not a multiple of arity"));
        }
        let mesh = Mesh {
            coords,
            dim,
            cells,
            cell_arity,
            node_type,
        };
        mesh.validate_cells()?;
        Ok(mesh)
    }

    fn validate_cells(&self) -> Result<()> {
        let n = self.n_nodes() as u32;
        for (c, cell) in self.cells.chunks(self.cell_arity).enumerate() {
            for &v in cell {
                if v >= n {
                    return Err(err!(Validation, "cell {c} references node {v} >= {n}"));
                }
            }
            for i in 0..cell.len() {
                for j in i + 1..cell.len() {
                    if cell[i] == cell[j] {
                        return Err(err!(
                            Validation,
                            "cell {c} repeats vertex {} (degenerate)",
                            cell[i]
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, node: usize) -> &[f64] {
        &self.coords[node * self.dim..(node + 1) * self.dim]
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn cell_arity(&self) -> usize {
        self.cell_arity
    }

    pub fn n_cells(&self) -> usize {
        if self.cells.is_empty() {
            0
        } else {
            self.cells.len() / self.cell_arity
        }
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_type
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        self.node_type.iter().map(|t| t.is_boundary()).collect()
    }

    pub fn boundary_nodes(&self) -> Vec<u32> {
        self.node_type
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_boundary())
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Bounding box as (min, max) per axis.
    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for node in self.coords.chunks(self.dim) {
            for (a, &x) in node.iter().enumerate() {
                lo[a] = lo[a].min(x);
                hi[a] = hi[a].max(x);
            }
        }
        (lo, hi)
    }

    pub fn edge_length(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coord(i), self.coord(j));
        crate::real::fm::sqrt(
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>(),
        )
    }
}

/// Unique undirected edges, each stored as (min, max).
pub fn edges_from_cells(mesh: &Mesh) -> Result<Vec<(u32, u32)>> {
    let arity = mesh.cell_arity();
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(mesh.n_cells() * arity);
    for cell in mesh.cells().chunks(arity) {
        // Perimeter edges: consecutive vertices plus the closing edge.
        // Arity-4 cells in 3D are tetrahedra, where all six pairs are edges.
        if mesh.dim() == 3 && arity == 4 {
            for i in 0..4 {
                for j in i + 1..4 {
                    edges.push(ordered(cell[i], cell[j]));
                }
            }
        } else {
            for k in 0..arity {
                edges.push(ordered(cell[k], cell[(k + 1) % arity]));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Directed edges over mesh nodes; parallel sender/receiver arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedEdgeSet {
    senders: Vec<u32>,
    receivers: Vec<u32>,
}

impl DirectedEdgeSet {
    pub fn new(senders: Vec<u32>, receivers: Vec<u32>) -> Result<DirectedEdgeSet> {
        if senders.len() != receivers.len() {
            return Err(err!(Validation, "sender/receiver length mismatch"));
        }
        let set = DirectedEdgeSet { senders, receivers };
        set.check_invariants()?;
        Ok(set)
    }

    pub fn empty() -> DirectedEdgeSet {
        DirectedEdgeSet {
            senders: Vec::new(),
            receivers: Vec::new(),
        }
    }

    fn check_invariants(&self) -> Result<()> {
        if let Some((s, _)) = self.pairs().find(|(s, r)| s == r) {
            return Err(err!(Validation, "self-loop at node {s}"));
        }
        let mut seen: Vec<(u32, u32)> = self.pairs().collect();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0] == w[1] {
                return Err(err!(Validation, "duplicate edge {:?}", w[0]));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    pub fn senders(&self) -> &[u32] {
        &self.senders
    }

    pub fn receivers(&self) -> &[u32] {
        &self.receivers
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.senders
            .iter()
            .copied()
            .zip(self.receivers.iter().copied())
    }

    /// Both directions for every stored edge, originals first.
    pub fn symmetric_closure(&self) -> DirectedEdgeSet {
        let mut senders = self.senders.clone();
        let mut receivers = self.receivers.clone();
        senders.extend_from_slice(&self.receivers);
        receivers.extend_from_slice(&self.senders);
        DirectedEdgeSet { senders, receivers }
    }

    /// Skip the invariant scan for internally constructed sets.
    pub(crate) fn from_parts_unchecked(senders: Vec<u32>, receivers: Vec<u32>) -> DirectedEdgeSet {
        DirectedEdgeSet { senders, receivers }
    }

    pub fn max_node(&self) -> Option<u32> {
        self.pairs().map(|(s, r)| s.max(r)).max()
    }

    /// Undirected adjacency lists over `n` nodes.
    pub fn adjacency(&self, n: usize) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); n];
        for (s, r) in self.pairs() {
            adj[s as usize].push(r);
            adj[r as usize].push(s);
        }
        adj
    }
}

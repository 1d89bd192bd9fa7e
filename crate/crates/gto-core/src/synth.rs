//! Synthetic desk-scale problems with classical solvers as ground truth:
//! jittered-grid meshes, explicit graph diffusion, and a Darcy-style
//! coefficient-to-solution map solved by conjugate gradients.
//!
//! Physics run on the combinatorial graph Laplacian
//! (L u)_i = sum_j c_ij (u_i - u_j) with c_ij = 1 for diffusion and the
//! midpoint coefficient for the Darcy-style solve. The explicit-Euler
//! steps enforce the conservative dt <= safety * min_len^2 / (2 d kappa)
//! bound, far inside the spectral limit of the combinatorial operator.

use crate::encoder::FieldFrame;
use crate::error::{err, Result};
use crate::mesh::{edges_from_cells, Mesh, NodeType};
use crate::real::fm;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{SteadySample, TransientSample};
use alloc::vec;
use alloc::vec::Vec;

// ---------------------------------------------------------------------------
// Mesh generation
// ---------------------------------------------------------------------------

const JITTER: f64 = 0.2;
const MAX_RETRIES: usize = 8;

/// Random-jittered grid triangulation of the unit square (or unit cube with
/// six tetrahedra per cell). Boundary nodes stay on the boundary and are
/// tagged inlet (low x), outlet (high x) or wall; the graph is connected by
/// construction. Degenerate layouts retry with a perturbed seed.
pub fn gen_mesh(n_target: usize, dim: usize, seed: u64) -> Result<Mesh> {
    if n_target < 4 {
        return Err(err!(Config, "mesh wants at least 4 nodes"));
    }
    for attempt in 0..MAX_RETRIES {
        let mesh = match dim {
            2 => gen_mesh_2d(n_target, seed.wrapping_add(attempt as u64 * 0x9e37)),
            3 => gen_mesh_3d(n_target, seed.wrapping_add(attempt as u64 * 0x9e37)),
            _ => return Err(err!(Config, "dim must be 2 or 3")),
        }?;
        if mesh_is_sound(&mesh) {
            return Ok(mesh);
        }
    }
    Err(err!(Numeric, "mesh generation kept producing degenerate cells"))
}

fn gen_mesh_2d(n_target: usize, seed: u64) -> Result<Mesh> {
    let k = (fm::round(fm::sqrt(n_target as f64)) as usize).max(2);
    let h = 1.0 / (k - 1) as f64;
    let mut rng = Rng::new(seed);
    let mut coords = Vec::with_capacity(k * k * 2);
    let mut types = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let on_x0 = j == 0;
            let on_x1 = j == k - 1;
            let on_y = i == 0 || i == k - 1;
            let mut x = j as f64 * h;
            let mut y = i as f64 * h;
            // Interior nodes jitter freely; boundary nodes only along their
            // face so the domain stays the unit square.
            let dx = rng.uniform_in(-JITTER, JITTER) * h;
            let dy = rng.uniform_in(-JITTER, JITTER) * h;
            if !(on_x0 || on_x1) {
                x += dx;
            }
            if !on_y {
                y += dy;
            }
            coords.push(x);
            coords.push(y);
            types.push(if on_x0 {
                NodeType::Inlet
            } else if on_x1 {
                NodeType::Outlet
            } else if on_y {
                NodeType::Wall
            } else {
                NodeType::Interior
            });
        }
    }
    let mut cells = Vec::with_capacity((k - 1) * (k - 1) * 6);
    for i in 0..k - 1 {
        for j in 0..k - 1 {
            let a = (i * k + j) as u32;
            let b = a + 1;
            let c = a + k as u32;
            let d = c + 1;
            // One diagonal direction everywhere gives a structured
            // triangulation with uniform interior degree.
            cells.extend_from_slice(&[a, b, d, a, d, c]);
        }
    }
    Mesh::new(coords, 2, cells, 3, types)
}

fn gen_mesh_3d(n_target: usize, seed: u64) -> Result<Mesh> {
    let k = (fm::round(fm::cbrt(n_target as f64)) as usize).max(2);
    let h = 1.0 / (k - 1) as f64;
    let mut rng = Rng::new(seed);
    let mut coords = Vec::with_capacity(k * k * k * 3);
    let mut types = Vec::with_capacity(k * k * k);
    for iz in 0..k {
        for iy in 0..k {
            for ix in 0..k {
                let edge_x0 = ix == 0;
                let edge_x1 = ix == k - 1;
                let edge_y = iy == 0 || iy == k - 1;
                let edge_z = iz == 0 || iz == k - 1;
                let mut p = [ix as f64 * h, iy as f64 * h, iz as f64 * h];
                let jit = [
                    rng.uniform_in(-JITTER, JITTER) * h,
                    rng.uniform_in(-JITTER, JITTER) * h,
                    rng.uniform_in(-JITTER, JITTER) * h,
                ];
                if !(edge_x0 || edge_x1) {
                    p[0] += jit[0];
                }
                if !edge_y {
                    p[1] += jit[1];
                }
                if !edge_z {
                    p[2] += jit[2];
                }
                coords.extend_from_slice(&p);
                types.push(if edge_x0 {
                    NodeType::Inlet
                } else if edge_x1 {
                    NodeType::Outlet
                } else if edge_y || edge_z {
                    NodeType::Wall
                } else {
                    NodeType::Interior
                });
            }
        }
    }
    let idx = |ix: usize, iy: usize, iz: usize| (iz * k * k + iy * k + ix) as u32;
    let mut cells = Vec::new();
    // Kuhn decomposition: six tetrahedra per cube, consistent across cells.
    const TETS: [[usize; 4]; 6] = [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
        [0, 2, 6, 7],
        [0, 2, 3, 7],
    ];
    for iz in 0..k - 1 {
        for iy in 0..k - 1 {
            for ix in 0..k - 1 {
                let corner = |bit: usize| {
                    idx(ix + (bit & 1), iy + ((bit >> 1) & 1), iz + ((bit >> 2) & 1))
                };
                for tet in TETS {
                    for &v in &tet {
                        cells.push(corner(v));
                    }
                }
            }
        }
    }
    Mesh::new(coords, 3, cells, 4, types)
}

fn mesh_is_sound(mesh: &Mesh) -> bool {
    if mesh.dim() == 2 {
        // Positive signed area per triangle, with a floor against slivers.
        for cell in mesh.cells().chunks(3) {
            let a = mesh.coord(cell[0] as usize);
            let b = mesh.coord(cell[1] as usize);
            let c = mesh.coord(cell[2] as usize);
            let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
            if area.abs() < 1e-9 {
                return false;
            }
        }
    } else {
        for cell in mesh.cells().chunks(4) {
            let p: Vec<&[f64]> = cell.iter().map(|&v| mesh.coord(v as usize)).collect();
            let m: Vec<[f64; 3]> = (1..4)
                .map(|i| {
                    [
                        p[i][0] - p[0][0],
                        p[i][1] - p[0][1],
                        p[i][2] - p[0][2],
                    ]
                })
                .collect();
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            if det.abs() < 1e-12 {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Length-weighted graph Laplacian
// ---------------------------------------------------------------------------

/// Sparse symmetric operator over mesh nodes.
pub struct GraphLaplacian {
    /// Per node: (neighbor, weight); unit weights unless a coefficient
    /// field is given, then the edge midpoint average.
    pub rows: Vec<Vec<(u32, f64)>>,
    pub min_edge_len: f64,
}

impl GraphLaplacian {
    /// `coeff[node]`: per-node coefficient; edge weights use the midpoint
    /// average. Pass `None` for unit coefficients.
    pub fn build(mesh: &Mesh, coeff: Option<&[f64]>) -> Result<GraphLaplacian> {
        let n = mesh.n_nodes();
        if let Some(a) = coeff {
            if a.len() != n {
                return Err(err!(Dim, "coefficient field length {} for {n} nodes", a.len()));
            }
            if let Some(bad) = a.iter().find(|&&x| !(x > 0.0)) {
                return Err(err!(Validation, "coefficient must be positive, got {bad}"));
            }
        }
        let edges = edges_from_cells(mesh)?;
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut min_len = f64::INFINITY;
        for (i, j) in edges {
            let len = mesh.edge_length(i as usize, j as usize);
            if len <= 0.0 {
                return Err(err!(Validation, "zero-length edge ({i},{j})"));
            }
            min_len = min_len.min(len);
            let w = match coeff {
                Some(a) => 0.5 * (a[i as usize] + a[j as usize]),
                None => 1.0,
            };
            rows[i as usize].push((j, w));
            rows[j as usize].push((i, w));
        }
        Ok(GraphLaplacian {
            rows,
            min_edge_len: min_len,
        })
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, w) in row {
                acc += w * (u[i] - u[j as usize]);
            }
            out[i] = acc;
        }
    }
}

/// Largest stable time step for explicit Euler diffusion at the given
/// diffusivity, using the stated safety factor.
pub fn stable_dt(mesh_min_edge: f64, dim: usize, kappa: f64, safety: f64) -> f64 {
    safety * mesh_min_edge * mesh_min_edge / (2.0 * dim as f64 * kappa)
}

/// Explicit Euler on the weighted graph Laplacian with Dirichlet rows held
/// at their initial values. Returns `steps + 1` frames including u0.
///
/// Two per-step checks run on every trajectory: interior values stay within
/// the initial min/max envelope (discrete maximum principle), and the total
/// interior change balances the flux through boundary-crossing edges.
pub fn solve_diffusion_oracle(
    mesh: &Mesh,
    u0: &[f64],
    kappa: f64,
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = mesh.n_nodes();
    if u0.len() != n {
        return Err(err!(Dim, "u0 length {} for {n} nodes", u0.len()));
    }
    if kappa < 0.0 {
        return Err(err!(Config, "negative diffusivity"));
    }
    let lap = GraphLaplacian::build(mesh, None)?;
    if kappa > 0.0 {
        let bound = stable_dt(lap.min_edge_len, mesh.dim(), kappa, 1.0);
        if dt > bound {
            return Err(err!(
                Config,
                "dt {dt} violates the stability bound {bound:.3e}"
            ));
        }
    }
    let boundary = mesh.boundary_mask();
    let envelope = u0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });

    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(u0.to_vec());
    let mut u = u0.to_vec();
    let mut lu = vec![0.0; n];
    for _ in 0..steps {
        lap.apply(&u, &mut lu);
        let mut next = u.clone();
        let mut interior_change = 0.0;
        for i in 0..n {
            if !boundary[i] {
                let du = -kappa * dt * lu[i];
                next[i] += du;
                interior_change += du;
            }
        }
        // Flux balance: interior-interior edge terms cancel pairwise, so the
        // net interior change must equal the flow across boundary edges.
        let mut boundary_flux = 0.0;
        for (i, row) in lap.rows.iter().enumerate() {
            if boundary[i] {
                continue;
            }
            for &(j, w) in row {
                if boundary[j as usize] {
                    boundary_flux += -kappa * dt * w * (u[i] - u[j as usize]);
                }
            }
        }
        let scale = interior_change.abs().max(1.0);
        if (interior_change - boundary_flux).abs() > 1e-9 * scale {
            return Err(err!(
                Numeric,
                "flux balance violated: {interior_change} vs {boundary_flux}"
            ));
        }
        for (i, &x) in next.iter().enumerate() {
            if !boundary[i] && (x < envelope.0 - 1e-9 || x > envelope.1 + 1e-9) {
                return Err(err!(Numeric, "maximum principle violated at node {i}"));
            }
        }
        u = next;
        frames.push(u.clone());
    }
    Ok(frames)
}

/// Solve L_a u = f with zero Dirichlet boundary by conjugate gradients on
/// the interior block, to a relative residual of 1e-8.
pub fn solve_darcy_like_oracle(mesh: &Mesh, coeff: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let n = mesh.n_nodes();
    if f.len() != n {
        return Err(err!(Dim, "source length {} for {n} nodes", f.len()));
    }
    let lap = GraphLaplacian::build(mesh, Some(coeff))?;
    let boundary = mesh.boundary_mask();
    let interior: Vec<usize> = (0..n).filter(|&i| !boundary[i]).collect();
    if interior.is_empty() {
        return Ok(vec![0.0; n]);
    }
    let mut slot = vec![usize::MAX; n];
    for (k, &i) in interior.iter().enumerate() {
        slot[i] = k;
    }
    let m = interior.len();
    // Interior operator: boundary values are zero, so crossing edges only
    // contribute the diagonal.
    let apply = |x: &[f64], out: &mut [f64]| {
        for (k, &i) in interior.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, w) in &lap.rows[i] {
                let xj = if boundary[j as usize] {
                    0.0
                } else {
                    x[slot[j as usize]]
                };
                acc += w * (x[k] - xj);
            }
            out[k] = acc;
        }
    };

    let b: Vec<f64> = interior.iter().map(|&i| f[i]).collect();
    let b_norm = fm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    let mut x = vec![0.0; m];
    if b_norm == 0.0 {
        // Homogeneous system: the unique solution is zero.
        let mut full = vec![0.0; n];
        for (k, &i) in interior.iter().enumerate() {
            full[i] = x[k];
        }
        return Ok(full);
    }
    let mut r_vec = b.clone();
    let mut p = r_vec.clone();
    let mut ap = vec![0.0; m];
    let mut rs_old: f64 = r_vec.iter().map(|v| v * v).sum();
    let max_iters = 20 * m + 100;
    let tol = 1e-8 * b_norm;
    let mut converged = fm::sqrt(rs_old) <= tol;
    for _ in 0..max_iters {
        if converged {
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(err!(Numeric, "conjugate gradient met a non-positive curvature"));
        }
        let alpha = rs_old / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r_vec[k] -= alpha * ap[k];
        }
        let rs_new: f64 = r_vec.iter().map(|v| v * v).sum();
        if fm::sqrt(rs_new) <= tol {
            converged = true;
        }
        let beta = rs_new / rs_old;
        for k in 0..m {
            p[k] = r_vec[k] + beta * p[k];
        }
        rs_old = rs_new;
    }
    if !converged {
        return Err(err!(Numeric, "conjugate gradient did not reach 1e-8"));
    }
    let mut full = vec![0.0; n];
    for (k, &i) in interior.iter().enumerate() {
        full[i] = x[k];
    }
    Ok(full)
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DiffusionSpec {
    pub n_target: usize,
    pub dim: usize,
    pub frames: usize,
    /// Solver steps folded into one stored frame; the solver runs at its
    /// stable dt while frames advance substeps * dt.
    pub substeps: usize,
    pub kappa_range: (f64, f64),
    pub safety: f64,
    pub bumps: usize,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        DiffusionSpec {
            n_target: 300,
            dim: 2,
            frames: 30,
            substeps: 7000,
            kappa_range: (0.5, 1.5),
            safety: 0.35,
            bumps: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DarcySpec {
    pub n_target: usize,
    pub dim: usize,
    pub bumps: usize,
    pub log_amplitude: f64,
}

impl Default for DarcySpec {
    fn default() -> Self {
        DarcySpec {
            n_target: 300,
            dim: 2,
            bumps: 4,
            log_amplitude: 1.0,
        }
    }
}

/// Smooth random field: a sum of Gaussian bumps over the unit box.
fn bump_field(mesh: &Mesh, bumps: usize, rng: &mut Rng) -> Vec<f64> {
    let d = mesh.dim();
    let mut centers = Vec::with_capacity(bumps);
    for _ in 0..bumps {
        let c: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
        let amp = rng.uniform_in(-1.0, 1.0);
        let sigma = rng.uniform_in(0.12, 0.3);
        centers.push((c, amp, sigma));
    }
    (0..mesh.n_nodes())
        .map(|i| {
            let x = mesh.coord(i);
            centers
                .iter()
                .map(|(c, amp, sigma)| {
                    let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    amp * fm::exp(-d2 / (2.0 * sigma * sigma))
                })
                .sum()
        })
        .collect()
}

/// One diffusion trajectory: bump-field initial condition, per-sample
/// diffusivity entering the model as the global parameter, fixed Dirichlet
/// boundary from the initial frame.
pub fn diffusion_sample(spec: &DiffusionSpec, seed: u64) -> Result<TransientSample<f64>> {
    let base = Rng::new(seed);
    let mesh = gen_mesh(spec.n_target, spec.dim, base.fork(0).next_u64_pure())?;
    let mut rng = base.fork(1);
    let kappa = rng.uniform_in(spec.kappa_range.0, spec.kappa_range.1);
    let u0 = bump_field(&mesh, spec.bumps, &mut rng);

    let lap = GraphLaplacian::build(&mesh, None)?;
    let dt = stable_dt(lap.min_edge_len, mesh.dim(), spec.kappa_range.1, spec.safety);
    let substeps = spec.substeps.max(1);
    // One burn-in frame keeps the stored trajectory on the same smooth
    // manifold the dynamics produce, instead of starting at the raw bumps.
    let total = (spec.frames + 1) * substeps;
    let traj = solve_diffusion_oracle(&mesh, &u0, kappa, dt, total)?;

    let n = mesh.n_nodes();
    let frames: Vec<Tensor<f64>> = traj
        .into_iter()
        .step_by(substeps)
        .skip(1)
        .map(|u| Tensor::from_vec(n, 1, u))
        .collect::<Result<_>>()?;
    let frame_dt = dt * substeps as f64;
    let conds = (0..frames.len())
        .map(|t| (vec![kappa], t as f64 * frame_dt))
        .collect();
    Ok(TransientSample {
        mesh,
        frames,
        conds,
    })
}

/// One Darcy-style pair: log-normal coefficient field in, solution out.
pub fn darcy_sample(spec: &DarcySpec, seed: u64) -> Result<SteadySample<f64>> {
    let base = Rng::new(seed);
    let mesh = gen_mesh(spec.n_target, spec.dim, base.fork(0).next_u64_pure())?;
    let mut rng = base.fork(1);
    let log_field = bump_field(&mesh, spec.bumps, &mut rng);
    let coeff: Vec<f64> = log_field
        .iter()
        .map(|&x| fm::exp(spec.log_amplitude * x))
        .collect();
    let f = vec![1.0; mesh.n_nodes()];
    let u = solve_darcy_like_oracle(&mesh, &coeff, &f)?;
    let n = mesh.n_nodes();
    Ok(SteadySample {
        input: FieldFrame {
            fields: Tensor::from_vec(n, 1, coeff)?,
            globals: vec![],
            time: 0.0,
        },
        target: Tensor::from_vec(n, 1, u)?,
        mesh,
    })
}

impl Rng {
    fn next_u64_pure(mut self) -> u64 {
        self.next_u64()
    }
}

/// Deterministic batch of samples: sample k uses `base_seed` forked with k.
pub fn build_diffusion_dataset(
    spec: &DiffusionSpec,
    n_samples: usize,
    base_seed: u64,
) -> Result<Vec<TransientSample<f64>>> {
    if n_samples < 1 {
        return Err(err!(Config, "need at least one sample"));
    }
    (0..n_samples)
        .map(|k| diffusion_sample(spec, Rng::new(base_seed).fork(k as u64).next_u64_pure()))
        .collect()
}

pub fn build_darcy_dataset(
    spec: &DarcySpec,
    n_samples: usize,
    base_seed: u64,
) -> Result<Vec<SteadySample<f64>>> {
    if n_samples < 1 {
        return Err(err!(Config, "need at least one sample"));
    }
    (0..n_samples)
        .map(|k| darcy_sample(spec, Rng::new(base_seed).fork(k as u64).next_u64_pure()))
        .collect()
}

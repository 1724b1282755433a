//! Complete electrode model on P1 triangles with piecewise-constant
//! conductivity.
//!
//! Unknowns are the nodal potentials followed by one potential per electrode.
//! The zero-sum gauge on electrode potentials is imposed by adding `ρ p pᵀ`
//! (with `p` the electrode indicator) to the singular system matrix. Because
//! every admissible right-hand side is orthogonal to the constant null vector,
//! the augmented system has the same solution as the constrained one and is
//! positive definite, so it goes straight to an envelope Cholesky.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh2D;
use crate::sparse::{reverse_cuthill_mckee, Csr, SkylineCholesky, SkylineMatrix};

pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-3;
pub const DEFAULT_CURRENT: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeConfig {
    edges: Vec<Vec<[usize; 2]>>,
    impedances: Vec<f64>,
}

impl ElectrodeConfig {
    /// Electrodes as declared in the mesh, all with impedance `z`.
    pub fn from_mesh(mesh: &Mesh2D, z: f64) -> Result<Self> {
        Self::with_impedances(mesh, vec![z; mesh.electrodes().len()])
    }

    pub fn with_impedances(mesh: &Mesh2D, impedances: Vec<f64>) -> Result<Self> {
        let l = mesh.electrodes().len();
        ensure!(l >= 2, InvalidArgument, "need at least 2 electrodes, mesh has {l}");
        ensure!(
            impedances.len() == l,
            Shape,
            "{} contact impedances for {l} electrodes",
            impedances.len()
        );
        ensure!(
            impedances.iter().all(|z| z.is_finite() && *z > 0.0),
            InvalidArgument,
            "contact impedances must be positive and finite"
        );
        let edges = mesh
            .electrodes()
            .iter()
            .map(|es| es.iter().map(|&b| mesh.boundary_edges()[b]).collect())
            .collect();
        Ok(ElectrodeConfig { edges, impedances })
    }

    pub fn n_electrodes(&self) -> usize {
        self.edges.len()
    }

    pub fn impedances(&self) -> &[f64] {
        &self.impedances
    }

    pub fn edges(&self, l: usize) -> &[[usize; 2]] {
        &self.edges[l]
    }

    /// Length |e_ℓ| of every electrode.
    pub fn lengths(&self, mesh: &Mesh2D) -> Vec<f64> {
        self.edges
            .iter()
            .map(|es| es.iter().map(|e| mesh.edge_length(e[0], e[1])).sum())
            .collect()
    }
}

/// Injected currents, one pattern per row (K×L, amperes).
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPatterns {
    t: DMatrix<f64>,
}

impl CurrentPatterns {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        ensure!(t.nrows() >= 1 && t.ncols() >= 2, Shape, "pattern matrix is {}×{}", t.nrows(), t.ncols());
        ensure!(t.iter().all(|v| v.is_finite()), InvalidArgument, "non-finite current");
        let tol = f64::EPSILON * t.ncols() as f64 * t.amax().max(f64::MIN_POSITIVE) * 4.0;
        for (k, row) in t.row_iter().enumerate() {
            let s = row.sum();
            ensure!(s.abs() <= tol, InvalidArgument, "pattern {k} injects net current {s:e}");
        }
        Ok(CurrentPatterns { t })
    }

    /// Pattern k drives +I into electrode k and −I out of electrode k+1.
    pub fn adjacent(n_electrodes: usize, amplitude: f64) -> Self {
        let l = n_electrodes;
        let mut t = DMatrix::zeros(l, l);
        for k in 0..l {
            t[(k, k)] = amplitude;
            t[(k, (k + 1) % l)] = -amplitude;
        }
        CurrentPatterns { t }
    }

    /// The L−1 cosine/sine patterns of peak `amplitude`.
    pub fn trigonometric(n_electrodes: usize, amplitude: f64) -> Self {
        let l = n_electrodes;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let theta = |j: usize| 2.0 * std::f64::consts::PI * j as f64 / l as f64;
        for k in 1..=l / 2 {
            rows.push((0..l).map(|j| amplitude * (k as f64 * theta(j)).cos()).collect());
        }
        for k in 1..l.div_ceil(2) {
            rows.push((0..l).map(|j| amplitude * (k as f64 * theta(j)).sin()).collect());
        }
        for r in &mut rows {
            let mean = r.iter().sum::<f64>() / l as f64;
            r.iter_mut().for_each(|v| *v -= mean);
        }
        let t = DMatrix::from_fn(rows.len(), l, |i, j| rows[i][j]);
        CurrentPatterns { t }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn n_patterns(&self) -> usize {
        self.t.nrows()
    }

    pub fn n_electrodes(&self) -> usize {
        self.t.ncols()
    }
}

/// Admissible conductivity interval `[lower, upper]` (S/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lower: 1e-3,
            upper: 10.0,
        }
    }
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        ensure!(
            lower > 0.0 && lower <= upper && upper.is_finite(),
            InvalidArgument,
            "invalid conductivity bounds [{lower}, {upper}]"
        );
        Ok(Bounds { lower, upper })
    }

    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// Per-element conductivity inside its bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity {
    values: Vec<f64>,
    bounds: Bounds,
}

impl Conductivity {
    pub fn new(values: Vec<f64>, bounds: Bounds) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !bounds.contains(**v)) {
            return Err(Error::InvalidArgument(format!(
                "conductivity {v} at element {i} outside [{}, {}]",
                bounds.lower, bounds.upper
            )));
        }
        Ok(Conductivity { values, bounds })
    }

    pub fn uniform(n: usize, value: f64, bounds: Bounds) -> Result<Self> {
        Self::new(vec![value; n], bounds)
    }

    /// Clamps every value into the bounds.
    pub fn projected(values: &[f64], bounds: Bounds) -> Self {
        Conductivity {
            values: values.iter().map(|&v| bounds.project(v)).collect(),
            bounds,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Electrode voltages, one pattern per row (K×L).
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageFrame {
    u: DMatrix<f64>,
    /// Nodal potentials, one column per pattern.
    potentials: Option<DMatrix<f64>>,
}

impl VoltageFrame {
    pub fn new(u: DMatrix<f64>) -> Self {
        VoltageFrame { u, potentials: None }
    }

    /// Builds a K×L frame from a pattern-major vector.
    pub fn from_vector(n_patterns: usize, n_electrodes: usize, v: &[f64]) -> Result<Self> {
        ensure!(
            v.len() == n_patterns * n_electrodes,
            Shape,
            "{} voltages for {n_patterns}×{n_electrodes}",
            v.len()
        );
        Ok(VoltageFrame::new(DMatrix::from_row_slice(n_patterns, n_electrodes, v)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn potentials(&self) -> Option<&DMatrix<f64>> {
        self.potentials.as_ref()
    }

    /// Pattern-major flattening, matching the Jacobian row order.
    pub fn to_vector(&self) -> Vec<f64> {
        self.u.transpose().as_slice().to_vec()
    }

    pub fn max_row_sum(&self) -> f64 {
        self.u.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }
}

/// Assembled CEM system without the gauge term.
#[derive(Debug, Clone)]
pub struct CemSystem {
    /// σ-weighted P1 stiffness on the nodes (N×N).
    pub stiffness: Csr<f64>,
    /// Contact-impedance terms over all N+L unknowns.
    pub coupling: Csr<f64>,
    /// `stiffness` (padded) plus `coupling`.
    pub matrix: Csr<f64>,
}

/// Precomputed geometry for repeated solves on one mesh.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    mesh: Mesh2D,
    electrodes: ElectrodeConfig,
    patterns: CurrentPatterns,
    areas: Vec<f64>,
    /// Gradients of the three hat functions on each element.
    grads: Vec<[[f64; 2]; 3]>,
    /// Contact-impedance terms with z = 1 scaled per electrode at assembly.
    coupling: Vec<(usize, usize, f64)>,
    template: SkylineMatrix,
    gauge_weight: f64,
}

impl ForwardModel {
    pub fn new(mesh: &Mesh2D, electrodes: ElectrodeConfig, patterns: CurrentPatterns) -> Result<Self> {
        let n = mesh.n_nodes();
        let l = electrodes.n_electrodes();
        ensure!(
            l == mesh.electrodes().len(),
            Shape,
            "electrode config has {l} electrodes, mesh has {}",
            mesh.electrodes().len()
        );
        ensure!(
            patterns.n_electrodes() == l,
            Shape,
            "patterns drive {} electrodes, config has {l}",
            patterns.n_electrodes()
        );
        let mut areas = Vec::with_capacity(mesh.n_elements());
        let mut grads = Vec::with_capacity(mesh.n_elements());
        for (e, tri) in mesh.elements().iter().enumerate() {
            let a = mesh.signed_area(e);
            let p = tri.map(|v| mesh.nodes()[v]);
            let mut g = [[0.0; 2]; 3];
            for i in 0..3 {
                let (j, k) = ((i + 1) % 3, (i + 2) % 3);
                g[i] = [(p[j][1] - p[k][1]) / (2.0 * a), (p[k][0] - p[j][0]) / (2.0 * a)];
            }
            areas.push(a);
            grads.push(g);
        }

        let mut coupling = Vec::new();
        for ell in 0..l {
            let z = electrodes.impedances()[ell];
            let u = n + ell;
            let mut length = 0.0;
            for e in electrodes.edges(ell) {
                let h = mesh.edge_length(e[0], e[1]);
                length += h;
                for (a, b, v) in [
                    (e[0], e[0], h / 3.0),
                    (e[1], e[1], h / 3.0),
                    (e[0], e[1], h / 6.0),
                    (e[1], e[0], h / 6.0),
                ] {
                    coupling.push((a, b, v / z));
                }
                for v in [e[0], e[1]] {
                    coupling.push((v, u, -h / (2.0 * z)));
                    coupling.push((u, v, -h / (2.0 * z)));
                }
            }
            coupling.push((u, u, length / z));
        }
        let gauge_weight = (0..l)
            .map(|ell| electrodes.lengths(mesh)[ell] / electrodes.impedances()[ell])
            .sum::<f64>()
            / l as f64;

        let mut adjacency = vec![Vec::new(); n];
        for tri in mesh.elements() {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        adjacency[tri[i]].push(tri[j]);
                    }
                }
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
            a.dedup();
        }
        let mut order = reverse_cuthill_mckee(&adjacency);
        order.extend(n..n + l);
        let node_pairs = mesh
            .elements()
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[0], t[2])]);
        let coupling_pairs = coupling.iter().map(|&(a, b, _)| (a, b));
        let gauge_pairs = (0..l).flat_map(|a| (0..l).map(move |b| (n + a, n + b)));
        let template = SkylineMatrix::with_pattern(
            order,
            node_pairs.chain(coupling_pairs).chain(gauge_pairs).collect::<Vec<_>>(),
        );

        Ok(ForwardModel {
            mesh: mesh.clone(),
            electrodes,
            patterns,
            areas,
            grads,
            coupling,
            template,
            gauge_weight,
        })
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn electrodes(&self) -> &ElectrodeConfig {
        &self.electrodes
    }

    pub fn patterns(&self) -> &CurrentPatterns {
        &self.patterns
    }

    pub fn n_measurements(&self) -> usize {
        self.patterns.n_patterns() * self.electrodes.n_electrodes()
    }

    fn check_sigma(&self, sigma: &Conductivity) -> Result<()> {
        ensure!(
            sigma.len() == self.mesh.n_elements(),
            Shape,
            "{} conductivity values for {} elements",
            sigma.len(),
            self.mesh.n_elements()
        );
        Ok(())
    }

    fn element_stiffness(&self, e: usize, s: f64) -> [[f64; 3]; 3] {
        let g = &self.grads[e];
        let w = s * self.areas[e];
        let mut k = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] = w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            }
        }
        k
    }

    pub fn assemble(&self, sigma: &Conductivity) -> Result<CemSystem> {
        self.check_sigma(sigma)?;
        let n = self.mesh.n_nodes();
        let l = self.electrodes.n_electrodes();
        let mut trips = Vec::with_capacity(9 * self.mesh.n_elements());
        for (e, tri) in self.mesh.elements().iter().enumerate() {
            let k = self.element_stiffness(e, sigma.values()[e]);
            for i in 0..3 {
                for j in 0..3 {
                    trips.push((tri[i], tri[j], k[i][j]));
                }
            }
        }
        let stiffness = Csr::from_triplets(n, n, &trips);
        let coupling = Csr::from_triplets(n + l, n + l, &self.coupling);
        trips.extend_from_slice(&self.coupling);
        let matrix = Csr::from_triplets(n + l, n + l, &trips);
        Ok(CemSystem {
            stiffness,
            coupling,
            matrix,
        })
    }

    fn factor(&self, sigma: &Conductivity) -> Result<SkylineCholesky> {
        self.check_sigma(sigma)?;
        let n = self.mesh.n_nodes();
        let l = self.electrodes.n_electrodes();
        let mut m = self.template.clone();
        for (e, tri) in self.mesh.elements().iter().enumerate() {
            let k = self.element_stiffness(e, sigma.values()[e]);
            for i in 0..3 {
                m.add(tri[i], tri[i], k[i][i]);
                for j in 0..i {
                    m.add(tri[i], tri[j], k[i][j]);
                }
            }
        }
        for &(a, b, v) in &self.coupling {
            if a >= b {
                m.add(a, b, v);
            }
        }
        let rho = self.gauge_weight / l as f64;
        for a in 0..l {
            for b in 0..=a {
                m.add(n + a, n + b, rho);
            }
        }
        m.factor()
    }

    fn rhs(&self, currents: impl Iterator<Item = f64>) -> Vec<f64> {
        let n = self.mesh.n_nodes();
        let mut b = vec![0.0; n + self.electrodes.n_electrodes()];
        for (ell, c) in currents.enumerate() {
            b[n + ell] = c;
        }
        b
    }

    /// Factors once and solves every pattern.
    pub fn solve(&self, sigma: &Conductivity) -> Result<ForwardSolution> {
        let chol = self.factor(sigma)?;
        let n = self.mesh.n_nodes();
        let l = self.electrodes.n_electrodes();
        let t = self.patterns.matrix();
        let fields: Vec<Vec<f64>> = (0..t.nrows())
            .into_par_iter()
            .map(|k| chol.solve(&self.rhs(t.row(k).iter().copied())))
            .collect();
        for (k, f) in fields.iter().enumerate() {
            ensure!(
                f.iter().all(|v| v.is_finite()),
                Numerical,
                "non-finite potential in pattern {k}"
            );
        }
        let u = DMatrix::from_fn(t.nrows(), l, |k, ell| fields[k][n + ell]);
        let potentials = DMatrix::from_fn(n, t.nrows(), |i, k| fields[k][i]);
        Ok(ForwardSolution {
            frame: VoltageFrame {
                u,
                potentials: Some(potentials),
            },
            fields,
            chol,
        })
    }

    fn element_gradient(&self, e: usize, field: &[f64]) -> [f64; 2] {
        let tri = &self.mesh.elements()[e];
        let g = &self.grads[e];
        let mut out = [0.0; 2];
        for i in 0..3 {
            out[0] += g[i][0] * field[tri[i]];
            out[1] += g[i][1] * field[tri[i]];
        }
        out
    }

    /// Sensitivity of every electrode voltage to every element conductivity,
    /// rows ordered pattern-major (row = k·L + ℓ).
    pub fn jacobian_from(&self, solution: &ForwardSolution) -> DMatrix<f64> {
        let n = self.mesh.n_nodes();
        let l = self.electrodes.n_electrodes();
        let k_count = self.patterns.n_patterns();
        let ne = self.mesh.n_elements();
        let adjoint: Vec<Vec<f64>> = (0..l)
            .into_par_iter()
            .map(|ell| {
                let mut b = vec![0.0; n + l];
                b[n + ell] = 1.0;
                solution.chol.solve(&b)
            })
            .collect();
        let grad_x: Vec<Vec<[f64; 2]>> = solution
            .fields
            .iter()
            .map(|f| (0..ne).map(|e| self.element_gradient(e, f)).collect())
            .collect();
        let grad_y: Vec<Vec<[f64; 2]>> = adjoint
            .iter()
            .map(|f| (0..ne).map(|e| self.element_gradient(e, f)).collect())
            .collect();
        DMatrix::from_fn(k_count * l, ne, |row, e| {
            let (k, ell) = (row / l, row % l);
            let (gx, gy) = (grad_x[k][e], grad_y[ell][e]);
            -self.areas[e] * (gx[0] * gy[0] + gx[1] * gy[1])
        })
    }

    pub fn jacobian(&self, sigma: &Conductivity) -> Result<(VoltageFrame, DMatrix<f64>)> {
        let sol = self.solve(sigma)?;
        let j = self.jacobian_from(&sol);
        Ok((sol.frame, j))
    }

    /// dU/ds for the uniform scaling direction, i.e. the row sums of the
    /// Jacobian, without forming it.
    pub fn scaling_derivative(&self, solution: &ForwardSolution, sigma: &Conductivity) -> Result<VoltageFrame> {
        self.check_sigma(sigma)?;
        let n = self.mesh.n_nodes();
        let l = self.electrodes.n_electrodes();
        let dirs: Vec<Vec<f64>> = solution
            .fields
            .par_iter()
            .map(|x| {
                let mut b = vec![0.0; n + l];
                for (e, tri) in self.mesh.elements().iter().enumerate() {
                    let k = self.element_stiffness(e, 1.0);
                    for i in 0..3 {
                        let mut s = 0.0;
                        for j in 0..3 {
                            s += k[i][j] * x[tri[j]];
                        }
                        b[tri[i]] -= s;
                    }
                }
                solution.chol.solve(&b)
            })
            .collect();
        Ok(VoltageFrame::new(DMatrix::from_fn(dirs.len(), l, |k, ell| dirs[k][n + ell])))
    }

    /// Noisy measurements `V = U + ε`, `ε ~ N(0, (noise_rel·|U|)²)`, with each
    /// pattern's mean re-zeroed.
    pub fn simulate(&self, sigma: &Conductivity, noise_rel: f64, seed: u64) -> Result<VoltageFrame> {
        ensure!(noise_rel >= 0.0, InvalidArgument, "noise level {noise_rel} is negative");
        let clean = self.solve(sigma)?.frame;
        if noise_rel == 0.0 {
            return Ok(VoltageFrame::new(clean.u));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = add_relative_noise(&clean.u, noise_rel, &mut rng);
        zero_row_means(&mut v);
        Ok(VoltageFrame::new(v))
    }
}

pub struct ForwardSolution {
    pub frame: VoltageFrame,
    /// Full solution vectors (nodes then electrodes), one per pattern.
    fields: Vec<Vec<f64>>,
    chol: SkylineCholesky,
}

/// `U + noise_rel·|U|·ξ` entrywise in row-major order.
pub fn add_relative_noise(u: &DMatrix<f64>, noise_rel: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut v = u.clone();
    for k in 0..u.nrows() {
        for ell in 0..u.ncols() {
            let xi: f64 = StandardNormal.sample(rng);
            v[(k, ell)] += noise_rel * u[(k, ell)].abs() * xi;
        }
    }
    v
}

pub fn zero_row_means(v: &mut DMatrix<f64>) {
    let l = v.ncols() as f64;
    for mut row in v.row_iter_mut() {
        let mean = row.sum() / l;
        row.add_scalar_mut(-mean);
    }
}

pub fn assemble_system(mesh: &Mesh2D, sigma: &Conductivity, electrodes: &ElectrodeConfig) -> Result<CemSystem> {
    let patterns = CurrentPatterns::adjacent(electrodes.n_electrodes(), DEFAULT_CURRENT);
    ForwardModel::new(mesh, electrodes.clone(), patterns)?.assemble(sigma)
}

pub fn solve_forward(
    mesh: &Mesh2D,
    sigma: &Conductivity,
    electrodes: &ElectrodeConfig,
    patterns: &CurrentPatterns,
) -> Result<VoltageFrame> {
    Ok(ForwardModel::new(mesh, electrodes.clone(), patterns.clone())?.solve(sigma)?.frame)
}

pub fn jacobian(
    mesh: &Mesh2D,
    sigma: &Conductivity,
    electrodes: &ElectrodeConfig,
    patterns: &CurrentPatterns,
) -> Result<DMatrix<f64>> {
    Ok(ForwardModel::new(mesh, electrodes.clone(), patterns.clone())?.jacobian(sigma)?.1)
}

pub fn simulate_measurements(
    mesh: &Mesh2D,
    sigma: &Conductivity,
    electrodes: &ElectrodeConfig,
    patterns: &CurrentPatterns,
    noise_rel: f64,
    seed: u64,
) -> Result<VoltageFrame> {
    ForwardModel::new(mesh, electrodes.clone(), patterns.clone())?.simulate(sigma, noise_rel, seed)
}

//! Graphs derived from meshes and the sparse operators built on them.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::mesh::{sorted_pair, Mesh2D};
use crate::sparse::Csr;

/// Node coordinates (2D or 3D), an undirected edge set and optional features.
///
/// Edges are stored once as `(i, j)` with `i < j`, sorted. Self-loops are not
/// stored; the aggregator adds them analytically.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    dim: usize,
    coords: Vec<[f64; 3]>,
    edges: Vec<(usize, usize)>,
    features: Option<DMatrix<f64>>,
}

impl Graph {
    /// `coords` use the first `dim` components; unused components must be 0.
    pub fn new(dim: usize, coords: Vec<[f64; 3]>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        ensure!(dim == 2 || dim == 3, InvalidArgument, "graph dimension must be 2 or 3, got {dim}");
        let n = coords.len();
        let mut normalized = Vec::new();
        for (a, b) in edges {
            ensure!(a < n && b < n, InvalidArgument, "edge ({a}, {b}) references a node outside 0..{n}");
            ensure!(a != b, InvalidArgument, "self-loop on node {a}");
            normalized.push(sorted_pair(a, b));
        }
        normalized.sort_unstable();
        normalized.dedup();
        Ok(Graph {
            dim,
            coords,
            edges: normalized,
            features: None,
        })
    }

    pub fn from_2d(coords: &[[f64; 2]], edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Graph::new(2, coords.iter().map(|p| [p[0], p[1], 0.0]).collect(), edges)
    }

    pub fn with_features(mut self, features: DMatrix<f64>) -> Result<Self> {
        ensure!(
            features.nrows() == self.n_nodes(),
            Shape,
            "feature matrix has {} rows for {} nodes",
            features.nrows(),
            self.n_nodes()
        );
        self.features = Some(features);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> Option<&DMatrix<f64>> {
        self.features.as_ref()
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        if n == 0 {
            return true;
        }
        let adj = self.adjacency_lists();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }

    /// Hex SHA-256 over dimension, coordinates and edges; features are ignored.
    pub fn structure_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.coords.len() as u64).to_le_bytes());
        for p in &self.coords {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.edges.len() as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One graph node per element at its centroid, linked when two elements
/// share a mesh edge.
pub fn element_graph(mesh: &Mesh2D) -> Graph {
    let coords = mesh.centroids();
    let edges: Vec<_> = mesh
        .interior_edges()
        .into_iter()
        .map(|e| (e.elements[0], e.elements[1]))
        .collect();
    Graph::from_2d(&coords, edges).expect("validated mesh yields a valid element graph")
}

/// One graph node per mesh node, linked along mesh edges.
pub fn node_graph(mesh: &Mesh2D) -> Graph {
    let edges: Vec<_> = mesh.edge_elements().into_keys().collect();
    Graph::from_2d(mesh.nodes(), edges).expect("validated mesh yields a valid node graph")
}

/// `S = D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃_ii = 1 + deg(i)`.
pub fn normalized_aggregator(graph: &Graph) -> Csr<f64> {
    let inv_sqrt: Vec<f64> = graph
        .degrees()
        .into_iter()
        .map(|d| 1.0 / (1.0 + d as f64).sqrt())
        .collect();
    let mut triplets = Vec::with_capacity(graph.n_nodes() + 2 * graph.edges().len());
    for (i, &s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for &(a, b) in graph.edges() {
        let v = inv_sqrt[a] * inv_sqrt[b];
        triplets.push((a, b, v));
        triplets.push((b, a, v));
    }
    Csr::from_triplets(graph.n_nodes(), graph.n_nodes(), &triplets)
}

/// One row of the discrete gradient: `length` at `element_a`, `-length` at
/// `element_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffRow {
    pub length: f64,
    pub element_a: usize,
    pub element_b: usize,
}

/// Sparse difference matrix `L` over the interior edges of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMatrix {
    n_elements: usize,
    rows: Vec<DiffRow>,
}

impl DiffMatrix {
    pub fn from_rows(n_elements: usize, rows: Vec<DiffRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.element_a < n_elements && r.element_b < n_elements && r.element_a != r.element_b,
                InvalidArgument,
                "difference row {i} references elements ({}, {})",
                r.element_a,
                r.element_b
            );
            ensure!(r.length > 0.0, InvalidArgument, "difference row {i} has length {}", r.length);
        }
        Ok(DiffMatrix { n_elements, rows })
    }

    pub fn rows(&self) -> &[DiffRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    /// `L σ`
    pub fn apply(&self, sigma: &[f64]) -> Vec<f64> {
        assert_eq!(sigma.len(), self.n_elements);
        self.rows
            .iter()
            .map(|r| r.length * (sigma[r.element_a] - sigma[r.element_b]))
            .collect()
    }

    /// `Lᵀ y`
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows.len());
        let mut out = vec![0.0; self.n_elements];
        for (r, &v) in self.rows.iter().zip(y) {
            out[r.element_a] += r.length * v;
            out[r.element_b] -= r.length * v;
        }
        out
    }

    /// Adds `scale · Lᵀ diag(weights) L` into a dense square matrix.
    pub fn add_weighted_gram(&self, weights: &[f64], scale: f64, target: &mut DMatrix<f64>) {
        assert_eq!(weights.len(), self.rows.len());
        for (r, &w) in self.rows.iter().zip(weights) {
            let v = scale * w * r.length * r.length;
            let (a, b) = (r.element_a, r.element_b);
            target[(a, a)] += v;
            target[(b, b)] += v;
            target[(a, b)] -= v;
            target[(b, a)] -= v;
        }
    }

    pub fn to_csr(&self) -> Csr<f64> {
        let mut t = Vec::with_capacity(2 * self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            t.push((i, r.element_a, r.length));
            t.push((i, r.element_b, -r.length));
        }
        Csr::from_triplets(self.rows.len(), self.n_elements, &t)
    }
}

/// One row per interior edge, weighted by the edge length.
pub fn difference_matrix(mesh: &Mesh2D) -> DiffMatrix {
    let rows = mesh
        .interior_edges()
        .into_iter()
        .map(|e| DiffRow {
            length: e.length,
            element_a: e.elements[0],
            element_b: e.elements[1],
        })
        .collect();
    DiffMatrix {
        n_elements: mesh.n_elements(),
        rows,
    }
}

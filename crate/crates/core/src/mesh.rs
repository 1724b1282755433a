//! Triangular finite-element meshes with electrode boundary assignments.
//!
//! A [`Mesh2D`] is validated on construction: indices in range, positively
//! oriented non-degenerate triangles, boundary edges that belong to exactly one
//! triangle, disjoint electrodes and a connected element graph. Everything
//! downstream relies on those invariants.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Elements with signed area below this (m²) are rejected.
pub const MIN_ELEMENT_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mesh2D {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    /// Per electrode, indices into `boundary_edges`.
    electrodes: Vec<Vec<usize>>,
    boundary_edges: Vec<[usize; 2]>,
}

/// An edge shared by two elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorEdge {
    pub nodes: [usize; 2],
    pub elements: [usize; 2],
    pub length: f64,
}

impl Mesh2D {
    pub fn new(
        nodes: Vec<[f64; 2]>,
        elements: Vec<[usize; 3]>,
        electrodes: Vec<Vec<usize>>,
        boundary_edges: Vec<[usize; 2]>,
    ) -> Result<Self> {
        let mesh = Mesh2D {
            nodes,
            elements,
            electrodes,
            boundary_edges,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        ensure!(!self.elements.is_empty(), InvalidMesh, "mesh has no elements");
        let n = self.nodes.len();
        for (i, p) in self.nodes.iter().enumerate() {
            ensure!(
                p.iter().all(|v| v.is_finite()),
                InvalidMesh,
                "node {i} has non-finite coordinates"
            );
        }
        for (e, tri) in self.elements.iter().enumerate() {
            ensure!(
                tri.iter().all(|&v| v < n),
                InvalidMesh,
                "element {e} references a node outside 0..{n}"
            );
            ensure!(
                tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2],
                InvalidMesh,
                "element {e} repeats a node"
            );
            let area = self.signed_area(e);
            ensure!(
                area > MIN_ELEMENT_AREA,
                InvalidMesh,
                "element {e} has signed area {area:e} (degenerate or clockwise)"
            );
        }

        let edge_map = self.edge_elements();
        for (b, edge) in self.boundary_edges.iter().enumerate() {
            ensure!(
                edge.iter().all(|&v| v < n) && edge[0] != edge[1],
                InvalidMesh,
                "boundary edge {b} is malformed"
            );
            let count = edge_map.get(&sorted_pair(edge[0], edge[1])).map_or(0, Vec::len);
            ensure!(
                count == 1,
                InvalidMesh,
                "boundary edge {b} ({}, {}) is shared by {count} elements, expected 1",
                edge[0],
                edge[1]
            );
        }

        let mut owner = vec![None; self.boundary_edges.len()];
        for (l, edges) in self.electrodes.iter().enumerate() {
            ensure!(!edges.is_empty(), InvalidMesh, "electrode {l} has no edges");
            for &b in edges {
                ensure!(
                    b < self.boundary_edges.len(),
                    InvalidMesh,
                    "electrode {l} references boundary edge {b} out of range"
                );
                if let Some(other) = owner[b] {
                    return Err(Error::InvalidMesh(format!(
                        "boundary edge {b} belongs to electrodes {other} and {l}"
                    )));
                }
                owner[b] = Some(l);
            }
        }

        // connectivity through shared edges
        let adjacency = self.element_adjacency_from(&edge_map);
        let mut seen = vec![false; self.elements.len()];
        let mut stack = vec![0];
        seen[0] = true;
        let mut reached = 1;
        while let Some(e) = stack.pop() {
            for &f in &adjacency[e] {
                if !seen[f] {
                    seen[f] = true;
                    reached += 1;
                    stack.push(f);
                }
            }
        }
        ensure!(
            reached == self.elements.len(),
            InvalidMesh,
            "mesh is disconnected: {reached} of {} elements reachable from element 0",
            self.elements.len()
        );
        Ok(())
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn electrodes(&self) -> &[Vec<usize>] {
        &self.electrodes
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn signed_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]))
    }

    pub fn areas(&self) -> Vec<f64> {
        (0..self.n_elements()).map(|e| self.signed_area(e)).collect()
    }

    /// Arithmetic mean of the vertex coordinates of every element.
    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.elements
            .iter()
            .map(|tri| {
                let mut c = [0.0; 2];
                for &v in tri {
                    c[0] += self.nodes[v][0];
                    c[1] += self.nodes[v][1];
                }
                [c[0] / 3.0, c[1] / 3.0]
            })
            .collect()
    }

    /// Every unique mesh edge mapped to the elements that contain it, in
    /// ascending key order.
    pub fn edge_elements(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (e, tri) in self.elements.iter().enumerate() {
            for k in 0..3 {
                let key = sorted_pair(tri[k], tri[(k + 1) % 3]);
                map.entry(key).or_default().push(e);
            }
        }
        map
    }

    fn element_adjacency_from(
        &self,
        edge_map: &BTreeMap<(usize, usize), Vec<usize>>,
    ) -> Vec<Vec<usize>> {
        let mut adjacency = vec![Vec::new(); self.elements.len()];
        for owners in edge_map.values() {
            if let [a, b] = owners[..] {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        adjacency
    }

    /// Edges separating exactly two elements, ordered by node pair.
    pub fn interior_edges(&self) -> Vec<InteriorEdge> {
        self.edge_elements()
            .into_iter()
            .filter_map(|((a, b), owners)| match owners[..] {
                [e, f] => Some(InteriorEdge {
                    nodes: [a, b],
                    elements: [e.min(f), e.max(f)],
                    length: self.edge_length(a, b),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.nodes[a], self.nodes[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    /// Boundary vertices as closed polygons (one per boundary component),
    /// following the orientation of the triangles.
    pub fn boundary_loops(&self) -> Vec<Vec<[f64; 2]>> {
        // orient every boundary edge like its owning triangle
        let mut next = BTreeMap::new();
        for (key, owners) in self.edge_elements() {
            if owners.len() != 1 {
                continue;
            }
            let tri = self.elements[owners[0]];
            let (mut a, mut b) = key;
            for k in 0..3 {
                if tri[k] == key.1 && tri[(k + 1) % 3] == key.0 {
                    (a, b) = (key.1, key.0);
                }
            }
            next.insert(a, b);
        }
        let mut loops = Vec::new();
        while let Some((&start, _)) = next.iter().next() {
            let mut poly = Vec::new();
            let mut v = start;
            while let Some(w) = next.remove(&v) {
                poly.push(self.nodes[v]);
                v = w;
            }
            loops.push(poly);
        }
        loops
    }

    /// Stable content hash (hex SHA-256 of the canonical JSON encoding).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("mesh serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let mesh: Mesh2D = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                context,
                format!("line {} column {}: {e}", e.line(), e.column()),
            )
        })?;
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("mesh serializes")
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh2D> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Mesh2D::from_json_str(&text, &path.display().to_string())
}

pub fn save_mesh(mesh: &Mesh2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mesh.to_json_string() + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Point-in-polygon test by ray casting.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Euclidean distance from `p` to the closed polygon boundary.
pub fn distance_to_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - qx).hypot(p[1] - qy)
}

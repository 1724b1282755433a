//! k-means++ spatial clustering of graph nodes and the pooling hierarchy built
//! from it.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::graph::Graph;

pub const DEFAULT_REPS: usize = 10;
pub const LLOYD_MAX_ITERS: usize = 100;
pub const LLOYD_TOLERANCE: f64 = 1e-9;

/// Labels in `0..n_clusters`, one per point, with every cluster non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    centroids: Vec<[f64; 3]>,
    within_cluster_spacing: f64,
}

impl ClusterAssignment {
    /// Recomputes centroids and spacing from labels; rejects empty clusters.
    pub fn from_labels(coords: &[[f64; 3]], labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        ensure!(
            labels.len() == coords.len(),
            Shape,
            "{} labels for {} points",
            labels.len(),
            coords.len()
        );
        let mut sums = vec![[0.0; 3]; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (p, &l) in coords.iter().zip(&labels) {
            ensure!(l < n_clusters, InvalidArgument, "label {l} outside 0..{n_clusters}");
            counts[l] += 1;
            for d in 0..3 {
                sums[l][d] += p[d];
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("cluster {empty} is empty")));
        }
        let centroids: Vec<[f64; 3]> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
            .collect();
        let within_cluster_spacing = coords
            .iter()
            .zip(&labels)
            .map(|(p, &l)| dist2(p, &centroids[l]))
            .sum();
        Ok(ClusterAssignment {
            labels,
            centroids,
            within_cluster_spacing,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Sum of squared distances from each point to its centroid.
    pub fn within_cluster_spacing(&self) -> f64 {
        self.within_cluster_spacing
    }

    /// Member indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// Best of `reps` independent k-means++ runs by within-cluster spacing.
///
/// Repetition seeds are drawn in order from one generator seeded with `seed`,
/// so a larger `reps` evaluates a superset of the runs of a smaller one.
pub fn kmeanspp(coords: &[[f64; 3]], n_clusters: usize, reps: usize, seed: u64) -> Result<ClusterAssignment> {
    ensure!(n_clusters >= 1, InvalidArgument, "n_clusters must be at least 1");
    ensure!(
        n_clusters <= coords.len(),
        InvalidArgument,
        "n_clusters {n_clusters} exceeds the number of points {}",
        coords.len()
    );
    ensure!(reps >= 1, InvalidArgument, "reps must be at least 1");
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..reps).map(|_| master.next_u64()).collect();
    let runs: Vec<ClusterAssignment> = seeds
        .par_iter()
        .map(|&s| single_run(coords, n_clusters, s))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            a.within_cluster_spacing
                .total_cmp(&b.within_cluster_spacing)
                .then(i.cmp(j))
        })
        .map(|(_, r)| r)
        .unwrap();
    Ok(best)
}

fn single_run(coords: &[[f64; 3]], k: usize, seed: u64) -> ClusterAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(coords, k, &mut rng);
    let n = coords.len();
    let mut labels = vec![0usize; n];
    for _ in 0..LLOYD_MAX_ITERS {
        assign(coords, &centroids, &mut labels);
        fill_empty_clusters(coords, &mut centroids, &mut labels);
        let next = means(coords, &labels, k);
        let moved = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if moved <= LLOYD_TOLERANCE {
            break;
        }
    }
    assign(coords, &centroids, &mut labels);
    fill_empty_clusters(coords, &mut centroids, &mut labels);
    ClusterAssignment::from_labels(coords, labels, k).expect("no empty clusters after reseeding")
}

/// D² seeding: the first centre uniformly, then proportional to the squared
/// distance to the nearest chosen centre.
fn seed_plus_plus(coords: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = coords.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![coords[first]];
    let mut nearest: Vec<f64> = coords.iter().map(|p| dist2(p, &coords[first])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap()
        } else {
            // every point coincides with a centre: take an unused index
            let unused: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen[pick] = true;
        centroids.push(coords[pick]);
        for (w, p) in nearest.iter_mut().zip(coords) {
            *w = w.min(dist2(p, &coords[pick]));
        }
    }
    centroids
}

fn assign(coords: &[[f64; 3]], centroids: &[[f64; 3]], labels: &mut [usize]) {
    for (p, l) in coords.iter().zip(labels.iter_mut()) {
        let mut best = (f64::INFINITY, 0);
        for (c, q) in centroids.iter().enumerate() {
            let d = dist2(p, q);
            if d < best.0 {
                best = (d, c);
            }
        }
        *l = best.1;
    }
}

/// Moves, for each empty cluster, the point farthest from its own centroid
/// (among clusters with more than one member) into the empty cluster.
fn fill_empty_clusters(coords: &[[f64; 3]], centroids: &mut [[f64; 3]], labels: &mut [usize]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in coords.iter().enumerate() {
            let l = labels[i];
            if counts[l] < 2 {
                continue;
            }
            let d = dist2(p, &centroids[l]);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("more points than clusters");
        counts[labels[i]] -= 1;
        labels[i] = c;
        counts[c] = 1;
        centroids[c] = coords[i];
    }
}

fn means(coords: &[[f64; 3]], labels: &[usize], k: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in coords.iter().zip(labels) {
        counts[l] += 1;
        for d in 0..3 {
            sums[l][d] += p[d];
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let c = c.max(1) as f64;
            [s[0] / c, s[1] / c, s[2] / c]
        })
        .collect()
}

/// Coarse graph with one node per cluster at its centroid; clusters are linked
/// when any fine edge crosses between them.
pub fn coarsen(graph: &Graph, assignment: &ClusterAssignment) -> Result<Graph> {
    ensure!(
        assignment.n_points() == graph.n_nodes(),
        Shape,
        "assignment covers {} nodes, graph has {}",
        assignment.n_points(),
        graph.n_nodes()
    );
    let labels = assignment.labels();
    let edges = graph
        .edges()
        .iter()
        .map(|&(a, b)| (labels[a], labels[b]))
        .filter(|(p, q)| p != q);
    Graph::new(graph.dim(), assignment.centroids().to_vec(), edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingLevel {
    pub assignment: ClusterAssignment,
    pub coarse: Graph,
}

/// Cluster assignments `c_1..c_Np` with the coarse graph after each pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingPlan {
    source: Graph,
    source_hash: String,
    levels: Vec<PoolingLevel>,
}

impl PoolingPlan {
    pub fn source(&self) -> &Graph {
        &self.source
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn levels(&self) -> &[PoolingLevel] {
        &self.levels
    }

    pub fn n_pool(&self) -> usize {
        self.levels.len()
    }

    /// The graph at resolution `j` (0 = source).
    pub fn graph(&self, j: usize) -> &Graph {
        if j == 0 {
            &self.source
        } else {
            &self.levels[j - 1].coarse
        }
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        (0..=self.n_pool()).map(|j| self.graph(j).n_nodes()).collect()
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            source_graph_hash: self.source_hash.clone(),
            source_nodes: self.source.n_nodes(),
            levels: self
                .levels
                .iter()
                .map(|l| PlanLevelFile {
                    labels: l.assignment.labels().to_vec(),
                    centroids: l.assignment.centroids().to_vec(),
                    coarse_edges: l.coarse.edges().iter().map(|&(a, b)| [a, b]).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("plan serializes")
    }

    /// Restores a plan for `source`, verifying the stored graph hash and that
    /// the stored hierarchy is consistent with the source graph.
    pub fn from_json(text: &str, source: &Graph) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text).map_err(|e| Error::parse("pooling plan", e))?;
        let hash = source.structure_hash();
        ensure!(
            file.source_graph_hash == hash,
            InvalidArgument,
            "pooling plan was built for graph {}, not {}",
            file.source_graph_hash,
            hash
        );
        let mut levels = Vec::with_capacity(file.levels.len());
        let mut current = source.clone();
        for (j, lf) in file.levels.into_iter().enumerate() {
            let n_clusters = lf.centroids.len();
            let assignment = ClusterAssignment::from_labels(current.coords(), lf.labels, n_clusters)?;
            let coarse = coarsen(&current, &assignment)?;
            let stored: Vec<(usize, usize)> = lf.coarse_edges.iter().map(|e| (e[0], e[1])).collect();
            ensure!(
                coarse.edges() == &stored[..],
                InvalidArgument,
                "pooling plan level {j}: stored coarse edges disagree with the labels"
            );
            levels.push(PoolingLevel {
                assignment,
                coarse: coarse.clone(),
            });
            current = coarse;
        }
        Ok(PoolingPlan {
            source: source.clone(),
            source_hash: hash,
            levels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, source: &Graph) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PoolingPlan::from_json(&text, source)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    source_graph_hash: String,
    source_nodes: usize,
    levels: Vec<PlanLevelFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanLevelFile {
    labels: Vec<usize>,
    centroids: Vec<[f64; 3]>,
    coarse_edges: Vec<[usize; 2]>,
}

/// `⌈N/4⌉` clusters per pooling step.
pub fn default_cluster_counts(n_nodes: usize, n_pool: usize) -> Vec<usize> {
    let mut counts = Vec::with_capacity(n_pool);
    let mut n = n_nodes;
    for _ in 0..n_pool {
        n = n.div_ceil(4);
        counts.push(n);
    }
    counts
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Chains `kmeanspp` and `coarsen` once per entry of `cluster_counts`.
pub fn build_pooling_plan(graph: &Graph, cluster_counts: &[usize], reps: usize, seed: u64) -> Result<PoolingPlan> {
    let mut current = graph.clone();
    let mut levels = Vec::with_capacity(cluster_counts.len());
    for (j, &count) in cluster_counts.iter().enumerate() {
        if j > 0 {
            ensure!(
                count < cluster_counts[j - 1],
                InvalidArgument,
                "cluster counts must be strictly decreasing: {cluster_counts:?}"
            );
        }
        let assignment = kmeanspp(current.coords(), count, reps, level_seed(seed, j))?;
        let coarse = coarsen(&current, &assignment)?;
        levels.push(PoolingLevel {
            assignment,
            coarse: coarse.clone(),
        });
        current = coarse;
    }
    Ok(PoolingPlan {
        source: graph.clone(),
        source_hash: graph.structure_hash(),
        levels,
    })
}

/// Loads a plan from `cache_dir` when present, otherwise builds and stores it.
pub fn cached_pooling_plan(
    graph: &Graph,
    cluster_counts: &[usize],
    reps: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<PoolingPlan> {
    let Some(dir) = cache_dir else {
        return build_pooling_plan(graph, cluster_counts, reps, seed);
    };
    let path = plan_cache_path(dir, graph, cluster_counts, reps, seed);
    if path.exists() {
        match PoolingPlan::load(&path, graph) {
            Ok(plan) => return Ok(plan),
            Err(e) => log::warn!("ignoring stale pooling plan cache {}: {e}", path.display()),
        }
    }
    let plan = build_pooling_plan(graph, cluster_counts, reps, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    plan.save(&path)?;
    Ok(plan)
}

pub fn plan_cache_path(dir: &Path, graph: &Graph, cluster_counts: &[usize], reps: usize, seed: u64) -> PathBuf {
    let mut h = Sha256::new();
    h.update(graph.structure_hash().as_bytes());
    for c in cluster_counts {
        h.update((*c as u64).to_le_bytes());
    }
    h.update((reps as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let key = hex::encode(h.finalize());
    dir.join(format!("{}.plan.json", &key[..24]))
}

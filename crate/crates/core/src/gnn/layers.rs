//! Graph convolution, cluster max pooling and clone unpooling, each with its
//! reverse-mode counterpart.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::cluster::ClusterAssignment;
use crate::error::{ensure, Result};
use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Weights `W` (f_in×f_out) and bias `b` (f_out) of one graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GcLayer<T: Real> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Real> GcLayer<T> {
    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        GcLayer {
            w: DMatrix::zeros(f_in, f_out),
            b: DVector::zeros(f_out),
        }
    }

    pub fn f_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn f_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Values kept from the forward pass of [`gconv_forward`].
#[derive(Debug, Clone)]
pub struct GconvCache<T: Real> {
    /// `S·H`
    aggregated: DMatrix<T>,
    /// `S·H·W + 1·bᵀ` before the activation.
    pre: DMatrix<T>,
}

impl<T: Real> GconvCache<T> {
    /// Smallest |pre-activation|, the distance to the ReLU kink.
    pub fn relu_margin(&self) -> f64 {
        self.pre.iter().map(|v| v.abs().to_f64()).fold(f64::INFINITY, f64::min)
    }
}

fn check_gconv<T: Real>(h: &DMatrix<T>, s: &Csr<T>, layer: &GcLayer<T>) -> Result<()> {
    ensure!(
        s.nrows() == h.nrows() && s.ncols() == h.nrows(),
        Shape,
        "aggregator is {}x{}, features have {} rows",
        s.nrows(),
        s.ncols(),
        h.nrows()
    );
    ensure!(
        h.ncols() == layer.f_in(),
        Shape,
        "features have {} columns, layer expects {}",
        h.ncols(),
        layer.f_in()
    );
    ensure!(layer.b.len() == layer.f_out(), Shape, "bias length {} vs {}", layer.b.len(), layer.f_out());
    Ok(())
}

pub fn gconv<T: Real>(h: &DMatrix<T>, s: &Csr<T>, layer: &GcLayer<T>, act: Activation) -> Result<DMatrix<T>> {
    gconv_forward(h, s, layer, act).map(|(out, _)| out)
}

/// `act(S·H·W + 1·bᵀ)`
pub fn gconv_forward<T: Real>(
    h: &DMatrix<T>,
    s: &Csr<T>,
    layer: &GcLayer<T>,
    act: Activation,
) -> Result<(DMatrix<T>, GconvCache<T>)> {
    check_gconv(h, s, layer)?;
    let aggregated = s.mul_dense(h);
    let mut pre = &aggregated * &layer.w;
    for (j, mut col) in pre.column_iter_mut().enumerate() {
        let bj = layer.b[j];
        col.apply(|v| *v += bj);
    }
    let out = match act {
        Activation::Relu => pre.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Identity => pre.clone(),
    };
    Ok((out, GconvCache { aggregated, pre }))
}

/// Gradients of one convolution: w.r.t. its input, `W` and `b`.
pub fn gconv_backward<T: Real>(
    cache: &GconvCache<T>,
    s: &Csr<T>,
    layer: &GcLayer<T>,
    act: Activation,
    grad_out: &DMatrix<T>,
) -> (DMatrix<T>, GcLayer<T>) {
    let mut g = grad_out.clone();
    if act == Activation::Relu {
        g.zip_apply(&cache.pre, |gv, p| {
            if p <= T::zero() {
                *gv = T::zero();
            }
        });
    }
    let dw = cache.aggregated.tr_mul(&g);
    let db = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
    // S is symmetric, so Sᵀ·G = S·G
    let dh = s.mul_dense(&(&g * layer.w.transpose()));
    (dh, GcLayer { w: dw, b: db })
}

/// Winning node per (cluster, feature), column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Argmax {
    n_fine: usize,
    n_clusters: usize,
    index: Vec<usize>,
    /// Smallest gap between a winner and another member of its cluster.
    margin: f64,
}

impl Argmax {
    pub fn get(&self, cluster: usize, feature: usize) -> usize {
        self.index[feature * self.n_clusters + cluster]
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    /// Distance to the nearest tie; gradients are exact only while
    /// perturbations stay below it.
    pub fn margin(&self) -> f64 {
        self.margin
    }
}

fn check_labels(labels: &[usize], n_clusters: usize) -> Result<()> {
    ensure!(
        labels.iter().all(|&l| l < n_clusters),
        InvalidArgument,
        "cluster label out of range 0..{n_clusters}"
    );
    Ok(())
}

pub fn kmc_max_pool<T: Real>(h: &DMatrix<T>, assignment: &ClusterAssignment) -> Result<(DMatrix<T>, Argmax)> {
    max_pool(h, assignment.labels(), assignment.n_clusters())
}

/// Per-cluster, per-feature maximum; ties go to the lowest node index.
pub fn max_pool<T: Real>(h: &DMatrix<T>, labels: &[usize], n_clusters: usize) -> Result<(DMatrix<T>, Argmax)> {
    ensure!(labels.len() == h.nrows(), Shape, "{} labels for {} nodes", labels.len(), h.nrows());
    check_labels(labels, n_clusters)?;
    let f = h.ncols();
    let mut pooled = DMatrix::zeros(n_clusters, f);
    let mut index = vec![usize::MAX; n_clusters * f];
    for j in 0..f {
        let col = h.column(j);
        let base = j * n_clusters;
        for (i, &p) in labels.iter().enumerate() {
            let slot = &mut index[base + p];
            if *slot == usize::MAX || col[i] > pooled[(p, j)] {
                *slot = i;
                pooled[(p, j)] = col[i];
            }
        }
    }
    ensure!(
        index.iter().all(|&i| i != usize::MAX),
        InvalidArgument,
        "empty cluster in pooling"
    );
    let mut margin = f64::INFINITY;
    for j in 0..f {
        for (i, &p) in labels.iter().enumerate() {
            let w = index[j * n_clusters + p];
            // ties among exact zeros come from inactive ReLUs and are flat
            if w != i && !(pooled[(p, j)] == T::zero() && h[(i, j)] == T::zero()) {
                margin = margin.min((pooled[(p, j)] - h[(i, j)]).to_f64());
            }
        }
    }
    Ok((
        pooled,
        Argmax {
            n_fine: h.nrows(),
            n_clusters,
            index,
            margin,
        },
    ))
}

/// Routes each pooled gradient to its winning node.
pub fn max_pool_backward<T: Real>(grad: &DMatrix<T>, argmax: &Argmax) -> DMatrix<T> {
    let mut out = DMatrix::zeros(argmax.n_fine, grad.ncols());
    for j in 0..grad.ncols() {
        for p in 0..argmax.n_clusters {
            out[(argmax.get(p, j), j)] += grad[(p, j)];
        }
    }
    out
}

pub fn clone_cluster_unpool<T: Real>(hc: &DMatrix<T>, assignment: &ClusterAssignment) -> Result<DMatrix<T>> {
    ensure!(
        hc.nrows() == assignment.n_clusters(),
        Shape,
        "{} coarse rows for {} clusters",
        hc.nrows(),
        assignment.n_clusters()
    );
    unpool(hc, assignment.labels())
}

/// Output row `i` is `hc[labels[i]]`.
pub fn unpool<T: Real>(hc: &DMatrix<T>, labels: &[usize]) -> Result<DMatrix<T>> {
    check_labels(labels, hc.nrows())?;
    Ok(DMatrix::from_fn(labels.len(), hc.ncols(), |i, j| hc[(labels[i], j)]))
}

/// Sums the fine gradient within each cluster.
pub fn unpool_backward<T: Real>(grad: &DMatrix<T>, labels: &[usize], n_clusters: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(n_clusters, grad.ncols());
    for j in 0..grad.ncols() {
        for (i, &p) in labels.iter().enumerate() {
            out[(p, j)] += grad[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_aggregator, Graph};

    fn path3() -> Csr<f64> {
        let g = Graph::from_2d(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [(0, 1), (1, 2)]).unwrap();
        normalized_aggregator(&g)
    }

    #[test]
    fn path_graph_hand_values() {
        let s = path3();
        let h = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let layer = GcLayer {
            w: DMatrix::from_element(1, 1, 1.0),
            b: DVector::zeros(1),
        };
        let out = gconv(&h, &s, &layer, Activation::Identity).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn edgeless_identity_layer_is_identity() {
        let g = Graph::from_2d(&[[0.0, 0.0], [1.0, 0.0]], []).unwrap();
        let s = normalized_aggregator(&g);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let layer = GcLayer {
            w: DMatrix::identity(2, 2),
            b: DVector::zeros(2),
        };
        assert_eq!(gconv(&h, &s, &layer, Activation::Identity).unwrap(), h);
        let relu = gconv(&h, &s, &layer, Activation::Relu).unwrap();
        assert!(relu.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_errors() {
        let s = path3();
        let layer = GcLayer::<f64>::zeros(2, 1);
        assert!(gconv(&DMatrix::zeros(3, 1), &s, &layer, Activation::Relu).is_err());
        assert!(gconv(&DMatrix::zeros(2, 2), &s, &layer, Activation::Relu).is_err());
        assert!(unpool(&DMatrix::<f64>::zeros(2, 1), &[0, 2]).is_err());
    }

    #[test]
    fn pool_ties_go_to_lowest_index() {
        let h = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 2.0, 0.5]);
        let (p, a) = max_pool(&h, &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(p.as_slice(), &[2.0, 0.5]);
        assert_eq!((a.get(0, 0), a.get(1, 0)), (1, 3));
        let g = max_pool_backward(&DMatrix::from_column_slice(2, 1, &[1.0, 3.0]), &a);
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn single_cluster_pool_and_unpool() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 4.0, -1.0, 2.0, 0.0]);
        let (p, _) = max_pool(&h, &[0, 0, 0], 1).unwrap();
        assert_eq!(p.as_slice(), &[4.0, 5.0]);
        let u = unpool(&p, &[0, 0, 0]).unwrap();
        assert!(u.row_iter().all(|r| r[0] == 4.0 && r[1] == 5.0));
        let back = unpool_backward(&DMatrix::from_element(3, 2, 1.0), &[0, 0, 0], 1);
        assert_eq!(back.as_slice(), &[3.0, 3.0]);
    }
}

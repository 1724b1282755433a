//! Reference checks of the graph operators and network gradients against
//! dense, brute-force and finite-difference oracles on random small graphs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::build_pooling_plan;
use crate::error::{Error, Result};
use crate::gnn::layers::{
    gconv_backward, gconv_forward, max_pool, max_pool_backward, unpool, unpool_backward, Activation, GcLayer,
};
use crate::gnn::loss::loss_registry;
use crate::gnn::{unet_backward, unet_forward, unet_forward_cached, Topology, UNetArch, UNetParams};
use crate::graph::{normalized_aggregator, Graph};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Inputs closer than this to a ReLU kink or pooling tie are redrawn.
const KINK_CLEARANCE: f64 = 1e-4;
const MAX_REDRAWS: usize = 200;

/// Connected graph on `n` random points in the unit square: a random
/// spanning tree plus up to `extra` random edges.
pub fn random_graph(n: usize, extra: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), 0.0]).collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    Graph::new(2, coords, edges).expect("valid random graph")
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` from dense matrices.
pub fn dense_aggregator(graph: &Graph) -> DMatrix<f64> {
    let n = graph.n_nodes();
    let mut a = DMatrix::<f64>::identity(n, n);
    for &(i, j) in graph.edges() {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        a.row_iter().map(|r| 1.0 / r.sum().sqrt()),
    ));
    &d * a * &d
}

/// Largest entry of `|S_sparse − S_dense|`.
pub fn aggregator_deviation(graph: &Graph) -> f64 {
    (normalized_aggregator(graph).to_dense() - dense_aggregator(graph)).amax()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// `|a − f| / max(|a|, |f|, floor)`, with the floor tied to the gradient
/// scale so entries that are zero up to round-off do not dominate.
fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradientCheck {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let floor = 1e-6 * scale;
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max);
    GradientCheck {
        name: name.into(),
        checked: analytic.len(),
        max_rel_error,
    }
}

fn central<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Graph convolution gradients w.r.t. input, weights and bias for both
/// activations on one random graph.
pub fn check_gconv(seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=30);
    let s = normalized_aggregator(&random_graph(n, n / 2, seed));
    let (fi, fo) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let mut out = Vec::new();
    for act in [Activation::Identity, Activation::Relu] {
        let (h, layer, r, cache) = (0..MAX_REDRAWS)
            .find_map(|_| {
                let h = random_matrix(&mut rng, n, fi);
                let layer = GcLayer {
                    w: random_matrix(&mut rng, fi, fo),
                    b: DVector::from_fn(fo, |_, _| rng.random_range(-0.5..0.5)),
                };
                let r = random_matrix(&mut rng, n, fo);
                let (_, cache) = gconv_forward(&h, &s, &layer, act).ok()?;
                let clear = act == Activation::Identity || cache.relu_margin() > KINK_CLEARANCE;
                clear.then_some((h, layer, r, cache))
            })
            .ok_or_else(|| Error::Numerical("could not draw a kink-free gconv instance".into()))?;
        let f = |h: &DMatrix<f64>, l: &GcLayer<f64>| dot(&gconv_forward(h, &s, l, act).unwrap().0, &r);
        let (dh, dl) = gconv_backward(&cache, &s, &layer, act, &r);
        let tag = format!("{act:?}").to_lowercase();

        let mut fd = Vec::new();
        for k in 0..h.len() {
            fd.push(central(h[k], |v| {
                let mut hp = h.clone();
                hp[k] = v;
                f(&hp, &layer)
            }));
        }
        out.push(compare(format!("gconv/{tag}/input"), dh.as_slice(), &fd));
        let mut fd = Vec::new();
        for k in 0..layer.w.len() {
            fd.push(central(layer.w[k], |v| {
                let mut lp = layer.clone();
                lp.w[k] = v;
                f(&h, &lp)
            }));
        }
        out.push(compare(format!("gconv/{tag}/weights"), dl.w.as_slice(), &fd));
        let mut fd = Vec::new();
        for k in 0..layer.b.len() {
            fd.push(central(layer.b[k], |v| {
                let mut lp = layer.clone();
                lp.b[k] = v;
                f(&h, &lp)
            }));
        }
        out.push(compare(format!("gconv/{tag}/bias"), dl.b.as_slice(), &fd));
    }
    Ok(out)
}

/// Max-pool and clone-unpool input gradients on one random clustering.
pub fn check_pooling_gradients(seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=30);
    let k = rng.random_range(1..=n);
    let f = rng.random_range(1..=4);
    let labels = random_labels(&mut rng, n, k);

    let (h, am) = (0..MAX_REDRAWS)
        .find_map(|_| {
            let h = random_matrix(&mut rng, n, f);
            let (_, am) = max_pool(&h, &labels, k).ok()?;
            (am.margin() > KINK_CLEARANCE).then_some((h, am))
        })
        .ok_or_else(|| Error::Numerical("could not draw a tie-free pooling instance".into()))?;
    let r = random_matrix(&mut rng, k, f);
    let analytic = max_pool_backward(&r, &am);
    let mut fd = Vec::new();
    for e in 0..h.len() {
        fd.push(central(h[e], |v| {
            let mut hp = h.clone();
            hp[e] = v;
            dot(&max_pool(&hp, &labels, k).unwrap().0, &r)
        }));
    }
    let pool = compare("max_pool/input", analytic.as_slice(), &fd);

    let hc = random_matrix(&mut rng, k, f);
    let r = random_matrix(&mut rng, n, f);
    let analytic = unpool_backward(&r, &labels, k);
    let mut fd = Vec::new();
    for e in 0..hc.len() {
        fd.push(central(hc[e], |v| {
            let mut hp = hc.clone();
            hp[e] = v;
            dot(&unpool(&hp, &labels).unwrap(), &r)
        }));
    }
    Ok(vec![pool, compare("unpool/input", analytic.as_slice(), &fd)])
}

/// Loss gradients w.r.t. the prediction, plain and weighted.
pub fn check_losses(seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=30);
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // keep every residual away from the L1 kink
    let pred: Vec<f64> = target
        .iter()
        .map(|t| t + rng.random_range(0.01..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let registry = loss_registry();
    let mut out = Vec::new();
    for name in registry.names() {
        let loss = registry.get(name)?;
        for (tag, w) in [("plain", None), ("weighted", Some(&weights[..]))] {
            let (_, g) = loss.value_and_grad(&pred, &target, w)?;
            let fd: Vec<f64> = (0..n)
                .map(|i| {
                    central(pred[i], |v| {
                        let mut p = pred.clone();
                        p[i] = v;
                        loss.value(&p, &target, w).unwrap()
                    })
                })
                .collect();
            out.push(compare(format!("loss/{name}/{tag}"), &g, &fd));
        }
    }
    Ok(out)
}

/// Every parameter gradient of a small random U-net.
pub fn check_unet(seed: u64) -> Result<GradientCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=30);
    let graph = random_graph(n, n / 2, seed);
    let n_pool = rng.random_range(1..=2);
    let counts: Vec<usize> = (1..=n_pool).map(|j| (n >> (2 * j)).max(1)).collect();
    let plan = build_pooling_plan(&graph, &counts, 2, seed)?;
    let topo = Topology::<f64>::from_plan(&plan);
    let arch = UNetArch {
        widths: (0..n_pool).map(|_| rng.random_range(2..=4)).collect(),
        bottom: rng.random_range(2..=5),
    };
    let (params, x, r, cache) = (0..MAX_REDRAWS)
        .find_map(|_| {
            let mut p = UNetParams::<f64>::init(&arch, rng.random()).ok()?;
            p.for_each_mut(|_, v| *v += rng.random_range(-0.1..0.1));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = unet_forward_cached(&x, &topo, &p).ok()?;
            (cache.kink_margin() > KINK_CLEARANCE).then_some((p, x, r, cache))
        })
        .ok_or_else(|| Error::Numerical("could not draw a kink-free network instance".into()))?;
    let analytic = unet_backward(&cache, &topo, &params, &r)?.to_flat();
    let f = |p: &UNetParams<f64>| -> f64 {
        unet_forward(&x, &topo, p)
            .unwrap()
            .iter()
            .zip(&r)
            .map(|(a, b)| a * b)
            .sum()
    };
    let base = params.to_flat();
    let fd: Vec<f64> = (0..base.len())
        .map(|k| {
            central(base[k], |v| {
                let mut p = params.clone();
                p.for_each_mut(|i, x| {
                    if i == k {
                        *x = v;
                    }
                });
                f(&p)
            })
        })
        .collect();
    Ok(compare("unet/parameters", &analytic, &fd))
}

/// Pool against a brute-force per-cluster max, piecewise-constant unpool and
/// `pool∘unpool∘pool = pool`, all exact. Returns a description of the first
/// violation.
pub fn check_pooling_algebra(seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=40);
    let k = rng.random_range(1..=n);
    let f = rng.random_range(1..=5);
    let labels = random_labels(&mut rng, n, k);
    let h = random_matrix(&mut rng, n, f);
    let (pooled, _) = max_pool(&h, &labels, k).map_err(|e| e.to_string())?;
    for p in 0..k {
        for j in 0..f {
            let brute = (0..n)
                .filter(|&i| labels[i] == p)
                .map(|i| h[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            if pooled[(p, j)] != brute {
                return Err(format!("cluster {p} feature {j}: {} vs brute force {brute}", pooled[(p, j)]));
            }
        }
    }
    let up = unpool(&pooled, &labels).map_err(|e| e.to_string())?;
    for i in 0..n {
        if up.row(i) != pooled.row(labels[i]) {
            return Err(format!("unpooled row {i} differs from its cluster value"));
        }
    }
    let (again, _) = max_pool(&up, &labels, k).map_err(|e| e.to_string())?;
    if again != pooled {
        return Err("pool(unpool(pool(H))) differs from pool(H)".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_aggregator() {
        let g = Graph::from_2d(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [(0, 1), (1, 2)]).unwrap();
        let s = dense_aggregator(&g);
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s[(0, 1)] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((s[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[(0, 2)], 0.0);
        assert!(aggregator_deviation(&g) < 1e-15);
    }

    #[test]
    fn checks_run_on_a_few_seeds() {
        for seed in 0..3 {
            for c in check_gconv(seed)
                .unwrap()
                .into_iter()
                .chain(check_pooling_gradients(seed).unwrap())
                .chain(check_losses(seed).unwrap())
                .chain([check_unet(seed).unwrap()])
            {
                assert!(c.max_rel_error < 1e-4, "{c:?}");
            }
            check_pooling_algebra(seed).unwrap();
        }
    }
}

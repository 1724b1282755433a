//! Graph U-net assembled from the layers: two convolutions per level on the
//! way down, max pooling between levels, clone unpooling and skip
//! concatenation on the way up, and a linear single-feature head.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    gconv_backward, gconv_forward, max_pool, max_pool_backward, unpool, unpool_backward, Activation, Argmax,
    GcLayer, GconvCache,
};
use super::Real;
use crate::cluster::PoolingPlan;
use crate::error::{ensure, Result};
use crate::graph::normalized_aggregator;
use crate::sparse::Csr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    /// Feature width of each down/up level; its length is the number of
    /// pooling layers.
    pub widths: Vec<usize>,
    pub bottom: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        UNetArch {
            widths: vec![32, 64, 128],
            bottom: 256,
        }
    }
}

impl UNetArch {
    pub fn n_pool(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.widths.is_empty(), InvalidArgument, "network needs at least one level");
        ensure!(
            self.widths.iter().all(|&w| w > 0) && self.bottom > 0,
            InvalidArgument,
            "layer widths must be positive"
        );
        Ok(())
    }

    /// (f_in, f_out) of every convolution in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let np = self.n_pool();
        let mut shapes = Vec::new();
        for j in 0..np {
            let f_in = if j == 0 { 1 } else { self.widths[j - 1] };
            shapes.push((f_in, self.widths[j]));
            shapes.push((self.widths[j], self.widths[j]));
        }
        let last = self.widths[np - 1];
        shapes.push((last, self.bottom));
        shapes.push((self.bottom, self.bottom));
        for j in 0..np {
            let below = if j + 1 == np { self.bottom } else { self.widths[j + 1] };
            shapes.push((below + self.widths[j], self.widths[j]));
            shapes.push((self.widths[j], self.widths[j]));
        }
        shapes.push((self.widths[0], 1));
        shapes
    }

    pub fn layer_names(&self) -> Vec<String> {
        let np = self.n_pool();
        let mut names = Vec::new();
        for j in 0..np {
            names.extend((0..2).map(|k| format!("down.{j}.{k}")));
        }
        names.extend((0..2).map(|k| format!("bottom.{k}")));
        for j in 0..np {
            names.extend((0..2).map(|k| format!("up.{j}.{k}")));
        }
        names.push("head".into());
        names
    }
}

/// All trainable weights, laid out as `[down.0.0, down.0.1, …, bottom.0,
/// bottom.1, up.0.0, up.0.1, …, head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T: Real> {
    arch: UNetArch,
    layers: Vec<GcLayer<T>>,
}

impl<T: Real> UNetParams<T> {
    pub fn zeros(arch: &UNetArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| GcLayer::zeros(i, o))
            .collect();
        Ok(UNetParams {
            arch: arch.clone(),
            layers,
        })
    }

    /// Weights uniform in ±√(6/(f_in+f_out)), biases zero.
    pub fn init(arch: &UNetArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            let limit = (6.0 / (layer.f_in() + layer.f_out()) as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = T::of(rng.random_range(-limit..limit));
            }
        }
        Ok(p)
    }

    pub fn from_layers(arch: &UNetArch, layers: Vec<GcLayer<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        ensure!(
            layers.len() == shapes.len(),
            Shape,
            "{} layers for an architecture with {}",
            layers.len(),
            shapes.len()
        );
        for (k, (l, &(i, o))) in layers.iter().zip(&shapes).enumerate() {
            ensure!(
                l.f_in() == i && l.f_out() == o && l.b.len() == o,
                Shape,
                "layer {k} is {}x{}, expected {i}x{o}",
                l.f_in(),
                l.f_out()
            );
        }
        Ok(UNetParams {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn layers(&self) -> &[GcLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GcLayer<T>] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(GcLayer::n_params).sum()
    }

    /// All entries in layer order, each layer as `W` (column-major) then `b`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut T)) {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                f(k, v);
                k += 1;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.w *= factor;
            l.b *= factor;
        }
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        UNetParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| GcLayer {
                    w: l.w.map(|v| U::of(v.to_f64())),
                    b: l.b.map(|v| U::of(v.to_f64())),
                })
                .collect(),
        }
    }
}

/// Aggregators and cluster labels of every resolution of a pooling plan.
#[derive(Debug, Clone)]
pub struct Topology<T: Real> {
    source_hash: String,
    aggregators: Vec<Csr<T>>,
    labels: Vec<Vec<usize>>,
    sizes: Vec<usize>,
}

impl<T: Real> Topology<T> {
    pub fn from_plan(plan: &PoolingPlan) -> Self {
        let aggregators = (0..=plan.n_pool())
            .map(|j| normalized_aggregator(plan.graph(j)).cast())
            .collect();
        Topology {
            source_hash: plan.source_hash().to_string(),
            aggregators,
            labels: plan.levels().iter().map(|l| l.assignment.labels().to_vec()).collect(),
            sizes: plan.level_sizes(),
        }
    }

    pub fn n_pool(&self) -> usize {
        self.labels.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.sizes[0]
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    fn check(&self, arch: &UNetArch, n: usize) -> Result<()> {
        ensure!(
            arch.n_pool() == self.n_pool(),
            Shape,
            "network has {} pooling levels, plan has {}",
            arch.n_pool(),
            self.n_pool()
        );
        ensure!(
            n == self.n_nodes(),
            Shape,
            "input has {n} values, plan graph has {} nodes",
            self.n_nodes()
        );
        Ok(())
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    convs: Vec<GconvCache<T>>,
    argmax: Vec<Argmax>,
    /// Width of the unpooled part of each up level's concatenated input.
    up_split: Vec<usize>,
}

impl<T: Real> ForwardCache<T> {
    /// Distance of the forward pass to the nearest ReLU kink or pooling tie.
    pub fn kink_margin(&self) -> f64 {
        let n = self.convs.len();
        let relu = self.convs[..n - 1].iter().map(GconvCache::relu_margin);
        let pool = self.argmax.iter().map(Argmax::margin);
        relu.chain(pool).fold(f64::INFINITY, f64::min)
    }
}

fn act_for(k: usize, n_layers: usize) -> Activation {
    if k + 1 == n_layers {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

pub fn unet_forward<T: Real>(x: &[T], topo: &Topology<T>, params: &UNetParams<T>) -> Result<Vec<T>> {
    unet_forward_cached(x, topo, params).map(|(y, _)| y)
}

pub fn unet_forward_cached<T: Real>(
    x: &[T],
    topo: &Topology<T>,
    params: &UNetParams<T>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let arch = &params.arch;
    topo.check(arch, x.len())?;
    let np = arch.n_pool();
    let n_layers = params.layers.len();
    let up_base = 2 * np + 2;
    let mut convs: Vec<Option<GconvCache<T>>> = vec![None; n_layers];
    let mut conv = |k: usize, level: usize, h: &DMatrix<T>| -> Result<DMatrix<T>> {
        let (out, cache) = gconv_forward(h, &topo.aggregators[level], &params.layers[k], act_for(k, n_layers))?;
        convs[k] = Some(cache);
        Ok(out)
    };

    let mut h = DMatrix::from_column_slice(x.len(), 1, x);
    let mut skips = Vec::with_capacity(np);
    let mut argmax = Vec::with_capacity(np);
    for j in 0..np {
        h = conv(2 * j, j, &h)?;
        h = conv(2 * j + 1, j, &h)?;
        let (pooled, am) = max_pool(&h, &topo.labels[j], topo.sizes[j + 1])?;
        skips.push(h);
        argmax.push(am);
        h = pooled;
    }
    h = conv(2 * np, np, &h)?;
    h = conv(2 * np + 1, np, &h)?;
    let mut up_split = vec![0; np];
    for j in (0..np).rev() {
        let up = unpool(&h, &topo.labels[j])?;
        let skip = &skips[j];
        up_split[j] = up.ncols();
        let mut cat = DMatrix::zeros(up.nrows(), up.ncols() + skip.ncols());
        cat.columns_mut(0, up.ncols()).copy_from(&up);
        cat.columns_mut(up.ncols(), skip.ncols()).copy_from(skip);
        h = conv(up_base + 2 * j, j, &cat)?;
        h = conv(up_base + 2 * j + 1, j, &h)?;
    }
    h = conv(n_layers - 1, 0, &h)?;
    let convs = convs.into_iter().map(|c| c.expect("every layer ran")).collect();
    Ok((
        h.as_slice().to_vec(),
        ForwardCache {
            convs,
            argmax,
            up_split,
        },
    ))
}

/// Parameter gradients of `grad_outᵀ·Λ(x)`.
pub fn unet_backward<T: Real>(
    cache: &ForwardCache<T>,
    topo: &Topology<T>,
    params: &UNetParams<T>,
    grad_out: &[T],
) -> Result<UNetParams<T>> {
    let arch = &params.arch;
    topo.check(arch, grad_out.len())?;
    ensure!(
        cache.convs.len() == params.layers.len(),
        InvalidArgument,
        "forward cache does not belong to these parameters"
    );
    let np = arch.n_pool();
    let n_layers = params.layers.len();
    let mut grads = UNetParams::zeros(arch)?;
    let back = |k: usize, level: usize, g: &DMatrix<T>, grads: &mut UNetParams<T>| -> DMatrix<T> {
        let (dh, dl) = gconv_backward(
            &cache.convs[k],
            &topo.aggregators[level],
            &params.layers[k],
            act_for(k, n_layers),
            g,
        );
        grads.layers[k] = dl;
        dh
    };

    let up_base = 2 * np + 2;
    let mut g = DMatrix::from_column_slice(grad_out.len(), 1, grad_out);
    g = back(n_layers - 1, 0, &g, &mut grads);
    let mut skip_grads: Vec<DMatrix<T>> = Vec::with_capacity(np);
    for j in 0..np {
        g = back(up_base + 2 * j + 1, j, &g, &mut grads);
        g = back(up_base + 2 * j, j, &g, &mut grads);
        let split = cache.up_split[j];
        skip_grads.push(g.columns(split, g.ncols() - split).into_owned());
        let g_up = g.columns(0, split).into_owned();
        g = unpool_backward(&g_up, &topo.labels[j], topo.sizes[j + 1]);
    }
    g = back(2 * np + 1, np, &g, &mut grads);
    g = back(2 * np, np, &g, &mut grads);
    for j in (0..np).rev() {
        g = max_pool_backward(&g, &cache.argmax[j]);
        g += &skip_grads[j];
        g = back(2 * j + 1, j, &g, &mut grads);
        g = back(2 * j, j, &g, &mut grads);
    }
    Ok(grads)
}

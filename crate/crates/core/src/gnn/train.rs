//! Mini-batch training with early stopping, inference and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::GcLayer;
use super::loss::{loss_registry, Loss};
use super::unet::{unet_backward, unet_forward, unet_forward_cached, Topology, UNetArch, UNetParams};
use super::Real;
use crate::error::{ensure, Error, Result};

/// Affine input map `z = (x − offset)·scale`, inverted on the output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale.is_finite() && self.scale != 0.0 && self.offset.is_finite(),
            InvalidArgument,
            "normalization needs a finite non-zero scale and a finite offset"
        );
        Ok(())
    }

    pub fn forward<T: Real>(&self, x: &[f64]) -> Vec<T> {
        x.iter().map(|&v| T::of((v - self.offset) * self.scale)).collect()
    }

    pub fn inverse<T: Real>(&self, y: &[T]) -> Vec<f64> {
        y.iter().map(|&v| v.to_f64() / self.scale + self.offset).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub loss: String,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 32,
            patience_epochs: 50,
            max_epochs: 2000,
            loss: "mse".into(),
            seed: 0,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning_rate must be positive"
        );
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be at least 1");
        ensure!(self.patience_epochs >= 1, InvalidArgument, "patience_epochs must be at least 1");
        ensure!(self.max_epochs >= 1, InvalidArgument, "max_epochs must be at least 1");
        self.normalization.validate()?;
        loss_registry().get(&self.loss).map(|_| ())
    }
}

/// One graph the network runs on, with optional per-node loss weights.
pub struct GraphData<T: Real> {
    pub topology: Topology<T>,
    pub loss_weights: Option<Vec<f64>>,
}

impl<T: Real> GraphData<T> {
    pub fn new(topology: Topology<T>) -> Self {
        GraphData {
            topology,
            loss_weights: None,
        }
    }
}

/// Network input (a reconstruction iterate) and target (the truth) on graph
/// `graph` of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub graph: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: UNetParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Network output mapped back through the normalization.
pub fn predict<T: Real>(
    params: &UNetParams<T>,
    topo: &Topology<T>,
    norm: &Normalization,
    input: &[f64],
) -> Result<Vec<f64>> {
    let y = unet_forward(&norm.forward::<T>(input), topo, params)?;
    Ok(norm.inverse(&y))
}

fn sample_gradient<T: Real>(
    params: &UNetParams<T>,
    graph: &GraphData<T>,
    norm: &Normalization,
    loss: &dyn Loss,
    pair: &TrainingPair,
) -> Result<(f64, UNetParams<T>)> {
    let topo = &graph.topology;
    let (y, cache) = unet_forward_cached(&norm.forward::<T>(&pair.input), topo, params)?;
    let pred = norm.inverse(&y);
    let (value, g) = loss.value_and_grad(&pred, &pair.target, graph.loss_weights.as_deref())?;
    ensure!(value.is_finite(), Numerical, "non-finite training loss");
    let g: Vec<T> = g.iter().map(|&v| T::of(v / norm.scale)).collect();
    Ok((value, unet_backward(&cache, topo, params, &g)?))
}

fn graph_of<'a, T: Real>(graphs: &'a [GraphData<T>], pair: &TrainingPair) -> Result<&'a GraphData<T>> {
    graphs
        .get(pair.graph)
        .ok_or_else(|| Error::InvalidArgument(format!("sample refers to missing graph {}", pair.graph)))
}

/// Mean per-sample loss; summed in sample order so the result does not
/// depend on the thread count.
pub fn mean_loss<T: Real>(
    params: &UNetParams<T>,
    graphs: &[GraphData<T>],
    norm: &Normalization,
    loss: &dyn Loss,
    set: &[TrainingPair],
) -> Result<f64> {
    ensure!(!set.is_empty(), InvalidArgument, "empty evaluation set");
    let values = set
        .par_iter()
        .map(|pair| {
            let graph = graph_of(graphs, pair)?;
            let pred = predict(params, &graph.topology, norm, &pair.input)?;
            loss.value(&pred, &pair.target, graph.loss_weights.as_deref())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / set.len() as f64)
}

/// Trains from a seeded initialization and keeps the parameters of the best
/// validation epoch. Stops once `patience_epochs` epochs pass without a new
/// minimum.
pub fn train<T: Real>(
    train_set: &[TrainingPair],
    val_set: &[TrainingPair],
    graphs: &[GraphData<T>],
    arch: &UNetArch,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    ensure!(!train_set.is_empty(), InvalidArgument, "empty training set");
    ensure!(!val_set.is_empty(), InvalidArgument, "empty validation set");
    let loss = loss_registry().get(&config.loss)?;
    let norm = &config.normalization;
    let mut params = UNetParams::<T>::init(arch, config.seed)?;
    let mut adam = AdamState::new(params.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5851_F42D_4C95_7F2D));
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let pair = &train_set[i];
                    sample_gradient(&params, graph_of(graphs, pair)?, norm, loss.as_ref(), pair)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sum = UNetParams::zeros(arch)?;
            for (value, g) in &results {
                train_total += value;
                sum.add_assign(g);
            }
            sum.scale(T::of(1.0 / batch.len() as f64));
            adam.step(&mut params, &sum, config.learning_rate);
        }
        let train_loss = train_total / train_set.len() as f64;
        let val_loss = mean_loss(&params, graphs, norm, loss.as_ref(), val_set)?;
        ensure!(val_loss.is_finite(), Numerical, "validation loss diverged at epoch {epoch}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e}");
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        }
        if epoch - best.1 >= config.patience_epochs {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(out, "{},{:e},{:e}", r.epoch, r.train_loss, r.val_loss);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    pub loss: String,
    /// Reconstruction iterate the network was trained on.
    pub input_iterate: Option<usize>,
    /// Pooling plan settings, for rebuilding plans on other meshes.
    pub cluster_fraction: Option<f64>,
    pub cluster_reps: Option<usize>,
    pub cluster_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arch: UNetArch,
    pub precision: String,
    pub normalization: Normalization,
    pub meta: CheckpointMeta,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new<T: Real>(params: &UNetParams<T>, normalization: Normalization, meta: CheckpointMeta) -> Self {
        let arch = params.arch().clone();
        let mut arrays = Vec::new();
        for (name, l) in arch.layer_names().into_iter().zip(params.layers()) {
            let w = l.w.transpose();
            arrays.push(NamedArray {
                name: format!("{name}.w"),
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                values: w.iter().map(|v| v.to_f64()).collect(),
            });
            arrays.push(NamedArray {
                name: format!("{name}.b"),
                rows: 1,
                cols: l.b.len(),
                values: l.b.iter().map(|v| v.to_f64()).collect(),
            });
        }
        Checkpoint {
            arch,
            precision: T::NAME.into(),
            normalization,
            meta,
            params: arrays,
        }
    }

    pub fn to_params<T: Real>(&self) -> Result<UNetParams<T>> {
        let names = self.arch.layer_names();
        let shapes = self.arch.layer_shapes();
        ensure!(
            self.params.len() == 2 * names.len(),
            Shape,
            "checkpoint holds {} arrays, architecture needs {}",
            self.params.len(),
            2 * names.len()
        );
        let mut layers = Vec::with_capacity(names.len());
        for (k, (name, &(fi, fo))) in names.iter().zip(&shapes).enumerate() {
            let (w, b) = (&self.params[2 * k], &self.params[2 * k + 1]);
            ensure!(
                w.name == format!("{name}.w") && b.name == format!("{name}.b"),
                Shape,
                "checkpoint array '{}' where '{name}.w' was expected",
                w.name
            );
            ensure!(
                (w.rows, w.cols, w.values.len()) == (fi, fo, fi * fo) && b.values.len() == fo,
                Shape,
                "array '{name}' has the wrong size"
            );
            let mut layer = GcLayer::<T>::zeros(fi, fo);
            for r in 0..fi {
                for c in 0..fo {
                    layer.w[(r, c)] = T::of(w.values[r * fo + c]);
                }
            }
            for c in 0..fo {
                layer.b[c] = T::of(b.values[c]);
            }
            layers.push(layer);
        }
        UNetParams::from_layers(&self.arch, layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))?;
        c.normalization.validate()?;
        c.arch.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

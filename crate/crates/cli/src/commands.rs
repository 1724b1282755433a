use std::path::{Path, PathBuf};

use mesh_unet::cluster::{cached_pooling_plan, PoolingPlan};
use mesh_unet::datagen::{
    dataset_bounds, generate_dataset, measurement_model, roi_mask, split_dataset, Dataset,
};
use mesh_unet::gnn::train::{history_csv, predict, CheckpointMeta, EpochRecord, GraphData};
use mesh_unet::gnn::{train, Checkpoint, Real, Topology, TrainingPair};
use mesh_unet::graph::{difference_matrix, element_graph};
use mesh_unet::inverse::{reconstruct, InverseProblem, IterateTrace, ReconConfig};
use mesh_unet::mesh::load_mesh;
use mesh_unet::metrics::{evaluate, roi_mean, to_csv, Evaluation, MetricReport};
use mesh_unet::plot::{bar_chart, conductivity_map, line_plot};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InputSource, RunConfig, Subset};
use crate::{CliError, TOOL_VERSION};

pub const DATASET_FILE: &str = "dataset.eitds";
pub const TRACES_FILE: &str = "traces.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const VERSION_FILE: &str = "tool_version.txt";
pub const CACHE_ENV: &str = "MESHUNET_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Reconstruct,
    Train,
    Postprocess,
    Eval,
    Plot,
}

type Result<T> = std::result::Result<T, CliError>;

/// Output directory and config shared by all commands.
pub struct Run<'a> {
    pub config: &'a RunConfig,
    pub out: PathBuf,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(default))
    }

    fn dataset_path(&self) -> PathBuf {
        self.input(&self.config.inputs.dataset, DATASET_FILE)
    }

    fn load_dataset(&self) -> Result<Dataset> {
        Ok(Dataset::load(self.dataset_path())?)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
    }
}

/// Runs one command, writing the resolved config and tool version first.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let run = Run {
        config,
        out: out.to_path_buf(),
    };
    run.write(RESOLVED_CONFIG_FILE, config.to_toml())?;
    run.write(VERSION_FILE, format!("{TOOL_VERSION}\n"))?;
    match command {
        Command::GenData => gen_data(&run),
        Command::Reconstruct => reconstruct_all(&run),
        Command::Train => train_network(&run),
        Command::Postprocess => postprocess(&run),
        Command::Eval => eval(&run),
        Command::Plot => plot(&run),
    }
}

pub fn gen_data(run: &Run) -> Result<()> {
    let cfg = run.config;
    let fine = load_mesh(&cfg.mesh.fine)?;
    let recon = load_mesh(&cfg.mesh.recon)?;
    let ds = generate_dataset(&fine, &recon, &cfg.data, cfg.seed)?;
    let stalled = ds.samples.iter().filter(|s| s.meta.stalled).count();
    log::info!("generated {} samples ({stalled} stalled early)", ds.samples.len());
    ds.save(run.path(DATASET_FILE))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample: usize,
    pub trace: IterateTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config: ReconConfig,
    pub traces: Vec<SampleTrace>,
}

/// Reconstructs every sample of a dataset from its stored voltages.
pub fn reconstruct_dataset(ds: &Dataset, config: &ReconConfig) -> Result<Vec<SampleTrace>> {
    let model = measurement_model(&ds.header.recon_mesh, &ds.header.config)?;
    let diff = difference_matrix(&ds.header.recon_mesh);
    (0..ds.samples.len())
        .into_par_iter()
        .map(|i| {
            let v = ds.voltages(i)?;
            let problem = InverseProblem::new(&model, &diff, &v)?;
            let trace = reconstruct(&problem, config, None)?;
            Ok(SampleTrace { sample: i, trace })
        })
        .collect()
}

fn reconstruct_all(run: &Run) -> Result<()> {
    let ds = run.load_dataset()?;
    let config = &run.config.reconstruct;
    let traces = reconstruct_dataset(&ds, config)?;
    let file = TraceFile {
        config: config.clone(),
        traces,
    };
    run.write(TRACES_FILE, serde_json::to_string(&file).expect("traces serialize"))
}

/// `⌈f·n⌉` clusters per pooling step.
pub fn cluster_counts(n_nodes: usize, n_pool: usize, fraction: f64) -> Vec<usize> {
    let mut counts = Vec::with_capacity(n_pool);
    let mut n = n_nodes;
    for _ in 0..n_pool {
        n = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        counts.push(n);
    }
    counts
}

/// Pooling plan for the element graph of `mesh`, cached under `MESHUNET_CACHE`.
pub fn mesh_plan(
    mesh: &mesh_unet::mesh::Mesh2D,
    n_pool: usize,
    fraction: f64,
    reps: usize,
    seed: u64,
) -> Result<PoolingPlan> {
    let graph = element_graph(mesh);
    let counts = cluster_counts(graph.n_nodes(), n_pool, fraction);
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    Ok(cached_pooling_plan(&graph, &counts, reps, seed, cache.as_deref())?)
}

pub fn run_name(input_iterate: usize) -> String {
    format!("GNN-TV{input_iterate}")
}

fn train_network(run: &Run) -> Result<()> {
    let cfg = run.config;
    let ds = run.load_dataset()?;
    let net = &cfg.network;
    let x = cfg.train.input_iterate;
    let split = split_dataset(ds.samples.len(), &cfg.train.split, cfg.seed).map_err(CliError::from_config)?;
    let pairs = |idx: &[usize]| -> Vec<TrainingPair> {
        idx.iter()
            .map(|&i| TrainingPair {
                input: ds.samples[i].iterates[x - 1].clone(),
                target: ds.samples[i].sigma_true.clone(),
                graph: 0,
            })
            .collect()
    };
    let (train_set, val_set) = (pairs(&split.parts[0]), pairs(&split.parts[1]));
    let cluster_seed = net.cluster_seed.unwrap_or(cfg.seed);
    let plan = mesh_plan(
        &ds.header.recon_mesh,
        net.widths.len(),
        net.cluster_fraction,
        net.cluster_reps,
        cluster_seed,
    )?;
    let mut opt = cfg.train.optimizer.clone();
    opt.seed = cfg.seed;
    let meta = CheckpointMeta {
        best_epoch: 0,
        epochs_run: 0,
        best_val_loss: f64::NAN,
        seed: cfg.seed,
        loss: opt.loss.clone(),
        input_iterate: Some(x),
        cluster_fraction: Some(net.cluster_fraction),
        cluster_reps: Some(net.cluster_reps),
        cluster_seed: Some(cluster_seed),
    };
    fn typed<T: Real>(
        plan: &PoolingPlan,
        train_set: &[TrainingPair],
        val_set: &[TrainingPair],
        arch: &mesh_unet::gnn::UNetArch,
        opt: &mesh_unet::gnn::TrainConfig,
        mut meta: CheckpointMeta,
    ) -> Result<(Checkpoint, Vec<EpochRecord>)> {
        let graphs = vec![GraphData::<T>::new(Topology::from_plan(plan))];
        let out = train(train_set, val_set, &graphs, arch, opt)?;
        meta.best_epoch = out.best_epoch;
        meta.epochs_run = out.history.len();
        meta.best_val_loss = out.best_val_loss;
        Ok((Checkpoint::new(&out.params, opt.normalization, meta), out.history))
    }
    let arch = net.arch();
    let (ckpt, history) = match net.precision.as_str() {
        "f64" => typed::<f64>(&plan, &train_set, &val_set, &arch, &opt, meta)?,
        _ => typed::<f32>(&plan, &train_set, &val_set, &arch, &opt, meta)?,
    };
    log::info!(
        "{}: best validation loss {:e} at epoch {} of {}",
        run_name(x),
        ckpt.meta.best_val_loss,
        ckpt.meta.best_epoch,
        ckpt.meta.epochs_run
    );
    ckpt.save(run.path(CHECKPOINT_FILE))?;
    run.write(LOSS_FILE, history_csv(&history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: usize,
    /// Reconstruction iterate fed to the network.
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub run: String,
    pub input_iterate: usize,
    pub predictions: Vec<Prediction>,
}

impl PredictionFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| mesh_unet::Error::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })
            .map_err(CliError::from)
    }
}

fn subset_indices(cfg: &RunConfig, n: usize) -> Result<Vec<usize>> {
    let part = match cfg.postprocess.subset {
        Subset::All => return Ok((0..n).collect()),
        Subset::Train => 0,
        Subset::Val => 1,
        Subset::Test => 2,
    };
    let split = split_dataset(n, &cfg.train.split, cfg.seed).map_err(CliError::from_config)?;
    Ok(split.parts[part].clone())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Network output for one input; with `rescale` the input is scaled so its
/// median equals that value and the output is scaled back.
pub fn apply_network<T: Real>(
    params: &mesh_unet::gnn::UNetParams<T>,
    topo: &Topology<T>,
    ckpt: &Checkpoint,
    input: &[f64],
    rescale: Option<f64>,
) -> Result<Vec<f64>> {
    let s = match rescale {
        Some(b) => {
            let m = median(input);
            if !(m > 0.0) {
                return Err(mesh_unet::Error::Numerical("cannot rescale an input with non-positive median".into()).into());
            }
            b / m
        }
        None => 1.0,
    };
    let scaled: Vec<f64> = input.iter().map(|v| v * s).collect();
    let y = predict(params, topo, &ckpt.normalization, &scaled)?;
    Ok(if s == 1.0 { y } else { y.into_iter().map(|v| v / s).collect() })
}

/// Runs a checkpoint on the given inputs over the reconstruction mesh of `ds`,
/// with a pooling plan built for that mesh.
pub fn postprocess_inputs(
    ckpt: &Checkpoint,
    ds: &Dataset,
    inputs: &[(usize, Vec<f64>)],
    fallback: &crate::config::NetworkConfig,
    fallback_seed: u64,
    rescale: Option<f64>,
) -> Result<Vec<Prediction>> {
    let plan = mesh_plan(
        &ds.header.recon_mesh,
        ckpt.arch.n_pool(),
        ckpt.meta.cluster_fraction.unwrap_or(fallback.cluster_fraction),
        ckpt.meta.cluster_reps.unwrap_or(fallback.cluster_reps),
        ckpt.meta.cluster_seed.unwrap_or(fallback_seed),
    )?;
    fn typed<T: Real>(
        ckpt: &Checkpoint,
        plan: &PoolingPlan,
        inputs: &[(usize, Vec<f64>)],
        rescale: Option<f64>,
    ) -> Result<Vec<Prediction>> {
        let params = ckpt.to_params::<T>()?;
        let topo = Topology::<T>::from_plan(plan);
        inputs
            .par_iter()
            .map(|(i, x)| {
                Ok(Prediction {
                    sample: *i,
                    input: x.clone(),
                    output: apply_network(&params, &topo, ckpt, x, rescale)?,
                })
            })
            .collect()
    }
    match ckpt.precision.as_str() {
        "f32" => typed::<f32>(ckpt, &plan, inputs, rescale),
        "f64" => typed::<f64>(ckpt, &plan, inputs, rescale),
        p => Err(CliError::Config(format!("checkpoint has unknown precision '{p}'"))),
    }
}

fn postprocess(run: &Run) -> Result<()> {
    let cfg = run.config;
    let ds = run.load_dataset()?;
    let ckpt = Checkpoint::load(run.input(&cfg.inputs.checkpoint, CHECKPOINT_FILE))?;
    let x = ckpt.meta.input_iterate.unwrap_or(cfg.train.input_iterate);
    let indices = subset_indices(cfg, ds.samples.len())?;
    let inputs: Vec<(usize, Vec<f64>)> = match cfg.postprocess.source {
        InputSource::Dataset => {
            if x > ds.samples[0].iterates.len() {
                return Err(CliError::Config(format!("dataset stores no iterate {x}")));
            }
            indices.iter().map(|&i| (i, ds.samples[i].iterates[x - 1].clone())).collect()
        }
        InputSource::Traces => {
            let path = run.input(&cfg.inputs.traces, TRACES_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let file: TraceFile = serde_json::from_str(&text).map_err(|e| mesh_unet::Error::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })?;
            let mut out = Vec::with_capacity(indices.len());
            for &i in &indices {
                let t = file
                    .traces
                    .iter()
                    .find(|t| t.sample == i)
                    .ok_or_else(|| CliError::Config(format!("no trace for sample {i}")))?;
                out.push((i, t.trace.network_inputs(x)[x - 1].clone()));
            }
            out
        }
    };
    let predictions = postprocess_inputs(
        &ckpt,
        &ds,
        &inputs,
        &cfg.network,
        cfg.seed,
        cfg.postprocess.rescale_background,
    )?;
    let file = PredictionFile {
        run: run_name(x),
        input_iterate: x,
        predictions,
    };
    run.write(PREDICTIONS_FILE, serde_json::to_string(&file).expect("predictions serialize"))
}

/// One row for the network input and one for the output of every prediction.
pub fn evaluate_predictions(ds: &Dataset, file: &PredictionFile, cfg: &crate::config::EvalConfig) -> Result<Vec<MetricReport>> {
    let mesh = &ds.header.recon_mesh;
    let diff = difference_matrix(mesh);
    let areas = mesh.areas();
    let areas = cfg.area_weighted.then_some(areas.as_slice());
    let model = measurement_model(mesh, &ds.header.config)?;
    let bounds = dataset_bounds(&ds.header)?;
    let input_name = format!("TV{}", file.input_iterate);
    let rows = file
        .predictions
        .par_iter()
        .map(|p| {
            let sample = ds
                .samples
                .get(p.sample)
                .ok_or_else(|| CliError::Config(format!("prediction for missing sample {}", p.sample)))?;
            let v = ds.voltages(p.sample)?;
            let masks: Vec<Vec<bool>> = if cfg.roi {
                (0..sample.meta.spec.targets.len())
                    .map(|t| roi_mask(&sample.meta.spec, mesh, Some(t)))
                    .collect()
            } else {
                Vec::new()
            };
            let mut out = Vec::with_capacity(2);
            for (method, values) in [(input_name.as_str(), &p.input), (file.run.as_str(), &p.output)] {
                let mut report = evaluate(&Evaluation {
                    sample: p.sample,
                    method,
                    sigma_hat: values,
                    sigma_true: &sample.sigma_true,
                    diff: &diff,
                    areas,
                    voltages: cfg.voltage_error.then_some((&v, &model, bounds)),
                    roi_masks: &[],
                })?;
                // A target can miss every element centroid on a coarse mesh.
                report.roi_means = masks
                    .iter()
                    .map(|m| roi_mean(values, m, areas).unwrap_or(f64::NAN))
                    .collect();
                out.push(report);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn eval(run: &Run) -> Result<()> {
    let cfg = run.config;
    let ds = run.load_dataset()?;
    let file = PredictionFile::load(&run.input(&cfg.inputs.predictions, PREDICTIONS_FILE))?;
    let reports = evaluate_predictions(&ds, &file, &cfg.eval)?;
    run.write(METRICS_FILE, to_csv(&reports))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("csv has no column '{name}'")))
}

/// Conductivity maps of the first predictions, loss curves and metric bars,
/// each from whichever inputs exist.
fn plot(run: &Run) -> Result<()> {
    let cfg = &run.config.plot;
    let mut written = 0;
    let pred_path = run.input(&run.config.inputs.predictions, PREDICTIONS_FILE);
    if pred_path.exists() {
        let ds = run.load_dataset()?;
        let file = PredictionFile::load(&pred_path)?;
        let mesh = &ds.header.recon_mesh;
        for p in file.predictions.iter().take(cfg.max_samples) {
            let truth = &ds.samples[p.sample].sigma_true;
            let range = match cfg.range {
                Some([lo, hi]) => (lo, hi),
                None => truth
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
            };
            let tag = run_name(file.input_iterate);
            for (name, values) in [
                ("truth".to_string(), truth),
                (format!("tv{}", file.input_iterate), &p.input),
                (tag.to_lowercase(), &p.output),
            ] {
                let img = conductivity_map(mesh, values, Some(range), cfg.size)?;
                img.save_png(run.path(&format!("map_{:04}_{name}.png", p.sample)))?;
                written += 1;
            }
        }
    }
    if let Some(text) = read_optional(&run.path(LOSS_FILE))? {
        let (header, rows) = parse_csv(&text);
        let (e, t, v) = (column(&header, "epoch")?, column(&header, "train_loss")?, column(&header, "val_loss")?);
        let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::Config(format!("bad number '{s}' in {LOSS_FILE}")));
        let mut series = vec![Vec::new(), Vec::new()];
        for r in &rows {
            let x = num(&r[e])?;
            series[0].push((x, num(&r[t])?));
            series[1].push((x, num(&r[v])?));
        }
        line_plot(&series, true, 2 * cfg.size, cfg.size)?.save_png(run.path("loss.png"))?;
        written += 1;
    }
    if let Some(text) = read_optional(&run.path(METRICS_FILE))? {
        let (header, rows) = parse_csv(&text);
        let m = column(&header, "method")?;
        let cols = ["re_sigma_l1", "dr_percent", "tvr_percent"].map(|c| column(&header, c));
        let mut methods: Vec<String> = Vec::new();
        for r in &rows {
            if !methods.contains(&r[m]) {
                methods.push(r[m].clone());
            }
        }
        let mut groups = Vec::new();
        for (k, c) in cols.into_iter().enumerate() {
            let c = c?;
            let scale = if k == 0 { 1.0 } else { 0.01 };
            groups.push(
                methods
                    .iter()
                    .map(|name| {
                        let vals: Vec<f64> = rows
                            .iter()
                            .filter(|r| &r[m] == name)
                            .filter_map(|r| r[c].parse::<f64>().ok())
                            .collect();
                        scale * vals.iter().sum::<f64>() / vals.len().max(1) as f64
                    })
                    .collect(),
            );
        }
        bar_chart(&groups, 2 * cfg.size, cfg.size)?.save_png(run.path("metrics.png"))?;
        written += 1;
    }
    log::info!("wrote {written} images");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_fraction_matches_library_default() {
        for n in [1, 7, 800, 1203] {
            assert_eq!(
                cluster_counts(n, 3, 0.25),
                mesh_unet::cluster::default_cluster_counts(n, 3)
            );
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn run_names() {
        assert_eq!(run_name(2), "GNN-TV2");
    }
}

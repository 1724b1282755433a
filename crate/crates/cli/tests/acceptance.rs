//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mesh_unet::datagen::{
    measurement_model, rasterize_to_mesh, sample_phantom, sample_seeds, split_dataset, Dataset, DatasetConfig,
    Pipeline,
};
use mesh_unet::forward::{Bounds, Conductivity, CurrentPatterns, ElectrodeConfig, ForwardModel};
use mesh_unet::gnn::loss::loss_registry;
use mesh_unet::gnn::train::{mean_loss, GraphData};
use mesh_unet::gnn::{Checkpoint, Topology, TrainingPair};
use mesh_unet::graph::{difference_matrix, normalized_aggregator, Graph};
use mesh_unet::mesh::{load_mesh, Mesh2D};
use mesh_unet::metrics::{dynamic_range, mse, re_sigma_l1, re_v_l2, tv_ratio};
use mesh_unet::verify::{
    aggregator_deviation, check_gconv, check_losses, check_pooling_algebra, check_pooling_gradients, check_unet,
    random_graph,
};
use mesh_unet_cli::commands::{
    evaluate_predictions, mesh_plan, run, PredictionFile, CHECKPOINT_FILE, DATASET_FILE, METRICS_FILE,
    PREDICTIONS_FILE,
};
use mesh_unet_cli::{Command, RunConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn mesh(name: &str) -> Mesh2D {
    load_mesh(fixture(&format!("{name}.mesh.json"))).unwrap()
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> RunConfig {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut checked) = (0.0f64, 0);
    for seed in 0..25 {
        let checks = check_gconv(seed)
            .unwrap()
            .into_iter()
            .chain(check_pooling_gradients(seed).unwrap())
            .chain(check_losses(seed).unwrap())
            .chain([check_unet(seed).unwrap()]);
        for c in checks {
            worst = worst.max(c.max_rel_error);
            checked += c.checked;
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && t < Duration::from_secs(60),
        format!("25 graphs, {checked} derivatives, max rel. error {worst:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

fn pooling_algebra() -> Outcome {
    let failures: Vec<String> = (0..500)
        .filter_map(|seed| check_pooling_algebra(seed).err().map(|e| format!("seed {seed}: {e}")))
        .collect();
    outcome(
        failures.is_empty(),
        format!("500 cases, {} failures {}", failures.len(), failures.first().cloned().unwrap_or_default()),
    )
}

fn aggregator() -> Outcome {
    let worst = (0..100u64)
        .map(|seed| {
            let n = 1 + (seed as usize * 13) % 50;
            aggregator_deviation(&random_graph(n, (seed as usize) % (2 * n), seed))
        })
        .fold(0.0f64, f64::max);
    let path = Graph::from_2d(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [(0, 1), (1, 2)]).unwrap();
    let s = normalized_aggregator(&path).to_dense();
    let (a, b, c) = (0.5, 1.0 / 6f64.sqrt(), 1.0 / 3.0);
    let expected = DMatrix::from_row_slice(3, 3, &[a, b, 0.0, b, c, b, 0.0, b, a]);
    let path_err = (s - expected).amax();
    outcome(
        worst <= 1e-12 && path_err <= 1e-12,
        format!("100 graphs max deviation {worst:.1e}, 3-node path deviation {path_err:.1e}"),
    )
}

fn fem() -> Outcome {
    let start = Instant::now();
    // Self-convergence of homogeneous-disk voltages.
    let voltages: Vec<Vec<f64>> = (0..4)
        .map(|level| {
            let m = mesh(&format!("disk_l{level}"));
            let el = ElectrodeConfig::from_mesh(&m, 1.0).unwrap();
            let model = ForwardModel::new(&m, el, CurrentPatterns::trigonometric(16, 3e-3)).unwrap();
            let sigma = Conductivity::uniform(m.n_elements(), 0.14, Bounds::default()).unwrap();
            model.solve(&sigma).unwrap().frame.to_vector()
        })
        .collect();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let d: Vec<f64> = voltages.windows(2).map(|w| diff(&w[0], &w[1])).collect();
    let orders: Vec<f64> = d.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let order = *orders.last().unwrap();

    // Reciprocity of the transfer map.
    let chest = mesh("chest_small");
    let l = chest.electrodes().len();
    let t = DMatrix::from_fn(l, l, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / l as f64);
    let model = ForwardModel::new(
        &chest,
        ElectrodeConfig::from_mesh(&chest, 1e-3).unwrap(),
        CurrentPatterns::new(t).unwrap(),
    )
    .unwrap();
    let values = chest.centroids().iter().map(|c| 0.1 + 2.0 * c[0].abs() + 5.0 * c[1] * c[1]).collect();
    let r = model.solve(&Conductivity::new(values, Bounds::default()).unwrap()).unwrap().frame;
    let r = r.matrix();
    let asym = (r - r.transpose()).amax() / r.amax();

    // Jacobian against central differences.
    let disk = mesh("disk_l0");
    let cfg = DatasetConfig::default();
    let model = measurement_model(&disk, &cfg).unwrap();
    let base: Vec<f64> = disk
        .centroids()
        .iter()
        .map(|c| 0.14 + 0.5 * (c[0] * 20.0).sin().abs() + 2.0 * c[1].abs())
        .collect();
    let (_, jac) = model.jacobian(&Conductivity::new(base.clone(), Bounds::default()).unwrap()).unwrap();
    let solve = |s: Vec<f64>| model.solve(&Conductivity::new(s, Bounds::default()).unwrap()).unwrap().frame.to_vector();
    let jac_err = (0..disk.n_elements())
        .into_par_iter()
        .map(|e| {
            let h = 1e-6 * base[e];
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[e] += h;
            minus[e] -= h;
            let (up, um) = (solve(plus), solve(minus));
            let col = jac.column(e);
            let err = (0..col.len()).map(|r| ((up[r] - um[r]) / (2.0 * h) - col[r]).abs()).fold(0.0, f64::max);
            err / col.amax()
        })
        .reduce(|| 0.0, f64::max);
    let t = start.elapsed();
    outcome(
        order >= 1.8 && asym <= 1e-8 && jac_err < 1e-3 && t < Duration::from_secs(300),
        format!(
            "observed order {order:.2} (levels 0-3, z = 1, successive orders {}), reciprocity {asym:.1e}, \
             Jacobian rel. error {jac_err:.1e} on {} elements, {:.1}s",
            orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>().join(", "),
            disk.n_elements(),
            t.as_secs_f64()
        ),
    )
}

fn tv_solver() -> Outcome {
    let (fine, recon) = (mesh("chest_fine"), mesh("chest_recon"));
    let mut cfg = DatasetConfig::default();
    cfg.recon.max_iters = 20;
    let pipeline = Pipeline::new(&fine, &recon, &cfg).unwrap();
    let samples: Vec<_> = sample_seeds(5, 20)
        .par_iter()
        .enumerate()
        .map(|(i, &s)| pipeline.sample(i, s).unwrap())
        .collect();
    let increases = samples
        .iter()
        .filter(|s| s.meta.objectives.windows(2).any(|w| w[1] > w[0]))
        .count();
    let stalled = samples.iter().filter(|s| s.meta.stalled).count();
    let min_iters = samples.iter().map(|s| s.meta.objectives.len() - 1).min().unwrap();
    let re = |k: usize| mean(&samples.iter().map(|s| re_sigma_l1(&s.iterates[k], &s.sigma_true).unwrap()).collect::<Vec<_>>());
    let (re1, re4) = (re(0), re(3));
    outcome(
        increases == 0 && re4 < re1,
        format!(
            "20 phantoms, {increases} with an objective increase, {stalled} stopped early (fewest steps {min_iters}), \
             mean RE_sigma iterate 1 {re1:.4}, iterate 4 {re4:.4}"
        ),
    )
}

/// Outputs of the desk-scale training run, reused by criteria 7 and 9.
struct TrainedRun {
    out: PathBuf,
    config: RunConfig,
}

fn central_claim() -> (Outcome, Option<TrainedRun>) {
    let start = Instant::now();
    let dir = workdir("central");
    let config = write_config(
        &dir,
        &format!(
            r#"seed = 7

[mesh]
fine = "{}"
recon = "{}"

[data]
n_samples = 300

[network]
widths = [16, 32, 64]
bottom = 128
cluster_seed = 0

[train]
input_iterate = 2
learning_rate = 5e-4
batch_size = 32
patience_epochs = 50
normalization = {{ offset = 0.14, scale = 10.0 }}

[postprocess]
subset = "test"

[plot]
max_samples = 4
"#,
            fixture("chest_fine.mesh.json").display(),
            fixture("chest_recon.mesh.json").display()
        ),
    );
    let out = dir.join("out");
    for cmd in [Command::GenData, Command::Train, Command::Postprocess, Command::Eval, Command::Plot] {
        if let Err(e) = run(cmd, &config, &out) {
            return (outcome(false, format!("{cmd:?} failed: {e}")), None);
        }
    }
    let split = split_dataset(300, &config.train.split, config.seed).unwrap();
    let sizes: Vec<usize> = split.parts.iter().map(Vec::len).collect();
    let ds = Dataset::load(out.join(DATASET_FILE)).unwrap();
    let preds = PredictionFile::load(&out.join(PREDICTIONS_FILE)).unwrap();
    let (mut wins, mut net, mut tv, mut dr_net, mut dr_tv) = (0, vec![], vec![], vec![], vec![]);
    for p in &preds.predictions {
        let truth = &ds.samples[p.sample].sigma_true;
        let (a, b) = (mse(&p.output, truth).unwrap(), mse(&p.input, truth).unwrap());
        wins += usize::from(a < b);
        net.push(a);
        tv.push(b);
        dr_net.push(dynamic_range(&p.output, truth).unwrap());
        dr_tv.push(dynamic_range(&p.input, truth).unwrap());
    }
    let n = preds.predictions.len();
    let improvement = 1.0 - mean(&net) / mean(&tv);
    let (drn, drt) = (mean(&dr_net), mean(&dr_tv));
    let t = start.elapsed();
    let pass = sizes == [200, 50, 50]
        && n == 50
        && wins * 5 >= 4 * n
        && improvement >= 0.2
        && (drn - 100.0).abs() < (drt - 100.0).abs()
        && t < Duration::from_secs(1800);
    let detail = format!(
        "split {sizes:?}, {} beats TV{} on {wins}/{n} test samples, mean MSE {:.3e} vs {:.3e} ({:.1}% better), \
         mean DR {drn:.1}% vs {drt:.1}%, {:.0}s",
        preds.run,
        preds.input_iterate,
        mean(&net),
        mean(&tv),
        100.0 * improvement,
        t.as_secs_f64()
    );
    (outcome(pass, detail), Some(TrainedRun { out, config }))
}

fn domain_mismatch(trained: Option<&TrainedRun>) -> Outcome {
    let Some(trained) = trained else {
        return outcome(false, "no trained network".into());
    };
    let dir = workdir("mismatch");
    let config = write_config(
        &dir,
        &format!(
            r#"seed = 11

[mesh]
fine = "{}"
recon = "{}"

[data]
n_samples = 10

[network]
widths = [16, 32, 64]
bottom = 128

[postprocess]
subset = "all"

[plot]
max_samples = 10

[inputs]
checkpoint = "{}"
"#,
            fixture("chest_fine.mesh.json").display(),
            fixture("ellipse_recon.mesh.json").display(),
            trained.out.join(CHECKPOINT_FILE).display()
        ),
    );
    let out = dir.join("out");
    for cmd in [Command::GenData, Command::Postprocess, Command::Eval, Command::Plot] {
        if let Err(e) = run(cmd, &config, &out) {
            return outcome(false, format!("{cmd:?} failed: {e}"));
        }
    }
    let ds = Dataset::load(out.join(DATASET_FILE)).unwrap();
    let preds = PredictionFile::load(&out.join(PREDICTIONS_FILE)).unwrap();
    let (net, tv): (Vec<f64>, Vec<f64>) = preds
        .predictions
        .iter()
        .map(|p| {
            let truth = &ds.samples[p.sample].sigma_true;
            (mse(&p.output, truth).unwrap(), mse(&p.input, truth).unwrap())
        })
        .unzip();
    outcome(
        preds.predictions.len() == 10 && mean(&net) <= mean(&tv),
        format!(
            "10 chest phantoms on the elliptical mesh, mean MSE {:.3e} post-processed vs {:.3e} TV{}; maps in {}",
            mean(&net),
            mean(&tv),
            preds.input_iterate,
            out.display()
        ),
    )
}

fn metric_identities() -> Outcome {
    let (fine, recon) = (mesh("chest_fine"), mesh("chest_recon"));
    let cfg = DatasetConfig::default();
    let bounds = cfg.recon.bounds().unwrap();
    let diff = difference_matrix(&recon);
    let fine_model = measurement_model(&fine, &cfg).unwrap();
    let recon_model = measurement_model(&recon, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut identities, mut cross, mut same, mut flat) = (true, vec![], vec![], vec![]);
    for _ in 0..10 {
        let (spec, sigma_fine) = sample_phantom(&fine, &cfg.phantom, &mut rng).unwrap();
        let truth = rasterize_to_mesh(&spec, &recon);
        identities &= mse(&truth, &truth).unwrap() == 0.0
            && re_sigma_l1(&truth, &truth).unwrap() == 0.0
            && dynamic_range(&truth, &truth).unwrap() == 100.0
            && tv_ratio(&truth, &truth, &diff).unwrap() == 100.0;
        let v_fine = fine_model.solve(&Conductivity::new(sigma_fine, bounds).unwrap()).unwrap().frame;
        let v_same = recon_model.solve(&Conductivity::new(truth.clone(), bounds).unwrap()).unwrap().frame;
        cross.push(re_v_l2(&truth, &v_fine, &recon_model, bounds).unwrap());
        same.push(re_v_l2(&truth, &v_same, &recon_model, bounds).unwrap());
        flat.push(re_v_l2(&vec![spec.background; truth.len()], &v_fine, &recon_model, bounds).unwrap());
    }
    let floor = mean(&cross);
    let worst_same = same.iter().cloned().fold(0.0, f64::max);
    let truth_beats_flat = cross.iter().zip(&flat).all(|(c, f)| c < f);
    outcome(
        identities && worst_same < floor && truth_beats_flat,
        format!(
            "identities exact on 10 truths: {identities}; discretization floor (noise-free truth, fine data) \
             {floor:.3e}; same-mesh RE_V {worst_same:.1e}; truth fits better than its background: {truth_beats_flat}"
        ),
    )
}

fn early_stopping(trained: Option<&TrainedRun>) -> Outcome {
    let Some(trained) = trained else {
        return outcome(false, "no trained network".into());
    };
    let cfg = &trained.config;
    let ckpt = Checkpoint::load(trained.out.join(CHECKPOINT_FILE)).unwrap();
    let ds = Dataset::load(trained.out.join(DATASET_FILE)).unwrap();
    let split = split_dataset(ds.samples.len(), &cfg.train.split, cfg.seed).unwrap();
    let x = cfg.train.input_iterate;
    let val: Vec<TrainingPair> = split.parts[1]
        .iter()
        .map(|&i| TrainingPair {
            input: ds.samples[i].iterates[x - 1].clone(),
            target: ds.samples[i].sigma_true.clone(),
            graph: 0,
        })
        .collect();
    let plan = mesh_plan(
        &ds.header.recon_mesh,
        ckpt.arch.n_pool(),
        ckpt.meta.cluster_fraction.unwrap(),
        ckpt.meta.cluster_reps.unwrap(),
        ckpt.meta.cluster_seed.unwrap(),
    )
    .unwrap();
    let graphs = vec![GraphData::<f32>::new(Topology::from_plan(&plan))];
    let params = ckpt.to_params::<f32>().unwrap();
    let loss = loss_registry().get(&ckpt.meta.loss).unwrap();
    let reloaded = mean_loss(&params, &graphs, &ckpt.normalization, loss.as_ref(), &val).unwrap();
    let (best, ran) = (ckpt.meta.best_epoch, ckpt.meta.epochs_run);
    let patience = cfg.train.optimizer.patience_epochs;
    let within = ran - best <= patience + 1;
    outcome(
        within && reloaded.to_bits() == ckpt.meta.best_val_loss.to_bits(),
        format!(
            "best epoch {best}, stopped after {ran} (patience {patience}); reloaded validation loss {reloaded:e}, \
             recorded {:e}",
            ckpt.meta.best_val_loss
        ),
    )
}

fn determinism() -> Outcome {
    let dir = workdir("determinism");
    let text = format!(
        r#"seed = 21

[mesh]
fine = "{}"
recon = "{}"

[data]
n_samples = 12

[network]
widths = [8, 8]
bottom = 16
cluster_reps = 3

[train]
split = [0.5, 0.25, 0.25]
batch_size = 4
max_epochs = 15
patience_epochs = 5
"#,
        fixture("chest_recon.mesh.json").display(),
        fixture("chest_small.mesh.json").display()
    );
    let config = write_config(&dir, &text);
    let commands = [Command::GenData, Command::Train, Command::Postprocess, Command::Eval];
    let mut outputs = Vec::new();
    for (name, threads) in [("a", 1), ("b", 2)] {
        let out = dir.join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        for cmd in commands {
            if let Err(e) = pool.install(|| run(cmd, &config, &out)) {
                return outcome(false, format!("{cmd:?} failed: {e}"));
            }
        }
        outputs.push(out);
    }
    let files = [DATASET_FILE, CHECKPOINT_FILE, METRICS_FILE];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(outputs[0].join(f)).unwrap() != std::fs::read(outputs[1].join(f)).unwrap())
        .collect();
    // The metrics file also has to agree with a fresh in-process evaluation.
    let ds = Dataset::load(outputs[0].join(DATASET_FILE)).unwrap();
    let preds = PredictionFile::load(&outputs[0].join(PREDICTIONS_FILE)).unwrap();
    let csv = mesh_unet::metrics::to_csv(&evaluate_predictions(&ds, &preds, &config.eval).unwrap());
    let consistent = csv.as_bytes() == std::fs::read(outputs[0].join(METRICS_FILE)).unwrap();
    outcome(
        differing.is_empty() && consistent,
        format!("two runs (1 and 2 threads): differing files {differing:?}, metrics reproducible: {consistent}"),
    )
}

fn main() {
    let criteria: [(&str, fn(&mut Option<TrainedRun>) -> Outcome); 10] = [
        ("gradient correctness", |_| gradients()),
        ("pooling algebra", |_| pooling_algebra()),
        ("aggregator correctness", |_| aggregator()),
        ("FEM validity", |_| fem()),
        ("TV solver", |_| tv_solver()),
        ("post-processing beats TV input", |trained| {
            let (o, t) = central_claim();
            *trained = t;
            o
        }),
        ("domain-mismatch robustness", |trained| domain_mismatch(trained.as_ref())),
        ("metric identities", |_| metric_identities()),
        ("early stopping contract", |trained| early_stopping(trained.as_ref())),
        ("determinism", |_| determinism()),
    ];
    let mut trained = None;
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut trained)));
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s]",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

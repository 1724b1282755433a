//! Random elliptical phantoms, simulated measurements and the `.eitds`
//! dataset container.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::forward::{Bounds, Conductivity, CurrentPatterns, ElectrodeConfig, ForwardModel, VoltageFrame};
use crate::graph::difference_matrix;
use crate::inverse::{reconstruct, InverseProblem, IterateTrace, ReconConfig, RECORDED_ITERATES};
use crate::mesh::{distance_to_polygon, point_in_polygon, Mesh2D};

pub const FORMAT_MAGIC: &[u8; 8] = b"EITDSET\0";
pub const FORMAT_VERSION: u32 = 1;
/// Boundary samples used for the placement checks.
const OUTLINE_SAMPLES: usize = 128;
const MAX_SAMPLE_RETRIES: usize = 3;
/// Full redraws of a phantom whose targets could not all be placed.
const PHANTOM_RESTARTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_targets: Vec<usize>,
    /// Semi-major axis range (m).
    pub major_axis: [f64; 2],
    pub minor_ratio: [f64; 2],
    pub resistive_cond: [f64; 2],
    pub conductive_cond: [f64; 2],
    pub background_cond: [f64; 2],
    /// Minimum gap between targets and between a target and the boundary (m).
    pub clearance: f64,
    pub max_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_targets: vec![3, 4],
            major_axis: [0.03, 0.07],
            minor_ratio: [0.5, 0.9],
            resistive_cond: [0.04, 0.07],
            conductive_cond: [0.25, 0.35],
            background_cond: [0.11, 0.17],
            clearance: 0.002,
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Rotation of the major axis from the x-axis (rad).
    pub angle: f64,
    pub conductivity: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.level(p) <= 1.0
    }

    /// `(x'/a)² + (y'/b)²` in the ellipse frame.
    fn level(&self, p: [f64; 2]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_major * self.semi_minor
    }

    pub fn outline(&self, n: usize) -> Vec<[f64; 2]> {
        let (s, c) = self.angle.sin_cos();
        (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let (u, v) = (self.semi_major * t.cos(), self.semi_minor * t.sin());
                [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub background: f64,
    pub targets: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn conductivity_at(&self, p: [f64; 2]) -> f64 {
        self.targets
            .iter()
            .find(|t| t.contains(p))
            .map_or(self.background, |t| t.conductivity)
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Outline of the domain used for placement (the first boundary loop).
pub fn domain_outline(mesh: &Mesh2D) -> Vec<[f64; 2]> {
    mesh.boundary_loops().into_iter().next().unwrap_or_default()
}

fn fits(candidate: &Ellipse, outline: &[[f64; 2]], placed: &[Ellipse], clearance: f64) -> bool {
    let pts = candidate.outline(OUTLINE_SAMPLES);
    if !point_in_polygon(candidate.center, outline) {
        return false;
    }
    if pts
        .iter()
        .any(|&p| !point_in_polygon(p, outline) || distance_to_polygon(p, outline) < clearance)
    {
        return false;
    }
    placed.iter().all(|other| {
        let qs = other.outline(OUTLINE_SAMPLES);
        !other.contains(candidate.center)
            && !candidate.contains(other.center)
            && pts.iter().all(|&p| !other.contains(p))
            && qs.iter().all(|&q| !candidate.contains(q))
            && pts
                .iter()
                .all(|p| qs.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= clearance))
    })
}

/// Draws a phantom inside `outline` by rejection sampling of target centres.
pub fn sample_phantom_in(outline: &[[f64; 2]], config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<PhantomSpec> {
    ensure!(outline.len() >= 3, InvalidArgument, "domain outline has fewer than 3 vertices");
    ensure!(!config.n_targets.is_empty(), InvalidArgument, "no target counts configured");
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in outline {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let n_targets = draw_target_count(config, rng);
    let background = uniform(rng, config.background_cond);
    let mut failed_at = 0;
    for _ in 0..PHANTOM_RESTARTS {
        match place_targets(n_targets, outline, (lo, hi), config, rng) {
            Ok(targets) => return Ok(PhantomSpec { background, targets }),
            Err(t) => failed_at = t,
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place target {failed_at} of {n_targets} in {PHANTOM_RESTARTS} restarts of {} attempts each; domain too small",
        config.max_attempts
    )))
}

pub fn draw_target_count(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> usize {
    config.n_targets[rng.random_range(0..config.n_targets.len())]
}

/// Draws sizes, contrasts and positions for all targets; on failure returns
/// the index of the target that did not fit.
fn place_targets(
    n_targets: usize,
    outline: &[[f64; 2]],
    (lo, hi): ([f64; 2], [f64; 2]),
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<Ellipse>, usize> {
    let mut targets: Vec<Ellipse> = Vec::with_capacity(n_targets);
    for t in 0..n_targets {
        let semi_major = uniform(rng, config.major_axis);
        let semi_minor = semi_major * uniform(rng, config.minor_ratio);
        let angle = std::f64::consts::PI * rng.random::<f64>();
        let range = if rng.random::<bool>() {
            config.resistive_cond
        } else {
            config.conductive_cond
        };
        let conductivity = uniform(rng, range);
        let placed = (0..config.max_attempts).find_map(|_| {
            let center = [uniform(rng, [lo[0], hi[0]]), uniform(rng, [lo[1], hi[1]])];
            let e = Ellipse {
                center,
                semi_major,
                semi_minor,
                angle,
                conductivity,
            };
            fits(&e, outline, &targets, config.clearance).then_some(e)
        });
        targets.push(placed.ok_or(t)?);
    }
    Ok(targets)
}

/// Phantom on `mesh`'s domain together with its rasterization to that mesh.
pub fn sample_phantom(mesh: &Mesh2D, config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<(PhantomSpec, Vec<f64>)> {
    let spec = sample_phantom_in(&domain_outline(mesh), config, rng)?;
    let sigma = rasterize_to_mesh(&spec, mesh);
    Ok((spec, sigma))
}

/// Element value from the region containing the element centroid.
pub fn rasterize_to_mesh(spec: &PhantomSpec, mesh: &Mesh2D) -> Vec<f64> {
    mesh.centroids().into_iter().map(|c| spec.conductivity_at(c)).collect()
}

/// Element mask of the given target (`None`: background).
pub fn roi_mask(spec: &PhantomSpec, mesh: &Mesh2D, target: Option<usize>) -> Vec<bool> {
    mesh.centroids()
        .into_iter()
        .map(|c| {
            let hit = spec.targets.iter().position(|t| t.contains(c));
            hit == target
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub noise_rel: f64,
    pub current_amplitude: f64,
    pub contact_impedance: f64,
    pub phantom: PhantomConfig,
    pub recon: ReconConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 300,
            noise_rel: 0.005,
            current_amplitude: 3e-3,
            contact_impedance: 1e-3,
            phantom: PhantomConfig::default(),
            recon: ReconConfig {
                max_iters: RECORDED_ITERATES,
                ..ReconConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub fine_mesh_hash: String,
    pub recon_mesh_hash: String,
    /// The reconstruction mesh, so the file is usable on its own.
    pub recon_mesh: Mesh2D,
    pub n_patterns: usize,
    pub n_electrodes: usize,
    pub noise_model: String,
    pub config: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub retries: usize,
    pub spec: PhantomSpec,
    pub stalled: bool,
    pub objectives: Vec<f64>,
    pub misfits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EitSample {
    pub meta: SampleMeta,
    /// Truth on the reconstruction mesh.
    pub sigma_true: Vec<f64>,
    /// Noisy voltages, pattern-major.
    pub voltages: Vec<f64>,
    /// σ₁…σ₄ on the reconstruction mesh.
    pub iterates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<EitSample>,
}

/// Simulation and reconstruction setup shared by every sample.
pub struct Pipeline<'a> {
    fine: &'a Mesh2D,
    recon: &'a Mesh2D,
    fine_model: ForwardModel,
    recon_model: ForwardModel,
    config: &'a DatasetConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(fine: &'a Mesh2D, recon: &'a Mesh2D, config: &'a DatasetConfig) -> Result<Self> {
        ensure!(
            fine.content_hash() != recon.content_hash(),
            InvalidArgument,
            "simulation and reconstruction meshes are identical (inverse crime)"
        );
        ensure!(
            fine.electrodes().len() == recon.electrodes().len(),
            Shape,
            "fine mesh has {} electrodes, reconstruction mesh {}",
            fine.electrodes().len(),
            recon.electrodes().len()
        );
        ensure!(config.noise_rel >= 0.0, InvalidArgument, "noise level must be non-negative");
        config.recon.validate()?;
        Ok(Pipeline {
            fine,
            recon,
            fine_model: measurement_model(fine, config)?,
            recon_model: measurement_model(recon, config)?,
            config,
        })
    }

    pub fn recon_model(&self) -> &ForwardModel {
        &self.recon_model
    }

    /// TV iterates on the reconstruction mesh from measured voltages.
    pub fn reconstruct(&self, v: &VoltageFrame) -> Result<IterateTrace> {
        run_tv(&self.recon_model, &self.config.recon, v)
    }

    fn attempt(&self, rng: &mut ChaCha8Rng) -> Result<(PhantomSpec, Vec<f64>, IterateTrace)> {
        let (spec, sigma_fine) = sample_phantom(self.fine, &self.config.phantom, rng)?;
        let sigma_fine = Conductivity::new(sigma_fine, self.config.recon.bounds()?)?;
        let v = self.fine_model.simulate(&sigma_fine, self.config.noise_rel, rng.next_u64())?;
        let trace = self.reconstruct(&v)?;
        Ok((spec, v.to_vector(), trace))
    }

    /// Sample `index` drawn from its own seed; numerical failures are
    /// retried with fresh draws from the same stream.
    pub fn sample(&self, index: usize, seed: u64) -> Result<EitSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_err = None;
        for retries in 0..=MAX_SAMPLE_RETRIES {
            match self.attempt(&mut rng) {
                Ok((spec, voltages, trace)) => {
                    let sigma_true = rasterize_to_mesh(&spec, self.recon);
                    return Ok(EitSample {
                        meta: SampleMeta {
                            index,
                            seed,
                            retries,
                            spec,
                            stalled: trace.stalled,
                            objectives: trace.objectives.clone(),
                            misfits: trace.misfits.clone(),
                        },
                        sigma_true,
                        voltages,
                        iterates: trace.network_inputs(RECORDED_ITERATES),
                    });
                }
                Err(e) if e.is_numerical() => {
                    log::warn!("sample {index}: attempt {retries} failed: {e}");
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

/// Forward model with the dataset's electrodes, contact impedance and
/// adjacent current patterns.
pub fn measurement_model(mesh: &Mesh2D, config: &DatasetConfig) -> Result<ForwardModel> {
    let patterns = CurrentPatterns::adjacent(mesh.electrodes().len(), config.current_amplitude);
    ForwardModel::new(mesh, ElectrodeConfig::from_mesh(mesh, config.contact_impedance)?, patterns)
}

fn run_tv(model: &ForwardModel, config: &ReconConfig, v: &VoltageFrame) -> Result<IterateTrace> {
    let diff = difference_matrix(model.mesh());
    let problem = InverseProblem::new(model, &diff, v)?;
    reconstruct(&problem, config, None)
}

/// Per-sample seeds drawn in index order from the dataset seed.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn generate_dataset(fine: &Mesh2D, recon: &Mesh2D, config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    ensure!(config.n_samples >= 1, InvalidArgument, "n_samples must be at least 1");
    let pipeline = Pipeline::new(fine, recon, config)?;
    let seeds = sample_seeds(seed, config.n_samples);
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| pipeline.sample(i, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            seed,
            fine_mesh_hash: fine.content_hash(),
            recon_mesh_hash: recon.content_hash(),
            recon_mesh: recon.clone(),
            n_patterns: pipeline.recon_model.patterns().n_patterns(),
            n_electrodes: recon.electrodes().len(),
            noise_model: format!(
                "independent gaussian, std = {} x |U| per measurement, pattern means re-zeroed",
                config.noise_rel
            ),
            config: config.clone(),
        },
        samples,
    })
}

impl Dataset {
    pub fn n_elements(&self) -> usize {
        self.header.recon_mesh.n_elements()
    }

    pub fn voltages(&self, index: usize) -> Result<VoltageFrame> {
        VoltageFrame::from_vector(
            self.header.n_patterns,
            self.header.n_electrodes,
            &self.samples[index].voltages,
        )
    }

    /// Reruns the stored reconstruction of sample `index` from its voltages.
    pub fn rerun_reconstruction(&self, index: usize) -> Result<IterateTrace> {
        let model = measurement_model(&self.header.recon_mesh, &self.header.config)?;
        run_tv(&model, &self.header.config.recon, &self.voltages(index)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            let meta = serde_json::to_vec(&s.meta).expect("metadata serializes");
            out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
            out.extend_from_slice(&meta);
            for arr in std::iter::once(&s.sigma_true)
                .chain(std::iter::once(&s.voltages))
                .chain(s.iterates.iter())
            {
                for v in arr {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        ensure!(&magic == FORMAT_MAGIC, InvalidArgument, "not a dataset file (bad magic)");
        let version = u32::from_le_bytes(read_array(&mut r)?);
        ensure!(version == FORMAT_VERSION, InvalidArgument, "unsupported dataset version {version}");
        let header: DatasetHeader = read_json(&mut r, "dataset header")?;
        header.recon_mesh.validate()?;
        ensure!(
            header.recon_mesh.content_hash() == header.recon_mesh_hash,
            InvalidArgument,
            "embedded reconstruction mesh does not match its recorded hash"
        );
        let n_el = header.recon_mesh.n_elements();
        let n_meas = header.n_patterns * header.n_electrodes;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let meta: SampleMeta = read_json(&mut r, &format!("sample {i} metadata"))?;
            let sigma_true = read_f64s(&mut r, n_el)?;
            let voltages = read_f64s(&mut r, n_meas)?;
            let iterates = (0..RECORDED_ITERATES)
                .map(|_| read_f64s(&mut r, n_el))
                .collect::<Result<Vec<_>>>()?;
            samples.push(EitSample {
                meta,
                sigma_true,
                voltages,
                iterates,
            });
        }
        ensure!(r.is_empty(), InvalidArgument, "{} trailing bytes in dataset file", r.len());
        Ok(Dataset { header, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::parse("dataset file", "unexpected end of file"))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_json<T: serde::de::DeserializeOwned>(r: &mut &[u8], what: &str) -> Result<T> {
    let len = u64::from_le_bytes(read_array(r)?) as usize;
    ensure!(len <= r.len(), InvalidArgument, "{what} length {len} exceeds the file");
    let (head, rest) = r.split_at(len);
    *r = rest;
    serde_json::from_slice(head).map_err(|e| Error::parse(what, e))
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(read_array(r)?))).collect()
}

/// Index sets for train/validation/test (or any number of parts).
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub parts: Vec<Vec<usize>>,
}

/// Seeded shuffle of `0..n` cut into parts of `round(f·n)` (last part takes
/// the remainder).
pub fn split_dataset(n: usize, fractions: &[f64], seed: u64) -> Result<Split> {
    ensure!(!fractions.is_empty(), InvalidArgument, "no split fractions");
    ensure!(
        fractions.iter().all(|f| *f >= 0.0),
        InvalidArgument,
        "split fractions must be non-negative"
    );
    let total: f64 = fractions.iter().sum();
    ensure!((total - 1.0).abs() < 1e-9, InvalidArgument, "split fractions sum to {total}, not 1");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let len = if k + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).round() as usize).min(n - start)
        };
        ensure!(len > 0, InvalidArgument, "split part {k} would be empty");
        parts.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(Split { parts })
}

/// Conductivity bounds implied by a dataset's reconstruction config.
pub fn dataset_bounds(header: &DatasetHeader) -> Result<Bounds> {
    header.config.recon.bounds()
}

use std::path::{Path, PathBuf};

use mesh_unet::datagen::DatasetConfig;
use mesh_unet::gnn::{TrainConfig, UNetArch};
use mesh_unet::inverse::ReconConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub mesh: MeshPaths,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub reconstruct: ReconConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub plot: PlotConfig,
    #[serde(default)]
    pub inputs: InputPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshPaths {
    /// Mesh the measurements are simulated on.
    pub fine: PathBuf,
    /// Mesh the reconstructions and the network live on.
    pub recon: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    pub bottom: usize,
    /// "f32" or "f64".
    pub precision: String,
    /// Clusters per pooling step as a fraction of the nodes one level up.
    pub cluster_fraction: f64,
    pub cluster_reps: usize,
    /// Defaults to the run seed.
    pub cluster_seed: Option<u64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let arch = UNetArch::default();
        NetworkConfig {
            widths: arch.widths,
            bottom: arch.bottom,
            precision: "f32".into(),
            cluster_fraction: 0.25,
            cluster_reps: mesh_unet::cluster::DEFAULT_REPS,
            cluster_seed: None,
        }
    }
}

impl NetworkConfig {
    pub fn arch(&self) -> UNetArch {
        UNetArch {
            widths: self.widths.clone(),
            bottom: self.bottom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Which reconstruction iterate (1-based) is the network input.
    pub input_iterate: usize,
    /// Train, validation and test fractions.
    pub split: Vec<f64>,
    #[serde(flatten)]
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            input_iterate: 2,
            split: vec![2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    /// Iterates stored in the dataset.
    Dataset,
    /// Iterates written by `reconstruct`.
    Traces,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub subset: Subset,
    pub source: InputSource,
    /// When set, each input is scaled so its median lands on this value
    /// before inference and the output is scaled back.
    pub rescale_background: Option<f64>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            subset: Subset::Test,
            source: InputSource::Dataset,
            rescale_background: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub area_weighted: bool,
    /// Adds the relative voltage error, one forward solve per row.
    pub voltage_error: bool,
    pub roi: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            area_weighted: false,
            voltage_error: true,
            roi: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Colour limits of the conductivity maps; data range of the truth when unset.
    pub range: Option<[f64; 2]>,
    pub size: usize,
    /// Number of samples drawn as maps.
    pub max_samples: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            range: None,
            size: 256,
            max_samples: 4,
        }
    }
}

/// Overrides for files normally read from the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.mesh.fine);
        fix(&mut self.mesh.recon);
        for p in [
            &mut self.out,
            &mut self.inputs.dataset,
            &mut self.inputs.checkpoint,
            &mut self.inputs.traces,
            &mut self.inputs.predictions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.data.recon.validate().map_err(CliError::from_config)?;
        self.reconstruct.validate().map_err(CliError::from_config)?;
        self.network.arch().validate().map_err(CliError::from_config)?;
        self.train.optimizer.validate().map_err(CliError::from_config)?;
        if !matches!(self.network.precision.as_str(), "f32" | "f64") {
            return bad(format!("unknown precision '{}' (available: f32, f64)", self.network.precision));
        }
        if !(self.network.cluster_fraction > 0.0 && self.network.cluster_fraction < 1.0) {
            return bad("network.cluster_fraction must lie in (0, 1)".into());
        }
        if self.network.cluster_reps == 0 {
            return bad("network.cluster_reps must be at least 1".into());
        }
        if !(1..=self.data.recon.max_iters).contains(&self.train.input_iterate) {
            return bad(format!(
                "train.input_iterate must lie in 1..={} (the stored iterates)",
                self.data.recon.max_iters
            ));
        }
        if self.train.split.len() != 3 || self.train.split.iter().any(|f| !(*f > 0.0)) {
            return bad("train.split needs three positive fractions".into());
        }
        if let Some(b) = self.postprocess.rescale_background {
            if !(b > 0.0 && b.is_finite()) {
                return bad("postprocess.rescale_background must be positive".into());
            }
        }
        if let Some([lo, hi]) = self.plot.range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad("plot.range must be an increasing pair".into());
            }
        }
        if self.plot.size < 32 {
            return bad("plot.size must be at least 32".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[mesh]\nfine = \"a.json\"\nrecon = \"b.json\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.optimizer.learning_rate, 5e-4);
        assert_eq!(cfg.train.optimizer.batch_size, 32);
        assert_eq!(cfg.train.optimizer.patience_epochs, 50);
        assert_eq!(cfg.reconstruct.method, "tv");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["bogus = 1\n", "[train]\nlearnig_rate = 1.0\n", "[data.phantom]\nfoo = 2\n"] {
            let text = format!("{MINIMAL}{extra}");
            assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))), "{extra}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for extra in [
            "[train]\ninput_iterate = 9\n",
            "[network]\nprecision = \"f16\"\n",
            "[reconstruct]\nlambda = -1.0\n",
            "[train]\nsplit = [1.0, 1.0]\n",
        ] {
            let text = format!("{MINIMAL}{extra}");
            assert!(RunConfig::from_toml(&text).is_err(), "{extra}");
        }
    }

    #[test]
    fn shipped_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/chest_desk.toml");
        let cfg = RunConfig::load(&path).unwrap();
        assert!(cfg.mesh.fine.exists() && cfg.mesh.recon.exists());
        assert_eq!(cfg.train.optimizer.normalization.scale, 10.0);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.mesh.fine, PathBuf::from("/base/a.json"));
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}

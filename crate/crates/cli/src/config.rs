//! TOML run configuration. Every key is optional; unknown keys are errors.
//! Output file names are resolved against `output_dir`.

use std::path::{Path, PathBuf};

use partpredict::dataset::QpSampler;
use partpredict::hfcn::{ArchSpec, TrainConfig};
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub seed: u64,
    /// Omit the generation timestamp from SVG output.
    pub fixed_metadata: bool,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            output_dir: PathBuf::from("out"),
            threads: 1,
            seed: DEFAULT_SEED,
            fixed_metadata: false,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// PGM source frames. Procedural frames are used when empty.
    pub frames: Vec<PathBuf>,
    pub procedural_frames: usize,
    pub width: usize,
    pub height: usize,
    /// `uniform` draws from `qp_range`, `choice` from `qp_set`, `each`
    /// labels every superblock at every value of `qp_set`.
    pub qp_sampler: String,
    pub qp_range: [u8; 2],
    pub qp_set: Vec<u8>,
    pub qp_per_superblock: usize,
    pub val_fraction: f64,
    pub train_file: PathBuf,
    pub val_file: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            frames: Vec::new(),
            procedural_frames: 8,
            width: 320,
            height: 192,
            qp_sampler: "choice".into(),
            qp_range: [8, 105],
            qp_set: vec![15, 31, 47, 70, 99],
            qp_per_superblock: 1,
            val_fraction: 0.15,
            train_file: "train.bin".into(),
            val_file: "val.bin".into(),
        }
    }
}

impl DatasetSection {
    pub fn sampler(&self) -> Result<QpSampler, CliError> {
        match self.qp_sampler.as_str() {
            "uniform" => Ok(QpSampler::Uniform {
                min: self.qp_range[0],
                max: self.qp_range[1],
                count: self.qp_per_superblock,
            }),
            "choice" => Ok(QpSampler::Choice {
                values: self.qp_set.clone(),
                count: self.qp_per_superblock,
            }),
            "each" => Ok(QpSampler::Each(self.qp_set.clone())),
            other => Err(CliError::Config(format!(
                "dataset.qp_sampler must be uniform, choice or each, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub trunk_widths: [usize; 8],
    pub branch_first_widths: [usize; 4],
    pub branch_mid_widths: [usize; 4],
    pub qp_norm_divisor: f64,
    pub weights: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchSpec::default();
        ModelSection {
            trunk_widths: a.trunk_widths,
            branch_first_widths: a.branch_first_widths,
            branch_mid_widths: a.branch_mid_widths,
            qp_norm_divisor: a.qp_norm_divisor,
            weights: "weights.hfcn".into(),
        }
    }
}

impl ModelSection {
    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            trunk_widths: self.trunk_widths,
            branch_first_widths: self.branch_first_widths,
            branch_mid_widths: self.branch_mid_widths,
            qp_norm_divisor: self.qp_norm_divisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub log_interval: usize,
    /// 0 disables validation during training.
    pub val_interval: usize,
    pub loss_csv: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 32,
            learning_rate: 2e-3,
            steps: 2000,
            log_interval: 50,
            val_interval: 500,
            loss_csv: "loss.csv".into(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            steps: self.steps,
            val_interval: self.val_interval,
            log_interval: self.log_interval,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub qp_set: Vec<u8>,
    pub repeats: usize,
    /// `hfcn` loads `model.weights`; `oracle` replays search labels.
    pub model: String,
    pub modes: Vec<String>,
    /// Directories of PGM frames, one sequence each. Procedural sequences
    /// are used when empty.
    pub sequence_dirs: Vec<PathBuf>,
    pub procedural_sequences: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Fan jobs out over the thread pool. Timings are only comparable
    /// when this is off.
    pub parallel: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            qp_set: vec![15, 31, 47, 70, 99],
            repeats: 3,
            model: "hfcn".into(),
            modes: vec!["hfcn".into(), "hfcn_rdo_fallback".into()],
            sequence_dirs: Vec::new(),
            procedural_sequences: 3,
            width: 512,
            height: 256,
            frames: 2,
            parallel: false,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn out(&self, name: &Path) -> PathBuf {
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.output_dir.join(name)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = Config::parse(
            "seed = 9\n[train]\nsteps = 40\n[bench]\nqp_set = [20, 40]\nmodel = \"oracle\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 40);
        assert_eq!(c.train.batch_size, TrainSection::default().batch_size);
        assert_eq!(c.bench.qp_set, vec![20, 40]);
        assert_eq!(c.bench.model, "oracle");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nstepz = 3", "[nope]\n"] {
            assert!(matches!(Config::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn sampler_names() {
        let mut d = DatasetSection::default();
        assert!(matches!(d.sampler().unwrap(), QpSampler::Choice { count: 1, .. }));
        d.qp_sampler = "uniform".into();
        assert_eq!(d.sampler().unwrap(), QpSampler::Uniform { min: 8, max: 105, count: 1 });
        d.qp_sampler = "gauss".into();
        assert!(d.sampler().is_err());
    }

    #[test]
    fn output_paths_resolve_under_output_dir() {
        let c = Config::default();
        assert_eq!(c.out(Path::new("a.csv")), PathBuf::from("out/a.csv"));
        assert_eq!(c.out(Path::new("/tmp/a.csv")), PathBuf::from("/tmp/a.csv"));
    }
}

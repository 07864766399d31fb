//! Key-value experiment files.
//!
//! One `key = value` per line; `#` starts a comment; lists are
//! comma-separated. Relative paths resolve against the file's directory.
//!
//! ```text
//! name = fig5
//! seed = 7
//! trials = 20
//! model.d_model = 64
//! model.ffn_width = 256
//! data.source = synthetic
//! sweep.batch_sizes = 1, 2, 4, 8
//! sweep.seq_lens = 32
//! sweep.readouts = raw, omp
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::DocumentSplit;
use crate::error::{ensure, Error, Result};
use crate::fedsim::{DefenseConfig, NoiseDist};
use crate::model::{Activation, ModelConfig, Task};
use crate::recovery::TokenSource;

/// Where user data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Uniform random non-reserved tokens.
    Random,
    /// Generated Zipf pseudo-text, `docs` documents.
    Synthetic { docs: usize },
    /// Text files or directories, one user per document.
    Files { paths: Vec<PathBuf>, split: DocumentSplit },
}

impl DataSource {
    pub fn label(&self) -> &'static str {
        match self {
            DataSource::Random => "random",
            DataSource::Synthetic { .. } => "synthetic",
            DataSource::Files { .. } => "files",
        }
    }
}

/// How the attacker reads bins out of the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Raw,
    /// Sparse step-fit denoising before differencing.
    Omp,
}

/// Attacker settings of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub measurement_seed: u64,
    /// `None` keeps the width-dependent default.
    pub d_prime: Option<usize>,
    pub gamma: f64,
    pub epsilon: f64,
    pub gelu_boost: f64,
    pub inspection_noise_std: f64,
    /// Random-token sequences used to estimate the measurement spread.
    pub stats_sequences: usize,
    pub token_source: TokenSource,
    pub certify_tol: f64,
    pub tied_cutoff: f64,
    /// Jump budget multiple for the `omp` readout.
    pub denoise_factor: f64,
    /// Masking probability for the masked task.
    pub mask_rate: f64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            measurement_seed: 0,
            d_prime: None,
            gamma: 1e8,
            epsilon: 1e-6,
            gelu_boost: 10.0,
            inspection_noise_std: 0.0,
            stats_sequences: 64,
            token_source: TokenSource::Auto,
            certify_tol: 1e-2,
            tied_cutoff: 1.5,
            denoise_factor: 1.5,
            mask_rate: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub batch_sizes: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub users: Vec<usize>,
    pub noise_scales: Vec<f64>,
    pub readouts: Vec<Readout>,
    pub dropout: Vec<bool>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1],
            seq_lens: vec![32],
            users: vec![1],
            noise_scales: vec![0.0],
            readouts: vec![Readout::Raw],
            dropout: vec![false],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    /// Independent rounds per sweep cell.
    pub trials: usize,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub attack: AttackSettings,
    /// Clip bound and noise law; the noise scale comes from the sweep.
    pub defense: DefenseConfig,
    pub data: DataSource,
    pub sweep: Sweep,
    pub out_dir: PathBuf,
    /// Write the crafted model, update and truth of each cell's first trial.
    pub save_artifacts: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            trials: 1,
            model: ModelConfig {
                dropout_rate: 0.1,
                ..ModelConfig::default()
            },
            model_seed: 0,
            attack: AttackSettings::default(),
            defense: DefenseConfig::default(),
            data: DataSource::Random,
            sweep: Sweep::default(),
            out_dir: PathBuf::from("out"),
            save_artifacts: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("bad boolean {v:?} for {key}")),
    }
}

fn parse_bools(key: &str, v: &str) -> std::result::Result<Vec<bool>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_bool(key, s))
        .collect()
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parses spec text; `origin` names it in errors and `base` anchors
    /// relative paths.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        let mut seen = BTreeMap::new();
        let mut data_source = "random".to_string();
        let mut paths: Vec<PathBuf> = Vec::new();
        let mut split = DocumentSplit::PerFile;
        let mut docs = 400usize;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let perr = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected `key = value`, got {line:?}")))?;
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(perr(format!("{key} already set on line {prev}")));
            }
            let m = &mut spec.model;
            let a = &mut spec.attack;
            let s = &mut spec.sweep;
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "name" => spec.name = value.to_string(),
                    "seed" => spec.seed = parse_value(key, value)?,
                    "trials" => spec.trials = parse_value(key, value)?,
                    "out_dir" => spec.out_dir = base.join(value),
                    "save_artifacts" => spec.save_artifacts = parse_bool(key, value)?,
                    "model.seed" => spec.model_seed = parse_value(key, value)?,
                    "model.vocab_size" => m.vocab_size = parse_value(key, value)?,
                    "model.d_model" => m.d_model = parse_value(key, value)?,
                    "model.n_layers" => m.n_layers = parse_value(key, value)?,
                    "model.n_heads" => m.n_heads = parse_value(key, value)?,
                    "model.ffn_width" => m.ffn_width = parse_value(key, value)?,
                    "model.max_positions" => m.max_positions = parse_value(key, value)?,
                    "model.activation" => {
                        m.activation = match value {
                            "relu" => Activation::Relu,
                            "gelu" => Activation::Gelu,
                            _ => return Err(format!("unknown activation {value:?}")),
                        }
                    }
                    "model.task" => {
                        m.task = match value {
                            "causal" => Task::Causal,
                            "masked" => Task::Masked,
                            _ => return Err(format!("unknown task {value:?}")),
                        }
                    }
                    "model.tied_embedding" => m.tied_embedding = parse_bool(key, value)?,
                    "model.decoder_bias" => m.decoder_bias = parse_bool(key, value)?,
                    "model.dropout_rate" => m.dropout_rate = parse_value(key, value)?,
                    "attack.measurement_seed" => a.measurement_seed = parse_value(key, value)?,
                    "attack.d_prime" => a.d_prime = Some(parse_value(key, value)?),
                    "attack.gamma" => a.gamma = parse_value(key, value)?,
                    "attack.epsilon" => a.epsilon = parse_value(key, value)?,
                    "attack.gelu_boost" => a.gelu_boost = parse_value(key, value)?,
                    "attack.inspection_noise_std" => a.inspection_noise_std = parse_value(key, value)?,
                    "attack.stats_sequences" => a.stats_sequences = parse_value(key, value)?,
                    "attack.token_source" => {
                        a.token_source = match value {
                            "auto" => TokenSource::Auto,
                            "bow" | "bag_of_words" => TokenSource::BagOfWords,
                            "full_vocab" => TokenSource::FullVocab,
                            _ => return Err(format!("unknown token source {value:?}")),
                        }
                    }
                    "attack.certify_tol" => a.certify_tol = parse_value(key, value)?,
                    "attack.tied_cutoff" => a.tied_cutoff = parse_value(key, value)?,
                    "attack.denoise_factor" => a.denoise_factor = parse_value(key, value)?,
                    "attack.mask_rate" => a.mask_rate = parse_value(key, value)?,
                    "defense.clip_norm" => {
                        spec.defense.clip_norm = match value {
                            "none" => None,
                            v => Some(parse_value(key, v)?),
                        }
                    }
                    "defense.noise_dist" => {
                        spec.defense.noise_dist = match value {
                            "laplace" => NoiseDist::Laplace,
                            "gaussian" => NoiseDist::Gaussian,
                            _ => return Err(format!("unknown noise distribution {value:?}")),
                        }
                    }
                    "data.source" => data_source = value.to_string(),
                    "data.paths" => paths = value.split(',').map(str::trim).map(|p| base.join(p)).collect(),
                    "data.split" => {
                        split = match value {
                            "file" => DocumentSplit::PerFile,
                            "blank_line" => DocumentSplit::BlankLine,
                            _ => return Err(format!("unknown split {value:?}")),
                        }
                    }
                    "data.synthetic_docs" => docs = parse_value(key, value)?,
                    "sweep.batch_sizes" => s.batch_sizes = parse_list(key, value)?,
                    "sweep.seq_lens" => s.seq_lens = parse_list(key, value)?,
                    "sweep.users" => s.users = parse_list(key, value)?,
                    "sweep.noise_scales" => s.noise_scales = parse_list(key, value)?,
                    "sweep.dropout" => s.dropout = parse_bools(key, value)?,
                    "sweep.readouts" => {
                        s.readouts = value
                            .split(',')
                            .map(str::trim)
                            .filter(|x| !x.is_empty())
                            .map(|x| match x {
                                "raw" => Ok(Readout::Raw),
                                "omp" => Ok(Readout::Omp),
                                _ => Err(format!("unknown readout {x:?}")),
                            })
                            .collect::<std::result::Result<_, _>>()?
                    }
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(perr)?;
        }
        spec.data = match data_source.as_str() {
            "random" => DataSource::Random,
            "synthetic" => DataSource::Synthetic { docs },
            "files" => DataSource::Files { paths, split },
            other => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: seen.get("data.source").copied().unwrap_or(0),
                    msg: format!("unknown data source {other:?}"),
                })
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.sweep;
        ensure!(
            !s.batch_sizes.is_empty()
                && !s.seq_lens.is_empty()
                && !s.users.is_empty()
                && !s.noise_scales.is_empty()
                && !s.readouts.is_empty()
                && !s.dropout.is_empty(),
            InvalidArgument,
            "every sweep axis needs at least one value"
        );
        ensure!(
            s.batch_sizes.iter().chain(&s.seq_lens).chain(&s.users).all(|&x| x >= 1),
            InvalidArgument,
            "batch sizes, sequence lengths and user counts must be >= 1"
        );
        ensure!(
            s.seq_lens.iter().all(|&l| l <= self.model.max_positions),
            InvalidArgument,
            "a sequence length exceeds model.max_positions {}",
            self.model.max_positions
        );
        for &b in &s.noise_scales {
            DefenseConfig {
                noise_scale: b,
                ..self.defense
            }
            .validate()?;
        }
        ensure!(self.trials >= 1, InvalidArgument, "trials must be >= 1");
        ensure!(
            self.attack.stats_sequences >= 1,
            InvalidArgument,
            "attack.stats_sequences must be >= 1"
        );
        ensure!(
            (0.0..=1.0).contains(&self.attack.mask_rate),
            InvalidArgument,
            "attack.mask_rate outside [0, 1]"
        );
        ensure!(
            !s.dropout.contains(&true) || self.model.dropout_rate > 0.0,
            InvalidArgument,
            "dropout sweep needs model.dropout_rate > 0"
        );
        if let DataSource::Files { paths, .. } = &self.data {
            ensure!(
                !paths.is_empty(),
                InvalidArgument,
                "data.source = files needs data.paths"
            );
            for p in paths {
                ensure!(p.exists(), InvalidArgument, "data path {} does not exist", p.display());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(t: &str) -> Result<ExperimentSpec> {
        ExperimentSpec::parse(t, "test", Path::new("/base"))
    }

    #[test]
    fn defaults_and_overrides() {
        let s = parse(
            "# comment\nname = fig5\nseed = 3\ntrials=4\nmodel.activation = gelu\nsweep.batch_sizes = 1, 2,4 ,8\n\
             sweep.readouts = raw, omp\ndefense.clip_norm = 1\nsweep.noise_scales = 0, 1e-4\nout_dir = res\n",
        )
        .unwrap();
        assert_eq!(s.name, "fig5");
        assert_eq!(s.seed, 3);
        assert_eq!(s.trials, 4);
        assert_eq!(s.model.activation, Activation::Gelu);
        assert_eq!(s.sweep.batch_sizes, vec![1, 2, 4, 8]);
        assert_eq!(s.sweep.readouts, vec![Readout::Raw, Readout::Omp]);
        assert_eq!(s.defense.clip_norm, Some(1.0));
        assert_eq!(s.sweep.noise_scales, vec![0.0, 1e-4]);
        assert_eq!(s.out_dir, PathBuf::from("/base/res"));
        assert_eq!(s.data, DataSource::Random);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("seed = 1\nbogus = 2\n", 2),
            ("seed = x\n", 1),
            ("seed = 1\nseed = 2\n", 2),
            ("just words\n", 1),
            ("model.task = other\n", 1),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(parse("sweep.users = \n").is_err());
        assert!(parse("sweep.seq_lens = 1000\n").is_err());
        assert!(parse("defense.clip_norm = 0\n").is_err());
        assert!(parse("sweep.noise_scales = -1\n").is_err());
        assert!(parse("data.source = files\ndata.paths = /definitely/not/here\n").is_err());
        assert!(parse("model.dropout_rate = 0\nsweep.dropout = true\n").is_err());
    }

    #[test]
    fn file_source_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "hello world").unwrap();
        let spec_path = dir.path().join("x.spec");
        std::fs::write(
            &spec_path,
            "data.source = files\ndata.paths = a.txt\ndata.split = blank_line\n",
        )
        .unwrap();
        let s = ExperimentSpec::load(&spec_path).unwrap();
        assert_eq!(
            s.data,
            DataSource::Files {
                paths: vec![dir.path().join("a.txt")],
                split: DocumentSplit::BlankLine
            }
        );
    }
}

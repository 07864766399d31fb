//! Experiment runner: metrics, sweep orchestration, saved attack bundles
//! and report emission.
//!
//! A run writes two files into the output directory:
//!
//! - `<name>.records.jsonl`: one [`MetricsRow`] per sweep cell as JSON, in
//!   sweep order. Byte-identical across reruns with the same spec.
//! - `<name>.table.txt`: the same rows as a fixed-width table, with wall
//!   times.
//!
//! [`write_csv`] flattens records into plot-ready CSV.

mod metrics;
mod run;
mod spec;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::malice::{bin_layout, default_rank_tolerance, numerical_rank, MaliciousConfig};
use crate::model::{load_archive, save_archive, GradientUpdate, ModelParams};
use crate::recovery::{run_attack, AttackConfig, RecoveryResult};

pub use metrics::{
    bleu, most_vulnerable_accuracy, per_sequence_accuracy, resort, rouge_l, score, token_accuracy, total_accuracy,
    Scores, BLEU_EPSILON,
};
pub use run::{
    output_dir, records_jsonl, render_table, run_cells, run_experiment, run_experiment_in, Attacker, ExperimentReport,
    MetricsRow, Setting, OUT_DIR_ENV,
};
pub use spec::{AttackSettings, DataSource, ExperimentSpec, Readout, Sweep};

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    config: MaliciousConfig,
    n_sequences: usize,
    seq_len: usize,
    truth: Option<Vec<Vec<usize>>>,
}

/// Everything the attacker needs offline: the crafted model, its constants,
/// one received update and (for scoring) the true sequences.
///
/// On disk, a directory with `crafted.{manifest,bin}`, `update.{manifest,bin}`
/// and `attack.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackBundle {
    pub crafted: ModelParams<f64>,
    pub config: MaliciousConfig,
    pub update: GradientUpdate<f64>,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub truth: Option<Vec<Vec<usize>>>,
}

impl AttackBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_archive(&dir.join("crafted"), &self.crafted, None)?;
        save_archive(&dir.join("update"), &self.update.grads, Some(self.update.token_count))?;
        let meta = BundleMeta {
            config: self.config.clone(),
            n_sequences: self.n_sequences,
            seq_len: self.seq_len,
            truth: self.truth.clone(),
        };
        let p = dir.join("attack.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let crafted = load_archive::<f64>(&dir.join("crafted"))?.params;
        let u = load_archive::<f64>(&dir.join("update"))?;
        let p = dir.join("attack.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            crafted,
            config: meta.config,
            update: GradientUpdate {
                grads: u.params,
                token_count: u.token_count.unwrap_or(0),
            },
            n_sequences: meta.n_sequences,
            seq_len: meta.seq_len,
            truth: meta.truth,
        })
    }

    /// Runs the readout with default attacker settings.
    pub fn attack(&self, denoise_factor: Option<f64>) -> Result<RecoveryResult> {
        let acfg = AttackConfig {
            denoise_factor,
            ..AttackConfig::new(self.n_sequences, self.seq_len)
        };
        run_attack(&self.update, &self.crafted, &self.config, &acfg)
    }
}

/// Crafted-parameter diagnostics: attacker constants, bin boundaries and
/// the numerical rank of every block's first FFN layer.
pub fn inspect(crafted: &ModelParams<f64>, cfg: &MaliciousConfig) -> Result<String> {
    let model = &crafted.config;
    let layout = bin_layout(cfg, model)?;
    let mut t = String::new();
    let _ = writeln!(
        t,
        "model: {} layers, d_model {}, ffn_width {}, vocab {}, {:?}, {:?}, tied {}",
        model.n_layers,
        model.d_model,
        model.ffn_width,
        model.vocab_size,
        model.activation,
        model.task,
        model.tied_embedding
    );
    let _ = writeln!(
        t,
        "attack: d' {}, gamma {:e}, epsilon {:e}, measurement seed {}, inspection noise {}",
        cfg.d_prime, cfg.gamma, cfg.epsilon, cfg.measurement_seed, cfg.inspection_noise_std
    );
    let _ = writeln!(
        t,
        "measurement: mean {:.6}, std {:.6} over {} samples",
        cfg.stats.mean, cfg.stats.std, cfg.stats.sample_count
    );
    let b = &layout.boundaries;
    let min_gap = b.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    let _ = writeln!(
        t,
        "bins: {} boundaries from {:.6} down to {:.6}, smallest gap {:.3e}",
        b.len(),
        b[0],
        b[b.len() - 1],
        min_gap
    );
    for l in 0..layout.n_blocks() {
        let bb = layout.block_boundaries(l);
        let w1 = &crafted.blocks[l].w1;
        let rank = numerical_rank(w1, default_rank_tolerance(w1));
        let _ = writeln!(
            t,
            "block {l}: bins [{:.6}, {:.6}], ffn-1 rank {rank} of {}",
            bb[0],
            bb[bb.len() - 1],
            w1.rows().min(w1.cols())
        );
    }
    Ok(t)
}

/// Reads a records file written by [`run_experiment`].
pub fn read_records(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Flattens rows into CSV, one line per cell.
pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "batch_size",
        "seq_len",
        "users",
        "model",
        "dataset",
        "clip_norm",
        "noise_scale",
        "noise_dist",
        "readout",
        "dropout",
        "trials",
        "completed_trials",
        "total_accuracy",
        "token_accuracy",
        "bleu",
        "rouge_l",
        "most_vulnerable_accuracy",
        "certified_fraction",
        "certified_slots",
        "certified_correct",
        "breached_embeddings",
        "collisions",
        "error",
    ])
    .map_err(err)?;
    for r in rows {
        let s = &r.setting;
        w.write_record([
            s.batch_size.to_string(),
            s.seq_len.to_string(),
            s.users.to_string(),
            s.model.clone(),
            s.dataset.clone(),
            s.clip_norm.map(|c| c.to_string()).unwrap_or_default(),
            s.noise_scale.to_string(),
            s.noise_dist.clone(),
            format!("{:?}", s.readout).to_lowercase(),
            s.dropout.to_string(),
            r.trials.to_string(),
            r.completed_trials.to_string(),
            r.total_accuracy.to_string(),
            r.token_accuracy.to_string(),
            r.bleu.to_string(),
            r.rouge_l.to_string(),
            r.most_vulnerable_accuracy.to_string(),
            r.certified_fraction.to_string(),
            r.certified_slots.to_string(),
            r.certified_correct.to_string(),
            r.breached_embeddings.to_string(),
            r.collisions.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn records_round_trip_to_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::default();
        spec.model = ModelConfig {
            vocab_size: 80,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 48,
            max_positions: 16,
            ..ModelConfig::default()
        };
        spec.sweep.seq_lens = vec![6];
        spec.sweep.batch_sizes = vec![1, 2];
        let rep = run_experiment_in(&spec, dir.path()).unwrap();
        let back = read_records(&rep.records_path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&rep.rows) {
            assert_eq!(a.total_accuracy, b.total_accuracy);
            assert_eq!(a.setting, b.setting);
        }
        let mut buf = Vec::new();
        write_csv(&back, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("batch_size,seq_len,users"));
    }

    #[test]
    fn inspect_reports_every_block() {
        let mut spec = ExperimentSpec::default();
        spec.model = ModelConfig {
            vocab_size: 80,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 48,
            max_positions: 16,
            ..ModelConfig::default()
        };
        let mut att = Attacker::new(&spec).unwrap();
        let (p, cfg) = att.crafted(&spec, 8).unwrap().clone();
        let text = inspect(&p, &cfg).unwrap();
        assert!(text.contains("block 0:") && text.contains("block 1:"));
        // every crafted row is a multiple of the measurement vector
        assert!(text.contains("ffn-1 rank 1 of 32"), "{text}");
    }
}

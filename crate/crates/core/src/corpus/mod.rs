//! Text ingestion, word-level tokenization, per-user partitioning, batch
//! assembly and measurement-distribution estimation.

mod synthetic;
mod vocab;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelParams, TokenSequence};
use crate::numkernel::{dot, Rng};

pub use synthetic::SyntheticCorpus;
pub use vocab::{tokenize, Vocabulary, MASK, PAD, RESERVED, UNK};

/// One source document; users are partitioned by document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub label: String,
    pub text: String,
}

/// How a text file is cut into documents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DocumentSplit {
    #[default]
    PerFile,
    BlankLine,
}

/// Reads UTF-8 documents from files, or from every file in a directory
/// (sorted by name).
pub fn load_documents(paths: &[PathBuf], split: DocumentSplit) -> Result<Vec<Document>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    let mut docs = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let label = f.display().to_string();
        match split {
            DocumentSplit::PerFile => docs.push(Document { label, text }),
            DocumentSplit::BlankLine => {
                let mut current = String::new();
                let mut n = 0;
                for line in text.lines().chain(std::iter::once("")) {
                    if line.trim().is_empty() {
                        if !current.trim().is_empty() {
                            docs.push(Document {
                                label: format!("{label}#{n}"),
                                text: std::mem::take(&mut current),
                            });
                            n += 1;
                        }
                        current.clear();
                    } else {
                        current.push_str(line);
                        current.push('\n');
                    }
                }
            }
        }
    }
    ensure!(!docs.is_empty(), InvalidArgument, "no documents found in {paths:?}");
    Ok(docs)
}

/// One user's private token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserShard {
    pub user_id: usize,
    pub tokens: Vec<usize>,
    pub source: String,
}

impl UserShard {
    /// Whether the user owns at least `batch_size * seq_len` tokens.
    pub fn has_enough(&self, batch_size: usize, seq_len: usize) -> bool {
        self.tokens.len() >= batch_size * seq_len
    }
}

/// One shard per document, user ids in document order.
pub fn shards_from_documents(docs: &[Document], vocab: &Vocabulary) -> Vec<UserShard> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| UserShard {
            user_id: i,
            tokens: vocab.encode(&d.text),
            source: d.label.clone(),
        })
        .collect()
}

/// A user's local data for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserBatch {
    pub user_id: usize,
    pub sequences: Vec<TokenSequence>,
}

/// The first `user_limit` users owning at least `B * S` tokens, each cut into
/// `B` consecutive sequences of exactly `S` tokens from the start of the
/// stream. Users with too little data are skipped.
pub fn make_user_batches(
    shards: &[UserShard],
    batch_size: usize,
    seq_len: usize,
    user_limit: usize,
) -> Result<Vec<UserBatch>> {
    ensure!(batch_size >= 1 && seq_len >= 1, InvalidArgument, "B and S must be >= 1");
    let out: Vec<UserBatch> = shards
        .iter()
        .filter(|s| s.has_enough(batch_size, seq_len))
        .take(user_limit)
        .map(|s| UserBatch {
            user_id: s.user_id,
            sequences: s.tokens[..batch_size * seq_len]
                .chunks(seq_len)
                .map(|c| TokenSequence(c.to_vec()))
                .collect(),
        })
        .collect();
    ensure!(
        !out.is_empty(),
        InvalidArgument,
        "no user owns {} tokens (B={batch_size}, S={seq_len})",
        batch_size * seq_len
    );
    Ok(out)
}

/// `count` batches of `B` sequences of `S` uniform non-reserved token ids.
pub fn random_token_batches(
    vocab_size: usize,
    count: usize,
    batch_size: usize,
    seq_len: usize,
    rng: &mut Rng,
) -> Vec<Vec<TokenSequence>> {
    assert!(vocab_size > RESERVED, "vocabulary has no ordinary tokens");
    (0..count)
        .map(|_| {
            (0..batch_size)
                .map(|_| {
                    TokenSequence(
                        (0..seq_len)
                            .map(|_| RESERVED + rng.below(vocab_size - RESERVED))
                            .collect(),
                    )
                })
                .collect()
        })
        .collect()
}

/// Mean and spread of the measurement `<m, u>` over FFN inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementStats {
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

/// Mean and standard deviation of `<m, u>` over every first-block FFN input
/// `u` obtained by running the batches through `params`.
pub fn estimate_measurement_stats(
    m: &[f64],
    params: &ModelParams<f64>,
    batches: &[Vec<TokenSequence>],
) -> Result<MeasurementStats> {
    ensure!(
        m.len() == params.config.d_model,
        Shape,
        "measurement vector has length {}, model width is {}",
        m.len(),
        params.config.d_model
    );
    let mut samples = Vec::new();
    for seq in batches.iter().flatten() {
        let tr = params.trace(seq.ids(), None)?;
        let u = &tr
            .blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("model has no blocks".into()))?
            .ffn_input;
        for r in 0..u.rows() {
            samples.push(dot(m, u.row(r)));
        }
    }
    ensure!(
        samples.len() >= 100,
        Degenerate,
        "only {} measurement samples, need at least 100",
        samples.len()
    );
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    ensure!(std.is_finite() && std > 0.0, Degenerate, "measurement spread is {std}");
    Ok(MeasurementStats {
        mean,
        std,
        sample_count: samples.len(),
    })
}

/// Writes a vocabulary export next to other run artifacts.
pub fn export_vocab(vocab: &Vocabulary, dir: &Path) -> Result<PathBuf> {
    let p = dir.join("vocab.txt");
    vocab.export(&p)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn shard(id: usize, n: usize) -> UserShard {
        UserShard {
            user_id: id,
            tokens: (0..n).map(|i| RESERVED + i % 7).collect(),
            source: format!("u{id}"),
        }
    }

    #[test]
    fn exact_fit_gives_two_sequences() {
        let out = make_user_batches(&[shard(0, 64)], 2, 32, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sequences.len(), 2);
        assert!(out[0].sequences.iter().all(|s| s.len() == 32));
    }

    #[test]
    fn short_user_skipped() {
        assert!(make_user_batches(&[shard(0, 63)], 2, 32, 10).is_err());
        let out = make_user_batches(&[shard(0, 63), shard(1, 70)], 2, 32, 10).unwrap();
        assert_eq!(out[0].user_id, 1);
    }

    #[test]
    fn user_limit_and_rerun_stability() {
        let shards: Vec<_> = (0..100).map(|i| shard(i, 20 + i)).collect();
        let a = make_user_batches(&shards, 1, 32, 5).unwrap();
        let b = make_user_batches(&shards, 1, 32, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|u| u.user_id).collect::<Vec<_>>(),
            vec![12, 13, 14, 15, 16]
        );
        assert!(a.iter().flat_map(|u| &u.sequences).all(|s| !s.ids().contains(&PAD)));
    }

    #[test]
    fn random_batches_reproducible_and_reserved_free() {
        let a = random_token_batches(50, 4, 2, 16, &mut Rng::new(3));
        let b = random_token_batches(50, 4, 2, 16, &mut Rng::new(3));
        assert_eq!(a, b);
        assert!(a
            .iter()
            .flatten()
            .flat_map(|s| s.ids())
            .all(|&t| (RESERVED..50).contains(&t)));
    }

    #[test]
    fn random_batch_histogram_is_uniform() {
        let v = 23;
        let batches = random_token_batches(v, 200, 4, 50, &mut Rng::new(8));
        let mut counts = vec![0usize; v];
        for t in batches.iter().flatten().flat_map(|s| s.ids()) {
            counts[*t] += 1;
        }
        let n: usize = counts.iter().sum();
        let k = (v - RESERVED) as f64;
        let expect = n as f64 / k;
        let sd = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for &c in &counts[RESERVED..] {
            assert!((c as f64 - expect).abs() <= 3.0 * sd, "{c} vs {expect}");
        }
    }

    fn stats_model() -> ModelParams<f64> {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 8,
            max_positions: 16,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn zero_measurement_is_degenerate() {
        let p = stats_model();
        let batches = random_token_batches(40, 10, 1, 16, &mut Rng::new(1));
        assert!(matches!(
            estimate_measurement_stats(&[0.0; 16], &p, &batches),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let p = stats_model();
        let batches = random_token_batches(40, 6, 1, 16, &mut Rng::new(1));
        let m: Vec<f64> = crate::numkernel::gaussian_vector(&mut Rng::new(2), 16);
        assert!(estimate_measurement_stats(&m, &p, &batches).is_err());
    }

    #[test]
    fn doubling_measurement_doubles_stats() {
        let p = stats_model();
        let batches = random_token_batches(40, 10, 1, 16, &mut Rng::new(1));
        let m: Vec<f64> = crate::numkernel::gaussian_vector(&mut Rng::new(2), 16);
        let m2: Vec<f64> = m.iter().map(|x| 2.0 * x).collect();
        let a = estimate_measurement_stats(&m, &p, &batches).unwrap();
        let b = estimate_measurement_stats(&m2, &p, &batches).unwrap();
        assert!((b.mean - 2.0 * a.mean).abs() < 1e-12 * a.std);
        assert!((b.std - 2.0 * a.std).abs() < 1e-12 * a.std);
    }

    #[test]
    fn blank_line_documents() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "first doc\nline two\n\n\nsecond doc\n\nthird").unwrap();
        let docs = load_documents(&[f.clone()], DocumentSplit::BlankLine).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[2].text.trim(), "third");
        assert_eq!(
            load_documents(&[dir.path().to_path_buf()], DocumentSplit::PerFile)
                .unwrap()
                .len(),
            1
        );
    }
}

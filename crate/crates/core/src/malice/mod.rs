//! Construction of the malicious parameter vector: disable mixing, install
//! measurement bins in every FFN, and write sequence identity through the
//! first attention layer.
//!
//! Dimension roles in the residual stream (`d = d_model`, `d' = d_prime`):
//!
//! ```text
//! [0, d')        sequence identity, zero in both embedding tables
//! [d', d - 1)    free dims carrying token and position content
//! d - 1          gradient carrier, zero in both embedding tables
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{MeasurementStats, PAD};
use crate::error::{ensure, Result};
use crate::model::{Activation, ModelConfig, ModelParams, Task, TokenSequence};
use crate::numkernel::{gaussian_vector, inverse_normal_cdf, Matrix, Rng};

/// Every constant chosen by the attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaliciousConfig {
    pub measurement_seed: u64,
    pub d_prime: usize,
    /// Softmax skew applied to the first positional embedding in block 0.
    pub gamma: f64,
    /// Scale of the FFN output routed into the gradient carrier.
    pub epsilon: f64,
    pub stats: MeasurementStats,
    /// Total number of bins, equal to the FFN rows summed over blocks.
    pub bin_count: usize,
    /// Measurement magnification for GELU models.
    pub gelu_boost: f64,
    /// Value weight of the uniform last-block attention in masked models.
    pub mlm_last_attention_weight: f64,
    /// Std of i.i.d. noise added to every FFN first-layer row.
    pub inspection_noise_std: f64,
    /// Vocabulary row whose logit reads the carrier in untied decoders.
    pub sink_token: usize,
}

impl MaliciousConfig {
    /// Defaults for `model`: `d' = 6` up to width 128 and 32 beyond,
    /// `gamma = 1e8`, `epsilon = 1e-6`, one bin per FFN row.
    pub fn for_model(model: &ModelConfig, stats: MeasurementStats) -> Self {
        Self {
            measurement_seed: 0,
            d_prime: if model.d_model <= 128 { 6 } else { 32 },
            gamma: 1e8,
            epsilon: 1e-6,
            stats,
            bin_count: model.total_ffn_rows(),
            gelu_boost: 10.0,
            mlm_last_attention_weight: 10.0,
            inspection_noise_std: 0.0,
            sink_token: PAD,
        }
    }

    pub fn carrier(&self, model: &ModelConfig) -> usize {
        model.d_model - 1
    }

    /// Scale applied to the measurement vector and bin boundaries.
    pub fn boost(&self, model: &ModelConfig) -> f64 {
        match model.activation {
            Activation::Gelu => self.gelu_boost,
            Activation::Relu => 1.0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        let d = model.d_model;
        let dp = self.d_prime;
        ensure!(dp > 0 && dp < d, InvalidArgument, "d_prime {dp} outside (0, {d})");
        ensure!(
            2 * dp < d - 1,
            InvalidArgument,
            "d_prime {dp} too large for d_model {d}: identity source dims [{dp}, {}) must precede the carrier",
            2 * dp
        );
        ensure!(self.gamma > 0.0, InvalidArgument, "gamma must be positive");
        ensure!(self.epsilon > 0.0, InvalidArgument, "epsilon must be positive");
        ensure!(self.gelu_boost > 0.0, InvalidArgument, "gelu_boost must be positive");
        ensure!(
            self.inspection_noise_std >= 0.0,
            InvalidArgument,
            "inspection_noise_std must be >= 0"
        );
        ensure!(
            self.bin_count == model.total_ffn_rows(),
            Shape,
            "bin_count {} differs from the model's {} FFN rows",
            self.bin_count,
            model.total_ffn_rows()
        );
        ensure!(
            self.sink_token < model.vocab_size,
            InvalidArgument,
            "sink token outside vocabulary"
        );
        ensure!(
            self.stats.std > 0.0 && self.stats.std.is_finite() && self.stats.mean.is_finite(),
            Degenerate,
            "measurement stats must have finite mean and positive std"
        );
        let dk = model.head_dim();
        for h in 0..dp.div_ceil(dk) {
            let free = (h * dk..(h + 1) * dk).filter(|&c| c >= dp && c < d - 1).count();
            ensure!(
                free > 0,
                InvalidArgument,
                "head {h} carries identity values but has no free dims to attend with"
            );
        }
        Ok(())
    }
}

/// Bias thresholds of every FFN row, in global bin order `block * k + row`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinLayout {
    /// `c_l`, strictly decreasing in `l`.
    pub boundaries: Vec<f64>,
    pub rows_per_block: usize,
}

impl BinLayout {
    pub fn bin_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.boundaries.len() / self.rows_per_block
    }

    pub fn bin(&self, block: usize, row: usize) -> usize {
        block * self.rows_per_block + row
    }

    pub fn block_boundaries(&self, block: usize) -> &[f64] {
        &self.boundaries[block * self.rows_per_block..(block + 1) * self.rows_per_block]
    }

    /// Same boundaries split into blocks of `k` rows.
    pub fn with_rows_per_block(mut self, k: usize) -> Result<Self> {
        ensure!(
            k >= 1 && self.boundaries.len().is_multiple_of(k),
            Shape,
            "{} bins do not split into blocks of {k}",
            self.boundaries.len()
        );
        self.rows_per_block = k;
        Ok(self)
    }
}

/// Thresholds `c_l = -(mu + sigma * Phi^-1((l + 1) / (M + 1)))`, splitting
/// `N(mu, sigma^2)` into `M + 1` regions of equal mass.
pub fn compute_bias_bins(stats: &MeasurementStats, m: usize) -> Result<BinLayout> {
    ensure!(m >= 2, InvalidArgument, "need at least 2 bins, got {m}");
    ensure!(
        stats.std > 0.0 && stats.std.is_finite(),
        Degenerate,
        "measurement std {} is not positive",
        stats.std
    );
    let boundaries = (0..m)
        .map(|l| inverse_normal_cdf((l + 1) as f64 / (m + 1) as f64).map(|z| -(stats.mean + stats.std * z)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(BinLayout {
        boundaries,
        rows_per_block: m,
    })
}

/// Measurement vector `m ~ N(0, I)` from the configured seed, zero on the
/// identity dims and the carrier. Not boosted.
pub fn measurement_vector(cfg: &MaliciousConfig, model: &ModelConfig) -> Vec<f64> {
    let d = model.d_model;
    let mut m: Vec<f64> = gaussian_vector(&mut Rng::new(cfg.measurement_seed), d);
    m[..cfg.d_prime].iter_mut().for_each(|x| *x = 0.0);
    m[d - 1] = 0.0;
    m
}

/// The bin layout the crafted model uses, split per block.
pub fn bin_layout(cfg: &MaliciousConfig, model: &ModelConfig) -> Result<BinLayout> {
    compute_bias_bins(&cfg.stats, cfg.bin_count)?.with_rows_per_block(model.ffn_width)
}

/// Relative size below which an orthogonalisation step is skipped, keeping
/// crafting idempotent to the bit.
const SKIP_REL: f64 = 1e-12;

fn orthogonalise_embeddings(p: &mut ModelParams<f64>, dp: usize) {
    let cfg = p.config.clone();
    let d = cfg.d_model;
    let dk = cfg.head_dim();
    for h in 0..cfg.n_heads {
        let free: Vec<usize> = (h * dk..(h + 1) * dk).filter(|&c| c >= dp && c < d - 1).collect();
        if free.is_empty() {
            continue;
        }
        // centre p0 on this head's free dims so LN mean shifts cancel in scores
        let p0 = p.positional_embedding.row_mut(0);
        let mean = free.iter().map(|&c| p0[c]).sum::<f64>() / free.len() as f64;
        let scale = free.iter().map(|&c| p0[c].abs()).fold(0.0, f64::max);
        if mean.abs() > SKIP_REL * scale {
            free.iter().for_each(|&c| p0[c] -= mean);
        }
        let dir: Vec<f64> = free.iter().map(|&c| p0[c]).collect();
        let nn: f64 = dir.iter().map(|x| x * x).sum();
        if nn == 0.0 {
            continue;
        }
        let project = |row: &mut [f64]| {
            let dotp: f64 = free.iter().zip(&dir).map(|(&c, &v)| row[c] * v).sum();
            let rn = free.iter().map(|&c| row[c] * row[c]).sum::<f64>().sqrt();
            if dotp.abs() > SKIP_REL * rn * nn.sqrt() {
                let coef = dotp / nn;
                free.iter().zip(&dir).for_each(|(&c, &v)| row[c] -= coef * v);
            }
        };
        for r in 1..cfg.max_positions {
            project(p.positional_embedding.row_mut(r));
        }
        for t in 0..cfg.vocab_size {
            project(p.token_embedding.row_mut(t));
        }
    }
}

/// Gain of the identity copy in block 0. LN1 hands the value projection a
/// normalised row, so the copied slice is brought back to the RMS of the
/// embedding entries on the free dims; the identity then sits in the residual
/// stream at the scale of the token and position content instead of
/// dominating the LN2 statistics of every position.
fn identity_gain(p: &ModelParams<f64>, dp: usize) -> f64 {
    let d = p.config.d_model;
    let mut sum = 0.0;
    let mut count = 0usize;
    for table in [&p.token_embedding, &p.positional_embedding] {
        for r in 0..table.rows() {
            for &x in &table.row(r)[dp..d - 1] {
                sum += x * x;
                count += 1;
            }
        }
    }
    let rms = (sum / count as f64).sqrt();
    if rms > 0.0 {
        rms
    } else {
        1.0
    }
}

/// Overwrites `params` with the malicious construction described by `cfg`.
pub fn craft_malicious_params(params: &ModelParams<f64>, cfg: &MaliciousConfig) -> Result<ModelParams<f64>> {
    let model = params.config.clone();
    cfg.validate(&model)?;
    let mut p = params.clone();
    let d = model.d_model;
    let dp = cfg.d_prime;
    let carrier = cfg.carrier(&model);
    let k = model.ffn_width;
    let beta = cfg.boost(&model);

    // embeddings: clear identity dims and carrier, then isolate p0
    for table in [&mut p.token_embedding, &mut p.positional_embedding] {
        for r in 0..table.rows() {
            let row = table.row_mut(r);
            row[..dp].iter_mut().for_each(|x| *x = 0.0);
            row[carrier] = 0.0;
        }
    }
    orthogonalise_embeddings(&mut p, dp);
    let p0: Vec<f64> = p.positional_embedding.row(0).to_vec();
    let identity_gain = identity_gain(&p, dp);

    let layout = bin_layout(cfg, &model)?;
    let m = measurement_vector(cfg, &model);
    let mut noise_rng = Rng::new(cfg.measurement_seed).fork(0x6e_6f69_7365);

    let n_layers = model.n_layers;
    for (l, b) in p.blocks.iter_mut().enumerate() {
        b.ln1_scale.iter_mut().for_each(|x| *x = 1.0);
        b.ln1_shift.iter_mut().for_each(|x| *x = 0.0);
        b.ln2_scale.iter_mut().for_each(|x| *x = 1.0);
        b.ln2_shift.iter_mut().for_each(|x| *x = 0.0);
        b.bo.iter_mut().for_each(|x| *x = 0.0);
        if l == 0 {
            b.wk = Matrix::identity(d);
            b.bk.iter_mut().for_each(|x| *x = 0.0);
            b.wq.fill(0.0);
            b.bq.iter_mut().zip(&p0).for_each(|(q, &v)| *q = cfg.gamma * v);
            b.wv.fill(0.0);
            for i in 0..dp {
                b.wv[(i, dp + i)] = identity_gain;
            }
            b.bv.iter_mut().for_each(|x| *x = 0.0);
            b.wo = Matrix::identity(d);
        } else if model.task == Task::Masked && l == n_layers - 1 {
            b.wq.fill(0.0);
            b.bq.iter_mut().for_each(|x| *x = 0.0);
            b.wk.fill(0.0);
            b.bk.iter_mut().for_each(|x| *x = 0.0);
            b.wv.fill(0.0);
            b.wv[(carrier, carrier)] = cfg.mlm_last_attention_weight;
            b.bv.iter_mut().for_each(|x| *x = 0.0);
            b.wo.fill(0.0);
            b.wo[(carrier, carrier)] = 1.0;
        } else {
            b.wo.fill(0.0);
        }

        for r in 0..k {
            let row = b.w1.row_mut(r);
            for (w, &mv) in row.iter_mut().zip(&m) {
                *w = beta * mv;
            }
            if cfg.inspection_noise_std > 0.0 {
                for w in row.iter_mut() {
                    *w += cfg.inspection_noise_std * noise_rng.normal();
                }
            }
            b.b1[r] = beta * layout.boundaries[l * k + r];
        }
        b.w2.fill(0.0);
        for r in 0..k {
            b.w2[(carrier, r)] = cfg.epsilon;
        }
        b.b2.iter_mut().for_each(|x| *x = 0.0);
    }
    p.lnf_scale.iter_mut().for_each(|x| *x = 1.0);
    p.lnf_shift.iter_mut().for_each(|x| *x = 0.0);
    if let Some(w) = &mut p.decoder_weight {
        w.fill(0.0);
        w[(cfg.sink_token, carrier)] = 1.0;
    }
    // every non-sink token then shares one softmax baseline in the bias gradient
    if let Some(b) = &mut p.decoder_bias {
        b.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(p)
}

/// Crafts with placeholder statistics, measures the real spread of `<m, u>`
/// on `batches` through the crafted front end, then crafts again.
pub fn craft_with_estimated_stats(
    params: &ModelParams<f64>,
    mut cfg: MaliciousConfig,
    batches: &[Vec<TokenSequence>],
) -> Result<(ModelParams<f64>, MaliciousConfig)> {
    cfg.stats = MeasurementStats {
        mean: 0.0,
        std: 1.0,
        sample_count: 0,
    };
    let draft = craft_malicious_params(params, &cfg)?;
    let m = measurement_vector(&cfg, &params.config);
    cfg.stats = crate::corpus::estimate_measurement_stats(&m, &draft, batches)?;
    let crafted = craft_malicious_params(params, &cfg)?;
    Ok((crafted, cfg))
}

/// First-`d'` slice of the block-0 attention output at every position of
/// every sequence.
pub fn sequence_identity_check(
    crafted: &ModelParams<f64>,
    batch: &[TokenSequence],
    d_prime: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .iter()
        .map(|s| {
            let tr = crafted.trace(s.ids(), None)?;
            let a = &tr.blocks[0].attn_out;
            Ok((0..a.rows()).map(|i| a.row(i)[..d_prime].to_vec()).collect())
        })
        .collect()
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &Matrix<f64>, rel_tol: f64) -> usize {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = dm.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Default tolerance for [`numerical_rank`]: machine epsilon scaled by size.
pub fn default_rank_tolerance(m: &Matrix<f64>) -> f64 {
    m.rows().max(m.cols()) as f64 * f64::EPSILON
}

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::malice::BinLayout;
use crate::model::{GradientUpdate, ModelParams};
use crate::numkernel::Matrix;
use crate::solvers::omp_steps_joint;

/// One FFN input read out of a bin by divided differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreachedEmbedding {
    /// Estimate of the FFN input `u_h` (length `d_model`).
    pub u: Vec<f64>,
    pub block: usize,
    pub row: usize,
    /// Global bin index `block * k + row`.
    pub bin: usize,
    /// `|delta b|`, the total gradient weight that landed in the bin.
    pub lambda: f64,
    pub collision: bool,
}

/// Relative bias-difference threshold below which a bin counts as empty.
pub const EMPTY_BIN_REL: f64 = 1e-8;

/// Default ratio to the median weight above which a bin is taken to hold
/// several inputs.
pub const COLLISION_FACTOR: f64 = 1.5;

fn check_shapes(update: &GradientUpdate<f64>, crafted: &ModelParams<f64>, layout: &BinLayout) -> Result<()> {
    let cfg = &crafted.config;
    ensure!(
        update.grads.config == *cfg,
        Shape,
        "update was computed for a different model configuration"
    );
    ensure!(
        layout.rows_per_block == cfg.ffn_width && layout.n_blocks() == cfg.n_layers,
        Shape,
        "bin layout {}x{} does not match {} blocks of {} rows",
        layout.n_blocks(),
        layout.rows_per_block,
        cfg.n_layers,
        cfg.ffn_width
    );
    Ok(())
}

/// Divided differences of adjacent FFN first-layer rows within one block.
/// Row `r` is differenced against row `r + 1`; the last row of the final
/// block is differenced against zero (it holds the upper tail alone), the
/// last row of any other block is skipped.
fn differences(w: &Matrix<f64>, b: &[f64], last_block: bool, tau: f64, out: &mut Vec<(usize, Vec<f64>, f64)>) {
    let k = b.len();
    for r in 0..k {
        let (dw, db): (Vec<f64>, f64) = if r + 1 < k {
            (
                w.row(r).iter().zip(w.row(r + 1)).map(|(a, c)| a - c).collect(),
                b[r] - b[r + 1],
            )
        } else if last_block {
            (w.row(r).to_vec(), b[r])
        } else {
            continue;
        };
        if db.abs() > tau {
            out.push((r, dw.iter().map(|x| x / db).collect(), db.abs()));
        }
    }
}

fn emit(per_block: Vec<Vec<(usize, Vec<f64>, f64)>>, k: usize) -> Vec<BreachedEmbedding> {
    let mut out: Vec<BreachedEmbedding> = per_block
        .into_iter()
        .enumerate()
        .flat_map(|(block, rows)| {
            rows.into_iter().map(move |(row, u, lambda)| BreachedEmbedding {
                u,
                block,
                row,
                bin: block * k + row,
                lambda,
                collision: false,
            })
        })
        .collect();
    flag_collisions(&mut out, COLLISION_FACTOR);
    out
}

/// Raw divided-difference readout `u = delta W / delta b` of every occupied
/// bin, with `|delta b| > 1e-8 * max |grad b|`.
pub fn extract_breached_embeddings(
    update: &GradientUpdate<f64>,
    crafted: &ModelParams<f64>,
    layout: &BinLayout,
) -> Result<Vec<BreachedEmbedding>> {
    check_shapes(update, crafted, layout)?;
    let blocks = &update.grads.blocks;
    let max_b = blocks.iter().flat_map(|b| &b.b1).fold(0.0f64, |m, x| m.max(x.abs()));
    let tau = EMPTY_BIN_REL * max_b;
    let per_block = blocks
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let mut rows = Vec::new();
            if max_b > 0.0 {
                differences(&g.w1, &g.b1, l + 1 == blocks.len(), tau, &mut rows);
            }
            rows
        })
        .collect();
    Ok(emit(per_block, crafted.config.ffn_width))
}

/// Readout after denoising every block's cumulative rows with a shared
/// sparse step fit of at most `max_jumps` jumps per block. Every column of
/// the weight gradient and the bias gradient are fit jointly, reading rows
/// from the top threshold down so the sums grow from the upper tail.
pub fn extract_denoised_embeddings(
    update: &GradientUpdate<f64>,
    crafted: &ModelParams<f64>,
    layout: &BinLayout,
    max_jumps: usize,
) -> Result<Vec<BreachedEmbedding>> {
    check_shapes(update, crafted, layout)?;
    let d = crafted.config.d_model;
    let k = crafted.config.ffn_width;
    let blocks = &update.grads.blocks;
    let mut per_block = Vec::with_capacity(blocks.len());
    for (l, g) in blocks.iter().enumerate() {
        let mut channels: Vec<Vec<f64>> = (0..d).map(|c| (0..k).rev().map(|r| g.w1[(r, c)]).collect()).collect();
        channels.push(g.b1.iter().rev().copied().collect());
        // one extra atom for the level carried in from higher blocks
        let fits = omp_steps_joint(&channels, max_jumps + 1)?;
        let w = Matrix::from_fn(k, d, |r, c| fits[c].fit[k - 1 - r]);
        let b: Vec<f64> = (0..k).map(|r| fits[d].fit[k - 1 - r]).collect();
        let max_b = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut rows = Vec::new();
        if max_b > 0.0 {
            differences(&w, &b, l + 1 == blocks.len(), EMPTY_BIN_REL * max_b, &mut rows);
        }
        per_block.push(rows);
    }
    Ok(emit(per_block, k))
}

/// Marks embeddings whose weight exceeds `factor` times the median weight.
pub fn flag_collisions(embeddings: &mut [BreachedEmbedding], factor: f64) {
    if embeddings.is_empty() {
        return;
    }
    let mut w: Vec<f64> = embeddings.iter().map(|e| e.lambda).collect();
    w.sort_by(f64::total_cmp);
    let median = w[w.len() / 2];
    for e in embeddings.iter_mut() {
        e.collision = e.lambda > factor * median;
    }
}

use crate::error::{ensure, Result};
use crate::model::{GradientUpdate, Task};
use crate::numkernel::norm;

fn row_norms(update: &GradientUpdate<f64>) -> Vec<f64> {
    let e = &update.grads.token_embedding;
    (0..e.rows()).map(|v| norm(e.row(v))).collect()
}

/// Adds the `v`'s in greedy order until `out` holds `target` ids: each step
/// takes the largest remaining `score`, appends it and lowers it by `impact`.
fn greedy_fill(score: &mut [f64], eligible: &[usize], impact: f64, target: usize, out: &mut Vec<usize>) {
    if eligible.is_empty() || impact <= 0.0 {
        return;
    }
    while out.len() < target {
        let j = *eligible
            .iter()
            .max_by(|&&a, &&b| score[a].total_cmp(&score[b]).then(b.cmp(&a)))
            .expect("non-empty");
        score[j] -= impact;
        out.push(j);
    }
}

/// Token multiset (sorted ids, `seq_len * n_sequences` of them) of a causal
/// model with a decoder bias.
///
/// Every occurrence of `v` as a prediction target lowers the bias gradient of
/// `v` by one impact, while all absent tokens share one softmax baseline. The
/// baseline is the median bias gradient over tokens with an all-zero
/// embedding-gradient row (never an input); deficits below it seed the set,
/// the mean deficit per target sets the impact, and a greedy fill on the
/// remaining deficits estimates frequencies. The first token of each
/// sequence is never a target: those slots come from embedding-gradient rows
/// not yet in the set, then from the largest embedding-gradient norm per
/// estimated occurrence. Ids in `exclude` (the attacker's sink) are never
/// reported.
pub fn recover_bow_decoder_bias(
    update: &GradientUpdate<f64>,
    seq_len: usize,
    n_sequences: usize,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    let cfg = update.config();
    ensure!(
        cfg.task == Task::Causal,
        InvalidArgument,
        "decoder-bias recovery needs a causal model"
    );
    ensure!(
        seq_len >= 2 && n_sequences >= 1,
        InvalidArgument,
        "need S >= 2 and N >= 1"
    );
    let gb = update
        .grads
        .decoder_bias
        .as_ref()
        .ok_or_else(|| crate::Error::InvalidArgument("model has no decoder bias".into()))?;
    let norms = row_norms(update);
    let mut baseline_pool: Vec<f64> = gb
        .iter()
        .zip(&norms)
        .filter(|(_, &n)| n == 0.0)
        .map(|(&g, _)| g)
        .collect();
    if baseline_pool.is_empty() {
        baseline_pool = gb.clone();
    }
    baseline_pool.sort_by(f64::total_cmp);
    let baseline = baseline_pool[baseline_pool.len() / 2];
    let deficit: Vec<f64> = gb
        .iter()
        .enumerate()
        .map(|(v, g)| {
            if exclude.contains(&v) {
                0.0
            } else {
                (baseline - g).max(0.0)
            }
        })
        .collect();
    let targets = n_sequences * (seq_len - 1);
    let rough = deficit.iter().sum::<f64>() / targets as f64;
    ensure!(rough > 0.0, Degenerate, "decoder-bias gradient shows no target tokens");
    let mut seeds: Vec<usize> = (0..gb.len()).filter(|&v| deficit[v] > 0.5 * rough).collect();
    seeds.sort_by(|&a, &b| deficit[b].total_cmp(&deficit[a]).then(a.cmp(&b)));
    let impact = seeds.iter().map(|&v| deficit[v]).sum::<f64>() / targets as f64;
    let mut remaining = deficit.clone();
    let mut out: Vec<usize> = Vec::with_capacity(seq_len * n_sequences);
    for &v in &seeds {
        remaining[v] -= impact;
        out.push(v);
    }
    out.truncate(targets);
    greedy_fill(&mut remaining, &seeds, impact, targets, &mut out);

    let total = seq_len * n_sequences;
    let mut counts = vec![0usize; gb.len()];
    for &v in &out {
        counts[v] += 1;
    }
    let usable = |v: usize| norms[v] > 0.0 && !exclude.contains(&v);
    let mut unseen: Vec<usize> = (0..gb.len()).filter(|&v| usable(v) && counts[v] == 0).collect();
    unseen.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    for v in unseen {
        if out.len() == total {
            break;
        }
        counts[v] += 1;
        out.push(v);
    }
    while out.len() < total {
        let j = (0..gb.len()).filter(|&v| usable(v)).max_by(|&a, &b| {
            let ra = norms[a] / counts[a].max(1) as f64;
            let rb = norms[b] / counts[b].max(1) as f64;
            ra.total_cmp(&rb).then(b.cmp(&a))
        });
        let Some(j) = j.or_else(|| out.first().copied()) else {
            break;
        };
        counts[j] += 1;
        out.push(j);
    }
    out.sort_unstable();
    Ok(out)
}

/// Token multiset of a tied-embedding model from embedding-gradient row
/// norms: rows whose log norm exceeds `mu + cutoff * sigma` (statistics
/// over the non-zero rows) seed the set, and a greedy fill on the norms
/// minus one mean impact per occurrence completes it to `S * N` ids.
pub fn recover_bow_tied_embedding(
    update: &GradientUpdate<f64>,
    seq_len: usize,
    n_sequences: usize,
    cutoff: f64,
) -> Result<Vec<usize>> {
    ensure!(
        seq_len >= 1 && n_sequences >= 1,
        InvalidArgument,
        "need S >= 1 and N >= 1"
    );
    let norms = row_norms(update);
    let logs: Vec<f64> = norms.iter().filter(|&&n| n > 0.0).map(|n| n.ln()).collect();
    ensure!(!logs.is_empty(), Degenerate, "embedding gradient is zero");
    let mu = logs.iter().sum::<f64>() / logs.len() as f64;
    let sigma = (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    let c = mu + cutoff * sigma;
    let mut seeds: Vec<usize> = (0..norms.len())
        .filter(|&v| norms[v] > 0.0 && norms[v].ln() > c)
        .collect();
    if seeds.is_empty() {
        // a single non-zero row (or all equal norms) leaves sigma at zero
        seeds = (0..norms.len())
            .filter(|&v| norms[v] > 0.0 && norms[v].ln() >= c)
            .collect();
    }
    let total = seq_len * n_sequences;
    let impact = seeds.iter().map(|&v| norms[v]).sum::<f64>() / total as f64;
    let mut remaining = norms.clone();
    seeds.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    seeds.truncate(total);
    let mut out = Vec::with_capacity(total);
    for &v in &seeds {
        remaining[v] -= impact;
        out.push(v);
    }
    greedy_fill(&mut remaining, &seeds, impact, total, &mut out);
    out.sort_unstable();
    Ok(out)
}

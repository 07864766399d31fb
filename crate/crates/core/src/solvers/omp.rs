use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Sparse step-function fit of a cumulative sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFit<T> {
    /// Selected jump indices, ascending.
    pub support: Vec<usize>,
    /// Least-squares reconstruction on the selected support.
    pub fit: Vec<T>,
}

/// Least-squares fit on step atoms `a_i[r] = 1[r >= i]` for the given sorted
/// support: each segment between jumps takes its mean, and the stretch before
/// the first jump is zero.
fn refit<T: Scalar>(y: &[T], support: &[usize]) -> Vec<T> {
    let mut fit = vec![T::zero(); y.len()];
    for (w, &start) in support.iter().enumerate() {
        let end = support.get(w + 1).copied().unwrap_or(y.len());
        let seg = &y[start..end];
        let mean = seg.iter().copied().sum::<T>() / T::lit(seg.len() as f64);
        fit[start..end].iter_mut().for_each(|f| *f = mean);
    }
    fit
}

/// Orthogonal matching pursuit over the unit-step dictionary.
///
/// Greedily adds the step atom most correlated (after normalisation) with the
/// residual, refitting all coefficients by least squares after each pick.
/// Stops after `max_sparsity` atoms or once the residual is negligible.
pub fn omp_steps<T: Scalar>(y: &[T], max_sparsity: usize) -> StepFit<T> {
    let n = y.len();
    let scale = y.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let mut support: Vec<usize> = Vec::new();
    let mut fit = vec![T::zero(); n];
    if n == 0 || scale == T::zero() {
        return StepFit { support, fit };
    }
    let tiny = T::lit(1e-12) * scale;
    let mut residual = y.to_vec();
    for _ in 0..max_sparsity.min(n) {
        // <r, a_i> is the suffix sum of r from i; |a_i| = sqrt(n - i)
        let mut best = None;
        let mut best_score = T::zero();
        let mut suffix = T::zero();
        for i in (0..n).rev() {
            suffix += residual[i];
            let score = suffix.abs() / T::lit(((n - i) as f64).sqrt());
            if score >= best_score && !support.contains(&i) {
                best_score = score;
                best = Some(i);
            }
        }
        let Some(pick) = best else { break };
        if best_score <= tiny {
            break;
        }
        let at = support.partition_point(|&s| s < pick);
        support.insert(at, pick);
        fit = refit(y, &support);
        for ((r, &a), &f) in residual.iter_mut().zip(y).zip(&fit) {
            *r = a - f;
        }
    }
    StepFit { support, fit }
}

/// Denoised version of a cumulative sequence with at most `max_sparsity` jumps.
pub fn omp_denoise<T: Scalar>(y: &[T], max_sparsity: usize) -> Vec<T> {
    omp_steps(y, max_sparsity).fit
}

/// Step fit of several cumulative sequences sharing one jump support.
///
/// Each greedy pick maximises the sum over channels of squared normalised
/// correlations with the residuals; every channel is then refit by segment
/// means on the common support.
pub fn omp_steps_joint<T: Scalar>(channels: &[Vec<T>], max_sparsity: usize) -> Result<Vec<StepFit<T>>> {
    let Some(first) = channels.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    ensure!(
        channels.iter().all(|c| c.len() == n),
        Shape,
        "joint step fit needs channels of equal length"
    );
    let scale = channels.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()));
    let mut support: Vec<usize> = Vec::new();
    let mut fits: Vec<Vec<T>> = vec![vec![T::zero(); n]; channels.len()];
    if n > 0 && scale > T::zero() {
        let tiny = T::lit(1e-24) * scale * scale;
        let mut residuals: Vec<Vec<T>> = channels.to_vec();
        let mut score = vec![T::zero(); n];
        for _ in 0..max_sparsity.min(n) {
            score.iter_mut().for_each(|s| *s = T::zero());
            for r in &residuals {
                let mut suffix = T::zero();
                for i in (0..n).rev() {
                    suffix += r[i];
                    score[i] += suffix * suffix / T::lit((n - i) as f64);
                }
            }
            let pick = (0..n)
                .filter(|i| !support.contains(i))
                .max_by(|&a, &b| score[a].partial_cmp(&score[b]).unwrap_or(std::cmp::Ordering::Equal));
            let Some(pick) = pick else { break };
            if score[pick] <= tiny {
                break;
            }
            let at = support.partition_point(|&s| s < pick);
            support.insert(at, pick);
            for ((fit, y), r) in fits.iter_mut().zip(channels).zip(residuals.iter_mut()) {
                *fit = refit(y, &support);
                for ((ri, &a), &f) in r.iter_mut().zip(y).zip(fit.iter()) {
                    *ri = a - f;
                }
            }
        }
    }
    Ok(fits
        .into_iter()
        .map(|fit| StepFit {
            support: support.clone(),
            fit,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn steps(n: usize, jumps: &[(usize, f64)]) -> Vec<f64> {
        let mut y = vec![0.0; n];
        for &(at, h) in jumps {
            y[at..].iter_mut().for_each(|v| *v += h);
        }
        y
    }

    #[test]
    fn noiseless_three_jumps_exact() {
        let y = steps(40, &[(3, 1.5), (17, -0.7), (30, 2.0)]);
        let out = omp_steps(&y, 3);
        assert_eq!(out.support, vec![3, 17, 30]);
        for (a, b) in out.fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_gives_zero() {
        let out = omp_steps(&[0.0f64; 16], 4);
        assert!(out.support.is_empty());
        assert!(out.fit.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extra_budget_is_not_spent_on_clean_signal() {
        let y = steps(20, &[(5, 1.0)]);
        assert_eq!(omp_steps(&y, 6).support, vec![5]);
    }

    #[test]
    fn noisy_five_jumps_mostly_found() {
        let n = 256;
        let mut total_hits = 0;
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let mut locs: Vec<usize> = Vec::new();
            while locs.len() < 5 {
                let l = 8 + rng.below(n - 16);
                if locs.iter().all(|&o: &usize| o.abs_diff(l) > 8) {
                    locs.push(l);
                }
            }
            let jumps: Vec<(usize, f64)> = locs.iter().map(|&l| (l, 1.0 + rng.uniform())).collect();
            let clean = steps(n, &jumps);
            let noisy: Vec<f64> = clean.iter().map(|v| v + 0.1 * rng.normal()).collect();
            let out = omp_steps(&noisy, 8);
            let hits = locs.iter().filter(|l| out.support.contains(l)).count();
            assert!(hits >= 4, "seed {seed}: {hits}/5");
            total_hits += hits;
        }
        assert!(total_hits >= 4 * 50);
    }

    #[test]
    fn denoising_reduces_error() {
        let mut rng = Rng::new(9);
        let clean = steps(128, &[(10, 1.0), (50, 2.0), (90, -1.0)]);
        let noisy: Vec<f64> = clean.iter().map(|v| v + 0.2 * rng.normal()).collect();
        let den = omp_denoise(&noisy, 3);
        let err = |a: &[f64]| a.iter().zip(&clean).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!(err(&den) < 0.2 * err(&noisy));
    }

    #[test]
    fn joint_support_matches_single_channel_on_clean_data() {
        let a = steps(64, &[(4, 1.0), (20, -2.0), (41, 0.5)]);
        let b = steps(64, &[(4, 0.3), (20, 1.0), (41, 2.0)]);
        let out = omp_steps_joint(&[a.clone(), b.clone()], 10).unwrap();
        assert_eq!(out[0].support, vec![4, 20, 41]);
        for (fit, y) in out.iter().zip([a, b]) {
            assert!(fit.fit.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn joint_support_pools_evidence_across_channels() {
        // a jump too small to find in one noisy channel is found from many
        let mut hits_joint = 0;
        let mut hits_single = 0;
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let clean = steps(128, &[(37, 0.4), (90, 0.4)]);
            let chans: Vec<Vec<f64>> = (0..16)
                .map(|_| clean.iter().map(|v| v + 0.3 * rng.normal()).collect())
                .collect();
            let joint = omp_steps_joint(&chans, 2).unwrap();
            hits_joint += [37, 90].iter().filter(|l| joint[0].support.contains(l)).count();
            hits_single += [37, 90]
                .iter()
                .filter(|l| omp_steps(&chans[0], 2).support.contains(l))
                .count();
        }
        assert!(hits_joint > hits_single, "{hits_joint} vs {hits_single}");
        assert!(hits_joint >= 36);
    }

    #[test]
    fn joint_rejects_ragged_channels() {
        assert!(omp_steps_joint(&[vec![1.0, 2.0], vec![1.0]], 1).is_err());
    }
}

use crate::error::{ensure, Result};
use crate::numkernel::{dot, Matrix, Rng};
use crate::solvers::{constrained_kmeans_from, constrained_kmeans_restarts, linear_sum_assignment, ClusterLabels};

use super::BreachedEmbedding;

/// Centred free dims `[d', d - 1)` of a residual-width vector. Pre-norm LN
/// shifts and scales every FFN input, so only the centred direction of the
/// free dims is comparable with the embedding tables.
pub fn free_profile(v: &[f64], d_prime: usize) -> Vec<f64> {
    let f = &v[d_prime..v.len() - 1];
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter().map(|x| x - mean).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Removes the component of `v` along the unit vector `dir`.
fn reject(v: &[f64], dir: &[f64]) -> Vec<f64> {
    let a = dot(v, dir);
    v.iter().zip(dir).map(|(x, d)| x - a * d).collect()
}

/// Distance below which two unit identity features count as equal.
pub const IDENTITY_TOL: f64 = 1e-6;

/// Sequence-identity feature of an embedding: its first `d'` dims, centred
/// and normalised to undo the per-token LN shift and scale. Exactly equal
/// for every clean embedding of one sequence.
pub fn identity_feature(u: &[f64], d_prime: usize) -> Vec<f64> {
    let id = &u[..d_prime];
    let mean = id.iter().sum::<f64>() / d_prime as f64;
    unit(id.iter().map(|x| x - mean).collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Groups of (numerically) equal features, largest first, each listed by
/// ascending index.
fn exact_groups(feats: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, f) in feats.iter().enumerate() {
        match groups.iter_mut().find(|g| dist(&feats[g[0]], f) <= IDENTITY_TOL) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
}

/// Embeddings grouped into sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceClusters {
    /// Indices (into the breached list) that entered clustering.
    pub kept: Vec<usize>,
    /// Cluster of each kept embedding.
    pub labels: ClusterLabels<f64>,
    /// Identity feature of each kept embedding.
    pub features: Vec<Vec<f64>>,
    /// Feature shared by the largest group of equal features in each
    /// cluster; `None` for an empty cluster.
    pub consensus: Vec<Option<Vec<f64>>>,
    /// Clusters whose consensus group may hold several sequences: it has
    /// more than `S` members or spills into other clusters. Sequences
    /// opening with the same token share their identity feature.
    pub ambiguous: Vec<bool>,
    /// Index into `group_sizes` of each cluster's consensus group.
    pub consensus_group: Vec<Option<usize>>,
    /// Size of every group of equal features, largest first.
    pub group_sizes: Vec<usize>,
}

impl SequenceClusters {
    /// Breached-list indices of every cluster's members.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.labels.sizes.len()];
        for (&i, &l) in self.kept.iter().zip(&self.labels.labels) {
            out[l].push(i);
        }
        out
    }

    /// Groups of two or more equal features: one per sequence with two
    /// clean embeddings, unless sequences share an identity.
    pub fn identity_count(&self) -> usize {
        self.group_sizes.iter().filter(|&&g| g >= 2).count()
    }

    /// Whether the `j`-th kept embedding carries the identity of its
    /// cluster and that identity belongs to this cluster alone.
    pub fn matches_consensus(&self, j: usize) -> bool {
        let c = self.labels.labels[j];
        !self.ambiguous[c]
            && self.consensus[c]
                .as_ref()
                .is_some_and(|f| dist(f, &self.features[j]) <= IDENTITY_TOL)
    }
}

/// Groups embeddings into `n` sequences of at most `s` members by their
/// identity features. Clean embeddings of one sequence share their feature
/// exactly, so constrained k-means starts from the `n` largest groups of
/// equal features; when fewer than `n` such groups hold two or more
/// members, k-means++ restarts compete on the objective. Beyond `n * s`
/// embeddings only the heaviest are kept.
pub fn cluster_sequences(
    breached: &[BreachedEmbedding],
    n: usize,
    s: usize,
    d_prime: usize,
    rng: &mut Rng,
) -> Result<SequenceClusters> {
    ensure!(
        !breached.is_empty(),
        InvalidArgument,
        "no breached embeddings to cluster"
    );
    ensure!(n >= 1 && s >= 1, InvalidArgument, "need N >= 1 and S >= 1");
    let mut kept: Vec<usize> = (0..breached.len()).collect();
    if kept.len() > n * s {
        log::info!(
            "{} breached embeddings exceed N*S = {}; keeping the heaviest",
            kept.len(),
            n * s
        );
        kept.sort_by(|&a, &b| breached[b].lambda.total_cmp(&breached[a].lambda).then(a.cmp(&b)));
        kept.truncate(n * s);
        kept.sort_unstable();
    }
    let feats: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| identity_feature(&breached[i].u, d_prime))
        .collect();
    let groups = exact_groups(&feats);
    let points = Matrix::from_rows(&feats)?;
    let labels = if n == 1 {
        ClusterLabels {
            labels: vec![0; kept.len()],
            sizes: vec![kept.len()],
            centroids: Matrix::zeros(1, d_prime),
            objective_history: Vec::new(),
        }
    } else {
        let seeds = Matrix::from_fn(n, d_prime, |c, k| feats[groups[c.min(groups.len() - 1)][0]][k]);
        let seeded = constrained_kmeans_from(&points, seeds, s, 50)?;
        if groups.iter().filter(|g| g.len() >= 2).count() >= n {
            seeded
        } else {
            let restarted = constrained_kmeans_restarts(&points, n, s, rng, 50, 4)?;
            if restarted.objective() < seeded.objective() {
                restarted
            } else {
                seeded
            }
        }
    };
    let k = labels.sizes.len();
    // members of every group in every cluster
    let mut per: Vec<Vec<usize>> = vec![vec![0; k]; groups.len()];
    for (gi, g) in groups.iter().enumerate() {
        for &j in g {
            per[gi][labels.labels[j]] += 1;
        }
    }
    let mut consensus = vec![None; k];
    let mut ambiguous = vec![false; k];
    let mut consensus_group = vec![None; k];
    for c in 0..k {
        let Some(top) = (0..groups.len())
            .filter(|&gi| per[gi][c] > 0)
            .max_by(|&a, &b| per[a][c].cmp(&per[b][c]).then(b.cmp(&a)))
        else {
            continue;
        };
        consensus[c] = Some(feats[groups[top][0]].clone());
        consensus_group[c] = Some(top);
        let spread = per[top].iter().filter(|&&m| m > 0).count() > 1 || groups[top].len() > s;
        // a second group of two or more is a second sequence
        let crowded = (0..groups.len()).any(|gi| gi != top && per[gi][c] >= 2);
        ambiguous[c] = spread || crowded;
    }
    Ok(SequenceClusters {
        kept,
        labels,
        features: feats,
        consensus,
        ambiguous,
        consensus_group,
        group_sizes: groups.iter().map(Vec::len).collect(),
    })
}

/// Embedding placed at one position of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotSource {
    /// Index into the embeddings handed to [`assign_positions`].
    pub embedding: usize,
    /// True when the slot was left open by the assignment and filled with an
    /// embedding already used elsewhere.
    pub reused: bool,
}

/// Correlation of every embedding with every positional row on the free
/// dims.
fn position_correlations(embeddings: &[&[f64]], positional: &Matrix<f64>, s: usize, d_prime: usize) -> Matrix<f64> {
    let p: Vec<Vec<f64>> = (0..s).map(|k| unit(free_profile(positional.row(k), d_prime))).collect();
    let e: Vec<Vec<f64>> = embeddings.iter().map(|u| unit(free_profile(u, d_prime))).collect();
    Matrix::from_fn(e.len(), s, |h, k| dot(&e[h], &p[k]))
}

/// Orders one sequence's embeddings by position: a rectangular assignment
/// maximising correlation with the positional rows `0..s`, then every open
/// position takes its best-correlated embedding, reuse allowed. Returns
/// `None` everywhere when the sequence has no embeddings.
pub fn assign_positions(
    embeddings: &[&[f64]],
    positional: &Matrix<f64>,
    s: usize,
    d_prime: usize,
) -> Result<Vec<Option<SlotSource>>> {
    ensure!(
        s >= 1 && s <= positional.rows(),
        InvalidArgument,
        "sequence length {s} outside the positional table"
    );
    ensure!(
        embeddings.len() <= s,
        InvalidArgument,
        "{} embeddings for {s} positions",
        embeddings.len()
    );
    let mut slots = vec![None; s];
    if embeddings.is_empty() {
        return Ok(slots);
    }
    let corr = position_correlations(embeddings, positional, s, d_prime);
    let cost = corr.map(|c| -c);
    let a = linear_sum_assignment(&cost)?;
    for (h, k) in a.pairs() {
        slots[k] = Some(SlotSource {
            embedding: h,
            reused: false,
        });
    }
    for (k, slot) in slots.iter_mut().enumerate() {
        if slot.is_none() {
            let h = (0..embeddings.len())
                .max_by(|&a, &b| corr[(a, k)].total_cmp(&corr[(b, k)]).then(b.cmp(&a)))
                .expect("non-empty");
            *slot = Some(SlotSource {
                embedding: h,
                reused: true,
            });
        }
    }
    Ok(slots)
}

/// Where the token of each slot may come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Candidates<'a> {
    /// Recovered token multiset; each entry fills at most one slot while the
    /// multiset lasts.
    Multiset(&'a [usize]),
    /// Any vocabulary id outside `exclude`, reuse unlimited.
    FullVocab { exclude: &'a [usize] },
}

/// A slot to label: its position and (if any) the embedding placed there.
#[derive(Clone, Copy, Debug)]
pub struct Slot<'a> {
    pub position: usize,
    pub embedding: Option<&'a [f64]>,
}

/// Match of each slot against candidate tokens after removing its position:
/// `u`, and each candidate `t_v`, are projected off the direction of the
/// assigned `p_k` (a least-squares subtraction, since LN rescales `u`) and
/// compared by correlation. Multiset candidates are assigned by one
/// rectangular assignment; slots left over take their best candidate.
pub fn assign_tokens(
    slots: &[Slot<'_>],
    positional: &Matrix<f64>,
    token_embedding: &Matrix<f64>,
    candidates: Candidates<'_>,
    d_prime: usize,
) -> Result<Vec<usize>> {
    let columns: Vec<usize> = match candidates {
        Candidates::Multiset(m) => m.to_vec(),
        Candidates::FullVocab { exclude } => (0..token_embedding.rows()).filter(|v| !exclude.contains(v)).collect(),
    };
    ensure!(!columns.is_empty(), InvalidArgument, "empty candidate token set");
    if slots.is_empty() {
        return Ok(Vec::new());
    }
    let mut distinct = columns.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let t_profiles: Vec<Vec<f64>> = distinct
        .iter()
        .map(|&v| free_profile(token_embedding.row(v), d_prime))
        .collect();
    // similarity of each slot to each distinct candidate
    let sim: Vec<Vec<f64>> = slots
        .iter()
        .map(|slot| match slot.embedding {
            None => vec![0.0; distinct.len()],
            Some(u) => {
                let p = unit(free_profile(positional.row(slot.position), d_prime));
                let r = unit(reject(&free_profile(u, d_prime), &p));
                t_profiles.iter().map(|t| dot(&r, &unit(reject(t, &p)))).collect()
            }
        })
        .collect();
    let best = |i: usize| {
        (0..distinct.len())
            .max_by(|&a, &b| sim[i][a].total_cmp(&sim[i][b]).then(b.cmp(&a)))
            .expect("non-empty")
    };
    match candidates {
        Candidates::FullVocab { .. } => Ok((0..slots.len()).map(|i| distinct[best(i)]).collect()),
        Candidates::Multiset(_) => {
            let col_of: Vec<usize> = columns
                .iter()
                .map(|v| distinct.binary_search(v).expect("present"))
                .collect();
            let cost = Matrix::from_fn(slots.len(), columns.len(), |i, j| -sim[i][col_of[j]]);
            let a = linear_sum_assignment(&cost)?;
            Ok(a.row_to_col
                .iter()
                .enumerate()
                .map(|(i, c)| match c {
                    Some(j) => columns[*j],
                    None => distinct[best(i)],
                })
                .collect())
        }
    }
}

/// Relative least-squares residual of `u` against `alpha * (p_k + t_v)` on
/// the centred free dims.
pub fn explanation_residual(u: &[f64], p: &[f64], t: &[f64], d_prime: usize) -> f64 {
    let y = free_profile(u, d_prime);
    let sum: Vec<f64> = p.iter().zip(t).map(|(a, b)| a + b).collect();
    let x = free_profile(&sum, d_prime);
    let yy = dot(&y, &y);
    let xx = dot(&x, &x);
    if yy == 0.0 || xx == 0.0 {
        return f64::INFINITY;
    }
    let alpha = dot(&x, &y) / xx;
    let r2 = y.iter().zip(&x).map(|(a, b)| (a - alpha * b).powi(2)).sum::<f64>();
    (r2 / yy).sqrt()
}

/// Position and token that explain `u` up to `tol`, searching positions
/// `0..s` and every token outside `exclude`.
pub fn exact_explanation(
    u: &[f64],
    positional: &Matrix<f64>,
    token_embedding: &Matrix<f64>,
    s: usize,
    d_prime: usize,
    exclude: &[usize],
    tol: f64,
) -> Option<(usize, usize)> {
    let y = free_profile(u, d_prime);
    let t_profiles: Vec<(usize, Vec<f64>)> = (0..token_embedding.rows())
        .filter(|v| !exclude.contains(v))
        .map(|v| (v, free_profile(token_embedding.row(v), d_prime)))
        .collect();
    for k in 0..s.min(positional.rows()) {
        let p = unit(free_profile(positional.row(k), d_prime));
        let r = unit(reject(&y, &p));
        let (v, _) = t_profiles
            .iter()
            .map(|(v, t)| (*v, dot(&r, &unit(reject(t, &p)))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))?;
        if explanation_residual(u, positional.row(k), token_embedding.row(v), d_prime) <= tol {
            return Some((k, v));
        }
    }
    None
}

/// A labelled slot offered for certification.
#[derive(Clone, Copy, Debug)]
pub struct LabelledSlot<'a> {
    pub position: usize,
    pub token: usize,
    pub embedding: Option<&'a [f64]>,
    /// Reused fills and collision-flagged bins are never certified.
    pub eligible: bool,
}

/// True where the assigned position and token explain the slot's embedding
/// up to relative residual `tol`.
pub fn certify(
    slots: &[LabelledSlot<'_>],
    positional: &Matrix<f64>,
    token_embedding: &Matrix<f64>,
    d_prime: usize,
    tol: f64,
) -> Vec<bool> {
    slots
        .iter()
        .map(|s| match (s.eligible, s.embedding) {
            (true, Some(u)) => {
                explanation_residual(u, positional.row(s.position), token_embedding.row(s.token), d_prime) <= tol
            }
            _ => false,
        })
        .collect()
}

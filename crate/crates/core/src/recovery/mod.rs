//! The attacker's readout: bag-of-words recovery, divided-difference
//! embedding extraction, sequence clustering, position and token assignment,
//! and certification.

mod bow;
mod matching;
mod readout;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::malice::{bin_layout, MaliciousConfig};
use crate::model::{GradientUpdate, ModelParams, Task};
use crate::numkernel::Rng;

pub use bow::{recover_bow_decoder_bias, recover_bow_tied_embedding};
pub use matching::{
    assign_positions, assign_tokens, certify, cluster_sequences, exact_explanation, explanation_residual, free_profile,
    identity_feature, Candidates, LabelledSlot, SequenceClusters, Slot, SlotSource, IDENTITY_TOL,
};
pub use readout::{
    extract_breached_embeddings, extract_denoised_embeddings, flag_collisions, BreachedEmbedding, COLLISION_FACTOR,
    EMPTY_BIN_REL,
};

/// Source of the candidate tokens matched against each slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    /// Bag of words from the decoder bias (causal, untied) or from embedding
    /// norms (tied); the whole vocabulary otherwise.
    #[default]
    Auto,
    BagOfWords,
    FullVocab,
}

/// Attacker-side settings of the readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Expected number of sequences `N` in the update.
    pub n_sequences: usize,
    pub seq_len: usize,
    pub token_source: TokenSource,
    /// Log-norm cutoff (in standard deviations) for tied-embedding BoW.
    pub tied_cutoff: f64,
    pub certify_tol: f64,
    /// Jump budget per block for the sparse step-fit denoiser, as a multiple
    /// of the expected tokens per block; `None` reads raw differences.
    pub denoise_factor: Option<f64>,
    pub cluster_seed: u64,
}

impl AttackConfig {
    pub fn new(n_sequences: usize, seq_len: usize) -> Self {
        Self {
            n_sequences,
            seq_len,
            token_source: TokenSource::Auto,
            tied_cutoff: 1.5,
            certify_tol: 1e-2,
            denoise_factor: None,
            cluster_seed: 0,
        }
    }
}

/// One reconstructed sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredSequence {
    pub tokens: Vec<usize>,
    pub certified: Vec<bool>,
    pub cluster: usize,
    /// Positions that received no embedding of their own.
    pub fill_ins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub sequences: Vec<RecoveredSequence>,
    /// Recovered token multiset, when bag-of-words recovery ran.
    pub bag_of_words: Option<Vec<usize>>,
    pub breached_count: usize,
    pub collision_count: usize,
}

impl RecoveryResult {
    pub fn certified_count(&self) -> usize {
        self.sequences.iter().flat_map(|s| &s.certified).filter(|&&c| c).count()
    }

    pub fn slot_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }
}

fn bag_of_words(
    update: &GradientUpdate<f64>,
    mcfg: &MaliciousConfig,
    acfg: &AttackConfig,
) -> Result<Option<Vec<usize>>> {
    let cfg = update.config();
    let run = || {
        if cfg.tied_embedding {
            recover_bow_tied_embedding(update, acfg.seq_len, acfg.n_sequences, acfg.tied_cutoff)
        } else {
            recover_bow_decoder_bias(update, acfg.seq_len, acfg.n_sequences, &[mcfg.sink_token])
        }
    };
    let supported = cfg.tied_embedding || (cfg.task == Task::Causal && cfg.decoder_bias);
    match acfg.token_source {
        TokenSource::FullVocab => Ok(None),
        TokenSource::BagOfWords => run().map(Some),
        TokenSource::Auto if !supported => Ok(None),
        TokenSource::Auto => match run() {
            Ok(b) => Ok(Some(b)),
            Err(e) => {
                log::warn!("bag-of-words recovery failed ({e}); matching against the full vocabulary");
                Ok(None)
            }
        },
    }
}

/// Full readout in order: bag of words, embedding extraction, clustering,
/// positions, tokens, certification. A slot is certified only when its own
/// embedding (not a reused fill or a flagged collision) carries its
/// cluster's identity and is explained by the assigned position and token.
pub fn run_attack(
    update: &GradientUpdate<f64>,
    crafted: &ModelParams<f64>,
    mcfg: &MaliciousConfig,
    acfg: &AttackConfig,
) -> Result<RecoveryResult> {
    let cfg = &crafted.config;
    let (n, s) = (acfg.n_sequences, acfg.seq_len);
    ensure!(n >= 1 && s >= 1, InvalidArgument, "need N >= 1 and S >= 1");
    ensure!(
        s <= cfg.max_positions,
        InvalidArgument,
        "S = {s} exceeds max_positions {}",
        cfg.max_positions
    );
    ensure!(
        update.grads.is_finite(),
        InvalidArgument,
        "update has non-finite entries"
    );
    let dp = mcfg.d_prime;

    let bow = bag_of_words(update, mcfg, acfg)?;
    let layout = bin_layout(mcfg, cfg)?;
    let breached = match acfg.denoise_factor {
        None => extract_breached_embeddings(update, crafted, &layout)?,
        Some(f) => {
            let per_block = ((f * (n * s) as f64) / cfg.n_layers as f64).ceil() as usize;
            extract_denoised_embeddings(update, crafted, &layout, per_block.clamp(1, cfg.ffn_width))?
        }
    };
    ensure!(
        !breached.is_empty(),
        Degenerate,
        "update carries no breached embeddings"
    );

    let clusters = cluster_sequences(&breached, n, s, dp, &mut Rng::new(acfg.cluster_seed))?;
    let members = clusters.members();
    let mut on_identity = vec![false; breached.len()];
    for (j, &i) in clusters.kept.iter().enumerate() {
        on_identity[i] = clusters.matches_consensus(j);
    }

    struct Placed {
        cluster: usize,
        position: usize,
        source: Option<(usize, bool)>,
    }
    let mut placed = Vec::with_capacity(n * s);
    for (c, idx) in members.iter().enumerate() {
        let embs: Vec<&[f64]> = idx.iter().map(|&i| breached[i].u.as_slice()).collect();
        let slots = assign_positions(&embs, &crafted.positional_embedding, s, dp)?;
        for (k, slot) in slots.into_iter().enumerate() {
            placed.push(Placed {
                cluster: c,
                position: k,
                source: slot.map(|src| (idx[src.embedding], src.reused)),
            });
        }
    }

    let exclude = [mcfg.sink_token];
    let candidates = match &bow {
        Some(b) => Candidates::Multiset(b),
        None => Candidates::FullVocab { exclude: &exclude },
    };
    let token_slots: Vec<Slot<'_>> = placed
        .iter()
        .map(|p| Slot {
            position: p.position,
            embedding: p.source.map(|(i, _)| breached[i].u.as_slice()),
        })
        .collect();
    let tokens = assign_tokens(
        &token_slots,
        &crafted.positional_embedding,
        &crafted.token_embedding,
        candidates,
        dp,
    )?;
    let labelled: Vec<LabelledSlot<'_>> = placed
        .iter()
        .zip(&tokens)
        .map(|(p, &t)| LabelledSlot {
            position: p.position,
            token: t,
            embedding: p.source.map(|(i, _)| breached[i].u.as_slice()),
            eligible: matches!(p.source, Some((i, false)) if !breached[i].collision && on_identity[i]),
        })
        .collect();
    let certified = certify(
        &labelled,
        &crafted.positional_embedding,
        &crafted.token_embedding,
        dp,
        acfg.certify_tol,
    );

    let mut certified = certified;
    // Two slots of one cluster exactly explained at the same position mean
    // the cluster holds two sequences under one identity.
    let mut claimed = vec![vec![false; s]; n];
    for (p, &ok) in placed.iter().zip(&certified) {
        if ok {
            claimed[p.cluster][p.position] = true;
        }
    }
    let mut mixed = vec![false; n];
    let mut seen = std::collections::HashSet::new();
    for (p, &ok) in placed.iter().zip(&certified) {
        let Some((i, false)) = p.source else { continue };
        if ok || breached[i].collision || !on_identity[i] || !seen.insert(i) {
            continue;
        }
        let hit = exact_explanation(
            &breached[i].u,
            &crafted.positional_embedding,
            &crafted.token_embedding,
            s,
            dp,
            &exclude,
            acfg.certify_tol,
        );
        if let Some((k, _)) = hit {
            if claimed[p.cluster][k] {
                mixed[p.cluster] = true;
            }
            claimed[p.cluster][k] = true;
        }
    }
    // Every sequence with two clean embeddings leaves one group; groups
    // proven to hold several sequences count once more. A shortfall means
    // an undetected shared identity somewhere, so nothing is certified.
    let merged: std::collections::BTreeSet<usize> = (0..n)
        .filter_map(|c| {
            let g = clusters.consensus_group[c]?;
            (mixed[c] || clusters.group_sizes[g] > s).then_some(g)
        })
        .collect();
    let unaccounted = n > 1 && clusters.identity_count() + merged.len() < n;
    for (p, ok) in placed.iter().zip(certified.iter_mut()) {
        if mixed[p.cluster] || unaccounted {
            *ok = false;
        }
    }

    let mut sequences: Vec<RecoveredSequence> = (0..n)
        .map(|c| RecoveredSequence {
            tokens: Vec::with_capacity(s),
            certified: Vec::with_capacity(s),
            cluster: c,
            fill_ins: Vec::new(),
        })
        .collect();
    for ((p, &t), &ok) in placed.iter().zip(&tokens).zip(&certified) {
        let seq = &mut sequences[p.cluster];
        seq.tokens.push(t);
        seq.certified.push(ok);
        if !matches!(p.source, Some((_, false))) {
            seq.fill_ins.push(p.position);
        }
    }
    Ok(RecoveryResult {
        sequences,
        bag_of_words: bow,
        breached_count: breached.len(),
        collision_count: breached.iter().filter(|b| b.collision).count(),
    })
}

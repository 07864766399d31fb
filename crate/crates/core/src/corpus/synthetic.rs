use std::collections::HashSet;

use rand_distr::Zipf;

use crate::numkernel::Rng;

use super::Document;

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "n", "r", "s", "t", "l"];

/// Generator for a Zipf-distributed pseudo-word corpus with per-document
/// topic words, a stand-in for natural text when none is supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub lexicon_size: usize,
    pub zipf_exponent: f64,
    /// Distinct topic words drawn for each document.
    pub topic_words: usize,
    /// Probability that a word is drawn from the document's topic words.
    pub topic_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Mean sentence length; sentences end with a period token.
    pub sentence_len: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            lexicon_size: 2000,
            zipf_exponent: 1.1,
            topic_words: 12,
            topic_rate: 0.15,
            min_words: 200,
            max_words: 600,
            sentence_len: 14,
        }
    }
}

impl SyntheticCorpus {
    /// Deterministic lexicon of distinct pronounceable words.
    pub fn lexicon(&self, rng: &mut Rng) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.lexicon_size);
        while out.len() < self.lexicon_size {
            let syllables = 1 + rng.below(3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.below(ONSETS.len())]);
                w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
                w.push_str(CODAS[rng.below(CODAS.len())]);
            }
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }

    pub fn generate(&self, n_docs: usize, rng: &mut Rng) -> Vec<Document> {
        let lexicon = self.lexicon(&mut rng.fork(0));
        let zipf = Zipf::new(self.lexicon_size as f64, self.zipf_exponent).expect("valid zipf parameters");
        let draw = |rng: &mut Rng| (rng.sample(&zipf) as usize - 1).min(self.lexicon_size - 1);
        (0..n_docs)
            .map(|d| {
                let topics: Vec<usize> = (0..self.topic_words).map(|_| rng.below(self.lexicon_size)).collect();
                let len = self.min_words + rng.below(self.max_words - self.min_words + 1);
                let mut words = Vec::with_capacity(len + len / self.sentence_len.max(1));
                for i in 0..len {
                    let id = if !topics.is_empty() && rng.bernoulli(self.topic_rate) {
                        topics[rng.below(topics.len())]
                    } else {
                        draw(rng)
                    };
                    words.push(lexicon[id].as_str());
                    if self.sentence_len > 0 && (i + 1) % self.sentence_len == 0 {
                        words.push(".");
                    }
                }
                Document {
                    label: format!("synthetic-{d}"),
                    text: words.join(" "),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocabulary};

    #[test]
    fn reproducible() {
        let g = SyntheticCorpus::default();
        assert_eq!(g.generate(3, &mut Rng::new(1)), g.generate(3, &mut Rng::new(1)));
    }

    #[test]
    fn heavy_tailed_frequencies() {
        let g = SyntheticCorpus::default();
        let docs = g.generate(50, &mut Rng::new(2));
        let v = Vocabulary::build_from_documents(&docs.iter().map(|d| d.text.clone()).collect::<Vec<_>>(), 100_000)
            .unwrap();
        let total: usize = docs.iter().map(|d| tokenize(&d.text).len()).sum();
        // a large lexicon is used, but a few words dominate
        assert!(v.len() > 500);
        let top = docs
            .iter()
            .flat_map(|d| tokenize(&d.text))
            .filter(|t| v.id(t) < 13)
            .count();
        assert!(top as f64 / total as f64 > 0.2);
    }
}

//! Template generator for small synthetic dialogue and sentiment corpora.
//!
//! Every input template has one response template; the response carries a
//! single polarity slot filled from disjoint positive/negative word lists.
//! Negative words are drawn with a skew (one dominant word) so a model trained
//! by maximum likelihood ends up with a negative greedy response.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialoguePair, LabeledSentence};

pub const NOUNS: [&str; 12] = ["movie", "food", "weather", "trip", "game", "book", "song", "party", "class", "show", "team", "city"];

pub const POSITIVE_WORDS: [&str; 8] = ["great", "wonderful", "amazing", "lovely", "fantastic", "excellent", "delightful", "superb"];

pub const NEGATIVE_WORDS: [&str; 8] = ["dull", "awful", "terrible", "horrible", "boring", "dreadful", "miserable", "lousy"];

const NEGATIVE_WEIGHTS: [f64; 8] = [0.4, 0.6 / 7.0, 0.6 / 7.0, 0.6 / 7.0, 0.6 / 7.0, 0.6 / 7.0, 0.6 / 7.0, 0.6 / 7.0];

/// (input template, response template). `{n}` is the noun, `{a}` the
/// polarity word.
const TEMPLATES: [(&str, &str); 6] = [
    ("how was the {n}", "the {n} was {a}"),
    ("what did you think of the {n}", "i thought the {n} was {a}"),
    ("tell me about the {n}", "it was a {a} {n}"),
    ("did you like the {n}", "honestly the {n} was {a}"),
    ("how do you feel about the {n}", "the {n} felt {a}"),
    ("any thoughts on the {n}", "what a {a} {n}"),
];

const DOUBLE_TEMPLATES: [&str; 2] = ["the {n} was {a} and {b}", "such a {a} and {b} {n}"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub pairs: Vec<DialoguePair>,
    /// Polarity of each pair's response (1 = positive).
    pub pair_labels: Vec<u8>,
    pub labeled: Vec<LabeledSentence>,
}

/// +1 for positive-lexicon tokens, -1 for negative ones, 0 otherwise.
pub fn polarity(token: &str) -> i8 {
    if POSITIVE_WORDS.contains(&token) {
        1
    } else if NEGATIVE_WORDS.contains(&token) {
        -1
    } else {
        0
    }
}

/// Items with exactly one lexicon word: the single-adjective templates, where
/// positive and negative versions differ in one token.
pub fn single_polarity(labeled: &[LabeledSentence]) -> Vec<LabeledSentence> {
    labeled.iter().filter(|l| l.text.iter().filter(|t| polarity(t) != 0).count() == 1).cloned().collect()
}

/// Unigram-presence rule over the two lexicons.
pub fn lexicon_label(tokens: &[String]) -> u8 {
    let score: i32 = tokens.iter().map(|t| polarity(t) as i32).sum();
    (score > 0) as u8
}

fn fill(template: &str, noun: &str, a: &str, b: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|w| match w {
            "{n}" => noun.to_string(),
            "{a}" => a.to_string(),
            "{b}" => b.to_string(),
            _ => w.to_string(),
        })
        .collect()
}

struct Sampler {
    rng: ChaCha8Rng,
    neg: WeightedIndex<f64>,
}

impl Sampler {
    fn word(&mut self, positive: bool) -> &'static str {
        if positive {
            POSITIVE_WORDS[self.rng.gen_range(0..POSITIVE_WORDS.len())]
        } else {
            NEGATIVE_WORDS[self.neg.sample(&mut self.rng)]
        }
    }

    fn two_words(&mut self, positive: bool) -> (&'static str, &'static str) {
        let a = self.word(positive);
        loop {
            let b = self.word(positive);
            if b != a {
                return (a, b);
            }
        }
    }

    fn noun(&mut self) -> &'static str {
        NOUNS[self.rng.gen_range(0..NOUNS.len())]
    }
}

/// Generates `n_pairs` dialogue pairs and `n_labeled` labeled sentences.
/// Polarity of every item is a fair coin.
pub fn generate_toy_corpus(seed: u64, n_pairs: usize, n_labeled: usize) -> ToyCorpus {
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(seed), neg: WeightedIndex::new(NEGATIVE_WEIGHTS).expect("valid weights") };
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut pair_labels = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (inp, resp) = TEMPLATES[s.rng.gen_range(0..TEMPLATES.len())];
        let noun = s.noun();
        let positive = s.rng.gen_bool(0.5);
        let a = s.word(positive);
        pairs.push(DialoguePair { input: fill(inp, noun, "", ""), response: fill(resp, noun, a, "") });
        pair_labels.push(positive as u8);
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        let positive = s.rng.gen_bool(0.5);
        let noun = s.noun();
        let text = if s.rng.gen_bool(0.3) {
            let t = DOUBLE_TEMPLATES[s.rng.gen_range(0..DOUBLE_TEMPLATES.len())];
            let (a, b) = s.two_words(positive);
            fill(t, noun, a, b)
        } else {
            let (_, t) = TEMPLATES[s.rng.gen_range(0..TEMPLATES.len())];
            let a = s.word(positive);
            fill(t, noun, a, "")
        };
        labeled.push(LabeledSentence { text, label: positive as u8 });
    }
    ToyCorpus { pairs, pair_labels, labeled }
}

/// Every token the generator can emit.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |w: &str| {
        if !w.starts_with('{') && !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    };
    for (a, b) in TEMPLATES {
        a.split_whitespace().chain(b.split_whitespace()).for_each(&mut push);
    }
    DOUBLE_TEMPLATES.iter().flat_map(|t| t.split_whitespace()).for_each(&mut push);
    NOUNS.iter().chain(&POSITIVE_WORDS).chain(&NEGATIVE_WORDS).for_each(|w| push(w));
    words
}

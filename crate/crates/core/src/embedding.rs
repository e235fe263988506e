//! Skip-gram word embeddings with negative sampling, and cosine decoding.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::tensor::{dot, sigmoid};
use sentiscale_nn::Tensor;

use crate::corpus::{Vocabulary, NUM_SPECIALS};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig { dim: 300, window: 5, negative_samples: 5, epochs: 5, learning_rate: 0.025, seed: 0 }
    }
}

/// Frozen |V|×d embedding matrix tied to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    matrix: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    dim: usize,
    rows: usize,
    dtype: String,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocabulary, matrix: Tensor) -> Result<Self> {
        if matrix.rows() != vocab.len() {
            return Err(CoreError::InvalidArgument(format!("table has {} rows for {} tokens", matrix.rows(), vocab.len())));
        }
        Ok(EmbeddingTable { vocab, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.matrix.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Writes `header.json`, `vocab.json` and a row-major little-endian f32
    /// matrix. Values are already f32-representable, so the round trip is exact.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = TableHeader { dim: self.dim(), rows: self.len(), dtype: "f32-le".into() };
        std::fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for &v in self.matrix.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(dir.join("matrix.bin"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: TableHeader = serde_json::from_str(&std::fs::read_to_string(dir.join("header.json"))?)?;
        if header.dtype != "f32-le" {
            return Err(CoreError::Config(format!("unsupported embedding dtype {}", header.dtype)));
        }
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let bytes = std::fs::read(dir.join("matrix.bin"))?;
        if bytes.len() != header.rows * header.dim * 4 {
            return Err(CoreError::Config("embedding matrix size does not match header".into()));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::new(vocab, Tensor::from_vec(header.rows, header.dim, data))
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Trains input-side skip-gram vectors on already-encoded sentences.
pub fn train_skipgram(sentences: &[Vec<usize>], vocab: &Vocabulary, cfg: &SkipGramConfig) -> Result<EmbeddingTable> {
    if cfg.epochs == 0 {
        return Err(CoreError::InsufficientTraining("skip-gram needs at least one epoch".into()));
    }
    if cfg.dim < 2 {
        return Err(CoreError::InvalidArgument("embedding dim must be at least 2".into()));
    }
    let total: usize = sentences.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(CoreError::EmptyCorpus);
    }
    if total <= cfg.window {
        return Err(CoreError::InsufficientData(format!("{total} tokens for window {}", cfg.window)));
    }
    let v = vocab.len();
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..v * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0; v * d];

    // Noise distribution: unigram counts raised to 3/4.
    let mut counts = vec![0usize; v];
    for s in sentences {
        for &t in s {
            counts[t] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(v);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let sample_noise = |rng: &mut ChaCha8Rng| -> usize {
        let r = rng.gen::<f64>() * acc;
        cumulative.partition_point(|&c| c <= r).min(v - 1)
    };

    let steps_total = (cfg.epochs * total) as f64;
    let mut processed = 0usize;
    let mut grad_in = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for s in sentences {
            for (i, &center) in s.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - processed as f64 / steps_total)).max(cfg.learning_rate * 1e-4);
                processed += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(s.len());
                for (j, &ctx) in s.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let vin = center * d;
                    for k in 0..=cfg.negative_samples {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = sample_noise(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let vout = target * d;
                        let score = sigmoid(dot(&input[vin..vin + d], &output[vout..vout + d]));
                        let g = lr * (label - score);
                        for q in 0..d {
                            grad_in[q] += g * output[vout + q];
                            output[vout + q] += g * input[vin + q];
                        }
                    }
                    for q in 0..d {
                        input[vin + q] += grad_in[q];
                    }
                }
            }
        }
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::TrainingDiverged { at: cfg.epochs });
    }
    let data = input.into_iter().map(round_f32).collect();
    EmbeddingTable::new(vocab.clone(), Tensor::from_vec(v, d, data))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    dot(a, b) / (na * nb)
}

/// Non-special row with the highest cosine similarity; ties go to the lowest id.
pub fn nearest_token(table: &EmbeddingTable, vector: &[f64]) -> Result<usize> {
    if vector.len() != table.dim() {
        return Err(CoreError::InvalidArgument(format!("query dim {} != table dim {}", vector.len(), table.dim())));
    }
    if dot(vector, vector) == 0.0 || vector.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::DegenerateQuery);
    }
    let mut best = None;
    let mut best_sim = f64::NEG_INFINITY;
    for id in NUM_SPECIALS..table.len() {
        let sim = cosine(table.row(id), vector);
        if sim > best_sim {
            best_sim = sim;
            best = Some(id);
        }
    }
    best.ok_or(CoreError::DegenerateQuery)
}

/// One row per position.
pub fn embed_sequence(table: &EmbeddingTable, ids: &[usize]) -> Tensor {
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(ids.len(), d, data)
}

pub fn decode_sequence(table: &EmbeddingTable, rows: &Tensor) -> Result<Vec<usize>> {
    (0..rows.rows()).map(|r| nearest_token(table, rows.row(r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, Segmentation};
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let s: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        build_vocabulary(&[s], 100, Segmentation::Word).unwrap()
    }

    fn table_from(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        let words: Vec<String> = (0..rows.len() - NUM_SPECIALS).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let vocab = vocab_of(&refs);
        let d = rows[0].len();
        let n = rows.len();
        EmbeddingTable::new(vocab, Tensor::from_vec(n, d, rows.concat())).unwrap()
    }

    fn cluster_corpus(seed: u64) -> (Vocabulary, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ["red", "green", "blue"];
        let b = ["cat", "dog", "cow"];
        let vocab = vocab_of(&["red", "green", "blue", "cat", "dog", "cow"]);
        let sents = (0..300)
            .map(|i| {
                let group = if i % 2 == 0 { &a } else { &b };
                (0..6).map(|_| vocab.id(group[rng.gen_range(0..3)]).unwrap()).collect()
            })
            .collect();
        (vocab, sents)
    }

    #[test]
    fn topic_clusters_separate() {
        let (vocab, sents) = cluster_corpus(3);
        let cfg = SkipGramConfig { dim: 8, window: 2, epochs: 5, ..Default::default() };
        let t = train_skipgram(&sents, &vocab, &cfg).unwrap();
        let ids_a: Vec<usize> = ["red", "green", "blue"].iter().map(|w| vocab.id(w).unwrap()).collect();
        let ids_b: Vec<usize> = ["cat", "dog", "cow"].iter().map(|w| vocab.id(w).unwrap()).collect();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for (gi, g) in [&ids_a, &ids_b].iter().enumerate() {
            for (i, &x) in g.iter().enumerate() {
                for &y in &g[i + 1..] {
                    intra.push(cosine(t.row(x), t.row(y)));
                }
                if gi == 0 {
                    for &y in &ids_b {
                        inter.push(cosine(t.row(x), t.row(y)));
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&intra) > mean(&inter), "intra {} inter {}", mean(&intra), mean(&inter));
    }

    #[test]
    fn deterministic_and_guarded() {
        let (vocab, sents) = cluster_corpus(1);
        let cfg = SkipGramConfig { dim: 4, window: 2, epochs: 1, ..Default::default() };
        let a = train_skipgram(&sents, &vocab, &cfg).unwrap();
        let b = train_skipgram(&sents, &vocab, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!((0..a.len()).all(|r| a.row(r).iter().any(|&x| x != 0.0)));
        let zero = SkipGramConfig { epochs: 0, ..cfg.clone() };
        assert!(matches!(train_skipgram(&sents, &vocab, &zero), Err(CoreError::InsufficientTraining(_))));
        let tiny = vec![vec![4usize, 5]];
        assert!(matches!(train_skipgram(&tiny, &vocab, &cfg), Err(CoreError::InsufficientData(_))));
    }

    #[test]
    fn save_load_exact() {
        let (vocab, sents) = cluster_corpus(2);
        let cfg = SkipGramConfig { dim: 4, window: 2, epochs: 1, ..Default::default() };
        let t = train_skipgram(&sents, &vocab, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(EmbeddingTable::load(dir.path()).unwrap(), t);
    }

    #[test]
    fn nearest_examples() {
        let mut rows = vec![vec![0.3, 0.1, 0.2]; NUM_SPECIALS];
        rows.push(vec![1.0, 0.0, 0.0]);
        rows.push(vec![0.0, 1.0, 0.0]);
        rows.push(vec![0.0, 0.0, 1.0]);
        let t = table_from(rows);
        for k in NUM_SPECIALS..t.len() {
            assert_eq!(nearest_token(&t, t.row(k)).unwrap(), k);
            let scaled: Vec<f64> = t.row(k).iter().map(|x| 5.0 * x).collect();
            assert_eq!(nearest_token(&t, &scaled).unwrap(), k);
        }
        assert!(matches!(nearest_token(&t, &[0.0, 0.0, 0.0]), Err(CoreError::DegenerateQuery)));
        // Specials are never returned even when they match exactly.
        assert!(nearest_token(&t, &[0.3, 0.1, 0.2]).unwrap() >= NUM_SPECIALS);
    }

    #[test]
    fn embed_sequence_examples() {
        let mut rows = vec![vec![0.5, 0.5]; NUM_SPECIALS];
        rows.push(vec![1.0, 2.0]);
        let t = table_from(rows);
        let e = embed_sequence(&t, &[4]);
        assert_eq!(e.row(0), t.row(4));
        assert_eq!(embed_sequence(&t, &[]).rows(), 0);
        let e = embed_sequence(&t, &[4, 4]);
        assert_eq!(e.row(0), e.row(1));
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(vals in proptest::collection::vec(-1.0f64..1.0, 3 * 3 + 3)) {
            let mut rows = vec![vec![0.1, 0.1, 0.1]; NUM_SPECIALS];
            for r in 0..3 {
                rows.push(vals[r * 3..r * 3 + 3].to_vec());
            }
            let q = &vals[9..12];
            prop_assume!(dot(q, q) > 1e-9);
            prop_assume!(rows[NUM_SPECIALS..].iter().all(|r| dot(r, r) > 1e-9));
            let t = table_from(rows.clone());
            let mut best = NUM_SPECIALS;
            for k in NUM_SPECIALS..rows.len() {
                let c = dot(&rows[k], q) / (dot(&rows[k], &rows[k]).sqrt() * dot(q, q).sqrt());
                let cb = dot(&rows[best], q) / (dot(&rows[best], &rows[best]).sqrt() * dot(q, q).sqrt());
                if c > cb {
                    best = k;
                }
            }
            prop_assert_eq!(nearest_token(&t, q).unwrap(), best);
        }

        #[test]
        fn decode_of_embed_is_identity(vals in proptest::collection::vec(-1.0f64..1.0, 4 * 5), seq in proptest::collection::vec(0usize..5, 0..10)) {
            let mut rows = vec![vec![0.0, 0.0, 0.0, 1.0]; NUM_SPECIALS];
            for r in 0..5 {
                rows.push(vals[r * 4..r * 4 + 4].to_vec());
            }
            // Require pairwise non-parallel rows.
            for i in NUM_SPECIALS..rows.len() {
                prop_assume!(dot(&rows[i], &rows[i]) > 1e-6);
                for j in NUM_SPECIALS..i {
                    prop_assume!(cosine(&rows[i], &rows[j]) < 1.0 - 1e-9);
                }
            }
            let t = table_from(rows);
            let ids: Vec<usize> = seq.iter().map(|s| s + NUM_SPECIALS).collect();
            prop_assert_eq!(decode_sequence(&t, &embed_sequence(&t, &ids)).unwrap(), ids);
        }
    }
}

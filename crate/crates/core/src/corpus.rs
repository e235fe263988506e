//! Tokenization, vocabularies, corpus files and deterministic splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    #[default]
    Word,
    Char,
}

/// Splits `text` into tokens. Word mode splits on whitespace runs; char mode
/// yields one token per extended grapheme cluster, skipping whitespace.
pub fn tokenize(text: &str, mode: Segmentation) -> Result<Vec<String>> {
    let toks: Vec<String> = match mode {
        Segmentation::Word => text.split_whitespace().map(str::to_owned).collect(),
        Segmentation::Char => text
            .graphemes(true)
            .filter(|g| !g.chars().all(char::is_whitespace))
            .map(str::to_owned)
            .collect(),
    };
    if toks.is_empty() {
        return Err(CoreError::EmptySentence);
    }
    Ok(toks)
}

/// Joins tokens back into display text.
pub fn detokenize(tokens: &[String], mode: Segmentation) -> String {
    match mode {
        Segmentation::Word => tokens.join(" "),
        Segmentation::Char => tokens.concat(),
    }
}

/// Token ↔ id map. Ids `0..4` are PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    segmentation: Segmentation,
    max_size: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabManifest {
    segmentation: Segmentation,
    max_size: usize,
    tokens: Vec<String>,
    specials: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct SpecialIds {
    pad: usize,
    bos: usize,
    eos: usize,
    unk: usize,
}

impl Vocabulary {
    fn from_tokens(segmentation: Segmentation, max_size: usize, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { segmentation, max_size, tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_token(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Tokenizes and encodes raw text.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.encode(&tokenize(text, self.segmentation)?))
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        detokenize(&self.decode(ids), self.segmentation)
    }

    pub fn to_json(&self) -> Result<String> {
        let m = VocabManifest {
            segmentation: self.segmentation,
            max_size: self.max_size,
            tokens: self.tokens.clone(),
            specials: SpecialIds { pad: PAD, bos: BOS, eos: EOS, unk: UNK },
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: VocabManifest = serde_json::from_str(s)?;
        if (m.specials.pad, m.specials.bos, m.specials.eos, m.specials.unk) != (PAD, BOS, EOS, UNK) {
            return Err(CoreError::Config("vocabulary specials must be ids 0..4".into()));
        }
        if m.tokens.len() < NUM_SPECIALS || m.tokens.iter().take(NUM_SPECIALS).ne(SPECIAL_SURFACES.iter()) {
            return Err(CoreError::Config("vocabulary must start with the four special tokens".into()));
        }
        Self::from_tokens(m.segmentation, m.max_size, m.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Keeps the `max_size - 4` most frequent tokens; ties go to the token seen
/// first.
pub fn build_vocabulary(sentences: &[Vec<String>], max_size: usize, segmentation: Segmentation) -> Result<Vocabulary> {
    if max_size < NUM_SPECIALS + 1 {
        return Err(CoreError::InvalidArgument(format!("vocabulary max_size {max_size} leaves no room for tokens")));
    }
    if sentences.iter().all(Vec::is_empty) {
        return Err(CoreError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for s in sentences {
        for t in s {
            let e = counts.entry(t.as_str()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIAL_SURFACES.contains(t))
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut tokens: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - NUM_SPECIALS).map(|(t, _, _)| t.to_owned()));
    Vocabulary::from_tokens(segmentation, max_size, tokens)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialoguePair {
    pub input: Vec<String>,
    pub response: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: Vec<String>,
    pub label: u8,
}

#[derive(Deserialize)]
struct RawDialogue {
    input: String,
    response: String,
}

#[derive(Deserialize)]
struct RawLabeled {
    text: String,
    label: i64,
}

fn read_jsonl<T, R>(path: &Path, mut f: impl FnMut(usize, R) -> Result<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: R = serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: lineno, message: e.to_string() })?;
        out.push(f(lineno, raw)?);
    }
    if out.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    Ok(out)
}

/// Reads `{"input": .., "response": ..}` lines in file order.
pub fn load_dialogue_corpus(path: &Path, mode: Segmentation) -> Result<Vec<DialoguePair>> {
    read_jsonl(path, |_, raw: RawDialogue| {
        Ok(DialoguePair { input: tokenize(&raw.input, mode)?, response: tokenize(&raw.response, mode)? })
    })
}

/// Reads `{"text": .., "label": 0|1}` lines in file order.
pub fn load_sentiment_corpus(path: &Path, mode: Segmentation) -> Result<Vec<LabeledSentence>> {
    read_jsonl(path, |line, raw: RawLabeled| {
        if raw.label != 0 && raw.label != 1 {
            return Err(CoreError::Parse { line, message: format!("label {} not in {{0,1}}", raw.label) });
        }
        Ok(LabeledSentence { text: tokenize(&raw.text, mode)?, label: raw.label as u8 })
    })
}

pub fn write_dialogue_corpus(path: &Path, pairs: &[DialoguePair], mode: Segmentation) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        let line = serde_json::json!({
            "input": detokenize(&p.input, mode),
            "response": detokenize(&p.response, mode),
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sentiment_corpus(path: &Path, items: &[LabeledSentence], mode: Segmentation) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in items {
        let line = serde_json::json!({ "text": detokenize(&s.text, mode), "label": s.label });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    /// Source positions of the test items, ascending.
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle split. Both halves keep source order.
pub fn split_corpus<T: Clone>(items: &[T], test_size: usize, seed: u64) -> Result<CorpusSplit<T>> {
    if test_size == 0 || test_size >= items.len() {
        return Err(CoreError::InvalidSplit { test_size, n: items.len() });
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_indices = idx[..test_size].to_vec();
    test_indices.sort_unstable();
    let mut is_test = vec![false; items.len()];
    for &i in &test_indices {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(items.len() - test_size);
    let mut test = Vec::with_capacity(test_size);
    for (i, it) in items.iter().enumerate() {
        if is_test[i] {
            test.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    Ok(CorpusSplit { train, test, test_indices, seed })
}

/// Truncates to at most `max_len` tokens.
pub fn truncate(ids: &[usize], max_len: usize) -> Vec<usize> {
    ids[..ids.len().min(max_len)].to_vec()
}

/// Id translation between two vocabularies via token surfaces.
#[derive(Clone, Debug)]
pub struct VocabMap(Vec<usize>);

impl VocabMap {
    pub fn new(from: &Vocabulary, to: &Vocabulary) -> Self {
        VocabMap((0..from.len()).map(|i| to.id(from.token(i)).unwrap_or(UNK)).collect())
    }

    pub fn apply(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.0.get(i).copied().unwrap_or(UNK)).collect()
    }
}

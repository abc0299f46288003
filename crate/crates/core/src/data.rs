//! Prompt corpus loading, tokenization and the n-gram proposal table.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub type TokenId = u32;

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Domain(format!(
                "token {t} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

impl AsRef<[TokenId]> for TokenSequence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub sequence: TokenSequence,
    pub truncated: bool,
}

/// Byte-level tokenizer, or a word-level top-K vocabulary with id 0 as the
/// unknown-word token.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    Bytes,
    Words {
        words: Vec<String>,
        index: HashMap<String, TokenId>,
    },
}

pub const UNKNOWN_WORD: &str = "<unk>";

impl Tokenizer {
    /// Word vocabulary of the `vocab_size - 1` most frequent
    /// whitespace-separated words in `texts`, ties in lexicographic order.
    pub fn fit_words<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(
                "word vocabulary needs at least 2 entries".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words = vec![UNKNOWN_WORD.to_string()];
        words.extend(
            ranked
                .into_iter()
                .take(vocab_size - 1)
                .map(|(w, _)| w.to_string()),
        );
        let mut filler = 0;
        while words.len() < vocab_size {
            words.push(format!("<pad{filler}>"));
            filler += 1;
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Ok(Tokenizer::Words { words, index })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => BYTE_VOCAB,
            Tokenizer::Words { words, .. } => words.len(),
        }
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokenized> {
        if text.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut ids: Vec<TokenId> = match self {
            Tokenizer::Bytes => text.bytes().map(TokenId::from).collect(),
            Tokenizer::Words { index, .. } => text
                .split_whitespace()
                .map(|w| index.get(w).copied().unwrap_or(0))
                .collect(),
        };
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let truncated = ids.len() > max_len;
        if truncated {
            log::warn!("prompt of {} tokens truncated to {max_len}", ids.len());
            ids.truncate(max_len);
        }
        Ok(Tokenized {
            sequence: TokenSequence::new(ids, self.vocab_size())?,
            truncated,
        })
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        match self {
            Tokenizer::Bytes => {
                let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Words { words, .. } => tokens
                .iter()
                .map(|&t| words.get(t as usize).map_or(UNKNOWN_WORD, String::as_str))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Byte-level tokenization without a length cap.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    Ok(Tokenizer::Bytes.tokenize(text, usize::MAX)?.sequence)
}

pub fn detokenize(tokens: &[TokenId]) -> String {
    Tokenizer::Bytes.detokenize(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: String,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_tune_count")]
    pub tune_count: usize,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    #[serde(default = "default_corpus_seed")]
    pub seed: u64,
}

fn default_max_len() -> usize {
    50
}
fn default_tune_count() -> usize {
    50
}
fn default_eval_count() -> usize {
    200
}
fn default_corpus_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub tokens: TokenSequence,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tune: Vec<Prompt>,
    pub eval: Vec<Prompt>,
}

impl Corpus {
    pub fn tune_tokens(&self) -> Vec<TokenSequence> {
        self.tune.iter().map(|p| p.tokens.clone()).collect()
    }

    pub fn eval_tokens(&self) -> Vec<TokenSequence> {
        self.eval.iter().map(|p| p.tokens.clone()).collect()
    }
}

/// Parses one prompt per line; lines that look like JSON objects are read
/// through their `"text"` field.
pub fn parse_prompts(contents: &str) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Line {
        text: String,
    }
    let mut out = Vec::new();
    for line in contents.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let text = if line.trim_start().starts_with('{') {
            serde_json::from_str::<Line>(line)?.text
        } else {
            line.to_string()
        };
        if !text.is_empty() {
            out.push(text);
        }
    }
    Ok(out)
}

pub fn split_corpus(
    texts: Vec<String>,
    tokenizer: &Tokenizer,
    config: &CorpusConfig,
) -> Result<Corpus> {
    let mut prompts = Vec::with_capacity(texts.len());
    for text in texts {
        match tokenizer.tokenize(&text, config.max_len) {
            Ok(t) => prompts.push(Prompt {
                text,
                tokens: t.sequence,
                truncated: t.truncated,
            }),
            Err(Error::EmptyInput) => continue,
            Err(e) => return Err(e),
        }
    }
    if prompts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = SeededRng::new(config.seed).substream("corpus-split");
    prompts.shuffle(&mut rng);
    let tune_n = config.tune_count.min(prompts.len());
    let rest = prompts.split_off(tune_n);
    let eval: Vec<Prompt> = rest.into_iter().take(config.eval_count).collect();
    Ok(Corpus {
        tune: prompts,
        eval,
    })
}

pub fn load_corpus(config: &CorpusConfig) -> Result<Corpus> {
    load_corpus_with(config, &Tokenizer::Bytes)
}

pub fn load_corpus_with(config: &CorpusConfig, tokenizer: &Tokenizer) -> Result<Corpus> {
    let path = Path::new(&config.path);
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    split_corpus(parse_prompts(&contents)?, tokenizer, config)
}

/// Count-based next-token ranking with lexicographic backoff.
///
/// Candidates are ordered by their count after the longest context,
/// then by counts after successively shorter contexts, then by unigram
/// count, then by ascending id. Add-one smoothing leaves this order
/// unchanged, and unseen contexts reduce to the unigram order.
#[derive(Clone, Debug)]
pub struct ProposalTable {
    order: usize,
    vocab_size: usize,
    // index 0: unigram; index k: contexts of length k.
    tables: Vec<HashMap<Vec<TokenId>, Vec<u32>>>,
}

pub fn build_ngram_proposal(
    tune: &[TokenSequence],
    order: usize,
    vocab_size: usize,
) -> Result<ProposalTable> {
    if !(1..=3).contains(&order) {
        return Err(Error::Domain(format!("n-gram order {order} not in 1..=3")));
    }
    if tune.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tables: Vec<HashMap<Vec<TokenId>, Vec<u32>>> = vec![HashMap::new(); order];
    for seq in tune {
        let toks = seq.as_slice();
        for i in 0..toks.len() {
            let next = toks[i] as usize;
            if next >= vocab_size {
                return Err(Error::Domain(format!("token {next} outside vocabulary")));
            }
            for (k, table) in tables.iter_mut().enumerate() {
                if k > i {
                    break;
                }
                let ctx = toks[i - k..i].to_vec();
                table.entry(ctx).or_insert_with(|| vec![0; vocab_size])[next] += 1;
            }
        }
    }
    Ok(ProposalTable {
        order,
        vocab_size,
        tables,
    })
}

impl ProposalTable {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Total order over the vocabulary for the next token after `prefix`.
    pub fn ranked(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let rows: Vec<&Vec<u32>> = (0..self.order)
            .rev()
            .filter(|&k| k <= prefix.len())
            .filter_map(|k| self.tables[k].get(&prefix[prefix.len() - k..]))
            .collect();
        let mut ids: Vec<TokenId> = (0..self.vocab_size as TokenId).collect();
        ids.sort_by(|&a, &b| {
            for row in &rows {
                let c = row[b as usize].cmp(&row[a as usize]);
                if c.is_ne() {
                    return c;
                }
            }
            a.cmp(&b)
        });
        ids
    }

    /// Zero-based rank of `token` in `ranked(prefix)`.
    pub fn rank_of(&self, prefix: &[TokenId], token: TokenId) -> usize {
        self.ranked(prefix)
            .iter()
            .position(|&t| t == token)
            .unwrap_or(self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_ascii() {
        assert_eq!(tokenize("AB").unwrap().as_slice(), &[65, 66]);
        assert!(matches!(tokenize(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn truncation_flag() {
        let t = Tokenizer::Bytes.tokenize("abcdef", 4).unwrap();
        assert!(t.truncated);
        assert_eq!(t.sequence.as_slice(), &[97, 98, 99, 100]);
        assert!(!Tokenizer::Bytes.tokenize("abc", 4).unwrap().truncated);
    }

    #[test]
    fn token_sequence_validates_ids() {
        assert!(TokenSequence::new(vec![300], 256).is_err());
        assert!(TokenSequence::new(vec![], 256).is_err());
    }

    proptest! {
        #[test]
        fn byte_roundtrip(s in "\\PC{1,60}") {
            let toks = tokenize(&s).unwrap();
            prop_assert_eq!(detokenize(toks.as_slice()), s);
        }
    }

    #[test]
    fn word_tokenizer() {
        let texts = ["the cat sat", "the dog sat", "the end"];
        let tok = Tokenizer::fit_words(&texts, 4).unwrap();
        assert_eq!(tok.vocab_size(), 4);
        let ids = tok.tokenize("the sat zebra", 10).unwrap().sequence;
        assert_eq!(ids.as_slice(), &[1, 2, 0]);
        assert_eq!(tok.detokenize(ids.as_slice()), "the sat <unk>");
    }

    fn lines(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| format!("prompt number {i} says hello"))
            .collect()
    }

    fn cfg(path: &str) -> CorpusConfig {
        CorpusConfig {
            path: path.into(),
            max_len: 50,
            tune_count: 50,
            eval_count: 200,
            seed: 1,
        }
    }

    #[test]
    fn split_sizes_disjoint_and_deterministic() {
        let c = split_corpus(lines(250), &Tokenizer::Bytes, &cfg("")).unwrap();
        assert_eq!((c.tune.len(), c.eval.len()), (50, 200));
        let tune: std::collections::HashSet<_> = c.tune.iter().map(|p| &p.text).collect();
        assert!(c.eval.iter().all(|p| !tune.contains(&p.text)));
        let again = split_corpus(lines(250), &Tokenizer::Bytes, &cfg("")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn jsonl_and_text_are_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("p.txt");
        let jsonl = dir.path().join("p.jsonl");
        let texts = lines(60);
        std::fs::write(&txt, texts.join("\n")).unwrap();
        let js: Vec<String> = texts
            .iter()
            .map(|t| serde_json::json!({ "text": t }).to_string())
            .collect();
        std::fs::write(&jsonl, js.join("\n")).unwrap();
        let a = load_corpus(&cfg(txt.to_str().unwrap())).unwrap();
        let b = load_corpus(&cfg(jsonl.to_str().unwrap())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_errors() {
        assert!(matches!(
            load_corpus(&cfg("/nonexistent/prompts.txt")),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            split_corpus(vec![], &Tokenizer::Bytes, &cfg("")),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn ngram_learns_bigram() {
        let seqs = vec![tokenize("abababab").unwrap()];
        let table = build_ngram_proposal(&seqs, 2, 256).unwrap();
        assert_eq!(table.ranked(&[97])[0], 98);
        assert_eq!(table.ranked(&[98])[0], 97);
        let order = table.ranked(&[200]);
        // unseen context: unigram order, a and b tied on count -> id order
        assert_eq!(&order[..3], &[97, 98, 0]);
        assert_eq!(table.ranked(&[]), order);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn ngram_rejects_bad_order() {
        let seqs = vec![tokenize("ab").unwrap()];
        assert!(build_ngram_proposal(&seqs, 0, 256).is_err());
        assert!(build_ngram_proposal(&seqs, 4, 256).is_err());
        assert!(matches!(
            build_ngram_proposal(&[], 2, 256),
            Err(Error::EmptyCorpus)
        ));
    }
}

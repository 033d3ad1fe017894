//! Dialogue data: tokenization, datasets, response sets and their statistics.
//!
//! All text goes through one rule-based word tokenizer ([`tokenize`]) so the
//! teacher, the retriever and the diversity metrics count tokens the same way.

mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{G2rError, Result};
use crate::rng::sha256_hex;

pub use synthetic::{generate_synthetic, SyntheticWorld};
pub use vocab::{Vocab, EOS, PAD, RESERVED, SEP, UNK};

/// History window applied to contexts unless configured otherwise.
pub const DEFAULT_MAX_TURNS: usize = 3;

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character into its own token.
///
/// ```
/// assert_eq!(g2r::corpus::tokenize("Hello, world!"), ["hello", ",", "world", "!"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Space-joins tokens. `tokenize(&detokenize(&tokenize(s))) == tokenize(s)`.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Canonical form used for response deduplication.
pub fn canonical(tokens: &[String]) -> String {
    detokenize(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    turns: Vec<Vec<String>>,
    max_turns: usize,
}

impl Context {
    /// Builds a context from tokenized turns. Empty turns are dropped.
    pub fn new(turns: Vec<Vec<String>>) -> Result<Self> {
        Self::with_max_turns(turns, DEFAULT_MAX_TURNS)
    }

    pub fn with_max_turns(turns: Vec<Vec<String>>, max_turns: usize) -> Result<Self> {
        if max_turns == 0 {
            return Err(G2rError::invalid("max_turns must be at least 1"));
        }
        let turns: Vec<Vec<String>> = turns.into_iter().filter(|t| !t.is_empty()).collect();
        if turns.is_empty() {
            return Err(G2rError::Empty("context has no tokens".into()));
        }
        Ok(Context { turns, max_turns })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        Self::new(texts.iter().map(|t| tokenize(t.as_ref())).collect())
    }

    /// All stored turns, including those outside the window.
    pub fn all_turns(&self) -> &[Vec<String>] {
        &self.turns
    }

    /// The last `max_turns` turns; what models see.
    pub fn turns(&self) -> &[Vec<String>] {
        let start = self.turns.len().saturating_sub(self.max_turns);
        &self.turns[start..]
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn set_max_turns(&mut self, max_turns: usize) -> Result<()> {
        if max_turns == 0 {
            return Err(G2rError::invalid("max_turns must be at least 1"));
        }
        self.max_turns = max_turns;
        Ok(())
    }

    /// Windowed turns flattened into one token stream.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.turns().iter().flatten()
    }

    /// Key identifying the windowed context; pairs sharing it are one context.
    pub fn key(&self) -> String {
        self.turns()
            .iter()
            .map(|t| t.join(" "))
            .collect::<Vec<_>>()
            .join(" \u{1f} ")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Original,
    TeacherGenerated,
    RetrieverAugmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialoguePair {
    pub context: Context,
    pub response: Vec<String>,
    pub source: Source,
    /// Cached teacher quality score in nats per token.
    pub teacher_score: Option<f64>,
}

impl DialoguePair {
    pub fn new(context: Context, response: Vec<String>, source: Source) -> Result<Self> {
        if response.is_empty() {
            return Err(G2rError::Empty("response has no tokens".into()));
        }
        Ok(DialoguePair {
            context,
            response,
            source,
            teacher_score: None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueDataset {
    pub pairs: Vec<DialoguePair>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    context: Vec<String>,
    response: String,
    #[serde(default)]
    source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    teacher_score: Option<f64>,
}

impl DialogueDataset {
    pub fn new(pairs: Vec<DialoguePair>, split: Split) -> Result<Self> {
        if pairs.is_empty() {
            return Err(G2rError::Empty("dataset has no pairs".into()));
        }
        Ok(DialogueDataset { pairs, split })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_jsonl(text: &str, split: Split) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let parse_err = |message: String| G2rError::Parse {
                line: line_no,
                message,
            };
            let rec: PairRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let context = Context::from_texts(&rec.context).map_err(|e| parse_err(e.to_string()))?;
            let mut pair = DialoguePair::new(context, tokenize(&rec.response), rec.source)
                .map_err(|e| parse_err(e.to_string()))?;
            if let Some(s) = rec.teacher_score {
                if !s.is_finite() {
                    return Err(parse_err("teacher_score is not finite".into()));
                }
            }
            pair.teacher_score = rec.teacher_score;
            pairs.push(pair);
        }
        DialogueDataset::new(pairs, split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let rec = PairRecord {
                context: p.context.all_turns().iter().map(|t| detokenize(t)).collect(),
                response: detokenize(&p.response),
                source: p.source,
                teacher_score: p.teacher_score,
            };
            out.push_str(&serde_json::to_string(&rec).expect("pair record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| G2rError::io(path, e))
    }

    /// SHA-256 of the canonical JSONL serialization.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    /// Sets the history window on every context.
    pub fn set_max_turns(&mut self, max_turns: usize) -> Result<()> {
        for p in &mut self.pairs {
            p.context.set_max_turns(max_turns)?;
        }
        Ok(())
    }

    /// Contiguous train/valid/test partition. The tail goes to test, the
    /// block before it to valid.
    pub fn split_three(self, valid_frac: f64, test_frac: f64) -> Result<[DialogueDataset; 3]> {
        if !(0.0..1.0).contains(&valid_frac)
            || !(0.0..1.0).contains(&test_frac)
            || valid_frac + test_frac >= 1.0
        {
            return Err(G2rError::invalid("split fractions must be in [0,1) and sum below 1"));
        }
        let n = self.pairs.len();
        let n_test = ((n as f64) * test_frac).round() as usize;
        let n_valid = ((n as f64) * valid_frac).round() as usize;
        let n_train = n.saturating_sub(n_test + n_valid);
        if n_train == 0 || n_valid == 0 || n_test == 0 {
            return Err(G2rError::invalid(format!("{n} pairs are too few to split")));
        }
        let mut pairs = self.pairs;
        let test = pairs.split_off(n_train + n_valid);
        let valid = pairs.split_off(n_train);
        Ok([
            DialogueDataset::new(pairs, Split::Train)?,
            DialogueDataset::new(valid, Split::Valid)?,
            DialogueDataset::new(test, Split::Test)?,
        ])
    }
}

/// Reads a JSONL dataset; one pair per non-blank line, order preserved.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<DialogueDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| G2rError::io(path, e))?;
    DialogueDataset::from_jsonl(&text, split)
}

pub fn save_dataset(dataset: &DialogueDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.save(path)
}

/// Deduplicated response repository with dense ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResponseSet {
    responses: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ResponseRecord {
    id: usize,
    response: String,
}

impl ResponseSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a response unless its canonical form is present; returns its id.
    pub fn insert(&mut self, tokens: &[String]) -> usize {
        let key = canonical(tokens);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.responses.len();
        self.responses.push(tokens.to_vec());
        self.index.insert(key, id);
        id
    }

    pub fn id_of(&self, tokens: &[String]) -> Option<usize> {
        self.index.get(&canonical(tokens)).copied()
    }

    pub fn get(&self, id: usize) -> Option<&[String]> {
        self.responses.get(id).map(Vec::as_slice)
    }

    pub fn responses(&self) -> &[Vec<String>] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, r) in self.responses.iter().enumerate() {
            let rec = ResponseRecord {
                id,
                response: detokenize(r),
            };
            out.push_str(&serde_json::to_string(&rec).expect("response record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut set = ResponseSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| G2rError::Parse { line: i + 1, message };
            let rec: ResponseRecord =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let tokens = tokenize(&rec.response);
            if tokens.is_empty() {
                return Err(parse_err("empty response".into()));
            }
            if rec.id != set.len() {
                return Err(parse_err(format!("expected id {}, found {}", set.len(), rec.id)));
            }
            if set.insert(&tokens) != rec.id {
                return Err(parse_err("duplicate response".into()));
            }
        }
        if set.is_empty() {
            return Err(G2rError::Empty("response set file has no entries".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| G2rError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| G2rError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Collects the dataset's responses, collapsing exact duplicates under the
/// canonical form. Ids follow first appearance.
pub fn build_response_set(dataset: &DialogueDataset) -> ResponseSet {
    let mut set = ResponseSet::new();
    for p in &dataset.pairs {
        set.insert(&p.response);
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_responses: usize,
    pub avg_length: f64,
    pub total_tokens: usize,
    pub unique_tokens: usize,
    pub total_bigrams: usize,
    pub unique_bigrams: usize,
    pub total_trigrams: usize,
    pub unique_trigrams: usize,
}

/// Token and n-gram counts; n-grams never span two responses.
pub fn corpus_stats(set: &ResponseSet) -> Result<CorpusStats> {
    if set.is_empty() {
        return Err(G2rError::Empty("response set is empty".into()));
    }
    let mut unigrams: HashSet<&str> = HashSet::new();
    let mut bigrams: HashSet<(&str, &str)> = HashSet::new();
    let mut trigrams: HashSet<(&str, &str, &str)> = HashSet::new();
    let (mut total, mut total_bi, mut total_tri) = (0, 0, 0);
    for r in set.responses() {
        total += r.len();
        unigrams.extend(r.iter().map(String::as_str));
        for w in r.windows(2) {
            bigrams.insert((&w[0], &w[1]));
            total_bi += 1;
        }
        for w in r.windows(3) {
            trigrams.insert((&w[0], &w[1], &w[2]));
            total_tri += 1;
        }
    }
    Ok(CorpusStats {
        n_responses: set.len(),
        avg_length: total as f64 / set.len() as f64,
        total_tokens: total,
        unique_tokens: unigrams.len(),
        total_bigrams: total_bi,
        unique_bigrams: bigrams.len(),
        total_trigrams: total_tri,
        unique_trigrams: trigrams.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn pair(ctx: &str, resp: &str) -> DialoguePair {
        DialoguePair::new(Context::from_texts(&[ctx]).unwrap(), toks(resp), Source::Original).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hello, world!"), ["hello", ",", "world", "!"]);
        assert_eq!(tokenize("A  A"), ["a", "a"]);
        assert_eq!(tokenize("don't\tstop\n"), ["don", "'", "t", "stop"]);
    }

    #[test]
    fn context_window_keeps_last_turns() {
        let ctx = Context::from_texts(&["a", "b", "c", "d"]).unwrap();
        assert_eq!(ctx.all_turns().len(), 4);
        assert_eq!(ctx.turns().len(), DEFAULT_MAX_TURNS);
        assert_eq!(ctx.tokens().cloned().collect::<Vec<_>>(), ["b", "c", "d"]);
        assert!(Context::from_texts(&["", "  "]).is_err());
    }

    #[test]
    fn response_set_dedup() {
        let ds = DialogueDataset::new(
            vec![pair("x", "hi there"), pair("y", "hi there"), pair("z", "bye")],
            Split::Train,
        )
        .unwrap();
        assert_eq!(build_response_set(&ds).len(), 2);

        let ds = DialogueDataset::new(vec![pair("x", "Hi!"), pair("y", "hi !")], Split::Train).unwrap();
        assert_eq!(build_response_set(&ds).len(), 1);

        let ds = DialogueDataset::new(vec![pair("x", "solo")], Split::Train).unwrap();
        assert_eq!(build_response_set(&ds).len(), 1);
    }

    #[test]
    fn stats_examples() {
        let mut set = ResponseSet::new();
        set.insert(&toks("a b"));
        set.insert(&toks("b c"));
        let s = corpus_stats(&set).unwrap();
        assert_eq!(s.unique_tokens, 3);
        assert_eq!(s.unique_bigrams, 2);
        assert_eq!(s.avg_length, 2.0);
        assert_eq!(s.unique_trigrams, 0);

        let mut single = ResponseSet::new();
        single.insert(&toks("a"));
        let s = corpus_stats(&single).unwrap();
        assert_eq!((s.unique_bigrams, s.unique_trigrams), (0, 0));

        assert!(corpus_stats(&ResponseSet::new()).is_err());
    }

    #[test]
    fn jsonl_parse_errors_name_the_line() {
        let text = "{\"context\":[\"hi\"],\"response\":\"yo\"}\n{\"context\":[\"hi\"]}\n";
        match DialogueDataset::from_jsonl(text, Split::Train) {
            Err(G2rError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            DialogueDataset::from_jsonl("", Split::Train),
            Err(G2rError::Empty(_))
        ));
    }

    #[test]
    fn teacher_score_passthrough() {
        let text = "{\"context\":[\"hi\"],\"response\":\"yo\",\"teacher_score\":-1.25}\n\
                    {\"context\":[\"a\",\"b\"],\"response\":\"c\",\"source\":\"teacher_generated\"}\n";
        let ds = DialogueDataset::from_jsonl(text, Split::Valid).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.pairs[0].teacher_score, Some(-1.25));
        assert_eq!(ds.pairs[1].source, Source::TeacherGenerated);
        assert_eq!(ds.split, Split::Valid);
    }

    #[test]
    fn response_set_file_rejects_gaps() {
        assert!(ResponseSet::from_jsonl("{\"id\":1,\"response\":\"a\"}\n").is_err());
        let set = ResponseSet::from_jsonl("{\"id\":0,\"response\":\"a b\"}\n").unwrap();
        assert_eq!(set.get(0).unwrap(), ["a", "b"]);
    }

    #[test]
    fn split_three_partitions() {
        let pairs: Vec<_> = (0..10).map(|i| pair(&format!("c{i}"), &format!("r{i}"))).collect();
        let ds = DialogueDataset::new(pairs, Split::Train).unwrap();
        let [tr, va, te] = ds.split_three(0.2, 0.1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 2, 1));
        assert_eq!(te.split, Split::Test);
        assert_eq!(te.pairs[0].response, ["r9"]);
    }
}

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::{Context, DialogueDataset};
use crate::error::{G2rError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;

/// Surface forms of the reserved ids. The tokenizer never produces them,
/// since `<` and `>` are always split off as punctuation.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<eos>"];

/// Token ↔ id map shared by the teacher and the retriever.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved ids first, then every dataset token in lexicographic order.
    pub fn from_dataset(dataset: &DialogueDataset) -> Self {
        let mut seen = BTreeSet::new();
        for p in &dataset.pairs {
            for turn in p.context.all_turns() {
                seen.extend(turn.iter().map(String::as_str));
            }
            seen.extend(p.response.iter().map(String::as_str));
        }
        Self::from_words(seen)
    }

    fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(w)).map(str::to_string));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuilds a vocabulary from its full token table (reserved ids included).
    pub fn from_table(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(G2rError::Format("vocabulary table lacks reserved tokens".into()));
        }
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(G2rError::Format("duplicate vocabulary entry".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] when out of vocabulary.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Windowed context flattened to ids.
    pub fn context_ids(&self, context: &Context) -> Vec<u32> {
        context.tokens().map(|t| self.id(t)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| G2rError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| G2rError::io(path, e))?;
        Self::from_table(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialoguePair, Source, Split};

    #[test]
    fn reserved_ids_come_first() {
        let ds = DialogueDataset::new(
            vec![DialoguePair::new(
                Context::from_texts(&["b a"]).unwrap(),
                vec!["c".into()],
                Source::Original,
            )
            .unwrap()],
            Split::Train,
        )
        .unwrap();
        let v = Vocab::from_dataset(&ds);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(SEP), "<sep>");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        let back = Vocab::from_table(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
    }
}

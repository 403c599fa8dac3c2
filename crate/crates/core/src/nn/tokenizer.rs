//! Lowercasing whitespace tokenizer with a closed vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const PAD: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[CLS]", "[UNK]", "[SEP]", "[EOS]", "[PAD]"];

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Assigns ids in order of first appearance until `capacity` ids exist;
    /// later words map to `[UNK]`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        if capacity < NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary capacity {capacity} below the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for w in words(text) {
                if tokens.len() >= capacity {
                    break;
                }
                if !index.contains_key(&w) {
                    index.insert(w.clone(), tokens.len());
                    tokens.push(w);
                }
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::Checkpoint("vocabulary must start with the reserved tokens".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[CLS] s1 [EOS]` or `[CLS] s1 [SEP] s2 [EOS]`, truncating the longer
    /// sentence first until the sequence fits in `max_seq`.
    pub fn encode(&self, s1: &str, s2: Option<&str>, max_seq: usize) -> Result<TokenizedInput> {
        let mut a: Vec<usize> = words(s1).iter().map(|w| self.id(w)).collect();
        let mut b: Option<Vec<usize>> = s2.map(|s| words(s).iter().map(|w| self.id(w)).collect());
        let overhead = if b.is_some() { 3 } else { 2 };
        if max_seq < overhead {
            return Err(Error::Length {
                len: overhead,
                max: max_seq,
            });
        }
        let budget = max_seq - overhead;
        loop {
            let total = a.len() + b.as_ref().map_or(0, Vec::len);
            if total <= budget {
                break;
            }
            match &mut b {
                Some(bv) if bv.len() > a.len() => {
                    bv.pop();
                }
                _ => {
                    a.pop();
                }
            }
        }
        let mut ids = Vec::with_capacity(max_seq);
        ids.push(CLS);
        ids.extend(&a);
        let layout = match b {
            Some(bv) => {
                ids.push(SEP);
                ids.extend(&bv);
                Layout::Pair {
                    s1_len: a.len(),
                    s2_len: bv.len(),
                }
            }
            None => Layout::Single { s1_len: a.len() },
        };
        ids.push(EOS);
        Ok(TokenizedInput { ids, layout })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Single { s1_len: usize },
    Pair { s1_len: usize, s2_len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<usize>,
    pub layout: Layout,
}

impl TokenizedInput {
    pub fn is_pair(&self) -> bool {
        matches!(self.layout, Layout::Pair { .. })
    }
}

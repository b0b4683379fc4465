//! Fixed word-level vocabulary shared by the token model and the world model.
//!
//! Tokenization splits lines into whitespace chunks; a chunk that is itself a
//! vocabulary entry becomes one token, otherwise it is broken into letter runs,
//! single digits and single punctuation marks. Detokenization joins tokens with
//! single spaces, attaches closing punctuation to the previous token and
//! renders `<nl>` as a newline, so `tokenize(detokenize(ids)) == ids`.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "<nl>";
pub const UNK: &str = "<unk>";

const SPECIALS: [&str; 4] = [BOS, EOS, NEWLINE, UNK];
const PUNCT: [&str; 6] = [".", ",", ":", "!", "?", "-"];
const ATTACH_LEFT: [&str; 5] = [".", ",", ":", "!", "?"];

const WORDS: &[&str] = &[
    // prompt scaffolding
    "===", "ACTION", "HISTORY", "CURRENT", "OBSERVATION", "INSTRUCTION", "Step", "Observation",
    "Action", "Reward", "Reasoning", "Choose", "from", "Give", "your", "answer", "as", "analysis",
    "one", "valid", "action", "agent", "text", "game", "Describe", "state", "without",
    "choosing", "then", "give",
    // shared
    "You", "are", "in", "a", "an", "the", "The", "is", "to", "and", "A", "It", "at",
    "north", "south", "east", "west",
    // loop trap
    "hallway", "closet", "corridor", "leads", "dark", "empty", "Light", "comes", "exit",
    "escaped",
    // key door
    "cellar", "storeroom", "There", "brass", "key", "here", "gallery", "Old", "paintings",
    "cover", "walls", "hall", "heavy", "door", "locked", "open", "found", "treasure", "room",
    "carry", "go", "take", "unlock", "knock", "look", "wait", "search",
    // grid
    "Your", "goal", "ball", "box", "red", "blue", "green", "yellow", "facing", "see",
    "nothing", "on", "left", "right", "ahead", "turn", "move", "forward",
];

/// Ordered token list with a reverse index.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The built-in vocabulary.
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let tokens: Vec<String> = SPECIALS
                .iter()
                .chain(PUNCT.iter())
                .map(|s| s.to_string())
                .chain((0..10).map(|d| d.to_string()))
                .chain(WORDS.iter().map(|s| s.to_string()))
                .collect();
            Vocab::from_tokens(tokens).expect("built-in vocabulary is well formed")
        })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for s in SPECIALS {
            if !index.contains_key(s) {
                return Err(Error::Malformed(format!("vocabulary lacks {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn newline(&self) -> usize {
        self.index[NEWLINE]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    fn is_special(&self, id: usize) -> bool {
        SPECIALS.iter().any(|s| self.index[*s] == id)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (li, line) in text.split('\n').enumerate() {
            if li > 0 {
                out.push(self.newline());
            }
            for chunk in line.split_whitespace() {
                self.tokenize_chunk(chunk, &mut out);
            }
        }
        out
    }

    fn tokenize_chunk(&self, chunk: &str, out: &mut Vec<usize>) {
        if let Some(id) = self.id(chunk) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphabetic() {
                let start = i;
                while i < chars.len() && chars[i].is_alphabetic() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(self.id(&word).unwrap_or_else(|| self.unk()));
            } else if c.is_ascii_digit() {
                out.push(self.id(&c.to_string()).unwrap_or_else(|| self.unk()));
                i += 1;
            } else {
                // Longest symbol entry (e.g. "===") starting here.
                let mut end = i;
                while end < chars.len() && !chars[end].is_alphanumeric() {
                    end += 1;
                }
                let hit = (i + 1..=end).rev().find_map(|e| {
                    let s: String = chars[i..e].iter().collect();
                    self.id(&s).map(|id| (id, e))
                });
                match hit {
                    Some((id, e)) => {
                        out.push(id);
                        i = e;
                    }
                    None => {
                        out.push(self.unk());
                        i += 1;
                    }
                }
            }
        }
    }

    /// Counts tokens that fell back to `<unk>`.
    pub fn unknown_count(&self, text: &str) -> usize {
        let unk = self.unk();
        self.tokenize(text).into_iter().filter(|&t| t == unk).count()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev: Option<usize> = None;
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.size(),
            })?;
            if id == self.newline() {
                out.push('\n');
                prev = None;
                continue;
            }
            let attach = ATTACH_LEFT.contains(&tok) && prev.is_some_and(|p| !self.is_special(p));
            if prev.is_some() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
            prev = Some(id);
        }
        Ok(out)
    }
}

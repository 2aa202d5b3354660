use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{tokenize, SceneRecord};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<PAD>", "<S>", "<E>", "<UNK>"];

const VOCAB_HEADER: &str = "relcap-vocab\t1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Lowercased caption tokens seen at least `min_count` times, ordered by
    /// descending frequency then lexicographically.
    pub fn build(corpus: &[SceneRecord], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for rec in corpus {
            for cap in &rec.captions {
                for tok in tokenize(cap) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t)).expect("unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `<S> w_1 .. w_n <E>` ids for a caption.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![START];
        ids.extend(tokenize(caption).iter().map(|t| self.id(t)));
        ids.push(END);
        ids
    }

    /// Joins tokens, stopping at `<E>` and skipping `<S>`/`<PAD>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != START && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{VOCAB_HEADER}\n");
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                msg: "missing vocabulary header".into(),
            });
        }
        let tokens: Vec<&str> = lines.collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 2,
                msg: "reserved tokens must open the vocabulary".into(),
            });
        }
        Self::from_tokens(tokens[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

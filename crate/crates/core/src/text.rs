//! Vocabularies for word and POS streams.
//!
//! Id 0 is the shared sentence boundary (START and END are the same token),
//! id 1 is UNK. Regular tokens follow by descending training frequency, ties
//! broken lexicographically.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOUNDARY: &str = "<s>";
pub const UNK: &str = "UNK";
pub const BOUNDARY_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Minimum training frequency for the caption generator's vocabulary.
pub const CAPTION_MIN_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    counts: Vec<usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Builds a vocabulary keeping every token seen at least `min_count` times.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::Empty("vocabulary corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for tok in sentences.iter().flatten() {
            let tok = tok.as_ref();
            if tok == BOUNDARY || tok == UNK {
                continue;
            }
            *freq.entry(tok).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> =
            freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens = vec![BOUNDARY.to_string(), UNK.to_string()];
        let mut counts = vec![0, 0];
        for (tok, c) in kept {
            tokens.push(tok.to_string());
            counts.push(c);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            ids,
            tokens,
            counts,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn count(&self, id: usize) -> Option<usize> {
        self.counts.get(id).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become UNK. No boundaries are added.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// `[BOUNDARY, w_1 … w_n, BOUNDARY]`
    pub fn encode_bounded<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(sentence.len() + 2);
        ids.push(BOUNDARY_ID);
        ids.extend(sentence.iter().map(|t| self.id(t.as_ref())));
        ids.push(BOUNDARY_ID);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// Writes `<id>\t<token>\t<count>` lines, preceded by a `#min_count=` line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("#min_count={}\n", self.min_count);
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{i}\t{t}\t{c}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let mut min_count = 1;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if let Some(v) = line.strip_prefix("#min_count=") {
                min_count = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad min_count"))?;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(id), Some(tok), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err(lineno, "expected <id>\\t<token>\\t<count>"));
            };
            let id: usize = id.parse().map_err(|_| parse_err(lineno, "bad id"))?;
            if id != tokens.len() {
                return Err(parse_err(lineno, "ids must be dense and ordered"));
            }
            tokens.push(tok.to_string());
            counts.push(count.parse().map_err(|_| parse_err(lineno, "bad count"))?);
        }
        if tokens.len() < 2 || tokens[BOUNDARY_ID] != BOUNDARY || tokens[UNK_ID] != UNK {
            return Err(parse_err(1, "special tokens missing"));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            ids,
            tokens,
            counts,
            min_count,
        })
    }
}

/// Part-of-speech tagging for sentences that arrive without tags.
pub trait Tagger: Sync {
    fn tag(&self, tokens: &[String]) -> Vec<String>;
}

/// Word-to-tag table; unknown words get [`LexiconTagger::UNKNOWN_TAG`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LexiconTagger {
    tags: HashMap<String, String>,
}

impl LexiconTagger {
    pub const UNKNOWN_TAG: &'static str = "X";

    pub fn new(tags: HashMap<String, String>) -> Self {
        LexiconTagger { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Writes `<word>\t<tag>` lines sorted by word.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<_> = self.tags.iter().collect();
        entries.sort();
        let mut out = String::new();
        for (w, t) in entries {
            let _ = writeln!(out, "{w}\t{t}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tags = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, t) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected <word>\\t<tag>".into(),
            })?;
            tags.insert(w.to_string(), t.to_string());
        }
        Ok(LexiconTagger { tags })
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|w| {
                self.tags
                    .get(w)
                    .cloned()
                    .unwrap_or_else(|| Self::UNKNOWN_TAG.to_string())
            })
            .collect()
    }
}

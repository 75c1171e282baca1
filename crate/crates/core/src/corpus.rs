//! On-disk datasets: caption records, image features and splits.
//!
//! Caption files are line-delimited JSON, one [`CaptionRecord`] per line.
//! Feature files are plain text: a `dim=<d>` header followed by
//! `<image_id> <v1> … <vd>` lines; vectors are l2-normalized on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluencyLabel {
    Fluent,
    NotFluent,
}

impl FluencyLabel {
    pub fn is_fluent(self) -> bool {
        self == FluencyLabel::Fluent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub sentence_id: String,
    pub language: Language,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
    /// Estimated probability of being fluent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluency: Option<f64>,
    /// Human (consensus) fluency label, present only in labeled sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<FluencyLabel>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "sentence {} has no tokens",
                self.sentence_id
            )));
        }
        if let Some(pos) = &self.pos {
            if pos.len() != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "sentence {} has {} tokens but {} POS tags",
                    self.sentence_id,
                    self.tokens.len(),
                    pos.len()
                )));
            }
        }
        if let Some(f) = self.fluency {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Validation(format!(
                    "sentence {} has fluency {f} outside [0, 1]",
                    self.sentence_id
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_captions(text: &str, origin: &Path) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| match e {
            Error::Validation(m) => {
                Error::Validation(format!("{}:{}: {m}", origin.display(), n + 1))
            }
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions(&text, path)
}

pub fn captions_to_string(records: &[CaptionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        r.validate()?;
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let text = captions_to_string(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub image_id: String,
    pub vector: Vec<f64>,
}

/// Unit-norm copy of `v`; the zero vector has no direction and is rejected.
/// Vectors already at unit norm up to rounding are returned unchanged, so
/// saved features load back bit for bit.
pub fn l2_normalize(image_id: &str, v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector(image_id.to_string()));
    }
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Image features keyed by id, all of one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: BTreeMap<String, ImageFeature>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        FeatureSet {
            dim,
            features: BTreeMap::new(),
        }
    }

    /// Inserts after l2 normalization.
    pub fn insert(&mut self, image_id: &str, raw: &[f64]) -> Result<()> {
        if raw.len() != self.dim {
            return Err(Error::Dimension(format!(
                "feature for {image_id} has {} values, expected {}",
                raw.len(),
                self.dim
            )));
        }
        let vector = l2_normalize(image_id, raw)?;
        self.features.insert(
            image_id.to_string(),
            ImageFeature {
                image_id: image_id.to_string(),
                vector,
            },
        );
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageFeature> {
        self.features.get(image_id)
    }

    pub fn vector(&self, image_id: &str) -> Result<&[f64]> {
        self.get(image_id)
            .map(|f| f.vector.as_slice())
            .ok_or_else(|| Error::Missing(format!("feature for image {image_id}")))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn parse_features(text: &str, origin: &Path) -> Result<FeatureSet> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "missing dim= header".into()))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| perr(1, format!("expected dim=<d>, got {header:?}")))?;
    let mut set = FeatureSet::new(dim);
    for (n, line) in lines {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line");
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(lineno, format!("bad value {p:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(perr(
                lineno,
                format!("{} values for {id}, header says {dim}", values.len()),
            ));
        }
        if set.features.contains_key(id) {
            return Err(perr(lineno, format!("duplicate image id {id}")));
        }
        set.insert(id, &values)?;
    }
    Ok(set)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text, path)
}

pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut out = format!("dim={}\n", set.dim);
    for f in set.features.values() {
        out.push_str(&f.image_id);
        for v in &f.vector {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A target-language sentence joined with its source sentence and tags.
#[derive(Debug, Clone, PartialEq)]
pub struct BilingualExample {
    pub sentence_id: String,
    pub image_id: String,
    pub target: Vec<String>,
    pub target_pos: Option<Vec<String>>,
    pub source: Option<Vec<String>>,
    pub source_pos: Option<Vec<String>>,
    pub label: Option<FluencyLabel>,
    pub fluency: Option<f64>,
}

impl BilingualExample {
    /// Splits back into a target record and, if present, a source record.
    pub fn to_records(&self) -> (CaptionRecord, Option<CaptionRecord>) {
        let target = CaptionRecord {
            image_id: self.image_id.clone(),
            sentence_id: self.sentence_id.clone(),
            language: Language::Target,
            tokens: self.target.clone(),
            pos: self.target_pos.clone(),
            fluency: self.fluency,
            label: self.label,
        };
        let source = self.source.as_ref().map(|tokens| CaptionRecord {
            image_id: self.image_id.clone(),
            sentence_id: self.sentence_id.clone(),
            language: Language::Source,
            tokens: tokens.clone(),
            pos: self.source_pos.clone(),
            fluency: None,
            label: None,
        });
        (target, source)
    }
}

/// A consensus-labeled pair, the unit of classifier training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FluencyExample {
    pub pair: BilingualExample,
    pub label: FluencyLabel,
}

impl FluencyExample {
    pub fn to_records(&self) -> Vec<CaptionRecord> {
        let mut pair = self.pair.clone();
        pair.label = Some(self.label);
        let (t, s) = pair.to_records();
        std::iter::once(t).chain(s).collect()
    }
}

/// Joins target and source records on `sentence_id`, keeping target order.
/// Records of either language may be mixed in one slice.
pub fn pair_bilingual(records: &[CaptionRecord]) -> Result<Vec<BilingualExample>> {
    let mut sources: HashMap<&str, &CaptionRecord> = HashMap::new();
    for r in records.iter().filter(|r| r.language == Language::Source) {
        if sources.insert(&r.sentence_id, r).is_some() {
            return Err(Error::Validation(format!(
                "duplicate source sentence {}",
                r.sentence_id
            )));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in records.iter().filter(|r| r.language == Language::Target) {
        if !seen.insert(t.sentence_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate target sentence {}",
                t.sentence_id
            )));
        }
        let s = sources.get(t.sentence_id.as_str());
        out.push(BilingualExample {
            sentence_id: t.sentence_id.clone(),
            image_id: t.image_id.clone(),
            target: t.tokens.clone(),
            target_pos: t.pos.clone(),
            source: s.map(|s| s.tokens.clone()),
            source_pos: s.and_then(|s| s.pos.clone()),
            label: t.label,
            fluency: t.fluency,
        });
    }
    Ok(out)
}

/// The labeled subset of `pairs` as classifier examples.
pub fn labeled_examples(pairs: &[BilingualExample]) -> Vec<FluencyExample> {
    pairs
        .iter()
        .filter_map(|p| {
            p.label.map(|label| FluencyExample {
                pair: p.clone(),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Fractions for (train, val, test); must sum to 1.
    Ratios(f64, f64, f64),
    Explicit {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
}

pub type Splits = BTreeMap<SplitName, DatasetSplit>;

/// Partitions `ids` into train/val/test.
///
/// With ratios, ids are shuffled with `seed` and val/test sizes are rounded,
/// train takes the remainder. Explicit lists must partition `ids` exactly.
pub fn make_splits(ids: &[String], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let unique: HashSet<&str> = ids.iter().map(String::as_str).collect();
    if unique.len() != ids.len() {
        return Err(Error::Validation("record ids are not unique".into()));
    }
    let (train, val, test) = match spec {
        SplitSpec::Ratios(a, b, c) => {
            if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(*r)) || (a + b + c - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!(
                    "split ratios ({a}, {b}, {c}) must be in [0,1] and sum to 1"
                )));
            }
            let mut shuffled = ids.to_vec();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = ids.len();
            let n_val = ((n as f64) * b).round() as usize;
            let n_test = (((n as f64) * c).round() as usize).min(n - n_val);
            let n_train = n - n_val - n_test;
            let test = shuffled.split_off(n_train + n_val);
            let val = shuffled.split_off(n_train);
            (shuffled, val, test)
        }
        SplitSpec::Explicit { train, val, test } => {
            let mut seen = HashSet::new();
            for id in train.iter().chain(val).chain(test) {
                if !unique.contains(id.as_str()) {
                    return Err(Error::Validation(format!("split id {id} does not resolve")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation(format!(
                        "id {id} appears in more than one split"
                    )));
                }
            }
            if seen.len() != unique.len() {
                return Err(Error::Validation(format!(
                    "explicit splits cover {} of {} records",
                    seen.len(),
                    unique.len()
                )));
            }
            (train.clone(), val.clone(), test.clone())
        }
    };
    Ok([
        (SplitName::Train, train),
        (SplitName::Val, val),
        (SplitName::Test, test),
    ]
    .into_iter()
    .map(|(name, items)| (name, DatasetSplit { name, items }))
    .collect())
}

/// Writes splits as a JSON object `{"train": [...], "val": [...], "test": [...]}`.
pub fn save_splits(path: &Path, splits: &Splits) -> Result<()> {
    let obj: BTreeMap<&str, &Vec<String>> =
        splits.iter().map(|(k, v)| (k.as_str(), &v.items)).collect();
    let text = serde_json::to_string_pretty(&obj).expect("splits always serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let obj: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut out = Splits::new();
    for name in SplitName::ALL {
        let items = obj.get(name.as_str()).cloned().ok_or_else(|| {
            Error::Missing(format!("{} split in {}", name.as_str(), path.display()))
        })?;
        out.insert(name, DatasetSplit { name, items });
    }
    let ids: Vec<String> = out.values().flat_map(|s| s.items.clone()).collect();
    let spec = SplitSpec::Explicit {
        train: out[&SplitName::Train].items.clone(),
        val: out[&SplitName::Val].items.clone(),
        test: out[&SplitName::Test].items.clone(),
    };
    make_splits(&ids, &spec, 0)
}

/// Records whose image belongs to `split`, in input order.
pub fn select_split(records: &[CaptionRecord], split: &DatasetSplit) -> Vec<CaptionRecord> {
    let ids: HashSet<&str> = split.items.iter().map(String::as_str).collect();
    records
        .iter()
        .filter(|r| ids.contains(r.image_id.as_str()))
        .cloned()
        .collect::<Vec<_>>()
}

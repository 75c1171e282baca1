//! Deterministic toy bilingual caption corpora with controllable disfluency.
//!
//! Each image has a color, an object and an action. Its feature vector holds
//! one block per attribute slot. Source captions come from two templates;
//! target captions are a word-by-word mapping into a made-up target language
//! with its own word order. A corrupted target caption has a fixed window of
//! tokens reversed and [`DISFLUENCY_MARKER`] inserted after it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    make_splits, save_captions, save_features, save_splits, CaptionRecord, FeatureSet,
    FluencyLabel, Language, SplitSpec, Splits,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::LexiconTagger;

pub const DISFLUENCY_MARKER: &str = "@@";
pub const MARKER_POS: &str = "X";
/// Token positions `1..=4` are reversed in a corrupted caption.
pub const SCRAMBLE_WINDOW: (usize, usize) = (1, 4);
pub const SLOTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub captions_per_image: usize,
    pub colors: Vec<String>,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub feature_dim: usize,
    /// Half-width of the uniform noise added to every feature entry.
    pub noise: f64,
    /// Probability that a target caption is corrupted.
    pub rho: f64,
    pub seed: u64,
    pub split_ratios: (f64, f64, f64),
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 200,
            captions_per_image: 5,
            colors: words(&["red", "blue", "green", "yellow", "black", "white"]),
            objects: words(&["dog", "cat", "horse", "bird", "car", "boat"]),
            actions: words(&[
                "running", "sitting", "jumping", "swimming", "eating", "sleeping",
            ]),
            feature_dim: 24,
            noise: 0.05,
            rho: 0.4,
            seed: 1,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.captions_per_image == 0 {
            return Err(Error::Config(
                "need at least one image and one caption per image".into(),
            ));
        }
        if self.colors.is_empty() || self.objects.is_empty() || self.actions.is_empty() {
            return Err(Error::Config(
                "attribute inventories must be non-empty".into(),
            ));
        }
        if self.feature_dim < SLOTS {
            return Err(Error::Config(format!(
                "feature dimension {} is below the {SLOTS} attribute slots",
                self.feature_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "disfluency rate {} outside [0, 1]",
                self.rho
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        let all: Vec<&String> = self.inventories().into_iter().flatten().collect();
        let mut seen = std::collections::HashSet::new();
        for w in &all {
            if w.is_empty() || w.contains(char::is_whitespace) || !seen.insert(w.as_str()) {
                return Err(Error::Config(format!(
                    "attribute word {w:?} is empty, spaced or repeated"
                )));
            }
        }
        Ok(())
    }

    fn inventories(&self) -> [&Vec<String>; SLOTS] {
        [&self.colors, &self.objects, &self.actions]
    }

    /// `(start, len)` of each slot's block; the last block takes the remainder.
    pub fn blocks(&self) -> [(usize, usize); SLOTS] {
        let b = self.feature_dim / SLOTS;
        [(0, b), (b, b), (2 * b, self.feature_dim - 2 * b)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttributes {
    pub color: usize,
    pub object: usize,
    pub action: usize,
}

impl ImageAttributes {
    fn slots(&self) -> [usize; SLOTS] {
        [self.color, self.object, self.action]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub attributes: ImageAttributes,
    /// Attribute words, for display.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub features: FeatureSet,
    /// Source and target records, source first for every sentence.
    pub records: Vec<CaptionRecord>,
    pub images: Vec<ImageInfo>,
    pub lexicon: LexiconTagger,
    pub splits: Splits,
}

/// Target-language surface form of a source content word.
pub fn translate_content(word: &str) -> String {
    word.chars().rev().collect()
}

struct Template {
    source: &'static [&'static str],
    source_pos: &'static [&'static str],
    target: &'static [&'static str],
    target_pos: &'static [&'static str],
}

// C, O and A are the color, object and action slots
const TEMPLATES: [Template; 2] = [
    Template {
        source: &["a", "C", "O", "is", "A"],
        source_pos: &["DT", "JJ", "NN", "VBZ", "VBG"],
        target: &["yi", "zhi", "C", "O", "zai", "A"],
        target_pos: &["CD", "M", "JJ", "NN", "P", "VV"],
    },
    Template {
        source: &["there", "is", "a", "C", "O", "A"],
        source_pos: &["EX", "VBZ", "DT", "JJ", "NN", "VBG"],
        target: &["you", "yi", "zhi", "C", "O", "zai", "A"],
        target_pos: &["VE", "CD", "M", "JJ", "NN", "P", "VV"],
    },
];

fn fill(template: &[&str], words: [&str; SLOTS]) -> Vec<String> {
    template
        .iter()
        .map(|t| match *t {
            "C" => words[0].to_string(),
            "O" => words[1].to_string(),
            "A" => words[2].to_string(),
            w => w.to_string(),
        })
        .collect()
}

/// Reverses the scramble window and inserts the marker right after it.
pub fn corrupt(tokens: &[String], pos: &[String]) -> (Vec<String>, Vec<String>) {
    let (lo, hi) = SCRAMBLE_WINDOW;
    let hi = hi.min(tokens.len().saturating_sub(1));
    let mut t = tokens.to_vec();
    let mut p = pos.to_vec();
    if lo < hi {
        t[lo..=hi].reverse();
        p[lo..=hi].reverse();
    }
    let at = (hi + 1).min(t.len());
    t.insert(at, DISFLUENCY_MARKER.to_string());
    p.insert(at, MARKER_POS.to_string());
    (t, p)
}

/// Unit prototype vectors for every value of every slot. One-hot when the
/// block is wide enough, seeded random directions otherwise.
fn prototypes(cfg: &SynthConfig) -> [Vec<Vec<f64>>; SLOTS] {
    let blocks = cfg.blocks();
    let inv = cfg.inventories();
    std::array::from_fn(|slot| {
        let (_, len) = blocks[slot];
        let n = inv[slot].len();
        if len >= n {
            (0..n)
                .map(|v| (0..len).map(|j| if j == v { 1.0 } else { 0.0 }).collect())
                .collect()
        } else {
            let mut r = rng::stream(cfg.seed, 100 + slot as u64);
            (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        }
    })
}

/// Nearest-prototype decoding of each block of a feature vector.
pub fn decode_attributes(cfg: &SynthConfig, feature: &[f64]) -> ImageAttributes {
    let protos = prototypes(cfg);
    let blocks = cfg.blocks();
    let slot = |s: usize| -> usize {
        let (start, len) = blocks[s];
        let block = &feature[start..start + len];
        let mut best = (0, f64::NEG_INFINITY);
        for (v, p) in protos[s].iter().enumerate() {
            let d: f64 = p.iter().zip(block).map(|(a, b)| a * b).sum();
            if d > best.1 {
                best = (v, d);
            }
        }
        best.0
    };
    ImageAttributes {
        color: slot(0),
        object: slot(1),
        action: slot(2),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let blocks = cfg.blocks();
    let inv = cfg.inventories();
    let mut attr_rng = rng::stream(cfg.seed, 1);
    let mut noise_rng = rng::stream(cfg.seed, 2);
    let mut caption_rng = rng::stream(cfg.seed, 3);
    let width = cfg.n_images.to_string().len().max(4);

    let mut features = FeatureSet::new(cfg.feature_dim);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for i in 0..cfg.n_images {
        let image_id = format!("img{i:0width$}");
        let attributes = ImageAttributes {
            color: attr_rng.random_range(0..cfg.colors.len()),
            object: attr_rng.random_range(0..cfg.objects.len()),
            action: attr_rng.random_range(0..cfg.actions.len()),
        };
        let mut v = vec![0.0; cfg.feature_dim];
        for (s, &val) in attributes.slots().iter().enumerate() {
            let (start, _) = blocks[s];
            for (j, x) in protos[s][val].iter().enumerate() {
                v[start + j] = *x;
            }
        }
        if cfg.noise > 0.0 {
            for x in v.iter_mut() {
                *x += noise_rng.random_range(-cfg.noise..=cfg.noise);
            }
        }
        features.insert(&image_id, &v)?;

        let src_words: [&str; SLOTS] =
            std::array::from_fn(|s| inv[s][attributes.slots()[s]].as_str());
        let tgt_owned: [String; SLOTS] = std::array::from_fn(|s| translate_content(src_words[s]));
        let tgt_words: [&str; SLOTS] = std::array::from_fn(|s| tgt_owned[s].as_str());
        for c in 0..cfg.captions_per_image {
            let sentence_id = format!("{image_id}_{c}");
            let t = &TEMPLATES[caption_rng.random_range(0..TEMPLATES.len())];
            let corrupted = caption_rng.random::<f64>() < cfg.rho;
            let source = fill(t.source, src_words);
            let mut target = fill(t.target, tgt_words);
            let mut target_pos = words(t.target_pos);
            if corrupted {
                (target, target_pos) = corrupt(&target, &target_pos);
            }
            records.push(CaptionRecord {
                image_id: image_id.clone(),
                sentence_id: sentence_id.clone(),
                language: Language::Source,
                tokens: source,
                pos: Some(words(t.source_pos)),
                fluency: None,
                label: None,
            });
            records.push(CaptionRecord {
                image_id: image_id.clone(),
                sentence_id,
                language: Language::Target,
                tokens: target,
                pos: Some(target_pos),
                fluency: None,
                label: Some(if corrupted {
                    FluencyLabel::NotFluent
                } else {
                    FluencyLabel::Fluent
                }),
            });
        }
        images.push(ImageInfo {
            image_id,
            attributes,
            description: src_words.join(" "),
        });
    }

    let ids: Vec<String> = images.iter().map(|i| i.image_id.clone()).collect();
    let (a, b, c) = cfg.split_ratios;
    let splits = make_splits(&ids, &SplitSpec::Ratios(a, b, c), cfg.seed)?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        features,
        records,
        images,
        lexicon: lexicon(cfg),
        splits,
    })
}

/// Tags for every word the generator can emit, in both languages.
pub fn lexicon(cfg: &SynthConfig) -> LexiconTagger {
    let mut tags = HashMap::new();
    for t in &TEMPLATES {
        for (w, p) in t
            .source
            .iter()
            .zip(t.source_pos)
            .chain(t.target.iter().zip(t.target_pos))
        {
            if !["C", "O", "A"].contains(w) {
                tags.insert(w.to_string(), p.to_string());
            }
        }
    }
    let content = [("JJ", "JJ"), ("NN", "NN"), ("VBG", "VV")];
    for (slot, inv) in cfg.inventories().iter().enumerate() {
        for w in inv.iter() {
            tags.insert(w.clone(), content[slot].0.to_string());
            tags.insert(translate_content(w), content[slot].1.to_string());
        }
    }
    tags.insert(DISFLUENCY_MARKER.to_string(), MARKER_POS.to_string());
    LexiconTagger::new(tags)
}

impl SynthCorpus {
    pub fn target_records(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.records
            .iter()
            .filter(|r| r.language == Language::Target)
    }

    /// Writes `features.txt`, `captions.jsonl`, `lexicon.tsv`, `images.jsonl`,
    /// `splits.json` and `synth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_features(&dir.join("features.txt"), &self.features)?;
        save_captions(&dir.join("captions.jsonl"), &self.records)?;
        self.lexicon.save(&dir.join("lexicon.tsv"))?;
        let mut img = String::new();
        for i in &self.images {
            img.push_str(&serde_json::to_string(i).expect("image info serializes"));
            img.push('\n');
        }
        let p = dir.join("images.jsonl");
        fs::write(&p, img).map_err(|e| Error::io(&p, e))?;
        save_splits(&dir.join("splits.json"), &self.splits)?;
        let p = dir.join("synth.json");
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&p, cfg + "\n").map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Tagger;
    use proptest::prelude::*;

    fn cfg(rho: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_images: 30,
            rho,
            seed,
            ..Default::default()
        }
    }

    fn has_marker(r: &CaptionRecord) -> bool {
        r.tokens.iter().any(|t| t == DISFLUENCY_MARKER)
    }

    #[test]
    fn rho_zero_is_all_fluent() {
        let c = generate(&cfg(0.0, 1)).unwrap();
        assert!(c
            .target_records()
            .all(|r| r.label == Some(FluencyLabel::Fluent) && !has_marker(r)));
    }

    #[test]
    fn rho_one_is_all_corrupted() {
        let c = generate(&cfg(1.0, 1)).unwrap();
        assert!(c
            .target_records()
            .all(|r| r.label == Some(FluencyLabel::NotFluent) && has_marker(r)));
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&cfg(0.5, 9)).unwrap().write(a.path()).unwrap();
        generate(&cfg(0.5, 9)).unwrap().write(b.path()).unwrap();
        for f in [
            "features.txt",
            "captions.jsonl",
            "lexicon.tsv",
            "images.jsonl",
            "splits.json",
            "synth.json",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let c = generate(&cfg(0.5, 10)).unwrap();
        assert_ne!(c.records, generate(&cfg(0.5, 9)).unwrap().records);
    }

    #[test]
    fn corruption_keeps_content_words() {
        let t = words(&["yi", "zhi", "der", "god", "zai", "gninnur"]);
        let p = words(&["CD", "M", "JJ", "NN", "P", "VV"]);
        let (ct, cp) = corrupt(&t, &p);
        assert_eq!(
            ct,
            words(&["yi", "zai", "god", "der", "zhi", "@@", "gninnur"])
        );
        assert_eq!(cp, words(&["CD", "P", "NN", "JJ", "M", "X", "VV"]));
    }

    #[test]
    fn pos_and_lexicon_agree() {
        let c = generate(&cfg(0.5, 4)).unwrap();
        for r in &c.records {
            assert_eq!(
                c.lexicon.tag(&r.tokens),
                r.pos.clone().unwrap(),
                "{:?}",
                r.tokens
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SynthConfig {
            feature_dim: 2,
            ..cfg(0.1, 1)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            rho: 1.5,
            ..cfg(0.1, 1)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            colors: vec![],
            ..cfg(0.1, 1)
        })
        .is_err());
    }

    #[test]
    fn narrow_blocks_use_prototypes() {
        let c = SynthConfig {
            feature_dim: 9,
            noise: 0.02,
            ..cfg(0.3, 5)
        };
        let corpus = generate(&c).unwrap();
        for img in &corpus.images {
            let f = corpus.features.vector(&img.image_id).unwrap();
            assert_eq!(decode_attributes(&c, f), img.attributes);
        }
    }

    proptest! {
        #[test]
        fn attributes_are_recoverable(seed in 0u64..200) {
            let c = cfg(0.5, seed);
            let corpus = generate(&c).unwrap();
            for img in &corpus.images {
                let f = corpus.features.vector(&img.image_id).unwrap();
                prop_assert_eq!(decode_attributes(&c, f), img.attributes);
            }
        }

        #[test]
        fn label_is_a_function_of_the_marker(seed in 0u64..200, rho in 0.0f64..=1.0) {
            let corpus = generate(&cfg(rho, seed)).unwrap();
            for r in corpus.target_records() {
                prop_assert_eq!(has_marker(r), r.label == Some(FluencyLabel::NotFluent));
            }
        }
    }
}

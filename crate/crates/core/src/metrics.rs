//! Corpus-level BLEU-4, ROUGE-L and CIDEr against multiple references.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, Language};
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_D_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// TF-IDF cosine averaged over references and n = 1..4, ×10.
    #[default]
    Plain,
    /// Clipped TF-IDF with a Gaussian length penalty, as in coco-caption.
    D,
}

fn check(instances: &[EvalInstance]) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation corpus".into()));
    }
    if let Some(i) = instances.iter().find(|i| i.references.is_empty()) {
        return Err(Error::Validation(format!(
            "image {} has no references",
            i.image_id
        )));
    }
    Ok(())
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = Counts::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *c.entry(g).or_default() += 1;
        }
    }
    c
}

/// Reference length closest to `c`, preferring the shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-4 ×100, no smoothing.
pub fn bleu4(instances: &[EvalInstance]) -> Result<f64> {
    check(instances)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for inst in instances {
        c_len += inst.candidate.len();
        r_len += closest_ref_len(inst.candidate.len(), &inst.references);
        for n in 1..=MAX_N {
            let cand = ngram_counts(&inst.candidate, n);
            let mut max_ref: Counts = Counts::new();
            for r in &inst.references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate against its best reference, in [0, 1].
pub fn rouge_l_instance(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Per-image ROUGE-L ×100.
pub fn rouge_l_per_image(instances: &[EvalInstance]) -> Result<Vec<f64>> {
    check(instances)?;
    Ok(instances
        .par_iter()
        .map(|i| 100.0 * rouge_l_instance(&i.candidate, &i.references))
        .collect())
}

/// Mean ROUGE-L ×100.
pub fn rouge_l(instances: &[EvalInstance]) -> Result<f64> {
    let v = rouge_l_per_image(instances)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Document frequencies of every n-gram (n = 1..4): the number of images
/// whose reference set contains it.
struct IdfTable<'a> {
    log_n: f64,
    df: HashMap<&'a [String], usize>,
}

impl<'a> IdfTable<'a> {
    fn new(instances: &'a [EvalInstance]) -> Self {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for inst in instances {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in &inst.references {
                for n in 1..=MAX_N {
                    if r.len() >= n {
                        seen.extend(r.windows(n));
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        IdfTable {
            log_n: (instances.len() as f64).ln(),
            df,
        }
    }

    /// `ln(N / max(1, df))`
    fn idf(&self, g: &[String]) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0).max(1);
        self.log_n - (df as f64).ln()
    }

    fn vector(&self, tokens: &'a [String], n: usize) -> (HashMap<&'a [String], f64>, f64) {
        let v: HashMap<&[String], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, k)| (g, k as f64 * self.idf(g)))
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    }
}

fn cider_instance(table: &IdfTable, inst: &EvalInstance, variant: CiderVariant) -> f64 {
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let (vc, nc) = table.vector(&inst.candidate, n);
        let mut sum = 0.0;
        for r in &inst.references {
            let (vr, nr) = table.vector(r, n);
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, x) in &vc {
                if let Some(y) = vr.get(g) {
                    dot += match variant {
                        CiderVariant::Plain => x * y,
                        CiderVariant::D => x.min(*y) * y,
                    };
                }
            }
            let mut sim = dot / (nc * nr);
            if variant == CiderVariant::D {
                let delta = inst.candidate.len() as f64 - r.len() as f64;
                sim *= (-(delta * delta) / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA)).exp();
            }
            sum += sim;
        }
        total += sum / inst.references.len() as f64;
    }
    10.0 * total / MAX_N as f64
}

pub fn cider_per_image(instances: &[EvalInstance], variant: CiderVariant) -> Result<Vec<f64>> {
    check(instances)?;
    let table = IdfTable::new(instances);
    Ok(instances
        .par_iter()
        .map(|i| cider_instance(&table, i, variant))
        .collect())
}

pub fn cider(instances: &[EvalInstance], variant: CiderVariant) -> Result<f64> {
    let v = cider_per_image(instances, variant)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub cider_variant: CiderVariant,
    pub images: usize,
    pub per_image: Vec<ImageScores>,
}

pub fn evaluate(instances: &[EvalInstance], variant: CiderVariant) -> Result<MetricReport> {
    let bleu = bleu4(instances)?;
    let rouge = rouge_l_per_image(instances)?;
    let cid = cider_per_image(instances, variant)?;
    let n = instances.len() as f64;
    Ok(MetricReport {
        bleu4: bleu,
        rouge_l: rouge.iter().sum::<f64>() / n,
        cider: cid.iter().sum::<f64>() / n,
        cider_variant: variant,
        images: instances.len(),
        per_image: instances
            .iter()
            .zip(rouge.iter().zip(&cid))
            .map(|(i, (r, c))| ImageScores {
                image_id: i.image_id.clone(),
                rouge_l: *r,
                cider: *c,
            })
            .collect(),
    })
}

/// Pairs one candidate per image with all target-language reference
/// captions of that image, in candidate order.
pub fn build_instances(
    candidates: &[(String, Vec<String>)],
    references: &[CaptionRecord],
) -> Result<Vec<EvalInstance>> {
    let mut refs: HashMap<&str, Vec<Vec<String>>> = HashMap::new();
    for r in references.iter().filter(|r| r.language == Language::Target) {
        refs.entry(&r.image_id).or_default().push(r.tokens.clone());
    }
    let mut seen = HashSet::new();
    candidates
        .iter()
        .map(|(id, tokens)| {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!(
                    "image {id} has more than one candidate"
                )));
            }
            let references = refs
                .get(id.as_str())
                .cloned()
                .ok_or_else(|| Error::Missing(format!("references for image {id}")))?;
            Ok(EvalInstance {
                image_id: id.clone(),
                candidate: tokens.clone(),
                references,
            })
        })
        .collect()
}

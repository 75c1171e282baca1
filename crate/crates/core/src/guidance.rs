//! Fluency-guided training strategies and the late-translation rerank baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{scaled_batch_loss, CaptionExample, CaptionerParams, EpochPlan};
use crate::corpus::{BilingualExample, CaptionRecord};
use crate::error::{Error, Result};
use crate::fluency::{FluencyEnsemble, DECISION_THRESHOLD};
use crate::rng;
use crate::text::Tagger;

/// Upper end of the rejection-sampling threshold distribution `U(0, 0.5)`.
pub const REJECTION_UPPER: f64 = 0.5;

/// Anything carrying a cached fluency score.
pub trait Scored {
    fn fluency_score(&self) -> Option<f64>;
    fn label(&self) -> &str;
}

impl Scored for CaptionRecord {
    fn fluency_score(&self) -> Option<f64> {
        self.fluency
    }
    fn label(&self) -> &str {
        &self.sentence_id
    }
}

impl Scored for CaptionExample {
    fn fluency_score(&self) -> Option<f64> {
        self.fluency
    }
    fn label(&self) -> &str {
        &self.sentence_id
    }
}

impl Scored for f64 {
    fn fluency_score(&self) -> Option<f64> {
        Some(*self)
    }
    fn label(&self) -> &str {
        "score"
    }
}

fn score_of<T: Scored>(item: &T) -> Result<f64> {
    let f = item
        .fluency_score()
        .ok_or_else(|| Error::Missing(format!("fluency score for sentence {}", item.label())))?;
    check_score(f)?;
    Ok(f)
}

fn check_score(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "fluency score {f} outside [0, 1]"
        )))
    }
}

/// Loss weight: 1 for sentences classified fluent, otherwise the score itself.
pub fn mu(f: f64) -> f64 {
    if f > DECISION_THRESHOLD {
        1.0
    } else {
        f
    }
}

/// Records with `f > 0.5`, in order.
pub fn filter_fluent<T: Scored + Clone>(records: &[T]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for r in records {
        if score_of(r)? > DECISION_THRESHOLD {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Inclusion decisions for one epoch: fluent records always, the rest iff
/// `f > u` with a fresh `u ~ U(0, 0.5)` drawn from the `(seed, epoch)` stream.
pub fn rejection_mask<T: Scored>(records: &[T], seed: u64, epoch: usize) -> Result<Vec<bool>> {
    let mut r = rng::stream(seed, epoch as u64);
    records
        .iter()
        .map(|rec| {
            let f = score_of(rec)?;
            if f > DECISION_THRESHOLD {
                return Ok(true);
            }
            let u: f64 = r.random_range(0.0..REJECTION_UPPER);
            Ok(f > u)
        })
        .collect()
}

pub fn rejection_sample_epoch<T: Scored + Clone>(
    records: &[T],
    seed: u64,
    epoch: usize,
) -> Result<Vec<T>> {
    let mask = rejection_mask(records, seed, epoch)?;
    Ok(records
        .iter()
        .zip(mask)
        .filter(|(_, keep)| *keep)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Expected epoch size under rejection sampling.
pub fn expected_rejection_size<T: Scored>(records: &[T]) -> Result<f64> {
    let mut sum = 0.0;
    for r in records {
        let f = score_of(r)?;
        sum += if f > DECISION_THRESHOLD {
            1.0
        } else {
            f / REJECTION_UPPER
        };
    }
    Ok(sum)
}

/// `−(1/m) Σ_i μ_i ln p(S_i | I_i)`.
pub fn weighted_batch_loss(
    params: &CaptionerParams,
    batch: &[&CaptionExample],
    scores: &[f64],
) -> Result<f64> {
    if scores.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} scores for a batch of {}",
            scores.len(),
            batch.len()
        )));
    }
    let weights: Vec<f64> = scores
        .iter()
        .map(|&f| check_score(f).map(|_| mu(f)))
        .collect::<Result<_>>()?;
    scaled_batch_loss(params, batch, Some(&weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    WithoutFluency,
    FluencyOnly,
    RejectionSampling,
    WeightedLoss,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::WithoutFluency,
        StrategyKind::FluencyOnly,
        StrategyKind::RejectionSampling,
        StrategyKind::WeightedLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::WithoutFluency => "without-fluency",
            StrategyKind::FluencyOnly => "fluency-only",
            StrategyKind::RejectionSampling => "rejection-sampling",
            StrategyKind::WeightedLoss => "weighted-loss",
        }
    }

    pub fn needs_scores(self) -> bool {
        self != StrategyKind::WithoutFluency
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub seed: u64,
}

impl Strategy {
    pub fn new(kind: StrategyKind, seed: u64) -> Self {
        Strategy { kind, seed }
    }

    /// Fails early when the strategy needs scores that are missing.
    pub fn check(&self, data: &[CaptionExample]) -> Result<()> {
        if self.kind.needs_scores() {
            for ex in data {
                score_of(ex)?;
            }
        }
        Ok(())
    }
}

impl EpochPlan for Strategy {
    fn plan(&self, data: &[CaptionExample], epoch: usize) -> Result<Vec<(usize, f64)>> {
        let all = || (0..data.len()).map(|i| (i, 1.0));
        let plan: Vec<(usize, f64)> = match self.kind {
            StrategyKind::WithoutFluency => all().collect(),
            StrategyKind::FluencyOnly => {
                let mut keep = Vec::new();
                for (i, ex) in data.iter().enumerate() {
                    if score_of(ex)? > DECISION_THRESHOLD {
                        keep.push((i, 1.0));
                    }
                }
                if keep.is_empty() {
                    return Err(Error::Empty("no sentence is classified fluent".into()));
                }
                keep
            }
            StrategyKind::RejectionSampling => rejection_mask(data, self.seed, epoch)?
                .into_iter()
                .enumerate()
                .filter(|(_, k)| *k)
                .map(|(i, _)| (i, 1.0))
                .collect(),
            StrategyKind::WeightedLoss => data
                .iter()
                .enumerate()
                .map(|(i, ex)| score_of(ex).map(|f| (i, mu(f))))
                .collect::<Result<_>>()?,
        };
        Ok(plan)
    }
}

/// Stable sort by score, descending; equal scores keep their input order.
pub fn rerank_by_scores<T>(candidates: Vec<T>, scores: &[f64]) -> Result<Vec<(T, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list".into()));
    }
    if scores.len() != candidates.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let mut paired: Vec<(T, f64)> = candidates.into_iter().zip(scores.iter().copied()).collect();
    paired.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(paired)
}

/// A generated target-language caption, optionally with the source sentence it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankCandidate {
    pub image_id: String,
    pub rank: usize,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_pos: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedCaption {
    pub image_id: String,
    pub rank: usize,
    pub original_rank: usize,
    pub tokens: Vec<String>,
    pub fluency: f64,
    /// Scored by the target-side views only.
    pub degraded: bool,
}

/// Reorders one image's candidates by ensemble fluency, descending.
/// Target POS tags come from `tagger`; candidates without a source sentence
/// are scored in degraded mode. Empty captions score 0.
pub fn rerank_by_fluency(
    candidates: &[RerankCandidate],
    ensemble: &FluencyEnsemble,
    tagger: &dyn Tagger,
) -> Result<Vec<RerankedCaption>> {
    let mut scored = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.tokens.is_empty() {
            scores.push(0.0);
            scored.push((c, c.source.is_none()));
            continue;
        }
        let source_pos = match (&c.source, &c.source_pos) {
            (Some(_), Some(p)) => Some(p.clone()),
            (Some(s), None) => Some(tagger.tag(s)),
            _ => None,
        };
        let ex = BilingualExample {
            sentence_id: format!("{}#{}", c.image_id, c.rank),
            image_id: c.image_id.clone(),
            target_pos: Some(tagger.tag(&c.tokens)),
            target: c.tokens.clone(),
            source: c.source.clone(),
            source_pos,
            label: None,
            fluency: None,
        };
        let s = ensemble.score_candidate(&ex)?;
        scores.push(s.fluency);
        scored.push((c, s.degraded));
    }
    Ok(rerank_by_scores(scored, &scores)?
        .into_iter()
        .enumerate()
        .map(|(i, ((c, degraded), f))| RerankedCaption {
            image_id: c.image_id.clone(),
            rank: i + 1,
            original_rank: c.rank,
            tokens: c.tokens.clone(),
            fluency: f,
            degraded,
        })
        .collect())
}

/// Reranks every image separately; images keep their first-appearance order.
pub fn rerank_grouped(
    candidates: &[RerankCandidate],
    ensemble: &FluencyEnsemble,
    tagger: &dyn Tagger,
) -> Result<Vec<RerankedCaption>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<RerankCandidate>> = Default::default();
    for c in candidates {
        let g = groups.entry(&c.image_id).or_insert_with(|| {
            order.push(&c.image_id);
            Vec::new()
        });
        g.push(c.clone());
    }
    let mut out = Vec::new();
    for id in order {
        let mut g = groups.remove(id).expect("grouped above");
        g.sort_by_key(|c| c.rank);
        out.extend(rerank_by_fluency(&g, ensemble, tagger)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::captioner::batch_loss;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn example(f: Option<f64>, ids: Vec<usize>) -> CaptionExample {
        CaptionExample {
            image_id: "i".into(),
            sentence_id: format!("s{ids:?}"),
            feature: Arc::from(&[0.6, 0.8][..]),
            ids,
            fluency: f,
        }
    }

    fn params() -> CaptionerParams {
        let mut r = rng::seeded(4);
        CaptionerParams::new(2, 6, 4, 4, &mut r)
    }

    #[test]
    fn filter_keeps_strictly_fluent() {
        let kept = filter_fluent(&[0.9, 0.5, 0.2]).unwrap();
        assert_eq!(kept, vec![0.9]);
        assert_eq!(filter_fluent(&[0.7, 0.8]).unwrap(), vec![0.7, 0.8]);
        let missing = example(None, vec![0, 2, 0]);
        assert!(matches!(filter_fluent(&[missing]), Err(Error::Missing(_))));
    }

    #[test]
    fn rejection_extremes() {
        let recs = [0.7, 0.0, 0.5001];
        for epoch in 0..200 {
            let m = rejection_mask(&recs, 3, epoch).unwrap();
            assert!(m[0] && !m[1] && m[2]);
        }
    }

    #[test]
    fn rejection_frequency_follows_two_f() {
        let n = 10_000;
        let hits = (0..n)
            .filter(|&e| rejection_mask(&[0.25], 17, e).unwrap()[0])
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn rejection_is_seeded() {
        let recs: Vec<f64> = (0..50).map(|i| i as f64 / 100.0).collect();
        assert_eq!(
            rejection_mask(&recs, 1, 4).unwrap(),
            rejection_mask(&recs, 1, 4).unwrap()
        );
        assert_ne!(
            rejection_mask(&recs, 1, 4).unwrap(),
            rejection_mask(&recs, 1, 5).unwrap()
        );
    }

    #[test]
    fn weighted_loss_rules() {
        let p = params();
        let a = example(Some(0.9), vec![0, 2, 3, 0]);
        let b = example(Some(0.6), vec![0, 4, 0]);
        let batch = [&a, &b];
        assert_eq!(
            weighted_batch_loss(&p, &batch, &[0.9, 0.6])
                .unwrap()
                .to_bits(),
            batch_loss(&p, &batch).unwrap().to_bits()
        );
        let single = weighted_batch_loss(&p, &[&a], &[0.3]).unwrap();
        assert!((single - 0.3 * batch_loss(&p, &[&a]).unwrap()).abs() < 1e-12);
        assert_eq!(mu(0.5), 0.5);
        assert_eq!(mu(0.5000001), 1.0);
        assert!(weighted_batch_loss(&p, &[&a], &[1.2]).is_err());
    }

    #[test]
    fn plans_per_strategy() {
        let data = vec![
            example(Some(0.9), vec![0, 2, 0]),
            example(Some(0.3), vec![0, 3, 0]),
            example(Some(0.0), vec![0, 4, 0]),
        ];
        let plan = |k| Strategy::new(k, 1).plan(&data, 0).unwrap();
        assert_eq!(
            plan(StrategyKind::WithoutFluency),
            vec![(0, 1.0), (1, 1.0), (2, 1.0)]
        );
        assert_eq!(plan(StrategyKind::FluencyOnly), vec![(0, 1.0)]);
        assert_eq!(
            plan(StrategyKind::WeightedLoss),
            vec![(0, 1.0), (1, 0.3), (2, 0.0)]
        );
        let rs = plan(StrategyKind::RejectionSampling);
        assert!(rs.contains(&(0, 1.0)) && !rs.iter().any(|p| p.0 == 2));

        let none_fluent = vec![example(Some(0.2), vec![0, 2, 0])];
        let s = Strategy::new(StrategyKind::FluencyOnly, 1);
        assert!(matches!(s.plan(&none_fluent, 0), Err(Error::Empty(_))));

        let unscored = vec![example(None, vec![0, 2, 0])];
        let err = Strategy::new(StrategyKind::WeightedLoss, 1)
            .check(&unscored)
            .unwrap_err();
        assert!(err.to_string().contains("fluency"));
        assert!(Strategy::new(StrategyKind::WithoutFluency, 1)
            .check(&unscored)
            .is_ok());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("greedy".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn rerank_is_a_stable_descending_sort() {
        let r = rerank_by_scores(vec![1, 2, 3], &[0.2, 0.9, 0.9]).unwrap();
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 3, 1]);
        let same = rerank_by_scores(vec![1, 2, 3], &[0.4; 3]).unwrap();
        assert_eq!(same.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rerank_by_scores(vec![7], &[0.1]).unwrap()[0].0, 7);
        assert!(rerank_by_scores(Vec::<u8>::new(), &[]).is_err());
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(scores in prop::collection::vec(0.0f64..=1.0, 0..40)) {
            let once = filter_fluent(&scores).unwrap();
            prop_assert_eq!(filter_fluent(&once).unwrap(), once);
        }

        #[test]
        fn rejection_epoch_size_matches_expectation(
            scores in prop::collection::vec(0.0f64..=1.0, 1..30),
            seed in 0u64..100,
        ) {
            let epochs = 2_000;
            let total: usize = (0..epochs)
                .map(|e| rejection_sample_epoch(&scores, seed, e).unwrap().len())
                .sum();
            let mean = total as f64 / epochs as f64;
            let expected = expected_rejection_size(&scores).unwrap();
            prop_assert!((mean - expected).abs() <= 0.02 * expected.max(1.0) + 0.1,
                "mean {} expected {}", mean, expected);
        }

        #[test]
        fn rerank_is_a_permutation(scores in prop::collection::vec(0.0f64..=1.0, 1..10)) {
            let ids: Vec<usize> = (0..scores.len()).collect();
            let r = rerank_by_scores(ids, &scores).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0].1 >= w[1].1));
            let mut seen: Vec<usize> = r.iter().map(|p| p.0).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        }
    }
}

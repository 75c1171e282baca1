//! Four-view sentence fluency classifier.
//!
//! Each view is an LSTM over one stream of a bilingual pair (target words,
//! target POS tags, source words, source POS tags) with a two-way softmax on
//! the last hidden state. The ensemble score is the mean of the four
//! probabilities of "fluent"; a sentence is fluent iff that mean exceeds 0.5.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    pair_bilingual, BilingualExample, CaptionRecord, FluencyExample, FluencyLabel, Language,
};
use crate::error::{Error, Result};
use crate::neuralnet::io::{load_metadata, load_params_into, save_params, Metadata};
use crate::neuralnet::{
    adam_step, AdamConfig, AdamState, DropoutMasks, ParamSet, SequenceModelParams, StepInput,
    PROB_FLOOR,
};
use crate::rng;
use crate::text::Vocabulary;

/// Class index of "fluent" in the two-way head; "not fluent" is 1.
pub const FLUENT_CLASS: usize = 0;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    TargetWords,
    TargetPos,
    SourceWords,
    SourcePos,
}

impl ViewKind {
    pub const ALL: [ViewKind; 4] = [
        ViewKind::TargetWords,
        ViewKind::TargetPos,
        ViewKind::SourceWords,
        ViewKind::SourcePos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::TargetWords => "target_words",
            ViewKind::TargetPos => "target_pos",
            ViewKind::SourceWords => "source_words",
            ViewKind::SourcePos => "source_pos",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_target_side(self) -> bool {
        matches!(self, ViewKind::TargetWords | ViewKind::TargetPos)
    }

    /// The token stream this view reads.
    pub fn stream(self, ex: &BilingualExample) -> Result<&[String]> {
        let s = match self {
            ViewKind::TargetWords => Some(&ex.target),
            ViewKind::TargetPos => ex.target_pos.as_ref(),
            ViewKind::SourceWords => ex.source.as_ref(),
            ViewKind::SourcePos => ex.source_pos.as_ref(),
        };
        match s {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::Missing(format!(
                "{} stream for sentence {}",
                self.name(),
                ex.sentence_id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: usize,
    pub min_count: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 32,
            hidden_dim: 32,
            dropout: 0.5,
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 30,
            patience: 5,
            min_count: 1,
        }
    }
}

/// `(f, f̂)`: probabilities of fluent and not fluent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyScore {
    pub fluent: f64,
    pub not_fluent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluencyView {
    pub kind: ViewKind,
    pub vocab: Vocabulary,
    pub model: SequenceModelParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub view: ViewKind,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn label_class(label: FluencyLabel) -> usize {
    if label.is_fluent() {
        FLUENT_CLASS
    } else {
        1 - FLUENT_CLASS
    }
}

impl FluencyView {
    fn inputs(&self, tokens: &[String]) -> Vec<StepInput> {
        self.vocab
            .encode(tokens)
            .into_iter()
            .map(StepInput::Token)
            .collect()
    }

    pub fn score_tokens(&self, tokens: &[String]) -> Result<FluencyScore> {
        let out = self.model.forward(&self.inputs(tokens), None)?;
        let p = out.probs.last().expect("non-empty sequence");
        Ok(FluencyScore {
            fluent: p[FLUENT_CLASS],
            not_fluent: p[1 - FLUENT_CLASS],
        })
    }

    pub fn score(&self, ex: &BilingualExample) -> Result<FluencyScore> {
        self.score_tokens(self.kind.stream(ex)?)
    }

    /// Mean cross-entropy over `examples` with dropout off.
    pub fn mean_loss(&self, examples: &[FluencyExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("loss evaluation set".into()));
        }
        let losses: Vec<f64> = examples
            .par_iter()
            .map(|ex| {
                let s = self.score(&ex.pair)?;
                let p = if ex.label.is_fluent() {
                    s.fluent
                } else {
                    s.not_fluent
                };
                Ok(-p.max(PROB_FLOOR).ln())
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / examples.len() as f64)
    }

    /// Loss and parameter gradient summed over `batch`, each example weighted by `1/m`.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[&FluencyExample],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<(f64, SequenceModelParams)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grads = self.model.zeros_like();
        let mut loss = 0.0;
        for ex in batch {
            let inputs = self.inputs(self.kind.stream(&ex.pair)?);
            let n = inputs.len();
            let mut targets = vec![None; n];
            targets[n - 1] = Some(label_class(ex.label));
            let masks = (dropout > 0.0).then(|| {
                DropoutMasks::sample(
                    dropout,
                    n,
                    self.model.embed_dim(),
                    self.model.hidden_dim(),
                    rng,
                )
            });
            let (l, _) =
                self.model
                    .nll_with_grad(&inputs, &targets, weight, masks.as_ref(), &mut grads)?;
            loss += l;
        }
        Ok((loss, grads))
    }

    pub fn save(&self, dir: &Path, meta: &Metadata) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.tsv"))?;
        let mut meta = meta.clone();
        meta.insert("view".into(), self.kind.name().into());
        meta.insert("vocab_size".into(), self.model.vocab_size().to_string());
        meta.insert("embed_dim".into(), self.model.embed_dim().to_string());
        meta.insert("hidden_dim".into(), self.model.hidden_dim().to_string());
        meta.insert("classes".into(), self.model.num_classes().to_string());
        save_params(dir, "model", &self.model, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = load_metadata(dir, "model")?;
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Missing(format!("{k} in {}", dir.display())))
        };
        let kind = meta
            .get("view")
            .and_then(|v| ViewKind::from_name(v))
            .ok_or_else(|| Error::Missing(format!("view in {}", dir.display())))?;
        let vocab = Vocabulary::load(&dir.join("vocab.tsv"))?;
        let mut model = SequenceModelParams::zeros(
            get("vocab_size")?,
            get("embed_dim")?,
            get("hidden_dim")?,
            get("classes")?,
        );
        load_params_into(dir, "model", &mut model)?;
        if vocab.len() != model.vocab_size() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} entries, embedding has {} rows",
                vocab.len(),
                model.vocab_size()
            )));
        }
        Ok(FluencyView { kind, vocab, model })
    }
}

pub fn score_view(view: &FluencyView, ex: &BilingualExample) -> Result<FluencyScore> {
    view.score(ex)
}

/// Trains one view with Adam, returning the parameters with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train_view(
    kind: ViewKind,
    train: &[FluencyExample],
    val: &[FluencyExample],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(FluencyView, TrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n_fluent = train.iter().filter(|e| e.label.is_fluent()).count();
    if n_fluent == 0 || n_fluent == train.len() {
        return Err(Error::Validation(format!(
            "training set for {} needs both classes ({n_fluent} fluent of {})",
            kind.name(),
            train.len()
        )));
    }
    let streams: Vec<Vec<String>> = train
        .iter()
        .map(|e| kind.stream(&e.pair).map(<[String]>::to_vec))
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::build(&streams, cfg.min_count)?;
    let mut init_rng = rng::stream(seed, 0);
    let model =
        SequenceModelParams::new(vocab.len(), cfg.embed_dim, cfg.hidden_dim, 2, &mut init_rng);
    let mut view = FluencyView { kind, vocab, model };
    let mut adam = AdamState::new(&view.model, cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let selection_set = if val.is_empty() { train } else { val };
    let mut best = view.model.clone();
    let mut best_loss = view.mean_loss(selection_set)?;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut epoch_rng = rng::stream(seed, epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FluencyExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = view.batch_loss_and_grad(&batch, cfg.dropout, &mut epoch_rng)?;
            adam_step(&mut view.model, &grads, &mut adam)?;
            train_loss += loss * batch.len() as f64;
        }
        if !view.model.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} parameters after epoch {epoch}",
                kind.name()
            )));
        }
        let val_loss = view.mean_loss(selection_set)?;
        log.push(EpochStats {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = view.model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    view.model = best;
    Ok((
        view,
        TrainLog {
            view: kind,
            epochs: log,
            best_epoch,
            best_val_loss: best_loss,
        },
    ))
}

/// Arithmetic mean of the four views' fluent probabilities.
pub fn score_ensemble(views: &[FluencyView], ex: &BilingualExample) -> Result<f64> {
    check_complete(views)?;
    let mut sum = 0.0;
    for v in views {
        sum += v.score(ex)?.fluent;
    }
    Ok(sum / views.len() as f64)
}

fn check_complete(views: &[FluencyView]) -> Result<()> {
    let complete = views.len() == 4
        && ViewKind::ALL
            .iter()
            .all(|k| views.iter().any(|v| v.kind == *k));
    if complete {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "the ensemble needs exactly the four views, got [{}]",
            views
                .iter()
                .map(|v| v.kind.name())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

/// Fluent iff `f > 0.5`.
pub fn classify(f: f64) -> FluencyLabel {
    if f > DECISION_THRESHOLD {
        FluencyLabel::Fluent
    } else {
        FluencyLabel::NotFluent
    }
}

#[derive(Debug, Clone)]
pub struct FluencyEnsemble {
    views: Vec<FluencyView>,
}

/// Ensemble score of a generated candidate, which may lack a source sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateScore {
    pub fluency: f64,
    /// True when only the two target-side views were averaged.
    pub degraded: bool,
}

impl FluencyEnsemble {
    pub fn new(views: Vec<FluencyView>) -> Result<Self> {
        check_complete(&views)?;
        let mut views = views;
        views.sort_by_key(|v| ViewKind::ALL.iter().position(|k| *k == v.kind));
        Ok(FluencyEnsemble { views })
    }

    pub fn views(&self) -> &[FluencyView] {
        &self.views
    }

    pub fn view(&self, kind: ViewKind) -> &FluencyView {
        self.views
            .iter()
            .find(|v| v.kind == kind)
            .expect("complete ensemble")
    }

    pub fn score(&self, ex: &BilingualExample) -> Result<f64> {
        score_ensemble(&self.views, ex)
    }

    pub fn score_all(&self, examples: &[BilingualExample]) -> Result<Vec<f64>> {
        examples.par_iter().map(|e| self.score(e)).collect()
    }

    /// Full ensemble when source streams are present, otherwise the mean of
    /// the target-word and target-POS views.
    pub fn score_candidate(&self, ex: &BilingualExample) -> Result<CandidateScore> {
        let has_source = ex.source.as_ref().is_some_and(|s| !s.is_empty())
            && ex.source_pos.as_ref().is_some_and(|s| !s.is_empty());
        if has_source {
            return Ok(CandidateScore {
                fluency: self.score(ex)?,
                degraded: false,
            });
        }
        let t = self.view(ViewKind::TargetWords).score(ex)?.fluent;
        let p = self.view(ViewKind::TargetPos).score(ex)?.fluent;
        Ok(CandidateScore {
            fluency: (t + p) / 2.0,
            degraded: true,
        })
    }

    /// Writes one subdirectory per view.
    pub fn save(&self, dir: &Path, meta: &Metadata) -> Result<()> {
        for v in &self.views {
            v.save(&dir.join(v.kind.name()), meta)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let views = ViewKind::ALL
            .iter()
            .map(|k| {
                let v = FluencyView::load(&dir.join(k.name()))?;
                if v.kind != *k {
                    return Err(Error::Validation(format!(
                        "{} holds a {} view",
                        dir.join(k.name()).display(),
                        v.kind.name()
                    )));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        Self::new(views)
    }
}

/// Trains the four views concurrently, one thread each.
pub fn train_ensemble(
    train: &[FluencyExample],
    val: &[FluencyExample],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(FluencyEnsemble, Vec<TrainLog>)> {
    let results: Vec<Result<(FluencyView, TrainLog)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ViewKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let view_seed = rng::derive_seed(seed, 100 + i as u64);
                s.spawn(move || train_view(kind, train, val, cfg, view_seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("view training thread panicked"))
            .collect()
    });
    let mut views = Vec::new();
    let mut logs = Vec::new();
    for r in results {
        let (v, l) = r?;
        views.push(v);
        logs.push(l);
    }
    Ok((FluencyEnsemble::new(views)?, logs))
}

/// Fills `fluency` on every target record from the ensemble, pairing each
/// with its source record by sentence id.
pub fn score_records(ensemble: &FluencyEnsemble, records: &mut [CaptionRecord]) -> Result<()> {
    let pairs = pair_bilingual(records)?;
    let scores = ensemble.score_all(&pairs)?;
    let by_id: std::collections::HashMap<&str, f64> = pairs
        .iter()
        .zip(&scores)
        .map(|(p, s)| (p.sentence_id.as_str(), *s))
        .collect();
    for r in records
        .iter_mut()
        .filter(|r| r.language == Language::Target)
    {
        r.fluency = Some(by_id[r.sentence_id.as_str()]);
    }
    Ok(())
}

/// Recall and precision of the fluent class, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub recall: f64,
    pub precision: f64,
    /// False when nothing was predicted fluent; `precision` is then reported as 0.
    pub precision_defined: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

pub fn evaluate_pr(
    predictions: &[FluencyLabel],
    labels: &[FluencyLabel],
) -> Result<PrecisionRecall> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, y) in predictions.iter().zip(labels) {
        match (p.is_fluent(), y.is_fluent()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let recall = if tp + fneg == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fneg) as f64
    };
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined {
        100.0 * tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    Ok(PrecisionRecall {
        recall,
        precision,
        precision_defined,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}

pub fn accuracy(predictions: &[FluencyLabel], labels: &[FluencyLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Mean token length of the fluent training sentences.
pub fn length_threshold(fluent_training_lengths: &[usize]) -> Result<f64> {
    if fluent_training_lengths.is_empty() {
        return Err(Error::Empty("fluent training sentences".into()));
    }
    Ok(fluent_training_lengths.iter().sum::<usize>() as f64 / fluent_training_lengths.len() as f64)
}

/// Fluent iff shorter than the mean fluent training length.
pub fn length_baseline(
    lengths: &[usize],
    fluent_training_lengths: &[usize],
) -> Result<Vec<FluencyLabel>> {
    let threshold = length_threshold(fluent_training_lengths)?;
    Ok(lengths
        .iter()
        .map(|&l| {
            if (l as f64) < threshold {
                FluencyLabel::Fluent
            } else {
                FluencyLabel::NotFluent
            }
        })
        .collect())
}

/// Coin-flip predictions.
pub fn random_guess(n: usize, seed: u64) -> Vec<FluencyLabel> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            if r.random::<bool>() {
                FluencyLabel::Fluent
            } else {
                FluencyLabel::NotFluent
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Matrix;
    use crate::neuralnet::{grad_check, FD_STEP};
    use proptest::prelude::*;

    use FluencyLabel::{Fluent, NotFluent};

    fn pair(target: &[&str], label: FluencyLabel) -> FluencyExample {
        let t: Vec<String> = target.iter().map(|s| s.to_string()).collect();
        FluencyExample {
            pair: BilingualExample {
                sentence_id: target.join("_"),
                image_id: "img".into(),
                target_pos: Some(t.iter().map(|w| format!("p{}", w.len())).collect()),
                source: Some(t.iter().map(|w| w.to_uppercase()).collect()),
                source_pos: Some(t.iter().map(|_| "NN".to_string()).collect()),
                target: t,
                label: Some(label),
                fluency: None,
            },
            label,
        }
    }

    fn small_view(kind: ViewKind, seed: u64) -> (FluencyView, Vec<FluencyExample>) {
        let data = vec![
            pair(&["a", "bb", "c"], Fluent),
            pair(&["c", "xx", "a", "bb"], NotFluent),
            pair(&["bb", "a"], Fluent),
        ];
        let streams: Vec<Vec<String>> = data
            .iter()
            .map(|e| kind.stream(&e.pair).unwrap().to_vec())
            .collect();
        let vocab = Vocabulary::build(&streams, 1).unwrap();
        let mut r = rng::seeded(seed);
        let model = SequenceModelParams::new(vocab.len(), 4, 4, 2, &mut r);
        (FluencyView { kind, vocab, model }, data)
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let (view, data) = small_view(ViewKind::TargetWords, 21);
        assert!(view.vocab.len() <= 8);
        let batch: Vec<&FluencyExample> = data.iter().collect();
        let mut r = rng::seeded(0);
        let (_, grads) = view.batch_loss_and_grad(&batch, 0.0, &mut r).unwrap();
        let report = grad_check(
            &view.model,
            &grads,
            |m| {
                let v = FluencyView {
                    model: m.clone(),
                    ..view.clone()
                };
                let mut r = rng::seeded(0);
                v.batch_loss_and_grad(&batch, 0.0, &mut r).unwrap().0
            },
            FD_STEP,
            1e-4,
        );
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn scores_are_complementary_and_pure() {
        let (view, data) = small_view(ViewKind::SourcePos, 3);
        let s1 = view.score(&data[1].pair).unwrap();
        let s2 = view.score(&data[1].pair).unwrap();
        assert_eq!(s1, s2);
        assert!((s1.fluent + s1.not_fluent - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_head_scores_one_half() {
        let (mut view, data) = small_view(ViewKind::TargetPos, 4);
        view.model.head_w = Matrix::zeros(2, 4);
        view.model.head_b = vec![0.0, 0.0];
        assert_eq!(view.score(&data[0].pair).unwrap().fluent, 0.5);
    }

    #[test]
    fn missing_stream_is_an_error() {
        let (view, data) = small_view(ViewKind::SourcePos, 5);
        let mut ex = data[0].pair.clone();
        ex.source_pos = None;
        assert!(matches!(view.score(&ex), Err(Error::Missing(_))));
    }

    fn constant_view(kind: ViewKind, f: f64) -> FluencyView {
        let vocab = Vocabulary::build(&[vec!["x"]], 1).unwrap();
        let mut model = SequenceModelParams::zeros(vocab.len(), 2, 2, 2);
        // logit gap ln(f / (1-f)) gives exactly probability f up to rounding
        model.head_b = vec![(f / (1.0 - f)).ln(), 0.0];
        FluencyView { kind, vocab, model }
    }

    #[test]
    fn ensemble_is_the_mean_of_views() {
        let views: Vec<FluencyView> = ViewKind::ALL
            .iter()
            .zip([0.8, 0.6, 0.4, 0.2])
            .map(|(k, f)| constant_view(*k, f))
            .collect();
        let ex = pair(&["x"], Fluent).pair;
        assert!((score_ensemble(&views, &ex).unwrap() - 0.5).abs() < 1e-12);

        let same: Vec<FluencyView> = ViewKind::ALL
            .iter()
            .map(|k| constant_view(*k, 0.37))
            .collect();
        assert!((score_ensemble(&same, &ex).unwrap() - 0.37).abs() < 1e-12);

        assert!(score_ensemble(&views[..3], &ex).is_err());
        let dup = vec![
            views[0].clone(),
            views[0].clone(),
            views[2].clone(),
            views[3].clone(),
        ];
        assert!(score_ensemble(&dup, &ex).is_err());
    }

    #[test]
    fn ensemble_degrades_without_source() {
        let views: Vec<FluencyView> = ViewKind::ALL
            .iter()
            .zip([0.8, 0.6, 0.1, 0.1])
            .map(|(k, f)| constant_view(*k, f))
            .collect();
        let ens = FluencyEnsemble::new(views).unwrap();
        let mut ex = pair(&["x"], Fluent).pair;
        let full = ens.score_candidate(&ex).unwrap();
        assert!(!full.degraded);
        assert!((full.fluency - 0.4).abs() < 1e-12);
        ex.source = None;
        let partial = ens.score_candidate(&ex).unwrap();
        assert!(partial.degraded);
        assert!((partial.fluency - 0.7).abs() < 1e-12);
    }

    #[test]
    fn decision_threshold_is_strict() {
        assert_eq!(classify(0.803), Fluent);
        assert_eq!(classify(0.624), Fluent);
        assert_eq!(classify(0.424), NotFluent);
        assert_eq!(classify(0.5), NotFluent);
    }

    #[test]
    fn precision_recall_by_hand() {
        let r = evaluate_pr(&[Fluent, Fluent, NotFluent], &[Fluent, NotFluent, Fluent]).unwrap();
        assert_eq!((r.recall, r.precision), (50.0, 50.0));
        let perfect = evaluate_pr(&[Fluent, NotFluent], &[Fluent, NotFluent]).unwrap();
        assert_eq!((perfect.recall, perfect.precision), (100.0, 100.0));
        let none = evaluate_pr(&[NotFluent, NotFluent], &[Fluent, NotFluent]).unwrap();
        assert!(!none.precision_defined);
        assert_eq!(none.precision, 0.0);
    }

    #[test]
    fn all_fluent_predictor_on_fluency_test_split() {
        let labels: Vec<FluencyLabel> = std::iter::repeat_n(Fluent, 294)
            .chain(std::iter::repeat_n(NotFluent, 706))
            .collect();
        let r = evaluate_pr(&vec![Fluent; 1000], &labels).unwrap();
        assert!((r.precision - 29.4).abs() < 1e-9);
        assert_eq!(r.recall, 100.0);
    }

    #[test]
    fn length_baseline_is_strict() {
        let p = length_baseline(&[4, 5, 6], &[4, 6]).unwrap();
        assert_eq!(p, vec![Fluent, NotFluent, NotFluent]);
        assert!(length_baseline(&[1], &[]).is_err());
    }

    #[test]
    fn single_class_training_set_fails() {
        let data = vec![pair(&["a"], Fluent), pair(&["b"], Fluent)];
        let r = train_view(
            ViewKind::TargetWords,
            &data,
            &[],
            &ClassifierConfig::default(),
            1,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let data: Vec<FluencyExample> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    pair(&["a", "b", "c"], Fluent)
                } else {
                    pair(&["a", "zz", "b", "c"], NotFluent)
                }
            })
            .collect();
        let cfg = ClassifierConfig {
            embed_dim: 4,
            hidden_dim: 4,
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let (v1, l1) = train_view(ViewKind::TargetWords, &data, &data, &cfg, 9).unwrap();
        let (v2, l2) = train_view(ViewKind::TargetWords, &data, &data, &cfg, 9).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1.best_val_loss.to_bits(), l2.best_val_loss.to_bits());

        let dir = tempfile::tempdir().unwrap();
        v1.save(dir.path(), &Metadata::new()).unwrap();
        assert_eq!(FluencyView::load(dir.path()).unwrap(), v1);
    }

    proptest! {
        #[test]
        fn ensemble_is_permutation_invariant_and_convex(
            fs in prop::array::uniform4(0.01f64..0.99),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let views: Vec<FluencyView> = ViewKind::ALL
                .iter()
                .zip(fs)
                .map(|(k, f)| constant_view(*k, f))
                .collect();
            let shuffled: Vec<FluencyView> = perm.iter().map(|&i| views[i].clone()).collect();
            let ex = pair(&["x"], Fluent).pair;
            let a = score_ensemble(&views, &ex).unwrap();
            let b = score_ensemble(&shuffled, &ex).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn classification_is_monotone(f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
            let (hi, lo) = if f1 >= f2 { (f1, f2) } else { (f2, f1) };
            if classify(lo) == Fluent {
                prop_assert_eq!(classify(hi), Fluent);
            }
        }
    }
}

//! Image-conditioned caption generator.
//!
//! The projected image feature `W_v · CNN(I)` is the first LSTM input; its
//! prediction is not scored. Then the boundary token and the caption words are
//! fed one by one and each step predicts the next word, ending with the
//! boundary token again.

mod beam;

pub use beam::{beam_search, greedy_decode, CaptionerStep, Hypothesis, StepModel, TableModel};

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, FeatureSet, Language};
use crate::error::{Error, Result};
use crate::neuralnet::io::{load_metadata, load_params_into, save_params, Metadata};
use crate::neuralnet::params::{ParamSet, TensorRef, INIT_SCALE};
use crate::neuralnet::{
    clip_grad_norm, sgd_step, DropoutMasks, Matrix, SequenceModelParams, SgdSchedule, StepInput,
    PROB_FLOOR,
};
use crate::rng;
use crate::text::{Vocabulary, BOUNDARY_ID, CAPTION_MIN_COUNT};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams {
    /// `W_v`, E×d.
    pub image_proj: Matrix,
    /// `W_s`, the LSTM and the vocabulary head.
    pub decoder: SequenceModelParams,
}

impl CaptionerParams {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        vocab: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let image_proj = Matrix::uniform(embed, feature_dim, INIT_SCALE, rng);
        let decoder = SequenceModelParams::new(vocab, embed, hidden, vocab, rng);
        CaptionerParams {
            image_proj,
            decoder,
        }
    }

    pub fn zeros(feature_dim: usize, vocab: usize, embed: usize, hidden: usize) -> Self {
        CaptionerParams {
            image_proj: Matrix::zeros(embed, feature_dim),
            decoder: SequenceModelParams::zeros(vocab, embed, hidden, vocab),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.image_proj.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature has dimension {}, model expects {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(self.image_proj.matvec(feature))
    }

    fn sequence_inputs(&self, feature: &[f64], ids: &[usize]) -> Result<Vec<StepInput>> {
        check_bounded(ids, self.vocab_size())?;
        let mut inputs = Vec::with_capacity(ids.len());
        inputs.push(StepInput::Vector(self.project(feature)?));
        inputs.extend(ids[..ids.len() - 1].iter().map(|&t| StepInput::Token(t)));
        Ok(inputs)
    }

    /// Negative log-likelihood of one bounded caption, accumulating
    /// `scale · ∇NLL` into `grads`.
    fn nll_with_grad(
        &self,
        feature: &[f64],
        ids: &[usize],
        scale: f64,
        masks: Option<&DropoutMasks>,
        grads: &mut CaptionerParams,
    ) -> Result<f64> {
        let inputs = self.sequence_inputs(feature, ids)?;
        let out = self.decoder.forward(&inputs, masks)?;
        let mut logprob = 0.0;
        let mut dlogits = Vec::with_capacity(inputs.len());
        dlogits.push(None);
        for (p, &y) in out.probs[1..].iter().zip(&ids[1..]) {
            logprob += p[y].max(PROB_FLOOR).ln();
            let mut dz: Vec<f64> = p.iter().map(|v| scale * v).collect();
            dz[y] -= scale;
            dlogits.push(Some(dz));
        }
        let dinputs = self
            .decoder
            .backward(&inputs, &out, &dlogits, masks, &mut grads.decoder)?;
        let dx = dinputs[0].as_ref().expect("image step is a vector input");
        grads.image_proj.outer_add(dx, feature);
        Ok(-logprob)
    }
}

impl ParamSet for CaptionerParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "image_proj",
            rows: self.image_proj.rows(),
            cols: self.image_proj.cols(),
            data: self.image_proj.as_slice(),
        }];
        self.decoder.push_tensors(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.image_proj.as_mut_slice()];
        self.decoder.push_tensors_mut(&mut out);
        out
    }
}

fn check_bounded(ids: &[usize], vocab: usize) -> Result<()> {
    if ids.len() < 2 || ids[0] != BOUNDARY_ID || ids[ids.len() - 1] != BOUNDARY_ID {
        return Err(Error::Validation(
            "caption ids must start and end with the boundary token".into(),
        ));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::IdOutOfRange { id, size: vocab });
    }
    Ok(())
}

/// `Σ_{t=1}^{n+1} ln p(w_t | I, w_0 … w_{t−1})` for `ids = [w_0, …, w_{n+1}]`.
pub fn caption_logprob(params: &CaptionerParams, feature: &[f64], ids: &[usize]) -> Result<f64> {
    let inputs = params.sequence_inputs(feature, ids)?;
    let out = params.decoder.forward(&inputs, None)?;
    let mut logprob = 0.0;
    for (p, &y) in out.probs[1..].iter().zip(&ids[1..]) {
        logprob += p[y].max(PROB_FLOOR).ln();
    }
    Ok(logprob)
}

/// One image-caption training pair with ids already bracketed by boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample {
    pub image_id: String,
    pub sentence_id: String,
    pub feature: Arc<[f64]>,
    pub ids: Vec<usize>,
    pub fluency: Option<f64>,
}

/// Vocabulary over target-language captions.
pub fn build_caption_vocab(records: &[CaptionRecord], min_count: usize) -> Result<Vocabulary> {
    let sentences: Vec<&[String]> = records
        .iter()
        .filter(|r| r.language == Language::Target)
        .map(|r| r.tokens.as_slice())
        .collect();
    let owned: Vec<Vec<&str>> = sentences
        .iter()
        .map(|s| s.iter().map(String::as_str).collect())
        .collect();
    Vocabulary::build(&owned, min_count)
}

/// Joins target captions with their image features.
pub fn caption_examples(
    records: &[CaptionRecord],
    features: &FeatureSet,
    vocab: &Vocabulary,
) -> Result<Vec<CaptionExample>> {
    let mut cache: std::collections::HashMap<&str, Arc<[f64]>> = Default::default();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.language == Language::Target) {
        let feature = match cache.get(r.image_id.as_str()) {
            Some(f) => f.clone(),
            None => {
                let f: Arc<[f64]> = features.vector(&r.image_id)?.into();
                cache.insert(&r.image_id, f.clone());
                f
            }
        };
        out.push(CaptionExample {
            image_id: r.image_id.clone(),
            sentence_id: r.sentence_id.clone(),
            feature,
            ids: vocab.encode_bounded(&r.tokens),
            fluency: r.fluency,
        });
    }
    Ok(out)
}

/// `−(1/m) Σ_i μ_i ln p(S_i | I_i)`; all weights are 1 when `weights` is `None`.
pub fn scaled_batch_loss(
    params: &CaptionerParams,
    batch: &[&CaptionExample],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if let Some(w) = weights {
        if w.len() != batch.len() {
            return Err(Error::Dimension(format!(
                "{} weights for a batch of {}",
                w.len(),
                batch.len()
            )));
        }
    }
    let nll: Vec<f64> = batch
        .par_iter()
        .map(|ex| caption_logprob(params, &ex.feature, &ex.ids).map(|lp| -lp))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for (i, l) in nll.iter().enumerate() {
        match weights {
            Some(w) => sum += w[i] * l,
            None => sum += l,
        }
    }
    Ok(sum / batch.len() as f64)
}

/// bLoss: mean negative caption log-likelihood.
pub fn batch_loss(params: &CaptionerParams, batch: &[&CaptionExample]) -> Result<f64> {
    scaled_batch_loss(params, batch, None)
}

/// Weighted bLoss and its parameter gradient.
pub fn batch_loss_and_grad(
    params: &CaptionerParams,
    batch: &[&CaptionExample],
    weights: Option<&[f64]>,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<(f64, CaptionerParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let m = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut sum = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mu = weights.map_or(1.0, |w| w[i]);
        let masks = (dropout > 0.0).then(|| {
            DropoutMasks::sample(
                dropout,
                ex.ids.len() - 1,
                params.decoder.embed_dim(),
                params.decoder.hidden_dim(),
                rng,
            )
        });
        let nll = params.nll_with_grad(&ex.feature, &ex.ids, mu / m, masks.as_ref(), &mut grads)?;
        sum += mu * nll;
    }
    Ok((sum / m, grads))
}

/// Chooses the examples (and their loss weights) seen in one epoch.
pub trait EpochPlan: Sync {
    fn plan(&self, data: &[CaptionExample], epoch: usize) -> Result<Vec<(usize, f64)>>;
}

/// Every example once per epoch with weight 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct AllExamples;

impl EpochPlan for AllExamples {
    fn plan(&self, data: &[CaptionExample], _epoch: usize) -> Result<Vec<(usize, f64)>> {
        Ok((0..data.len()).map(|i| (i, 1.0)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub sgd: SgdSchedule,
    pub dropout: f64,
    pub clip_norm: Option<f64>,
    pub min_count: usize,
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            embed_dim: 32,
            hidden_dim: 32,
            batch_size: 64,
            epochs: 30,
            sgd: SgdSchedule::default(),
            dropout: 0.0,
            clip_norm: None,
            min_count: CAPTION_MIN_COUNT,
            max_len: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Captioner {
    pub vocab: Vocabulary,
    pub params: CaptionerParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionerEpoch {
    pub epoch: usize,
    pub examples: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionerLog {
    pub epochs: Vec<CaptionerEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn mean_loss(params: &CaptionerParams, data: &[CaptionExample]) -> Result<f64> {
    let refs: Vec<&CaptionExample> = data.iter().collect();
    batch_loss(params, &refs)
}

/// Mini-batch SGD; the returned model has the lowest validation bLoss seen
/// (training bLoss when `val` is empty), checked after every epoch.
pub fn train_captioner(
    train: &[CaptionExample],
    val: &[CaptionExample],
    vocab: Vocabulary,
    plan: &dyn EpochPlan,
    cfg: &CaptionerConfig,
    seed: u64,
) -> Result<(Captioner, CaptionerLog)> {
    if train.is_empty() {
        return Err(Error::Empty("captioner training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dim = train[0].feature.len();
    let mut init_rng = rng::stream(seed, 0);
    let mut params = CaptionerParams::new(
        dim,
        vocab.len(),
        cfg.embed_dim,
        cfg.hidden_dim,
        &mut init_rng,
    );
    let selection = if val.is_empty() { train } else { val };
    let mut best = params.clone();
    let mut best_loss = mean_loss(&params, selection)?;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut chosen = plan.plan(train, epoch)?;
        if chosen.is_empty() {
            return Err(Error::Empty(format!(
                "epoch {epoch} selected no training examples"
            )));
        }
        let mut epoch_rng = rng::stream(seed, 1 + epoch as u64);
        chosen.shuffle(&mut epoch_rng);
        let mut train_loss = 0.0;
        let mut batches = 0;
        for chunk in chosen.chunks(cfg.batch_size) {
            let batch: Vec<&CaptionExample> = chunk.iter().map(|&(i, _)| &train[i]).collect();
            let weights: Vec<f64> = chunk.iter().map(|&(_, w)| w).collect();
            let (loss, mut grads) =
                batch_loss_and_grad(&params, &batch, Some(&weights), cfg.dropout, &mut epoch_rng)?;
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            sgd_step(&mut params, &grads, &cfg.sgd, epoch)?;
            train_loss += loss * chunk.len() as f64;
            batches += 1;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite(format!(
                "captioner parameters after epoch {epoch}"
            )));
        }
        let val_loss = mean_loss(&params, selection)?;
        log.push(CaptionerEpoch {
            epoch,
            examples: chosen.len(),
            batches,
            train_loss: train_loss / chosen.len() as f64,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch + 1;
            best = params.clone();
        }
    }
    Ok((
        Captioner {
            vocab,
            params: best,
        },
        CaptionerLog {
            epochs: log,
            best_epoch,
            best_val_loss: best_loss,
        },
    ))
}

/// One generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub image_id: String,
    pub rank: usize,
    pub tokens: Vec<String>,
    pub logprob: f64,
}

impl Captioner {
    pub fn beam(&self, feature: &[f64], k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
        beam_search(&CaptionerStep::new(&self.params, feature)?, k, max_len)
    }

    /// Top `topk` beam captions for every image, in image-id order.
    pub fn caption_all(
        &self,
        features: &FeatureSet,
        image_ids: &[String],
        k: usize,
        max_len: usize,
        topk: usize,
    ) -> Result<Vec<GeneratedCaption>> {
        let per_image: Vec<Vec<GeneratedCaption>> = image_ids
            .par_iter()
            .map(|id| {
                let hyps = self.beam(features.vector(id)?, k, max_len)?;
                hyps.into_iter()
                    .take(topk)
                    .enumerate()
                    .map(|(rank, h)| {
                        Ok(GeneratedCaption {
                            image_id: id.clone(),
                            rank: rank + 1,
                            tokens: self.vocab.decode(h.words())?,
                            logprob: h.logprob,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(per_image.into_iter().flatten().collect())
    }

    pub fn save(&self, dir: &Path, meta: &Metadata) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.tsv"))?;
        let mut meta = meta.clone();
        meta.insert("feature_dim".into(), self.params.feature_dim().to_string());
        meta.insert("vocab_size".into(), self.params.vocab_size().to_string());
        meta.insert(
            "embed_dim".into(),
            self.params.decoder.embed_dim().to_string(),
        );
        meta.insert(
            "hidden_dim".into(),
            self.params.decoder.hidden_dim().to_string(),
        );
        save_params(dir, "captioner", &self.params, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = load_metadata(dir, "captioner")?;
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Missing(format!("{k} in {}", dir.display())))
        };
        let vocab = Vocabulary::load(&dir.join("vocab.tsv"))?;
        let mut params = CaptionerParams::zeros(
            get("feature_dim")?,
            get("vocab_size")?,
            get("embed_dim")?,
            get("hidden_dim")?,
        );
        load_params_into(dir, "captioner", &mut params)?;
        if vocab.len() != params.vocab_size() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} entries, model has {}",
                vocab.len(),
                params.vocab_size()
            )));
        }
        Ok(Captioner { vocab, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{grad_check, FD_STEP};
    use proptest::prelude::*;

    fn toy(seed: u64) -> (CaptionerParams, Vec<CaptionExample>) {
        let mut r = rng::seeded(seed);
        let params = CaptionerParams::new(3, 6, 4, 4, &mut r);
        let ex = |f: [f64; 3], ids: Vec<usize>| CaptionExample {
            image_id: "i".into(),
            sentence_id: "s".into(),
            feature: Arc::from(&f[..]),
            ids,
            fluency: None,
        };
        let data = vec![
            ex([0.6, 0.8, 0.0], vec![0, 2, 3, 0]),
            ex([0.0, 0.6, 0.8], vec![0, 4, 5, 1, 0]),
        ];
        (params, data)
    }

    fn uniform_model(dim: usize, vocab: usize) -> CaptionerParams {
        CaptionerParams::zeros(dim, vocab, 3, 3)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (params, data) = toy(11);
        let batch: Vec<&CaptionExample> = data.iter().collect();
        let weights = [1.0, 0.3];
        let mut r = rng::seeded(0);
        let (_, grads) = batch_loss_and_grad(&params, &batch, Some(&weights), 0.0, &mut r).unwrap();
        let report = grad_check(
            &params,
            &grads,
            |p| scaled_batch_loss(p, &batch, Some(&weights)).unwrap(),
            FD_STEP,
            1e-4,
        );
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn uniform_model_logprob_is_analytic() {
        let p = uniform_model(2, 7);
        let lp = caption_logprob(&p, &[1.0, 0.0], &[0, 3, 4, 5, 0]).unwrap();
        assert!((lp + 4.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_batch_loss_averages_term_counts() {
        let p = uniform_model(2, 5);
        let f: Arc<[f64]> = Arc::from(&[1.0, 0.0][..]);
        let mk = |ids: Vec<usize>| CaptionExample {
            image_id: "i".into(),
            sentence_id: "s".into(),
            feature: f.clone(),
            ids,
            fluency: None,
        };
        // one word plus END, three words plus END
        let a = mk(vec![0, 2, 0]);
        let b = mk(vec![0, 2, 3, 4, 0]);
        let loss = batch_loss(&p, &[&a, &b]).unwrap();
        assert!((loss - (2.0 + 4.0) * 5f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_example_loss_is_negative_logprob() {
        let (p, data) = toy(2);
        let lp = caption_logprob(&p, &data[1].feature, &data[1].ids).unwrap();
        assert_eq!(batch_loss(&p, &[&data[1]]).unwrap(), -lp);
        assert_eq!(batch_loss(&p, &[&data[1], &data[1]]).unwrap(), -lp);
        assert!(lp <= 0.0);
    }

    #[test]
    fn gradient_is_linear_in_weight() {
        let (p, data) = toy(5);
        let mut r = rng::seeded(0);
        let (_, g1) = batch_loss_and_grad(&p, &[&data[0]], None, 0.0, &mut r).unwrap();
        let (_, g2) = batch_loss_and_grad(&p, &[&data[0]], Some(&[0.25]), 0.0, &mut r).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors().iter()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((0.25 * x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn malformed_ids_are_rejected() {
        let (p, data) = toy(1);
        let f = &data[0].feature;
        assert!(matches!(
            caption_logprob(&p, f, &[0, 6, 0]),
            Err(Error::IdOutOfRange { .. })
        ));
        assert!(caption_logprob(&p, f, &[2, 3, 0]).is_err());
        assert!(caption_logprob(&p, &[1.0], &[0, 2, 0]).is_err());
        assert!(batch_loss(&p, &[]).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let (params, _) = toy(8);
        let vocab = Vocabulary::build(&[vec!["a", "b", "c", "d"]], 1).unwrap();
        let c = Captioner { vocab, params };
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path(), &Metadata::new()).unwrap();
        assert_eq!(Captioner::load(dir.path()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn logprob_telescopes(words in prop::collection::vec(2usize..6, 1..6), next in 2usize..6, seed in 0u64..50) {
            let (p, data) = toy(seed);
            let f = &data[0].feature;
            let mut ids = vec![0];
            ids.extend(&words);
            let inputs = p.sequence_inputs(f, &[ids.clone(), vec![0]].concat()).unwrap();
            let out = p.decoder.forward(&inputs, None).unwrap();
            let mut prefix = 0.0;
            for (row, &y) in out.probs[1..].iter().zip(&ids[1..]) {
                prefix += row[y].ln();
            }
            let mut longer = ids.clone();
            longer.push(next);
            longer.push(0);
            let inputs2 = p.sequence_inputs(f, &longer).unwrap();
            let out2 = p.decoder.forward(&inputs2, None).unwrap();
            let total = caption_logprob(&p, f, &longer).unwrap();
            let added = out2.probs[ids.len()][next].ln() + out2.probs[ids.len() + 1][0].ln();
            prop_assert!((total - (prefix + added)).abs() < 1e-9);
        }

        #[test]
        fn logprob_does_not_depend_on_batch_context(seed in 0u64..50) {
            let (p, data) = toy(seed);
            let alone = batch_loss(&p, &[&data[0]]).unwrap();
            let lp = caption_logprob(&p, &data[0].feature, &data[0].ids).unwrap();
            let both = batch_loss(&p, &[&data[0], &data[1]]).unwrap();
            let lp1 = caption_logprob(&p, &data[1].feature, &data[1].ids).unwrap();
            prop_assert_eq!(alone, -lp);
            prop_assert!((both - (-lp - lp1) / 2.0).abs() < 1e-12);
        }
    }
}

//! Finite-difference gradient checks on toy instances of both model families.

use std::sync::Arc;

use crate::captioner::{batch_loss_and_grad, scaled_batch_loss, CaptionExample, CaptionerParams};
use crate::corpus::{BilingualExample, FluencyExample, FluencyLabel};
use crate::error::Result;
use crate::fluency::{FluencyView, ViewKind};
use crate::neuralnet::{grad_check, GradCheckReport, SequenceModelParams, FD_STEP};
use crate::rng;
use crate::text::Vocabulary;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn labeled(target: &[&str], label: FluencyLabel) -> FluencyExample {
    let t: Vec<String> = target.iter().map(|s| s.to_string()).collect();
    FluencyExample {
        pair: BilingualExample {
            sentence_id: target.join("_"),
            image_id: "toy".into(),
            target_pos: Some(t.iter().map(|w| format!("p{}", w.len())).collect()),
            source: Some(t.iter().map(|w| w.to_uppercase()).collect()),
            source_pos: Some(vec!["NN".into(); t.len()]),
            target: t,
            label: Some(label),
            fluency: None,
        },
        label,
    }
}

/// Checks one fluency view (target words, 6-entry vocabulary) on a batch of three.
pub fn fluency_gradcheck(embed: usize, hidden: usize, seed: u64) -> Result<GradCheckReport> {
    let data = [
        labeled(&["a", "bb", "c"], FluencyLabel::Fluent),
        labeled(&["c", "xx", "a", "bb"], FluencyLabel::NotFluent),
        labeled(&["bb", "d", "a"], FluencyLabel::Fluent),
    ];
    let kind = ViewKind::TargetWords;
    let streams = data
        .iter()
        .map(|e| kind.stream(&e.pair).map(<[String]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(&streams, 1)?;
    let model = SequenceModelParams::new(vocab.len(), embed, hidden, 2, &mut rng::seeded(seed));
    let view = FluencyView { kind, vocab, model };
    let batch: Vec<&FluencyExample> = data.iter().collect();
    let (_, grads) = view.batch_loss_and_grad(&batch, 0.0, &mut rng::seeded(0))?;
    Ok(grad_check(
        &view.model,
        &grads,
        |m| {
            let v = FluencyView {
                model: m.clone(),
                ..view.clone()
            };
            v.batch_loss_and_grad(&batch, 0.0, &mut rng::seeded(0))
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        },
        FD_STEP,
        GRADCHECK_TOLERANCE,
    ))
}

/// Checks the captioner (8-entry vocabulary, 3-d features) on a weighted batch of two.
pub fn captioner_gradcheck(embed: usize, hidden: usize, seed: u64) -> Result<GradCheckReport> {
    let params = CaptionerParams::new(3, 8, embed, hidden, &mut rng::seeded(seed));
    let ex = |f: [f64; 3], ids: Vec<usize>, fluency: f64| CaptionExample {
        image_id: "toy".into(),
        sentence_id: "toy".into(),
        feature: Arc::from(&f[..]),
        ids,
        fluency: Some(fluency),
    };
    let data = [
        ex([0.6, 0.8, 0.0], vec![0, 2, 3, 7, 0], 0.9),
        ex([0.0, 0.6, 0.8], vec![0, 4, 5, 1, 6, 0], 0.3),
    ];
    let batch: Vec<&CaptionExample> = data.iter().collect();
    let weights = [1.0, 0.3];
    let (_, grads) =
        batch_loss_and_grad(&params, &batch, Some(&weights), 0.0, &mut rng::seeded(0))?;
    Ok(grad_check(
        &params,
        &grads,
        |p| scaled_batch_loss(p, &batch, Some(&weights)).unwrap_or(f64::NAN),
        FD_STEP,
        GRADCHECK_TOLERANCE,
    ))
}

//! Embedding → LSTM → affine/softmax head, unrolled over a sequence.
//!
//! The same network serves both model families: the fluency classifier reads the
//! head only at the last step, the caption decoder reads it at every word step.

use rand::Rng;

use super::lstm::{lstm_step_backward, lstm_step_cached, LstmParams, LstmState, StepCache};
use super::params::{ParamSet, TensorRef, INIT_SCALE};
use super::tensor::Matrix;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModelParams {
    /// `V × E`, one row per token id.
    pub embedding: Matrix,
    pub lstm: LstmParams,
    /// `C × H`
    pub head_w: Matrix,
    /// `C`
    pub head_b: Vec<f64>,
}

impl SequenceModelParams {
    pub fn new<R: Rng + ?Sized>(
        vocab: usize,
        embed: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = Matrix::uniform(vocab, embed, INIT_SCALE, rng);
        let lstm = LstmParams::uniform(embed, hidden, INIT_SCALE, rng);
        let head_w = Matrix::uniform(classes, hidden, INIT_SCALE, rng);
        let head_b = (0..classes)
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        SequenceModelParams {
            embedding,
            lstm,
            head_w,
            head_b,
        }
    }

    pub fn zeros(vocab: usize, embed: usize, hidden: usize, classes: usize) -> Self {
        SequenceModelParams {
            embedding: Matrix::zeros(vocab, embed),
            lstm: LstmParams::zeros(embed, hidden),
            head_w: Matrix::zeros(classes, hidden),
            head_b: vec![0.0; classes],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_size()
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.len()
    }

    pub(crate) fn push_tensors<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: "embedding",
            rows: self.embedding.rows(),
            cols: self.embedding.cols(),
            data: self.embedding.as_slice(),
        });
        self.lstm.push_tensors(out);
        out.push(TensorRef {
            name: "head.w",
            rows: self.head_w.rows(),
            cols: self.head_w.cols(),
            data: self.head_w.as_slice(),
        });
        out.push(TensorRef {
            name: "head.b",
            rows: self.head_b.len(),
            cols: 1,
            data: &self.head_b,
        });
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.embedding.as_mut_slice());
        self.lstm.push_tensors_mut(out);
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
    }

    fn embed(&self, input: &StepInput) -> Result<Vec<f64>> {
        match input {
            StepInput::Token(id) => {
                if *id >= self.vocab_size() {
                    return Err(Error::IdOutOfRange {
                        id: *id,
                        size: self.vocab_size(),
                    });
                }
                Ok(self.embedding.row(*id).to_vec())
            }
            StepInput::Vector(v) => {
                if v.len() != self.embed_dim() {
                    return Err(Error::Dimension(format!(
                        "input vector has length {}, embedding size is {}",
                        v.len(),
                        self.embed_dim()
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    /// Head logits for a hidden vector.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.head_b.clone();
        self.head_w.matvec_add(h, &mut z);
        z
    }

    /// One inference step without caches or dropout: returns the class
    /// distribution after consuming `input` and the new state.
    pub fn step(&self, input: &StepInput, state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        let x = self.embed(input)?;
        let cache = lstm_step_cached(&x, &state.c, &state.h, &self.lstm)?;
        let probs = softmax(&self.logits(&cache.h));
        Ok((
            probs,
            LstmState {
                c: cache.c,
                h: cache.h,
            },
        ))
    }

    /// Unrolls the network over `inputs` from a zero state.
    pub fn forward(
        &self,
        inputs: &[StepInput],
        masks: Option<&DropoutMasks>,
    ) -> Result<SequenceOutput> {
        if inputs.is_empty() {
            return Err(Error::Empty("sequence".into()));
        }
        if let Some(m) = masks {
            m.check(inputs.len(), self.embed_dim(), self.hidden_dim())?;
        }
        let mut state = LstmState::zeros(self.hidden_dim());
        let mut steps = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for (t, input) in inputs.iter().enumerate() {
            let mut x = self.embed(input)?;
            if let Some(m) = masks {
                apply_mask(&mut x, &m.input[t]);
            }
            let cache = lstm_step_cached(&x, &state.c, &state.h, &self.lstm)?;
            let mut h_out = cache.h.clone();
            if let Some(m) = masks {
                apply_mask(&mut h_out, &m.output[t]);
            }
            probs.push(softmax(&self.logits(&h_out)));
            state = LstmState {
                c: cache.c.clone(),
                h: cache.h.clone(),
            };
            steps.push(StepTrace { cache, h_out });
        }
        Ok(SequenceOutput {
            probs,
            final_hidden: state.h,
            steps,
        })
    }

    /// Backpropagates per-step logit gradients through the unrolled network.
    ///
    /// `dlogits[t]` is `None` for steps whose head output does not enter the
    /// loss. Parameter gradients are accumulated into `grads`; the returned
    /// vector holds the gradient on each `StepInput::Vector` input (and `None`
    /// for token inputs, whose gradient lands in the embedding rows).
    pub fn backward(
        &self,
        inputs: &[StepInput],
        out: &SequenceOutput,
        dlogits: &[Option<Vec<f64>>],
        masks: Option<&DropoutMasks>,
        grads: &mut SequenceModelParams,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if dlogits.len() != out.steps.len() || inputs.len() != out.steps.len() {
            return Err(Error::Dimension(format!(
                "backward got {} logit gradients and {} inputs for {} steps",
                dlogits.len(),
                inputs.len(),
                out.steps.len()
            )));
        }
        let hs = self.hidden_dim();
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let mut dinputs = vec![None; inputs.len()];
        for t in (0..out.steps.len()).rev() {
            let step = &out.steps[t];
            let mut dh = dh_next.clone();
            if let Some(dz) = &dlogits[t] {
                grads.head_w.outer_add(dz, &step.h_out);
                for (b, d) in grads.head_b.iter_mut().zip(dz) {
                    *b += d;
                }
                let mut dh_out = vec![0.0; hs];
                self.head_w.tmatvec_add(dz, &mut dh_out);
                if let Some(m) = masks {
                    apply_mask(&mut dh_out, &m.output[t]);
                }
                for (a, b) in dh.iter_mut().zip(&dh_out) {
                    *a += b;
                }
            }
            let g = lstm_step_backward(&step.cache, &dh, &dc_next, &self.lstm, &mut grads.lstm);
            let mut dx = g.dx;
            if let Some(m) = masks {
                apply_mask(&mut dx, &m.input[t]);
            }
            match &inputs[t] {
                StepInput::Token(id) => {
                    for (e, d) in grads.embedding.row_mut(*id).iter_mut().zip(&dx) {
                        *e += d;
                    }
                }
                StepInput::Vector(_) => dinputs[t] = Some(dx),
            }
            dh_next = g.dh_prev;
            dc_next = g.dc_prev;
        }
        Ok(dinputs)
    }

    /// Weighted negative log-likelihood of per-step targets, with gradients.
    ///
    /// Returns `weight · Σ_t −ln p_t(target_t)` over steps with a target and
    /// accumulates the matching gradient into `grads`.
    pub fn nll_with_grad(
        &self,
        inputs: &[StepInput],
        targets: &[Option<usize>],
        weight: f64,
        masks: Option<&DropoutMasks>,
        grads: &mut SequenceModelParams,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        if targets.len() != inputs.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} inputs",
                targets.len(),
                inputs.len()
            )));
        }
        let out = self.forward(inputs, masks)?;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(targets.len());
        for (p, target) in out.probs.iter().zip(targets) {
            match target {
                Some(y) => {
                    check_class(*y, p.len())?;
                    loss -= p[*y].max(PROB_FLOOR).ln();
                    let mut dz: Vec<f64> = p.iter().map(|v| weight * v).collect();
                    dz[*y] -= weight;
                    dlogits.push(Some(dz));
                }
                None => dlogits.push(None),
            }
        }
        let dinputs = self.backward(inputs, &out, &dlogits, masks, grads)?;
        Ok((weight * loss, dinputs))
    }
}

impl ParamSet for SequenceModelParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(6);
        self.push_tensors(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(6);
        self.push_tensors_mut(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    /// Row of the embedding matrix.
    Token(usize),
    /// A vector already in embedding space (e.g. a projected image feature).
    Vector(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub cache: StepCache,
    /// `h` after the output dropout mask, i.e. what the head saw.
    pub h_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// Class distribution at every step.
    pub probs: Vec<Vec<f64>>,
    /// Unmasked `h` after the last step.
    pub final_hidden: Vec<f64>,
    pub steps: Vec<StepTrace>,
}

/// Inverted-dropout masks: entries are `0` (dropped) or `1/(1-rate)` (kept).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One `E`-vector per step, applied to the embedding output.
    pub input: Vec<Vec<f64>>,
    /// One `H`-vector per step, applied to the LSTM output.
    pub output: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(
        rate: f64,
        steps: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { dropout_mask(rate, n, rng) };
        let input = (0..steps).map(|_| draw(embed)).collect();
        let output = (0..steps).map(|_| draw(hidden)).collect();
        DropoutMasks { input, output }
    }

    fn check(&self, steps: usize, embed: usize, hidden: usize) -> Result<()> {
        let ok = self.input.len() == steps
            && self.output.len() == steps
            && self.input.iter().all(|m| m.len() == embed)
            && self.output.iter().all(|m| m.len() == hidden);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(
                "dropout masks do not match the sequence".into(),
            ))
        }
    }
}

/// A single inverted-dropout mask. `rate = 1` drops everything.
pub fn dropout_mask<R: Rng + ?Sized>(rate: f64, n: usize, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    if rate >= 1.0 {
        return vec![0.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask(v: &mut [f64], mask: &[f64]) {
    for (a, m) in v.iter_mut().zip(mask) {
        *a *= m;
    }
}

fn check_class(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::IdOutOfRange {
            id: y,
            size: classes,
        });
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln max(p, PROB_FLOOR)` over a distribution.
pub fn log_probs(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
}

/// Summed negative log-likelihood `−Σ_t ln p_t[target_t]`, floored at [`PROB_FLOOR`].
pub fn cross_entropy(prob_rows: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if prob_rows.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} targets",
            prob_rows.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    for (p, &y) in prob_rows.iter().zip(targets) {
        check_class(y, p.len())?;
        loss -= p[y].max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> SequenceModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceModelParams::new(6, 4, 4, 3, &mut rng)
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let m = model(1);
        let inputs: Vec<_> = [0, 3, 5, 2].iter().map(|&i| StepInput::Token(i)).collect();
        let out = m.forward(&inputs, None).unwrap();
        for row in &out.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn single_step_final_hidden_is_step_output() {
        let m = model(2);
        let out = m.forward(&[StepInput::Token(4)], None).unwrap();
        assert_eq!(out.final_hidden, out.steps[0].cache.h);
        let (_, state) = m.step(&StepInput::Token(4), &LstmState::zeros(4)).unwrap();
        assert_eq!(state.h, out.final_hidden);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(model(1).forward(&[], None), Err(Error::Empty(_))));
    }

    #[test]
    fn full_dropout_zeroes_lstm_input() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masks = DropoutMasks::sample(1.0, 2, 4, 4, &mut rng);
        let inputs = [StepInput::Token(1), StepInput::Token(2)];
        let out = m.forward(&inputs, Some(&masks)).unwrap();
        for s in &out.steps {
            assert!(s.cache.x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_cross_entropy_is_t_ln_v() {
        let v = 7usize;
        let rows = vec![vec![1.0 / v as f64; v]; 5];
        let loss = cross_entropy(&rows, &[0, 1, 2, 3, 4]).unwrap();
        assert!((loss - 5.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_targets_give_zero_loss() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(cross_entropy(&rows, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn binary_cross_entropy_matches_two_class_form() {
        for &(f, y) in &[(0.8, 1usize), (0.3, 1), (0.3, 0), (0.999, 0)] {
            // class 0 = fluent with probability f
            let rows = vec![vec![f, 1.0 - f]];
            let target = if y == 1 { 0 } else { 1 };
            let loss = cross_entropy(&rows, &[target]).unwrap();
            let yf = y as f64;
            let expected = -(yf * f.ln() + (1.0 - yf) * (1.0 - f).ln());
            assert!((loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_is_floored() {
        let loss = cross_entropy(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert!(loss.is_finite());
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_target_is_an_error() {
        assert!(cross_entropy(&[vec![0.5, 0.5]], &[2]).is_err());
    }

    #[test]
    fn certain_prediction_has_zero_gradient() {
        // Head bias pushes class 0 to probability 1 in floating point.
        let mut m = model(4);
        m.head_w = Matrix::zeros(3, 4);
        m.head_b = vec![1000.0, 0.0, 0.0];
        let inputs = [StepInput::Token(1), StepInput::Token(2)];
        let mut grads = m.zeros_like();
        let (loss, _) = m
            .nll_with_grad(&inputs, &[Some(0), Some(0)], 1.0, None, &mut grads)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads
            .tensors()
            .iter()
            .all(|t| t.data.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn weighted_gradient_is_scaled_gradient() {
        let m = model(5);
        let inputs = [
            StepInput::Token(3),
            StepInput::Token(0),
            StepInput::Token(5),
        ];
        let targets = [None, Some(2), Some(1)];
        let mut g1 = m.zeros_like();
        let mut g2 = m.zeros_like();
        let (l1, _) = m
            .nll_with_grad(&inputs, &targets, 1.0, None, &mut g1)
            .unwrap();
        let (l2, _) = m
            .nll_with_grad(&inputs, &targets, 0.3, None, &mut g2)
            .unwrap();
        assert!((l2 - 0.3 * l1).abs() < 1e-14);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((0.3 * x - y).abs() < 1e-14);
            }
        }
    }
}

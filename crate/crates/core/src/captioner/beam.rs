use std::cmp::Ordering;
use std::sync::Arc;

use serde::Serialize;

use super::CaptionerParams;
use crate::error::{Error, Result};
use crate::neuralnet::{log_probs, LstmState, StepInput};
use crate::text::BOUNDARY_ID;

/// A left-to-right next-token distribution.
pub trait StepModel {
    type State;

    fn vocab_size(&self) -> usize;

    /// State before the first boundary token is fed.
    fn initial(&self) -> Result<Self::State>;

    /// Feeds `token` and returns `ln p(next | …, token)` with the new state.
    fn next(&self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// Captioner decoding state for one image: the LSTM after consuming `W_v · CNN(I)`.
pub struct CaptionerStep<'a> {
    params: &'a CaptionerParams,
    start: LstmState,
}

impl<'a> CaptionerStep<'a> {
    pub fn new(params: &'a CaptionerParams, feature: &[f64]) -> Result<Self> {
        let x = params.project(feature)?;
        let zero = LstmState::zeros(params.decoder.hidden_dim());
        let (_, start) = params.decoder.step(&StepInput::Vector(x), &zero)?;
        Ok(CaptionerStep { params, start })
    }
}

impl StepModel for CaptionerStep<'_> {
    type State = LstmState;

    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn initial(&self) -> Result<LstmState> {
        Ok(self.start.clone())
    }

    fn next(&self, state: &LstmState, token: usize) -> Result<(Vec<f64>, LstmState)> {
        let (probs, s) = self.params.decoder.step(&StepInput::Token(token), state)?;
        Ok((log_probs(&probs), s))
    }
}

/// First-order toy model: the next-token distribution depends only on the
/// previous token, `probs[prev][next]`.
#[derive(Debug, Clone)]
pub struct TableModel {
    log_probs: Vec<Vec<f64>>,
}

impl TableModel {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let v = probs.len();
        for row in &probs {
            let sum: f64 = row.iter().sum();
            if row.len() != v || (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Validation(
                    "transition table must be square with rows summing to 1".into(),
                ));
            }
        }
        Ok(TableModel {
            log_probs: probs.iter().map(|r| log_probs(r)).collect(),
        })
    }
}

impl StepModel for TableModel {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.log_probs.len()
    }

    fn initial(&self) -> Result<()> {
        Ok(())
    }

    fn next(&self, _state: &(), token: usize) -> Result<(Vec<f64>, ())> {
        let row = self.log_probs.get(token).ok_or(Error::IdOutOfRange {
            id: token,
            size: self.log_probs.len(),
        })?;
        Ok((row.clone(), ()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted ids, ending with the boundary token when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Emitted words without the closing boundary.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&BOUNDARY_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher log probability first, then shorter, then smaller ids.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

struct Live<S> {
    hyp: Hypothesis,
    state: Option<Arc<S>>,
}

/// Keeps the `k` best hypotheses per step; finished hypotheses stay in the
/// pool and compete with extensions. A hypothesis ends on emitting the
/// boundary token or after `max_len` tokens. No length normalization.
pub fn beam_search<M: StepModel>(model: &M, k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if k == 0 || max_len == 0 {
        return Err(Error::Config(
            "beam size and max length must be positive".into(),
        ));
    }
    let mut pool = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        },
        state: Some(Arc::new(model.initial()?)),
    }];
    for _ in 0..max_len {
        if pool.iter().all(|l| l.hyp.finished) {
            break;
        }
        // (parent, token, score); token None keeps a finished parent as is
        let mut children: Vec<(usize, Option<usize>, f64)> = Vec::new();
        let mut next_states: Vec<Option<Arc<M::State>>> = vec![None; pool.len()];
        for (i, live) in pool.iter().enumerate() {
            if live.hyp.finished {
                children.push((i, None, live.hyp.logprob));
                continue;
            }
            let last = live.hyp.tokens.last().copied().unwrap_or(BOUNDARY_ID);
            let state = live.state.as_ref().expect("live hypotheses carry state");
            let (lp, s) = model.next(state, last)?;
            let s = Arc::new(s);
            next_states[i] = Some(s.clone());
            for (t, l) in lp.iter().enumerate() {
                children.push((i, Some(t), live.hyp.logprob + l));
            }
        }
        let key = |c: &(usize, Option<usize>, f64)| -> Vec<usize> {
            let mut t = pool[c.0].hyp.tokens.clone();
            t.extend(c.1);
            t
        };
        children.sort_by(|a, b| {
            a.2.total_cmp(&b.2).reverse().then_with(|| {
                let (ka, kb) = (key(a), key(b));
                rank((a.2, &ka), (b.2, &kb))
            })
        });
        children.truncate(k);
        pool = children
            .into_iter()
            .map(|(i, t, score)| match t {
                None => Live {
                    hyp: pool[i].hyp.clone(),
                    state: None,
                },
                Some(t) => {
                    let mut tokens = pool[i].hyp.tokens.clone();
                    tokens.push(t);
                    let finished = t == BOUNDARY_ID;
                    Live {
                        hyp: Hypothesis {
                            tokens,
                            logprob: score,
                            finished,
                        },
                        state: if finished {
                            None
                        } else {
                            next_states[i].clone()
                        },
                    }
                }
            })
            .collect();
    }
    let mut out: Vec<Hypothesis> = pool.into_iter().map(|l| l.hyp).collect();
    out.sort_by(|a, b| rank((a.logprob, &a.tokens), (b.logprob, &b.tokens)));
    Ok(out)
}

/// Repeated argmax (lowest id on ties) until the boundary token or `max_len`.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max length must be positive".into()));
    }
    let mut state = model.initial()?;
    let mut last = BOUNDARY_ID;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let (lp, s) = model.next(&state, last)?;
        let (best, l) = lp
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc },
            );
        hyp.tokens.push(best);
        hyp.logprob += l;
        if best == BOUNDARY_ID {
            hyp.finished = true;
            break;
        }
        state = s;
        last = best;
    }
    Ok(hyp)
}

//! Fluency grading: two annotators per sentence, consensus export.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use fluentcap::corpus::{BilingualExample, FluencyExample, FluencyLabel};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const ANNOTATORS_PER_SENTENCE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Fluent,
    NotFluent,
    Difficult,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::Fluent, Grade::NotFluent, Grade::Difficult];

    pub fn label(self) -> Option<FluencyLabel> {
        match self {
            Grade::Fluent => Some(FluencyLabel::Fluent),
            Grade::NotFluent => Some(FluencyLabel::NotFluent),
            Grade::Difficult => None,
        }
    }
}

/// The consensus rule: both grades equal and decisive.
pub fn consensus(a: Grade, b: Grade) -> Option<FluencyLabel> {
    if a == b {
        a.label()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub sentence_id: String,
    pub annotator: String,
    pub grade: Grade,
    /// Milliseconds since the Unix epoch, set on first submission.
    pub timestamp: u64,
}

/// Body of a grade submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSubmission {
    pub sentence_id: String,
    pub annotator: String,
    pub grade: Grade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStatus {
    Open,
    Graded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub sentence_id: String,
    pub image_id: String,
    pub target: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Vec<String>>,
    pub annotator: String,
    pub status: AssignmentStatus,
}

#[derive(Debug, Clone, Default)]
struct SentenceState {
    assigned: Vec<String>,
    grades: BTreeMap<String, GradeRecord>,
}

/// Grading state. Mutations go through [`GradingEvent`]s so they can be logged.
#[derive(Debug, Clone)]
pub struct GradingState {
    items: Vec<BilingualExample>,
    index: HashMap<String, usize>,
    annotators: BTreeSet<String>,
    sentences: Vec<SentenceState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GradingEvent {
    Assigned {
        sentence_id: String,
        annotator: String,
    },
    Graded(GradeRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradingProgress {
    pub sentences: usize,
    pub assigned: usize,
    pub grades: usize,
    pub graded_once: usize,
    pub graded_twice: usize,
    pub consensus: usize,
}

impl GradingState {
    pub fn new(
        items: Vec<BilingualExample>,
        annotators: impl IntoIterator<Item = String>,
    ) -> ServiceResult<Self> {
        let mut index = HashMap::new();
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.sentence_id.clone(), i).is_some() {
                return Err(ServiceError::Validation(format!(
                    "duplicate sentence {}",
                    it.sentence_id
                )));
            }
        }
        let sentences = vec![SentenceState::default(); items.len()];
        Ok(GradingState {
            items,
            index,
            annotators: annotators.into_iter().collect(),
            sentences,
        })
    }

    pub fn is_annotator(&self, id: &str) -> bool {
        self.annotators.contains(id)
    }

    fn check_annotator(&self, id: &str) -> ServiceResult<()> {
        if self.is_annotator(id) {
            Ok(())
        } else {
            Err(ServiceError::Auth(format!("unknown annotator {id:?}")))
        }
    }

    fn sentence(&self, sentence_id: &str) -> ServiceResult<usize> {
        self.index
            .get(sentence_id)
            .copied()
            .ok_or_else(|| ServiceError::NotFound(format!("sentence {sentence_id:?}")))
    }

    fn assignment(&self, i: usize, annotator: &str) -> Assignment {
        let it = &self.items[i];
        let status = if self.sentences[i].grades.contains_key(annotator) {
            AssignmentStatus::Graded
        } else {
            AssignmentStatus::Open
        };
        Assignment {
            sentence_id: it.sentence_id.clone(),
            image_id: it.image_id.clone(),
            target: it.target.clone(),
            source: it.source.clone(),
            annotator: annotator.to_string(),
            status,
        }
    }

    /// Decides the next assignment for `annotator`.
    ///
    /// An annotator holding an ungraded assignment gets that one back.
    /// Otherwise the least-graded sentence this annotator has never seen and
    /// that still has a free slot is chosen, ties broken by corpus order.
    /// The returned event, if any, must be applied to make the issue stick.
    pub fn plan_assignment(
        &self,
        annotator: &str,
    ) -> ServiceResult<Option<(Assignment, Option<GradingEvent>)>> {
        self.check_annotator(annotator)?;
        if let Some(i) = self.sentences.iter().position(|s| {
            s.assigned.iter().any(|a| a == annotator) && !s.grades.contains_key(annotator)
        }) {
            return Ok(Some((self.assignment(i, annotator), None)));
        }
        let pick = self
            .sentences
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.assigned.len() < ANNOTATORS_PER_SENTENCE
                    && !s.assigned.iter().any(|a| a == annotator)
            })
            .min_by_key(|(i, s)| (s.grades.len(), s.assigned.len(), *i))
            .map(|(i, _)| i);
        Ok(pick.map(|i| {
            let event = GradingEvent::Assigned {
                sentence_id: self.items[i].sentence_id.clone(),
                annotator: annotator.to_string(),
            };
            (self.assignment(i, annotator), Some(event))
        }))
    }

    /// Validates a submission. `Ok((record, None))` is an idempotent retry.
    pub fn plan_grade(
        &self,
        sub: &GradeSubmission,
        now: u64,
    ) -> ServiceResult<(GradeRecord, Option<GradingEvent>)> {
        self.check_annotator(&sub.annotator)?;
        let i = self.sentence(&sub.sentence_id)?;
        let s = &self.sentences[i];
        if let Some(prev) = s.grades.get(&sub.annotator) {
            return if prev.grade == sub.grade {
                Ok((prev.clone(), None))
            } else {
                Err(ServiceError::Conflict(format!(
                    "annotator {} already graded {} as {:?}",
                    sub.annotator, sub.sentence_id, prev.grade
                )))
            };
        }
        if !s.assigned.iter().any(|a| a == &sub.annotator) {
            return Err(ServiceError::Validation(format!(
                "sentence {} is not assigned to {}",
                sub.sentence_id, sub.annotator
            )));
        }
        let record = GradeRecord {
            sentence_id: sub.sentence_id.clone(),
            annotator: sub.annotator.clone(),
            grade: sub.grade,
            timestamp: now,
        };
        Ok((record.clone(), Some(GradingEvent::Graded(record))))
    }

    /// Applies an event, re-checking the invariants it relies on.
    pub fn apply(&mut self, event: &GradingEvent) -> ServiceResult<()> {
        match event {
            GradingEvent::Assigned {
                sentence_id,
                annotator,
            } => {
                self.check_annotator(annotator)?;
                let i = self.sentence(sentence_id)?;
                let s = &mut self.sentences[i];
                if s.assigned.len() >= ANNOTATORS_PER_SENTENCE || s.assigned.contains(annotator) {
                    return Err(ServiceError::Conflict(format!(
                        "cannot assign {sentence_id} to {annotator}"
                    )));
                }
                s.assigned.push(annotator.clone());
            }
            GradingEvent::Graded(record) => {
                let i = self.sentence(&record.sentence_id)?;
                let s = &mut self.sentences[i];
                if !s.assigned.contains(&record.annotator)
                    || s.grades.contains_key(&record.annotator)
                {
                    return Err(ServiceError::Conflict(format!(
                        "cannot record grade of {} by {}",
                        record.sentence_id, record.annotator
                    )));
                }
                s.grades.insert(record.annotator.clone(), record.clone());
            }
        }
        Ok(())
    }

    /// Every issued (sentence, annotator) pair, in issue order per sentence.
    pub fn assignments(&self) -> impl Iterator<Item = (&str, &str)> {
        self.items.iter().zip(&self.sentences).flat_map(|(it, s)| {
            s.assigned
                .iter()
                .map(move |a| (it.sentence_id.as_str(), a.as_str()))
        })
    }

    pub fn grades(&self) -> impl Iterator<Item = &GradeRecord> {
        self.sentences.iter().flat_map(|s| s.grades.values())
    }

    /// Doubly graded sentences whose two grades agree on a decisive label,
    /// in corpus order.
    pub fn consensus_export(&self) -> Vec<FluencyExample> {
        self.items
            .iter()
            .zip(&self.sentences)
            .filter_map(|(it, s)| {
                let g: Vec<Grade> = s.grades.values().map(|r| r.grade).collect();
                match g.as_slice() {
                    [a, b] => consensus(*a, *b).map(|label| FluencyExample {
                        pair: it.clone(),
                        label,
                    }),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn progress(&self) -> GradingProgress {
        let mut p = GradingProgress {
            sentences: self.items.len(),
            ..Default::default()
        };
        for s in &self.sentences {
            p.assigned += s.assigned.len();
            p.grades += s.grades.len();
            match s.grades.len() {
                1 => p.graded_once += 1,
                2 => p.graded_twice += 1,
                _ => {}
            }
        }
        p.consensus = self.consensus_export().len();
        p
    }

    /// Largest number of grades held by any one sentence.
    pub fn max_grades_per_sentence(&self) -> usize {
        self.sentences
            .iter()
            .map(|s| s.grades.len())
            .max()
            .unwrap_or(0)
    }
}

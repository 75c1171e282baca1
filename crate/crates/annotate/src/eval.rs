//! Blind Likert rating of several systems' captions, two raters per image.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use fluentcap::rng::{derive_seed, hash_str, seeded};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const RATERS_PER_IMAGE: usize = 2;
pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemCaption {
    pub system_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub image_id: String,
    /// Shown in place of the picture when there is nothing to render.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub candidates: Vec<SystemCaption>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSet {
    pub images: Vec<EvalImage>,
}

impl EvalSet {
    pub fn validate(&self) -> ServiceResult<()> {
        let mut ids = HashSet::new();
        for im in &self.images {
            if !ids.insert(im.image_id.as_str()) {
                return Err(ServiceError::Validation(format!(
                    "duplicate evaluation image {}",
                    im.image_id
                )));
            }
            let systems: HashSet<&str> =
                im.candidates.iter().map(|c| c.system_id.as_str()).collect();
            if systems.len() != im.candidates.len() {
                return Err(ServiceError::Validation(format!(
                    "image {} lists a system twice",
                    im.image_id
                )));
            }
            if systems.len() < 2 {
                return Err(ServiceError::Validation(format!(
                    "image {} needs captions from at least two systems",
                    im.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn system_ids(&self) -> BTreeSet<&str> {
        self.images
            .iter()
            .flat_map(|im| im.candidates.iter().map(|c| c.system_id.as_str()))
            .collect()
    }
}

/// One caption as a rater sees it: no system identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindCaption {
    pub handle: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub rater: String,
    pub captions: Vec<BlindCaption>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandleRating {
    pub relevance: u8,
    pub fluency: u8,
}

/// Body of a rating submission: one score pair per handle of the item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub rater: String,
    pub image_id: String,
    pub ratings: BTreeMap<String, HandleRating>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub image_id: String,
    pub system_id: String,
    pub rater: String,
    pub relevance: u8,
    pub fluency: u8,
    pub presentation_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAck {
    pub image_id: String,
    pub rater: String,
    pub rated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EvalEvent {
    Served { image_id: String, rater: String },
    Rated { records: Vec<RatingRecord> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and population standard deviation (divide by n).
pub fn mean_sd(xs: &[f64]) -> Option<MeanSd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(MeanSd {
        mean,
        sd: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system_id: String,
    pub ratings: usize,
    pub relevance: MeanSd,
    pub fluency: MeanSd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalProgress {
    pub images: usize,
    pub served: usize,
    pub rated: usize,
    pub images_complete: usize,
}

#[derive(Debug, Clone)]
struct Session {
    rater: String,
    /// Candidate indices in presentation order.
    order: Vec<usize>,
    handles: Vec<String>,
    rated: bool,
}

#[derive(Debug, Clone)]
pub struct EvalState {
    set: EvalSet,
    index: HashMap<String, usize>,
    raters: BTreeSet<String>,
    seed: u64,
    sessions: Vec<Vec<Session>>,
    records: Vec<RatingRecord>,
}

impl EvalState {
    pub fn new(
        set: EvalSet,
        raters: impl IntoIterator<Item = String>,
        seed: u64,
    ) -> ServiceResult<Self> {
        set.validate()?;
        let index = set
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.image_id.clone(), i))
            .collect();
        let sessions = vec![Vec::new(); set.images.len()];
        Ok(EvalState {
            set,
            index,
            raters: raters.into_iter().collect(),
            seed,
            sessions,
            records: Vec::new(),
        })
    }

    fn check_rater(&self, id: &str) -> ServiceResult<()> {
        if self.raters.contains(id) {
            Ok(())
        } else {
            Err(ServiceError::Auth(format!("unknown rater {id:?}")))
        }
    }

    fn image(&self, image_id: &str) -> ServiceResult<usize> {
        self.index
            .get(image_id)
            .copied()
            .ok_or_else(|| ServiceError::NotFound(format!("evaluation image {image_id:?}")))
    }

    /// Presentation order and blind handles for `rater` on image `i`.
    /// A pure function of the seed, rater and image.
    fn session_for(&self, i: usize, rater: &str) -> Session {
        let im = &self.set.images[i];
        let key = derive_seed(
            self.seed,
            hash_str(rater) ^ hash_str(&im.image_id).rotate_left(17),
        );
        let mut order: Vec<usize> = (0..im.candidates.len()).collect();
        order.shuffle(&mut seeded(key));
        let systems = self.set.system_ids();
        let handles = order
            .iter()
            .map(|&c| {
                let mut salt = hash_str(&im.candidates[c].system_id);
                loop {
                    let h = format!("h{:016x}", derive_seed(key, salt));
                    if !systems.contains(h.as_str()) {
                        break h;
                    }
                    salt = salt.wrapping_add(1);
                }
            })
            .collect();
        Session {
            rater: rater.to_string(),
            order,
            handles,
            rated: false,
        }
    }

    fn item(&self, i: usize, s: &Session) -> EvalItem {
        let im = &self.set.images[i];
        EvalItem {
            image_id: im.image_id.clone(),
            description: im.description.clone(),
            rater: s.rater.clone(),
            captions: s
                .order
                .iter()
                .zip(&s.handles)
                .map(|(&c, h)| BlindCaption {
                    handle: h.clone(),
                    tokens: im.candidates[c].tokens.clone(),
                })
                .collect(),
        }
    }

    /// An open item is returned again; otherwise the least-served image this
    /// rater has not seen and with a free rater slot, ties by order.
    pub fn plan_item(&self, rater: &str) -> ServiceResult<Option<(EvalItem, Option<EvalEvent>)>> {
        self.check_rater(rater)?;
        for (i, ss) in self.sessions.iter().enumerate() {
            if let Some(s) = ss.iter().find(|s| s.rater == rater && !s.rated) {
                return Ok(Some((self.item(i, s), None)));
            }
        }
        let pick = self
            .sessions
            .iter()
            .enumerate()
            .filter(|(_, ss)| ss.len() < RATERS_PER_IMAGE && !ss.iter().any(|s| s.rater == rater))
            .min_by_key(|(i, ss)| (ss.len(), *i))
            .map(|(i, _)| i);
        Ok(pick.map(|i| {
            let s = self.session_for(i, rater);
            let event = EvalEvent::Served {
                image_id: self.set.images[i].image_id.clone(),
                rater: rater.to_string(),
            };
            (self.item(i, &s), Some(event))
        }))
    }

    /// Maps handle ratings back to systems. `Ok((ack, None))` is an
    /// idempotent retry.
    pub fn plan_rating(
        &self,
        sub: &RatingSubmission,
    ) -> ServiceResult<(RatingAck, Option<EvalEvent>)> {
        self.check_rater(&sub.rater)?;
        for (h, r) in &sub.ratings {
            for (what, v) in [("relevance", r.relevance), ("fluency", r.fluency)] {
                if !(LIKERT_MIN..=LIKERT_MAX).contains(&v) {
                    return Err(ServiceError::Validation(format!(
                        "{what} {v} for {h} is outside {LIKERT_MIN}..{LIKERT_MAX}"
                    )));
                }
            }
        }
        let i = self.image(&sub.image_id)?;
        let s = self.sessions[i]
            .iter()
            .find(|s| s.rater == sub.rater)
            .ok_or_else(|| {
                ServiceError::Validation(format!(
                    "image {} was not served to {}",
                    sub.image_id, sub.rater
                ))
            })?;
        let expected: BTreeSet<&str> = s.handles.iter().map(String::as_str).collect();
        let given: BTreeSet<&str> = sub.ratings.keys().map(String::as_str).collect();
        if expected != given {
            return Err(ServiceError::Validation(format!(
                "ratings must cover exactly the {} captions served for {}",
                expected.len(),
                sub.image_id
            )));
        }
        let im = &self.set.images[i];
        let records: Vec<RatingRecord> = s
            .order
            .iter()
            .zip(&s.handles)
            .enumerate()
            .map(|(pos, (&c, h))| {
                let r = sub.ratings[h];
                RatingRecord {
                    image_id: im.image_id.clone(),
                    system_id: im.candidates[c].system_id.clone(),
                    rater: sub.rater.clone(),
                    relevance: r.relevance,
                    fluency: r.fluency,
                    presentation_order: pos,
                }
            })
            .collect();
        let ack = RatingAck {
            image_id: im.image_id.clone(),
            rater: sub.rater.clone(),
            rated: records.len(),
        };
        if s.rated {
            let stored: Vec<&RatingRecord> = self
                .records
                .iter()
                .filter(|r| r.image_id == im.image_id && r.rater == sub.rater)
                .collect();
            return if stored.iter().copied().eq(records.iter()) {
                Ok((ack, None))
            } else {
                Err(ServiceError::Conflict(format!(
                    "{} already rated image {} differently",
                    sub.rater, sub.image_id
                )))
            };
        }
        Ok((ack, Some(EvalEvent::Rated { records })))
    }

    pub fn apply(&mut self, event: &EvalEvent) -> ServiceResult<()> {
        match event {
            EvalEvent::Served { image_id, rater } => {
                self.check_rater(rater)?;
                let i = self.image(image_id)?;
                let ss = &self.sessions[i];
                if ss.len() >= RATERS_PER_IMAGE || ss.iter().any(|s| &s.rater == rater) {
                    return Err(ServiceError::Conflict(format!(
                        "cannot serve {image_id} to {rater}"
                    )));
                }
                let s = self.session_for(i, rater);
                self.sessions[i].push(s);
            }
            EvalEvent::Rated { records } => {
                let first = records
                    .first()
                    .ok_or_else(|| ServiceError::Validation("empty rating".into()))?;
                let i = self.image(&first.image_id)?;
                let s = self.sessions[i]
                    .iter_mut()
                    .find(|s| s.rater == first.rater && !s.rated)
                    .ok_or_else(|| {
                        ServiceError::Conflict(format!(
                            "no open session for {} on {}",
                            first.rater, first.image_id
                        ))
                    })?;
                s.rated = true;
                self.records.extend(records.iter().cloned());
            }
        }
        Ok(())
    }

    /// Every (image, rater) session, in serve order per image.
    pub fn served(&self) -> impl Iterator<Item = (&str, &str)> {
        self.set
            .images
            .iter()
            .zip(&self.sessions)
            .flat_map(|(im, ss)| {
                ss.iter()
                    .map(move |s| (im.image_id.as_str(), s.rater.as_str()))
            })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    /// Per-system mean and population standard deviation, by system id.
    pub fn report(&self) -> Vec<SystemReport> {
        let mut by: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.records {
            let e = by.entry(&r.system_id).or_default();
            e.0.push(f64::from(r.relevance));
            e.1.push(f64::from(r.fluency));
        }
        by.into_iter()
            .filter_map(|(sys, (rel, flu))| {
                Some(SystemReport {
                    system_id: sys.to_string(),
                    ratings: rel.len(),
                    relevance: mean_sd(&rel)?,
                    fluency: mean_sd(&flu)?,
                })
            })
            .collect()
    }

    pub fn progress(&self) -> EvalProgress {
        EvalProgress {
            images: self.set.images.len(),
            served: self.sessions.iter().map(Vec::len).sum(),
            rated: self.sessions.iter().flatten().filter(|s| s.rated).count(),
            images_complete: self
                .sessions
                .iter()
                .filter(|ss| ss.iter().filter(|s| s.rated).count() == RATERS_PER_IMAGE)
                .count(),
        }
    }

    pub fn max_raters_per_image(&self) -> usize {
        self.sessions.iter().map(Vec::len).max().unwrap_or(0)
    }
}

//! Event-sourced annotation sessions.
//!
//! Every mutation is an event; a session's state is the fold of its events.
//! Backend output is stored inside the events, so replay needs no backend.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use promptseg_core::backend::{BoxPrompt, PointPrompt};
use promptseg_core::mask::RleMask;
use promptseg_core::prompt_sim::PolicyKind;
use promptseg_core::volume::Orientation;

use crate::evaluate::write_atomic;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("slice {0} is out of range")]
    SliceOutOfRange(usize),
    #[error("slice {0} is finalized")]
    Finalized(usize),
    #[error("slice {0} has no candidates yet")]
    NoCandidates(usize),
    #[error("candidate index {0} is not 0, 1 or 2")]
    BadIndex(usize),
    #[error("the first event must create the session")]
    NotCreated,
    #[error("session already created")]
    AlreadyCreated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub masks: Vec<RleMask>,
    pub predicted_iou: [f64; 3],
    pub preselected_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceState {
    pub points: Vec<PointPrompt>,
    #[serde(rename = "box")]
    pub bbox: Option<BoxPrompt>,
    pub candidates: Option<Candidates>,
    pub selected_index: Option<usize>,
    pub finalized: bool,
    pub final_mask: Option<RleMask>,
}

impl SliceState {
    /// Explicit selection if any, otherwise the preselected candidate.
    pub fn chosen_index(&self) -> Option<usize> {
        self.candidates
            .as_ref()
            .map(|c| self.selected_index.unwrap_or(c.preselected_index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        id: String,
        case_id: String,
        orientation: Orientation,
        policy: PolicyKind,
        n_slices: usize,
        start_slice: usize,
    },
    Prompted {
        slice: usize,
        point: Option<PointPrompt>,
        #[serde(rename = "box")]
        bbox: Option<BoxPrompt>,
        candidates: Candidates,
    },
    Selected {
        slice: usize,
        index: usize,
    },
    Finalized {
        slice: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub case_id: String,
    pub orientation: Orientation,
    pub policy: PolicyKind,
    pub n_slices: usize,
    pub current_slice: usize,
    pub slices: BTreeMap<usize, SliceState>,
}

impl Session {
    fn from_created(e: &SessionEvent) -> Result<Self, StateError> {
        match e {
            SessionEvent::Created {
                id,
                case_id,
                orientation,
                policy,
                n_slices,
                start_slice,
            } => Ok(Session {
                id: id.clone(),
                case_id: case_id.clone(),
                orientation: *orientation,
                policy: *policy,
                n_slices: *n_slices,
                current_slice: *start_slice,
                slices: BTreeMap::new(),
            }),
            _ => Err(StateError::NotCreated),
        }
    }

    pub fn slice(&self, k: usize) -> Option<&SliceState> {
        self.slices.get(&k)
    }

    /// Checks that slice `k` exists and is still editable.
    pub fn check_mutable(&self, k: usize) -> Result<(), StateError> {
        if k >= self.n_slices {
            return Err(StateError::SliceOutOfRange(k));
        }
        if self.slices.get(&k).is_some_and(|s| s.finalized) {
            return Err(StateError::Finalized(k));
        }
        Ok(())
    }

    /// Applies one event. Fails without modifying `self`.
    pub fn apply(&mut self, e: &SessionEvent) -> Result<(), StateError> {
        match e {
            SessionEvent::Created { .. } => return Err(StateError::AlreadyCreated),
            SessionEvent::Prompted {
                slice,
                point,
                bbox,
                candidates,
            } => {
                self.check_mutable(*slice)?;
                if candidates.preselected_index > 2 {
                    return Err(StateError::BadIndex(candidates.preselected_index));
                }
                let s = self.slices.entry(*slice).or_default();
                s.points.extend(point.iter().copied());
                if bbox.is_some() {
                    s.bbox = *bbox;
                }
                s.candidates = Some(candidates.clone());
                s.selected_index = None;
                self.current_slice = *slice;
            }
            SessionEvent::Selected { slice, index } => {
                self.check_mutable(*slice)?;
                if *index > 2 {
                    return Err(StateError::BadIndex(*index));
                }
                let s = self
                    .slices
                    .get_mut(slice)
                    .filter(|s| s.candidates.is_some())
                    .ok_or(StateError::NoCandidates(*slice))?;
                s.selected_index = Some(*index);
            }
            SessionEvent::Finalized { slice } => {
                self.check_mutable(*slice)?;
                let s = self
                    .slices
                    .get_mut(slice)
                    .filter(|s| s.candidates.is_some())
                    .ok_or(StateError::NoCandidates(*slice))?;
                let i = s.chosen_index().expect("candidates present");
                s.final_mask =
                    Some(s.candidates.as_ref().expect("candidates present").masks[i].clone());
                s.finalized = true;
                self.current_slice = (*slice + 1).min(self.n_slices - 1);
            }
        }
        Ok(())
    }

    pub fn replay(events: &[SessionEvent]) -> Result<Session, StateError> {
        let (first, rest) = events.split_first().ok_or(StateError::NotCreated)?;
        let mut s = Session::from_created(first)?;
        for e in rest {
            s.apply(e)?;
        }
        Ok(s)
    }

    /// Finalized slices nearest to `k` first; ties go to the lower index.
    pub fn nearest_finalized(&self, k: usize) -> Option<(usize, &RleMask)> {
        self.slices
            .iter()
            .filter_map(|(&j, s)| {
                s.final_mask
                    .as_ref()
                    .filter(|_| s.finalized)
                    .map(|m| (j, m))
            })
            .min_by_key(|(j, _)| (j.abs_diff(k), *j))
    }

    pub fn finalized_masks(&self) -> impl Iterator<Item = (usize, &RleMask)> {
        self.slices.iter().filter_map(|(&k, s)| {
            s.final_mask
                .as_ref()
                .filter(|_| s.finalized)
                .map(|m| (k, m))
        })
    }
}

/// On-disk form: the event log plus the time it was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: String,
    pub persisted_at: String,
    pub events: Vec<SessionEvent>,
}

/// A session together with its event log.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub state: Session,
    pub events: Vec<SessionEvent>,
    pub persisted_at: String,
}

impl SessionRecord {
    pub fn create(created: SessionEvent) -> Result<Self, StateError> {
        let state = Session::from_created(&created)?;
        Ok(SessionRecord {
            state,
            events: vec![created],
            persisted_at: String::new(),
        })
    }

    pub fn path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.json"))
    }

    /// Applies `e` and persists the extended log. On any failure the record
    /// is left as it was.
    pub fn commit(&mut self, e: SessionEvent, dir: &Path) -> Result<(), CommitError> {
        let mut next = self.state.clone();
        next.apply(&e)?;
        let mut events = self.events.clone();
        events.push(e);
        let persisted_at = persist(dir, &self.state.id, &events)?;
        self.state = next;
        self.events = events;
        self.persisted_at = persisted_at;
        Ok(())
    }

    /// Writes the current log (used right after creation).
    pub fn persist(&mut self, dir: &Path) -> io::Result<()> {
        self.persisted_at = persist(dir, &self.state.id, &self.events)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = fs::read_to_string(path)?;
        let log: SessionLog = serde_json::from_str(&text)?;
        let state = Session::replay(&log.events)?;
        Ok(SessionRecord {
            state,
            events: log.events,
            persisted_at: log.persisted_at,
        })
    }
}

fn persist(dir: &Path, id: &str, events: &[SessionEvent]) -> io::Result<String> {
    let persisted_at = chrono::Utc::now().to_rfc3339();
    let log = SessionLog {
        session_id: id.to_string(),
        persisted_at: persisted_at.clone(),
        events: events.to_vec(),
    };
    let bytes = serde_json::to_vec_pretty(&log).expect("session log serializes");
    write_atomic(&SessionRecord::path(dir, id), &bytes)?;
    Ok(persisted_at)
}

#[derive(Debug, Error)]
pub enum CommitError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error("cannot persist session: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    State(#[from] StateError),
}

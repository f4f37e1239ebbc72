//! Track creation, continuation and removal.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::daq::{momentum_update, Track, TrackStatus};
use crate::error::{Error, Result};
use crate::matching::mask_iou;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifecycleConfig {
    /// Minimum foreground score for an anchor to start a track.
    pub accept_threshold: f64,
    /// A new track is rejected if its mask overlaps an existing one at this IoU.
    pub dup_iou: f64,
    /// Consecutive disappearance verdicts tolerated before removal.
    pub grace_frames: usize,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            accept_threshold: 0.5,
            dup_iou: 0.7,
            grace_frames: 0,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accept_threshold) || !(0.0..=1.0).contains(&self.dup_iou) {
            return Err(Error::Config("accept_threshold and dup_iou must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Emerged,
    Disappeared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub id: u32,
    pub t: usize,
}

/// Active tracks, id counter and an append-only event log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub next_id: u32,
    pub events: Vec<Event>,
    misses: BTreeMap<u32, usize>,
}

impl Default for TrackSet {
    fn default() -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 1,
            events: Vec::new(),
            misses: BTreeMap::new(),
        }
    }
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active(&self) -> Vec<&Track> {
        self.tracks.iter().filter(|t| t.is_active()).collect()
    }

    pub fn active_ids(&self) -> Vec<u32> {
        self.active().iter().map(|t| t.id).collect()
    }

    pub fn get(&self, id: u32) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }
}

/// Active ids implied by an event log.
pub fn replay_events(events: &[Event]) -> Result<BTreeSet<u32>> {
    let mut active = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for e in events {
        match e.kind {
            EventKind::Emerged => {
                if !seen.insert(e.id) {
                    return Err(Error::InternalState(format!("track id {} emerged twice", e.id)));
                }
                active.insert(e.id);
            }
            EventKind::Disappeared => {
                if !active.remove(&e.id) {
                    return Err(Error::InternalState(format!(
                        "track id {} disappeared while inactive",
                        e.id
                    )));
                }
            }
        }
    }
    Ok(active)
}

/// Disappearance verdict for one active track.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub track: u32,
    pub disappeared: bool,
}

/// Tracker-1 output for a continuing track.
#[derive(Clone, Debug, PartialEq)]
pub struct CtqUpdate {
    pub track: u32,
    pub feat: Vec<f64>,
    /// Appearance feature pooled under the predicted mask.
    pub app_feat: Vec<f64>,
    pub score: f64,
    pub mask: Vec<f64>,
}

/// Tracker-1 output for an anchor that may start a track.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Candidate index or static slot the anchor was built from.
    pub source: usize,
    pub feat: Vec<f64>,
    pub app_feat: Vec<f64>,
    pub score: f64,
    pub mask: Vec<f64>,
}

/// Applies one frame of verdicts and outputs.
///
/// Returns `(new track ids with the candidate position they came from,
/// removed track ids)`.
pub fn lifecycle_update(
    set: &mut TrackSet,
    t: usize,
    ctqs: &[CtqUpdate],
    candidates: &[Candidate],
    verdicts: &[Verdict],
    cfg: &LifecycleConfig,
) -> Result<(Vec<(u32, usize)>, Vec<u32>)> {
    let active: BTreeSet<u32> = set.active_ids().into_iter().collect();
    let covered: BTreeSet<u32> = verdicts.iter().map(|v| v.track).collect();
    if covered != active || verdicts.len() != active.len() {
        return Err(Error::InternalState(format!(
            "verdicts cover {covered:?}, active tracks are {active:?}"
        )));
    }
    let ctq_ids: BTreeSet<u32> = ctqs.iter().map(|c| c.track).collect();
    if ctq_ids != active || ctqs.len() != active.len() {
        return Err(Error::InternalState("tracker outputs do not match active tracks".into()));
    }

    let mut removed = Vec::new();
    for v in verdicts {
        let misses = set.misses.entry(v.track).or_insert(0);
        *misses = if v.disappeared { *misses + 1 } else { 0 };
        if *misses > cfg.grace_frames {
            removed.push(v.track);
        }
    }
    for tr in set.tracks.iter_mut() {
        if removed.contains(&tr.id) {
            tr.status = TrackStatus::Disappeared;
            set.events.push(Event {
                kind: EventKind::Disappeared,
                id: tr.id,
                t,
            });
        }
    }
    for id in &removed {
        set.misses.remove(id);
    }
    set.tracks.retain(|tr| tr.is_active());

    let mut kept_masks: Vec<&[f64]> = Vec::new();
    for u in ctqs {
        if removed.contains(&u.track) {
            continue;
        }
        let tr = set
            .tracks
            .iter_mut()
            .find(|tr| tr.id == u.track)
            .ok_or_else(|| Error::InternalState(format!("track {} vanished", u.track)))?;
        tr.ctq_feat = u.feat.clone();
        tr.score = u.score;
        tr.last_seen = t;
        momentum_update(tr, &u.app_feat)?;
        kept_masks.push(&u.mask);
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .total_cmp(&candidates[a].score)
            .then(candidates[a].source.cmp(&candidates[b].source))
    });
    let mut born = Vec::new();
    for k in order {
        let cand = &candidates[k];
        if cand.score < cfg.accept_threshold {
            continue;
        }
        if kept_masks.iter().any(|m| mask_iou(m, &cand.mask) >= cfg.dup_iou) {
            continue;
        }
        let id = set.next_id;
        set.next_id += 1;
        set.tracks
            .push(Track::new(id, cand.feat.clone(), cand.app_feat.clone(), cand.score, t));
        set.events.push(Event {
            kind: EventKind::Emerged,
            id,
            t,
        });
        kept_masks.push(&cand.mask);
        born.push((id, k));
    }
    Ok((born, removed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(source: usize, score: f64, mask: Vec<f64>) -> Candidate {
        Candidate {
            source,
            feat: vec![0.0; 2],
            app_feat: vec![1.0, 0.0],
            score,
            mask,
        }
    }

    #[test]
    fn duplicate_anchor_masks_start_one_track() {
        let mut set = TrackSet::new();
        let m = vec![1.0, 1.0, 0.0];
        let cands = [cand(4, 0.8, m.clone()), cand(2, 0.8, m.clone()), cand(1, 0.3, m)];
        let (born, _) = lifecycle_update(&mut set, 1, &[], &cands, &[], &LifecycleConfig::default()).unwrap();
        assert_eq!(born, vec![(1, 1)]);
        assert_eq!(set.tracks.len(), 1);
        assert_eq!(replay_events(&set.events).unwrap(), [1].into_iter().collect());
    }

    #[test]
    fn verdict_coverage_checked() {
        let mut set = TrackSet::new();
        let cfg = LifecycleConfig::default();
        lifecycle_update(&mut set, 1, &[], &[cand(0, 0.9, vec![1.0])], &[], &cfg).unwrap();
        assert!(lifecycle_update(&mut set, 2, &[], &[], &[], &cfg).is_err());
    }

    #[test]
    fn grace_frames_delay_removal() {
        let mut set = TrackSet::new();
        let cfg = LifecycleConfig {
            grace_frames: 1,
            ..Default::default()
        };
        lifecycle_update(&mut set, 1, &[], &[cand(0, 0.9, vec![1.0, 0.0])], &[], &cfg).unwrap();
        let upd = CtqUpdate {
            track: 1,
            feat: vec![0.0; 2],
            app_feat: vec![1.0, 0.0],
            score: 0.9,
            mask: vec![1.0, 0.0],
        };
        let v = [Verdict { track: 1, disappeared: true }];
        let (_, removed) = lifecycle_update(&mut set, 2, &[upd.clone()], &[], &v, &cfg).unwrap();
        assert!(removed.is_empty());
        let (_, removed) = lifecycle_update(&mut set, 3, &[upd], &[], &v, &cfg).unwrap();
        assert_eq!(removed, vec![1]);
        assert!(set.active().is_empty());
    }
}

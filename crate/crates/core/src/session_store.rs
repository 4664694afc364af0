//! Event-sourced session state.
//!
//! A [`SessionSnapshot`] is only ever changed by applying bus events, so the
//! fold of a session's log always reproduces the live snapshot. Modules that
//! need to change session state emit events through a [`SessionWriter`],
//! which sequences them, applies them, and buffers them for commit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{AnchorChange, AssetUpdate, BusEvent, EventPayload, NpcAction, PromptMark, StateUpdate};
use crate::game_schema::{AnchorValue, EntityKind, GameDefinition, Modality};
use crate::narrative::{BeatOrigin, BeatTrigger, NarrativeBeat};
use crate::status_manager::DiscrepancyReport;
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("expected seq {expected}, got {got}")]
    GapDetected { expected: u64, got: u64 },
    #[error("session has ended; no further mutation allowed")]
    MutationAfterEnd,
    #[error("session is closed")]
    SessionClosed,
    #[error("invalid memory fragment: {0}")]
    InvalidFragment(String),
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error("unknown anchor '{0}'")]
    UnknownAnchor(String),
    #[error("inconsistent event: {0}")]
    Inconsistent(String),
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Achieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub game_id: String,
    pub chapter_cursor: usize,
    pub anchor_values: BTreeMap<String, AnchorValue>,
    pub goal_status: BTreeMap<String, Status>,
    /// goal_id -> subgoal_id -> status
    pub subgoal_status: BTreeMap<String, BTreeMap<String, Status>>,
    pub turn: u64,
    pub ended: bool,
    pub ending_summary: Option<String>,
    /// Last turn in which an anchor changed or a subgoal was satisfied.
    pub last_progress_turn: u64,
    /// Last turn in which a stall-triggered beat was injected.
    pub last_stall_beat_turn: u64,
}

impl SessionState {
    pub fn subgoal_achieved(&self, goal_id: &str, subgoal_id: &str) -> bool {
        self.subgoal_status.get(goal_id).and_then(|s| s.get(subgoal_id)) == Some(&Status::Achieved)
    }

    pub fn goal_achieved(&self, goal_id: &str) -> bool {
        self.goal_status.get(goal_id) == Some(&Status::Achieved)
    }

    /// Recomputes goal achievement from subgoal latches.
    pub fn derived_goal_status(&self, goal_id: &str) -> Status {
        match self.subgoal_status.get(goal_id) {
            Some(subs) if !subs.is_empty() && subs.values().all(|s| *s == Status::Achieved) => Status::Achieved,
            _ => Status::Pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFragment {
    pub fragment_id: String,
    pub session_id: String,
    pub character_id: String,
    pub content: String,
    pub turn_created: u64,
    pub salience: f64,
    pub keywords: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub modality: Modality,
    pub descriptor: String,
    pub version: u64,
    pub derived_from_metadata_version: u64,
}

/// The metadata part of an entity, as carried by upsert events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMeta {
    pub entity_id: String,
    pub kind: EntityKind,
    pub name: String,
    pub description: String,
    pub attributes: BTreeMap<String, String>,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub session_id: String,
    pub kind: EntityKind,
    pub name: String,
    pub description: String,
    pub attributes: BTreeMap<String, String>,
    pub assets: Vec<AssetRecord>,
    pub alive: bool,
    pub metadata_version: u64,
}

impl Entity {
    pub fn meta(&self) -> EntityMeta {
        EntityMeta {
            entity_id: self.entity_id.clone(),
            kind: self.kind,
            name: self.name.clone(),
            description: self.description.clone(),
            attributes: self.attributes.clone(),
            alive: self.alive,
        }
    }

    pub fn latest_asset(&self, modality: Modality) -> Option<&AssetRecord> {
        self.assets.iter().filter(|a| a.modality == modality).max_by_key(|a| a.version)
    }

    pub fn is_stale(&self, asset: &AssetRecord) -> bool {
        asset.derived_from_metadata_version < self.metadata_version
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NpcMark {
    /// Seq of the NPC's most recent dialogue or physical action.
    pub last_action_seq: u64,
    pub prompt: Option<PromptMark>,
}

/// Everything a session knows, rebuilt exactly by folding its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub last_seq: u64,
    pub state: SessionState,
    pub fragments: Vec<MemoryFragment>,
    pub entities: BTreeMap<String, Entity>,
    pub beats: Vec<NarrativeBeat>,
    pub npc_marks: BTreeMap<String, NpcMark>,
    pub reports: Vec<DiscrepancyReport>,
}

impl SessionSnapshot {
    /// Initial snapshot before any event: anchors at their declared initial
    /// values, all goals pending, turn 0.
    pub fn new(session_id: &str, game: &GameDefinition) -> Self {
        let anchor_values = game.anchors.iter().map(|a| (a.anchor_id.clone(), a.initial_value.clone())).collect();
        let goal_status = game.goals().map(|g| (g.goal_id.clone(), Status::Pending)).collect();
        let subgoal_status = game
            .goals()
            .map(|g| (g.goal_id.clone(), g.subgoals.iter().map(|s| (s.subgoal_id.clone(), Status::Pending)).collect()))
            .collect();
        Self {
            last_seq: 0,
            state: SessionState {
                session_id: session_id.to_string(),
                game_id: game.game_id.clone(),
                chapter_cursor: 0,
                anchor_values,
                goal_status,
                subgoal_status,
                turn: 0,
                ended: false,
                ending_summary: None,
                last_progress_turn: 0,
                last_stall_beat_turn: 0,
            },
            fragments: Vec::new(),
            entities: BTreeMap::new(),
            beats: Vec::new(),
            npc_marks: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.state.session_id
    }

    /// Canonical serialization (stable field order, sorted maps).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshots always serialize")
    }

    /// Folds a full log onto an initial snapshot.
    pub fn replay<'a>(mut self, events: impl IntoIterator<Item = &'a BusEvent>) -> Result<Self, StoreError> {
        for event in events {
            self.apply(event)?;
        }
        Ok(self)
    }

    /// Applies one event. Deterministic: the result depends only on the
    /// current snapshot and the event.
    pub fn apply(&mut self, event: &BusEvent) -> Result<(), StoreError> {
        if event.seq != self.last_seq + 1 {
            return Err(StoreError::GapDetected { expected: self.last_seq + 1, got: event.seq });
        }
        if self.state.ended {
            return Err(StoreError::MutationAfterEnd);
        }
        let turn = self.state.turn;
        match &event.payload {
            EventPayload::PlayerAction { .. } => self.state.turn += 1,
            EventPayload::NpcAction(action) => self.apply_npc_action(event.seq, action)?,
            EventPayload::StateUpdated(update) => self.apply_state_update(update)?,
            EventPayload::GoalAchieved { goal_id, .. } => {
                if self.state.derived_goal_status(goal_id) != Status::Achieved {
                    return Err(StoreError::Inconsistent(format!("goal '{goal_id}' achieved before all subgoals")));
                }
                self.state.goal_status.insert(goal_id.clone(), Status::Achieved);
            }
            EventPayload::ChapterAdvanced { from, to } => {
                if *from != self.state.chapter_cursor {
                    return Err(StoreError::Inconsistent(format!("chapter advance from {from} but cursor is {}", self.state.chapter_cursor)));
                }
                self.state.chapter_cursor = *to;
            }
            EventPayload::NarrativeInjected(beat) => {
                if beat.trigger == BeatTrigger::Stall {
                    self.state.last_stall_beat_turn = turn;
                }
                self.beats.push(beat.clone());
            }
            EventPayload::AssetUpdated(update) => self.apply_asset_update(update)?,
            EventPayload::SessionEnded { ending_summary, .. } => {
                self.state.ended = true;
                self.state.ending_summary = ending_summary.clone();
            }
        }
        self.last_seq = event.seq;
        Ok(())
    }

    fn apply_npc_action(&mut self, seq: u64, action: &NpcAction) -> Result<(), StoreError> {
        match action {
            NpcAction::Dialogue { actor, prompt, .. } | NpcAction::Physical { actor, prompt, .. } => {
                self.npc_marks.insert(actor.clone(), NpcMark { last_action_seq: seq, prompt: Some(prompt.clone()) });
            }
            NpcAction::Memory { fragment } => {
                if self.fragments.iter().any(|f| f.fragment_id == fragment.fragment_id) {
                    return Err(StoreError::Inconsistent(format!("duplicate fragment {}", fragment.fragment_id)));
                }
                self.fragments.push(fragment.clone());
            }
        }
        Ok(())
    }

    fn apply_state_update(&mut self, update: &StateUpdate) -> Result<(), StoreError> {
        match update {
            StateUpdate::Anchor(AnchorChange { anchor_id, old, new, .. }) => {
                let slot = self
                    .state
                    .anchor_values
                    .get_mut(anchor_id)
                    .ok_or_else(|| StoreError::UnknownAnchor(anchor_id.clone()))?;
                if slot != old {
                    return Err(StoreError::Inconsistent(format!("stale old value for '{anchor_id}'")));
                }
                *slot = new.clone();
                self.state.last_progress_turn = self.state.turn;
            }
            StateUpdate::SubgoalSatisfied { goal_id, subgoal_id, .. } => {
                let slot = self
                    .state
                    .subgoal_status
                    .get_mut(goal_id)
                    .and_then(|s| s.get_mut(subgoal_id))
                    .ok_or_else(|| StoreError::Inconsistent(format!("unknown subgoal {goal_id}/{subgoal_id}")))?;
                *slot = Status::Achieved;
                self.state.last_progress_turn = self.state.turn;
            }
            StateUpdate::AssessmentReport(report) => self.reports.push(report.clone()),
        }
        Ok(())
    }

    fn apply_asset_update(&mut self, update: &AssetUpdate) -> Result<(), StoreError> {
        match update {
            AssetUpdate::EntityUpserted { entity } => match self.entities.get_mut(&entity.entity_id) {
                Some(existing) => {
                    existing.kind = entity.kind;
                    existing.name = entity.name.clone();
                    existing.description = entity.description.clone();
                    existing.attributes = entity.attributes.clone();
                    existing.alive = entity.alive;
                    existing.metadata_version += 1;
                }
                None => {
                    self.entities.insert(
                        entity.entity_id.clone(),
                        Entity {
                            entity_id: entity.entity_id.clone(),
                            session_id: self.state.session_id.clone(),
                            kind: entity.kind,
                            name: entity.name.clone(),
                            description: entity.description.clone(),
                            attributes: entity.attributes.clone(),
                            assets: Vec::new(),
                            alive: entity.alive,
                            metadata_version: 1,
                        },
                    );
                }
            },
            AssetUpdate::AssetCreated { entity_id, asset } => {
                let entity = self.entities.get_mut(entity_id).ok_or_else(|| StoreError::UnknownEntity(entity_id.clone()))?;
                let expected = entity.latest_asset(asset.modality).map_or(1, |a| a.version + 1);
                if asset.version != expected || asset.descriptor.trim().is_empty() {
                    return Err(StoreError::Inconsistent(format!("asset {} out of order", asset.asset_id)));
                }
                entity.assets.push(asset.clone());
            }
        }
        Ok(())
    }

    pub fn entity(&self, entity_id: &str) -> Result<&Entity, StoreError> {
        self.entities.get(entity_id).ok_or_else(|| StoreError::UnknownEntity(entity_id.to_string()))
    }

    pub fn get_entities(&self, ids: &[&str]) -> Result<Vec<&Entity>, StoreError> {
        ids.iter().map(|id| self.entity(id)).collect()
    }

    /// Resolves an entity by id or by name (case-insensitive).
    pub fn find_entity(&self, raw: &str) -> Option<&Entity> {
        let raw = raw.trim();
        self.entities.get(raw).or_else(|| {
            self.entities.values().find(|e| e.name.eq_ignore_ascii_case(raw) || e.entity_id.eq_ignore_ascii_case(raw))
        })
    }

    /// Builds a fragment for the current turn without storing it.
    pub fn new_fragment(&self, character_id: &str, content: &str, salience: f64) -> Result<MemoryFragment, StoreError> {
        if self.state.ended {
            return Err(StoreError::SessionClosed);
        }
        if content.trim().is_empty() {
            return Err(StoreError::InvalidFragment("content must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&salience) {
            return Err(StoreError::InvalidFragment(format!("salience {salience} outside [0, 1]")));
        }
        Ok(MemoryFragment {
            fragment_id: format!("f{:06}", self.fragments.len() + 1),
            session_id: self.state.session_id.clone(),
            character_id: character_id.to_string(),
            content: content.trim().to_string(),
            turn_created: self.state.turn,
            salience,
            keywords: text::keywords(content),
        })
    }

    pub fn narrative_fallback_count(&self) -> usize {
        self.beats.iter().filter(|b| b.origin == BeatOrigin::Fallback).count()
    }
}

// ---------------------------------------------------------------------------
// Writing

/// Sequences, applies and buffers events against a working snapshot.
#[derive(Debug, Clone)]
pub struct SessionWriter {
    snapshot: SessionSnapshot,
    events: Vec<BusEvent>,
}

impl SessionWriter {
    pub fn new(snapshot: SessionSnapshot) -> Self {
        Self { snapshot, events: Vec::new() }
    }

    pub fn snapshot(&self) -> &SessionSnapshot {
        &self.snapshot
    }

    pub fn state(&self) -> &SessionState {
        &self.snapshot.state
    }

    pub fn events(&self) -> &[BusEvent] {
        &self.events
    }

    pub fn into_parts(self) -> (SessionSnapshot, Vec<BusEvent>) {
        (self.snapshot, self.events)
    }

    pub fn emit(&mut self, payload: EventPayload) -> Result<&BusEvent, StoreError> {
        let mut event = BusEvent {
            seq: self.snapshot.last_seq + 1,
            session_id: self.snapshot.state.session_id.clone(),
            ts: 0,
            payload,
        };
        self.snapshot.apply(&event)?;
        event.ts = self.snapshot.state.turn;
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    /// Stores a memory fragment at the current turn.
    pub fn add_fragment(&mut self, character_id: &str, content: &str, salience: f64) -> Result<String, StoreError> {
        let fragment = self.snapshot.new_fragment(character_id, content, salience)?;
        let id = fragment.fragment_id.clone();
        self.emit(EventPayload::NpcAction(NpcAction::Memory { fragment }))?;
        Ok(id)
    }

    /// Creates or updates an entity's metadata. Updates that change nothing
    /// emit no event and keep the metadata version.
    pub fn upsert_entity(&mut self, meta: EntityMeta) -> Result<String, StoreError> {
        if self.snapshot.state.ended {
            return Err(StoreError::SessionClosed);
        }
        let id = meta.entity_id.clone();
        if self.snapshot.entities.get(&id).is_some_and(|e| e.meta() == meta) {
            return Ok(id);
        }
        self.emit(EventPayload::AssetUpdated(AssetUpdate::EntityUpserted { entity: meta }))?;
        Ok(id)
    }

    pub fn add_asset(&mut self, entity_id: &str, modality: Modality, descriptor: String) -> Result<AssetRecord, StoreError> {
        let entity = self.snapshot.entity(entity_id)?;
        let version = entity.latest_asset(modality).map_or(1, |a| a.version + 1);
        let asset = AssetRecord {
            asset_id: format!("{entity_id}:{}:v{version}", modality.as_str()),
            modality,
            descriptor,
            version,
            derived_from_metadata_version: entity.metadata_version,
        };
        self.emit(EventPayload::AssetUpdated(AssetUpdate::AssetCreated { entity_id: entity_id.to_string(), asset: asset.clone() }))?;
        Ok(asset)
    }
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub relevance: f64,
    pub recency: f64,
    pub salience: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        Self { relevance: 0.5, recency: 0.3, salience: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredFragment<'a> {
    pub fragment: &'a MemoryFragment,
    pub score: f64,
}

pub fn fragment_score(
    fragment: &MemoryFragment,
    query_keywords: &BTreeSet<String>,
    current_turn: u64,
    weights: RetrievalWeights,
) -> f64 {
    let overlap = query_keywords.intersection(&fragment.keywords).count();
    let relevance = overlap as f64 / query_keywords.len().max(1) as f64;
    let age = current_turn.saturating_sub(fragment.turn_created);
    let recency = 1.0 / (1.0 + age as f64);
    weights.relevance * relevance + weights.recency * recency + weights.salience * fragment.salience
}

/// Top-k memory fragments of one character for a query. Ties break by newer
/// `turn_created`, then by lexically smaller `fragment_id`.
pub fn retrieve_fragments<'a>(
    snapshot: &'a SessionSnapshot,
    character_id: &str,
    query: &str,
    k: usize,
    weights: RetrievalWeights,
) -> Result<Vec<ScoredFragment<'a>>, StoreError> {
    if k == 0 {
        return Err(StoreError::InvalidK);
    }
    let q = text::keywords(query);
    let turn = snapshot.state.turn;
    let mut scored: Vec<ScoredFragment<'a>> = snapshot
        .fragments
        .iter()
        .filter(|f| f.character_id == character_id)
        .map(|f| ScoredFragment { fragment: f, score: fragment_score(f, &q, turn, weights) })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.fragment.turn_created.cmp(&a.fragment.turn_created))
            .then_with(|| a.fragment.fragment_id.cmp(&b.fragment.fragment_id))
    });
    scored.truncate(k);
    Ok(scored)
}

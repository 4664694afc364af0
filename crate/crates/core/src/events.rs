//! Typed bus events. The topic is derived from the payload variant, so a
//! topic can never carry the wrong payload shape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::game_schema::AnchorValue;
use crate::narrative::NarrativeBeat;
use crate::roleplay::EffectHint;
use crate::session_store::{AssetRecord, EntityMeta, MemoryFragment};
use crate::status_manager::{ChangeSource, DiscrepancyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    PlayerAction,
    NpcAction,
    StateUpdated,
    GoalAchieved,
    ChapterAdvanced,
    NarrativeInjected,
    AssetUpdated,
    SessionEnded,
}

impl Topic {
    pub const ALL: [Topic; 8] = [
        Topic::PlayerAction,
        Topic::NpcAction,
        Topic::StateUpdated,
        Topic::GoalAchieved,
        Topic::ChapterAdvanced,
        Topic::NarrativeInjected,
        Topic::AssetUpdated,
        Topic::SessionEnded,
    ];
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topic::PlayerAction => "player_action",
            Topic::NpcAction => "npc_action",
            Topic::StateUpdated => "state_updated",
            Topic::GoalAchieved => "goal_achieved",
            Topic::ChapterAdvanced => "chapter_advanced",
            Topic::NarrativeInjected => "narrative_injected",
            Topic::AssetUpdated => "asset_updated",
            Topic::SessionEnded => "session_ended",
        })
    }
}

/// Hash of an NPC prompt's task and context sections, with the version the
/// prompt had when the NPC acted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMark {
    pub version: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NpcAction {
    Dialogue {
        actor: String,
        speaker: String,
        text: String,
        prompt: PromptMark,
    },
    Physical {
        actor: String,
        verb: String,
        target: Option<String>,
        effect_hint: Option<EffectHint>,
        prompt: PromptMark,
    },
    Memory {
        fragment: MemoryFragment,
    },
}

impl NpcAction {
    pub fn actor(&self) -> &str {
        match self {
            NpcAction::Dialogue { actor, .. } | NpcAction::Physical { actor, .. } => actor,
            NpcAction::Memory { fragment } => &fragment.character_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorChange {
    pub anchor_id: String,
    pub old: AnchorValue,
    pub new: AnchorValue,
    pub rationale: String,
    pub source: ChangeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateUpdate {
    Anchor(AnchorChange),
    SubgoalSatisfied { goal_id: String, subgoal_id: String, value_seen: AnchorValue },
    AssessmentReport(DiscrepancyReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssetUpdate {
    EntityUpserted { entity: EntityMeta },
    AssetCreated { entity_id: String, asset: AssetRecord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    Exited,
    IdleTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "topic", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    PlayerAction { utterance: String },
    NpcAction(NpcAction),
    StateUpdated(StateUpdate),
    GoalAchieved { goal_id: String, chapter_index: usize },
    ChapterAdvanced { from: usize, to: usize },
    NarrativeInjected(NarrativeBeat),
    AssetUpdated(AssetUpdate),
    SessionEnded { reason: EndReason, ending_summary: Option<String> },
}

impl EventPayload {
    pub fn topic(&self) -> Topic {
        match self {
            EventPayload::PlayerAction { .. } => Topic::PlayerAction,
            EventPayload::NpcAction(_) => Topic::NpcAction,
            EventPayload::StateUpdated(_) => Topic::StateUpdated,
            EventPayload::GoalAchieved { .. } => Topic::GoalAchieved,
            EventPayload::ChapterAdvanced { .. } => Topic::ChapterAdvanced,
            EventPayload::NarrativeInjected(_) => Topic::NarrativeInjected,
            EventPayload::AssetUpdated(_) => Topic::AssetUpdated,
            EventPayload::SessionEnded { .. } => Topic::SessionEnded,
        }
    }

    /// One-line rendering used in NPC percepts.
    pub fn summary(&self) -> String {
        match self {
            EventPayload::PlayerAction { utterance } => format!("player says: {utterance}"),
            EventPayload::NpcAction(NpcAction::Dialogue { speaker, text, .. }) => format!("{speaker} says: {text}"),
            EventPayload::NpcAction(NpcAction::Physical { actor, verb, target, .. }) => match target {
                Some(t) => format!("{actor} does: {verb} -> {t}"),
                None => format!("{actor} does: {verb}"),
            },
            EventPayload::NpcAction(NpcAction::Memory { fragment }) => format!("{} remembers something", fragment.character_id),
            EventPayload::StateUpdated(StateUpdate::Anchor(c)) => format!("{} changed from {} to {}", c.anchor_id, c.old, c.new),
            EventPayload::StateUpdated(StateUpdate::SubgoalSatisfied { goal_id, subgoal_id, .. }) => {
                format!("objective {goal_id}/{subgoal_id} satisfied")
            }
            EventPayload::StateUpdated(StateUpdate::AssessmentReport(r)) => format!("assessment sample for {}", r.goal_id),
            EventPayload::GoalAchieved { goal_id, .. } => format!("goal {goal_id} achieved"),
            EventPayload::ChapterAdvanced { from, to } => format!("chapter {from} -> {to}"),
            EventPayload::NarrativeInjected(beat) => format!("story: {}", beat.text),
            EventPayload::AssetUpdated(AssetUpdate::EntityUpserted { entity }) => format!("{} updated", entity.name),
            EventPayload::AssetUpdated(AssetUpdate::AssetCreated { entity_id, asset }) => {
                format!("{} {} asset v{}", entity_id, asset.modality.as_str(), asset.version)
            }
            EventPayload::SessionEnded { .. } => "session ended".to_string(),
        }
    }
}

/// An immutable, sequenced event on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusEvent {
    pub seq: u64,
    pub session_id: String,
    /// Logical turn index at publication.
    pub ts: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl BusEvent {
    pub fn topic(&self) -> Topic {
        self.payload.topic()
    }

    /// Canonical single-line serialization used for event logs.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("bus events always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

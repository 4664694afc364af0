//! Round summaries, entity resolution and multi-region scene descriptors.
//!
//! Assets are descriptors (prompts for an external generator), versioned per
//! entity and modality. An asset is regenerated only when the entity's
//! metadata moved past the version the asset was derived from.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_schema::{GameDefinition, Modality};
use crate::llm::{CompletionRequest, Gateway, LlmError, RoleTag};
use crate::session_store::{AssetRecord, Entity, SessionSnapshot, SessionWriter, StoreError};
use crate::text;

pub const MAX_THEME_CHARS: usize = 140;
pub const MAX_NARRATIVE_CHARS: usize = 400;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("precondition violated: empty transcript")]
    EmptyTranscript,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub turn: u64,
    pub theme: String,
    pub narrative: String,
    /// Entity or character names as they appear in the transcript.
    pub mentioned_names: Vec<String>,
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Interacted,
    Mentioned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedEntity {
    pub entity_id: String,
    pub depth: Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRegion {
    pub entity_id: String,
    pub region: Rect,
    pub local_prompt: String,
    pub reference_asset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub turn: u64,
    pub global_prompt: String,
    pub regions: Vec<SceneRegion>,
    pub modality: Modality,
}

fn candidate_names(game: &GameDefinition, snapshot: &SessionSnapshot) -> Vec<String> {
    let mut names: Vec<String> = snapshot.entities.values().map(|e| e.name.clone()).collect();
    names.extend(game.characters.iter().filter(|c| c.is_npc()).map(|c| c.name.clone()));
    names.sort();
    names.dedup();
    names
}

/// Names from the definition or entity table that occur as whole words in the
/// transcript, in order of first occurrence.
pub fn mentioned_names(game: &GameDefinition, snapshot: &SessionSnapshot, transcript: &str) -> Vec<String> {
    let mut hits: Vec<(usize, String)> = candidate_names(game, snapshot)
        .iter()
        .filter_map(|n| text::find_whole_word(transcript, n).map(|r| (r.start, transcript[r].to_string())))
        .collect();
    hits.sort();
    hits.dedup_by(|a, b| a.1.eq_ignore_ascii_case(&b.1));
    hits.into_iter().map(|(_, n)| n).collect()
}

pub fn summary_prompt(transcript: &[String]) -> String {
    let mut p = String::from("Summarize this round of a role-playing game for a scene illustrator.\n\nTranscript:\n");
    for line in transcript {
        let _ = writeln!(p, "{line}");
    }
    let _ = write!(
        p,
        "\nReply with exactly two lines:\nTHEME|a short title, at most {MAX_THEME_CHARS} characters\nNARRATIVE|what happened, at most {MAX_NARRATIVE_CHARS} characters\n"
    );
    p
}

/// Summarizes one round. Falls back to an untitled summary of the player's
/// utterance when the model is unavailable or its reply unusable.
pub fn summarize_round(
    gateway: &Gateway,
    game: &GameDefinition,
    snapshot: &SessionSnapshot,
    transcript: &[String],
    player_utterance: &str,
) -> Result<PlotSummary, RenderError> {
    if transcript.is_empty() {
        return Err(RenderError::EmptyTranscript);
    }
    let reply = match gateway.complete(&CompletionRequest::new(RoleTag::Summarize, summary_prompt(transcript))) {
        Ok(r) => Some(r.text),
        Err(e) if e.is_degradable() => {
            tracing::warn!(error = %e, "summary fell back to template");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let (mut theme, mut narrative) = (None, None);
    for line in reply.as_deref().unwrap_or_default().lines() {
        match text::split_record(line, 1) {
            Some(("THEME", f)) if theme.is_none() => theme = Some(text::truncate_chars(&text::one_line(f[0]), MAX_THEME_CHARS)),
            Some(("NARRATIVE", f)) if narrative.is_none() => {
                narrative = Some(text::truncate_chars(&text::one_line(f[0]), MAX_NARRATIVE_CHARS))
            }
            _ => {}
        }
    }
    let theme = theme.filter(|t| !t.is_empty());
    let narrative = narrative.filter(|n| !n.is_empty());
    let fallback = theme.is_none() || narrative.is_none();
    Ok(PlotSummary {
        turn: snapshot.state.turn,
        theme: theme.unwrap_or_else(|| "untitled".to_string()),
        narrative: narrative.unwrap_or_else(|| text::truncate_chars(&text::one_line(player_utterance), MAX_NARRATIVE_CHARS)),
        mentioned_names: mentioned_names(game, snapshot, &transcript.join("\n")),
        fallback,
    })
}

/// Entities touched by physical actions come first, then mentioned ones;
/// each group is ordered by entity id.
pub fn resolve_entities(summary: &PlotSummary, snapshot: &SessionSnapshot, interacted: &[String]) -> Vec<ResolvedEntity> {
    let mut out: Vec<ResolvedEntity> = Vec::new();
    for id in interacted {
        if snapshot.entities.contains_key(id) && !out.iter().any(|r| &r.entity_id == id) {
            out.push(ResolvedEntity { entity_id: id.clone(), depth: Depth::Interacted });
        }
    }
    for name in &summary.mentioned_names {
        if let Some(e) = snapshot.find_entity(name) {
            if !out.iter().any(|r| r.entity_id == e.entity_id) {
                out.push(ResolvedEntity { entity_id: e.entity_id.clone(), depth: Depth::Mentioned });
            }
        }
    }
    out.sort_by(|a, b| a.depth.cmp(&b.depth).then_with(|| a.entity_id.cmp(&b.entity_id)));
    out
}

fn local_prompt(entity: &Entity, depth: Depth) -> String {
    let mut p = entity.name.clone();
    if !entity.description.is_empty() {
        let _ = write!(p, ": {}", entity.description);
    }
    for (k, v) in &entity.attributes {
        let _ = write!(p, "; {k}={v}");
    }
    if depth == Depth::Interacted {
        p.push_str(" (in action)");
    }
    p
}

/// Lays resolved entities out as equal-width columns over the whole frame.
pub fn compose_scene(summary: &PlotSummary, resolved: &[ResolvedEntity], snapshot: &SessionSnapshot) -> SceneDescriptor {
    let present: Vec<(&ResolvedEntity, &Entity)> =
        resolved.iter().filter_map(|r| snapshot.entities.get(&r.entity_id).map(|e| (r, e))).collect();
    let n = present.len();
    let regions = present
        .into_iter()
        .enumerate()
        .map(|(i, (r, e))| {
            let x = i as f64 / n as f64;
            let w = if i + 1 == n { 1.0 - x } else { 1.0 / n as f64 };
            SceneRegion {
                entity_id: e.entity_id.clone(),
                region: Rect { x, y: 0.0, w, h: 1.0 },
                local_prompt: local_prompt(e, r.depth),
                reference_asset: e.latest_asset(Modality::Image).filter(|a| !e.is_stale(a)).map(|a| a.asset_id.clone()),
            }
        })
        .collect();
    SceneDescriptor {
        turn: summary.turn,
        global_prompt: format!("{}. {}", summary.theme, summary.narrative),
        regions,
        modality: Modality::Image,
    }
}

/// Records physical interactions on entity metadata so their assets go stale.
pub fn record_interactions(writer: &mut SessionWriter, interactions: &[(String, String)]) -> Result<(), StoreError> {
    let turn = writer.state().turn;
    for (entity_id, what) in interactions {
        let Ok(entity) = writer.snapshot().entity(entity_id) else {
            continue;
        };
        let mut meta = entity.meta();
        meta.attributes.insert("last_action".into(), format!("turn {turn}: {what}"));
        writer.upsert_entity(meta)?;
    }
    Ok(())
}

/// Creates a new asset version for every resolved entity whose latest asset
/// of a requested modality is missing or stale.
pub fn update_assets(
    writer: &mut SessionWriter,
    resolved: &[ResolvedEntity],
    scene: &SceneDescriptor,
    modalities: &[Modality],
) -> Result<Vec<AssetRecord>, StoreError> {
    let mut created = Vec::new();
    for r in resolved {
        for &modality in modalities {
            let entity = writer.snapshot().entity(&r.entity_id)?;
            if entity.latest_asset(modality).is_some_and(|a| !entity.is_stale(a)) {
                continue;
            }
            let descriptor = match (modality, scene.regions.iter().find(|g| g.entity_id == r.entity_id)) {
                (Modality::Image, Some(region)) => region.local_prompt.clone(),
                _ => format!("{} cue for {}: {}", modality.as_str(), entity.name, scene.global_prompt),
            };
            created.push(writer.add_asset(&r.entity_id, modality, descriptor)?);
        }
    }
    Ok(created)
}

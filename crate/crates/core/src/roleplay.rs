//! NPC agents: perceive the round, think with the light tier, act on the bus.
//!
//! Model output uses one record per line:
//!
//! ```text
//! DIALOGUE|speaker|text
//! ACTION|verb|target|anchor_id:delta      (or anchor_id:=value; target and hint optional)
//! MEMORY|salience|content
//! ```
//!
//! Effect hints are proposals only. Anchors change solely through the status
//! manager's assessment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{BusEvent, EventPayload, NpcAction, PromptMark, StateUpdate};
use crate::game_schema::{AnchorValue, Character, GameDefinition};
use crate::llm::{CompletionRequest, Gateway, LlmError, RoleTag};
use crate::narrative::NpcPrompt;
use crate::session_store::{MemoryFragment, SessionSnapshot, SessionWriter, StoreError};
use crate::status_manager::ForwardedHint;
use crate::text;

pub const MAX_PLAN_ELEMENTS: usize = 6;
pub const MAX_MEMORY_WRITES: usize = 2;
pub const MAX_OBSERVED_EVENTS: usize = 16;
pub const DEFAULT_NPCS_PER_ROUND: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoleplayError {
    #[error("unknown character '{0}'")]
    UnknownCharacter(String),
    #[error("'{0}' is not an NPC")]
    NotAnNpc(String),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintChange {
    Delta(f64),
    Set(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectHint {
    pub anchor_id: String,
    pub change: HintChange,
}

impl EffectHint {
    /// Parses `anchor_id:delta` or `anchor_id:=value`.
    pub fn parse(raw: &str) -> Option<EffectHint> {
        let (anchor, change) = raw.split_once(':')?;
        let anchor = anchor.trim();
        if anchor.is_empty() {
            return None;
        }
        let change = match change.trim().strip_prefix('=') {
            Some(v) if !v.trim().is_empty() => HintChange::Set(v.trim().to_string()),
            Some(_) => return None,
            None => HintChange::Delta(change.trim().parse().ok().filter(|d: &f64| d.is_finite())?),
        };
        Some(EffectHint { anchor_id: anchor.to_string(), change })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub seq: u64,
    pub topic: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDelta {
    pub anchor_id: String,
    pub old: AnchorValue,
    pub new: AnchorValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percept {
    pub session_id: String,
    pub observer: String,
    pub turn: u64,
    pub player_utterance: Option<String>,
    pub observed_events: Vec<ObservedEvent>,
    pub world_delta: Vec<WorldDelta>,
    pub narrative_context_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionElement {
    Dialogue { speaker: String, text: String },
    Physical { verb: String, target: Option<String>, effect_hint: Option<EffectHint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryWrite {
    pub content: String,
    pub salience: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub actor: String,
    pub elements: Vec<ActionElement>,
    pub memory_writes: Vec<MemoryWrite>,
}

// ---------------------------------------------------------------------------
// Perceive

/// Builds the percept for `npc_id` from the events since its last action.
pub fn perceive(game: &GameDefinition, snapshot: &SessionSnapshot, npc_id: &str, window: &[BusEvent]) -> Result<Percept, RoleplayError> {
    let npc = npc(game, npc_id)?;
    let mut utterance = None;
    let mut observed = Vec::new();
    let mut deltas: Vec<WorldDelta> = Vec::new();
    for event in window {
        match &event.payload {
            EventPayload::PlayerAction { utterance: u } => utterance = Some(u.clone()),
            EventPayload::NpcAction(NpcAction::Memory { .. }) | EventPayload::AssetUpdated(_) => continue,
            EventPayload::NpcAction(action) if action.actor() == npc.character_id => continue,
            EventPayload::StateUpdated(StateUpdate::AssessmentReport(_)) => continue,
            EventPayload::StateUpdated(StateUpdate::Anchor(c)) => match deltas.iter_mut().find(|d| d.anchor_id == c.anchor_id) {
                Some(d) => d.new = c.new.clone(),
                None => deltas.push(WorldDelta { anchor_id: c.anchor_id.clone(), old: c.old.clone(), new: c.new.clone() }),
            },
            _ => {}
        }
        observed.push(ObservedEvent { seq: event.seq, topic: event.topic().to_string(), text: event.payload.summary() });
    }
    deltas.retain(|d| d.old != d.new);
    if utterance.is_none() && observed.is_empty() {
        return Err(RoleplayError::PreconditionViolation(format!("nothing for {npc_id} to perceive")));
    }
    let skip = observed.len().saturating_sub(MAX_OBSERVED_EVENTS);
    observed.drain(..skip);
    let version = snapshot
        .npc_marks
        .get(&npc.character_id)
        .and_then(|m| m.prompt.as_ref())
        .map_or(0, |p| p.version);
    Ok(Percept {
        session_id: snapshot.state.session_id.clone(),
        observer: npc.character_id.clone(),
        turn: snapshot.state.turn,
        player_utterance: utterance,
        observed_events: observed,
        world_delta: deltas,
        narrative_context_version: version,
    })
}

fn npc<'a>(game: &'a GameDefinition, npc_id: &str) -> Result<&'a Character, RoleplayError> {
    let c = game.character(npc_id).ok_or_else(|| RoleplayError::UnknownCharacter(npc_id.to_string()))?;
    if !c.is_npc() {
        return Err(RoleplayError::NotAnNpc(npc_id.to_string()));
    }
    Ok(c)
}

/// NPCs that respond this round: those named in the utterance first, in order
/// of mention, then the rest in definition order, up to `cap`. NPCs whose
/// entity is marked not alive are skipped.
pub fn npc_turn_order(game: &GameDefinition, snapshot: &SessionSnapshot, utterance: &str, cap: usize) -> Vec<String> {
    let present: Vec<&Character> = game
        .npcs()
        .filter(|c| snapshot.entities.get(&c.character_id).is_none_or(|e| e.alive))
        .collect();
    let mut mentioned: Vec<(usize, &str)> = present
        .iter()
        .filter_map(|c| {
            let pos = [c.name.as_str(), c.character_id.as_str()]
                .iter()
                .filter_map(|n| text::find_whole_word(utterance, n).map(|r| r.start))
                .min()?;
            Some((pos, c.character_id.as_str()))
        })
        .collect();
    mentioned.sort();
    let mut order: Vec<String> = mentioned.into_iter().map(|(_, id)| id.to_string()).collect();
    for c in present {
        if !order.contains(&c.character_id) {
            order.push(c.character_id.clone());
        }
    }
    order.truncate(cap);
    order
}

// ---------------------------------------------------------------------------
// Think

const FORMAT_INSTRUCTIONS: &str = "Respond in character. Use one line per element, at most 6 elements:\n\
DIALOGUE|speaker|what you say\n\
ACTION|verb|target|anchor_id:delta   (target and effect optional; use anchor_id:=value to propose a new value)\n\
MEMORY|salience 0..1|something worth remembering   (at most 2)\n";

pub fn think_prompt(prompt: &NpcPrompt, percept: &Percept) -> String {
    let mut p = prompt.render();
    p.push_str("\n\n# What just happened\n");
    if let Some(u) = &percept.player_utterance {
        let _ = writeln!(p, "The player says: {u}");
    }
    for e in &percept.observed_events {
        if e.topic != "player_action" {
            let _ = writeln!(p, "- {}", e.text);
        }
    }
    for d in &percept.world_delta {
        let _ = writeln!(p, "- {} is now {} (was {})", d.anchor_id, d.new, d.old);
    }
    p.push('\n');
    p.push_str(FORMAT_INSTRUCTIONS);
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPlan {
    pub plan: ActionPlan,
    pub warnings: Vec<String>,
}

/// Parses model output into a plan. Fails when no dialogue or action line is
/// usable; extra elements and memory writes are truncated with a warning.
pub fn parse_action_plan(output: &str, actor: &Character, game: &GameDefinition) -> Option<ParsedPlan> {
    let mut elements = Vec::new();
    let mut memory_writes = Vec::new();
    let mut warnings = Vec::new();
    for line in output.lines() {
        match text::split_record(line, 0) {
            Some(("DIALOGUE", f)) if f.len() >= 2 => {
                let body = text::one_line(&line.trim().splitn(3, '|').nth(2).unwrap_or_default().replace('|', " "));
                if body.is_empty() {
                    warnings.push("empty dialogue dropped".into());
                    continue;
                }
                let speaker = game
                    .resolve_character(f[0])
                    .map_or_else(|| actor.name.clone(), |c| c.name.clone());
                elements.push(ActionElement::Dialogue { speaker, text: body });
            }
            Some(("ACTION", f)) if !f.is_empty() && !f[0].is_empty() => {
                let target = f.get(1).filter(|t| !t.is_empty()).map(|t| t.to_string());
                let effect_hint = match f.get(2).filter(|h| !h.is_empty()) {
                    Some(raw) => match EffectHint::parse(raw) {
                        Some(h) if game.anchor(&h.anchor_id).is_some() => Some(h),
                        _ => {
                            warnings.push(format!("dropped effect hint '{raw}'"));
                            None
                        }
                    },
                    None => None,
                };
                elements.push(ActionElement::Physical { verb: f[0].to_string(), target, effect_hint });
            }
            Some(("MEMORY", f)) if f.len() >= 2 => {
                let content = text::one_line(&f[1..].join(" "));
                match f[0].parse::<f64>() {
                    Ok(s) if !content.is_empty() => memory_writes.push(MemoryWrite { content, salience: s.clamp(0.0, 1.0) }),
                    _ => warnings.push(format!("malformed memory line: {}", line.trim())),
                }
            }
            Some((tag @ ("DIALOGUE" | "ACTION" | "MEMORY"), _)) => warnings.push(format!("malformed {tag} line")),
            _ => {}
        }
    }
    if elements.is_empty() {
        return None;
    }
    if elements.len() > MAX_PLAN_ELEMENTS {
        warnings.push(format!("plan truncated from {} to {MAX_PLAN_ELEMENTS} elements", elements.len()));
        elements.truncate(MAX_PLAN_ELEMENTS);
    }
    if memory_writes.len() > MAX_MEMORY_WRITES {
        warnings.push(format!("memory writes truncated from {} to {MAX_MEMORY_WRITES}", memory_writes.len()));
        memory_writes.truncate(MAX_MEMORY_WRITES);
    }
    for w in &warnings {
        tracing::warn!(actor = %actor.character_id, "{w}");
    }
    Some(ParsedPlan { plan: ActionPlan { actor: actor.character_id.clone(), elements, memory_writes }, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThinkOutcome {
    pub plan: ActionPlan,
    /// True when the plan is the raw-text fallback after two unusable replies.
    pub fallback: bool,
    pub warnings: Vec<String>,
}

fn fallback_plan(actor: &Character, raw: &str) -> ActionPlan {
    let text = text::truncate_chars(&text::one_line(raw), 400);
    ActionPlan {
        actor: actor.character_id.clone(),
        elements: vec![ActionElement::Dialogue {
            speaker: actor.name.clone(),
            text: if text.is_empty() { "...".into() } else { text },
        }],
        memory_writes: Vec::new(),
    }
}

/// Calls the thinking tier. One reprompt on unparseable output, then a
/// single-dialogue plan carrying the last raw reply. Backend errors
/// propagate.
pub fn think(
    gateway: &Gateway,
    game: &GameDefinition,
    percept: &Percept,
    prompt: &NpcPrompt,
    fragments: &[&MemoryFragment],
) -> Result<ThinkOutcome, RoleplayError> {
    let actor = npc(game, &percept.observer)?;
    if prompt.character_id != actor.character_id {
        return Err(RoleplayError::PreconditionViolation("prompt belongs to another character".into()));
    }
    let mut full = think_prompt(prompt, percept);
    if fragments.iter().any(|f| f.character_id != actor.character_id) {
        return Err(RoleplayError::PreconditionViolation("foreign memory fragment".into()));
    }
    let mut warnings = Vec::new();
    let mut raw = String::new();
    for attempt in 0..2 {
        let reply = gateway.complete(&CompletionRequest::new(RoleTag::Thinking, full.clone()))?;
        if let Some(parsed) = parse_action_plan(&reply.text, actor, game) {
            warnings.extend(parsed.warnings);
            return Ok(ThinkOutcome { plan: parsed.plan, fallback: false, warnings });
        }
        warnings.push(format!("unparseable reply on attempt {}", attempt + 1));
        full.push_str("\n\nYour previous reply could not be used. Reply only with DIALOGUE|, ACTION| or MEMORY| lines.\n");
        raw = reply.text;
    }
    tracing::warn!(actor = %actor.character_id, "two unusable replies; fallback plan");
    Ok(ThinkOutcome { plan: fallback_plan(actor, &raw), fallback: true, warnings })
}

// ---------------------------------------------------------------------------
// Act

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActOutcome {
    pub hints: Vec<ForwardedHint>,
    /// Entity ids targeted by physical actions.
    pub targets: Vec<String>,
    pub fragments: Vec<String>,
}

/// Publishes the plan: one `npc_action` per element in plan order, then the
/// memory writes.
pub fn act(writer: &mut SessionWriter, plan: &ActionPlan, mark: &PromptMark) -> Result<ActOutcome, RoleplayError> {
    let mut out = ActOutcome::default();
    for element in &plan.elements {
        let payload = match element {
            ActionElement::Dialogue { speaker, text } => NpcAction::Dialogue {
                actor: plan.actor.clone(),
                speaker: speaker.clone(),
                text: text.clone(),
                prompt: mark.clone(),
            },
            ActionElement::Physical { verb, target, effect_hint } => {
                let target = target.as_ref().map(|t| match writer.snapshot().find_entity(t) {
                    Some(e) => {
                        out.targets.push(e.entity_id.clone());
                        e.entity_id.clone()
                    }
                    None => t.clone(),
                });
                if let Some(h) = effect_hint {
                    out.hints.push(ForwardedHint { actor: plan.actor.clone(), hint: h.clone() });
                }
                NpcAction::Physical {
                    actor: plan.actor.clone(),
                    verb: verb.clone(),
                    target,
                    effect_hint: effect_hint.clone(),
                    prompt: mark.clone(),
                }
            }
        };
        writer.emit(EventPayload::NpcAction(payload))?;
    }
    for m in &plan.memory_writes {
        out.fragments.push(writer.add_fragment(&plan.actor, &m.content, m.salience)?);
    }
    Ok(out)
}

/// Events an NPC has not yet seen: everything after its last action.
pub fn perception_window<'a>(snapshot: &SessionSnapshot, npc_id: &str, log: &'a [BusEvent]) -> &'a [BusEvent] {
    let after = snapshot.npc_marks.get(npc_id).map_or(0, |m| m.last_action_seq);
    let start = log.partition_point(|e| e.seq <= after);
    &log[start..]
}

/// Latest dialogue per NPC in a set of events, for transcripts.
pub fn transcript_lines(game: &GameDefinition, events: &[BusEvent]) -> Vec<String> {
    let mut names: BTreeMap<&str, &str> = BTreeMap::new();
    for c in &game.characters {
        names.insert(&c.character_id, &c.name);
    }
    events
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::PlayerAction { utterance } => Some(format!("Player: {utterance}")),
            EventPayload::NpcAction(NpcAction::Dialogue { speaker, text, .. }) => Some(format!("{speaker}: {text}")),
            EventPayload::NpcAction(NpcAction::Physical { actor, verb, target, .. }) => {
                let who = names.get(actor.as_str()).copied().unwrap_or(actor);
                Some(match target {
                    Some(t) => format!("{who} [{verb} {t}]"),
                    None => format!("{who} [{verb}]"),
                })
            }
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::black_forest;
    use crate::game_schema::EntityKind;
    use crate::llm::{ScriptEntry, ScriptedBackend};
    use crate::narrative::{assemble_npc_prompt, DEFAULT_BEAT_WINDOW};
    use crate::session_store::EntityMeta;
    use crate::status_manager::ChangeSource;
    use std::sync::Arc;

    fn writer() -> SessionWriter {
        SessionWriter::new(SessionSnapshot::new("s", &black_forest()))
    }

    #[test]
    fn hints_parse() {
        assert_eq!(EffectHint::parse("princess_health:-3").unwrap().change, HintChange::Delta(-3.0));
        assert_eq!(EffectHint::parse("party_location:=Dragon's Lair").unwrap().change, HintChange::Set("Dragon's Lair".into()));
        assert!(EffectHint::parse("x:abc").is_none());
        assert!(EffectHint::parse(":1").is_none());
        assert!(EffectHint::parse("x:=").is_none());
    }

    #[test]
    fn plan_parses_all_record_kinds() {
        let game = black_forest();
        let dragon = game.character("dragon").unwrap();
        let out = "I think...\nDIALOGUE|Dragon|You dare enter | my lair?\nACTION|claw|adventurer|adventurer_health:-3\nACTION|roar\nMEMORY|0.8|The adventurer brought a sword\nACTION|fly||bogus_anchor:1";
        let p = parse_action_plan(out, dragon, &game).unwrap();
        assert_eq!(p.plan.elements.len(), 4);
        assert_eq!(
            p.plan.elements[0],
            ActionElement::Dialogue { speaker: "Dragon".into(), text: "You dare enter my lair?".into() }
        );
        assert!(matches!(&p.plan.elements[1], ActionElement::Physical { effect_hint: Some(h), .. } if h.anchor_id == "adventurer_health"));
        assert_eq!(p.plan.memory_writes.len(), 1);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn unknown_speaker_resolves_to_actor() {
        let game = black_forest();
        let guard = game.character("guard").unwrap();
        let p = parse_action_plan("DIALOGUE|Someone|Halt!", guard, &game).unwrap();
        assert_eq!(p.plan.elements[0], ActionElement::Dialogue { speaker: "Guard".into(), text: "Halt!".into() });
    }

    #[test]
    fn plans_are_bounded() {
        let game = black_forest();
        let guard = game.character("guard").unwrap();
        let out = (0..9).map(|i| format!("DIALOGUE|guard|line {i}\nMEMORY|0.5|m{i}")).collect::<Vec<_>>().join("\n");
        let p = parse_action_plan(&out, guard, &game).unwrap();
        assert_eq!(p.plan.elements.len(), MAX_PLAN_ELEMENTS);
        assert_eq!(p.plan.memory_writes.len(), MAX_MEMORY_WRITES);
        assert!(parse_action_plan("MEMORY|0.5|only memory", guard, &game).is_none());
        assert!(parse_action_plan("hello", guard, &game).is_none());
    }

    fn percept_for(w: &mut SessionWriter, npc: &str, utterance: &str) -> Percept {
        w.emit(EventPayload::PlayerAction { utterance: utterance.into() }).unwrap();
        let game = black_forest();
        let snap = w.snapshot().clone();
        perceive(&game, &snap, npc, perception_window(&snap, npc, w.events())).unwrap()
    }

    #[test]
    fn perceive_collapses_world_deltas() {
        let game = black_forest();
        let mut w = writer();
        w.emit(EventPayload::PlayerAction { utterance: "the dragon attacks".into() }).unwrap();
        for (old, new) in [(10.0, 8.0), (8.0, 7.0)] {
            w.emit(EventPayload::StateUpdated(StateUpdate::Anchor(crate::events::AnchorChange {
                anchor_id: "adventurer_health".into(),
                old: AnchorValue::Number(old),
                new: AnchorValue::Number(new),
                rationale: String::new(),
                source: ChangeSource::LlmAssessment,
            })))
            .unwrap();
        }
        let snap = w.snapshot().clone();
        let p = perceive(&game, &snap, "princess", w.events()).unwrap();
        assert_eq!(p.world_delta, vec![WorldDelta { anchor_id: "adventurer_health".into(), old: AnchorValue::Number(10.0), new: AnchorValue::Number(7.0) }]);
        assert_eq!(p.player_utterance.as_deref(), Some("the dragon attacks"));
        assert!(matches!(perceive(&game, &snap, "adventurer", w.events()), Err(RoleplayError::NotAnNpc(_))));
        assert!(matches!(perceive(&game, &snap, "ghost", w.events()), Err(RoleplayError::UnknownCharacter(_))));
        assert!(matches!(perceive(&game, &snap, "princess", &[]), Err(RoleplayError::PreconditionViolation(_))));
    }

    #[test]
    fn observed_events_are_capped() {
        let game = black_forest();
        let mut w = writer();
        for i in 0..20 {
            w.emit(EventPayload::PlayerAction { utterance: format!("u{i}") }).unwrap();
        }
        let snap = w.snapshot().clone();
        let p = perceive(&game, &snap, "guard", w.events()).unwrap();
        assert_eq!(p.observed_events.len(), MAX_OBSERVED_EVENTS);
        assert_eq!(p.observed_events.last().unwrap().seq, 20);
        assert_eq!(p.player_utterance.as_deref(), Some("u19"));
    }

    #[test]
    fn turn_order_prefers_mentions() {
        let game = black_forest();
        let snap = SessionSnapshot::new("s", &game);
        assert_eq!(npc_turn_order(&game, &snap, "Guard, ask the princess", 2), vec!["guard", "princess"]);
        assert_eq!(npc_turn_order(&game, &snap, "DRAGON!", 2), vec!["dragon", "princess"]);
        assert_eq!(npc_turn_order(&game, &snap, "hello", 5), vec!["princess", "guard", "dragon"]);
        assert_eq!(npc_turn_order(&game, &snap, "guardian of dragonfire", 1), vec!["princess"]);
    }

    #[test]
    fn dead_npcs_do_not_act() {
        let game = black_forest();
        let mut w = writer();
        w.upsert_entity(EntityMeta {
            entity_id: "princess".into(),
            kind: EntityKind::Npc,
            name: "Princess".into(),
            description: String::new(),
            attributes: Default::default(),
            alive: false,
        })
        .unwrap();
        assert_eq!(npc_turn_order(&game, w.snapshot(), "princess?", 2), vec!["guard", "dragon"]);
    }

    #[test]
    fn think_reprompts_once_then_falls_back() {
        let game = black_forest();
        let mut w = writer();
        let p = percept_for(&mut w, "guard", "hello guard");
        let prompt = assemble_npc_prompt(&game, game.character("guard").unwrap(), w.snapshot(), &[], DEFAULT_BEAT_WINDOW);

        let backend = Arc::new(ScriptedBackend::new("light", vec![ScriptEntry::ordered("umm"), ScriptEntry::ordered("DIALOGUE|guard|Halt!")]).unwrap());
        let out = think(&Gateway::single(backend.clone()), &game, &p, &prompt, &[]).unwrap();
        assert!(!out.fallback);
        assert_eq!(backend.received().len(), 2);
        assert!(backend.received()[1].1.contains("could not be used"));

        let backend = Arc::new(ScriptedBackend::new("light", vec![ScriptEntry::fallback("umm")]).unwrap());
        let out = think(&Gateway::single(backend.clone()), &game, &p, &prompt, &[]).unwrap();
        assert!(out.fallback);
        assert_eq!(out.plan.elements, vec![ActionElement::Dialogue { speaker: "Guard".into(), text: "umm".into() }]);
        assert!(out.plan.memory_writes.is_empty());
        assert_eq!(backend.received().len(), 2);
    }

    #[test]
    fn think_propagates_backend_outage() {
        let game = black_forest();
        let mut w = writer();
        let p = percept_for(&mut w, "guard", "hello guard");
        let prompt = assemble_npc_prompt(&game, game.character("guard").unwrap(), w.snapshot(), &[], DEFAULT_BEAT_WINDOW);
        let err = think(&Gateway::new(), &game, &p, &prompt, &[]).unwrap_err();
        assert!(matches!(err, RoleplayError::Llm(_)));
    }

    #[test]
    fn act_publishes_in_plan_order_and_forwards_hints() {
        let mut w = writer();
        w.emit(EventPayload::PlayerAction { utterance: "go".into() }).unwrap();
        let plan = ActionPlan {
            actor: "dragon".into(),
            elements: vec![
                ActionElement::Dialogue { speaker: "Dragon".into(), text: "Burn!".into() },
                ActionElement::Physical {
                    verb: "breathe fire".into(),
                    target: Some("Black Forest".into()),
                    effect_hint: Some(EffectHint { anchor_id: "princess_health".into(), change: HintChange::Delta(-3.0) }),
                },
            ],
            memory_writes: vec![MemoryWrite { content: "The forest burned".into(), salience: 0.9 }],
        };
        w.upsert_entity(EntityMeta {
            entity_id: "black_forest".into(),
            kind: EntityKind::Scene,
            name: "Black Forest".into(),
            description: String::new(),
            attributes: Default::default(),
            alive: true,
        })
        .unwrap();
        let before = w.events().len();
        let mark = PromptMark { version: 1, digest: "d".into() };
        let out = act(&mut w, &plan, &mark).unwrap();
        let topics: Vec<String> = w.events()[before..].iter().map(|e| e.payload.summary()).collect();
        assert_eq!(topics.len(), 3);
        assert!(topics[0].contains("Burn!"));
        assert!(topics[1].contains("black_forest"));
        assert_eq!(out.hints.len(), 1);
        assert_eq!(out.targets, vec!["black_forest".to_string()]);
        // Hints never touch anchors directly.
        assert_eq!(w.state().anchor_values["princess_health"], AnchorValue::Number(5.0));
        assert_eq!(w.snapshot().npc_marks["dragon"].last_action_seq, before as u64 + 2);
    }
}

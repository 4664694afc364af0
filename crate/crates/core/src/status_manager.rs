//! Anchor tracking, goal evaluation and chapter progression.
//!
//! The model's only job here is mapping a round transcript to proposed anchor
//! changes (`SET|anchor_id|new_value|rationale`). Goal verdicts are then a
//! deterministic evaluation of subgoal predicates over anchor values, with
//! satisfied subgoals latched for the rest of the chapter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{AnchorChange, EndReason, EventPayload, StateUpdate};
use crate::game_schema::{same_free_text, AnchorKind, AnchorValue, GameDefinition, OnComplete, Operand, Predicate, PredicateOp};
use crate::llm::{CompletionRequest, Gateway, LlmError, RoleTag};
use crate::narrative::{self, BeatTrigger};
use crate::roleplay::{EffectHint, HintChange};
use crate::session_store::{SessionState, SessionWriter, StoreError};
use crate::text;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatusError {
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<narrative::NarrativeError> for StatusError {
    fn from(e: narrative::NarrativeError) -> Self {
        match e {
            narrative::NarrativeError::Llm(e) => StatusError::Llm(e),
            narrative::NarrativeError::Store(e) => StatusError::Store(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeSource {
    NpcEffectHint,
    LlmAssessment,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub changes: Vec<AnchorChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalVerdict {
    pub goal_id: String,
    pub subgoal_id: String,
    pub satisfied: bool,
    pub anchor_value_seen: AnchorValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalVerdict {
    pub goal_id: String,
    pub achieved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCheckResult {
    pub chapter_index: usize,
    pub subgoals: Vec<SubgoalVerdict>,
    pub goals: Vec<GoalVerdict>,
}

impl GoalCheckResult {
    pub fn goal(&self, goal_id: &str) -> Option<bool> {
        self.goals.iter().find(|g| g.goal_id == goal_id).map(|g| g.achieved)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationGuidance {
    /// goal_id -> considerations
    pub considerations: BTreeMap<String, Vec<String>>,
    pub generated_at: u64,
    pub model_backend_id: Option<String>,
    /// Set when the SOTA tier was unavailable or returned unusable output
    /// for at least one goal.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub turn: u64,
    pub goal_id: String,
    pub light_verdict: bool,
    pub sota_verdict: bool,
    pub agree: bool,
    pub notes: String,
}

/// An effect hint together with the NPC that proposed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardedHint {
    pub actor: String,
    pub hint: EffectHint,
}

// ---------------------------------------------------------------------------
// Predicates

/// Evaluates a predicate over an anchor value of the given kind.
pub fn eval_predicate(value: &AnchorValue, pred: &Predicate, kind: AnchorKind) -> Result<bool, StatusError> {
    let mismatch = || StatusError::TypeMismatch(format!("{} on {kind} value {value}", pred));
    if !value.conforms_to(kind) {
        return Err(mismatch());
    }
    let text_eq = |a: &str, b: &str| if kind == AnchorKind::FreeText { same_free_text(a, b) } else { a == b };
    match (value, pred.op, &pred.operand) {
        (AnchorValue::Number(v), op, Operand::Value(AnchorValue::Number(x))) if !op.is_set() => Ok(match op {
            PredicateOp::Gt => v > x,
            PredicateOp::Ge => v >= x,
            PredicateOp::Lt => v < x,
            PredicateOp::Le => v <= x,
            PredicateOp::Eq => v == x,
            PredicateOp::Ne => v != x,
            PredicateOp::InSet | PredicateOp::NotInSet => unreachable!("guarded"),
        }),
        (AnchorValue::Text(v), PredicateOp::Eq, Operand::Value(AnchorValue::Text(x))) => Ok(text_eq(v, x)),
        (AnchorValue::Text(v), PredicateOp::Ne, Operand::Value(AnchorValue::Text(x))) => Ok(!text_eq(v, x)),
        (AnchorValue::Text(v), PredicateOp::InSet, Operand::Set(items)) => Ok(items.iter().any(|x| text_eq(v, x))),
        (AnchorValue::Text(v), PredicateOp::NotInSet, Operand::Set(items)) if kind != AnchorKind::FreeText => {
            Ok(!items.iter().any(|x| text_eq(v, x)))
        }
        _ => Err(mismatch()),
    }
}

// ---------------------------------------------------------------------------
// Goal checks

/// Evaluates every goal of the current chapter. Subgoals already latched stay
/// satisfied regardless of the current anchor value.
pub fn check_goals(state: &SessionState, game: &GameDefinition) -> GoalCheckResult {
    let chapter_index = state.chapter_cursor;
    let mut result = GoalCheckResult { chapter_index, subgoals: Vec::new(), goals: Vec::new() };
    let Some(chapter) = game.chapter(chapter_index) else {
        return result;
    };
    for goal in &chapter.goals {
        let mut all = true;
        for sub in &goal.subgoals {
            let value = state.anchor_values.get(&sub.anchor_id).cloned().unwrap_or(AnchorValue::Text(String::new()));
            let live = game
                .anchor(&sub.anchor_id)
                .and_then(|a| eval_predicate(&value, &sub.predicate, a.value_type).ok())
                .unwrap_or(false);
            let satisfied = state.subgoal_achieved(&goal.goal_id, &sub.subgoal_id) || live;
            all &= satisfied;
            result.subgoals.push(SubgoalVerdict {
                goal_id: goal.goal_id.clone(),
                subgoal_id: sub.subgoal_id.clone(),
                satisfied,
                anchor_value_seen: value,
            });
        }
        result.goals.push(GoalVerdict { goal_id: goal.goal_id.clone(), achieved: all && !goal.subgoals.is_empty() });
    }
    result
}

// ---------------------------------------------------------------------------
// Real-time assessment

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub anchor_id: String,
    pub value: String,
    pub rationale: String,
}

/// Parses `SET|anchor_id|new_value|rationale` lines. Other lines, including
/// `NONE`, are ignored; malformed SET lines produce warnings.
pub fn parse_proposals(output: &str) -> (Vec<Proposal>, Vec<String>) {
    let mut proposals = Vec::new();
    let mut warnings = Vec::new();
    for line in output.lines() {
        match text::split_record(line, 3) {
            Some(("SET", fields)) if fields.len() >= 2 && !fields[0].is_empty() && !fields[1].is_empty() => {
                proposals.push(Proposal {
                    anchor_id: fields[0].to_string(),
                    value: fields[1].to_string(),
                    rationale: fields.get(2).copied().unwrap_or("").to_string(),
                });
            }
            Some(("SET", _)) => warnings.push(format!("malformed SET line: {}", line.trim())),
            _ => {}
        }
    }
    (proposals, warnings)
}

/// Type-checks and clamps proposals against the definition and the current
/// state. Later proposals for the same anchor override earlier ones; changes
/// come out in anchor declaration order, unchanged values are skipped.
pub fn resolve_proposals(
    game: &GameDefinition,
    state: &SessionState,
    proposals: &[Proposal],
    hints: &[ForwardedHint],
) -> (StateDelta, Vec<String>) {
    let mut warnings = Vec::new();
    let mut accepted: BTreeMap<&str, (AnchorValue, &str)> = BTreeMap::new();
    for p in proposals {
        let Some(anchor) = game.anchor(&p.anchor_id) else {
            warnings.push(format!("dropped proposal for unknown anchor '{}'", p.anchor_id));
            continue;
        };
        let Some(value) = AnchorValue::parse_as(&p.value, anchor.value_type).map(|v| anchor.clamp(v)) else {
            warnings.push(format!("dropped non-{} value '{}' for '{}'", anchor.value_type, p.value, p.anchor_id));
            continue;
        };
        if !anchor.accepts(&value) {
            warnings.push(format!("dropped disallowed value '{}' for '{}'", p.value, p.anchor_id));
            continue;
        }
        accepted.insert(anchor.anchor_id.as_str(), (value, p.rationale.as_str()));
    }
    let mut changes = Vec::new();
    for anchor in &game.anchors {
        let Some((new, rationale)) = accepted.remove(anchor.anchor_id.as_str()) else {
            continue;
        };
        let Some(old) = state.anchor_values.get(&anchor.anchor_id).cloned() else {
            continue;
        };
        if old == new {
            continue;
        }
        let hinted = hints.iter().any(|h| {
            h.hint.anchor_id == anchor.anchor_id
                && match (&h.hint.change, &old) {
                    (HintChange::Delta(d), AnchorValue::Number(o)) => anchor.clamp(AnchorValue::Number(o + d)) == new,
                    (HintChange::Set(v), _) => AnchorValue::parse_as(v, anchor.value_type).as_ref() == Some(&new),
                    _ => false,
                }
        });
        changes.push(AnchorChange {
            anchor_id: anchor.anchor_id.clone(),
            old,
            new,
            rationale: rationale.to_string(),
            source: if hinted { ChangeSource::NpcEffectHint } else { ChangeSource::LlmAssessment },
        });
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    (StateDelta { changes }, warnings)
}

fn describe_anchor(game: &GameDefinition, anchor_id: &str) -> String {
    let Some(a) = game.anchor(anchor_id) else {
        return anchor_id.to_string();
    };
    let mut kind = a.value_type.to_string();
    if let Some(set) = &a.allowed_values {
        let _ = write!(kind, ", one of: {}", set.join(" | "));
    }
    if a.min.is_some() || a.max.is_some() {
        let lo = a.min.map_or(String::new(), |v| v.to_string());
        let hi = a.max.map_or(String::new(), |v| v.to_string());
        let _ = write!(kind, ", range {lo}..{hi}");
    }
    format!("{} ({}; {})", a.anchor_id, a.name, kind)
}

/// Builds the assessment prompt. The same text is reused verbatim for the
/// shadow SOTA pass.
pub fn assessment_prompt(
    game: &GameDefinition,
    state: &SessionState,
    transcript: &[String],
    hints: &[ForwardedHint],
    guidance: Option<&ValidationGuidance>,
) -> String {
    let mut p = String::from("You are the game status manager. Decide how the latest round changed the tracked game state.\n\n");
    p.push_str("Tracked anchors and current values:\n");
    for a in &game.anchors {
        let value = state.anchor_values.get(&a.anchor_id).map(ToString::to_string).unwrap_or_default();
        let _ = writeln!(p, "- {}: {}", describe_anchor(game, &a.anchor_id), value);
    }
    if let Some(chapter) = game.chapter(state.chapter_cursor) {
        p.push_str("\nGoals in play:\n");
        for goal in &chapter.goals {
            let _ = writeln!(p, "[{}] {}", goal.goal_id, goal.creator_text);
            for sub in &goal.subgoals {
                let _ = writeln!(p, "  * {} ({} {})", sub.description, sub.anchor_id, sub.predicate);
            }
            if let Some(items) = guidance.and_then(|g| g.considerations.get(&goal.goal_id)) {
                for c in items {
                    let _ = writeln!(p, "  - consider: {c}");
                }
            }
        }
    }
    if !hints.is_empty() {
        p.push_str("\nEffects proposed by characters (unconfirmed):\n");
        for h in hints {
            let change = match &h.hint.change {
                HintChange::Delta(d) => format!("{d:+}"),
                HintChange::Set(v) => format!("= {v}"),
            };
            let _ = writeln!(p, "- {}: {} {}", h.actor, h.hint.anchor_id, change);
        }
    }
    p.push_str("\nRound transcript:\n");
    for line in transcript {
        let _ = writeln!(p, "{line}");
    }
    p.push_str("\nReply with one line per changed anchor: SET|anchor_id|new_value|rationale\nReply NONE if nothing changed.\n");
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssessmentOutcome {
    pub prompt: String,
    pub delta: StateDelta,
    pub warnings: Vec<String>,
}

/// Runs the lightweight assessment for one round and applies the accepted
/// changes, one `state_updated` event per anchor.
pub fn apply_round(
    gateway: &Gateway,
    game: &GameDefinition,
    writer: &mut SessionWriter,
    transcript: &[String],
    hints: &[ForwardedHint],
    guidance: Option<&ValidationGuidance>,
) -> Result<AssessmentOutcome, StatusError> {
    if writer.state().ended {
        return Err(StoreError::SessionClosed.into());
    }
    let prompt = assessment_prompt(game, writer.state(), transcript, hints, guidance);
    let reply = gateway.complete(&CompletionRequest::new(RoleTag::GoalCheck, prompt.clone()).with_temperature(0.0))?;
    let (proposals, mut warnings) = parse_proposals(&reply.text);
    let (delta, more) = resolve_proposals(game, writer.state(), &proposals, hints);
    warnings.extend(more);
    for change in &delta.changes {
        writer.emit(EventPayload::StateUpdated(StateUpdate::Anchor(change.clone())))?;
    }
    Ok(AssessmentOutcome { prompt, delta, warnings })
}

/// Whether the shadow assessment runs in the given (1-based) round.
pub fn sampling_due(round: u64, rate: f64) -> bool {
    if round == 0 || rate.is_nan() || rate <= 0.0 {
        return false;
    }
    let period = ((1.0 / rate.min(1.0)) - 1e-9).ceil().max(1.0) as u64;
    round.is_multiple_of(period)
}

/// Replays the round's assessment prompt on the SOTA tier and compares goal
/// verdicts with the lightweight outcome. Never mutates state; the caller
/// records the returned reports.
pub fn sample_assessment(
    gateway: &Gateway,
    game: &GameDefinition,
    pre_round: &SessionState,
    light_after: &SessionState,
    prompt: &str,
    round: u64,
    rate: f64,
) -> Result<Vec<DiscrepancyReport>, LlmError> {
    if !sampling_due(round, rate) || !gateway.supports_shadow_assessment() {
        return Ok(Vec::new());
    }
    let reply = match gateway.complete(&CompletionRequest::new(RoleTag::GoalCheckSota, prompt).with_temperature(0.0)) {
        Ok(r) => r,
        Err(e) if e.is_degradable() => {
            tracing::warn!(error = %e, "shadow assessment skipped");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e),
    };
    let (proposals, _) = parse_proposals(&reply.text);
    let (sota_delta, _) = resolve_proposals(game, pre_round, &proposals, &[]);
    let mut sota_state = pre_round.clone();
    for c in &sota_delta.changes {
        sota_state.anchor_values.insert(c.anchor_id.clone(), c.new.clone());
    }
    let light = check_goals(light_after, game);
    let sota = check_goals(&sota_state, game);
    let render = |s: &SessionState| {
        s.anchor_values
            .iter()
            .filter(|(k, v)| pre_round.anchor_values.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let notes = format!("light changes [{}]; sota changes [{}]", render(light_after), render(&sota_state));
    Ok(light
        .goals
        .iter()
        .map(|g| {
            let sota_verdict = sota.goal(&g.goal_id).unwrap_or(false);
            DiscrepancyReport {
                turn: light_after.turn,
                goal_id: g.goal_id.clone(),
                light_verdict: g.achieved,
                sota_verdict,
                agree: g.achieved == sota_verdict,
                notes: notes.clone(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Progression

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progression {
    pub achieved_goals: Vec<String>,
    pub chapter_advanced: Option<(usize, usize)>,
    /// Ending summary when a goal ended the game. The caller publishes
    /// `session_ended` once the rest of the round has been recorded.
    pub ending: Option<String>,
}

/// Latches newly satisfied subgoals and applies each newly achieved goal's
/// completion action, in definition order. At most one chapter advance per
/// call; an ending stops further processing.
pub fn advance(
    gateway: &Gateway,
    game: &GameDefinition,
    writer: &mut SessionWriter,
    check: &GoalCheckResult,
    transcript: &[String],
) -> Result<Progression, StatusError> {
    let mut out = Progression::default();
    for v in &check.subgoals {
        if v.satisfied && !writer.state().subgoal_achieved(&v.goal_id, &v.subgoal_id) {
            writer.emit(EventPayload::StateUpdated(StateUpdate::SubgoalSatisfied {
                goal_id: v.goal_id.clone(),
                subgoal_id: v.subgoal_id.clone(),
                value_seen: v.anchor_value_seen.clone(),
            }))?;
        }
    }
    let Some(chapter) = game.chapter(check.chapter_index) else {
        return Ok(out);
    };
    let last_chapter = game.chapters.len() - 1;
    for goal in &chapter.goals {
        if out.ending.is_some() {
            break;
        }
        if check.goal(&goal.goal_id) != Some(true) || writer.state().goal_achieved(&goal.goal_id) {
            continue;
        }
        writer.emit(EventPayload::GoalAchieved { goal_id: goal.goal_id.clone(), chapter_index: check.chapter_index })?;
        out.achieved_goals.push(goal.goal_id.clone());
        let action = match goal.on_complete {
            OnComplete::AdvanceChapter if check.chapter_index == last_chapter => OnComplete::EndGame,
            other => other,
        };
        match action {
            OnComplete::AdvanceChapter => {
                if out.chapter_advanced.is_some() {
                    continue;
                }
                let (from, to) = (check.chapter_index, check.chapter_index + 1);
                writer.emit(EventPayload::ChapterAdvanced { from, to })?;
                out.chapter_advanced = Some((from, to));
                narrative::generate_beat(gateway, game, writer, BeatTrigger::ChapterStart, None, transcript)?;
            }
            OnComplete::InjectTask => {
                narrative::generate_beat(gateway, game, writer, BeatTrigger::GoalCompleted, Some(&goal.goal_id), transcript)?;
            }
            OnComplete::EndGame => out.ending = Some(ending_summary(gateway, game, writer, transcript)?),
        }
    }
    Ok(out)
}

/// Publishes the completed ending.
pub fn end_session(writer: &mut SessionWriter, ending_summary: String) -> Result<(), StoreError> {
    writer.emit(EventPayload::SessionEnded { reason: EndReason::Completed, ending_summary: Some(ending_summary) })?;
    Ok(())
}

fn anchor_snapshot_line(game: &GameDefinition, state: &SessionState) -> String {
    game.anchors
        .iter()
        .map(|a| format!("{}={}", a.anchor_id, state.anchor_values.get(&a.anchor_id).map(ToString::to_string).unwrap_or_default()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Ending text conditioned on the anchor and beat history. Always ends with
/// the final anchor snapshot, even when the model is unavailable.
pub fn ending_summary(
    gateway: &Gateway,
    game: &GameDefinition,
    writer: &SessionWriter,
    transcript: &[String],
) -> Result<String, LlmError> {
    let state = writer.state();
    let mut prompt = format!("Write a short ending for the game \"{}\".\nWorld: {}\n", game.title, game.world.background);
    let _ = writeln!(prompt, "Final state: {}", anchor_snapshot_line(game, state));
    prompt.push_str("Story so far:\n");
    for beat in writer.snapshot().beats.iter().rev().take(8).rev() {
        let _ = writeln!(prompt, "- {}", beat.text);
    }
    prompt.push_str("Final round:\n");
    for line in transcript {
        let _ = writeln!(prompt, "{line}");
    }
    prompt.push_str("Reply with the ending as prose in two to four sentences.\n");
    let body = match gateway.complete(&CompletionRequest::new(RoleTag::Summarize, prompt)) {
        Ok(reply) if !reply.text.trim().is_empty() => reply.text.trim().to_string(),
        Ok(_) => format!("The story of {} comes to an end.", game.title),
        Err(e) if e.is_degradable() => {
            tracing::warn!(error = %e, "ending summary fell back to template");
            format!("The story of {} comes to an end.", game.title)
        }
        Err(e) => return Err(e),
    };
    Ok(format!("{body}\n\nFinal state: {}", anchor_snapshot_line(game, state)))
}

// ---------------------------------------------------------------------------
// Cold start

pub fn cold_start_prompt(game: &GameDefinition, goal_index: (usize, usize)) -> String {
    let goal = &game.chapters[goal_index.0].goals[goal_index.1];
    let mut p = String::from("Before play begins, list the essential considerations for validating whether this goal has been achieved.\n\n");
    let _ = writeln!(p, "World: {}", game.world.background);
    let _ = writeln!(p, "Goal: {}", goal.creator_text);
    p.push_str("Subgoals:\n");
    for s in &goal.subgoals {
        let _ = writeln!(p, "- {} ({} {})", s.description, s.anchor_id, s.predicate);
    }
    p.push_str("Anchors:\n");
    for a in &game.anchors {
        let _ = writeln!(p, "- {} = {}", describe_anchor(game, &a.anchor_id), a.initial_value);
    }
    p.push_str("\nReply with 2 to 8 lines: CONSIDER|text\n");
    p
}

fn parse_considerations(output: &str) -> Vec<String> {
    output
        .lines()
        .filter_map(|l| match text::split_record(l, 1) {
            Some(("CONSIDER", f)) => f.first().map(|s| text::truncate_chars(s.trim(), 200)),
            _ => None,
        })
        .filter(|s| !s.is_empty())
        .take(8)
        .collect()
}

/// Pre-game pass on the SOTA tier producing per-goal validation guidance.
/// Never fails: unusable or unavailable output leaves that goal's guidance
/// empty and sets the degraded flag.
pub fn cold_start(gateway: &Gateway, game: &GameDefinition) -> ValidationGuidance {
    let generated_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let mut guidance = ValidationGuidance { generated_at, ..Default::default() };
    let backend = match gateway.route_tier(RoleTag::GoalCheckSota) {
        Ok(id) => id.to_string(),
        Err(e) => {
            tracing::warn!(error = %e, "cold start skipped; guidance empty");
            guidance.degraded = true;
            for goal in game.goals() {
                guidance.considerations.insert(goal.goal_id.clone(), Vec::new());
            }
            return guidance;
        }
    };
    guidance.model_backend_id = Some(backend);
    for (ci, chapter) in game.chapters.iter().enumerate() {
        for (gi, goal) in chapter.goals.iter().enumerate() {
            let request = CompletionRequest::new(RoleTag::GoalCheckSota, cold_start_prompt(game, (ci, gi))).with_temperature(0.0);
            let items = match gateway.complete(&request) {
                Ok(reply) => parse_considerations(&reply.text),
                Err(e) => {
                    tracing::warn!(goal = %goal.goal_id, error = %e, "cold start failed for goal");
                    Vec::new()
                }
            };
            let items = if items.len() < 2 {
                guidance.degraded = true;
                Vec::new()
            } else {
                items
            };
            guidance.considerations.insert(goal.goal_id.clone(), items);
        }
    }
    guidance
}

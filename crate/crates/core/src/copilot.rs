//! Game building copilot: expands a one-line seed into a validated game
//! definition through fixed, sequential stages.
//!
//! Each stage prompt sees only the seed, the optional template and the raw
//! outputs of earlier stages, so re-running a later stage never disturbs an
//! earlier one. A stage whose output cannot be parsed gets one reprompt; after
//! that the job pauses in `needs_input` with the raw output attached.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_schema::{
    serialize_game, validate_game, AnchorDecl, AnchorKind, AnchorValue, Chapter, Character, EntitySeed, GameDefinition,
    Genre, Goal, LoreDoc, OnComplete, Operand, Predicate, PredicateOp, Region, SeedAsset, Subgoal, ValidationReport,
    WorldSetting,
};
use crate::llm::{CompletionRequest, Gateway, LlmError, RoleTag};
use crate::text;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CopilotError {
    #[error("seed must be nonempty")]
    InvalidSeed,
    #[error("model backend unavailable: {0}")]
    BackendUnavailable(LlmError),
    #[error("stage {stage} failed: {reason}")]
    StageFailed { stage: Stage, reason: String },
    #[error("goal decomposition produced no valid subgoal: {0}")]
    DecompositionFailed(String),
    #[error("job is {0:?}, not waiting for input")]
    NotWaiting(JobStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    World,
    Characters,
    NarrativeOutline,
    Mechanics,
    Integration,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [Stage::World, Stage::Characters, Stage::NarrativeOutline, Stage::Mechanics, Stage::Integration];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::World => "world",
            Stage::Characters => "characters",
            Stage::NarrativeOutline => "narrative_outline",
            Stage::Mechanics => "mechanics",
            Stage::Integration => "integration",
        }
    }

    pub fn spec(self) -> &'static StageSpec {
        &STAGES[self as usize]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct StageSpec {
    pub stage: Stage,
    pub prompt_template: &'static str,
    pub output_grammar: &'static str,
}

pub const STAGES: [StageSpec; 5] = [
    StageSpec {
        stage: Stage::World,
        prompt_template: "You are the world-building agent. Invent the setting for a text role-playing game, including the places, items and sounds a player will meet.",
        output_grammar: "TITLE|title\nGENRE|adventure, role_playing, mystery, simulation, strategy or other\nBACKGROUND|world background\nTONE|era and tone\nREGION|name|description\nLORE|doc_id|title|body\nENTITY|entity_id|scene or item|name|description\nASSET|entity_id|image, sound, music or motion|descriptor",
    },
    StageSpec {
        stage: Stage::Characters,
        prompt_template: "You are the character development agent. Create the player character and the non-player characters for this world.",
        output_grammar: "CHARACTER|character_id|name|player or npc|persona|backstory|motivations|voice_style",
    },
    StageSpec {
        stage: Stage::NarrativeOutline,
        prompt_template: "You are the narrative agent. Outline the chapters of the story, with twists and tasks the storyteller can use.",
        output_grammar: "CHAPTER|chapter_id|intro text\nTWIST|chapter_id|text\nTASK|chapter_id|text",
    },
    StageSpec {
        stage: Stage::Mechanics,
        prompt_template: "You are the gameplay mechanics agent. Declare the tracked state anchors and the goals of each chapter.",
        output_grammar: "ANCHOR|anchor_id|name|number, text_enum, location or free_text|initial value|allowed values comma-separated, or min..max for numbers\nGOAL|chapter_id|goal_id|advance_chapter, inject_task or end_game|goal text|anchor ids it depends on, comma-separated, as id or id=initial",
    },
    StageSpec {
        stage: Stage::Integration,
        prompt_template: "You are the integration agent. Break the creator's goal into checkable subgoals over the declared anchors.",
        output_grammar: "SUBGOAL|description|anchor_id|gt, ge, lt, le, eq, ne, in_set or not_in_set|operand (comma-separated for sets)",
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    NeedsInput,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedsInput {
    pub stage: Stage,
    pub reason: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopilotJob {
    pub job_id: String,
    pub seed_text: String,
    #[serde(default)]
    pub template: Option<GameDefinition>,
    /// Accepted raw output per completed stage.
    pub stage_outputs: BTreeMap<Stage, String>,
    pub status: JobStatus,
    #[serde(rename = "final")]
    pub final_def: Option<GameDefinition>,
    pub needs_input: Option<NeedsInput>,
    pub warnings: Vec<String>,
    pub report: Option<ValidationReport>,
}

impl CopilotJob {
    pub fn new(job_id: impl Into<String>, seed_text: &str, template: Option<GameDefinition>) -> Result<Self, CopilotError> {
        if seed_text.trim().is_empty() {
            return Err(CopilotError::InvalidSeed);
        }
        Ok(Self {
            job_id: job_id.into(),
            seed_text: seed_text.trim().to_string(),
            template,
            stage_outputs: BTreeMap::new(),
            status: JobStatus::Running,
            final_def: None,
            needs_input: None,
            warnings: Vec::new(),
            report: None,
        })
    }

    pub fn next_stage(&self) -> Option<Stage> {
        Stage::ORDER.into_iter().find(|s| !self.stage_outputs.contains_key(s))
    }

    /// Drops the output of `stage` and every later stage so they run again.
    pub fn rerun_from(&mut self, stage: Stage) {
        self.stage_outputs.retain(|s, _| *s < stage);
        self.status = JobStatus::Running;
        self.final_def = None;
        self.needs_input = None;
        self.report = None;
        self.warnings.clear();
    }
}

// ---------------------------------------------------------------------------
// Stage drafts

fn parse_enum<T: DeserializeOwned>(raw: &str) -> Option<T> {
    serde_json::from_value(serde_json::Value::String(raw.trim().to_ascii_lowercase())).ok()
}

pub fn slug(raw: &str) -> String {
    let mut out = String::new();
    for c in raw.trim().chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

fn records(output: &str) -> impl Iterator<Item = (&str, Vec<&str>)> {
    output.lines().filter_map(|l| text::split_record(l, 0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldDraft {
    pub title: String,
    pub genre: Option<Genre>,
    pub background: String,
    pub tone: String,
    pub regions: Vec<Region>,
    pub lore: Vec<LoreDoc>,
    pub entities: Vec<EntitySeed>,
}

pub fn parse_world(output: &str) -> Result<WorldDraft, String> {
    let mut d = WorldDraft::default();
    for (tag, f) in records(output) {
        match (tag, f.as_slice()) {
            ("TITLE", [t, ..]) => d.title = t.to_string(),
            ("GENRE", [g, ..]) => d.genre = parse_enum(g),
            ("BACKGROUND", [b, rest @ ..]) => d.background = std::iter::once(*b).chain(rest.iter().copied()).collect::<Vec<_>>().join(" | "),
            ("TONE", [t, ..]) => d.tone = t.to_string(),
            ("REGION", [n, desc, ..]) => d.regions.push(Region { name: n.to_string(), description: desc.to_string() }),
            ("LORE", [id, title, body @ ..]) if !body.is_empty() => d.lore.push(LoreDoc {
                doc_id: slug(id),
                title: title.to_string(),
                body: body.join(" | "),
                tags: Vec::new(),
            }),
            ("ENTITY", [id, kind, name, desc, ..]) => d.entities.push(EntitySeed {
                entity_id: slug(id),
                kind: parse_enum(kind).ok_or_else(|| format!("unknown entity kind '{kind}'"))?,
                name: name.to_string(),
                description: desc.to_string(),
                attributes: BTreeMap::new(),
                seed_assets: Vec::new(),
            }),
            ("ASSET", [id, modality, descriptor, ..]) => {
                let modality = crate::game_schema::Modality::parse(modality).ok_or_else(|| format!("unknown modality '{modality}'"))?;
                let id = slug(id);
                let entity = d.entities.iter_mut().find(|e| e.entity_id == id).ok_or_else(|| format!("asset for unknown entity '{id}'"))?;
                entity.seed_assets.push(SeedAsset { modality, descriptor: descriptor.to_string() });
            }
            _ => {}
        }
    }
    if d.title.is_empty() || d.background.is_empty() {
        return Err("world stage needs TITLE and BACKGROUND".into());
    }
    Ok(d)
}

pub fn parse_characters(output: &str) -> Result<Vec<Character>, String> {
    let mut out: Vec<Character> = Vec::new();
    for (tag, f) in records(output) {
        if tag != "CHARACTER" {
            continue;
        }
        let [id, name, kind, rest @ ..] = f.as_slice() else {
            return Err("CHARACTER needs at least id, name and kind".into());
        };
        let field = |i: usize| rest.get(i).map_or(String::new(), |s| s.to_string());
        let id = slug(id);
        if out.iter().any(|c| c.character_id == id) {
            return Err(format!("duplicate character '{id}'"));
        }
        out.push(Character {
            character_id: id,
            name: name.to_string(),
            kind: parse_enum(kind).ok_or_else(|| format!("unknown character kind '{kind}'"))?,
            persona: field(0),
            backstory: field(1),
            motivations: field(2),
            voice_style: field(3),
        });
    }
    if !out.iter().any(Character::is_npc) {
        return Err("characters stage needs at least one npc".into());
    }
    Ok(out)
}

pub fn parse_outline(output: &str) -> Result<Vec<Chapter>, String> {
    let mut chapters: Vec<Chapter> = Vec::new();
    for (tag, f) in records(output) {
        match (tag, f.as_slice()) {
            ("CHAPTER", [id, intro, ..]) => chapters.push(Chapter {
                chapter_id: slug(id),
                order_index: chapters.len(),
                intro_text: intro.to_string(),
                goals: Vec::new(),
                twist_pool: Vec::new(),
                task_pool: Vec::new(),
            }),
            ("TWIST" | "TASK", [id, body, ..]) => {
                let id = slug(id);
                let c = chapters.iter_mut().find(|c| c.chapter_id == id).ok_or_else(|| format!("{tag} for unknown chapter '{id}'"))?;
                if tag == "TWIST" { &mut c.twist_pool } else { &mut c.task_pool }.push(body.to_string());
            }
            _ => {}
        }
    }
    if chapters.is_empty() {
        return Err("outline needs at least one CHAPTER".into());
    }
    Ok(chapters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalDraft {
    pub chapter_id: String,
    pub goal_id: String,
    pub on_complete: OnComplete,
    pub creator_text: String,
    /// Anchor references with an optional initial value for undeclared ones.
    pub anchor_refs: Vec<(String, Option<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanicsDraft {
    pub anchors: Vec<AnchorDecl>,
    pub goals: Vec<GoalDraft>,
}

fn parse_anchor(f: &[&str]) -> Result<AnchorDecl, String> {
    let [id, name, kind, initial, rest @ ..] = f else {
        return Err("ANCHOR needs id, name, type and initial value".into());
    };
    let value_type: AnchorKind = parse_enum(kind).ok_or_else(|| format!("unknown anchor type '{kind}'"))?;
    let initial_value = AnchorValue::parse_as(initial, value_type).ok_or_else(|| format!("initial '{initial}' is not a {value_type}"))?;
    let extra = rest.first().map(|s| s.trim()).filter(|s| !s.is_empty());
    let (mut allowed_values, mut min, mut max) = (None, None, None);
    match (value_type, extra) {
        (AnchorKind::TextEnum, Some(list)) => {
            allowed_values = Some(list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        }
        (AnchorKind::TextEnum, None) => return Err(format!("text_enum anchor '{id}' needs allowed values")),
        (AnchorKind::Number, Some(range)) => {
            let (lo, hi) = range.split_once("..").ok_or_else(|| format!("bad range '{range}'"))?;
            min = Some(lo.trim()).filter(|s| !s.is_empty()).map(str::parse).transpose().map_err(|_| format!("bad range '{range}'"))?;
            max = Some(hi.trim()).filter(|s| !s.is_empty()).map(str::parse).transpose().map_err(|_| format!("bad range '{range}'"))?;
        }
        _ => {}
    }
    Ok(AnchorDecl { anchor_id: slug(id), name: name.to_string(), value_type, initial_value, allowed_values, min, max })
}

pub fn parse_mechanics(output: &str) -> Result<MechanicsDraft, String> {
    let mut d = MechanicsDraft { anchors: Vec::new(), goals: Vec::new() };
    for (tag, f) in records(output) {
        match tag {
            "ANCHOR" => d.anchors.push(parse_anchor(&f)?),
            "GOAL" => {
                let [chapter, goal, on_complete, creator, rest @ ..] = f.as_slice() else {
                    return Err("GOAL needs chapter, goal id, completion action and text".into());
                };
                let anchor_refs = rest
                    .first()
                    .map(|refs| {
                        refs.split(',')
                            .map(str::trim)
                            .filter(|r| !r.is_empty())
                            .map(|r| match r.split_once('=') {
                                Some((id, init)) => (slug(id), Some(init.trim().to_string())),
                                None => (slug(r), None),
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                d.goals.push(GoalDraft {
                    chapter_id: slug(chapter),
                    goal_id: slug(goal),
                    on_complete: parse_enum(on_complete).ok_or_else(|| format!("unknown completion action '{on_complete}'"))?,
                    creator_text: creator.to_string(),
                    anchor_refs,
                });
            }
            _ => {}
        }
    }
    if d.anchors.is_empty() || d.goals.is_empty() {
        return Err("mechanics stage needs at least one ANCHOR and one GOAL".into());
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Goal decomposition

pub fn decomposition_prompt(creator_text: &str, anchors: &[AnchorDecl]) -> String {
    let mut p = format!("{}\n\nCreator goal: {creator_text}\nDeclared anchors:\n", Stage::Integration.spec().prompt_template);
    for a in anchors {
        let _ = write!(p, "- {} ({}; {}; initial {})", a.anchor_id, a.name, a.value_type, a.initial_value);
        if let Some(v) = &a.allowed_values {
            let _ = write!(p, " allowed: {}", v.join(", "));
        }
        p.push('\n');
    }
    let _ = write!(p, "\nReply with one line per subgoal, reasoning left to right through the goal:\n{}\n", Stage::Integration.spec().output_grammar);
    p
}

/// Parses and type-checks `SUBGOAL|description|anchor_id|op|operand` rows.
pub fn parse_subgoals(output: &str, anchors: &[AnchorDecl]) -> (Vec<Subgoal>, Vec<String>) {
    let mut subgoals = Vec::new();
    let mut warnings = Vec::new();
    for (tag, f) in records(output) {
        if tag != "SUBGOAL" {
            continue;
        }
        let [description, anchor_id, op, operand, ..] = f.as_slice() else {
            warnings.push("SUBGOAL row needs description, anchor, op and operand".into());
            continue;
        };
        let Some(anchor) = anchors.iter().find(|a| a.anchor_id == *anchor_id) else {
            warnings.push(format!("dropped subgoal on unknown anchor '{anchor_id}'"));
            continue;
        };
        let Some(op) = PredicateOp::parse(op) else {
            warnings.push(format!("dropped subgoal with unknown op '{op}'"));
            continue;
        };
        let operand = if op.is_set() {
            Operand::Set(operand.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        } else {
            match AnchorValue::parse_as(operand, anchor.value_type) {
                Some(v) => Operand::Value(v),
                None => {
                    warnings.push(format!("dropped subgoal: '{operand}' is not a {}", anchor.value_type));
                    continue;
                }
            }
        };
        let predicate = Predicate { op, operand };
        if let Err(msg) = predicate.check_against(anchor) {
            warnings.push(format!("dropped subgoal: {msg}"));
            continue;
        }
        subgoals.push(Subgoal {
            subgoal_id: format!("s{}", subgoals.len() + 1),
            description: description.to_string(),
            anchor_id: anchor.anchor_id.clone(),
            predicate,
        });
    }
    (subgoals, warnings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub subgoals: Vec<Subgoal>,
    pub warnings: Vec<String>,
    pub raw: String,
}

fn stage_call(gateway: &Gateway, prompt: String) -> Result<String, CopilotError> {
    gateway
        .complete(&CompletionRequest::new(RoleTag::CopilotStage, prompt).with_max_tokens(2048).with_temperature(0.0))
        .map(|r| r.text)
        .map_err(CopilotError::BackendUnavailable)
}

/// Breaks a creator goal into typed subgoals, with one reprompt when no row
/// survives type checking.
pub fn decompose_goal(gateway: &Gateway, creator_text: &str, anchors: &[AnchorDecl]) -> Result<Decomposition, CopilotError> {
    let mut prompt = decomposition_prompt(creator_text, anchors);
    let mut warnings = Vec::new();
    for _ in 0..2 {
        let raw = stage_call(gateway, prompt.clone())?;
        let (subgoals, w) = parse_subgoals(&raw, anchors);
        warnings.extend(w);
        if !subgoals.is_empty() {
            return Ok(Decomposition { subgoals, warnings, raw });
        }
        prompt.push_str("\nNo row was usable. Use only the declared anchor ids and operand types.\n");
    }
    Err(CopilotError::DecompositionFailed(creator_text.to_string()))
}

// ---------------------------------------------------------------------------
// Pipeline

fn stage_prompt(job: &CopilotJob, stage: Stage) -> String {
    let spec = stage.spec();
    let mut p = format!("{}\n\nSeed: {}\n", spec.prompt_template, job.seed_text);
    if let Some(t) = &job.template {
        let _ = write!(p, "\nCustomize this existing game:\n{}\n", serialize_game(t));
    }
    for earlier in Stage::ORDER.iter().take_while(|s| **s != stage) {
        if let Some(out) = job.stage_outputs.get(earlier) {
            let _ = write!(p, "\n[{earlier} stage output]\n{}\n", out.trim());
        }
    }
    let _ = write!(p, "\nReply only with lines in this format:\n{}\n", spec.output_grammar);
    p
}

fn check_stage(job: &CopilotJob, stage: Stage, output: &str) -> Result<(), String> {
    match stage {
        Stage::World => parse_world(output).map(drop),
        Stage::Characters => parse_characters(output).map(drop),
        Stage::NarrativeOutline => parse_outline(output).map(drop),
        Stage::Mechanics => {
            let m = parse_mechanics(output)?;
            let outline = parse_outline(job.stage_outputs.get(&Stage::NarrativeOutline).map_or("", String::as_str))?;
            for g in &m.goals {
                if !outline.iter().any(|c| c.chapter_id == g.chapter_id) {
                    return Err(format!("goal '{}' references unknown chapter '{}'", g.goal_id, g.chapter_id));
                }
            }
            Ok(())
        }
        Stage::Integration => Ok(()),
    }
}

fn pause(job: &mut CopilotJob, stage: Stage, reason: String, raw_output: String) {
    tracing::warn!(job = %job.job_id, %stage, %reason, "copilot job needs input");
    job.status = JobStatus::NeedsInput;
    job.needs_input = Some(NeedsInput { stage, reason, raw_output });
}

/// Runs the remaining stages of a job. Returns an error only when the model
/// backend fails; parse problems pause the job instead.
pub fn run_job(gateway: &Gateway, job: &mut CopilotJob) -> Result<(), CopilotError> {
    job.status = JobStatus::Running;
    job.needs_input = None;
    while let Some(stage) = job.next_stage() {
        if stage == Stage::Integration {
            return integrate(gateway, job);
        }
        let mut prompt = stage_prompt(job, stage);
        let mut last = (String::new(), String::new());
        let mut accepted = false;
        for _ in 0..2 {
            let raw = match stage_call(gateway, prompt.clone()) {
                Ok(r) => r,
                Err(e) => {
                    job.status = JobStatus::Failed;
                    return Err(e);
                }
            };
            match check_stage(job, stage, &raw) {
                Ok(()) => {
                    job.stage_outputs.insert(stage, raw);
                    accepted = true;
                    break;
                }
                Err(reason) => {
                    prompt.push_str(&format!("\nYour previous reply was rejected ({reason}). Follow the format exactly.\n"));
                    last = (reason, raw);
                }
            }
        }
        if !accepted {
            pause(job, stage, last.0, last.1);
            return Ok(());
        }
    }
    Ok(())
}

/// Supplies a human-repaired output for the stage the job is paused on, then
/// continues the pipeline.
pub fn resume(gateway: &Gateway, job: &mut CopilotJob, repaired_output: &str) -> Result<(), CopilotError> {
    let Some(waiting) = job.needs_input.clone().filter(|_| job.status == JobStatus::NeedsInput) else {
        return Err(CopilotError::NotWaiting(job.status));
    };
    if waiting.stage == Stage::Integration {
        job.stage_outputs.insert(Stage::Integration, repaired_output.to_string());
        return integrate(gateway, job);
    }
    check_stage(job, waiting.stage, repaired_output).map_err(|reason| CopilotError::StageFailed { stage: waiting.stage, reason })?;
    job.stage_outputs.insert(waiting.stage, repaired_output.to_string());
    run_job(gateway, job)
}

pub fn expand_seed(gateway: &Gateway, job_id: &str, seed_text: &str, template: Option<GameDefinition>) -> Result<CopilotJob, CopilotError> {
    let mut job = CopilotJob::new(job_id, seed_text, template)?;
    run_job(gateway, &mut job)?;
    Ok(job)
}

fn infer_anchor(id: &str, initial: &str) -> AnchorDecl {
    let (value_type, initial_value) = match initial.trim().parse::<f64>() {
        Ok(n) if n.is_finite() => (AnchorKind::Number, AnchorValue::Number(n)),
        _ => (AnchorKind::FreeText, AnchorValue::Text(initial.trim().to_string())),
    };
    AnchorDecl { anchor_id: id.to_string(), name: id.replace('_', " "), value_type, initial_value, allowed_values: None, min: None, max: None }
}

/// Integration: repairs undeclared anchor references, decomposes every goal,
/// assembles the definition and validates it. When the job already holds an
/// integration output (a human repair), its SUBGOAL rows are used in place of
/// model calls, grouped by `GOAL|goal_id` header lines.
fn integrate(gateway: &Gateway, job: &mut CopilotJob) -> Result<(), CopilotError> {
    let out = |s: Stage| job.stage_outputs.get(&s).cloned().unwrap_or_default();
    let (world, characters, mut chapters, mechanics) = match (
        parse_world(&out(Stage::World)),
        parse_characters(&out(Stage::Characters)),
        parse_outline(&out(Stage::NarrativeOutline)),
        parse_mechanics(&out(Stage::Mechanics)),
    ) {
        (Ok(w), Ok(c), Ok(o), Ok(m)) => (w, c, o, m),
        _ => {
            pause(job, Stage::Integration, "earlier stage output no longer parses".into(), String::new());
            return Ok(());
        }
    };

    let mut anchors = mechanics.anchors.clone();
    for goal in &mechanics.goals {
        for (id, initial) in &goal.anchor_refs {
            if anchors.iter().any(|a| &a.anchor_id == id) {
                continue;
            }
            match initial {
                Some(init) if !init.is_empty() => {
                    job.warnings.push(format!("declared missing anchor '{id}' with inferred type"));
                    anchors.push(infer_anchor(id, init));
                }
                _ => {
                    pause(job, Stage::Integration, format!("goal '{}' references undeclared anchor '{id}' with no initial value", goal.goal_id), out(Stage::Mechanics));
                    return Ok(());
                }
            }
        }
    }

    let repaired = job.stage_outputs.get(&Stage::Integration).cloned();
    let mut transcript = String::new();
    for goal in &mechanics.goals {
        let subgoals = match &repaired {
            Some(text) => {
                let section = text
                    .split("GOAL|")
                    .find(|s| s.lines().next().map(str::trim) == Some(goal.goal_id.as_str()))
                    .unwrap_or_default();
                let (subs, warnings) = parse_subgoals(section, &anchors);
                job.warnings.extend(warnings);
                subs
            }
            None => match decompose_goal(gateway, &goal.creator_text, &anchors) {
                Ok(d) => {
                    job.warnings.extend(d.warnings);
                    let _ = write!(transcript, "GOAL|{}\n{}\n", goal.goal_id, d.raw.trim());
                    d.subgoals
                }
                Err(CopilotError::DecompositionFailed(_)) => {
                    pause(job, Stage::Integration, format!("goal '{}' could not be decomposed", goal.goal_id), transcript);
                    return Ok(());
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    return Err(e);
                }
            },
        };
        if subgoals.is_empty() {
            pause(job, Stage::Integration, format!("goal '{}' has no valid subgoal", goal.goal_id), repaired.unwrap_or_default());
            return Ok(());
        }
        let chapter = chapters.iter_mut().find(|c| c.chapter_id == goal.chapter_id).expect("checked in mechanics stage");
        chapter.goals.push(Goal {
            goal_id: goal.goal_id.clone(),
            creator_text: goal.creator_text.clone(),
            subgoals,
            on_complete: goal.on_complete,
            visible_to_npcs: true,
        });
    }
    if repaired.is_none() {
        job.stage_outputs.insert(Stage::Integration, transcript);
    }

    // Entities for every scene region the world named but did not seed.
    let mut entities = world.entities.clone();
    let known: BTreeSet<String> = entities.iter().map(|e| e.entity_id.clone()).collect();
    for region in &world.regions {
        let id = slug(&region.name);
        if !id.is_empty() && !known.contains(&id) {
            entities.push(EntitySeed {
                entity_id: id,
                kind: crate::game_schema::EntityKind::Scene,
                name: region.name.clone(),
                description: region.description.clone(),
                attributes: BTreeMap::new(),
                seed_assets: Vec::new(),
            });
        }
    }

    let game_id = job.template.as_ref().map(|t| t.game_id.clone()).unwrap_or_else(|| slug(&world.title));
    let def = GameDefinition {
        game_id,
        title: world.title,
        genre: world.genre.or(job.template.as_ref().map(|t| t.genre)).unwrap_or(Genre::Other),
        world: WorldSetting { background: world.background, regions: world.regions, era_tone: world.tone },
        characters,
        anchors,
        chapters,
        lore: world.lore,
        initial_entities: entities,
    };
    let report = validate_game(&def);
    if report.has_errors() {
        let reason = report.to_string();
        job.report = Some(report);
        pause(job, Stage::Integration, reason, serialize_game(&def));
        return Ok(());
    }
    job.report = Some(report);
    job.final_def = Some(def);
    job.status = JobStatus::Complete;
    Ok(())
}

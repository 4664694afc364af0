//! Story beats and NPC prompt assembly.
//!
//! Beats are generated only after a goal completes, when play stalls, or at
//! chapter start. NPC prompts are rebuilt from three sections so the static
//! persona never changes while tasks and context track the story.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::events::{EventPayload, PromptMark};
use crate::game_schema::{Character, GameDefinition};
use crate::llm::{CompletionRequest, Gateway, LlmError, RoleTag};
use crate::session_store::{MemoryFragment, SessionSnapshot, SessionState, SessionWriter, StoreError};
use crate::text;

pub const DEFAULT_BEAT_WINDOW: usize = 5;
pub const DEFAULT_STALL_WINDOW: u64 = 6;
pub const LORE_CHUNK_WORDS: usize = 120;
pub const LORE_CHUNK_STRIDE: usize = 60;

/// Line separating the static, task and context sections of an NPC prompt.
pub const SECTION_DELIMITER: &str = "\n=== ZAGII:SECTION ===\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatKind {
    Task,
    Clue,
    Twist,
    ChapterIntro,
    Ending,
}

impl BeatKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BeatKind::Task => "task",
            BeatKind::Clue => "clue",
            BeatKind::Twist => "twist",
            BeatKind::ChapterIntro => "chapter_intro",
            BeatKind::Ending => "ending",
        }
    }

    fn parse(raw: &str) -> Option<BeatKind> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "task" => Some(BeatKind::Task),
            "clue" => Some(BeatKind::Clue),
            "twist" => Some(BeatKind::Twist),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatTrigger {
    GoalCompleted,
    Stall,
    ChapterStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatOrigin {
    Authored,
    Generated,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeBeat {
    pub beat_id: String,
    pub kind: BeatKind,
    pub text: String,
    /// Character ids; empty means every NPC.
    pub targets: Vec<String>,
    pub created_turn: u64,
    pub source_goal: Option<String>,
    pub chapter_index: usize,
    pub trigger: BeatTrigger,
    pub origin: BeatOrigin,
}

impl NarrativeBeat {
    pub fn targets_npc(&self, character_id: &str) -> bool {
        self.targets.is_empty() || self.targets.iter().any(|t| t == character_id)
    }
}

// ---------------------------------------------------------------------------
// Lore retrieval

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedMaterial {
    pub doc_id: String,
    pub chunk_index: usize,
    /// Exact slice of the source document body.
    pub snippet: String,
    pub score: f64,
}

struct Chunk<'a> {
    doc_order: usize,
    doc_id: &'a str,
    chunk_index: usize,
    snippet: &'a str,
}

fn chunk_doc(body: &str) -> Vec<&str> {
    let words: Vec<(usize, usize)> = body
        .split_whitespace()
        .map(|w| {
            let start = w.as_ptr() as usize - body.as_ptr() as usize;
            (start, start + w.len())
        })
        .collect();
    if words.is_empty() {
        return Vec::new();
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + LORE_CHUNK_WORDS).min(words.len());
        chunks.push(&body[words[start].0..words[end - 1].1]);
        if end == words.len() {
            break;
        }
        start += LORE_CHUNK_STRIDE;
    }
    chunks
}

/// Keyword-overlap retrieval over lore chunks. Ties keep document order, then
/// chunk order.
pub fn retrieve_materials(game: &GameDefinition, query: &str, k: usize) -> Vec<RetrievedMaterial> {
    let q = text::keywords(query);
    let mut chunks: Vec<(f64, Chunk<'_>)> = game
        .lore
        .iter()
        .enumerate()
        .flat_map(|(doc_order, doc)| {
            chunk_doc(&doc.body)
                .into_iter()
                .enumerate()
                .map(move |(chunk_index, snippet)| Chunk { doc_order, doc_id: &doc.doc_id, chunk_index, snippet })
        })
        .map(|c| {
            let overlap = q.intersection(&text::keywords(c.snippet)).count();
            (overlap as f64 / q.len().max(1) as f64, c)
        })
        .collect();
    chunks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.doc_order.cmp(&b.1.doc_order))
            .then(a.1.chunk_index.cmp(&b.1.chunk_index))
    });
    chunks
        .into_iter()
        .take(k)
        .map(|(score, c)| RetrievedMaterial {
            doc_id: c.doc_id.to_string(),
            chunk_index: c.chunk_index,
            snippet: c.snippet.to_string(),
            score,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Beats

pub fn detect_stall(state: &SessionState, window: u64) -> bool {
    window > 0 && state.turn.saturating_sub(state.last_progress_turn) >= window
}

/// Stall check used by the turn pipeline: also waits a full window after the
/// previous stall beat.
pub fn stall_beat_due(state: &SessionState, window: u64) -> bool {
    detect_stall(state, window) && state.turn.saturating_sub(state.last_stall_beat_turn) >= window
}

fn pending_goal_text(game: &GameDefinition, state: &SessionState) -> Vec<String> {
    game.chapter(state.chapter_cursor)
        .map(|c| {
            c.goals
                .iter()
                .filter(|g| !state.goal_achieved(&g.goal_id))
                .map(|g| g.creator_text.clone())
                .collect()
        })
        .unwrap_or_default()
}

pub fn beat_prompt(
    game: &GameDefinition,
    snapshot: &SessionSnapshot,
    trigger: BeatTrigger,
    source_goal: Option<&str>,
    transcript: &[String],
) -> String {
    let state = &snapshot.state;
    let chapter = game.chapter(state.chapter_cursor);
    let pending = pending_goal_text(game, state);
    let mut p = format!("You direct the story of \"{}\". {}\n", game.title, game.world.background);
    match (trigger, source_goal) {
        (BeatTrigger::GoalCompleted, Some(goal)) => {
            let _ = writeln!(p, "The players just completed goal '{goal}'. Give them a new story beat.");
        }
        _ => p.push_str("Play has stalled. Give the players a beat that moves the story forward.\n"),
    }
    p.push_str("Open objectives:\n");
    for g in &pending {
        let _ = writeln!(p, "- {g}");
    }
    if let Some(c) = chapter {
        p.push_str("Task ideas:\n");
        for t in &c.task_pool {
            let _ = writeln!(p, "- {t}");
        }
        p.push_str("Twist ideas:\n");
        for t in &c.twist_pool {
            let _ = writeln!(p, "- {t}");
        }
    }
    p.push_str("Lore:\n");
    for m in retrieve_materials(game, &pending.join(" "), 4) {
        let _ = writeln!(p, "- [{}] {}", m.doc_id, text::one_line(&m.snippet));
    }
    p.push_str("World state:\n");
    for (k, v) in &state.anchor_values {
        let _ = writeln!(p, "- {k}: {v}");
    }
    p.push_str("Recent round:\n");
    for line in transcript {
        let _ = writeln!(p, "{line}");
    }
    let npcs: Vec<&str> = game.npcs().map(|c| c.character_id.as_str()).collect();
    let _ = writeln!(
        p,
        "\nReply with exactly one line: BEAT|task, clue or twist|comma-separated character ids from [{}] or empty for all|text",
        npcs.join(", ")
    );
    p
}

fn parse_beat(output: &str, game: &GameDefinition) -> Option<(BeatKind, Vec<String>, String)> {
    output.lines().find_map(|line| match text::split_record(line, 3) {
        Some(("BEAT", f)) if f.len() == 3 => {
            let kind = BeatKind::parse(f[0])?;
            let body = text::one_line(f[2]);
            if body.is_empty() {
                return None;
            }
            let mut targets: Vec<String> = f[1]
                .split(',')
                .filter_map(|t| game.resolve_character(t))
                .filter(|c| c.is_npc())
                .map(|c| c.character_id.clone())
                .collect();
            targets.dedup();
            Some((kind, targets, body))
        }
        _ => None,
    })
}

fn fallback_text(game: &GameDefinition, snapshot: &SessionSnapshot) -> String {
    let state = &snapshot.state;
    let pool = game
        .chapter(state.chapter_cursor)
        .map(|c| if c.task_pool.is_empty() { &c.twist_pool } else { &c.task_pool });
    match pool {
        Some(pool) if !pool.is_empty() => pool[snapshot.narrative_fallback_count() % pool.len()].clone(),
        _ => match pending_goal_text(game, state).first() {
            Some(goal) => format!("Remember the task at hand: {goal}"),
            None => "The story waits for your next move.".to_string(),
        },
    }
}

/// Generates one beat and publishes it as `narrative_injected`. Chapter
/// starts pass the authored intro through; other triggers ask the narrative
/// tier and fall back to the chapter's task pool in round-robin order.
pub fn generate_beat(
    gateway: &Gateway,
    game: &GameDefinition,
    writer: &mut SessionWriter,
    trigger: BeatTrigger,
    source_goal: Option<&str>,
    transcript: &[String],
) -> Result<NarrativeBeat, NarrativeError> {
    let snapshot = writer.snapshot();
    let state = &snapshot.state;
    let mut beat = NarrativeBeat {
        beat_id: format!("b{:04}", snapshot.beats.len() + 1),
        kind: BeatKind::Task,
        text: String::new(),
        targets: Vec::new(),
        created_turn: state.turn,
        source_goal: source_goal.map(str::to_string),
        chapter_index: state.chapter_cursor,
        trigger,
        origin: BeatOrigin::Generated,
    };
    if trigger == BeatTrigger::ChapterStart {
        let intro = game.chapter(state.chapter_cursor).map(|c| c.intro_text.clone()).unwrap_or_default();
        beat.kind = BeatKind::ChapterIntro;
        beat.origin = BeatOrigin::Authored;
        beat.text = if intro.trim().is_empty() { format!("A new chapter of {} begins.", game.title) } else { intro };
    } else {
        let prompt = beat_prompt(game, snapshot, trigger, source_goal, transcript);
        let parsed = match gateway.complete(&CompletionRequest::new(RoleTag::Narrative, prompt)) {
            Ok(reply) => parse_beat(&reply.text, game),
            Err(e) if e.is_degradable() => {
                tracing::warn!(error = %e, "narrative tier unavailable; using task pool");
                None
            }
            Err(e) => return Err(e.into()),
        };
        match parsed {
            Some((kind, targets, body)) => {
                beat.kind = kind;
                beat.targets = targets;
                beat.text = body;
            }
            None => {
                beat.origin = BeatOrigin::Fallback;
                beat.text = fallback_text(game, snapshot);
            }
        }
    }
    writer.emit(EventPayload::NarrativeInjected(beat.clone()))?;
    Ok(beat)
}

// ---------------------------------------------------------------------------
// NPC prompts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpcPrompt {
    pub character_id: String,
    pub static_section: String,
    pub task_section: String,
    pub context_section: String,
    pub version: u64,
    pub digest: String,
}

impl NpcPrompt {
    pub fn render(&self) -> String {
        [self.static_section.as_str(), &self.task_section, &self.context_section].join(SECTION_DELIMITER)
    }

    pub fn mark(&self) -> PromptMark {
        PromptMark { version: self.version, digest: self.digest.clone() }
    }
}

fn clean(content: &str) -> String {
    content.replace(SECTION_DELIMITER.trim(), "")
}

pub fn static_section(game: &GameDefinition, npc: &Character) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Character");
    let _ = writeln!(s, "You are {} ({}).", npc.name, npc.character_id);
    let _ = writeln!(s, "Persona: {}", npc.persona);
    let _ = writeln!(s, "Backstory: {}", npc.backstory);
    let _ = writeln!(s, "Motivations: {}", npc.motivations);
    let _ = writeln!(s, "Voice: {}", npc.voice_style);
    let _ = writeln!(s, "# World");
    let _ = writeln!(s, "{}", game.world.background);
    if !game.world.era_tone.is_empty() {
        let _ = writeln!(s, "Tone: {}", game.world.era_tone);
    }
    clean(s.trim_end())
}

/// Builds the three-section prompt for one NPC. The version increments only
/// when the task or context sections differ from the NPC's last action.
pub fn assemble_npc_prompt(
    game: &GameDefinition,
    npc: &Character,
    snapshot: &SessionSnapshot,
    fragments: &[&MemoryFragment],
    beat_window: usize,
) -> NpcPrompt {
    let state = &snapshot.state;

    let mut task = String::from("# Current tasks\n");
    let tasks: Vec<&NarrativeBeat> = snapshot
        .beats
        .iter()
        .filter(|b| b.kind == BeatKind::Task && b.chapter_index == state.chapter_cursor && b.targets_npc(&npc.character_id))
        .collect();
    if tasks.is_empty() {
        task.push_str("(none)\n");
    }
    for b in tasks {
        let _ = writeln!(task, "- {}", text::one_line(&b.text));
    }
    task.push_str("# Chapter objectives\n");
    let objectives: Vec<&str> = game
        .chapter(state.chapter_cursor)
        .map(|c| {
            c.goals
                .iter()
                .filter(|g| g.visible_to_npcs && !state.goal_achieved(&g.goal_id))
                .map(|g| g.creator_text.as_str())
                .collect()
        })
        .unwrap_or_default();
    if objectives.is_empty() {
        task.push_str("(none)\n");
    }
    for o in objectives {
        let _ = writeln!(task, "- {}", text::one_line(o));
    }

    let mut context = String::new();
    let recent: Vec<&NarrativeBeat> = snapshot.beats.iter().rev().take(beat_window).rev().collect();
    if !recent.is_empty() {
        context.push_str("# Recent story\n");
        for b in recent {
            let _ = writeln!(context, "- {}", text::one_line(&b.text));
        }
    }
    if !fragments.is_empty() {
        context.push_str("# Memories\n");
        for f in fragments {
            let _ = writeln!(context, "- {}", text::one_line(&f.content));
        }
    }
    context.push_str("# World state\n");
    for a in &game.anchors {
        if let Some(v) = state.anchor_values.get(&a.anchor_id) {
            let _ = writeln!(context, "- {}: {}", a.name, v);
        }
    }

    let task = clean(task.trim_end());
    let context = clean(context.trim_end());
    let digest = hex::encode(&Sha256::digest(format!("{task}{SECTION_DELIMITER}{context}").as_bytes())[..16]);
    let version = match snapshot.npc_marks.get(&npc.character_id).and_then(|m| m.prompt.as_ref()) {
        None => 1,
        Some(mark) if mark.digest == digest => mark.version,
        Some(mark) => mark.version + 1,
    };
    NpcPrompt {
        character_id: npc.character_id.clone(),
        static_section: static_section(game, npc),
        task_section: task,
        context_section: context,
        version,
        digest,
    }
}

/// Beats an NPC should see, for the API.
pub fn beats_for<'a>(snapshot: &'a SessionSnapshot, character_id: &'a str) -> impl Iterator<Item = &'a NarrativeBeat> {
    snapshot.beats.iter().filter(move |b| b.targets_npc(character_id))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NarrativeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

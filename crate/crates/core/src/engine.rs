//! Session lifecycle and the per-round turn pipeline.
//!
//! A round runs against a private copy of the session snapshot. Events are
//! buffered in a [`SessionWriter`] and become visible only after the whole
//! pipeline succeeded: they are persisted, published on the bus and the live
//! snapshot is swapped in one step. Any failure before that leaves the session
//! exactly as it was.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock, TryLockError};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{analytics_summary, AnalyticsSummary};
use crate::copilot::{self, CopilotError, CopilotJob, JobStatus};
use crate::events::{AnchorChange, AssetUpdate, BusEvent, EndReason, EventPayload, NpcAction};
use crate::game_schema::{load_game_with_report, validate_game, GameDefinition, Genre, Modality, SchemaError, ValidationReport};
use crate::llm::{Gateway, LlmError};
use crate::message_bus::{BusError, MessageBus};
use crate::narrative::{self, BeatTrigger, NarrativeBeat, NarrativeError};
use crate::persistence::{PersistError, SessionRecord, Store};
use crate::rendering::{self, RenderError, SceneDescriptor};
use crate::roleplay::{self, ActionElement, RoleplayError};
use crate::session_store::{
    retrieve_fragments, Entity, EntityMeta, RetrievalWeights, SessionSnapshot, SessionState, SessionWriter, StoreError,
};
use crate::status_manager::{self, DiscrepancyReport, StatusError, ValidationGuidance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub npcs_per_round: usize,
    pub memory_k: usize,
    pub beat_window: usize,
    pub stall_window: u64,
    pub sampling_rate: f64,
    pub modalities: Vec<Modality>,
    pub retrieval: RetrievalWeights,
    pub analytics_top_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            npcs_per_round: roleplay::DEFAULT_NPCS_PER_ROUND,
            memory_k: 4,
            beat_window: narrative::DEFAULT_BEAT_WINDOW,
            stall_window: narrative::DEFAULT_STALL_WINDOW,
            sampling_rate: 0.1,
            modalities: vec![Modality::Image],
            retrieval: RetrievalWeights::default(),
            analytics_top_k: 10,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown game '{0}'")]
    UnknownGame(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("unknown copilot job '{0}'")]
    UnknownJob(String),
    #[error("session '{0}' has ended")]
    SessionClosed(String),
    #[error("session '{0}' already has a round in flight")]
    Busy(String),
    #[error("utterance must be nonempty")]
    EmptyUtterance,
    #[error("invalid game definition:\n{0}")]
    InvalidGame(ValidationReport),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("model backend unavailable: {0}")]
    Backend(LlmError),
    #[error("state store: {0}")]
    Store(StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Copilot(#[from] CopilotError),
}

impl From<LlmError> for EngineError {
    fn from(e: LlmError) -> Self {
        EngineError::Backend(e)
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::SessionClosed | StoreError::MutationAfterEnd => EngineError::SessionClosed(String::new()),
            other => EngineError::Store(other),
        }
    }
}

impl From<StatusError> for EngineError {
    fn from(e: StatusError) -> Self {
        match e {
            StatusError::Llm(e) => e.into(),
            StatusError::Store(e) => e.into(),
            StatusError::TypeMismatch(m) => EngineError::Store(StoreError::Inconsistent(m)),
        }
    }
}

impl From<NarrativeError> for EngineError {
    fn from(e: NarrativeError) -> Self {
        match e {
            NarrativeError::Llm(e) => e.into(),
            NarrativeError::Store(e) => e.into(),
        }
    }
}

impl From<RoleplayError> for EngineError {
    fn from(e: RoleplayError) -> Self {
        match e {
            RoleplayError::Llm(e) => e.into(),
            RoleplayError::Store(e) => e.into(),
            other => EngineError::Store(StoreError::Inconsistent(other.to_string())),
        }
    }
}

impl From<RenderError> for EngineError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Llm(e) => e.into(),
            RenderError::Store(e) => e.into(),
            RenderError::EmptyTranscript => EngineError::Store(StoreError::Inconsistent(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub game_id: String,
    pub title: String,
    pub genre: Genre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub record: SessionRecord,
    pub last_seq: u64,
    pub state: SessionState,
    pub entities: Vec<Entity>,
    pub beats: Vec<NarrativeBeat>,
    pub reports: Vec<DiscrepancyReport>,
}

impl SessionView {
    fn new(record: &SessionRecord, snapshot: &SessionSnapshot) -> Self {
        Self {
            record: record.clone(),
            last_seq: snapshot.last_seq,
            state: snapshot.state.clone(),
            entities: snapshot.entities.values().cloned().collect(),
            beats: snapshot.beats.clone(),
            reports: snapshot.reports.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub session_id: String,
    pub turn: u64,
    pub npc_actions: Vec<BusEvent>,
    pub state_delta: Vec<AnchorChange>,
    pub new_beats: Vec<NarrativeBeat>,
    pub scene: SceneDescriptor,
    pub goal_events: Vec<BusEvent>,
    pub ended: bool,
    pub ending_summary: Option<String>,
    /// Every event of the round in seq order.
    pub events: Vec<BusEvent>,
    pub warnings: Vec<String>,
}

struct GameEntry {
    def: GameDefinition,
    guidance: OnceLock<ValidationGuidance>,
}

struct Live {
    snapshot: SessionSnapshot,
    record: SessionRecord,
    last_active: Instant,
}

struct SessionSlot {
    game: Arc<GameEntry>,
    round: Mutex<()>,
    live: RwLock<Live>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn numeric_suffix(id: &str, prefix: &str) -> u64 {
    id.strip_prefix(prefix).and_then(|n| n.parse().ok()).unwrap_or(0)
}

pub struct Engine {
    gateway: Arc<Gateway>,
    bus: Arc<MessageBus>,
    store: Arc<dyn Store>,
    config: EngineConfig,
    games: RwLock<BTreeMap<String, Arc<GameEntry>>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    jobs: Mutex<BTreeMap<String, CopilotJob>>,
    session_counter: AtomicU64,
    job_counter: AtomicU64,
}

impl Engine {
    /// Opens an engine over a store, restoring games, jobs and sessions. Live
    /// sessions are rebuilt by replaying their event logs.
    pub fn new(gateway: Arc<Gateway>, store: Arc<dyn Store>, config: EngineConfig) -> Result<Self, EngineError> {
        let engine = Self {
            gateway,
            bus: Arc::new(MessageBus::new()),
            store,
            config,
            games: RwLock::default(),
            sessions: RwLock::default(),
            jobs: Mutex::default(),
            session_counter: AtomicU64::new(0),
            job_counter: AtomicU64::new(0),
        };
        for def in engine.store.games()? {
            engine.games.write().expect("games lock").insert(def.game_id.clone(), Arc::new(GameEntry { def, guidance: OnceLock::new() }));
        }
        for job in engine.store.jobs()? {
            engine.job_counter.fetch_max(numeric_suffix(&job.job_id, "job-"), Ordering::SeqCst);
            engine.jobs.lock().expect("jobs lock").insert(job.job_id.clone(), job);
        }
        for record in engine.store.records()? {
            engine.session_counter.fetch_max(numeric_suffix(&record.session_id, "sess-"), Ordering::SeqCst);
            let Some(game) = engine.games.read().expect("games lock").get(&record.game_id).cloned() else {
                continue;
            };
            let events = engine.store.load_events(&record.session_id)?;
            if events.is_empty() {
                continue;
            }
            let snapshot = SessionSnapshot::new(&record.session_id, &game.def).replay(&events)?;
            engine.bus.restore_session(&record.session_id, events)?;
            let slot = SessionSlot { game, round: Mutex::new(()), live: RwLock::new(Live { snapshot, record: record.clone(), last_active: Instant::now() }) };
            engine.sessions.write().expect("sessions lock").insert(record.session_id.clone(), Arc::new(slot));
        }
        Ok(engine)
    }

    pub fn in_memory(gateway: Gateway) -> Self {
        Self::new(Arc::new(gateway), Arc::new(crate::persistence::MemoryStore::new()), EngineConfig::default())
            .expect("empty memory store always opens")
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn bus(&self) -> &Arc<MessageBus> {
        &self.bus
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    // -- games ---------------------------------------------------------------

    pub fn register_game(&self, def: GameDefinition) -> Result<ValidationReport, EngineError> {
        let report = validate_game(&def);
        if report.has_errors() {
            return Err(EngineError::InvalidGame(report));
        }
        self.store.put_game(&def)?;
        self.games
            .write()
            .expect("games lock")
            .insert(def.game_id.clone(), Arc::new(GameEntry { def, guidance: OnceLock::new() }));
        Ok(report)
    }

    /// Registers a game document; unknown fields come back as warnings.
    pub fn register_game_document(&self, document: &[u8]) -> Result<(String, ValidationReport), EngineError> {
        let (def, mut report) = load_game_with_report(document)?;
        let id = def.game_id.clone();
        let extra = self.register_game(def)?;
        for issue in extra.issues {
            if !report.issues.contains(&issue) {
                report.issues.push(issue);
            }
        }
        Ok((id, report))
    }

    pub fn games(&self) -> Vec<GameSummary> {
        self.games
            .read()
            .expect("games lock")
            .values()
            .map(|g| GameSummary { game_id: g.def.game_id.clone(), title: g.def.title.clone(), genre: g.def.genre })
            .collect()
    }

    pub fn game(&self, game_id: &str) -> Option<GameDefinition> {
        self.games.read().expect("games lock").get(game_id).map(|g| g.def.clone())
    }

    /// Cold-start guidance for a game, computed once on first use.
    pub fn guidance(&self, game_id: &str) -> Result<ValidationGuidance, EngineError> {
        let game = self.game_entry(game_id)?;
        Ok(game.guidance.get_or_init(|| status_manager::cold_start(&self.gateway, &game.def)).clone())
    }

    fn game_entry(&self, game_id: &str) -> Result<Arc<GameEntry>, EngineError> {
        self.games.read().expect("games lock").get(game_id).cloned().ok_or_else(|| EngineError::UnknownGame(game_id.to_string()))
    }

    fn slot(&self, session_id: &str) -> Result<Arc<SessionSlot>, EngineError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))
    }

    // -- sessions ------------------------------------------------------------

    pub fn start_session(&self, game_id: &str) -> Result<SessionView, EngineError> {
        let game = self.game_entry(game_id)?;
        game.guidance.get_or_init(|| status_manager::cold_start(&self.gateway, &game.def));
        let n = self.session_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let session_id = format!("sess-{n}");
        let mut writer = SessionWriter::new(SessionSnapshot::new(&session_id, &game.def));
        seed_session(&self.gateway, &game.def, &mut writer)?;
        let (snapshot, events) = writer.into_parts();
        let record = SessionRecord {
            session_id: session_id.clone(),
            game_id: game_id.to_string(),
            created_at: now_ms(),
            ended_at: None,
            round_count: 0,
            event_log_ref: self.store.log_ref(&session_id),
        };
        self.store.append_events(&session_id, &events)?;
        self.store.put_record(&record)?;
        self.bus.open_session(&session_id)?;
        self.bus.publish_batch(&session_id, &events)?;
        let view = SessionView::new(&record, &snapshot);
        let slot = SessionSlot { game, round: Mutex::new(()), live: RwLock::new(Live { snapshot, record, last_active: Instant::now() }) };
        self.sessions.write().expect("sessions lock").insert(session_id, Arc::new(slot));
        Ok(view)
    }

    pub fn session_state(&self, session_id: &str) -> Result<SessionView, EngineError> {
        let slot = self.slot(session_id)?;
        let live = slot.live.read().expect("session lock");
        Ok(SessionView::new(&live.record, &live.snapshot))
    }

    /// The live snapshot, as folded from the committed log.
    pub fn snapshot(&self, session_id: &str) -> Result<SessionSnapshot, EngineError> {
        Ok(self.slot(session_id)?.live.read().expect("session lock").snapshot.clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().expect("sessions lock").keys().cloned().collect()
    }

    /// Runs one player round through the full pipeline and commits it
    /// atomically.
    pub fn run_round(&self, session_id: &str, utterance: &str) -> Result<RoundResult, EngineError> {
        let utterance = utterance.trim();
        if utterance.is_empty() {
            return Err(EngineError::EmptyUtterance);
        }
        let slot = self.slot(session_id)?;
        let _guard = match slot.round.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(EngineError::Busy(session_id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let snapshot = slot.live.read().expect("session lock").snapshot.clone();
        if snapshot.state.ended {
            return Err(EngineError::SessionClosed(session_id.to_string()));
        }
        let guidance = slot.game.guidance.get_or_init(|| status_manager::cold_start(&self.gateway, &slot.game.def)).clone();
        let ctx = RoundContext { gateway: &self.gateway, bus: &self.bus, game: &slot.game.def, guidance: &guidance, config: &self.config };
        let mut writer = SessionWriter::new(snapshot);
        let mut result = play_round(&ctx, &mut writer, utterance).map_err(|e| match e {
            EngineError::SessionClosed(_) => EngineError::SessionClosed(session_id.to_string()),
            other => other,
        })?;
        let (snapshot, events) = writer.into_parts();

        let mut record = slot.live.read().expect("session lock").record.clone();
        record.round_count += 1;
        if snapshot.state.ended {
            record.ended_at = Some(now_ms());
        }
        self.store.append_events(session_id, &events)?;
        self.store.put_record(&record)?;
        self.bus.publish_batch(session_id, &events)?;
        {
            let mut live = slot.live.write().expect("session lock");
            live.snapshot = snapshot;
            live.record = record;
            live.last_active = Instant::now();
        }
        result.events = events;
        Ok(result)
    }

    /// Ends a session at the player's request. Ending an already ended
    /// session is a no-op.
    pub fn end_session(&self, session_id: &str) -> Result<SessionView, EngineError> {
        self.end_with(session_id, EndReason::Exited)
    }

    fn end_with(&self, session_id: &str, reason: EndReason) -> Result<SessionView, EngineError> {
        let slot = self.slot(session_id)?;
        let _guard = match slot.round.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(EngineError::Busy(session_id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let (snapshot, mut record) = {
            let live = slot.live.read().expect("session lock");
            (live.snapshot.clone(), live.record.clone())
        };
        if snapshot.state.ended {
            return Ok(SessionView::new(&record, &snapshot));
        }
        let mut writer = SessionWriter::new(snapshot);
        writer.emit(EventPayload::SessionEnded { reason, ending_summary: None })?;
        let (snapshot, events) = writer.into_parts();
        record.ended_at = Some(now_ms());
        self.store.append_events(session_id, &events)?;
        self.store.put_record(&record)?;
        self.bus.publish_batch(session_id, &events)?;
        let view = SessionView::new(&record, &snapshot);
        let mut live = slot.live.write().expect("session lock");
        live.snapshot = snapshot;
        live.record = record;
        Ok(view)
    }

    /// Ends every live session idle for at least `idle`. Returns the ids.
    pub fn expire_idle(&self, idle: Duration) -> Vec<String> {
        let candidates: Vec<String> = self
            .sessions
            .read()
            .expect("sessions lock")
            .iter()
            .filter(|(_, s)| {
                let live = s.live.read().expect("session lock");
                !live.snapshot.state.ended && live.last_active.elapsed() >= idle
            })
            .map(|(id, _)| id.clone())
            .collect();
        candidates.into_iter().filter(|id| self.end_with(id, EndReason::IdleTimeout).is_ok()).collect()
    }

    // -- analytics -----------------------------------------------------------

    pub fn analytics(&self, top_k: Option<usize>, outlier_threshold: Option<u64>) -> Result<AnalyticsSummary, EngineError> {
        let top_k = top_k.unwrap_or(self.config.analytics_top_k);
        Ok(analytics_summary(&self.store.records()?, top_k, outlier_threshold))
    }

    // -- copilot -------------------------------------------------------------

    /// Runs a copilot job to completion or to its first pause. A completed
    /// definition is registered as a playable game.
    pub fn create_job(&self, seed: &str, template_game: Option<&str>) -> Result<CopilotJob, EngineError> {
        let template = template_game.map(|id| self.game(id).ok_or_else(|| EngineError::UnknownGame(id.to_string()))).transpose()?;
        let n = self.job_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let mut job = CopilotJob::new(format!("job-{n}"), seed, template)?;
        let outcome = copilot::run_job(&self.gateway, &mut job);
        self.finish_job(&job)?;
        outcome?;
        Ok(job)
    }

    pub fn resume_job(&self, job_id: &str, repaired_output: &str) -> Result<CopilotJob, EngineError> {
        let mut job = self.job(job_id)?;
        let outcome = copilot::resume(&self.gateway, &mut job, repaired_output);
        self.finish_job(&job)?;
        outcome?;
        Ok(job)
    }

    fn finish_job(&self, job: &CopilotJob) -> Result<(), EngineError> {
        if job.status == JobStatus::Complete {
            if let Some(def) = &job.final_def {
                self.register_game(def.clone())?;
            }
        }
        self.store.put_job(job)?;
        self.jobs.lock().expect("jobs lock").insert(job.job_id.clone(), job.clone());
        Ok(())
    }

    pub fn job(&self, job_id: &str) -> Result<CopilotJob, EngineError> {
        self.jobs.lock().expect("jobs lock").get(job_id).cloned().ok_or_else(|| EngineError::UnknownJob(job_id.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Pipeline

pub struct RoundContext<'a> {
    pub gateway: &'a Gateway,
    pub bus: &'a MessageBus,
    pub game: &'a GameDefinition,
    pub guidance: &'a ValidationGuidance,
    pub config: &'a EngineConfig,
}

/// Initial events of a session: entities with their seed assets, one entity
/// per NPC, and the first chapter's intro beat.
pub fn seed_session(gateway: &Gateway, game: &GameDefinition, writer: &mut SessionWriter) -> Result<(), EngineError> {
    for seed in &game.initial_entities {
        writer.upsert_entity(EntityMeta {
            entity_id: seed.entity_id.clone(),
            kind: seed.kind,
            name: seed.name.clone(),
            description: seed.description.clone(),
            attributes: seed.attributes.clone(),
            alive: true,
        })?;
        for asset in &seed.seed_assets {
            writer.add_asset(&seed.entity_id, asset.modality, asset.descriptor.clone())?;
        }
    }
    for npc in game.npcs() {
        if writer.snapshot().entities.contains_key(&npc.character_id) {
            continue;
        }
        writer.upsert_entity(EntityMeta {
            entity_id: npc.character_id.clone(),
            kind: crate::game_schema::EntityKind::Npc,
            name: npc.name.clone(),
            description: npc.persona.clone(),
            attributes: BTreeMap::new(),
            alive: true,
        })?;
    }
    narrative::generate_beat(gateway, game, writer, BeatTrigger::ChapterStart, None, &[])?;
    Ok(())
}

/// The turn pipeline. Writes only into `writer`; the caller commits.
pub fn play_round(ctx: &RoundContext<'_>, writer: &mut SessionWriter, utterance: &str) -> Result<RoundResult, EngineError> {
    let game = ctx.game;
    let session_id = writer.state().session_id.clone();
    let mut warnings = Vec::new();
    writer.emit(EventPayload::PlayerAction { utterance: utterance.to_string() })?;

    // NPC agents.
    let order = roleplay::npc_turn_order(game, writer.snapshot(), utterance, ctx.config.npcs_per_round);
    let earliest = order
        .iter()
        .map(|id| writer.snapshot().npc_marks.get(id).map_or(0, |m| m.last_action_seq))
        .min()
        .unwrap_or(0);
    let committed = ctx.bus.events_after(&session_id, earliest).unwrap_or_default();
    let mut hints = Vec::new();
    let mut interactions: Vec<(String, String)> = Vec::new();
    for npc_id in &order {
        let npc = game.character(npc_id).expect("turn order yields known npcs");
        let seen: Vec<BusEvent> = committed.iter().chain(writer.events()).cloned().collect();
        let window = roleplay::perception_window(writer.snapshot(), npc_id, &seen);
        let mut percept = roleplay::perceive(game, writer.snapshot(), npc_id, window)?;
        let scored = retrieve_fragments(writer.snapshot(), npc_id, utterance, ctx.config.memory_k.max(1), ctx.config.retrieval)?;
        let fragments: Vec<_> = scored.iter().map(|s| s.fragment).collect();
        let prompt = narrative::assemble_npc_prompt(game, npc, writer.snapshot(), &fragments, ctx.config.beat_window);
        percept.narrative_context_version = prompt.version;
        let thought = roleplay::think(ctx.gateway, game, &percept, &prompt, &fragments)?;
        warnings.extend(thought.warnings.iter().map(|w| format!("{npc_id}: {w}")));
        for element in &thought.plan.elements {
            if let ActionElement::Physical { verb, target: Some(t), .. } = element {
                if let Some(e) = writer.snapshot().find_entity(t) {
                    interactions.push((e.entity_id.clone(), format!("{verb} by {}", npc.name)));
                }
            }
        }
        let acted = roleplay::act(writer, &thought.plan, &prompt.mark())?;
        hints.extend(acted.hints);
    }

    // Status.
    let transcript = roleplay::transcript_lines(game, writer.events());
    let pre_assessment = writer.state().clone();
    let assessment = status_manager::apply_round(ctx.gateway, game, writer, &transcript, &hints, Some(ctx.guidance))?;
    warnings.extend(assessment.warnings.iter().cloned());
    let light_after = writer.state().clone();
    let check = status_manager::check_goals(writer.state(), game);
    let progression = status_manager::advance(ctx.gateway, game, writer, &check, &transcript)?;

    // Narrative.
    if progression.ending.is_none()
        && progression.chapter_advanced.is_none()
        && narrative::stall_beat_due(writer.state(), ctx.config.stall_window)
    {
        narrative::generate_beat(ctx.gateway, game, writer, BeatTrigger::Stall, None, &transcript)?;
    }

    // Rendering.
    let summary = rendering::summarize_round(ctx.gateway, game, writer.snapshot(), &transcript, utterance)?;
    rendering::record_interactions(writer, &interactions)?;
    let interacted: Vec<String> = interactions.iter().map(|(id, _)| id.clone()).collect();
    let resolved = rendering::resolve_entities(&summary, writer.snapshot(), &interacted);
    let scene = rendering::compose_scene(&summary, &resolved, writer.snapshot());
    rendering::update_assets(writer, &resolved, &scene, &ctx.config.modalities)?;

    // Shadow assessment, then the ending if one is due.
    let reports = status_manager::sample_assessment(
        ctx.gateway,
        game,
        &pre_assessment,
        &light_after,
        &assessment.prompt,
        writer.state().turn,
        ctx.config.sampling_rate,
    )?;
    for report in reports {
        writer.emit(EventPayload::StateUpdated(crate::events::StateUpdate::AssessmentReport(report)))?;
    }
    if let Some(ending) = &progression.ending {
        status_manager::end_session(writer, ending.clone())?;
    }

    let events = writer.events().to_vec();
    Ok(RoundResult {
        session_id,
        turn: writer.state().turn,
        npc_actions: events
            .iter()
            .filter(|e| matches!(&e.payload, EventPayload::NpcAction(a) if !matches!(a, NpcAction::Memory { .. })))
            .cloned()
            .collect(),
        state_delta: assessment.delta.changes,
        new_beats: events
            .iter()
            .filter_map(|e| match &e.payload {
                EventPayload::NarrativeInjected(b) => Some(b.clone()),
                _ => None,
            })
            .collect(),
        scene,
        goal_events: events
            .iter()
            .filter(|e| {
                matches!(
                    e.payload,
                    EventPayload::GoalAchieved { .. } | EventPayload::ChapterAdvanced { .. } | EventPayload::SessionEnded { .. }
                )
            })
            .cloned()
            .collect(),
        ended: writer.state().ended,
        ending_summary: writer.state().ending_summary.clone(),
        events,
        warnings,
    })
}

/// Asset events of a log, for clients that only track media.
pub fn asset_events(events: &[BusEvent]) -> impl Iterator<Item = &AssetUpdate> {
    events.iter().filter_map(|e| match &e.payload {
        EventPayload::AssetUpdated(u) => Some(u),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::StateUpdate;
    use crate::fixtures::{black_forest, golden_gateway, GOLDEN_ENDING, GOLDEN_STALL_ROUND, GOLDEN_UTTERANCES, GOLDEN_WOUND_ROUND};
    use crate::game_schema::AnchorValue;
    use crate::llm::{FaultInjectingBackend, FaultKind, FaultRule, ScriptedBackend};
    use crate::persistence::{FileStore, MemoryStore};

    fn golden_engine() -> Engine {
        let engine = Engine::in_memory(golden_gateway().0);
        engine.register_game(black_forest()).unwrap();
        engine
    }

    #[test]
    fn golden_playthrough() {
        let engine = golden_engine();
        let session = engine.start_session("black_forest").unwrap();
        assert_eq!(session.record.session_id, "sess-1");
        assert_eq!(session.beats.len(), 1);
        assert_eq!(session.beats[0].kind, narrative::BeatKind::ChapterIntro);

        let mut stall_rounds = Vec::new();
        let mut last = None;
        for (i, u) in GOLDEN_UTTERANCES.iter().enumerate() {
            let round = i as u64 + 1;
            let r = engine.run_round("sess-1", u).unwrap();
            assert_eq!(r.turn, round);
            assert_eq!(r.npc_actions.iter().filter(|e| matches!(e.payload, EventPayload::NpcAction(NpcAction::Dialogue { .. }))).count(), 2);
            if round == GOLDEN_WOUND_ROUND {
                assert_eq!(r.state_delta.len(), 1);
                assert_eq!(r.state_delta[0].new, AnchorValue::Number(7.0));
            }
            if r.new_beats.iter().any(|b| b.trigger == BeatTrigger::Stall) {
                stall_rounds.push(round);
            }
            assert_eq!(r.ended, round == 12);
            last = Some(r);
        }
        assert_eq!(stall_rounds, vec![GOLDEN_STALL_ROUND]);
        let last = last.unwrap();
        let summary = last.ending_summary.unwrap();
        assert!(summary.starts_with(GOLDEN_ENDING));
        assert!(summary.contains("adventurer_health=7"));
        assert!(matches!(last.events.last().unwrap().payload, EventPayload::SessionEnded { reason: EndReason::Completed, .. }));

        let view = engine.session_state("sess-1").unwrap();
        assert_eq!(view.record.round_count, 12);
        assert!(view.record.ended_at.is_some());
        assert_eq!(view.reports.len(), 1);
        assert!(view.reports[0].agree);
        assert!(matches!(engine.run_round("sess-1", "again"), Err(EngineError::SessionClosed(_))));

        // The log alone reproduces the live snapshot.
        let log = engine.bus().log("sess-1").unwrap();
        let replayed = SessionSnapshot::new("sess-1", &black_forest()).replay(&log).unwrap();
        assert_eq!(replayed.canonical_json(), engine.slot("sess-1").unwrap().live.read().unwrap().snapshot.canonical_json());
    }

    #[test]
    fn fatal_fault_leaves_session_untouched() {
        // Round one makes four light calls: two NPC turns, assessment, summary.
        for n in 1..=4 {
            let (_, light, sota) = golden_gateway();
            let faulty = Arc::new(FaultInjectingBackend::new(light, FaultRule::NthCall(n), FaultKind::Fatal));
            let engine = Engine::in_memory(Gateway::two_tier(faulty, sota));
            engine.register_game(black_forest()).unwrap();
            engine.start_session("black_forest").unwrap();
            let before = engine.session_state("sess-1").unwrap();
            let err = engine.run_round("sess-1", GOLDEN_UTTERANCES[0]).unwrap_err();
            assert!(matches!(err, EngineError::Backend(_)), "call {n}: {err}");
            assert_eq!(engine.session_state("sess-1").unwrap(), before);
            assert_eq!(engine.bus().last_seq("sess-1").unwrap(), before.last_seq);
        }
    }

    #[test]
    fn unavailable_backend_aborts_round_and_session_recovers() {
        let (_, light, sota) = golden_gateway();
        let down = Arc::new(FaultInjectingBackend::new(light, FaultRule::NthCall(3), FaultKind::Unavailable));
        let engine = Engine::in_memory(Gateway::two_tier(down, sota));
        engine.register_game(black_forest()).unwrap();
        let before = engine.start_session("black_forest").unwrap();
        let err = engine.run_round("sess-1", "hello").unwrap_err();
        assert!(matches!(err, EngineError::Backend(LlmError::BackendUnavailable { .. })));
        assert_eq!(engine.session_state("sess-1").unwrap(), before);
        let r = engine.run_round("sess-1", "hello again").unwrap();
        assert_eq!(r.turn, 1);
    }

    #[test]
    fn summary_outage_degrades_to_untitled_scene() {
        let (_, light, sota) = golden_gateway();
        let down = Arc::new(FaultInjectingBackend::new(light, FaultRule::Role(crate::llm::RoleTag::Summarize), FaultKind::Unavailable));
        let engine = Engine::in_memory(Gateway::two_tier(down, sota));
        engine.register_game(black_forest()).unwrap();
        engine.start_session("black_forest").unwrap();
        let r = engine.run_round("sess-1", "I wave at the guard").unwrap();
        assert!(r.scene.global_prompt.starts_with("untitled"));
    }

    #[test]
    fn concurrent_round_is_rejected() {
        let engine = golden_engine();
        engine.start_session("black_forest").unwrap();
        let slot = engine.slot("sess-1").unwrap();
        let _held = slot.round.lock().unwrap();
        assert!(matches!(engine.run_round("sess-1", "hi"), Err(EngineError::Busy(_))));
    }

    #[test]
    fn empty_utterance_and_unknown_ids() {
        let engine = golden_engine();
        assert!(matches!(engine.start_session("nope"), Err(EngineError::UnknownGame(_))));
        engine.start_session("black_forest").unwrap();
        assert!(matches!(engine.run_round("sess-1", "   "), Err(EngineError::EmptyUtterance)));
        assert!(matches!(engine.run_round("sess-9", "hi"), Err(EngineError::UnknownSession(_))));
    }

    #[test]
    fn exit_and_idle_expiry() {
        let engine = golden_engine();
        engine.start_session("black_forest").unwrap();
        engine.start_session("black_forest").unwrap();
        let view = engine.end_session("sess-1").unwrap();
        assert!(view.state.ended);
        assert_eq!(engine.end_session("sess-1").unwrap().last_seq, view.last_seq);
        assert_eq!(engine.expire_idle(Duration::ZERO), vec!["sess-2".to_string()]);
        let log = engine.bus().log("sess-2").unwrap();
        assert!(matches!(log.last().unwrap().payload, EventPayload::SessionEnded { reason: EndReason::IdleTimeout, .. }));
    }

    #[test]
    fn file_store_restores_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        let engine = Engine::new(Arc::new(golden_gateway().0), store.clone(), EngineConfig::default()).unwrap();
        engine.register_game(black_forest()).unwrap();
        engine.start_session("black_forest").unwrap();
        for u in &GOLDEN_UTTERANCES[..4] {
            engine.run_round("sess-1", u).unwrap();
        }
        let before = engine.session_state("sess-1").unwrap();
        drop(engine);

        let reopened = Engine::new(Arc::new(golden_gateway().0), Arc::new(FileStore::open(dir.path()).unwrap()), EngineConfig::default()).unwrap();
        assert_eq!(reopened.session_state("sess-1").unwrap(), before);
        assert_eq!(reopened.start_session("black_forest").unwrap().record.session_id, "sess-2");
        assert_eq!(reopened.bus().last_seq("sess-1").unwrap(), before.last_seq);
    }

    #[test]
    fn invalid_game_is_rejected() {
        let engine = golden_engine();
        let mut bad = black_forest();
        bad.chapters.clear();
        assert!(matches!(engine.register_game(bad), Err(EngineError::InvalidGame(_))));
    }

    #[test]
    fn completed_copilot_job_registers_a_game() {
        let backend = Arc::new(ScriptedBackend::new("copilot", crate::fixtures::copilot_script(0)).unwrap());
        let engine = Engine::new(Arc::new(Gateway::single(backend)), Arc::new(MemoryStore::new()), EngineConfig::default()).unwrap();
        let job = engine.create_job("robots rule the world", None).unwrap();
        assert_eq!(job.status, JobStatus::Complete);
        let id = job.final_def.as_ref().unwrap().game_id.clone();
        assert!(engine.games().iter().any(|g| g.game_id == id));
        assert_eq!(engine.job(&job.job_id).unwrap(), job);
        engine.start_session(&id).unwrap();
    }

    #[test]
    fn assessment_reports_are_events() {
        let engine = golden_engine();
        engine.start_session("black_forest").unwrap();
        for u in &GOLDEN_UTTERANCES[..10] {
            engine.run_round("sess-1", u).unwrap();
        }
        let reports = engine
            .bus()
            .log("sess-1")
            .unwrap()
            .into_iter()
            .filter(|e| matches!(e.payload, EventPayload::StateUpdated(StateUpdate::AssessmentReport(_))))
            .count();
        assert_eq!(reports, 1);
    }
}

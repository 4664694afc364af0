//! Acceptance suite. Prints one line per criterion and exits nonzero when any
//! fails. Runs headless against scripted backends.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use zagii_core::analytics::{analytics_summary, OUTLIER_GAME_ID};
use zagii_core::copilot::{decompose_goal, expand_seed, JobStatus};
use zagii_core::engine::{Engine, EngineConfig, EngineError};
use zagii_core::events::{AnchorChange, BusEvent, EventPayload, NpcAction, StateUpdate, Topic};
use zagii_core::fixtures::{
    black_forest, copilot_script, golden_light_script, golden_sota_script, GOLDEN_UTTERANCES, TABLE_ONE_SUBGOAL_ROWS,
};
use zagii_core::game_schema::{
    validate_game, AnchorDecl, AnchorKind, AnchorValue, EntityKind, GameDefinition, Goal, LoreDoc, Modality, OnComplete, Operand,
    Predicate, PredicateOp, Subgoal,
};
use zagii_core::llm::{FaultInjectingBackend, FaultKind, FaultRule, Gateway, RoleTag, ScriptEntry, ScriptedBackend};
use zagii_core::message_bus::MessageBus;
use zagii_core::narrative::{retrieve_materials, static_section, LORE_CHUNK_STRIDE, LORE_CHUNK_WORDS, SECTION_DELIMITER};
use zagii_core::persistence::{FileStore, MemoryStore, Store};
use zagii_core::rendering::{compose_scene, record_interactions, resolve_entities, update_assets, PlotSummary};
use zagii_core::session_store::{retrieve_fragments, Entity, EntityMeta, RetrievalWeights, SessionSnapshot, SessionWriter};
use zagii_core::status_manager::{advance, check_goals, eval_predicate, ChangeSource};
use zagii_core::text::keywords;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn engine_with(gateway: Gateway, sampling_rate: f64) -> Engine {
    let config = EngineConfig { sampling_rate, ..EngineConfig::default() };
    let engine = Engine::new(Arc::new(gateway), Arc::new(MemoryStore::new()), config).unwrap();
    engine.register_game(black_forest()).unwrap();
    engine
}

fn golden_backends() -> (Arc<ScriptedBackend>, Arc<ScriptedBackend>) {
    (
        Arc::new(ScriptedBackend::new("light", golden_light_script()).unwrap()),
        Arc::new(ScriptedBackend::new("sota", golden_sota_script()).unwrap()),
    )
}

fn play_golden(sampling_rate: f64) -> Result<Engine, EngineError> {
    let (light, sota) = golden_backends();
    let engine = engine_with(Gateway::two_tier(light, sota), sampling_rate);
    engine.start_session("black_forest")?;
    for u in GOLDEN_UTTERANCES {
        engine.run_round("sess-1", u)?;
    }
    Ok(engine)
}

/// A session that never ends; health drifts every third round.
fn long_gateway() -> (Gateway, Arc<ScriptedBackend>) {
    let mut entries = vec![
        ScriptEntry::fallback("DIALOGUE|self|Stay sharp.\nMEMORY|0.6|We are still in the forest.").for_role(RoleTag::Thinking),
        ScriptEntry::fallback("BEAT|task||Scout the lair before nightfall.").for_role(RoleTag::Narrative),
        ScriptEntry::fallback("THEME|Deep forest\nNARRATIVE|The party waits among the pines.").for_role(RoleTag::Summarize),
        ScriptEntry::fallback("NONE").for_role(RoleTag::GoalCheck),
    ];
    for round in 1..=20 {
        let line = if round % 3 == 0 { format!("SET|adventurer_health|{}|scratches", 10 - round / 3) } else { "NONE".into() };
        entries.push(ScriptEntry::ordered(line).for_role(RoleTag::GoalCheck));
    }
    let light = Arc::new(ScriptedBackend::new("light", entries).unwrap());
    (Gateway::single(light.clone()), light)
}

// ---------------------------------------------------------------------------

fn golden_playthrough() -> Outcome {
    let started = Instant::now();
    let a = play_golden(0.1).map_err(|e| e.to_string())?;
    let b = play_golden(0.1).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let log = a.bus().log("sess-1").unwrap();
    let satisfied: BTreeSet<String> = log
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::StateUpdated(StateUpdate::SubgoalSatisfied { subgoal_id, .. }) => Some(subgoal_id.clone()),
            _ => None,
        })
        .collect();
    let expected: BTreeSet<String> = black_forest().chapters[0].goals[0].subgoals.iter().map(|s| s.subgoal_id.clone()).collect();
    ensure!(satisfied == expected, "satisfied subgoals {satisfied:?}");
    ensure!(
        matches!(log.last().map(|e| &e.payload), Some(EventPayload::SessionEnded { .. })),
        "game did not end"
    );
    let lines = |e: &Engine| e.bus().log("sess-1").unwrap().iter().map(BusEvent::to_line).collect::<Vec<_>>().join("\n");
    ensure!(lines(&a) == lines(&b), "event logs differ between runs");
    ensure!(elapsed < Duration::from_secs(5), "two runs took {elapsed:?}");
    Ok(format!("{} events, 3/3 subgoals, logs identical", log.len()))
}

// ---------------------------------------------------------------------------

fn predicate_oracle(value: &AnchorValue, op: PredicateOp, operand: &Operand, kind: AnchorKind) -> Option<bool> {
    let same = |a: &str, b: &str| match kind {
        AnchorKind::FreeText => a.trim().to_lowercase() == b.trim().to_lowercase(),
        _ => a == b,
    };
    match (kind, value, operand) {
        (AnchorKind::Number, AnchorValue::Number(v), Operand::Value(AnchorValue::Number(x))) => {
            let sign = if v > x { 1 } else if v < x { -1 } else { 0 };
            match op {
                PredicateOp::Gt => Some(sign == 1),
                PredicateOp::Ge => Some(sign >= 0),
                PredicateOp::Lt => Some(sign == -1),
                PredicateOp::Le => Some(sign <= 0),
                PredicateOp::Eq => Some(sign == 0),
                PredicateOp::Ne => Some(sign != 0),
                _ => None,
            }
        }
        (AnchorKind::Number, _, _) => None,
        (_, AnchorValue::Text(v), Operand::Value(AnchorValue::Text(x))) => match op {
            PredicateOp::Eq => Some(same(v, x)),
            PredicateOp::Ne => Some(!same(v, x)),
            _ => None,
        },
        (_, AnchorValue::Text(v), Operand::Set(items)) => {
            let hit = items.iter().any(|x| same(v, x));
            match op {
                PredicateOp::InSet => Some(hit),
                PredicateOp::NotInSet if kind != AnchorKind::FreeText => Some(!hit),
                _ => None,
            }
        }
        _ => None,
    }
}

const WORDS: [&str; 6] = ["Forest", "forest ", "Lair", " river", "Out", "lair"];

fn predicate_oracle_agreement() -> Outcome {
    let started = Instant::now();
    let kind = prop_oneof![Just(AnchorKind::Number), Just(AnchorKind::TextEnum), Just(AnchorKind::Location), Just(AnchorKind::FreeText)];
    let value = || {
        prop_oneof![
            (-6i32..6).prop_map(|n| AnchorValue::Number(n as f64 / 2.0)),
            proptest::sample::select(&WORDS[..]).prop_map(|w| AnchorValue::Text(w.to_string())),
        ]
    };
    let operand = prop_oneof![
        3 => value().prop_map(Operand::Value),
        1 => proptest::collection::vec(proptest::sample::select(&WORDS[..]).prop_map(String::from), 1..4).prop_map(Operand::Set),
    ];
    let strategy = (kind, value(), proptest::sample::select(&PredicateOp::ALL[..]), operand);
    let checked = std::cell::Cell::new(0);
    runner(1000)
        .run(&strategy, |(kind, value, op, operand)| {
            let pred = Predicate { op, operand: operand.clone() };
            prop_assert_eq!(eval_predicate(&value, &pred, kind).ok(), predicate_oracle(&value, op, &operand, kind));
            checked.set(checked.get() + 1);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{}/1000 agree", checked.get()))
}

// ---------------------------------------------------------------------------

fn goal_game(n: usize) -> GameDefinition {
    let mut game = black_forest();
    game.anchors = (0..n)
        .map(|i| AnchorDecl {
            anchor_id: format!("a{i}"),
            name: format!("anchor {i}"),
            value_type: AnchorKind::Number,
            initial_value: AnchorValue::Number(0.0),
            allowed_values: None,
            min: None,
            max: None,
        })
        .collect();
    game.chapters[0].goals = vec![Goal {
        goal_id: "g".into(),
        creator_text: "every anchor positive".into(),
        subgoals: (0..n)
            .map(|i| Subgoal {
                subgoal_id: format!("s{i}"),
                description: format!("anchor {i} positive"),
                anchor_id: format!("a{i}"),
                predicate: Predicate { op: PredicateOp::Gt, operand: Operand::Value(AnchorValue::Number(0.0)) },
            })
            .collect(),
        on_complete: OnComplete::EndGame,
        visible_to_npcs: true,
    }];
    game
}

fn set_anchor(writer: &mut SessionWriter, anchor: &str, to: f64) {
    let old = writer.state().anchor_values[anchor].clone();
    if old != AnchorValue::Number(to) {
        let change = AnchorChange { anchor_id: anchor.into(), old, new: AnchorValue::Number(to), rationale: String::new(), source: ChangeSource::System };
        writer.emit(EventPayload::StateUpdated(StateUpdate::Anchor(change))).unwrap();
    }
}

fn goal_semantics() -> Outcome {
    runner(1000)
        .run(&proptest::collection::vec(any::<bool>(), 1..7), |status| {
            let game = goal_game(status.len());
            let mut w = SessionWriter::new(SessionSnapshot::new("s", &game));
            for (i, on) in status.iter().enumerate() {
                set_anchor(&mut w, &format!("a{i}"), if *on { 1.0 } else { -1.0 });
            }
            prop_assert_eq!(check_goals(w.state(), &game).goal("g"), Some(status.iter().all(|s| *s)));
            Ok(())
        })
        .map_err(|e| format!("AND semantics: {e}"))?;

    let steps = proptest::collection::vec(proptest::collection::vec(-2i32..3, 4), 1..12);
    runner(300)
        .run(&steps, |steps| {
            let game = goal_game(4);
            let gateway = Gateway::new();
            let mut w = SessionWriter::new(SessionSnapshot::new("s", &game));
            let mut seen: BTreeSet<String> = BTreeSet::new();
            let mut goal_seen = false;
            for step in steps {
                w.emit(EventPayload::PlayerAction { utterance: "x".into() }).unwrap();
                for (i, v) in step.iter().enumerate() {
                    set_anchor(&mut w, &format!("a{i}"), *v as f64);
                }
                let check = check_goals(w.state(), &game);
                for v in &check.subgoals {
                    prop_assert!(v.satisfied || !seen.contains(&v.subgoal_id));
                }
                let achieved = check.goal("g").unwrap();
                prop_assert!(achieved || !goal_seen);
                goal_seen |= achieved;
                let progression = advance(&gateway, &game, &mut w, &check, &[]).unwrap();
                seen.extend(check.subgoals.iter().filter(|v| v.satisfied).map(|v| v.subgoal_id.clone()));
                if progression.ending.is_some() {
                    break;
                }
            }
            Ok(())
        })
        .map_err(|e| format!("latching: {e}"))?;
    Ok("1000 AND cases, 300 latching sequences".into())
}

// ---------------------------------------------------------------------------

const VOCAB: [&str; 12] = ["dragon", "river", "sword", "princess", "stone", "fog", "wing", "lair", "guard", "path", "fire", "king"];

fn sentence(idx: &[usize]) -> String {
    idx.iter().map(|i| VOCAB[i % VOCAB.len()]).collect::<Vec<_>>().join(" ")
}

fn select_top<T: Clone>(items: &[T], k: usize, better: impl Fn(&T, &T) -> bool) -> Vec<T> {
    let mut left: Vec<T> = items.to_vec();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if better(&left[i], &left[best]) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn retrieval_equivalence() -> Outcome {
    let frags = proptest::collection::vec((proptest::collection::vec(0usize..12, 1..6), 0u8..5, 0u8..3, any::<bool>()), 0..200);
    let query = || proptest::collection::vec(0usize..12, 0..5);
    runner(100)
        .run(&(frags, query(), 1usize..12), |(frags, query, k)| {
            let game = black_forest();
            let mut w = SessionWriter::new(SessionSnapshot::new("s", &game));
            for (words, salience, wait, mine) in &frags {
                for _ in 0..*wait {
                    w.emit(EventPayload::PlayerAction { utterance: "wait".into() }).unwrap();
                }
                w.add_fragment(if *mine { "guard" } else { "princess" }, &sentence(words), *salience as f64 / 4.0).unwrap();
            }
            let query = sentence(&query);
            let snapshot = w.snapshot();
            let weights = RetrievalWeights::default();
            let got: Vec<String> = retrieve_fragments(snapshot, "guard", &query, k, weights)
                .unwrap()
                .iter()
                .map(|s| s.fragment.fragment_id.clone())
                .collect();
            let q = keywords(&query);
            let now = snapshot.state.turn;
            let rows: Vec<(String, u64, f64)> = snapshot
                .fragments
                .iter()
                .filter(|f| f.character_id == "guard")
                .map(|f| {
                    let relevance = f.keywords.iter().filter(|w| q.contains(*w)).count() as f64 / q.len().max(1) as f64;
                    let recency = 1.0 / (1.0 + (now - f.turn_created) as f64);
                    let score = weights.relevance * relevance + weights.recency * recency + weights.salience * f.salience;
                    (f.fragment_id.clone(), f.turn_created, score)
                })
                .collect();
            let want: Vec<String> = select_top(&rows, k, |a, b| a.2 > b.2 || (a.2 == b.2 && (a.1 > b.1 || (a.1 == b.1 && a.0 < b.0))))
                .into_iter()
                .map(|r| r.0)
                .collect();
            prop_assert_eq!(got, want);
            Ok(())
        })
        .map_err(|e| format!("fragments: {e}"))?;

    let docs = proptest::collection::vec(proptest::collection::vec(0usize..12, 1..300), 0..50);
    runner(100)
        .run(&(docs, query(), 1usize..10), |(docs, query, k)| {
            let mut game = black_forest();
            game.lore = docs
                .iter()
                .enumerate()
                .map(|(i, words)| LoreDoc { doc_id: format!("d{i}"), title: format!("Doc {i}"), body: sentence(words), tags: Vec::new() })
                .collect();
            let query = sentence(&query);
            let got: Vec<(String, usize, String)> =
                retrieve_materials(&game, &query, k).into_iter().map(|m| (m.doc_id, m.chunk_index, m.snippet)).collect();
            let q = keywords(&query);
            let mut chunks: Vec<(usize, usize, String, f64)> = Vec::new();
            for (d, words) in docs.iter().enumerate() {
                let words: Vec<&str> = words.iter().map(|i| VOCAB[i % VOCAB.len()]).collect();
                let (mut start, mut c) = (0, 0);
                loop {
                    let end = (start + LORE_CHUNK_WORDS).min(words.len());
                    let snippet = words[start..end].join(" ");
                    let hits = keywords(&snippet).intersection(&q).count();
                    chunks.push((d, c, snippet, hits as f64 / q.len().max(1) as f64));
                    if end == words.len() {
                        break;
                    }
                    start += LORE_CHUNK_STRIDE;
                    c += 1;
                }
            }
            let want: Vec<(String, usize, String)> = select_top(&chunks, k, |a, b| match a.3.partial_cmp(&b.3).unwrap() {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => (a.0, a.1) < (b.0, b.1),
            })
            .into_iter()
            .map(|(d, c, s, _)| (format!("d{d}"), c, s))
            .collect();
            prop_assert_eq!(got, want);
            Ok(())
        })
        .map_err(|e| format!("materials: {e}"))?;
    Ok("100 fragment corpora, 100 lore corpora".into())
}

// ---------------------------------------------------------------------------

fn replays(engine: &Engine, session_id: &str) -> Result<(), String> {
    let log = engine.bus().log(session_id).map_err(|e| e.to_string())?;
    let live = engine.snapshot(session_id).map_err(|e| e.to_string())?;
    let game_id = engine.session_state(session_id).map_err(|e| e.to_string())?.record.game_id;
    let folded = SessionSnapshot::new(session_id, &engine.game(&game_id).unwrap()).replay(&log).map_err(|e| e.to_string())?;
    ensure!(folded.canonical_json() == live.canonical_json(), "{session_id}: fold differs from live snapshot");
    Ok(())
}

fn event_sourcing_replay() -> Outcome {
    let mut sessions = 0;
    let golden = play_golden(0.5).map_err(|e| e.to_string())?;
    replays(&golden, "sess-1")?;
    sessions += 1;

    let (gateway, _) = long_gateway();
    let engine = engine_with(gateway, 0.5);
    let picks = proptest::collection::vec(0usize..12, 1..16);
    let mut rng = runner(1);
    for i in 0..24 {
        let rounds = picks.new_tree(&mut rng).unwrap().current();
        let id = engine.start_session("black_forest").map_err(|e| e.to_string())?.record.session_id;
        for p in rounds {
            engine.run_round(&id, GOLDEN_UTTERANCES[p]).map_err(|e| e.to_string())?;
        }
        if i % 3 == 0 {
            engine.end_session(&id).map_err(|e| e.to_string())?;
        }
        replays(&engine, &id)?;
        sessions += 1;
    }

    // Sessions restored from disk fold the same way.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    {
        let (light, sota) = golden_backends();
        let store = Arc::new(FileStore::open(dir.path()).map_err(|e| e.to_string())?);
        let engine = Engine::new(Arc::new(Gateway::two_tier(light, sota)), store, EngineConfig::default()).map_err(|e| e.to_string())?;
        engine.register_game(black_forest()).map_err(|e| e.to_string())?;
        engine.start_session("black_forest").map_err(|e| e.to_string())?;
        for u in &GOLDEN_UTTERANCES[..6] {
            engine.run_round("sess-1", u).map_err(|e| e.to_string())?;
        }
    }
    let (light, sota) = golden_backends();
    let store = Arc::new(FileStore::open(dir.path()).map_err(|e| e.to_string())?);
    let restored = Engine::new(Arc::new(Gateway::two_tier(light, sota)), store, EngineConfig::default()).map_err(|e| e.to_string())?;
    replays(&restored, "sess-1")?;
    sessions += 1;
    Ok(format!("{sessions} sessions fold to their live snapshots"))
}

// ---------------------------------------------------------------------------

fn bus_session(bus: Arc<MessageBus>, session: String, per_producer: usize) -> Result<(), String> {
    let total = per_producer * 2;
    let subs: Vec<_> = (0..2).map(|_| bus.subscribe(&session, None).unwrap()).collect();
    let start = Arc::new(Barrier::new(2));
    let readers: Vec<_> = subs
        .into_iter()
        .map(|mut sub| {
            thread::spawn(move || {
                let mut seen = Vec::with_capacity(total);
                while seen.len() < total {
                    match sub.recv_timeout(Duration::from_secs(10)) {
                        Some(e) => seen.push(e),
                        None => break,
                    }
                }
                let extra = sub.recv_timeout(Duration::from_millis(20)).is_some();
                (seen, extra)
            })
        })
        .collect();
    let writers: Vec<_> = (0..2)
        .map(|p| {
            let (bus, session, start) = (bus.clone(), session.clone(), start.clone());
            thread::spawn(move || {
                start.wait();
                for i in 0..per_producer {
                    let utterance = format!("{session}/{p}/{i}");
                    bus.publish(&session, i as u64, EventPayload::PlayerAction { utterance }).unwrap();
                }
            })
        })
        .collect();
    for w in writers {
        w.join().map_err(|_| "producer panicked")?;
    }
    for r in readers {
        let (seen, extra) = r.join().map_err(|_| "subscriber panicked")?;
        ensure!(!extra && seen.len() == total, "{session}: {} events delivered, extra={extra}", seen.len());
        ensure!(seen.windows(2).all(|p| p[0].seq < p[1].seq), "{session}: seq not increasing");
        let mut next: BTreeMap<String, usize> = BTreeMap::new();
        for e in &seen {
            let EventPayload::PlayerAction { utterance } = &e.payload else { return Err("unexpected payload".into()) };
            let mut parts = utterance.split('/');
            let (origin, producer, i) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            ensure!(origin == session && e.session_id == session, "{utterance} leaked into {session}");
            let expected = next.entry(producer.to_string()).or_default();
            ensure!(i.parse::<usize>().unwrap() == *expected, "{session}: duplicate or missing event from producer {producer}");
            *expected += 1;
        }
    }
    Ok(())
}

fn bus_ordering() -> Outcome {
    let bus = Arc::new(MessageBus::new());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let session = format!("sess-{i}");
            bus.open_session(&session).unwrap();
            let bus = bus.clone();
            let per_producer = if i == 0 { 5_000 } else { 1_000 };
            thread::spawn(move || bus_session(bus, session, per_producer))
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "session thread panicked".to_string())??;
    }
    Ok("10000 events x 2 subscribers in the main session, 8 sessions isolated".into())
}

// ---------------------------------------------------------------------------

fn progress_events(log: &[BusEvent]) -> Vec<EventPayload> {
    log.iter()
        .filter(|e| match &e.payload {
            EventPayload::StateUpdated(StateUpdate::AssessmentReport(_)) => false,
            EventPayload::StateUpdated(_) => true,
            p => matches!(p.topic(), Topic::GoalAchieved | Topic::ChapterAdvanced | Topic::SessionEnded),
        })
        .map(|e| e.payload.clone())
        .collect()
}

fn shadow_safety() -> Outcome {
    let all = play_golden(1.0).map_err(|e| e.to_string())?.bus().log("sess-1").unwrap();
    let none = play_golden(0.0).map_err(|e| e.to_string())?.bus().log("sess-1").unwrap();
    ensure!(progress_events(&all) == progress_events(&none), "anchor/goal events differ between rates 1.0 and 0.0");

    let (light, sota) = golden_backends();
    let engine = engine_with(Gateway::two_tier(light, sota), 0.5);
    engine.start_session("black_forest").map_err(|e| e.to_string())?;
    for u in &GOLDEN_UTTERANCES[..10] {
        engine.run_round("sess-1", u).map_err(|e| e.to_string())?;
    }
    let reports = engine.session_state("sess-1").unwrap().reports.len();
    ensure!(reports == 5, "rate 0.5 over 10 rounds gave {reports} reports");
    Ok(format!("{} progress events identical; 5 reports at rate 0.5", progress_events(&all).len()))
}

// ---------------------------------------------------------------------------

fn prompt_structure() -> Outcome {
    let (gateway, light) = long_gateway();
    let engine = engine_with(gateway, 0.0);
    let game = black_forest();
    engine.start_session("black_forest").map_err(|e| e.to_string())?;
    let utterances = ["I talk to the guard", "Princess, any ideas?", "Dragon, show yourself", "I wait"];
    for i in 0..20 {
        engine.run_round("sess-1", utterances[i % utterances.len()]).map_err(|e| e.to_string())?;
    }
    let prompts: Vec<String> = light.received().into_iter().filter(|(r, _)| *r == RoleTag::Thinking).map(|(_, p)| p).collect();
    ensure!(prompts.len() == 40, "{} NPC prompts", prompts.len());
    let mut statics: BTreeMap<String, String> = BTreeMap::new();
    for p in &prompts {
        let parts: Vec<&str> = p.split(SECTION_DELIMITER).collect();
        ensure!(parts.len() == 3, "prompt has {} sections", parts.len());
        ensure!(parts[1].starts_with("# Current tasks\n"), "task section malformed");
        ensure!(parts[2].contains("# World state\n"), "context section malformed");
        let npc = game.npcs().find(|c| parts[0] == static_section(&game, c));
        let Some(npc) = npc else { return Err("static section matches no NPC".into()) };
        let first = statics.entry(npc.character_id.clone()).or_insert_with(|| parts[0].to_string());
        ensure!(first == parts[0], "static section of {} changed", npc.character_id);
    }
    let mut marks: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
    for e in engine.bus().log("sess-1").unwrap() {
        if let EventPayload::NpcAction(NpcAction::Dialogue { actor, prompt, .. }) = e.payload {
            let seq = marks.entry(actor).or_default();
            if seq.last() != Some(&(prompt.version, prompt.digest.clone())) {
                seq.push((prompt.version, prompt.digest));
            }
        }
    }
    let mut bumps = 0;
    for (npc, seq) in &marks {
        ensure!(seq[0].0 == 1, "{npc} starts at version {}", seq[0].0);
        for pair in seq.windows(2) {
            ensure!(pair[0].1 != pair[1].1 && pair[1].0 == pair[0].0 + 1, "{npc}: version moved without content change");
            bumps += 1;
        }
    }
    ensure!(bumps > 0, "no task section ever changed");
    Ok(format!("40 prompts well-formed, {} stable static sections, {bumps} version bumps", statics.len()))
}

// ---------------------------------------------------------------------------

fn seeded_writer(game: &GameDefinition) -> SessionWriter {
    let mut w = SessionWriter::new(SessionSnapshot::new("render", game));
    let metas = game
        .initial_entities
        .iter()
        .map(|s| (s.entity_id.clone(), s.kind, s.name.clone(), s.description.clone(), s.attributes.clone()))
        .chain(game.npcs().map(|c| (c.character_id.clone(), EntityKind::Npc, c.name.clone(), c.persona.clone(), BTreeMap::new())));
    for (entity_id, kind, name, description, attributes) in metas {
        if !w.snapshot().entities.contains_key(&entity_id) {
            w.upsert_entity(EntityMeta { entity_id, kind, name, description, attributes, alive: true }).unwrap();
        }
    }
    w
}

fn rendering_geometry() -> Outcome {
    const MODALITIES: [Modality; 2] = [Modality::Image, Modality::Sound];
    let game = black_forest();
    let mut w = seeded_writer(&game);
    let ids: Vec<String> = w.snapshot().entities.keys().cloned().collect();
    let names: Vec<String> = w.snapshot().entities.values().map(|e| e.name.clone()).collect();
    let picks = || proptest::collection::vec(0usize..16, 0..4);
    let strategy = (picks(), picks(), picks());
    let mut rng = runner(1);
    let (mut regions, mut created_total) = (0, 0);
    for turn in 1..=500u64 {
        let (touched, mentioned, edited) = strategy.new_tree(&mut rng).unwrap().current();
        w.emit(EventPayload::PlayerAction { utterance: format!("round {turn}") }).unwrap();
        for i in edited {
            let mut meta = w.snapshot().entity(&ids[i % ids.len()]).unwrap().meta();
            meta.description.push('.');
            w.upsert_entity(meta).unwrap();
        }
        let touched: Vec<(String, String)> = touched.iter().map(|i| (ids[i % ids.len()].clone(), "pushed".into())).collect();
        record_interactions(&mut w, &touched).unwrap();
        let summary = PlotSummary {
            turn,
            theme: "Black Forest".into(),
            narrative: format!("round {turn}"),
            mentioned_names: mentioned.iter().map(|i| names[i % names.len()].clone()).collect(),
            fallback: false,
        };
        let interacted: Vec<String> = touched.into_iter().map(|(id, _)| id).collect();
        let resolved = resolve_entities(&summary, w.snapshot(), &interacted);
        let scene = compose_scene(&summary, &resolved, w.snapshot());
        for g in &scene.regions {
            let b = g.region;
            ensure!(
                b.x >= 0.0 && b.y >= 0.0 && b.w > 0.0 && b.h > 0.0 && b.x + b.w <= 1.0 + 1e-9 && b.y + b.h <= 1.0 + 1e-9,
                "turn {turn}: region {b:?} leaves the unit square"
            );
        }
        regions += scene.regions.len();
        let before: BTreeMap<String, Entity> = w.snapshot().entities.clone();
        let created = update_assets(&mut w, &resolved, &scene, &MODALITIES).unwrap();
        created_total += created.len();
        for (id, old) in &before {
            let new = &w.snapshot().entities[id];
            if !resolved.iter().any(|r| &r.entity_id == id) {
                ensure!(new.assets == old.assets, "turn {turn}: unresolved entity {id} changed");
                continue;
            }
            for m in MODALITIES {
                let due = old.latest_asset(m).is_none_or(|a| a.derived_from_metadata_version < old.metadata_version);
                let made = created.iter().any(|a| a.modality == m && new.assets.iter().any(|x| x.asset_id == a.asset_id));
                ensure!(due == made, "turn {turn}: {id} {m:?} regenerated={made} but stale={due}");
            }
        }
    }
    Ok(format!("500 rounds, {regions} regions, {created_total} regenerations"))
}

// ---------------------------------------------------------------------------

fn round_atomicity() -> Outcome {
    // Learn which light call belongs to which stage from a clean run.
    let (light, sota) = golden_backends();
    let clean = engine_with(Gateway::two_tier(light.clone(), sota), 0.1);
    clean.start_session("black_forest").map_err(|e| e.to_string())?;
    let mut roles: Vec<Vec<RoleTag>> = Vec::new();
    let mut seen = light.received().len();
    for u in GOLDEN_UTTERANCES {
        clean.run_round("sess-1", u).map_err(|e| e.to_string())?;
        let all = light.received();
        roles.push(all[seen..].iter().map(|(r, _)| *r).collect());
        seen = all.len();
    }

    let mut covered = BTreeSet::new();
    let mut cases = 0;
    for round in [1usize, 4, 10, 12] {
        let before: usize = roles[..round - 1].iter().map(Vec::len).sum();
        let mut faults: Vec<(bool, usize)> = (1..=roles[round - 1].len()).map(|i| (false, before + i)).collect();
        if round == 10 {
            faults.push((true, 2));
        }
        for (on_sota, n) in faults {
            let (light, sota) = golden_backends();
            let rule = FaultRule::NthCall(n);
            let gateway = if on_sota {
                Gateway::two_tier(light, Arc::new(FaultInjectingBackend::new(sota, rule, FaultKind::Fatal)))
            } else {
                Gateway::two_tier(Arc::new(FaultInjectingBackend::new(light, rule, FaultKind::Fatal)), sota)
            };
            let engine = engine_with(gateway, 0.1);
            engine.start_session("black_forest").map_err(|e| e.to_string())?;
            for u in &GOLDEN_UTTERANCES[..round - 1] {
                engine.run_round("sess-1", u).map_err(|e| e.to_string())?;
            }
            let pre = engine.snapshot("sess-1").unwrap().canonical_json();
            let pre_seq = engine.bus().last_seq("sess-1").unwrap();
            ensure!(engine.run_round("sess-1", GOLDEN_UTTERANCES[round - 1]).is_err(), "round {round} call {n}: no failure");
            ensure!(engine.snapshot("sess-1").unwrap().canonical_json() == pre, "round {round} call {n}: snapshot changed");
            ensure!(engine.bus().last_seq("sess-1").unwrap() == pre_seq, "round {round} call {n}: events published");
            covered.insert(if on_sota { RoleTag::GoalCheckSota } else { roles[round - 1][n - before - 1] });
            cases += 1;
        }
    }
    let stages = [RoleTag::Thinking, RoleTag::GoalCheck, RoleTag::Narrative, RoleTag::Summarize, RoleTag::GoalCheckSota];
    ensure!(stages.iter().all(|s| covered.contains(s)), "stages covered: {covered:?}");
    Ok(format!("{cases} injected faults over 5 stages, all rolled back"))
}

// ---------------------------------------------------------------------------

fn desk_scale_analytics() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_zagii"))
        .args(["simulate", "--games", "167", "--sessions", "24894", "--seed", "42", "--outlier-sessions", "35407", "--data-dir"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(output.status.success(), "simulate failed: {}", String::from_utf8_lossy(&output.stderr));
    let records = FileStore::open(dir.path()).map_err(|e| e.to_string())?.records().map_err(|e| e.to_string())?;
    ensure!(records.len() == 24_894 + 35_407, "{} records stored", records.len());

    let summary = analytics_summary(&records, 10, Some(10_000));
    let binned: u64 = summary.round_histogram.iter().map(|b| b.count).sum();
    ensure!(binned == 24_894, "histogram sums to {binned}");
    ensure!(
        summary.excluded_games == vec![(OUTLIER_GAME_ID.to_string(), 35_407)],
        "excluded {:?}",
        summary.excluded_games
    );
    let uniform = 1.0 / summary.game_count as f64;
    let ratio = summary.top_share() / uniform;
    ensure!(ratio.ge(&5.0), "top share is {ratio:.1}x uniform");
    let popular = summary.per_game.values().filter(|n| **n > 100).count();
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{binned} sessions binned, top share {ratio:.1}x uniform, {popular} games over 100 sessions, outlier excluded"))
}

// ---------------------------------------------------------------------------

fn copilot_validity() -> Outcome {
    let mut completed = 0;
    for i in 0..20 {
        let backend = Arc::new(ScriptedBackend::new("copilot", copilot_script(i)).unwrap());
        let job = expand_seed(&Gateway::single(backend), &format!("job-{i}"), &format!("seed {i}"), None).map_err(|e| e.to_string())?;
        if job.status != JobStatus::Complete {
            continue;
        }
        completed += 1;
        let report = validate_game(job.final_def.as_ref().unwrap());
        ensure!(!report.has_errors(), "seed {i} produced an invalid game: {:?}", report.issues);
    }
    ensure!(completed == 20, "{completed}/20 jobs completed");

    let game = black_forest();
    let goal = &game.chapters[0].goals[0];
    let backend = Arc::new(ScriptedBackend::new("copilot", vec![ScriptEntry::ordered(TABLE_ONE_SUBGOAL_ROWS)]).unwrap());
    let d = decompose_goal(&Gateway::single(backend), &goal.creator_text, &game.anchors).map_err(|e| e.to_string())?;
    let row = |s: &Subgoal| format!("{}|{}|{}", s.description, s.anchor_id, s.predicate);
    let got: Vec<String> = d.subgoals.iter().map(row).collect();
    let want: Vec<String> = goal.subgoals.iter().map(row).collect();
    ensure!(got == want, "decomposition rows {got:?}");
    Ok("20/20 definitions valid, 3 decomposition rows exact".into())
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("deterministic golden playthrough", golden_playthrough),
        ("predicate oracle", predicate_oracle_agreement),
        ("goal semantics", goal_semantics),
        ("retrieval equivalence", retrieval_equivalence),
        ("event-sourcing replay", event_sourcing_replay),
        ("bus ordering", bus_ordering),
        ("shadow-safe assessment sampling", shadow_safety),
        ("prompt structure", prompt_structure),
        ("rendering geometry and locality", rendering_geometry),
        ("round atomicity", round_atomicity),
        ("desk-scale analytics", desk_scale_analytics),
        ("copilot validity", copilot_validity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PRIMARY] PASS {name} ({secs:.2}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("[PRIMARY] FAIL {name} ({secs:.2}s): {reason}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Headless terminal play loop.

use std::io::{BufRead, Write};

use zagii_core::engine::{Engine, RoundResult, SessionView};
use zagii_core::events::{EventPayload, NpcAction, StateUpdate};

const HELP: &str = "Type what you do. Commands: /state, /quit";

/// Plays one session of `game_id`, reading utterances line by line. Returns
/// the final session view.
pub fn play(engine: &Engine, game_id: &str, input: impl BufRead, mut out: impl Write) -> anyhow::Result<SessionView> {
    let session = engine.start_session(game_id)?;
    let id = session.record.session_id.clone();
    let title = engine.game(game_id).map(|g| g.title).unwrap_or_default();
    writeln!(out, "== {title} ({id}) ==")?;
    for beat in &session.beats {
        writeln!(out, "[{}] {}", beat.kind.as_str(), beat.text)?;
    }
    writeln!(out, "{HELP}")?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => {
                engine.end_session(&id)?;
                writeln!(out, "You leave the game.")?;
                break;
            }
            "/state" => {
                print_state(engine, &id, &mut out)?;
                continue;
            }
            _ => {}
        }
        match engine.run_round(&id, line) {
            Ok(result) => {
                print_round(&result, &mut out)?;
                if result.ended {
                    break;
                }
            }
            Err(e) => writeln!(out, "! {e}")?,
        }
    }
    Ok(engine.session_state(&id)?)
}

fn print_state(engine: &Engine, id: &str, out: &mut impl Write) -> anyhow::Result<()> {
    let view = engine.session_state(id)?;
    writeln!(out, "turn {} chapter {}", view.state.turn, view.state.chapter_cursor)?;
    for (anchor, value) in &view.state.anchor_values {
        writeln!(out, "  {anchor} = {value}")?;
    }
    Ok(())
}

fn print_round(result: &RoundResult, out: &mut impl Write) -> anyhow::Result<()> {
    for event in &result.events {
        match &event.payload {
            EventPayload::NpcAction(NpcAction::Dialogue { speaker, text, .. }) => writeln!(out, "{speaker}: {text}")?,
            EventPayload::NpcAction(NpcAction::Physical { actor, verb, target, .. }) => match target {
                Some(t) => writeln!(out, "* {actor} {verb} {t}")?,
                None => writeln!(out, "* {actor} {verb}")?,
            },
            EventPayload::StateUpdated(StateUpdate::Anchor(c)) => writeln!(out, "  ({}: {} -> {})", c.anchor_id, c.old, c.new)?,
            EventPayload::NarrativeInjected(beat) => writeln!(out, "[{}] {}", beat.kind.as_str(), beat.text)?,
            EventPayload::GoalAchieved { goal_id, .. } => writeln!(out, "** goal achieved: {goal_id}")?,
            EventPayload::ChapterAdvanced { to, .. } => writeln!(out, "** chapter {to} begins")?,
            _ => {}
        }
    }
    writeln!(out, "~ {}", result.scene.global_prompt)?;
    if let Some(summary) = &result.ending_summary {
        writeln!(out, "\n{summary}")?;
    }
    Ok(())
}

//! Bundled sample content used by tests, the CLI and the acceptance suite.

use crate::game_schema::{load_game, GameDefinition};

pub const BLACK_FOREST_JSON: &str = include_str!("../examples/black_forest.game.json");

/// The Black Forest escape game.
pub fn black_forest() -> GameDefinition {
    load_game(BLACK_FOREST_JSON.as_bytes()).expect("bundled game is valid")
}

/// Scripted decomposition of the Black Forest goal, one row per subgoal.
pub const TABLE_ONE_SUBGOAL_ROWS: &str = "SUBGOAL|The adventurer is safe.|adventurer_health|gt|0
SUBGOAL|The princess is safe.|princess_health|gt|0
SUBGOAL|The adventurer and the princess escaped from the Black Forest.|party_location|eq|Out of the Black Forest";

const SETTINGS: [(&str, &str, &str, &str); 10] = [
    ("Rust Dominion", "robots rule the ruined cities and a lone human survivor fights to reclaim the world", "Scrapyard", "Signal Flare"),
    ("Sunken Clockwork", "a drowned city of clockwork mermaids slowly winds down", "Gear Reef", "Brass Key"),
    ("Ember Court", "a volcanic kingdom where nobles duel with fire", "Ash Palace", "Obsidian Crown"),
    ("Frostbound", "an endless winter has trapped a mountain village", "Ice Pass", "Sun Stone"),
    ("Neon Alley", "a detective hunts a memory thief through a rain-soaked megacity", "Night Market", "Data Shard"),
    ("Starfall Orchard", "fallen stars grow into trees that grant wishes", "Glow Grove", "Seed Lantern"),
    ("Hollow Crown", "a ghost king wants his throne back", "Throne Hall", "Silver Ring"),
    ("Dune Caravan", "traders cross a desert that moves at night", "Shifting Sands", "Water Compass"),
    ("Paper Kingdom", "a realm folded from paper fears the rain", "Origami Bridge", "Ink Pen"),
    ("Iron Tide", "pirates chase a leviathan across a steel sea", "Rust Harbor", "Harpoon"),
];

const GENRES: [&str; 6] = ["adventure", "role_playing", "mystery", "simulation", "strategy", "other"];

/// Ordered copilot stage replies for a synthetic seed: world, characters,
/// outline, mechanics, then one decomposition per goal.
pub fn copilot_script(seed_index: usize) -> Vec<crate::llm::ScriptEntry> {
    use crate::llm::ScriptEntry;
    let (title, premise, place, item) = SETTINGS[seed_index % SETTINGS.len()];
    let title = format!("{title} {}", seed_index + 1);
    let two_chapters = seed_index % 2 == 1;
    let world = format!(
        "TITLE|{title}\nGENRE|{genre}\nBACKGROUND|A world where {premise}.\nTONE|tense but hopeful\nREGION|{place}|The place where everything starts.\nLORE|origins|Origins|Long ago {premise}. Only the {item} can change that.\nENTITY|relic|item|{item}|An object of legend.\nASSET|relic|image|close-up of the {item}, dramatic light",
        genre = GENRES[seed_index % GENRES.len()]
    );
    let characters = "CHARACTER|hero|Hero|player|||Set things right.|\n\
CHARACTER|mentor|Mentor|npc|An old guide who has seen it all.|Lost an apprentice long ago.|Keep the hero alive.|Calm and wry.\n\
CHARACTER|rival|Rival|npc|A proud rival seeking the same prize.|Grew up in the same town.|Win at any cost.|Brash."
        .to_string();
    let mut outline = "CHAPTER|ch1|It begins.\nTASK|ch1|Find the mentor.\nTWIST|ch1|The rival steals a map.".to_string();
    if two_chapters {
        outline.push_str("\nCHAPTER|ch2|The final stretch.\nTASK|ch2|Reach the end.");
    }
    let first_action = if two_chapters { "advance_chapter" } else { "end_game" };
    let mut mechanics = format!(
        "ANCHOR|health|Hero health|number|10|0..10\nANCHOR|location|Where the hero is|text_enum|Start|Start,Middle,End\nANCHOR|morale|Party morale|number|5|0..10\nGOAL|ch1|reach_middle|{first_action}|Reach the middle while staying alive.|health,location,morale=5"
    );
    if two_chapters {
        mechanics.push_str("\nGOAL|ch2|reach_end|end_game|Reach the end.|location");
    }
    let mut script = vec![
        ScriptEntry::ordered(world),
        ScriptEntry::ordered(characters),
        ScriptEntry::ordered(outline),
        ScriptEntry::ordered(mechanics),
        ScriptEntry::ordered(
            "SUBGOAL|The hero is alive.|health|gt|0\nSUBGOAL|The hero reached the middle.|location|eq|Middle\nSUBGOAL|Morale holds.|morale|ge|3",
        ),
    ];
    if two_chapters {
        script.push(ScriptEntry::ordered("SUBGOAL|The hero reached the end.|location|eq|End"));
    }
    script
}

/// Twelve player utterances for the scripted Black Forest playthrough.
pub const GOLDEN_UTTERANCES: [&str; 12] = [
    "I look around the clearing and call out to whoever is there.",
    "I follow the voice toward the smell of smoke.",
    "Guard, what happened to the rest of the escort?",
    "I charge the dragon with my sword raised.",
    "I pull back and bind my wounds behind a boulder.",
    "Princess, do you know the dragon's weakness?",
    "I circle around the lair, looking for another way in.",
    "I wait and listen to the dragon's breathing.",
    "I whisper a plan to the guard.",
    "I search the ground for anything useful.",
    "I strike the soft skin beneath the dragon's left wing.",
    "We follow the white stones along the river path and leave the forest.",
];

/// Round whose assessment wounds the adventurer (10 to 7).
pub const GOLDEN_WOUND_ROUND: u64 = 4;
/// Round in which the stall beat fires.
pub const GOLDEN_STALL_ROUND: u64 = 10;
pub const GOLDEN_ENDING: &str = "With the dragon fallen, the adventurer leads Princess Elowen along the white stones to the king's road. Behind them the Black Forest finally falls silent.";

/// Light-tier script for the golden playthrough, in per-role lanes.
pub fn golden_light_script() -> Vec<crate::llm::ScriptEntry> {
    use crate::llm::{RoleTag, ScriptEntry};
    let mut entries = vec![
        ScriptEntry::fallback("DIALOGUE|self|Keep moving, and keep your voice down.\nMEMORY|0.4|The adventurer is still with us.")
            .for_role(RoleTag::Thinking),
        ScriptEntry::fallback("BEAT|clue|guard|The guard points at a line of white stones along the stream: the river path.")
            .for_role(RoleTag::Narrative),
        ScriptEntry::fallback("NONE").for_role(RoleTag::GoalCheck),
        ScriptEntry::fallback("THEME|The story goes on\nNARRATIVE|The party presses on through the forest.").for_role(RoleTag::Summarize),
    ];
    for round in 1..=12u64 {
        let assessment = match round {
            GOLDEN_WOUND_ROUND => "SET|adventurer_health|7|the dragon's claw tears through the adventurer's armour",
            12 => "SET|party_location|Out of the Black Forest|the party leaves by the river path",
            _ => "NONE",
        };
        entries.push(ScriptEntry::ordered(assessment).for_role(RoleTag::GoalCheck));
        if round == 12 {
            entries.push(ScriptEntry::ordered(GOLDEN_ENDING).for_role(RoleTag::Summarize));
        }
        entries.push(
            ScriptEntry::ordered(format!(
                "THEME|Round {round} in the Black Forest\nNARRATIVE|{}",
                GOLDEN_UTTERANCES[round as usize - 1]
            ))
            .for_role(RoleTag::Summarize),
        );
    }
    entries
}

/// SOTA-tier script: cold-start considerations, then agreeing assessments.
pub fn golden_sota_script() -> Vec<crate::llm::ScriptEntry> {
    use crate::llm::{RoleTag, ScriptEntry};
    vec![
        ScriptEntry::ordered(
            "CONSIDER|The adventurer's health must stay above zero.\nCONSIDER|The princess's health must stay above zero.\nCONSIDER|Leaving the forest means reaching the river path's end, not just the path.",
        )
        .for_role(RoleTag::GoalCheckSota),
        ScriptEntry::fallback("NONE").for_role(RoleTag::GoalCheckSota),
    ]
}

/// Two-tier gateway over the golden scripts. The backends are returned so
/// tests can inspect received prompts.
pub fn golden_gateway() -> (crate::llm::Gateway, std::sync::Arc<crate::llm::ScriptedBackend>, std::sync::Arc<crate::llm::ScriptedBackend>) {
    use crate::llm::{Gateway, ScriptedBackend};
    use std::sync::Arc;
    let light = Arc::new(ScriptedBackend::new("scripted-light", golden_light_script()).expect("valid script"));
    let sota = Arc::new(ScriptedBackend::new("scripted-sota", golden_sota_script()).expect("valid script"));
    (Gateway::two_tier(light.clone(), sota.clone()), light, sota)
}

/// Number of copilot seeds the demo scripts can serve.
pub const DEMO_COPILOT_SEEDS: usize = 20;

/// Light-tier demo script: the golden playthrough plus copilot replies for
/// [`DEMO_COPILOT_SEEDS`] jobs, each on its own role lane.
pub fn demo_light_script() -> Vec<crate::llm::ScriptEntry> {
    use crate::llm::RoleTag;
    let mut entries = golden_light_script();
    for seed in 0..DEMO_COPILOT_SEEDS {
        entries.extend(copilot_script(seed).into_iter().map(|e| e.for_role(RoleTag::CopilotStage)));
    }
    entries
}

/// Scripted gateway used when no script directory is given.
pub fn demo_gateway() -> crate::llm::Gateway {
    use crate::llm::{Gateway, ScriptedBackend};
    use std::sync::Arc;
    let light = Arc::new(ScriptedBackend::new("scripted-light", demo_light_script()).expect("valid script"));
    let sota = Arc::new(ScriptedBackend::new("scripted-sota", golden_sota_script()).expect("valid script"));
    Gateway::two_tier(light, sota)
}

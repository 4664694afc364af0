//! Declarative game definitions: the document format the copilot writes and
//! the engine consumes, plus structural validation.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Adventure,
    RolePlaying,
    Mystery,
    Simulation,
    Strategy,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDefinition {
    pub game_id: String,
    pub title: String,
    pub genre: Genre,
    pub world: WorldSetting,
    pub characters: Vec<Character>,
    pub anchors: Vec<AnchorDecl>,
    pub chapters: Vec<Chapter>,
    #[serde(default)]
    pub lore: Vec<LoreDoc>,
    #[serde(default)]
    pub initial_entities: Vec<EntitySeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSetting {
    pub background: String,
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub era_tone: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacterKind {
    Npc,
    Player,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Character {
    pub character_id: String,
    pub name: String,
    pub kind: CharacterKind,
    #[serde(default)]
    pub persona: String,
    #[serde(default)]
    pub backstory: String,
    #[serde(default)]
    pub motivations: String,
    #[serde(default)]
    pub voice_style: String,
}

impl Character {
    pub fn is_npc(&self) -> bool {
        self.kind == CharacterKind::Npc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Number,
    TextEnum,
    Location,
    FreeText,
}

impl AnchorKind {
    pub fn is_text(self) -> bool {
        !matches!(self, AnchorKind::Number)
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorKind::Number => "number",
            AnchorKind::TextEnum => "text_enum",
            AnchorKind::Location => "location",
            AnchorKind::FreeText => "free_text",
        })
    }
}

/// A tracked game-state value. Serialized as a bare JSON number or string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorValue {
    Number(f64),
    Text(String),
}

impl AnchorValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AnchorValue::Number(n) => Some(*n),
            AnchorValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            AnchorValue::Text(t) => Some(t),
            AnchorValue::Number(_) => None,
        }
    }

    pub fn conforms_to(&self, kind: AnchorKind) -> bool {
        match (self, kind) {
            (AnchorValue::Number(n), AnchorKind::Number) => n.is_finite(),
            (AnchorValue::Text(_), k) => k.is_text(),
            _ => false,
        }
    }

    /// Parses model- or author-written text into a value of the given kind.
    pub fn parse_as(raw: &str, kind: AnchorKind) -> Option<AnchorValue> {
        let raw = raw.trim();
        match kind {
            AnchorKind::Number => raw.parse::<f64>().ok().filter(|n| n.is_finite()).map(AnchorValue::Number),
            _ if raw.is_empty() => None,
            _ => Some(AnchorValue::Text(raw.to_string())),
        }
    }
}

impl fmt::Display for AnchorValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorValue::Number(n) => write!(f, "{n}"),
            AnchorValue::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDecl {
    pub anchor_id: String,
    pub name: String,
    pub value_type: AnchorKind,
    pub initial_value: AnchorValue,
    #[serde(default)]
    pub allowed_values: Option<Vec<String>>,
    /// Optional clamp bounds for number anchors.
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl AnchorDecl {
    /// Applies the declared clamp bounds to a number value.
    pub fn clamp(&self, value: AnchorValue) -> AnchorValue {
        match value {
            AnchorValue::Number(mut n) => {
                if let Some(lo) = self.min {
                    n = n.max(lo);
                }
                if let Some(hi) = self.max {
                    n = n.min(hi);
                }
                AnchorValue::Number(n)
            }
            other => other,
        }
    }

    /// Whether `value` is an acceptable stored value for this anchor.
    pub fn accepts(&self, value: &AnchorValue) -> bool {
        if !value.conforms_to(self.value_type) {
            return false;
        }
        match (self.value_type, value) {
            (AnchorKind::TextEnum, AnchorValue::Text(t)) => {
                self.allowed_values.as_ref().is_some_and(|set| set.iter().any(|a| a == t))
            }
            (AnchorKind::Number, AnchorValue::Number(n)) => {
                self.min.is_none_or(|lo| *n >= lo) && self.max.is_none_or(|hi| *n <= hi)
            }
            (_, AnchorValue::Text(t)) => !t.trim().is_empty(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
    InSet,
    NotInSet,
}

impl PredicateOp {
    pub const ALL: [PredicateOp; 8] = [
        PredicateOp::Gt,
        PredicateOp::Ge,
        PredicateOp::Lt,
        PredicateOp::Le,
        PredicateOp::Eq,
        PredicateOp::Ne,
        PredicateOp::InSet,
        PredicateOp::NotInSet,
    ];

    pub fn is_ordering(self) -> bool {
        matches!(self, PredicateOp::Gt | PredicateOp::Ge | PredicateOp::Lt | PredicateOp::Le)
    }

    pub fn is_set(self) -> bool {
        matches!(self, PredicateOp::InSet | PredicateOp::NotInSet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PredicateOp::Gt => "gt",
            PredicateOp::Ge => "ge",
            PredicateOp::Lt => "lt",
            PredicateOp::Le => "le",
            PredicateOp::Eq => "eq",
            PredicateOp::Ne => "ne",
            PredicateOp::InSet => "in_set",
            PredicateOp::NotInSet => "not_in_set",
        }
    }

    pub fn parse(raw: &str) -> Option<PredicateOp> {
        let raw = raw.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|op| op.as_str() == raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Value(AnchorValue),
    Set(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub op: PredicateOp,
    pub operand: Operand,
}

impl Predicate {
    /// Checks the predicate's typing against an anchor declaration.
    pub fn check_against(&self, anchor: &AnchorDecl) -> Result<(), String> {
        let kind = anchor.value_type;
        match (&self.operand, self.op) {
            (Operand::Set(_), op) if !op.is_set() => {
                Err(format!("operator {} requires a single value operand", op.as_str()))
            }
            (Operand::Value(_), op) if op.is_set() => {
                Err(format!("operator {} requires a value set operand", op.as_str()))
            }
            (_, op) if op.is_ordering() && kind != AnchorKind::Number => Err(format!(
                "numeric operator {} used on {} anchor '{}'",
                op.as_str(),
                kind,
                anchor.anchor_id
            )),
            (_, op) if op.is_set() && kind == AnchorKind::Number => Err(format!(
                "set operator {} used on number anchor '{}'",
                op.as_str(),
                anchor.anchor_id
            )),
            (_, PredicateOp::NotInSet) if kind == AnchorKind::FreeText => {
                Err(format!("not_in_set is not supported on free_text anchor '{}'", anchor.anchor_id))
            }
            (Operand::Value(v), _) if !v.conforms_to(kind) => {
                Err(format!("operand '{v}' does not conform to {} anchor '{}'", kind, anchor.anchor_id))
            }
            (Operand::Set(items), _) if items.is_empty() => Err("empty value set".to_string()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.operand {
            Operand::Value(v) => write!(f, "{} {}", self.op.as_str(), v),
            Operand::Set(s) => write!(f, "{} {{{}}}", self.op.as_str(), s.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub subgoal_id: String,
    pub description: String,
    pub anchor_id: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnComplete {
    AdvanceChapter,
    InjectTask,
    EndGame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: String,
    pub creator_text: String,
    pub subgoals: Vec<Subgoal>,
    pub on_complete: OnComplete,
    /// Whether NPC prompts may list this goal among pending objectives.
    #[serde(default = "default_true")]
    pub visible_to_npcs: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chapter {
    pub chapter_id: String,
    pub order_index: usize,
    pub intro_text: String,
    pub goals: Vec<Goal>,
    #[serde(default)]
    pub twist_pool: Vec<String>,
    #[serde(default)]
    pub task_pool: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoreDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Npc,
    Scene,
    Item,
    Player,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Sound,
    Music,
    Motion,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Sound => "sound",
            Modality::Music => "music",
            Modality::Motion => "motion",
        }
    }

    pub fn parse(raw: &str) -> Option<Modality> {
        [Modality::Image, Modality::Sound, Modality::Music, Modality::Motion]
            .into_iter()
            .find(|m| m.as_str() == raw.trim().to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAsset {
    pub modality: Modality,
    pub descriptor: String,
}

/// An entity present when a session starts, with optional seed asset
/// descriptors from the copilot's visual and audio stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySeed {
    pub entity_id: String,
    pub kind: EntityKind,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub attributes: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub seed_assets: Vec<SeedAsset>,
}

impl GameDefinition {
    pub fn anchor(&self, anchor_id: &str) -> Option<&AnchorDecl> {
        self.anchors.iter().find(|a| a.anchor_id == anchor_id)
    }

    pub fn character(&self, character_id: &str) -> Option<&Character> {
        self.characters.iter().find(|c| c.character_id == character_id)
    }

    pub fn npcs(&self) -> impl Iterator<Item = &Character> {
        self.characters.iter().filter(|c| c.is_npc())
    }

    pub fn chapter(&self, order_index: usize) -> Option<&Chapter> {
        self.chapters.get(order_index)
    }

    pub fn goals(&self) -> impl Iterator<Item = &Goal> {
        self.chapters.iter().flat_map(|c| c.goals.iter())
    }

    /// Resolves a character id or display name (case-insensitive).
    pub fn resolve_character(&self, raw: &str) -> Option<&Character> {
        let raw = raw.trim();
        self.character(raw).or_else(|| {
            self.characters
                .iter()
                .find(|c| c.name.eq_ignore_ascii_case(raw) || c.character_id.eq_ignore_ascii_case(raw))
        })
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { severity: Severity::Error, path: path.into(), message: message.into() });
    }

    fn warn(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { severity: Severity::Warning, path: path.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            let sev = match issue.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            writeln!(f, "{sev}: {}: {}", issue.path, issue.message)?;
        }
        Ok(())
    }
}

fn check_unique<'a>(
    report: &mut ValidationReport,
    ids: impl Iterator<Item = (String, &'a str)>,
    what: &str,
) {
    let mut seen = HashSet::new();
    for (path, id) in ids {
        if id.trim().is_empty() {
            report.error(path, format!("{what} must be nonempty"));
        } else if !seen.insert(id) {
            report.error(path, format!("duplicate {what} '{id}'"));
        }
    }
}

/// Checks every structural invariant of a definition. Pure and deterministic.
pub fn validate_game(def: &GameDefinition) -> ValidationReport {
    let mut r = ValidationReport::default();

    if def.game_id.trim().is_empty() {
        r.error("game_id", "game_id must be nonempty");
    }
    if def.title.trim().is_empty() {
        r.warn("title", "title is empty");
    }
    if def.world.background.trim().is_empty() {
        r.error("world.background", "world background must be nonempty");
    }

    check_unique(
        &mut r,
        def.characters.iter().enumerate().map(|(i, c)| (format!("characters[{i}].character_id"), c.character_id.as_str())),
        "character_id",
    );
    for (i, c) in def.characters.iter().enumerate() {
        if c.name.trim().is_empty() {
            r.error(format!("characters[{i}].name"), "character name must be nonempty");
        }
        if c.is_npc() && c.persona.trim().is_empty() {
            r.error(format!("characters[{i}].persona"), "npc persona must be nonempty");
        }
    }
    if def.npcs().next().is_none() {
        r.error("characters", "at least one character with kind=npc is required");
    }

    check_unique(
        &mut r,
        def.anchors.iter().enumerate().map(|(i, a)| (format!("anchors[{i}].anchor_id"), a.anchor_id.as_str())),
        "anchor_id",
    );
    for (i, a) in def.anchors.iter().enumerate() {
        validate_anchor(&mut r, i, a);
    }

    if def.chapters.is_empty() {
        r.error("chapters", "at least one chapter is required");
    }
    check_unique(
        &mut r,
        def.chapters.iter().enumerate().map(|(i, c)| (format!("chapters[{i}].chapter_id"), c.chapter_id.as_str())),
        "chapter_id",
    );
    check_unique(
        &mut r,
        def.chapters.iter().enumerate().flat_map(|(ci, c)| {
            c.goals.iter().enumerate().map(move |(gi, g)| (format!("chapters[{ci}].goals[{gi}].goal_id"), g.goal_id.as_str()))
        }),
        "goal_id",
    );
    let last_chapter = def.chapters.len().saturating_sub(1);
    for (ci, chapter) in def.chapters.iter().enumerate() {
        let cpath = format!("chapters[{ci}]");
        if chapter.order_index != ci {
            r.error(
                format!("{cpath}.order_index"),
                format!("chapter order indices must be contiguous from 0; expected {ci}, found {}", chapter.order_index),
            );
        }
        if chapter.goals.is_empty() {
            r.error(format!("{cpath}.goals"), "every chapter needs at least one goal");
        }
        for (gi, goal) in chapter.goals.iter().enumerate() {
            let gpath = format!("{cpath}.goals[{gi}]");
            if goal.subgoals.is_empty() {
                r.error(format!("{gpath}.subgoals"), "goal needs at least one subgoal");
            }
            if goal.on_complete == OnComplete::AdvanceChapter && ci == last_chapter {
                r.warn(format!("{gpath}.on_complete"), "advance_chapter in the final chapter ends the game");
            }
            check_unique(
                &mut r,
                goal.subgoals.iter().enumerate().map(|(si, s)| (format!("{gpath}.subgoals[{si}].subgoal_id"), s.subgoal_id.as_str())),
                "subgoal_id",
            );
            for (si, sub) in goal.subgoals.iter().enumerate() {
                let spath = format!("{gpath}.subgoals[{si}]");
                if sub.description.trim().is_empty() {
                    r.error(format!("{spath}.description"), "subgoal description must be nonempty");
                }
                match def.anchor(&sub.anchor_id) {
                    None => r.error(format!("{spath}.anchor_id"), format!("unknown anchor '{}'", sub.anchor_id)),
                    Some(anchor) => {
                        if let Err(msg) = sub.predicate.check_against(anchor) {
                            r.error(format!("{spath}.predicate"), msg);
                        } else if anchor.value_type == AnchorKind::TextEnum {
                            let allowed: BTreeSet<&str> =
                                anchor.allowed_values.iter().flatten().map(String::as_str).collect();
                            let operands: Vec<&str> = match &sub.predicate.operand {
                                Operand::Value(v) => v.as_text().into_iter().collect(),
                                Operand::Set(s) => s.iter().map(String::as_str).collect(),
                            };
                            for o in operands.into_iter().filter(|o| !allowed.contains(o)) {
                                r.warn(format!("{spath}.predicate.operand"), format!("'{o}' is not an allowed value of '{}'", anchor.anchor_id));
                            }
                        }
                    }
                }
            }
        }
    }
    if !def.goals().any(|g| g.on_complete == OnComplete::EndGame)
        && !def.chapters.last().is_some_and(|c| c.goals.iter().any(|g| g.on_complete == OnComplete::AdvanceChapter))
    {
        r.warn("chapters", "no goal ends the game");
    }

    check_unique(
        &mut r,
        def.lore.iter().enumerate().map(|(i, d)| (format!("lore[{i}].doc_id"), d.doc_id.as_str())),
        "doc_id",
    );
    for (i, doc) in def.lore.iter().enumerate() {
        if doc.body.trim().is_empty() {
            r.error(format!("lore[{i}].body"), "lore body must be nonempty");
        }
    }

    check_unique(
        &mut r,
        def.initial_entities.iter().enumerate().map(|(i, e)| (format!("initial_entities[{i}].entity_id"), e.entity_id.as_str())),
        "entity_id",
    );
    for (i, e) in def.initial_entities.iter().enumerate() {
        if e.name.trim().is_empty() {
            r.error(format!("initial_entities[{i}].name"), "entity name must be nonempty");
        }
        for (ai, a) in e.seed_assets.iter().enumerate() {
            if a.descriptor.trim().is_empty() {
                r.error(format!("initial_entities[{i}].seed_assets[{ai}].descriptor"), "asset descriptor must be nonempty");
            }
        }
    }
    r
}

fn validate_anchor(r: &mut ValidationReport, i: usize, a: &AnchorDecl) {
    let path = format!("anchors[{i}]");
    if !a.initial_value.conforms_to(a.value_type) {
        r.error(format!("{path}.initial_value"), format!("initial value does not conform to {}", a.value_type));
    }
    match (a.value_type, &a.allowed_values) {
        (AnchorKind::TextEnum, None) => r.error(format!("{path}.allowed_values"), "text_enum anchors require allowed_values"),
        (AnchorKind::TextEnum, Some(set)) => {
            if set.is_empty() {
                r.error(format!("{path}.allowed_values"), "allowed_values must be nonempty");
            }
            if let AnchorValue::Text(t) = &a.initial_value {
                if !set.contains(t) {
                    r.error(format!("{path}.initial_value"), format!("initial value '{t}' is not in allowed_values"));
                }
            }
        }
        (_, Some(_)) => r.error(format!("{path}.allowed_values"), "allowed_values is only valid on text_enum anchors"),
        (_, None) => {}
    }
    if a.value_type == AnchorKind::Number {
        if let (Some(lo), Some(hi)) = (a.min, a.max) {
            if lo > hi {
                r.error(format!("{path}.min"), "min exceeds max");
            }
        }
        if let AnchorValue::Number(n) = a.initial_value {
            if a.min.is_some_and(|lo| n < lo) || a.max.is_some_and(|hi| n > hi) {
                r.error(format!("{path}.initial_value"), "initial value outside [min, max]");
            }
        }
    } else if a.min.is_some() || a.max.is_some() {
        r.error(format!("{path}.min"), "min/max are only valid on number anchors");
    }
    if a.value_type.is_text() && a.initial_value.as_text().is_some_and(|t| t.trim().is_empty()) {
        r.error(format!("{path}.initial_value"), "text anchors need a nonempty initial value");
    }
}

// ---------------------------------------------------------------------------
// Document form

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed game document: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0}")]
    UnsupportedVersion(u64),
    #[error("game definition failed validation:\n{0}")]
    Validation(ValidationReport),
}

#[derive(Serialize, Deserialize)]
struct GameDocument {
    schema_version: u32,
    game: GameDefinition,
}

/// Parses and validates a game document. Unknown fields surface as warnings
/// in the returned report.
pub fn load_game_with_report(document: &[u8]) -> Result<(GameDefinition, ValidationReport), SchemaError> {
    if document.iter().all(u8::is_ascii_whitespace) {
        return Err(SchemaError::Parse("empty document".to_string()));
    }
    let raw: Value = serde_json::from_slice(document).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let Value::Object(top) = &raw else {
        return Err(SchemaError::Parse("top level must be an object".to_string()));
    };
    match top.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(SchemaError::UnsupportedVersion(v)),
        None => return Err(SchemaError::Parse("missing schema_version".to_string())),
    }
    let doc: GameDocument = serde_json::from_value(raw.clone()).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let mut report = validate_game(&doc.game);
    let echoed = serde_json::to_value(&doc).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let mut unknown = Vec::new();
    collect_unknown_fields(&raw, &echoed, String::new(), &mut unknown);
    for path in unknown {
        report.warn(path, "unknown field ignored");
    }
    if report.has_errors() {
        return Err(SchemaError::Validation(report));
    }
    Ok((doc.game, report))
}

pub fn load_game(document: &[u8]) -> Result<GameDefinition, SchemaError> {
    load_game_with_report(document).map(|(game, _)| game)
}

/// Serializes a definition into the canonical document form.
pub fn serialize_game(def: &GameDefinition) -> String {
    let doc = GameDocument { schema_version: SCHEMA_VERSION, game: def.clone() };
    serde_json::to_string_pretty(&doc).expect("game definitions always serialize")
}

fn collect_unknown_fields(input: &Value, echoed: &Value, path: String, out: &mut Vec<String>) {
    match (input, echoed) {
        (Value::Object(a), Value::Object(b)) => {
            for (key, value) in a {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match b.get(key) {
                    None => out.push(child),
                    Some(other) => collect_unknown_fields(value, other, child, out),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                collect_unknown_fields(x, y, format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Normalized text comparison used by free-text anchors.
pub fn same_free_text(a: &str, b: &str) -> bool {
    text::normalize(a) == text::normalize(b)
}

//! Core of the zagii RPG engine: game schema, model gateway, event bus,
//! session state and the per-round agents.

pub mod events;
pub mod fixtures;
pub mod game_schema;
pub mod llm;
pub mod message_bus;
pub mod narrative;
pub mod roleplay;
pub mod session_store;
pub mod status_manager;
pub mod text;
pub mod rendering;
pub mod copilot;
pub mod engine;
pub mod analytics;
pub mod persistence;

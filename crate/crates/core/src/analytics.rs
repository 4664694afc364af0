//! Session analytics and the synthetic corpus generator used for desk-scale
//! checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::persistence::SessionRecord;

pub const BIN_LABELS: [&str; 4] = ["<5", "5-30", "31-50", ">50"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsSummary {
    pub total_sessions: u64,
    pub game_count: usize,
    pub per_game: BTreeMap<String, u64>,
    pub round_histogram: Vec<HistogramBin>,
    /// Games by session count, descending; ties by game id.
    pub top_games: Vec<(String, u64)>,
    pub excluded_games: Vec<(String, u64)>,
}

impl AnalyticsSummary {
    pub fn top_share(&self) -> f64 {
        match self.top_games.first() {
            Some((_, n)) if self.total_sessions > 0 => *n as f64 / self.total_sessions as f64,
            _ => 0.0,
        }
    }
}

pub fn bin_index(rounds: u64) -> usize {
    match rounds {
        0..=4 => 0,
        5..=30 => 1,
        31..=50 => 2,
        _ => 3,
    }
}

/// Aggregates session records. Games with more than `outlier_threshold`
/// sessions are excluded from every figure and listed separately.
pub fn analytics_summary(records: &[SessionRecord], top_k: usize, outlier_threshold: Option<u64>) -> AnalyticsSummary {
    let mut per_game: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        *per_game.entry(r.game_id.clone()).or_default() += 1;
    }
    let excluded: BTreeMap<String, u64> = per_game
        .iter()
        .filter(|(_, n)| outlier_threshold.is_some_and(|t| **n > t))
        .map(|(g, n)| (g.clone(), *n))
        .collect();
    per_game.retain(|g, _| !excluded.contains_key(g));

    let mut bins = [0u64; 4];
    for r in records.iter().filter(|r| !excluded.contains_key(&r.game_id)) {
        bins[bin_index(r.round_count)] += 1;
    }
    let mut ranked: Vec<(String, u64)> = per_game.iter().map(|(g, n)| (g.clone(), *n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    AnalyticsSummary {
        total_sessions: per_game.values().sum(),
        game_count: per_game.len(),
        per_game,
        round_histogram: BIN_LABELS.iter().zip(bins).map(|(l, c)| HistogramBin { label: l.to_string(), count: c }).collect(),
        top_games: ranked,
        excluded_games: excluded.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub games: usize,
    pub sessions: usize,
    pub seed: u64,
    pub zipf_exponent: f64,
    /// Extra sessions for one additional outlier game.
    pub outlier_sessions: Option<usize>,
}

impl SimulationConfig {
    pub fn new(games: usize, sessions: usize, seed: u64) -> Self {
        Self { games, sessions, seed, zipf_exponent: 1.1, outlier_sessions: None }
    }
}

pub const OUTLIER_GAME_ID: &str = "game-outlier";

/// Mixture over round-count ranges: (weight, low, high).
const ROUND_MIXTURE: [(f64, u64, u64); 4] = [(0.22, 1, 4), (0.58, 5, 30), (0.12, 31, 50), (0.08, 51, 150)];

fn sample_rounds(rng: &mut ChaCha8Rng) -> u64 {
    let mut u: f64 = rng.gen();
    for (w, lo, hi) in ROUND_MIXTURE {
        if u < w {
            return rng.gen_range(lo..=hi);
        }
        u -= w;
    }
    let (_, lo, hi) = ROUND_MIXTURE[ROUND_MIXTURE.len() - 1];
    rng.gen_range(lo..=hi)
}

/// Generates session records with power-law game popularity. Deterministic
/// for a given config.
pub fn simulate(config: &SimulationConfig) -> Vec<SessionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.sessions + config.outlier_sessions.unwrap_or(0));
    let width = config.games.max(1).to_string().len();
    if config.games > 0 {
        let zipf = Zipf::new(config.games as u64, config.zipf_exponent).expect("valid zipf parameters");
        for i in 0..config.sessions {
            let rank = zipf.sample(&mut rng) as usize;
            records.push(synthetic_record(&mut rng, i, format!("game-{rank:0width$}")));
        }
    }
    for i in 0..config.outlier_sessions.unwrap_or(0) {
        records.push(synthetic_record(&mut rng, config.sessions + i, OUTLIER_GAME_ID.to_string()));
    }
    records
}

fn synthetic_record(rng: &mut ChaCha8Rng, index: usize, game_id: String) -> SessionRecord {
    let session_id = format!("sim-{index:06}");
    SessionRecord {
        event_log_ref: format!("simulated:{session_id}"),
        session_id,
        game_id,
        created_at: index as u64,
        ended_at: Some(index as u64 + 1),
        round_count: sample_rounds(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus_is_all_zero() {
        let s = analytics_summary(&[], 5, None);
        assert_eq!(s.total_sessions, 0);
        assert!(s.round_histogram.iter().all(|b| b.count == 0));
        assert!(s.top_games.is_empty());
        assert_eq!(s.top_share(), 0.0);
    }

    #[test]
    fn bins_follow_boundaries() {
        assert_eq!([0, 4, 5, 30, 31, 50, 51].map(bin_index), [0, 0, 1, 1, 2, 2, 3]);
    }

    #[test]
    fn simulation_is_deterministic_and_conserves_counts() {
        let cfg = SimulationConfig::new(20, 2_000, 7);
        let a = simulate(&cfg);
        assert_eq!(a, simulate(&cfg));
        let s = analytics_summary(&a, 3, None);
        assert_eq!(s.round_histogram.iter().map(|b| b.count).sum::<u64>(), 2_000);
        assert_eq!(s.per_game.values().sum::<u64>(), 2_000);
        assert_eq!(s.top_games[0].0, "game-01");
        assert_ne!(simulate(&SimulationConfig::new(20, 2_000, 8)), a);
    }

    #[test]
    fn outlier_is_excluded_by_threshold() {
        let cfg = SimulationConfig { outlier_sessions: Some(500), ..SimulationConfig::new(10, 300, 1) };
        let records = simulate(&cfg);
        let with = analytics_summary(&records, 3, None);
        assert_eq!(with.top_games[0].0, OUTLIER_GAME_ID);
        let without = analytics_summary(&records, 3, Some(400));
        assert_eq!(without.total_sessions, 300);
        assert_eq!(without.excluded_games, vec![(OUTLIER_GAME_ID.to_string(), 500)]);
        assert_eq!(without.round_histogram.iter().map(|b| b.count).sum::<u64>(), 300);
    }
}

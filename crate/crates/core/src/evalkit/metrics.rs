//! Navigation metrics over finished episodes.

use serde::{Deserialize, Serialize};

use crate::world::{EpisodeSpec, World};

pub const SUCCESS_RADIUS: f64 = 3.0;

/// Geodesic distance from where the agent stopped to the goal.
pub fn navigation_error(world: &World, final_node: usize, goal: usize) -> f64 {
    world.distance(final_node, goal)
}

/// Inclusive radius test.
pub fn success(ne: f64, radius: f64) -> bool {
    ne <= radius
}

/// `S · l / max(p, l)`
pub fn spl(success: bool, shortest: f64, path_len: f64) -> f64 {
    if !success {
        return 0.0;
    }
    if shortest <= 0.0 {
        return 1.0;
    }
    shortest / path_len.max(shortest)
}

/// Reduction of geodesic distance to the goal; negative when moving away.
pub fn goal_progress(world: &World, start: usize, final_node: usize, goal: usize) -> f64 {
    world.distance(start, goal) - world.distance(final_node, goal)
}

/// Sum of traversed edge lengths. Repeated nodes (a STOP) add nothing.
pub fn path_length(world: &World, path: &[usize]) -> f64 {
    path.windows(2)
        .map(|h| if h[0] == h[1] { 0.0 } else { world.edge_length(h[0], h[1]).expect("path follows edges") })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub world_seed: u64,
    pub start: usize,
    pub goal: usize,
    pub path: Vec<usize>,
    pub shortest_len: f64,
    pub path_len: f64,
    pub ne: f64,
    pub success: bool,
    pub spl: f64,
    pub goal_progress: f64,
}

impl EpisodeRow {
    pub fn score(world: &World, spec: &EpisodeSpec, path: &[usize], radius: f64) -> Self {
        let final_node = *path.last().unwrap_or(&spec.start);
        let ne = navigation_error(world, final_node, spec.goal);
        let ok = success(ne, radius);
        let shortest = world.distance(spec.start, spec.goal);
        let path_len = path_length(world, path);
        Self {
            world_seed: world.seed,
            start: spec.start,
            goal: spec.goal,
            path: path.to_vec(),
            shortest_len: shortest,
            path_len,
            ne,
            success: ok,
            spl: spl(ok, shortest, path_len),
            goal_progress: goal_progress(world, spec.start, final_node, spec.goal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ne_mean: f64,
    pub sr: f64,
    pub spl: f64,
    pub goal_progress_mean: f64,
    pub n_episodes: usize,
    pub episodes: Vec<EpisodeRow>,
}

impl MetricReport {
    pub fn from_rows(episodes: Vec<EpisodeRow>) -> Self {
        let n = episodes.len();
        let mean = |f: &dyn Fn(&EpisodeRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                episodes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            ne_mean: mean(&|r| r.ne),
            sr: mean(&|r| if r.success { 1.0 } else { 0.0 }),
            spl: mean(&|r| r.spl),
            goal_progress_mean: mean(&|r| r.goal_progress),
            n_episodes: n,
            episodes,
        }
    }

    /// `0 ≤ SPL ≤ SR ≤ 1` and `NE ≥ 0`, per episode and in aggregate.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, r) in self.episodes.iter().enumerate() {
            let s = if r.success { 1.0 } else { 0.0 };
            if !(0.0..=s).contains(&r.spl) || r.ne < 0.0 {
                return Err(format!("episode {i}: spl {} success {} ne {}", r.spl, r.success, r.ne));
            }
        }
        if !(0.0 <= self.spl && self.spl <= self.sr && self.sr <= 1.0 && self.ne_mean >= 0.0) {
            return Err(format!("aggregate spl {} sr {} ne {}", self.spl, self.sr, self.ne_mean));
        }
        Ok(())
    }
}

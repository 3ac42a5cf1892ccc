use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Purpose};

use super::{render_instruction, Instruction, World};

pub const DEFAULT_MIN_LEN: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 7;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;
pub const EPISODE_FORMAT: u32 = 1;

const MAX_START_TRIES: usize = 64;

/// One navigation task on a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub format: u32,
    pub world_seed: u64,
    pub start: usize,
    pub goal: usize,
    /// Absolute heading (radians) the agent faces at the start.
    pub start_heading: f64,
    pub gt_path: Vec<usize>,
    pub instruction: Instruction,
    pub success_radius: f64,
}

impl EpisodeSpec {
    /// Number of edges on the ground-truth path.
    pub fn hops(&self) -> usize {
        self.gt_path.len().saturating_sub(1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EpisodeSpec = serde_json::from_str(text)?;
        if spec.format != EPISODE_FORMAT {
            return Err(Error::Input(format!("unsupported episode format {}", spec.format)));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn sample_episode(world: &World, seed: u64, min_len: usize, max_len: usize) -> Result<EpisodeSpec> {
    sample_episode_with(world, seed, min_len, max_len, DEFAULT_SUCCESS_RADIUS)
}

/// Uniform start, then a uniform goal among nodes whose shortest path from
/// the start has between `min_len` and `max_len` edges.
pub fn sample_episode_with(
    world: &World,
    seed: u64,
    min_len: usize,
    max_len: usize,
    success_radius: f64,
) -> Result<EpisodeSpec> {
    if min_len > max_len {
        return Err(Error::Sampling(format!("min_len {min_len} > max_len {max_len}")));
    }
    if world.is_empty() {
        return Err(Error::Sampling("empty world".into()));
    }
    let mut rng = stream(seed, Purpose::Episode, world.seed, 0);
    for _ in 0..MAX_START_TRIES {
        let start = rng.random_range(0..world.len());
        let goals: Vec<(usize, Vec<usize>)> = (0..world.len())
            .filter_map(|g| {
                let path = world.shortest_path(start, g)?;
                let hops = path.len() - 1;
                (min_len..=max_len).contains(&hops).then_some((g, path))
            })
            .collect();
        if goals.is_empty() {
            continue;
        }
        let (goal, gt_path) = goals[rng.random_range(0..goals.len())].clone();
        let start_heading = rng.random_range(-PI..PI);
        let grammar_seed = derive_seed(seed, Purpose::Grammar, world.seed, start as u64);
        let instruction = render_instruction(world, &gt_path, start_heading, grammar_seed)?;
        return Ok(EpisodeSpec {
            format: EPISODE_FORMAT,
            world_seed: world.seed,
            start,
            goal,
            start_heading,
            gt_path,
            instruction,
            success_radius,
        });
    }
    Err(Error::Sampling(format!(
        "no goal with a {min_len}..={max_len} edge shortest path after {MAX_START_TRIES} starts"
    )))
}

use crate::error::Result;
use crate::evalkit::{EpisodeRow, MetricReport};
use crate::model::{run_episode, Mtvm, Policy};
use crate::rng::{stream, Purpose};
use crate::world::{oracle_next_node, EpisodeSpec, SplitTag, World};

use super::{Dataset, Episode};

/// Anything that can be dropped into a world and asked to follow an episode.
pub trait Navigator {
    /// Visited nodes, starting with `spec.start`.
    fn navigate(&self, world: &World, spec: &EpisodeSpec, max_steps: usize) -> Result<Vec<usize>>;
}

/// Greedy decoding; never masks the instruction.
impl Navigator for Mtvm {
    fn navigate(&self, world: &World, spec: &EpisodeSpec, max_steps: usize) -> Result<Vec<usize>> {
        // greedy decoding draws nothing, the stream only fills the signature
        let mut rng = stream(0, Purpose::Eval, 0, 0);
        Ok(run_episode(self, world, spec, Policy::Greedy, &mut rng, max_steps)?.path)
    }
}

/// Follows shortest paths and stops inside the success radius.
pub struct OracleNavigator;

impl Navigator for OracleNavigator {
    fn navigate(&self, world: &World, spec: &EpisodeSpec, max_steps: usize) -> Result<Vec<usize>> {
        let mut path = vec![spec.start];
        let mut node = spec.start;
        for _ in 0..max_steps {
            match oracle_next_node(world, spec, node) {
                Some(next) => {
                    node = next;
                    path.push(node);
                }
                None => break,
            }
        }
        Ok(path)
    }
}

pub fn evaluate(agent: &dyn Navigator, worlds: &[World], episodes: &[Episode], max_steps: usize) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let world = &worlds[ep.world];
        let path = agent.navigate(world, &ep.spec, max_steps)?;
        rows.push(EpisodeRow::score(world, &ep.spec, &path, ep.spec.success_radius));
    }
    Ok(MetricReport::from_rows(rows))
}

pub fn evaluate_split(agent: &dyn Navigator, data: &Dataset, split: SplitTag, max_steps: usize) -> Result<MetricReport> {
    evaluate(agent, data.worlds(split), data.episodes(split), max_steps)
}

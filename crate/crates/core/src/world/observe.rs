use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{EpisodeSpec, World};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// One selectable move at the current node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub feature: Vec<f64>,
    /// Heading relative to the agent's current heading, radians.
    pub heading: f64,
    pub elevation: f64,
    /// Destination node; `None` for STOP.
    pub target: Option<usize>,
}

/// Candidate set at a node. Entry 0 is always STOP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub node: usize,
    pub candidates: Vec<Candidate>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, target: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.target == Some(target))
    }
}

/// STOP plus one candidate per neighbour, neighbours sorted by relative heading.
pub fn observe(world: &World, node: usize, heading: f64) -> Observation {
    let dim = world.feature_dim();
    let mut moves: Vec<Candidate> = world
        .neighbors(node)
        .iter()
        .map(|&(n, _)| Candidate {
            feature: world.nodes[n].feature.clone(),
            heading: wrap_angle(world.heading(node, n) - heading),
            elevation: 0.0,
            target: Some(n),
        })
        .collect();
    moves.sort_by(|a, b| a.heading.total_cmp(&b.heading).then(a.target.cmp(&b.target)));
    let mut candidates = Vec::with_capacity(moves.len() + 1);
    candidates.push(Candidate {
        feature: vec![0.0; dim],
        heading: 0.0,
        elevation: 0.0,
        target: None,
    });
    candidates.extend(moves);
    Observation { node, candidates }
}

/// Next node on a shortest path to the goal, or `None` when the agent is
/// within the success radius and should stop.
pub fn oracle_next_node(world: &World, spec: &EpisodeSpec, current: usize) -> Option<usize> {
    let to_goal = world.distances_to(spec.goal);
    if to_goal[current] <= spec.success_radius {
        return None;
    }
    super::graph::next_hop(world.adjacency(), to_goal, current)
}

/// Teacher action as an index into `observe(world, current, heading)`.
pub fn oracle_action(world: &World, spec: &EpisodeSpec, current: usize, heading: f64) -> usize {
    match oracle_next_node(world, spec, current) {
        None => 0,
        Some(n) => observe(world, current, heading)
            .index_of(n)
            .expect("shortest-path hop is a neighbour"),
    }
}

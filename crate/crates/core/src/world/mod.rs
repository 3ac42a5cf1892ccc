//! Procedurally generated navigation worlds, episodes, observations and
//! templated instructions.

pub mod graph;
pub mod instruction;
pub mod labels;

mod episode;
mod observe;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub use episode::{sample_episode, sample_episode_with, EpisodeSpec, DEFAULT_MAX_LEN, DEFAULT_MIN_LEN};
pub use instruction::{max_instruction_tokens, render_instruction, Instruction, Turn, Vocab, CLS, L_MAX, MASK, PAD};
pub use labels::{Landmark, Room};
pub use observe::{observe, oracle_action, oracle_next_node, wrap_angle, Candidate, Observation};

pub const WORLD_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    ValSeen,
    ValUnseen,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::ValSeen => "val_seen",
            SplitTag::ValUnseen => "val_unseen",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val_seen" => Ok(SplitTag::ValSeen),
            "val_unseen" => Ok(SplitTag::ValUnseen),
            other => Err(Error::Input(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub position: [f64; 2],
    pub room: Room,
    pub landmarks: Vec<Landmark>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Knobs of the generator. `generate_world` uses the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub n_nodes: usize,
    pub max_degree: usize,
    /// Node feature width.
    pub feature_dim: usize,
    /// Minimum distance between node positions; kept above the success
    /// radius so that only the goal itself lies within it.
    pub min_separation: f64,
    pub area_per_node: f64,
    /// Degree the nearest-neighbour stitching aims for.
    pub target_degree: usize,
    /// Only the first `room_kinds` room labels are used.
    pub room_kinds: usize,
    pub max_landmarks: usize,
    pub landmark_weight: f64,
    pub noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            max_degree: 5,
            feature_dim: 64,
            min_separation: 4.0,
            area_per_node: 40.0,
            target_degree: 3,
            room_kinds: labels::ROOMS.len(),
            max_landmarks: 2,
            landmark_weight: 0.7,
            noise: 0.1,
        }
    }
}

/// Undirected geometric graph with labelled nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "WorldFile", into = "WorldFile")]
pub struct World {
    pub seed: u64,
    pub split: SplitTag,
    pub max_degree: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, f64)>>,
    distances: OnceLock<Vec<f64>>,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.split == other.split
            && self.max_degree == other.max_degree
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct WorldFile {
    format: u32,
    seed: u64,
    split: SplitTag,
    max_degree: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl From<WorldFile> for World {
    fn from(f: WorldFile) -> Self {
        World::assemble(f.seed, f.split, f.max_degree, f.nodes, f.edges)
    }
}

impl From<World> for WorldFile {
    fn from(w: World) -> Self {
        WorldFile {
            format: WORLD_FORMAT,
            seed: w.seed,
            split: w.split,
            max_degree: w.max_degree,
            nodes: w.nodes,
            edges: w.edges,
        }
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Grid on which edge lengths live: multiples of 2^-20 m.
const LENGTH_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

/// Euclidean distance snapped to the length grid. Sums and differences of
/// snapped lengths are exact in f64, so path lengths do not depend on
/// summation order.
pub fn edge_length_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    (euclid(a, b) / LENGTH_QUANTUM).round() * LENGTH_QUANTUM
}

impl World {
    fn assemble(seed: u64, split: SplitTag, max_degree: usize, nodes: Vec<Node>, edges: Vec<Edge>) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            adjacency[e.a].push((e.b, e.length));
            adjacency[e.b].push((e.a, e.length));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|(n, _)| *n);
        }
        World {
            seed,
            split,
            max_degree,
            nodes,
            edges,
            adjacency,
            distances: OnceLock::new(),
        }
    }

    /// Builds a world from explicit positions and an edge list; edge lengths
    /// are the Euclidean distances. Node features are zero unless given.
    pub fn from_layout(positions: &[[f64; 2]], edges: &[(usize, usize)], feature_dim: usize) -> Result<Self> {
        let nodes = positions
            .iter()
            .enumerate()
            .map(|(id, &position)| Node {
                id,
                position,
                room: Room(0),
                landmarks: vec![],
                feature: vec![0.0; feature_dim],
            })
            .collect::<Vec<_>>();
        let mut out = Vec::new();
        for &(a, b) in edges {
            if a >= nodes.len() || b >= nodes.len() || a == b {
                return Err(Error::Input(format!("bad edge ({a}, {b})")));
            }
            out.push(Edge {
                a: a.min(b),
                b: a.max(b),
                length: edge_length_between(positions[a], positions[b]),
            });
        }
        let max_degree = {
            let mut deg = vec![0; nodes.len()];
            for e in &out {
                deg[e.a] += 1;
                deg[e.b] += 1;
            }
            deg.into_iter().max().unwrap_or(0)
        };
        Ok(Self::assemble(0, SplitTag::Train, max_degree, nodes, out))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feature.len())
    }

    /// Neighbours of `node` with edge lengths, sorted by id.
    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn adjacency(&self) -> &[Vec<(usize, f64)>] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency[a].iter().find(|(n, _)| *n == b).map(|(_, w)| *w)
    }

    fn distance_table(&self) -> &[f64] {
        self.distances.get_or_init(|| {
            let n = self.len();
            let mut table = Vec::with_capacity(n * n);
            for s in 0..n {
                table.extend(graph::dijkstra(&self.adjacency, s));
            }
            table
        })
    }

    /// Geodesic (graph) distance in meters.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distance_table()[a * self.len() + b]
    }

    /// Distances from every node to `goal`.
    pub fn distances_to(&self, goal: usize) -> &[f64] {
        let n = self.len();
        // symmetric graph: row `goal` doubles as the column
        &self.distance_table()[goal * n..(goal + 1) * n]
    }

    pub fn shortest_path(&self, start: usize, goal: usize) -> Option<Vec<usize>> {
        graph::shortest_path(&self.adjacency, self.distances_to(goal), start)
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || graph::dijkstra(&self.adjacency, 0).iter().all(|d| d.is_finite())
    }

    pub fn heading(&self, from: usize, to: usize) -> f64 {
        let a = self.nodes[from].position;
        let b = self.nodes[to].position;
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_u64()) {
            Some(f) if f == WORLD_FORMAT as u64 => {}
            other => return Err(Error::Input(format!("unsupported world format {other:?}"))),
        }
        let world: World = serde_json::from_value(value)?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Input(format!("node {i} has id {}", n.id)));
            }
        }
        for e in &self.edges {
            if e.a >= self.len() || e.b >= self.len() {
                return Err(Error::Input(format!("edge ({}, {}) out of range", e.a, e.b)));
            }
        }
        Ok(())
    }
}

/// Generates a world with default parameters apart from size and degree cap.
pub fn generate_world(seed: u64, n_nodes: usize, max_degree: usize) -> Result<World> {
    let params = WorldParams {
        n_nodes,
        max_degree,
        ..WorldParams::default()
    };
    generate_world_with(seed, SplitTag::Train, &params)
}

/// Random points with a minimum separation, nearest-neighbour stitching,
/// then connectivity repair. Deterministic in `seed`.
pub fn generate_world_with(seed: u64, split: SplitTag, params: &WorldParams) -> Result<World> {
    let n = params.n_nodes;
    if n < 8 {
        return Err(Error::Generation(format!("need at least 8 nodes, got {n}")));
    }
    if params.max_degree < 2 {
        return Err(Error::Generation(format!(
            "max_degree {} cannot give every node degree >= 2",
            params.max_degree
        )));
    }
    if params.room_kinds == 0 || params.room_kinds > labels::ROOMS.len() {
        return Err(Error::Generation(format!("room_kinds {} out of range", params.room_kinds)));
    }
    let mut rng = stream(seed, Purpose::World, 0, 0);
    let side = (n as f64 * params.area_per_node).sqrt();

    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut tries = 0;
    while positions.len() < n {
        tries += 1;
        if tries > 2000 * n {
            return Err(Error::Generation("could not place nodes with the requested separation".into()));
        }
        let p = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        if positions.iter().all(|q| euclid(p, *q) >= params.min_separation) {
            positions.push(p);
        }
    }

    let max_deg = params.max_degree;
    let target = params.target_degree.clamp(2, max_deg);
    let mut deg = vec![0usize; n];
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();

    let mut by_distance: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                euclid(positions[i], positions[a])
                    .total_cmp(&euclid(positions[i], positions[b]))
                    .then(a.cmp(&b))
            });
            others
        })
        .collect();
    for list in &mut by_distance {
        list.truncate(target + 2);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for &j in &by_distance[i] {
            let key = (i.min(j), i.max(j));
            if !pairs.contains(&key) {
                pairs.push(key);
            }
        }
    }
    pairs.sort_by(|&(a, b), &(c, d)| {
        euclid(positions[a], positions[b])
            .total_cmp(&euclid(positions[c], positions[d]))
            .then((a, b).cmp(&(c, d)))
    });
    let add = |a: usize, b: usize, deg: &mut Vec<usize>, edges: &mut BTreeSet<(usize, usize)>| {
        edges.insert((a.min(b), a.max(b)));
        deg[a] += 1;
        deg[b] += 1;
    };
    for &(a, b) in &pairs {
        if (deg[a] < target || deg[b] < target) && deg[a] < max_deg && deg[b] < max_deg {
            add(a, b, &mut deg, &mut edges);
        }
    }

    // every node needs degree >= 2
    for i in 0..n {
        while deg[i] < 2 {
            let candidate = (0..n)
                .filter(|&j| j != i && deg[j] < max_deg && !edges.contains(&(i.min(j), i.max(j))))
                .min_by(|&a, &b| {
                    euclid(positions[i], positions[a])
                        .total_cmp(&euclid(positions[i], positions[b]))
                        .then(a.cmp(&b))
                });
            match candidate {
                Some(j) => add(i, j, &mut deg, &mut edges),
                None => return Err(Error::Generation(format!("node {i} cannot reach degree 2"))),
            }
        }
    }

    // connectivity repair: join the component of node 0 to its nearest outsider
    loop {
        let mut comp = vec![false; n];
        let mut stack = vec![0];
        comp[0] = true;
        while let Some(u) = stack.pop() {
            for &(a, b) in &edges {
                let v = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if !comp[v] {
                    comp[v] = true;
                    stack.push(v);
                }
            }
        }
        if comp.iter().all(|c| *c) {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for u in (0..n).filter(|&u| comp[u] && deg[u] < max_deg) {
            for v in (0..n).filter(|&v| !comp[v] && deg[v] < max_deg) {
                let d = euclid(positions[u], positions[v]);
                if best.is_none_or(|(bd, bu, bv)| (d, u, v) < (bd, bu, bv)) {
                    best = Some((d, u, v));
                }
            }
        }
        match best {
            Some((_, u, v)) => add(u, v, &mut deg, &mut edges),
            None => return Err(Error::Generation("degree cap prevents connecting the graph".into())),
        }
    }

    let nodes = (0..n)
        .map(|id| {
            let room = Room(rng.random_range(0..params.room_kinds) as u8);
            let count = rng.random_range(0..=params.max_landmarks.min(labels::LANDMARKS.len()));
            let mut landmarks: Vec<Landmark> = sample(&mut rng, labels::LANDMARKS.len(), count)
                .into_iter()
                .map(|i| Landmark(i as u8))
                .collect();
            landmarks.sort();
            let feature = node_feature(seed, id, room, &landmarks, params);
            Node {
                id,
                position: positions[id],
                room,
                landmarks,
                feature,
            }
        })
        .collect();
    let edges = edges
        .into_iter()
        .map(|(a, b)| Edge {
            a,
            b,
            length: edge_length_between(positions[a], positions[b]),
        })
        .collect();
    Ok(World::assemble(seed, split, max_deg, nodes, edges))
}

/// Label embedding plus per-node noise; a pure function of its arguments.
pub fn node_feature(world_seed: u64, node_id: usize, room: Room, landmarks: &[Landmark], params: &WorldParams) -> Vec<f64> {
    let dim = params.feature_dim;
    let mut f = labels::room_embedding(room, dim);
    for &l in landmarks {
        for (x, e) in f.iter_mut().zip(labels::landmark_embedding(l, dim)) {
            *x += params.landmark_weight * e;
        }
    }
    let mut rng = stream(world_seed, Purpose::Labels, 2, node_id as u64);
    for x in &mut f {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += params.noise * z;
    }
    f
}

#[cfg(test)]
mod tests;

//! Shortest-path utilities over a weighted adjacency list.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Distances within this tolerance count as ties.
pub const PATH_EPS: f64 = 1e-9;

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra. Unreachable nodes get `f64::INFINITY`.
pub fn dijkstra(adjacency: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier { dist: 0.0, node: source });
    while let Some(Frontier { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adjacency[node] {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(Frontier { dist: nd, node: next });
            }
        }
    }
    dist
}

/// Next hop from `current` along a shortest path to the node whose distance
/// row is `to_goal`; lowest node id wins ties. `None` at the goal itself.
pub fn next_hop(adjacency: &[Vec<(usize, f64)>], to_goal: &[f64], current: usize) -> Option<usize> {
    if to_goal[current] == 0.0 {
        return None;
    }
    adjacency[current]
        .iter()
        .filter(|(n, w)| (w + to_goal[*n] - to_goal[current]).abs() <= PATH_EPS)
        .map(|(n, _)| *n)
        .min()
}

/// Shortest path as a node list, following [`next_hop`] from `start`.
pub fn shortest_path(adjacency: &[Vec<(usize, f64)>], to_goal: &[f64], start: usize) -> Option<Vec<usize>> {
    if !to_goal[start].is_finite() {
        return None;
    }
    let mut path = vec![start];
    let mut cur = start;
    while let Some(n) = next_hop(adjacency, to_goal, cur) {
        path.push(n);
        cur = n;
        if path.len() > adjacency.len() {
            return None;
        }
    }
    Some(path)
}

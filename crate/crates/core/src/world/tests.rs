use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;

fn small_params(n: usize) -> WorldParams {
    WorldParams {
        n_nodes: n,
        max_degree: 4,
        feature_dim: 8,
        ..WorldParams::default()
    }
}

/// Minimum path length between `a` and `b` by enumerating every simple path.
fn brute_force_distance(world: &World, a: usize, b: usize) -> (f64, usize) {
    fn walk(world: &World, cur: usize, goal: usize, seen: &mut Vec<bool>, len: f64, hops: usize, best: &mut (f64, usize)) {
        if cur == goal {
            if len < best.0 - 1e-12 || ((len - best.0).abs() <= 1e-12 && hops < best.1) {
                *best = (len, hops);
            }
            return;
        }
        for &(n, w) in world.neighbors(cur) {
            if !seen[n] {
                seen[n] = true;
                walk(world, n, goal, seen, len + w, hops + 1, best);
                seen[n] = false;
            }
        }
    }
    let mut seen = vec![false; world.len()];
    seen[a] = true;
    let mut best = (f64::INFINITY, usize::MAX);
    walk(world, a, b, &mut seen, 0.0, 0, &mut best);
    best
}

#[test]
fn generation_is_deterministic() {
    let a = generate_world(42, 50, 5).unwrap();
    let b = generate_world(42, 50, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn degree_and_connectivity_constraints() {
    for seed in 0..20 {
        let w = generate_world(seed, 50, 5).unwrap();
        assert!(w.is_connected(), "seed {seed}");
        for n in 0..w.len() {
            let d = w.degree(n);
            assert!((2..=5).contains(&d), "seed {seed} node {n} degree {d}");
        }
        for e in &w.edges {
            let pa = w.nodes[e.a].position;
            let pb = w.nodes[e.b].position;
            let euclid = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            assert!((e.length - euclid).abs() <= 1e-6);
            assert_eq!(e.length, edge_length_between(pa, pb));
        }
        assert!(w.nodes.iter().all(|n| n.feature.len() == 64));
    }
}

#[test]
fn different_seeds_give_different_layouts() {
    let mut seen = HashSet::new();
    for seed in 0..100u64 {
        let w = generate_world(seed, 20, 4).unwrap();
        let mut key: Vec<(u64, u64)> = w
            .nodes
            .iter()
            .map(|n| (n.position[0].to_bits(), n.position[1].to_bits()))
            .collect();
        key.sort();
        assert!(seen.insert(key), "seed {seed} repeats an earlier layout");
    }
}

#[test]
fn unsatisfiable_constraints_rejected() {
    assert!(matches!(generate_world(1, 5, 4), Err(Error::Generation(_))));
    assert!(matches!(generate_world(1, 20, 1), Err(Error::Generation(_))));
}

#[test]
fn node_features_are_pure_functions_of_labels_seed_and_id() {
    let p = WorldParams::default();
    let w = generate_world(3, 30, 5).unwrap();
    for n in &w.nodes {
        assert_eq!(n.feature, node_feature(3, n.id, n.room, &n.landmarks, &p));
    }
}

#[test]
fn dijkstra_matches_exhaustive_enumeration() {
    let w = generate_world_with(5, SplitTag::Train, &small_params(10)).unwrap();
    for a in 0..w.len() {
        for b in 0..w.len() {
            let (bf, _) = brute_force_distance(&w, a, b);
            assert_eq!(w.distance(a, b), bf, "{a}->{b}");
            assert_eq!(w.distance(a, b), w.distance(b, a));
            let path = w.shortest_path(a, b).unwrap();
            let len: f64 = path.windows(2).map(|h| w.edge_length(h[0], h[1]).unwrap()).sum();
            assert!((len - bf).abs() < 1e-9);
        }
    }
}

#[test]
fn episode_length_bounds() {
    let w = generate_world(9, 50, 5).unwrap();
    for seed in 0..30 {
        let ep = sample_episode(&w, seed, 4, 4).unwrap();
        assert_eq!(ep.gt_path.len(), 5);
        assert_eq!(ep.gt_path[0], ep.start);
        assert_eq!(*ep.gt_path.last().unwrap(), ep.goal);
        let ep = sample_episode(&w, seed, DEFAULT_MIN_LEN, DEFAULT_MAX_LEN).unwrap();
        assert!((4..=7).contains(&ep.hops()));
        let len: f64 = ep.gt_path.windows(2).map(|h| w.edge_length(h[0], h[1]).unwrap()).sum();
        assert!((len - w.distance(ep.start, ep.goal)).abs() < 1e-9);
    }
}

#[test]
fn sampling_fails_when_no_goal_in_range() {
    let w = generate_world_with(5, SplitTag::Train, &small_params(10)).unwrap();
    assert!(matches!(sample_episode(&w, 0, 40, 45), Err(Error::Sampling(_))));
}

#[test]
fn one_hop_instruction_has_move_and_stop_clause() {
    let w = generate_world(4, 30, 5).unwrap();
    let ep = sample_episode(&w, 2, 1, 1).unwrap();
    let text = ep.instruction.text();
    let words: Vec<&str> = text.split(' ').collect();
    assert_eq!(words[0], "[CLS]");
    let vocab = Vocab::get();
    let starts = ["turn", "go", "head", "walk"];
    let moves = words.iter().filter(|w| starts.contains(w)).count();
    assert_eq!(moves, 1, "{text}");
    assert_eq!(words.iter().filter(|w| **w == "stop").count(), 1);
    assert_eq!(words.len(), 1 + 5 + 4);
    assert!(ep.instruction.tokens.iter().all(|t| (*t as usize) < vocab.len()));
}

#[test]
fn instruction_is_deterministic_and_bounded() {
    let w = generate_world(8, 60, 5).unwrap();
    for seed in 0..50 {
        let a = sample_episode(&w, seed, 7, 7);
        let Ok(a) = a else { continue };
        let b = sample_episode(&w, seed, 7, 7).unwrap();
        assert_eq!(a.instruction, b.instruction);
        assert!(a.instruction.len() <= L_MAX);
        let again = render_instruction(&w, &a.gt_path, a.start_heading, 99).unwrap();
        assert_eq!(again, render_instruction(&w, &a.gt_path, a.start_heading, 99).unwrap());
    }
}

#[test]
fn observe_stop_first_and_sorted_headings() {
    let w = generate_world(6, 40, 5).unwrap();
    for node in 0..w.len() {
        let obs = observe(&w, node, 0.3);
        assert_eq!(obs.len(), w.degree(node) + 1);
        let stop = &obs.candidates[0];
        assert!(stop.target.is_none() && stop.heading == 0.0 && stop.elevation == 0.0);
        assert!(stop.feature.iter().all(|x| *x == 0.0));
        for pair in obs.candidates[1..].windows(2) {
            assert!(pair[0].heading < pair[1].heading);
        }
        for c in &obs.candidates[1..] {
            assert!((-PI..PI).contains(&c.heading));
        }
    }
}

#[test]
fn degree_three_node_has_four_candidates() {
    let w = World::from_layout(
        &[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [-5.0, 0.0]],
        &[(0, 1), (0, 2), (0, 3)],
        4,
    )
    .unwrap();
    let obs = observe(&w, 0, 0.0);
    assert_eq!(obs.len(), 4);
    // east = 0, north = pi/2, west wraps to -pi
    let heads: Vec<f64> = obs.candidates[1..].iter().map(|c| c.heading).collect();
    assert_eq!(obs.candidates[1].target, Some(3));
    assert!((heads[0] + PI).abs() < 1e-12 && heads[1].abs() < 1e-12 && (heads[2] - PI / 2.0).abs() < 1e-12);
}

#[test]
fn oracle_rollout_reaches_goal() {
    let w = generate_world(10, 50, 5).unwrap();
    for seed in 0..40 {
        let ep = sample_episode(&w, seed, 4, 7).unwrap();
        let mut node = ep.start;
        let mut heading = ep.start_heading;
        let mut visited = vec![node];
        for _ in 0..=ep.gt_path.len() {
            let a = oracle_action(&w, &ep, node, heading);
            if a == 0 {
                break;
            }
            let obs = observe(&w, node, heading);
            let next = obs.candidates[a].target.unwrap();
            heading = w.heading(node, next);
            node = next;
            visited.push(node);
        }
        assert_eq!(node, ep.goal);
        assert_eq!(visited, ep.gt_path);
        assert_eq!(oracle_action(&w, &ep, ep.goal, 1.0), 0);
    }
}

#[test]
fn oracle_on_gt_path_points_to_next_node() {
    let w = generate_world(12, 50, 5).unwrap();
    let ep = sample_episode(&w, 1, 4, 7).unwrap();
    for pair in ep.gt_path.windows(2) {
        assert_eq!(oracle_next_node(&w, &ep, pair[0]), Some(pair[1]));
    }
    assert_eq!(oracle_next_node(&w, &ep, ep.goal), None);
}

#[test]
fn world_json_round_trip_and_format_check() {
    let w = generate_world(13, 20, 4).unwrap();
    let text = w.to_json().unwrap();
    let back = World::from_json(&text).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.to_json().unwrap(), text);
    let bad = text.replacen("\"format\": 1", "\"format\": 2", 1);
    assert!(World::from_json(&bad).is_err());
    let ep = sample_episode(&w, 3, 2, 4).unwrap();
    assert_eq!(EpisodeSpec::from_json(&ep.to_json().unwrap()).unwrap(), ep);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotating_heading_shifts_candidate_angles(seed in 0u64..50, node in 0usize..30, h in -3.0f64..3.0, delta in -6.0f64..6.0) {
        let w = generate_world(seed, 30, 5).unwrap();
        let base = observe(&w, node, h);
        let rotated = observe(&w, node, h + delta);
        for c in &base.candidates[1..] {
            let r = rotated.candidates.iter().find(|r| r.target == c.target).unwrap();
            let diff = wrap_angle(r.heading - (c.heading - delta));
            prop_assert!(diff.abs() < 1e-9);
        }
    }
}

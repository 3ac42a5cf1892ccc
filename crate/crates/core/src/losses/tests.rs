use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::model::{ModelConfig, Mtvm, Policy, RolloutOptions, run_episode_with};
use crate::rng::{stream, Purpose};
use crate::world::{generate_world_with, sample_episode, SplitTag, WorldParams, CLS, PAD};

fn dist(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn line_world() -> World {
    World::from_layout(&[[0.0, 0.0], [2.0, 0.0], [4.5, 0.0], [8.0, 0.0]], &[(0, 1), (1, 2), (2, 3)], 4).unwrap()
}

fn line_spec(world: &World, start: usize, goal: usize) -> EpisodeSpec {
    let gt_path = world.shortest_path(start, goal).unwrap();
    EpisodeSpec {
        format: 1,
        world_seed: 0,
        start,
        goal,
        start_heading: 0.0,
        instruction: crate::world::render_instruction(world, &gt_path, 0.0, 0).unwrap(),
        gt_path,
        success_radius: 3.0,
    }
}

#[test]
fn random_drop_extremes_and_rate() {
    let ins = Instruction::new(vec![CLS, 5, 6, 7, 8, PAD, PAD]).unwrap();
    let mut rng = stream(0, Purpose::WordDrop, 0, 0);
    assert_eq!(random_drop(&ins, 0.0, &mut rng), ins);
    let all = random_drop(&ins, 1.0, &mut rng);
    assert_eq!(all.tokens, vec![CLS, MASK, MASK, MASK, MASK, PAD, PAD]);
    let long = Instruction::new((0..10_000).map(|i| 3 + (i % 30) as u16).collect()).unwrap();
    let dropped = random_drop(&long, 0.5, &mut rng);
    let frac = dropped.tokens.iter().filter(|t| **t == MASK).count() as f64 / 10_000.0;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    let mut a = stream(7, Purpose::WordDrop, 1, 2);
    let mut b = stream(7, Purpose::WordDrop, 1, 2);
    assert_eq!(random_drop(&long, 0.3, &mut a), random_drop(&long, 0.3, &mut b));
}

#[test]
fn random_drop_counter_is_per_thread() {
    let before = random_drop_calls();
    let ins = Instruction::new(vec![CLS, 5]).unwrap();
    random_drop(&ins, 0.5, &mut stream(0, Purpose::WordDrop, 0, 0));
    assert_eq!(random_drop_calls(), before + 1);
    let other = std::thread::spawn(random_drop_calls).join().unwrap();
    assert_eq!(other, 0);
}

#[test]
fn token_distributions_are_rows_of_probabilities() {
    let p = token_distributions(&Tensor::zeros(&[3, 4]));
    assert!(p.data().iter().all(|x| (*x - 0.25).abs() < 1e-15));
    let h = dist(&[vec![1.0, -2.0, 0.5], vec![3.0, 3.0, -9.0]]);
    let shifted = dist(&[vec![11.0, 8.0, 10.5], vec![-1.0, -1.0, -13.0]]);
    let (a, b) = (token_distributions(&h), token_distributions(&shifted));
    for r in 0..2 {
        assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn bidirectional_kl_hand_example() {
    let p = dist(&[vec![0.5, 0.5]]);
    let q = dist(&[vec![0.25, 0.75]]);
    let v = bidirectional_kl(&p, &q).unwrap().item();
    let exact = (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln()) + (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln());
    assert!((v - exact).abs() < 1e-15);
    assert!((v - 0.2746).abs() < 1e-4);
    assert_eq!(bidirectional_kl(&q, &p).unwrap().item(), v);
    assert_eq!(bidirectional_kl(&p, &p).unwrap().item(), 0.0);
    assert!(bidirectional_kl(&p, &dist(&[vec![1.0]])).is_err());
}

#[test]
fn imitation_loss_examples() {
    let uniform = vec![Tensor::zeros(&[4]); 3];
    let l = imitation_loss(&uniform, &[0, 1, 3]).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let sure = vec![Tensor::from_vec(vec![60.0, -60.0], &[2]).unwrap()];
    let l = imitation_loss(&sure, &[0]).unwrap().item();
    assert!((0.0..1e-12).contains(&l));
    let wrong = imitation_loss(&sure, &[1]).unwrap().item();
    assert!(wrong.is_finite() && wrong > 100.0);
}

#[test]
fn rewards_on_a_line() {
    let w = line_world();
    let spec = line_spec(&w, 0, 3);
    let cfg = RewardConfig::default();
    // oracle: 0 -> 1 -> 2 -> 3 then stop
    let r = step_rewards(&w, &spec, &[0, 1, 2, 3], 4, &cfg).unwrap();
    assert_eq!(r.intermediate, vec![2.0, 2.5, 3.5, 0.0]);
    assert!(r.intermediate[..3].iter().all(|x| *x > 0.0));
    assert!(r.success);
    assert_eq!(r.ndtw, 1.0);
    assert_eq!(r.total[3], 2.0 + 0.5);
    // moving away one 2 m edge
    let spec = line_spec(&w, 1, 3);
    let r = step_rewards(&w, &spec, &[1, 0], 2, &cfg).unwrap();
    assert_eq!(r.intermediate[0], -2.0);
    // stop at start, goal far away: only the fidelity term
    let spec = line_spec(&w, 0, 3);
    let r = step_rewards(&w, &spec, &[0], 1, &cfg).unwrap();
    assert!(!r.success);
    assert_eq!(r.intermediate, vec![0.0]);
    assert_eq!(r.total, vec![cfg.fidelity_weight * r.ndtw]);
    assert!(r.ndtw > 0.0 && r.ndtw < 1.0);
}

#[test]
fn discounted_returns_match_brute_force() {
    let mut rng = stream(3, Purpose::Fixture, 0, 0);
    let r: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let g = discounted_returns(&r, 0.9);
    for t in 0..5 {
        let brute: f64 = (t..5).map(|tau| 0.9f64.powi((tau - t) as i32) * r[tau]).sum();
        assert!((g[t] - brute).abs() < 1e-12);
    }
}

#[test]
fn a2c_examples() {
    let cfg = RewardConfig::default();
    let logits = vec![Tensor::param(vec![0.3, -0.2, 1.0], &[3]).unwrap()];
    let value = vec![Tensor::param(vec![0.0], &[]).unwrap()];
    let t = a2c_loss(&logits, &value, &[2], &[1.0], &cfg).unwrap();
    let logp = logits[0].log_softmax().data()[2];
    assert!((t.policy.item() + logp).abs() < 1e-15);
    assert_eq!(t.advantages, vec![1.0]);
    assert!((t.total.item() - (-logp + 0.5)).abs() < 1e-15);
    // value equal to the return gives a zero policy term
    let value = vec![Tensor::param(vec![1.0], &[]).unwrap()];
    let t = a2c_loss(&logits, &value, &[2], &[1.0], &cfg).unwrap();
    assert_eq!(t.policy.item(), 0.0);
    assert_eq!(t.value.item(), 0.0);
    // advantage is a constant: only the value term reaches the value head
    t.total.backward().unwrap();
    assert_eq!(value[0].grad().unwrap(), vec![0.0]);
}

fn tiny_setup(seed: u64) -> (Mtvm, World) {
    let params = WorldParams { n_nodes: 16, feature_dim: 4, ..WorldParams::default() };
    let world = generate_world_with(seed, SplitTag::Train, &params).unwrap();
    (Mtvm::new(ModelConfig { d_v: 4, ..ModelConfig::tiny() }, seed).unwrap(), world)
}

#[test]
fn consistency_vanishes_without_dropping() {
    let (model, world) = tiny_setup(1);
    let spec = sample_episode(&world, 0, 3, 5).unwrap();
    let same = random_drop(&spec.instruction, 0.0, &mut stream(0, Purpose::WordDrop, 0, 0));
    let opts = RolloutOptions { masked: Some(same), keep_graph: true, ..RolloutOptions::inference(Policy::Teacher) };
    let trace = run_episode_with(&model, &world, &spec, &opts, &mut stream(0, Purpose::Rollout, 0, 0)).unwrap();
    let (lang, lang_m) = (trace.lang.as_ref().unwrap(), trace.lang_masked.as_ref().unwrap());
    let w = LossWeights::default();
    for g in &trace.graph {
        let c = consistency_loss(lang, &g.full, lang_m, g.masked.as_ref().unwrap(), &w).unwrap();
        assert_eq!(c.total.item(), 0.0);
        model.params().zero_grad();
        c.total.backward().unwrap();
        for (_, p) in model.params().iter() {
            if let Some(g) = p.value.grad() {
                assert!(g.iter().all(|x| x.abs() <= 1e-12), "{}", p.name);
            }
        }
    }
}

#[test]
fn consistency_weights_zero_gives_zero() {
    let (model, world) = tiny_setup(2);
    let spec = sample_episode(&world, 1, 3, 5).unwrap();
    let masked = random_drop(&spec.instruction, 1.0, &mut stream(0, Purpose::WordDrop, 0, 0));
    let opts = RolloutOptions { masked: Some(masked), keep_graph: true, ..RolloutOptions::inference(Policy::Teacher) };
    let trace = run_episode_with(&model, &world, &spec, &opts, &mut stream(0, Purpose::Rollout, 0, 0)).unwrap();
    let zero = LossWeights { lambda_s: 0.0, lambda_m: 0.0, ..LossWeights::default() };
    let g = &trace.graph[0];
    let (lang, lang_m) = (trace.lang.as_ref().unwrap(), trace.lang_masked.as_ref().unwrap());
    assert_eq!(consistency_loss(lang, &g.full, lang_m, g.masked.as_ref().unwrap(), &zero).unwrap().total.item(), 0.0);
    let on = consistency_loss(lang, &g.full, lang_m, g.masked.as_ref().unwrap(), &LossWeights::default()).unwrap();
    assert!(on.total.item() > 0.0);
}

#[test]
fn dropped_positions_are_not_compared() {
    let (model, world) = tiny_setup(4);
    let spec = sample_episode(&world, 2, 3, 5).unwrap();
    // every word dropped: only the [CLS] row of the language stream is left
    let masked = random_drop(&spec.instruction, 1.0, &mut stream(0, Purpose::WordDrop, 0, 0));
    let opts = RolloutOptions { masked: Some(masked), keep_graph: true, ..RolloutOptions::inference(Policy::Teacher) };
    let trace = run_episode_with(&model, &world, &spec, &opts, &mut stream(0, Purpose::Rollout, 0, 0)).unwrap();
    let (lang, lang_m) = (trace.lang.as_ref().unwrap(), trace.lang_masked.as_ref().unwrap());
    let g = &trace.graph[1];
    let c = consistency_loss(lang, &g.full, lang_m, g.masked.as_ref().unwrap(), &LossWeights::default()).unwrap();
    let cls = |x: &Tensor| token_distributions(&x.slice_rows(0, 1).unwrap());
    let expected = bidirectional_kl(&cls(&lang.x), &cls(&lang_m.x)).unwrap().item();
    assert!((c.language.item() - expected).abs() < 1e-12);
    let l = lang.x.rows();
    let rest = |s: &crate::model::StepOutput| {
        let all = s.all_tokens().unwrap();
        let kept = [all.slice_rows(0, 1).unwrap(), all.slice_rows(l, all.rows() - l).unwrap()];
        token_distributions(&Tensor::concat_rows(&kept).unwrap())
    };
    let expected = bidirectional_kl(&rest(&g.full), &rest(g.masked.as_ref().unwrap())).unwrap().item();
    assert!((c.cross.item() - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_nonnegative_and_symmetric(rows in 1usize..5, cols in 2usize..6, seed in any::<u64>(), scale in 0.1f64..60.0) {
        let mut rng = stream(seed, Purpose::Fixture, 0, 0);
        let mut gen = || -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()).collect()
        };
        let p = token_distributions(&dist(&gen()));
        let q = token_distributions(&dist(&gen()));
        let a = bidirectional_kl(&p, &q).unwrap().item();
        prop_assert!(a >= 0.0 && a.is_finite());
        prop_assert_eq!(a, bidirectional_kl(&q, &p).unwrap().item());
    }

    #[test]
    fn saturated_logits_keep_losses_finite(k in 1usize..6, sign in any::<bool>(), seed in any::<u64>(), gamma in 0.0f64..=1.0) {
        let mut rng = stream(seed, Purpose::Fixture, 0, 0);
        let s = if sign { 50.0 } else { -50.0 };
        let logits: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_vec((0..k).map(|i| if rng.random::<bool>() { s } else { -s * (i as f64) }).collect(), &[k]).unwrap())
            .collect();
        let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..k)).collect();
        let il = imitation_loss(&logits, &actions).unwrap().item();
        prop_assert!(il.is_finite() && il >= 0.0);
        let values = vec![Tensor::scalar(50.0); 4];
        let cfg = RewardConfig { gamma, ..RewardConfig::default() };
        let a2c = a2c_loss(&logits, &values, &actions, &[1.0, -2.0, 0.5, 2.5], &cfg).unwrap();
        prop_assert!(a2c.total.item().is_finite());
        let probs: Vec<Tensor> = logits.iter().map(|l| l.reshape(&[1, k]).unwrap().softmax_last()).collect();
        let kl = bidirectional_kl(&probs[0], &probs[1]).unwrap().item();
        prop_assert!(kl.is_finite() && kl >= 0.0);
    }
}

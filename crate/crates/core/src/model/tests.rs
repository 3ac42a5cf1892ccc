use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::stream;
use crate::world::{generate_world_with, sample_episode, Candidate, SplitTag, World, WorldParams, CLS, MASK};

fn small_cfg() -> ModelConfig {
    ModelConfig { d_model: 16, n_heads: 2, d_v: 8, d_ff: 24, ..ModelConfig::default() }
}

fn small_world(seed: u64) -> World {
    let params = WorldParams { n_nodes: 30, feature_dim: 8, ..WorldParams::default() };
    generate_world_with(seed, SplitTag::Train, &params).unwrap()
}

fn random_obs(k: usize, d_v: usize, seed: u64) -> Observation {
    let mut rng = stream(seed, Purpose::Fixture, 0, 0);
    let mut candidates = vec![Candidate { feature: vec![0.0; d_v], heading: 0.0, elevation: 0.0, target: None }];
    for i in 1..k {
        candidates.push(Candidate {
            feature: (0..d_v).map(|_| rng.random::<f64>() - 0.5).collect(),
            heading: rng.random::<f64>() * 2.0 * PI - PI,
            elevation: 0.0,
            target: Some(i),
        });
    }
    Observation { node: 0, candidates }
}

fn instr(tokens: &[u16]) -> Instruction {
    Instruction::new(tokens.to_vec()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn memory_with(model: &Mtvm, n: usize, seed: u64) -> MemoryBank {
    let mut rng = stream(seed, Purpose::Fixture, 1, 0);
    let width = model.config().d_model + model.config().d_dir;
    let mut mem = model.new_memory();
    for _ in 0..n {
        let data = (0..width).map(|_| rng.random::<f64>() - 0.5).collect();
        mem.push(Tensor::from_vec(data, &[1, width]).unwrap());
    }
    mem
}

#[test]
fn directional_feature_examples() {
    assert_eq!(directional_feature(0.0, 0.0, 8), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let f = directional_feature(PI / 2.0, 0.0, 4);
    assert!(max_abs_diff(&f, &[1.0, 0.0, 0.0, 1.0]) <= 1e-15);
    let wide = directional_feature(0.3, 0.1, 128);
    for chunk in wide.chunks(4) {
        assert_eq!(chunk, &wide[..4]);
    }
}

#[test]
fn language_encoder_shapes_and_errors() {
    let model = Mtvm::new(small_cfg(), 1).unwrap();
    let enc = model.encode_language(&instr(&[CLS, 3, 4, 5])).unwrap();
    assert_eq!(enc.x.shape(), &[4, 16]);
    let too_long = Instruction::new(vec![CLS; 41]).unwrap();
    assert!(matches!(model.encode_language(&too_long), Err(Error::Input(_))));
}

#[test]
fn swapping_tokens_changes_output() {
    let model = Mtvm::new(small_cfg(), 2).unwrap();
    let a = model.encode_language(&instr(&[CLS, 5, 9, 12])).unwrap();
    let b = model.encode_language(&instr(&[CLS, 9, 5, 12])).unwrap();
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.x.sub(&b.x).unwrap();
    assert!(norm(&diff) > 0.0);
}

#[test]
fn padding_does_not_leak_into_real_rows() {
    let model = Mtvm::new(small_cfg(), 3).unwrap();
    let base = instr(&[CLS, 5, 9, 12, 7]);
    let short = model.encode_language(&base.padded(8)).unwrap();
    let long = model.encode_language(&base.padded(30)).unwrap();
    for r in 0..5 {
        assert_eq!(short.x.row(r), long.x.row(r));
    }
    // the cross-modal encoder must be equally blind to padding
    let obs = random_obs(3, 8, 0);
    let v = model.encode_vision(&obs).unwrap();
    let mem = memory_with(&model, 2, 0);
    let a = model.cross_modality_forward(&short, &mem, &v).unwrap();
    let b = model.cross_modality_forward(&long, &mem, &v).unwrap();
    assert_eq!(a.v_hat.data(), b.v_hat.data());
    assert_eq!(a.logits.data(), b.logits.data());
}

#[test]
fn vision_encoder_is_row_wise() {
    let model = Mtvm::new(small_cfg(), 4).unwrap();
    let mut obs = random_obs(4, 8, 1);
    let v = model.encode_vision(&obs).unwrap();
    assert_eq!(v.shape(), &[4, 16]);
    obs.candidates[3] = obs.candidates[2].clone();
    let v = model.encode_vision(&obs).unwrap();
    assert_eq!(v.row(2), v.row(3));
    obs.candidates[1].feature.pop();
    assert!(model.encode_vision(&obs).is_err());
}

#[test]
fn empty_memory_matches_memory_free_stream() {
    let model = Mtvm::new(small_cfg(), 5).unwrap();
    let lang = model.encode_language(&instr(&[CLS, 5, 9])).unwrap();
    let v = model.encode_vision(&random_obs(3, 8, 2)).unwrap();
    let out = model.cross_modality_forward(&lang, &model.new_memory(), &v).unwrap();
    assert_eq!(out.m_hat.rows(), 0);
    assert_eq!(out.v_hat.shape(), &[3, 16]);
    assert_eq!(out.x_hat.shape(), &[3, 16]);
    assert_eq!(out.logits.shape(), &[3]);
    let mem = memory_with(&model, 3, 1);
    let out = model.cross_modality_forward(&lang, &mem, &v).unwrap();
    assert_eq!(out.m_hat.rows(), 3);
    assert_eq!(out.attn.len(), 2);
    assert_eq!(out.attn[0].vision_to_lang.queries, 6);
}

#[test]
fn single_direction_cross_attention_leaves_language_unqueried() {
    let cfg = ModelConfig { cross_attn: CrossAttn::Single, ..small_cfg() };
    let model = Mtvm::new(cfg, 6).unwrap();
    let lang = model.encode_language(&instr(&[CLS, 5, 9])).unwrap();
    let a = model.cross_modality_forward(&lang, &model.new_memory(), &model.encode_vision(&random_obs(3, 8, 3)).unwrap()).unwrap();
    let b = model.cross_modality_forward(&lang, &model.new_memory(), &model.encode_vision(&random_obs(4, 8, 4)).unwrap()).unwrap();
    assert_eq!(a.x_hat.data(), b.x_hat.data());
    assert!(a.attn.iter().all(|r| r.lang_to_vision.is_none()));
    assert!(model.params().lookup("cross.layer0.lang_from_vis.q.w").is_none());
}

#[test]
fn predict_action_tie_break_and_sampling() {
    let mut rng = stream(0, Purpose::Fixture, 0, 0);
    assert_eq!(predict_action(&[0.5, 0.5], ActionMode::Greedy, &mut rng), 0);
    let t = Tensor::from_vec(vec![1.0, 100.0], &[2]).unwrap().softmax_last();
    assert_eq!(predict_action(t.data(), ActionMode::Greedy, &mut rng), 1);
    let n = 10_000;
    let ones = (0..n).filter(|_| predict_action(&[0.5, 0.5], ActionMode::Sample, &mut rng) == 1).count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

#[test]
fn memory_bank_keeps_latest_tokens() {
    let model = Mtvm::new(ModelConfig { memory_capacity: MemoryCapacity::Finite(2), ..small_cfg() }, 7).unwrap();
    let lang = model.encode_language(&instr(&[CLS, 5])).unwrap();
    let v = model.encode_vision(&random_obs(3, 8, 5)).unwrap();
    let out = model.cross_modality_forward(&lang, &model.new_memory(), &v).unwrap();
    let mut mem = model.new_memory();
    for step in 1..=5 {
        model.update_memory(&mut mem, &out, 1, step as f64 * 0.1, 0.0).unwrap();
    }
    assert_eq!(mem.len(), 2);
    assert_eq!(mem.appended(), 5);
    let d = model.config().d_model;
    for (tok, step) in mem.tokens().iter().zip([4, 5]) {
        assert_eq!(&tok.data()[d..], directional_feature(step as f64 * 0.1, 0.0, 8).as_slice());
        assert_eq!(&tok.data()[..d], out.v_hat.row(1));
        assert!(!tok.requires_grad());
    }
    let mut var = MemoryBank::new(MemoryCapacity::Variable);
    for t in 0..7 {
        assert_eq!(var.len(), t);
        var.push(mem.tokens()[0].clone());
    }
}

#[test]
fn memory_backprop_flag_keeps_graph() {
    let model = Mtvm::new(ModelConfig { memory_backprop: true, ..small_cfg() }, 8).unwrap();
    let lang = model.encode_language(&instr(&[CLS, 5])).unwrap();
    let v = model.encode_vision(&random_obs(3, 8, 6)).unwrap();
    let out = model.cross_modality_forward(&lang, &model.new_memory(), &v).unwrap();
    assert!(model.memory_token(&out, 2, 0.0, 0.0).unwrap().requires_grad());
}

#[test]
fn oracle_forced_rollout_reaches_goal() {
    let world = small_world(11);
    let model = Mtvm::new(small_cfg(), 9).unwrap();
    for seed in 0..5 {
        let spec = sample_episode(&world, seed, 4, 6).unwrap();
        let mut rng = stream(seed, Purpose::Rollout, 0, 0);
        let trace = run_episode(&model, &world, &spec, Policy::Teacher, &mut rng, 15).unwrap();
        assert_eq!(trace.final_node(), spec.goal);
        assert_eq!(trace.path, spec.gt_path);
        assert!(trace.stopped);
        for (t, step) in trace.steps.iter().enumerate() {
            assert_eq!(step.memory_len, t);
            assert_eq!(step.action, step.teacher);
            assert!((step.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn greedy_rollout_is_deterministic() {
    let world = small_world(12);
    let model = Mtvm::new(small_cfg(), 10).unwrap();
    let spec = sample_episode(&world, 3, 4, 6).unwrap();
    let run = || {
        let mut rng = stream(0, Purpose::Rollout, 0, 0);
        run_episode(&model, &world, &spec, Policy::Greedy, &mut rng, 15).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.path, b.path);
    assert_eq!(a.steps, b.steps);
    assert!(a.steps.len() <= 15);
}

#[test]
fn rollout_keeps_masked_pass_on_request() {
    let world = small_world(13);
    let model = Mtvm::new(small_cfg(), 11).unwrap();
    let spec = sample_episode(&world, 1, 4, 6).unwrap();
    let masked: Vec<u16> = spec.instruction.tokens.iter().map(|t| if *t > CLS { MASK } else { *t }).collect();
    let opts = RolloutOptions {
        masked: Some(Instruction::new(masked).unwrap()),
        keep_graph: true,
        ..RolloutOptions::inference(Policy::Teacher)
    };
    let mut rng = stream(0, Purpose::Rollout, 0, 0);
    let trace = run_episode_with(&model, &world, &spec, &opts, &mut rng).unwrap();
    assert_eq!(trace.graph.len(), trace.steps.len());
    for (t, g) in trace.graph.iter().enumerate() {
        let m = g.masked.as_ref().unwrap();
        assert_eq!(m.m_hat.rows(), t);
        assert_eq!(m.v_hat.rows(), g.full.v_hat.rows());
    }
    assert!(trace.lang_masked.is_some());
}

#[test]
fn attention_export_serialises() {
    let model = Mtvm::new(small_cfg(), 12).unwrap();
    let lang = model.encode_language(&instr(&[CLS, 5, 9])).unwrap();
    let v = model.encode_vision(&random_obs(3, 8, 7)).unwrap();
    let out = model.cross_modality_forward(&lang, &memory_with(&model, 1, 2), &v).unwrap();
    let json = serde_json::to_value(&out.attn).unwrap();
    let heads = json[0]["lang_to_vision"]["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 2);
    let row: Vec<f64> = heads[0][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(row.len(), 4);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn directional_tiling_layout(theta in -10.0f64..10.0, phi in -2.0f64..2.0, reps in 1usize..40) {
        let f = directional_feature(theta, phi, 4 * reps);
        prop_assert_eq!(f.len(), 4 * reps);
        for chunk in f.chunks(4) {
            prop_assert_eq!(chunk, &[theta.sin(), theta.cos(), phi.sin(), phi.cos()][..]);
        }
    }

    #[test]
    fn memory_length_law(cap in 1usize..6, steps in 0usize..12, variable in any::<bool>()) {
        let capacity = if variable { MemoryCapacity::Variable } else { MemoryCapacity::Finite(cap) };
        let mut mem = MemoryBank::new(capacity);
        for t in 0..steps {
            prop_assert_eq!(mem.len(), capacity.len_after(t));
            mem.push(Tensor::from_vec(vec![t as f64, 0.0], &[1, 2]).unwrap());
        }
        prop_assert_eq!(mem.len(), if variable { steps } else { steps.min(cap) });
        let order: Vec<f64> = mem.tokens().iter().map(|t| t.data()[0]).collect();
        let mut sorted = order.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(order, sorted);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn candidate_permutation_equivariance(seed in 0u64..1000, k in 2usize..6, mem in 0usize..3, rot in 0usize..5) {
        let model = Mtvm::new(ModelConfig { d_model: 8, n_heads: 2, d_v: 4, d_dir: 4, d_ff: 8, lang_layers: 1, cross_layers: 1, ..ModelConfig::default() }, seed).unwrap();
        let lang = model.encode_language(&instr(&[CLS, 5, 9, 14])).unwrap();
        let obs = random_obs(k, 4, seed);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left(rot % k);
        let permuted = Observation { node: 0, candidates: perm.iter().map(|i| obs.candidates[*i].clone()).collect() };
        let memory = memory_with(&model, mem, seed);
        let a = model.cross_modality_forward(&lang, &memory, &model.encode_vision(&obs).unwrap()).unwrap();
        let b = model.cross_modality_forward(&lang, &memory, &model.encode_vision(&permuted).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((a.logits.data()[i] - b.logits.data()[j]).abs() <= 1e-12);
            prop_assert!(max_abs_diff(a.v_hat.row(i), b.v_hat.row(j)) <= 1e-12);
        }
        prop_assert!(max_abs_diff(a.x_hat.data(), b.x_hat.data()) <= 1e-12);
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

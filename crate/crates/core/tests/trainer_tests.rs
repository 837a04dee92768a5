use std::f64::consts::LN_2;

use bdlab::balancing::{BalancingConfig, Strategy};
use bdlab::data::{generate_generation_pairs, generate_understanding_pairs, DataConfig, GenerationMode};
use bdlab::dpo::PreferencePair;
use bdlab::eval::{evaluate, EvalSets};
use bdlab::model::ModelConfig;
use bdlab::optim::{clip_gradient, cosine_lr, AdamW, AdamWConfig};
use bdlab::trainer::{
    separate_adapter_eval, soup_interpolate, train, trajectory_from_csv, trajectory_to_csv, TrainConfig,
};
use bdlab::{init_model, Error, GradientVector, ModelState};

#[test]
fn schedule_endpoints() {
    assert_eq!(cosine_lr(0, 1000, 1e-3, 1e-5), 1e-3);
    assert!((cosine_lr(1000, 1000, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(500, 1000, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
}

#[test]
fn clipping_examples() {
    let g = GradientVector::from_values(vec![2.0, 0.0]);
    let c = clip_gradient(&g, 1.0);
    assert_eq!(c.values(), &[1.0, 0.0]);
    let small = GradientVector::from_values(vec![0.3, 0.4]);
    assert_eq!(clip_gradient(&small, 1.0), small);
}

#[test]
fn adamw_examples() {
    let cfg = AdamWConfig {
        eps: 0.0,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, 1);
    let mut p = [0.0];
    opt.step(&mut p, &[0.5], 0.1).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-12);

    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        1,
    );
    let mut p = [0.7];
    opt.step(&mut p, &[0.0], 0.1).unwrap();
    assert_eq!(p[0], 0.7);

    let mut opt = AdamW::new(AdamWConfig::default(), 1);
    let mut p = [1.0];
    opt.step(&mut p, &[0.0], 0.1).unwrap();
    assert!((p[0] - 0.999).abs() < 1e-15);

    let mut opt = AdamW::new(AdamWConfig::default(), 1);
    assert!(matches!(opt.step(&mut p, &[f64::NAN], 0.1), Err(Error::NonFinite(_))));
}

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        trunk_layers: 2,
        text_vocab: 16,
        code_vocab: 16,
        adapter_rank: 2,
        gen_tokens: 24,
        rng_seed: seed,
        ..ModelConfig::default()
    }
}

fn tiny_data(model: &ModelConfig) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let u = generate_understanding_pairs(
        &DataConfig {
            pair_count: 40,
            response_len_min: 8,
            response_len_max: 16,
            context_length: 6,
            ..DataConfig::understanding_default()
        },
        model,
    )
    .unwrap();
    let g = generate_generation_pairs(
        &DataConfig {
            pair_count: 20,
            context_length: 6,
            ..DataConfig::generation_default()
        },
        model,
        GenerationMode::SameDistribution,
    )
    .unwrap();
    (u, g)
}

fn tcfg(strategy: Strategy, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        balancing: BalancingConfig {
            strategy,
            gen_tokens: 24,
            mean_text_len: 12.0,
            ..BalancingConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leave_the_state_alone() {
    let model = tiny_model(1);
    let (u, g) = tiny_data(&model);
    let state = init_model(&model).unwrap();
    let out = train(state.clone(), &u, &g, &tcfg(Strategy::NaiveJoint, 0)).unwrap();
    assert!(out.trajectory.is_empty());
    assert_eq!(out.state.params(), state.params());
}

#[test]
fn every_strategy_starts_on_the_floor_and_is_deterministic() {
    let model = tiny_model(2);
    let (u, g) = tiny_data(&model);
    for strategy in Strategy::ALL {
        let cfg = tcfg(strategy, 30);
        let a = train(init_model(&model).unwrap(), &u, &g, &cfg).unwrap();
        let first = &a.trajectory[0];
        for l in [first.loss_u, first.loss_g].into_iter().flatten() {
            assert_eq!(l, LN_2, "{strategy:?}");
        }
        assert_eq!(first.loss_combined, LN_2, "{strategy:?}");
        assert_eq!(a.trajectory.len(), 30);
        let b = train(init_model(&model).unwrap(), &u, &g, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a
            .state
            .params()
            .iter()
            .zip(b.state.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(
            a.state.reference(),
            init_model(&model).unwrap().reference(),
            "reference moved"
        );
        assert_ne!(a.state.params(), a.state.reference());
    }
}

#[test]
fn grad_weighted_holds_half_until_the_interval() {
    let model = tiny_model(3);
    let (u, g) = tiny_data(&model);
    let out = train(init_model(&model).unwrap(), &u, &g, &tcfg(Strategy::GradWeighted, 60)).unwrap();
    for p in &out.trajectory[..50] {
        assert_eq!((p.w_u, p.w_g), (0.5, 0.5));
    }
    for p in &out.trajectory {
        assert!((p.w_u + p.w_g - 1.0).abs() <= 1e-12);
    }
    assert_ne!(out.trajectory[50].w_u, 0.5);
}

#[test]
fn missing_task_data_is_an_error() {
    let model = tiny_model(4);
    let (u, _) = tiny_data(&model);
    assert!(train(init_model(&model).unwrap(), &u, &[], &tcfg(Strategy::NaiveJoint, 5)).is_err());
    assert!(train(
        init_model(&model).unwrap(),
        &u,
        &[],
        &tcfg(Strategy::UnderstandingOnly, 5)
    )
    .is_ok());
}

fn trained_pair() -> (ModelState, ModelState, EvalSets) {
    let model = tiny_model(5);
    let (u, g) = tiny_data(&model);
    let su = train(
        init_model(&model).unwrap(),
        &u,
        &g,
        &tcfg(Strategy::UnderstandingOnly, 20),
    )
    .unwrap();
    let sg = train(init_model(&model).unwrap(), &u, &g, &tcfg(Strategy::GenerationOnly, 20)).unwrap();
    let sets = EvalSets {
        understanding: u[..10].to_vec(),
        generation: g[..5].to_vec(),
    };
    (su.state, sg.state, sets)
}

#[test]
fn soup_endpoints_and_midpoint() {
    let (su, sg, _) = trained_pair();
    assert_eq!(soup_interpolate(&su, &sg, 0.0).unwrap().params(), su.params());
    assert_eq!(soup_interpolate(&su, &sg, 1.0).unwrap().params(), sg.params());
    let mid = soup_interpolate(&su, &sg, 0.5).unwrap();
    let (a, b, m) = (su.trainable_values(), sg.trainable_values(), mid.trainable_values());
    for i in 0..a.len() {
        assert_eq!(m[i], 0.5 * a[i] + 0.5 * b[i]);
    }
    assert_eq!(mid.reference(), su.reference());
    assert!(soup_interpolate(&su, &sg, 1.5).is_err());

    let other = init_model(&tiny_model(99)).unwrap();
    assert!(matches!(soup_interpolate(&su, &other, 0.5), Err(Error::Domain(_))));
}

#[test]
fn composite_takes_each_task_from_its_own_state() {
    let (su, sg, sets) = trained_pair();
    let comp = separate_adapter_eval(&su, &sg, &sets).unwrap();
    assert!(comp.non_deployable);
    assert_eq!(comp.label, "separate_adapter_composite");
    assert_eq!(comp.metrics.understanding, evaluate(&su, &sets).unwrap().understanding);
    assert_eq!(comp.metrics.generation, evaluate(&sg, &sets).unwrap().generation);
    let same = separate_adapter_eval(&su, &su, &sets).unwrap();
    assert_eq!(same.metrics, evaluate(&su, &sets).unwrap());
}

#[test]
fn trajectory_csv_round_trips() {
    let model = tiny_model(6);
    let (u, g) = tiny_data(&model);
    for strategy in [Strategy::GradWeighted, Strategy::UnderstandingOnly] {
        let out = train(init_model(&model).unwrap(), &u, &g, &tcfg(strategy, 12)).unwrap();
        let csv = trajectory_to_csv(&out.trajectory);
        assert_eq!(trajectory_from_csv(&csv).unwrap(), out.trajectory);
    }
    assert!(trajectory_from_csv("step,nope\n1,2\n").is_err());
}

use rand::{Rng, SeedableRng};
use sepo_core::ctmc::{
    build_generator, GeneratorKind, NoiseSchedule, SequenceSpec, TokenGenerator, Vocab,
};
use sepo_core::estimators::{Reward, Variant};
use sepo_core::sampler::SamplerConfig;
use sepo_core::score::{ScoreModel, ScoreParams};
use sepo_core::trainer::{
    evaluate_policy, params_hash, pretrain_score, sepo_train, PretrainConfig, TrainConfig,
};

struct Setup {
    g: TokenGenerator,
    sched: NoiseSchedule,
    pre: ScoreParams,
    sampler: SamplerConfig,
}

fn setup() -> Setup {
    let sp = SequenceSpec::new(4, Vocab::new(3, None).unwrap()).unwrap();
    let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
    let sched = NoiseSchedule::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let data: Vec<Vec<usize>> = (0..64)
        .map(|_| {
            (0..4)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        0
                    } else {
                        rng.gen_range(1..3)
                    }
                })
                .collect()
        })
        .collect();
    let init = ScoreParams::for_generator(sp, &g, 1.0, 1).unwrap();
    let cfg = PretrainConfig {
        steps: 300,
        ..Default::default()
    };
    let pre = pretrain_score(&data, init, &g, &sched, &cfg)
        .unwrap()
        .params;
    Setup {
        g,
        sched,
        pre,
        sampler: SamplerConfig {
            n_steps: 32,
            ..Default::default()
        },
    }
}

fn motif() -> Reward {
    Reward::MotifCount {
        pattern: vec![0, 0],
    }
}

fn base_cfg() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        epochs: 3,
        batch_size: 16,
        group_size: 8,
        lr: 0.05,
        kl_weight: 0.0,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let s = setup();
    let cfg = TrainConfig {
        iterations: 0,
        ..base_cfg()
    };
    let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &cfg).unwrap();
    assert_eq!(out.params, s.pre);
    assert!(out.log.records.is_empty());
}

#[test]
fn epochs_see_the_frozen_snapshot_and_start_unclipped() {
    let s = setup();
    let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &base_cfg()).unwrap();
    let log = &out.log;
    assert_eq!(log.records.len(), 4);
    assert_eq!(params_hash(s.pre.params()), log.sample_hashes[0]);
    for (hashes, sampled) in log.epoch_snapshot_hashes.iter().zip(&log.sample_hashes) {
        assert_eq!(hashes.len(), 3);
        assert!(hashes.iter().all(|h| h == sampled));
    }
    // Consecutive iterations sample from updated parameters.
    assert_ne!(log.sample_hashes[0], log.sample_hashes[1]);
    for fracs in &log.epoch_clip_fracs {
        assert_eq!(fracs[0], 0.0);
    }
    assert!(log
        .records
        .iter()
        .all(|r| r.grad_norm.is_finite() && r.wall_ms < 60_000));
}

#[test]
fn same_seed_same_run() {
    let s = setup();
    let a = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &base_cfg()).unwrap();
    let b = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &base_cfg()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.sample_hashes, b.log.sample_hashes);
    let c = sepo_train(
        &s.pre,
        &motif(),
        &s.g,
        &s.sched,
        &s.sampler,
        &TrainConfig {
            seed: 1,
            ..base_cfg()
        },
    )
    .unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn strong_kl_weight_stays_closer_to_pretrained() {
    let s = setup();
    let run = |alpha: f64| {
        let cfg = TrainConfig {
            iterations: 10,
            kl_weight: alpha,
            ..base_cfg()
        };
        let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &cfg).unwrap();
        out.log.records.last().unwrap().path_kl
    };
    let (free, tied) = (run(0.0), run(10.0));
    assert!(
        tied < free,
        "path KL with alpha = 10: {tied}, alpha = 0: {free}"
    );
}

#[test]
fn constant_reward_has_no_signal() {
    let s = setup();
    let out = sepo_train(
        &s.pre,
        &Reward::Constant(3.0),
        &s.g,
        &s.sched,
        &s.sampler,
        &base_cfg(),
    )
    .unwrap();
    assert_eq!(out.params, s.pre);
    assert_eq!(out.log.degenerate_groups, 4 * 2);
    assert!(out
        .log
        .records
        .iter()
        .all(|r| r.grad_norm == 0.0 && r.mean_reward == 3.0));
}

#[test]
fn ppo_variant_runs_with_a_baseline() {
    let s = setup();
    let cfg = TrainConfig {
        variant: Variant::Ppo,
        group_size: 1,
        ..base_cfg()
    };
    let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &cfg).unwrap();
    assert_eq!(out.log.records.len(), 4);
    assert_eq!(out.log.degenerate_groups, 0);
    assert_ne!(out.params, s.pre);
}

#[test]
fn gradient_flow_mode_trains() {
    let s = setup();
    let cfg = TrainConfig {
        gf_mode: true,
        ..base_cfg()
    };
    let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &cfg).unwrap();
    assert_eq!(out.log.records.len() + out.log.failures.len(), 4);
    assert!(out.params.params().iter().all(|v| !v.is_nan()));
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let s = setup();
    let out = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &base_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ft.ckpt");
    out.params.save(&path, &s.sched).unwrap();
    let (loaded, fingerprint) = ScoreParams::load(&path).unwrap();
    assert_eq!(fingerprint, s.sched.fingerprint());
    assert_eq!(loaded, out.params);
    let ev = SamplerConfig {
        seed: 77,
        ..s.sampler
    };
    let a = evaluate_policy(&out.params, &motif(), 128, &ev, &s.g, &s.sched).unwrap();
    let b = evaluate_policy(&loaded, &motif(), 128, &ev, &s.g, &s.sched).unwrap();
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn invalid_configs_are_rejected_before_sampling() {
    let s = setup();
    let bad = TrainConfig {
        batch_size: 12,
        ..base_cfg()
    };
    let err = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &s.sampler, &bad).unwrap_err();
    assert!(err.is_config());
    let bad_sampler = SamplerConfig {
        t0: 0.0,
        ..s.sampler
    };
    let err = sepo_train(&s.pre, &motif(), &s.g, &s.sched, &bad_sampler, &base_cfg()).unwrap_err();
    assert!(err.is_config());
}

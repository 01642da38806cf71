use super::*;

pub(crate) fn tiny_config() -> TrainConfig {
    micro_config()
}

pub(crate) fn tiny_set(classes: usize, shots: usize, seed: u64) -> Vec<Sample> {
    micro_set(classes, shots, seed)
}

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 10, 0.5).unwrap(), 0.5);
    assert!((cosine_lr(5, 10, 0.5).unwrap() - 0.25).abs() < 1e-15);
    let tail = cosine_lr(9, 10, 1.0).unwrap();
    assert!((tail - 0.5 * (1.0 + (PI * 0.9).cos())).abs() < 1e-15);
    assert!(tail < 0.03);
    assert!(matches!(cosine_lr(10, 10, 1.0), Err(Error::Config(_))));
}

#[test]
fn softmax_loss_hand_value() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let t0 = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let t1 = tape.constant(Tensor::vector(vec![0.0, 1.0]));
    let s0 = tape.cosine_sim(f, t0).unwrap();
    let s1 = tape.cosine_sim(f, t1).unwrap();
    let logits = tape.stack(&[s0, s1]).unwrap();
    let l = tape.softmax_xent(logits, 0, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.value(l).item() + (e / (e + 1.0)).ln()).abs() < 1e-15);
    assert!((tape.value(l).item() - 0.3133).abs() < 1e-4);
}

#[test]
fn training_requires_warmup_epoch() {
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let data = tiny_set(2, 1, 1);
    assert!(matches!(train(&cfg, 2, &data, &[]), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic_and_keeps_encoders_frozen() {
    let cfg = tiny_config();
    let data = tiny_set(3, 2, 2);
    let a = train(&cfg, 3, &data, &data).unwrap();
    let b = train(&cfg, 3, &data, &data).unwrap();
    assert_eq!(a, b);
    let fresh = build_encoders(cfg.encoder_seed, &cfg.encoder_dims(3)).unwrap();
    assert_eq!(a.encoders, fresh);
    assert!(a.bank.is_initialized());
    assert_eq!(a.metrics.len(), 3);
    assert_eq!(a.metrics[0].loss_align, 0.0);
    assert!(a.metrics[1].loss_align > 0.0);
    assert!(a.alignment_init.is_some() && a.alignment_final.is_some());
    let init = init_state(&cfg, 3, 2).unwrap();
    assert_ne!(a.prompts, init.prompts);
    assert_ne!(a.adapters, init.adapters);
}

#[test]
fn unbalanced_sets_are_rejected() {
    let cfg = tiny_config();
    let mut data = tiny_set(2, 2, 3);
    data.pop();
    assert!(matches!(
        train(&cfg, 2, &data, &[]),
        Err(Error::Coverage(_))
    ));
}

#[test]
fn predictions_are_distributions() {
    let cfg = tiny_config();
    let data = tiny_set(3, 1, 4);
    let state = train(&cfg, 3, &data, &[]).unwrap();
    for s in &data {
        let p = predict(&state, &s.image).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn untrained_bank_cannot_predict() {
    let state = init_state(&tiny_config(), 2, 1).unwrap();
    assert!(matches!(Predictor::new(&state), Err(Error::State(_))));
}

#[test]
fn zero_alpha_matches_the_uncalibrated_predictor() {
    let cfg = TrainConfig {
        alpha: 0.0,
        ..tiny_config()
    };
    let data = tiny_set(2, 1, 5);
    let state = train(&cfg, 2, &data, &[]).unwrap();
    let mut plain = state.clone();
    plain.config.cmda = false;
    for s in &data {
        assert_eq!(
            predict(&state, &s.image).unwrap(),
            predict(&plain, &s.image).unwrap()
        );
    }
}

#[test]
fn language_prototypes_replace_the_bank() {
    let cfg = TrainConfig {
        prototype_source: PrototypeSource::Lp,
        ..tiny_config()
    };
    let data = tiny_set(2, 1, 6);
    let state = train(&cfg, 2, &data, &[]).unwrap();
    assert!(!state.bank.is_initialized());
    assert!(state.metrics.iter().all(|m| m.loss_align == 0.0));
    predict(&state, &data[0].image).unwrap();
}

#[test]
fn every_alignment_loss_trains() {
    for kind in [LossKind::Emd, LossKind::Mmd, LossKind::Js] {
        let cfg = TrainConfig {
            loss_kind: kind,
            ..tiny_config()
        };
        let state = train(&cfg, 2, &tiny_set(2, 1, 7), &[]).unwrap();
        assert!(state.metrics[2].loss_align.is_finite(), "{kind}");
    }
}

#[test]
fn deeper_attack_position_trains() {
    let cfg = TrainConfig {
        sa_position: 1,
        ..tiny_config()
    };
    let data = tiny_set(2, 1, 8);
    let state = train(&cfg, 2, &data, &[]).unwrap();
    assert_eq!(state.adapters[0].conv7.shape()[2], 4);
    predict(&state, &data[0].image).unwrap();
}

#[test]
fn routing_invariants_hold() {
    let r = routing_check(0).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn end_to_end_loss_gradients_match_finite_differences() {
    for (name, err) in end_to_end_grad_check(0).unwrap() {
        assert!(err < END_TO_END_TOLERANCE, "{name}: {err}");
    }
}

#[test]
fn metrics_csv_schema() {
    let m = vec![
        EpochMetrics {
            epoch: 1,
            loss_main: 0.5,
            loss_align: 0.0,
            train_acc: 0.25,
            val_acc: None,
        },
        EpochMetrics {
            epoch: 2,
            loss_main: 0.4,
            loss_align: 1.5,
            train_acc: 0.5,
            val_acc: Some(0.75),
        },
    ];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &m).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,loss_main,loss_align,train_acc,val_acc\n1,0.5,0,0.25,\n2,0.4,1.5,0.5,0.75\n"
    );
}

#[test]
fn config_text_round_trip() {
    let mut cfg = tiny_config();
    cfg.loss_kind = LossKind::Mmd;
    cfg.inference_mode = crate::attack::InferenceMode::Passthrough;
    let parsed: TrainConfig = cfg.to_kv().parse().unwrap();
    assert_eq!(parsed, cfg);
    assert!(matches!(
        "bogus = 1".parse::<TrainConfig>(),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        "alpha = x".parse::<TrainConfig>(),
        Err(Error::Parse(_))
    ));
    assert!(matches!(
        "alpha = 2".parse::<TrainConfig>(),
        Err(Error::Config(_))
    ));
    let g: TrainConfig = "groups = 7 # all of them\n".parse().unwrap();
    assert_eq!(g.groups(), 7);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config();
    let state = train(&cfg, 2, &tiny_set(2, 1, 11), &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);
}

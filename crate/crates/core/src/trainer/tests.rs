use super::*;
use crate::audio::Codebook;
use crate::numerics::AttentionMode;
use crate::vocab::{Modality, TextVocab, TokenSequence, Vocab};
use rand::Rng;

fn encoder() -> EncoderConfig {
    EncoderConfig {
        text_vocab: 12,
        audio_vocab: 8,
        width: 16,
        layers: 1,
        heads: 2,
        ffn_width: 32,
        proj_dim: 8,
        dropout: 0.1,
        attention: AttentionMode::Causal,
        pooling: crate::encoder::Pooling::Mean,
        max_len: 8,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 5,
        total_steps: 30,
        batch_size: 8,
        micro_batch: 3,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn seq(ids: Vec<usize>, modality: Modality) -> TokenSequence {
    TokenSequence {
        ids,
        modality,
        language: "fr_fr".into(),
        prefix_len: 0,
    }
}

/// Speech side: audio ids 12..20 encoding a 3-symbol message; text side:
/// text ids 0..8 for the same message through a fixed substitution.
fn data(n: usize) -> TrainData {
    let mut r = crate::rng::stream(77, &[]);
    let s2t = (0..n)
        .map(|_| {
            let msg: Vec<usize> = (0..3).map(|_| r.random_range(0..8)).collect();
            Pair {
                a: seq(msg.iter().map(|&m| 12 + m).collect(), Modality::Speech),
                b: seq(msg.iter().map(|&m| (m * 3) % 8).collect(), Modality::Text),
                task: Task::S2T,
            }
        })
        .collect();
    TrainData { s2t, mt: vec![] }
}

fn checkpoint(state: &TrainState, enc: &EncoderConfig, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        encoder: enc.clone(),
        train: cfg.clone(),
        step: state.step,
        params: state.params.clone(),
        optimizer: state.optimizer.clone(),
        vocab: Vocab::new(TextVocab::byte_level(), 8, 8).to_file(),
        codebook: Codebook::new(2, 1, vec![0.0, 1.0], 25.0, 0).unwrap(),
    }
}

#[test]
fn config_validation() {
    assert!(config().validate().is_ok());
    let bad = [
        TrainConfig { mt_fraction: 1.5, ..config() },
        TrainConfig { warmup_steps: 31, ..config() },
        TrainConfig { batch_size: 1, ..config() },
        TrainConfig { micro_batch: 0, ..config() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn single_pair_without_spreadout_is_a_no_op() {
    let enc = encoder();
    let cfg = TrainConfig {
        batch_size: 1,
        lambda_spreadout: 0.0,
        warmup_steps: 0,
        ..config()
    };
    let d = data(4);
    let mut state = TrainState::init(&enc, 1).unwrap();
    let before = state.params.clone();
    for _ in 0..3 {
        let m = train_step(&mut state, &enc, &cfg, &d).unwrap();
        assert_eq!(m.loss, 0.0);
    }
    assert_eq!(state.params, before);
}

#[test]
fn training_reduces_loss() {
    let enc = encoder();
    let cfg = TrainConfig {
        total_steps: 150,
        ..config()
    };
    let d = data(64);
    let mut state = TrainState::init(&enc, 2).unwrap();
    let mut losses = Vec::new();
    train(&mut state, &enc, &cfg, &d, |m, _| {
        losses.push(m.loss);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "head {head} tail {tail}");
}

#[test]
fn runs_are_deterministic_and_mix_tasks() {
    let enc = encoder();
    let mut d = data(40);
    d.mt = d
        .s2t
        .iter()
        .take(20)
        .map(|p| Pair {
            a: p.b.clone(),
            b: p.b.clone(),
            task: Task::MT,
        })
        .collect();
    let cfg = TrainConfig {
        mt_fraction: 0.25,
        total_steps: 6,
        ..config()
    };
    let run = || {
        let mut state = TrainState::init(&enc, 3).unwrap();
        let mut log = Vec::new();
        train(&mut state, &enc, &cfg, &d, |m, _| {
            log.push(m.clone());
            Ok(())
        })
        .unwrap();
        (state, log)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(s1, s2);
    assert_eq!(l1, l2);
    assert!(l1.iter().all(|m| m.task_mix == TaskMix { s2t: 6, mt: 2 }));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let enc = encoder();
    let cfg = config();
    let mut state = TrainState::init(&enc, 5).unwrap();
    train_step(&mut state, &enc, &cfg, &data(16)).unwrap();
    let ck = checkpoint(&state, &enc, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    ck.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    assert_eq!(loaded, ck);
    let q = dir.path().join("b.ckpt");
    loaded.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());

    loaded.ensure_config(&enc, &cfg).unwrap();
    let other = TrainConfig { peak_lr: 1e-4, ..cfg.clone() };
    assert!(matches!(loaded.ensure_config(&enc, &other), Err(Error::Config(_))));

    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn resume_continues_exactly() {
    let enc = encoder();
    let cfg = TrainConfig {
        total_steps: 12,
        ..config()
    };
    let d = data(32);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = TrainState::init(&enc, 6).unwrap();
    let mut full_log = Vec::new();
    train(&mut straight, &enc, &cfg, &d, |m, _| {
        full_log.push(m.clone());
        Ok(())
    })
    .unwrap();

    let path = dir.path().join("mid.ckpt");
    let mut first = TrainState::init(&enc, 6).unwrap();
    let mut log = Vec::new();
    for _ in 0..5 {
        log.push(train_step(&mut first, &enc, &cfg, &d).unwrap());
    }
    checkpoint(&first, &enc, &cfg).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut resumed = TrainState::from_checkpoint(ck);
    assert_eq!(resumed.step, 5);
    train(&mut resumed, &enc, &cfg, &d, |m, _| {
        log.push(m.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(log, full_log);
    assert_eq!(resumed, straight);
    assert_eq!(log[5].lr, cfg.lr_at(5));
}

#[test]
fn metrics_log_resume_drops_later_records() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    let rec = |step| StepMetrics {
        step,
        lr: 0.1,
        loss: 1.0,
        contrastive: 0.5,
        spreadout: 0.5,
        task_mix: TaskMix { s2t: 2, mt: 0 },
        eval: None,
    };
    let mut log = MetricsLog::create(&p).unwrap();
    for s in 0..5 {
        log.append(&rec(s)).unwrap();
    }
    drop(log);
    let mut log = MetricsLog::resume(&p, 3).unwrap();
    log.append(&rec(3)).unwrap();
    let steps: Vec<u64> = MetricsLog::read(&p).unwrap().iter().map(|m| m.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
}

use fipo_core::checkpoint;
use fipo_core::config::RunConfig;
use fipo_core::objective::LossKind;
use fipo_core::policy::{sequence_forward, PolicyParams};
use fipo_core::trainer::{read_metrics_jsonl, run_training, train_step, RawDump, TrainState, METRIC_KEYS};

fn small(kind: LossKind, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.loss.kind = kind;
    c.trainer.seed = seed;
    c.trainer.total_steps = 6;
    c.trainer.eval_every = 3;
    c.trainer.eval_instances = 12;
    c.trainer.eval_samples = 4;
    c.rollout.group_size = 8;
    c.rollout.prompt_batch_size = 8;
    c.trainer.minibatch_prompts = 4;
    c.validate().unwrap();
    c
}

#[test]
fn same_seed_gives_identical_metrics_file() {
    for kind in [LossKind::Fipo, LossKind::Dapo, LossKind::Grpo] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_training(TrainState::new(small(kind, 3)).unwrap(), d.path(), |_| {}).unwrap();
        }
        let a = std::fs::read(dirs[0].path().join("metrics.jsonl")).unwrap();
        let b = std::fs::read(dirs[1].path().join("metrics.jsonl")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn different_seeds_diverge() {
    let mut outs = Vec::new();
    for seed in [1, 2] {
        let mut s = TrainState::new(small(LossKind::Fipo, seed)).unwrap();
        outs.push(train_step(&mut s, false).unwrap().metrics);
    }
    assert_ne!(outs[0], outs[1]);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_same_stream() {
    let cfg = small(LossKind::Fipo, 11);
    let mut straight = TrainState::new(cfg.clone()).unwrap();
    let expected: Vec<_> = (0..6).map(|_| train_step(&mut straight, false).unwrap().metrics).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = TrainState::new(cfg).unwrap();
    let mut got: Vec<_> = (0..3).map(|_| train_step(&mut first, false).unwrap().metrics).collect();
    checkpoint::save(&first, &path).unwrap();
    drop(first);
    let mut resumed = checkpoint::load(&path).unwrap();
    got.extend((0..3).map(|_| train_step(&mut resumed, false).unwrap().metrics));

    assert_eq!(got, expected);
    assert_eq!(resumed, straight);
}

#[test]
fn every_record_carries_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let (_, summary) = run_training(TrainState::new(small(LossKind::Fipo, 5)).unwrap(), dir.path(), |_| {}).unwrap();
    assert_eq!(summary.steps_run, 6);
    let rows = read_metrics_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        for key in METRIC_KEYS {
            assert!(row.contains_key(*key), "row {i} lacks {key}");
        }
        assert_eq!(row["step"].as_u64(), Some(i as u64));
        let evaluated = (i + 1) % 3 == 0;
        assert_eq!(row["eval/mean_at_k"].is_number(), evaluated, "row {i}");
    }
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("checkpoints/step_000006.json").exists());
}

/// Recomputes policy KL, entropy and the length-weighted mean advantage from
/// a raw dump, without going through the trainer's aggregation code.
fn recompute(raw: &RawDump) -> (f64, f64, f64) {
    let old = PolicyParams::from_values(raw.dims, raw.old_params.clone()).unwrap();

    let mut kl_sum = 0.0;
    for mb in &raw.minibatches {
        let (mut diff, mut tokens) = (0.0, 0usize);
        for (k, &i) in mb.sequences.iter().enumerate() {
            let old_lp = &raw.sequences[i].old_lp;
            for (o, c) in old_lp.iter().zip(&mb.current_lp[k]) {
                diff += o - c;
                tokens += 1;
            }
        }
        kl_sum += diff / tokens as f64;
    }
    let kl = kl_sum / raw.minibatches.len() as f64;

    let (mut ent, mut tokens) = (0.0, 0usize);
    let (mut adv_tok, mut len_sum) = (0.0, 0usize);
    for s in &raw.sequences {
        let tapes = sequence_forward(&old, &s.prompt, &s.response).unwrap();
        for (tape, (&tok, &lp)) in tapes.iter().zip(s.response.iter().zip(&s.old_lp)) {
            assert!((tape.log_probs()[tok as usize] - lp).abs() < 1e-12);
            ent += tape.entropy();
            tokens += 1;
        }
        adv_tok += s.advantage * s.response.len() as f64;
        len_sum += s.response.len();
    }
    (kl, ent / tokens as f64, adv_tok / len_sum as f64)
}

#[test]
fn logged_diagnostics_match_raw_tensors() {
    for kind in [LossKind::Fipo, LossKind::Dapo] {
        let mut s = TrainState::new(small(kind, 21)).unwrap();
        for step in 0..4 {
            let out = train_step(&mut s, true).unwrap();
            let raw = out.raw.unwrap();
            assert_eq!(raw.step, step);
            let covered: usize = raw.minibatches.iter().map(|m| m.sequences.len()).sum();
            assert_eq!(covered, raw.sequences.len());
            let (kl, ent, lwma) = recompute(&raw);
            let m = &out.metrics;
            assert!((kl - m.policy_kl).abs() <= 1e-9, "{kind:?} kl {kl} vs {}", m.policy_kl);
            assert!((ent - m.entropy).abs() <= 1e-9, "{kind:?} entropy {ent} vs {}", m.entropy);
            assert!(
                (lwma - m.length_weighted_mean_advantage).abs() <= 1e-9,
                "{kind:?} lwma {lwma} vs {}",
                m.length_weighted_mean_advantage
            );
        }
    }
}

#[test]
fn raw_dump_survives_json() {
    let mut s = TrainState::new(small(LossKind::Fipo, 2)).unwrap();
    let raw = train_step(&mut s, true).unwrap().raw.unwrap();
    let back: RawDump = serde_json::from_str(&serde_json::to_string(&raw).unwrap()).unwrap();
    assert_eq!(back, raw);
}

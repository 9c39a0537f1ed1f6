mod common;

use std::collections::BTreeMap;

use common::{random_ckpt, rng, toy_config};
use nanolab::model::{Checkpoint, TokenBatch};
use nanolab::train::*;
use nanolab::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tiny_cfg(tokens: u64, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::standard(24, vec![Stage { tokens, seq_len: 6 }]);
    c.lr_stable = lr;
    c.lr_min = lr / 10.0;
    c.warmup_steps = 2;
    c
}

fn toy_data() -> (Vec<usize>, Vec<usize>) {
    let mut r = rng(9);
    let a = (0..400).map(|i| (i * 3 + r.gen_range(0..2)) % 11).collect();
    let b = (0..400).map(|_| r.gen_range(0..11)).collect();
    (a, b)
}

#[test]
fn kd_loss_two_class_example() {
    let t = Tensor::<f64>::from_f64(&[1, 2], &[2f64.ln(), 0.0]).unwrap();
    let s = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
    let (p, q) = (2.0 / 3.0, 1.0 / 3.0);
    let want: f64 = p * (p / 0.5f64).ln() + q * (q / 0.5f64).ln();
    let got = kd_loss(&s, &t).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert!((got - 0.0566).abs() < 1e-4);
    assert_eq!(kd_loss(&t, &t).unwrap(), 0.0);
    assert!(kd_loss(&t, &Tensor::zeros(&[2, 1])).is_err());
}

#[test]
fn kd_loss_averages_over_positions() {
    let mut r = rng(1);
    let s = Tensor::<f64>::uniform(&[3, 4, 5], -2.0, 2.0, &mut r);
    let t = Tensor::<f64>::uniform(&[3, 4, 5], -2.0, 2.0, &mut r);
    let mut total = 0.0;
    for row in 0..12 {
        let lse = |x: &[f64]| x.iter().map(|v| v.exp()).sum::<f64>().ln();
        let (sr, tr) = (&s.data()[row * 5..row * 5 + 5], &t.data()[row * 5..row * 5 + 5]);
        let (ls, lt) = (lse(sr), lse(tr));
        total += (0..5).map(|v| (tr[v] - lt).exp() * ((tr[v] - lt) - (sr[v] - ls))).sum::<f64>();
    }
    assert!((kd_loss(&s, &t).unwrap() - total / 12.0).abs() < 1e-12);
}

#[test]
fn wsd_reference_values() {
    // the decay covers the final 3.6 of 20 units of training
    let mut cfg = TrainConfig::standard(1, vec![Stage { tokens: 20_000, seq_len: 1 }]);
    cfg.decay_start_fraction = 1.0 - 3.6 / 20.0;
    cfg.warmup_steps = 500;
    let s = cfg.schedule();
    assert_eq!(s.decay_start, 16_400);
    assert_eq!(wsd_lr(500, &cfg), 4.5e-4);
    assert_eq!(wsd_lr(16_400, &cfg), 4.5e-4);
    assert!((wsd_lr(20_000, &cfg) - 4.5e-6).abs() < 1e-18);
    assert!(wsd_lr(16_401, &cfg) < 4.5e-4);
}

#[test]
fn adam_first_step_is_minus_lr_times_sign() {
    let mut r = rng(3);
    let w0 = Tensor::<f64>::uniform(&[4, 5], -1.0, 1.0, &mut r);
    let g = Tensor::<f64>::uniform(&[4, 5], -3.0, 3.0, &mut r);
    let mut params = BTreeMap::from([("w".to_string(), w0.clone())]);
    let grads = BTreeMap::from([("w".to_string(), g.clone())]);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    adam_step(&mut params, &grads, &mut AdamState::new(), 0.01, &cfg).unwrap();
    for ((w, w0), g) in params["w"].data().iter().zip(w0.data()).zip(g.data()) {
        // m̂ = g, v̂ = g², so the step is g / (|g| + eps)
        let want = w0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((w - want).abs() < 1e-15);
        assert!((w - (w0 - 0.01 * g.signum())).abs() < 1e-9);
    }
}

#[test]
fn adam_second_step_matches_hand_moments() {
    let cfg = AdamConfig {
        beta1: 0.9,
        beta2: 0.95,
        eps: 0.0,
        weight_decay: 0.0,
    };
    let mut p = BTreeMap::from([("w".to_string(), Tensor::<f64>::vector(&[0.0]))]);
    let mut st = AdamState::new();
    for g in [1.0, 3.0] {
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(&[g]))]);
        adam_step(&mut p, &grads, &mut st, 1.0, &cfg).unwrap();
    }
    let m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0;
    let v = 0.95 * 0.05 * 1.0 + 0.05 * 9.0;
    let step2 = (m / (1.0 - 0.81)) / (v / (1.0 - 0.9025f64)).sqrt();
    assert!((p["w"].data()[0] - (-1.0 - step2)).abs() < 1e-12);
    assert_eq!(st.step, 2);
}

#[test]
fn zero_lr_leaves_student_bit_identical() {
    let (a, b) = toy_data();
    let teacher = random_ckpt(toy_config(4, 1, 8, 11), 0);
    let student = random_ckpt(toy_config(4, 1, 8, 11), 1);
    let mut cfg = tiny_cfg(24 * 5, 0.0);
    cfg.lr_min = 0.0;
    let data = DataStreams { primary: &a, secondary: &b };
    let out = distill_run(&teacher, student.clone(), &data, &cfg, 0).unwrap();
    assert_eq!(out.model, student);
    assert_eq!(out.log.len(), 5);
    assert!(out.log.iter().all(|r| r.lr == 0.0 && r.loss > 0.0));
}

#[test]
fn student_equal_to_teacher_stays_at_zero_loss() {
    let (a, b) = toy_data();
    let teacher = random_ckpt(toy_config(4, 1, 8, 11), 0);
    let data = DataStreams { primary: &a, secondary: &b };
    let mut cfg = tiny_cfg(24 * 6, 1e-3);
    cfg.weight_decay = 0.0;
    let out = distill_run(&teacher, teacher.clone(), &data, &cfg, 0).unwrap();
    assert!(out.log[0].loss.abs() < 1e-14);
    assert!(out.log.iter().all(|r| r.loss < 1e-10), "{:?}", out.log);
}

#[test]
fn distillation_lowers_the_kd_loss() {
    let (a, b) = toy_data();
    let cfg_model = toy_config(4, 1, 8, 11);
    let teacher = random_ckpt(cfg_model.clone(), 0);
    let student = random_ckpt(cfg_model, 5);
    let data = DataStreams { primary: &a, secondary: &b };
    let before = eval_kd(&student, &teacher, &a, 6, 20).unwrap();
    let mut cfg = tiny_cfg(24 * 150, 1e-2);
    cfg.weight_decay = 0.0;
    let out = distill_run(&teacher, student, &data, &cfg, 1).unwrap();
    let after = eval_kd(&out.model, &teacher, &a, 6, 20).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn language_model_training_lowers_eval_loss() {
    let (a, _) = toy_data();
    let model = Checkpoint::<f64>::init(toy_config(4, 1, 8, 11), &mut rng(2)).unwrap();
    let before = eval_ce(&model, &a, 6, 30).unwrap();
    let out = train_lm(model, &DataStreams::single(&a), &tiny_cfg(24 * 120, 1e-2), 4).unwrap();
    let after = eval_ce(&out.model, &a, 6, 30).unwrap();
    assert!(after < before - 0.5, "{before} -> {after}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let (a, b) = toy_data();
    let data = DataStreams { primary: &a, secondary: &b };
    let m = random_ckpt(toy_config(4, 1, 8, 11), 7);
    let run = |seed| train_lm(m.clone(), &data, &tiny_cfg(24 * 8, 1e-2), seed).unwrap();
    let (x, y, z) = (run(3), run(3), run(4));
    assert_eq!(x.model, y.model);
    assert_eq!(x.log, y.log);
    assert_ne!(x.model, z.model);
}

#[test]
fn log_lines_are_json_records() {
    let (a, _) = toy_data();
    let m = random_ckpt(toy_config(4, 1, 8, 11), 7);
    let mut cfg = tiny_cfg(24 * 3, 1e-3);
    cfg.stages.push(Stage { tokens: 48, seq_len: 12 });
    let out = train_lm(m, &DataStreams::single(&a), &cfg, 0).unwrap();
    let text = log_to_jsonl(&out.log).unwrap();
    let recs: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs, out.log);
    assert_eq!(recs.iter().map(|r| r.tokens).collect::<Vec<_>>(), vec![24, 48, 72, 96, 120]);
    assert_eq!(recs.last().unwrap().lr, cfg.lr_min);
}

#[test]
fn nan_teacher_aborts_with_divergence() {
    let (a, _) = toy_data();
    let mut teacher = random_ckpt(toy_config(4, 1, 8, 11), 0);
    let head = teacher.get("head").unwrap().map(|_| f64::NAN);
    teacher.set("head", head).unwrap();
    let student = random_ckpt(toy_config(4, 1, 8, 11), 1);
    let r = distill_run(&teacher, student, &DataStreams::single(&a), &tiny_cfg(48, 1e-3), 0);
    assert!(matches!(r, Err(Error::Diverged { step: 0, .. })));
}

#[test]
fn vocab_mismatch_is_rejected() {
    let (a, _) = toy_data();
    let teacher = random_ckpt(toy_config(4, 1, 8, 12), 0);
    let student = random_ckpt(toy_config(4, 1, 8, 11), 1);
    assert!(distill_run(&teacher, student, &DataStreams::single(&a), &tiny_cfg(48, 1e-3), 0).is_err());
}

#[test]
fn merge_endpoints_and_symmetry() {
    let a = random_ckpt(toy_config(4, 1, 8, 11), 1);
    let b = random_ckpt(toy_config(4, 1, 8, 11), 2);
    assert_eq!(merge_checkpoints(&a, &b, 0.0).unwrap(), a);
    assert_eq!(merge_checkpoints(&a, &b, 1.0).unwrap(), b);
    assert_eq!(merge_checkpoints(&a, &b, 0.5).unwrap(), merge_checkpoints(&b, &a, 0.5).unwrap());
    let other = random_ckpt(toy_config(4, 1, 9, 11), 2);
    assert!(matches!(merge_checkpoints(&a, &other, 0.5), Err(Error::Config(_))));
    assert!(merge_checkpoints(&a, &b, 1.5).is_err());
}

#[test]
fn loss_and_grads_cover_every_tensor() {
    let m = random_ckpt(toy_config(4, 1, 8, 11), 1);
    let tokens = TokenBatch::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
    let (loss, grads) = loss_and_grads(&m, Objective::NextToken, &tokens, &[2, 3, 4, 5, 6, 7]).unwrap();
    assert!(loss > 0.0);
    assert_eq!(grads.len(), m.tensors().len());
    assert!(grads.iter().all(|(k, g)| g.shape() == m.get(k).unwrap().shape()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_loss_is_nonnegative(seed in any::<u64>(), rows in 1usize..6, vocab in 1usize..9, spread in 0.1f64..20.0) {
        let mut r = rng(seed);
        let s = Tensor::<f64>::uniform(&[rows, vocab], -spread, spread, &mut r);
        let t = Tensor::<f64>::uniform(&[rows, vocab], -spread, spread, &mut r);
        prop_assert!(kd_loss(&s, &t).unwrap() >= 0.0);
        prop_assert_eq!(kd_loss(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn wsd_is_continuous_and_monotone(warm in 0usize..50, plateau in 0usize..200, decay in 1usize..200, lr in 1e-5f64..1e-2, ratio in 1e-3f64..1.0) {
        let s = WsdSchedule { lr_stable: lr, lr_min: lr * ratio, warmup_steps: warm, decay_start: warm + plateau, total_steps: warm + plateau + decay };
        // negative steps are outside the schedule
        for b in [s.warmup_steps as f64, s.decay_start as f64].into_iter().filter(|&b| b > 0.0) {
            prop_assert!((s.lr_at(b - 1e-9) - s.lr_at(b + 1e-9)).abs() < 1e-9);
            prop_assert_eq!(s.lr_at(b), lr);
        }
        for i in 0..s.total_steps {
            let (a, b) = (s.lr(i), s.lr(i + 1));
            if i < s.warmup_steps {
                prop_assert!(b >= a);
            } else if i >= s.decay_start {
                prop_assert!(b <= a);
            } else {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert!((s.lr(s.total_steps) - s.lr_min).abs() <= 1e-15 * lr);
    }

    #[test]
    fn merge_is_affine(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let a = random_ckpt(toy_config(3, 1, 5, 7), seed);
        let b = random_ckpt(toy_config(3, 1, 5, 7), seed ^ 1);
        let m = merge_checkpoints(&a, &b, alpha).unwrap();
        for (name, t) in m.tensors() {
            let (ta, tb) = (a.get(name).unwrap(), b.get(name).unwrap());
            for ((x, y), z) in ta.data().iter().zip(tb.data()).zip(t.data()) {
                prop_assert!((z - (x + alpha * (y - x))).abs() < 1e-12);
            }
        }
    }
}

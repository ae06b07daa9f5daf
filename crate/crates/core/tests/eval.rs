mod common;

use common::*;
use lava_core::config::EvalConfig;
use lava_core::eval::{argmax, average_logits, evaluate, evaluate_all_splits, fit_linear_probe, param_fingerprint, train_probe};
use lava_core::{EncoderStack, Error, ProbeHead, ProbeMode, Split, Tensor};
use rand::Rng;

#[test]
fn probe_training_leaves_encoders_untouched() {
    let cfg = small_config(60, 2);
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(&cfg, dir.path());
    let stack = EncoderStack::new(&cfg.model, 2).unwrap();
    let before = param_fingerprint(&stack);
    let snapshot = stack.named_params();
    let head = train_probe(&stack, &ds, ProbeMode::Video, &cfg.eval).unwrap();
    assert_eq!(param_fingerprint(&stack), before);
    for ((n, a), (_, b)) in snapshot.iter().zip(&stack.named_params()) {
        assert!(a.bitwise_eq(b), "{n}");
    }
    assert_eq!(head.n_classes(), ds.n_classes);
    assert_eq!(head.linear.weight.shape(), &[cfg.model.d_model, ds.n_classes]);

    // deterministic for a fixed eval seed
    let again = train_probe(&stack, &ds, ProbeMode::Video, &cfg.eval).unwrap();
    assert!(head.linear.weight.bitwise_eq(&again.linear.weight));
}

#[test]
fn fused_mode_without_audio_is_a_config_error() {
    let mut cfg = small_config(40, 1);
    cfg.data.p_av = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(&cfg, dir.path());
    let stack = EncoderStack::new(&cfg.model, 1).unwrap();
    let e = train_probe(&stack, &ds, ProbeMode::AudioVideo, &cfg.eval).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("audio"));
    assert!(train_probe(&stack, &ds, ProbeMode::Video, &cfg.eval).is_ok());
}

#[test]
fn report_is_internally_consistent() {
    let cfg = small_config(80, 5);
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(&cfg, dir.path());
    let stack = EncoderStack::new(&cfg.model, 5).unwrap();
    for mode in [ProbeMode::Video, ProbeMode::AudioVideo] {
        let head = train_probe(&stack, &ds, mode, &cfg.eval).unwrap();
        let r = evaluate_all_splits(&stack, &head, &ds, &Split::TESTS, 2).unwrap();
        assert_eq!(r.mode, mode);
        assert_eq!(r.splits.len(), 3);
        let mean = r.splits.values().map(|s| s.top1).sum::<f64>() / 3.0;
        assert!((r.mean_top1 - mean).abs() < 1e-15);
        let mut excluded = 0;
        for (&split, s) in &r.splits {
            let idx = ds.split_indices(split);
            let no_audio = idx.iter().filter(|&&i| ds.samples[i].audio.is_none()).count();
            let want_excluded = if mode == ProbeMode::AudioVideo { no_audio } else { 0 };
            assert_eq!(s.excluded_no_audio, want_excluded);
            assert_eq!(s.evaluated + s.excluded_no_audio, idx.len());
            assert_eq!(s.top1, s.correct as f64 / s.evaluated as f64);
            assert_eq!(*s, evaluate(&stack, &head, &ds, split, 2).unwrap());
            excluded += s.excluded_no_audio;
        }
        assert_eq!(r.excluded_no_audio, excluded);
        assert!(r.per_class.values().all(|&a| (0.0..=1.0).contains(&a)));

        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["mode", "clips_per_video", "splits", "mean_top1", "per_class", "excluded_no_audio"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["mode"], mode.to_string());
        assert!(v["splits"].get("test2").is_some());
    }
}

#[test]
fn clip_count_is_validated() {
    let cfg = small_config(40, 1);
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(&cfg, dir.path());
    let stack = EncoderStack::new(&cfg.model, 1).unwrap();
    let head = train_probe(&stack, &ds, ProbeMode::Video, &cfg.eval).unwrap();
    for clips in [0, 3] {
        let e = evaluate(&stack, &head, &ds, Split::Test1, clips).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }
    assert!(evaluate_all_splits(&stack, &head, &ds, &[], 1).is_err());
}

#[test]
fn probe_head_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(4);
    let feats: Vec<Tensor> = (0..12).map(|_| gaussian(&[5], &mut r)).collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let head = fit_linear_probe(&feats, &labels, 3, &EvalConfig::default(), ProbeMode::AudioVideo).unwrap();
    let p = dir.path().join("head.lavc");
    head.save(&p).unwrap();
    let back = ProbeHead::load(&p).unwrap();
    assert_eq!(back.mode, ProbeMode::AudioVideo);
    for f in &feats {
        assert_eq!(head.logits(f).unwrap(), back.logits(f).unwrap());
    }
    std::fs::write(&p, b"LAVC\0\0\0\0").unwrap();
    assert!(matches!(ProbeHead::load(&p), Err(Error::Format { .. })));
}

#[test]
fn linear_probe_separates_separable_classes() {
    let mut r = rng(12);
    let centers: Vec<Vec<f64>> = (0..4).map(|k| (0..6).map(|j| if j == k { 3.0 } else { 0.0 }).collect()).collect();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let k = i % 4;
        let v: Vec<f64> = centers[k].iter().map(|c| c + 0.3 * (r.random::<f64>() - 0.5)).collect();
        feats.push(Tensor::vector(v).unwrap());
        labels.push(k);
    }
    let cfg = EvalConfig { lr: 1e-2, epochs: 30, ..EvalConfig::default() };
    let head = fit_linear_probe(&feats, &labels, 4, &cfg, ProbeMode::Video).unwrap();
    let hits = feats.iter().zip(&labels).filter(|(f, &y)| argmax(&head.logits(f).unwrap()) == y).count();
    assert_eq!(hits, 200);
}

#[test]
fn logit_averaging_and_argmax() {
    let avg = average_logits(&[vec![1.0, 4.0], vec![3.0, 0.0]]);
    assert_eq!(avg, vec![2.0, 2.0]);
    assert_eq!(argmax(&avg), 0, "ties go to the lowest index");
    assert_eq!(argmax(&[0.1, 0.5, -2.0]), 1);
    assert_eq!("audio+video".parse::<ProbeMode>().unwrap(), ProbeMode::AudioVideo);
    assert!("audio".parse::<ProbeMode>().is_err());
}

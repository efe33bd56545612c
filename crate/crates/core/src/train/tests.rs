use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::data::Vocabulary;
use crate::heads::{HeadSpec, VocabMapping};
use crate::model::{ModelConfig, TieMode};
use crate::numerics::Tensor;

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        vocab_size: vocab,
        max_seq: 16,
        dropout: 0.0,
        tie_mode: TieMode::Untied,
    }
}

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr_peak: 3e-3,
        lr_min: 3e-4,
        warmup_steps: steps.min(10),
        total_steps: steps,
        batch_size: 4,
        seq_len: 8,
        eval_interval: 0,
        log_throughput: false,
        ..TrainConfig::default()
    }
}

fn scalar_store(w: f64, decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[1], vec![w]).unwrap(), decay);
    s
}

fn corpus(len: usize, vocab: usize, seed: u64) -> Arc<Vec<usize>> {
    let mut rng = SeedStream::new(seed);
    Arc::new((0..len).map(|_| rng.below(vocab)).collect())
}

#[test]
fn adamw_zero_gradient_no_decay_is_identity() {
    let mut store = scalar_store(0.7, true);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = AdamState::new();
    for _ in 0..5 {
        adamw_step(&mut store, &mut state, 0.1, &cfg).unwrap();
    }
    assert_eq!(store.value(store.find("w").unwrap()).data(), &[0.7]);
}

#[test]
fn adamw_matches_hand_recursion() {
    let (g, lr, w0) = (0.3, 0.01, 1.5);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut store = scalar_store(w0, true);
    let mut state = AdamState::new();
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
    for t in 1..=3 {
        store.get_mut(store.find("w").unwrap()).grad[0] = g;
        adamw_step(&mut store, &mut state, lr, &cfg).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        w -= lr * mhat / (vhat.sqrt() + 1e-8);
        let got = store.value(store.find("w").unwrap()).data()[0];
        assert!((got - w).abs() <= 1e-15, "step {t}: {got} vs {w}");
    }
    // a constant gradient moves Adam by ≈ lr per step
    assert!((w0 - w - 3.0 * lr).abs() < 1e-6);
}

#[test]
fn adamw_weight_decay_closed_form() {
    let mut store = scalar_store(2.0, true);
    let cfg = TrainConfig::default();
    let mut state = AdamState::new();
    for step in 1..=4 {
        adamw_step(&mut store, &mut state, 0.1, &cfg).unwrap();
        let want = 2.0 * (1.0f64 - 0.001).powi(step);
        assert!((store.value(store.find("w").unwrap()).data()[0] - want).abs() <= 1e-15);
    }
    let mut no_decay = scalar_store(2.0, false);
    adamw_step(&mut no_decay, &mut AdamState::new(), 0.1, &cfg).unwrap();
    assert_eq!(no_decay.value(no_decay.find("w").unwrap()).data(), &[2.0]);
}

#[test]
fn adamw_rejects_non_finite_gradients_without_mutation() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let b = store.add("b", Tensor::new(&[1], vec![3.0]).unwrap(), true);
    store.get_mut(a).grad = vec![0.5, 0.5];
    store.get_mut(b).grad = vec![f32::NAN];
    let r = adamw_step(&mut store, &mut AdamState::new(), 0.1, &TrainConfig::default());
    assert!(matches!(r, Err(Error::Numeric(_))));
    assert_eq!(store.value(a).data(), &[1.0, 2.0]);
}

#[test]
fn schedule_boundaries() {
    let cfg = TrainConfig {
        lr_peak: 1e-3,
        lr_min: 1e-4,
        warmup_steps: 100,
        total_steps: 1100,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert!((lr_at(50, &cfg) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_at(100, &cfg), 1e-3);
    assert!((lr_at(600, &cfg) - 5.5e-4).abs() < 1e-15);
    assert_eq!(lr_at(1100, &cfg), 1e-4);
    assert_eq!(lr_at(5000, &cfg), 1e-4);
    for s in 100..1100 {
        assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
    }
    let no_warmup = TrainConfig {
        warmup_steps: 0,
        ..cfg
    };
    assert_eq!(lr_at(0, &no_warmup), 1e-3);
}

#[test]
fn clipping_examples() {
    let mut g = vec![0.3f64, 0.4];
    assert_eq!(clip_global_norm(&mut [g.as_mut_slice()], 1.0), 1.0);
    assert_eq!(g, vec![0.3, 0.4]);
    let mut g = vec![3.0f64, 4.0];
    let s = clip_global_norm(&mut [g.as_mut_slice()], 1.0);
    assert_eq!(s, 0.2);
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let bad = TrainConfig {
        warmup_steps: 10,
        total_steps: 5,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        clip_norm: 0.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert_eq!("codebook_only".parse::<FinetuneScope>().unwrap(), FinetuneScope::CodebookOnly);
}

fn vq_model(vocab: usize, k: usize, trainable: bool) -> LanguageModel<f32> {
    let codes = (0..vocab).map(|i| i % k).collect();
    let spec = HeadSpec::Vq {
        k,
        codebook_trainable: trainable,
    };
    LanguageModel::new(tiny_config(vocab), &spec, Some(VocabMapping::new(codes, k).unwrap()), 1).unwrap()
}

#[test]
fn scope_counts() {
    let mut m = vq_model(30, 6, true);
    let total = m.params.numel();
    assert_eq!(apply_finetune_scope(&mut m, FinetuneScope::FullModel).unwrap(), total);
    assert_eq!(apply_finetune_scope(&mut m, FinetuneScope::HeadAndFinalNorm).unwrap(), 6 * 16 + 2 * 16);
    assert_eq!(apply_finetune_scope(&mut m, FinetuneScope::CodebookOnly).unwrap(), 6 * 16);
    assert_eq!(apply_finetune_scope(&mut m, FinetuneScope::None).unwrap(), 0);
    let mut full = LanguageModel::<f32>::new(tiny_config(30), &HeadSpec::Full, None, 1).unwrap();
    assert!(matches!(
        apply_finetune_scope(&mut full, FinetuneScope::CodebookOnly),
        Err(Error::Config(_))
    ));
    let mut fixed = vq_model(30, 6, false);
    assert_eq!(
        apply_finetune_scope(&mut fixed, FinetuneScope::FullModel).unwrap(),
        fixed.params.numel() - 6 * 16
    );
    assert!(matches!(
        apply_finetune_scope(&mut fixed, FinetuneScope::CodebookOnly),
        Err(Error::Config(_))
    ));
}

fn snapshot(model: &LanguageModel<f32>, skip: &[crate::numerics::ParamId]) -> Vec<Vec<u32>> {
    model
        .params
        .ids()
        .filter(|id| !skip.contains(id))
        .map(|id| model.params.value(id).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn frozen_parameters_stay_bitwise_constant() {
    let ids = corpus(2_000, 30, 2);
    for scope in [FinetuneScope::CodebookOnly, FinetuneScope::HeadAndFinalNorm] {
        let mut m = vq_model(30, 6, true);
        apply_finetune_scope(&mut m, scope).unwrap();
        let trainable: Vec<_> = m.params.ids().filter(|&id| m.params.get(id).trainable).collect();
        let before = snapshot(&m, &trainable);
        let c_before = m.params.value(m.head.param_ids()[0]).clone();
        let mut stream = BatchStream::new(ids.clone(), 4, 8, Some(3)).unwrap();
        train_loop(&mut m, &quick_config(100), &mut stream, None, &TrainOutputs::default()).unwrap();
        assert_eq!(snapshot(&m, &trainable), before, "{scope:?}");
        assert_ne!(m.params.value(m.head.param_ids()[0]).data(), c_before.data());
    }
    let mut fixed = vq_model(30, 6, false);
    apply_finetune_scope(&mut fixed, FinetuneScope::FullModel).unwrap();
    let c = fixed.head.param_ids()[0];
    let before = fixed.params.value(c).clone();
    let mut stream = BatchStream::new(ids, 4, 8, Some(3)).unwrap();
    train_loop(&mut fixed, &quick_config(20), &mut stream, None, &TrainOutputs::default()).unwrap();
    assert_eq!(fixed.params.value(c).data(), before.data());
}

#[test]
fn frozen_parameters_get_no_optimizer_state() {
    let mut m = vq_model(30, 6, true);
    apply_finetune_scope(&mut m, FinetuneScope::CodebookOnly).unwrap();
    let mut state = AdamState::new();
    adamw_step(&mut m.params, &mut state, 1e-3, &TrainConfig::default()).unwrap();
    assert_eq!(state.tracked(), 6 * 16);
}

#[test]
fn untrained_model_is_near_uniform() {
    let v = 200;
    let model = LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Full, None, 4).unwrap();
    let mut stream = BatchStream::new(corpus(3_000, v, 5), 4, 8, None).unwrap();
    let r = evaluate_ppl(&model, &mut stream, 0).unwrap();
    assert!((r.ppl / v as f64 - 1.0).abs() < 0.2, "ppl {}", r.ppl);
    assert_eq!(r.tokens, stream.targets_per_epoch());
    assert_eq!(evaluate_ppl(&model, &mut stream, 0).unwrap(), r);
}

#[test]
fn single_code_head_has_perplexity_v() {
    let v = 37;
    let spec = HeadSpec::Vq {
        k: 1,
        codebook_trainable: true,
    };
    let model = LanguageModel::<f64>::new(tiny_config(v), &spec, Some(VocabMapping::single_code(v)), 6).unwrap();
    let mut stream = BatchStream::new(corpus(500, v, 7), 2, 8, None).unwrap();
    let r = evaluate_ppl(&model, &mut stream, 0).unwrap();
    assert!((r.ppl - v as f64).abs() <= 1e-9 * v as f64, "{}", r.ppl);
}

#[test]
fn too_short_stream_is_an_input_error() {
    assert!(matches!(
        BatchStream::new(Arc::new(vec![1, 2, 3]), 4, 8, None),
        Err(Error::Input(_))
    ));
}

#[test]
fn overfits_tiny_corpus() {
    let v = 16;
    let ids = corpus(64, v, 8);
    let mut model = LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Full, None, 9).unwrap();
    let mut stream = BatchStream::new(ids, 4, 15, Some(1)).unwrap();
    let cfg = TrainConfig {
        lr_peak: 1e-2,
        lr_min: 1e-3,
        warmup_steps: 20,
        total_steps: 500,
        weight_decay: 0.0,
        batch_size: 4,
        seq_len: 15,
        eval_interval: 0,
        log_throughput: false,
        ..TrainConfig::default()
    };
    let rows = train_loop(&mut model, &cfg, &mut stream, None, &TrainOutputs::default()).unwrap();
    let last = rows.last().unwrap().loss;
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn training_is_deterministic() {
    let ids = corpus(3_000, 40, 10);
    let run = || {
        let mut cfg = tiny_config(40);
        cfg.dropout = 0.1;
        let mut model = LanguageModel::<f32>::new(cfg, &HeadSpec::Full, None, 11).unwrap();
        let mut stream = BatchStream::new(ids.clone(), 4, 8, Some(12)).unwrap();
        let mut valid = BatchStream::new(ids.clone(), 4, 8, None).unwrap();
        let cfg = TrainConfig {
            eval_interval: 10,
            eval_batches: 5,
            ..quick_config(30)
        };
        let rows = train_loop(&mut model, &cfg, &mut stream, Some(&mut valid), &TrainOutputs::default()).unwrap();
        (metrics_csv(&rows), ModelCheckpoint::from_model(&model, None).to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(a.starts_with("step,loss,ppl,lr,tokens_per_sec\n1,"));
    let line10 = a.lines().nth(10).unwrap();
    assert!(line10.starts_with("10,") && line10.ends_with(',') && line10.split(',').nth(2).unwrap() != "");
    assert_eq!(a.lines().nth(3).unwrap().split(',').nth(2).unwrap(), "");
}

#[test]
fn identity_vq_and_full_share_first_step_loss() {
    let v = 25;
    let ids = corpus(1_000, v, 13);
    let full = LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Full, None, 14).unwrap();
    let e_out = full.params.value(full.head.param_ids()[0]).clone();
    let mut vq =
        crate::quantize::convert_to_vq(&full, e_out, VocabMapping::identity(v), true).unwrap();
    let mut full = full;
    let losses: Vec<f64> = [&mut full, &mut vq]
        .into_iter()
        .map(|m| {
            let mut stream = BatchStream::new(ids.clone(), 4, 8, Some(15)).unwrap();
            train_loop(m, &quick_config(1), &mut stream, None, &TrainOutputs::default()).unwrap()[0].loss
        })
        .collect();
    assert!((losses[0] - losses[1]).abs() <= 1e-6 * losses[0], "{losses:?}");
}

fn vocab_for(v: usize) -> Vocabulary {
    let text: String = (0..v - 2).map(|i| format!("w{i} ").repeat(v - i)).collect::<String>() + "\n";
    Vocabulary::build(&text, v, 1).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let v = 20;
    let vocab = vocab_for(v);
    assert_eq!(vocab.len(), v);
    for model in [
        LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Full, None, 16).unwrap(),
        vq_model(v, 5, false),
        LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Lowrank { rank: 4 }, None, 17).unwrap(),
        LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::default_adaptive(v), None, 18).unwrap(),
    ] {
        let ck = ModelCheckpoint::from_model(&model, Some(vocab.clone()));
        let bytes = ck.to_bytes();
        let loaded = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.vocab.as_ref(), Some(&vocab));
        assert_eq!(loaded.model.head_spec(), model.head_spec());
        assert_eq!(loaded.model.head.mapping(), model.head.mapping());
        let mut s1 = BatchStream::new(corpus(400, v, 19), 2, 8, None).unwrap();
        let a = evaluate_ppl(&model, &mut s1, 0).unwrap();
        let b = evaluate_ppl(&loaded.model, &mut s1, 0).unwrap();
        assert_eq!(a.ppl, b.ppl);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = vq_model(12, 3, true);
    let bytes = ModelCheckpoint::from_model(&model, None).to_bytes();
    assert!(matches!(ModelCheckpoint::from_bytes(b"garbage\n"), Err(Error::Format(_))));
    assert!(matches!(
        ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    let text = String::from_utf8_lossy(&bytes).replace("format_version = 1", "format_version = 9");
    assert!(ModelCheckpoint::from_bytes(text.as_bytes()).is_err());
    let header_end = bytes.windows(1).position(|w| w == b"=").unwrap();
    assert!(header_end > 0);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let v = 30;
    let ids = corpus(2_000, v, 20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = LanguageModel::<f32>::new(tiny_config(v), &HeadSpec::Full, None, 21).unwrap();
    let mut stream = BatchStream::new(ids.clone(), 4, 8, Some(22)).unwrap();
    let out = TrainOutputs {
        checkpoint: Some(&path),
        vocab: None,
    };
    let cfg = TrainConfig {
        eval_interval: 5,
        ..quick_config(10)
    };
    train_loop(&mut model, &cfg, &mut stream, None, &out).unwrap();
    let good = std::fs::read(&path).unwrap();
    let id = model.params.find("ln_f.gamma").unwrap();
    model.params.get_mut(id).value.data_mut()[0] = f32::NAN;
    let r = train_loop(&mut model, &cfg, &mut stream, None, &out);
    assert!(matches!(r, Err(Error::Numeric(_))));
    assert_eq!(std::fs::read(&path).unwrap(), good);
    assert!(ModelCheckpoint::load(&path).is_ok());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_bound(xs in prop::collection::vec(-100.0f64..100.0, 1..40), clip in 0.01f64..10.0) {
        let mut g = xs.clone();
        let (a, b) = g.split_at_mut(xs.len() / 2);
        clip_global_norm(&mut [a, b], clip);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= clip + 1e-9);
    }
}

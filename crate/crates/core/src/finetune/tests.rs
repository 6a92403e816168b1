use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{
    prepare, stacked_dim, synth_corpus, PreparedExample, SynthConfig, Vocabulary, NUM_EMOTIONS,
};
use crate::model::{Modality, Model, ModelConfig, ModelWeights};
use crate::numerics::{grad_check, Fault};
use crate::pretrain::TrainError;

#[test]
fn binarize_examples() {
    assert_eq!(
        binarize(&[0.0, 0.33, 3.0, 0.0, 1.0, 0.0]).unwrap(),
        [0, 1, 1, 0, 1, 0]
    );
    assert_eq!(binarize(&[0.01, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()[0], 1);
    assert!(binarize(&[0.0, 0.0, 0.0, 0.0, 0.0, 3.5]).is_err());
    assert!(binarize(&[-0.1, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
}

fn rows(pattern: &[u8]) -> Vec<[u8; NUM_EMOTIONS]> {
    pattern.iter().map(|&b| [b; NUM_EMOTIONS]).collect()
}

#[test]
fn class_weights_three_to_one() {
    let w = class_weights(&rows(&[1, 1, 1, 0])).unwrap();
    for (p, n) in w {
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(n, 2.0);
    }
    let err = class_weights(&rows(&[1, 1])).unwrap_err();
    assert!(matches!(err, TrainError::InvalidArgument(m) if m.contains("resample")));
}

#[test]
fn bce_examples() {
    let ones = [(1.0, 1.0); NUM_EMOTIONS];
    let (l, c) = weighted_bce(&[0.5; 6], &[1, 0, 1, 0, 1, 0], &ones);
    assert!((l - 6.0 * 2f64.ln()).abs() < 1e-14);
    assert_eq!(c, 0);
    let (l, c) = weighted_bce(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[1, 0, 1, 0, 1, 0], &ones);
    assert!(l.is_finite() && l < 1e-9);
    assert_eq!(c, 6);
    let w = [
        (2.0, 0.5),
        (1.0, 3.0),
        (1.0, 1.0),
        (1.0, 1.0),
        (1.0, 1.0),
        (1.0, 1.0),
    ];
    let (l, _) = weighted_bce(&[0.8, 0.25, 0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 1, 0, 0], &w);
    let expected = -2.0 * 0.8f64.ln() - 3.0 * 0.75f64.ln() + 4.0 * 2f64.ln();
    assert!((l - expected).abs() < 1e-14);
}

#[test]
fn metric_examples() {
    let t = [true, true, false, false, false, false];
    let p = [true, false, true, false, false, false];
    // TPR 1/2, TNR 3/4
    assert_eq!(weighted_accuracy(&p, &t), Some(0.625));
    assert_eq!(f1(&p, &t), 0.5);
    assert_eq!(weighted_accuracy(&p, &[true; 6]), None);
    assert_eq!(f1(&[false; 6], &t), 0.0);
    assert_eq!(weighted_accuracy(&t, &t), Some(1.0));

    // always-positive predictor on a 70/30 split
    let targets: Vec<bool> = (0..10).map(|i| i < 7).collect();
    assert_eq!(weighted_accuracy(&[true; 10], &targets), Some(0.5));

    // tp 2, fp 1, fn 1
    let t = [true, true, true, false, false];
    let p = [true, true, false, true, false];
    assert!((f1(&p, &t) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn report_layout() {
    let probs = vec![
        [0.9, 0.1, 0.6, 0.2, 0.7, 0.4],
        [0.2, 0.8, 0.4, 0.6, 0.1, 0.5],
    ];
    let targets = vec![[1, 0, 1, 0, 1, 1], [0, 1, 1, 1, 1, 0]];
    let r = EvalReport::from_probs(&probs, &targets);
    assert_eq!(r.wa_excluded, vec!["angry", "surprise"]);
    // happy, sad, disgust perfect; fear inverted
    assert_eq!(r.macro_wa, 0.75);
    let text = r.to_text();
    assert_eq!(text.lines().count(), 9);
    assert!(text
        .lines()
        .nth(7)
        .unwrap()
        .contains("WA excludes angry,surprise"));
    assert!(r.to_kv().contains("angry.wa=nan\n"));
}

#[test]
fn ablation_zeroes_requested_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, data) = toy_data(&mut rng, 4);
    let ex = &data[0];
    let a = ablate(ex, &[Modality::Audio]).unwrap();
    assert!(a.inputs.audio.data().iter().all(|&v| v == 0.0));
    assert_eq!(a.inputs.visual, ex.inputs.visual);
    assert_eq!(a.inputs.text, ex.inputs.text);
    assert_eq!(a.inputs.audio.shape(), ex.inputs.audio.shape());
    let both = ablate(ex, &[Modality::Audio, Modality::Visual]).unwrap();
    assert!(both.inputs.visual.data().iter().all(|&v| v == 0.0));
    assert_eq!(ablate(ex, &[]).unwrap().inputs, ex.inputs);
    assert!(matches!(
        ablate(ex, &[Modality::Text]),
        Err(TrainError::Unsupported(_))
    ));
}

fn toy_data(rng: &mut ChaCha8Rng, n: usize) -> (ModelConfig, Vec<PreparedExample>) {
    let synth = SynthConfig {
        seed: rand::Rng::random(rng),
        examples: n,
        vocab_size: 8,
        audio_dim: 2,
        visual_dim: 3,
        text_dim: 4,
        min_words: 2,
        max_words: 4,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth).unwrap();
    let vocab = Vocabulary::from_embeddings(&corpus.embeddings).unwrap();
    let data = prepare(&corpus.examples, &vocab, &synth.alignment).unwrap();
    let config = ModelConfig {
        audio_input_dim: stacked_dim(2, &synth.alignment),
        visual_input_dim: 3,
        text_embedding_dim: 4,
        vocab_size: vocab.len(),
        ..ModelConfig::toy()
    };
    (config, data)
}

/// Batch where every emotion has both classes present.
fn balanced_batch(seed: u64) -> (ModelConfig, Vec<PreparedExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, mut data) = toy_data(&mut rng, 8);
    let flip = |s: f64| if s > 0.0 { 0.0 } else { 1.0 };
    let mut twin = data[0].clone();
    twin.id = "twin".into();
    twin.emotions = twin.emotions.map(|e| e.map(flip));
    data.truncate(3);
    data.push(twin);
    (c, data)
}

#[test]
fn emotion_objective_gradients_check() {
    let (config, batch) = balanced_batch(1);
    let mut params = ModelWeights::init_emotion(&config, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap()
        .into_params();
    let obj = EmotionObjective {
        config,
        batch,
        fault: None,
    };
    let r = grad_check(&obj, &mut params, 300, 1e-5, 3).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
    let broken = EmotionObjective {
        fault: Some(Fault::LayerNormBackward),
        ..obj
    };
    let r = grad_check(&broken, &mut params, 300, 1e-5, 3).unwrap();
    assert!(!r.passes(1e-4), "{r:?}");
}

fn small_config(runs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 4,
        batch_size: 8,
        lr_scale: 1.0,
        warmup_steps: 10,
        runs,
        dev_fraction: 0.25,
        test_fraction: 0.25,
        ..FinetuneConfig::default()
    }
}

#[test]
fn single_run_has_no_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, data) = toy_data(&mut rng, 60);
    let out = finetune_loop(&c, &Init::Random, &data, &small_config(1)).unwrap();
    assert_eq!(out.runs.len(), 1);
    assert_eq!(out.report.run_std, None);
    assert!(!out.report.to_text().contains("run-std"));
    assert_eq!(out.report.examples(), 15);
}

#[test]
fn selection_follows_dev_score_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, data) = toy_data(&mut rng, 60);
    let config = small_config(3);
    let a = finetune_loop(&c, &Init::Random, &data, &config).unwrap();
    let b = finetune_loop(&c, &Init::Random, &data, &config).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.loss_log(), b.loss_log());

    for run in &a.runs {
        let scores: Vec<f64> = run
            .history
            .iter()
            .map(|h| (h.dev_macro_wa + h.dev_macro_f1) / 2.0)
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |bi, (i, s)| if *s > scores[bi] { i } else { bi });
        assert_eq!(run.best_epoch, best + 1);
    }
    let dev: Vec<f64> = a
        .runs
        .iter()
        .map(|r| (r.dev.macro_wa + r.dev.macro_f1) / 2.0)
        .collect();
    let best = dev
        .iter()
        .enumerate()
        .fold(0, |bi, (i, s)| if *s > dev[bi] { i } else { bi });
    assert_eq!(a.selected_run, best);
    assert_eq!(a.report.rows, a.runs[best].test.rows);
    assert_eq!(a.report.runs, 3);

    let model = Model::new(c.clone(), a.weights.clone()).unwrap();
    let test_items =
        crate::pretrain::split_indices(data.len(), &[0.25, 0.25], config.seed)[2].clone();
    let test: Vec<_> = test_items.iter().map(|&i| data[i].clone()).collect();
    assert_eq!(evaluate(&model, &test, &[]).unwrap().rows, a.report.rows);

    let wa: Vec<f64> = a.runs.iter().map(|r| r.test.macro_wa).collect();
    let mean = wa.iter().sum::<f64>() / 3.0;
    let sd = (wa.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0).sqrt();
    assert!((a.report.run_std.unwrap().0 - sd).abs() < 1e-15);
}

#[test]
fn finetune_rejects_bad_requests() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, data) = toy_data(&mut rng, 20);
    let text = FinetuneConfig {
        drop: vec![Modality::Text],
        ..small_config(1)
    };
    assert!(matches!(
        finetune_loop(&c, &Init::Random, &data, &text),
        Err(TrainError::Unsupported(_))
    ));
    let mut unlabeled = data.clone();
    unlabeled[3].emotions = None;
    assert!(finetune_loop(&c, &Init::Random, &unlabeled, &small_config(1)).is_err());
}

fn confusion_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn metrics_match_rational_oracle((preds, truth) in confusion_strategy()) {
        let count = |p: bool, t: bool| preds.iter().zip(&truth).filter(|(a, b)| **a == p && **b == t).count() as i64;
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        let pos = tp + fn_;
        let neg = tn + fp;
        let wa = weighted_accuracy(&preds, &truth);
        if pos == 0 || neg == 0 {
            prop_assert_eq!(wa, None);
        } else {
            let exact = (Ratio::new(tp, pos) + Ratio::new(tn, neg)) / 2;
            let oracle = *exact.numer() as f64 / *exact.denom() as f64;
            prop_assert_eq!(wa, Some(oracle));
        }
        let f = f1(&preds, &truth);
        if tp == 0 {
            prop_assert_eq!(f, 0.0);
        } else {
            let p = Ratio::new(tp, tp + fp);
            let r = Ratio::new(tp, tp + fn_);
            let exact = p * r * 2 / (p + r);
            let oracle = *exact.numer() as f64 / *exact.denom() as f64;
            prop_assert_eq!(f, oracle);
        }
    }

    #[test]
    fn class_weights_balance_mass(bits in prop::collection::vec(prop::array::uniform6(0u8..2), 2..60)) {
        match class_weights(&bits) {
            Ok(w) => {
                for (k, (wp, wn)) in w.iter().enumerate() {
                    let pos = bits.iter().filter(|t| t[k] == 1).count() as i64;
                    let neg = bits.len() as i64 - pos;
                    let n = bits.len() as i64;
                    // mass on each side is n/2 exactly
                    prop_assert_eq!(Ratio::new(n, 2 * pos) * pos, Ratio::new(n, 2));
                    prop_assert!((wp * pos as f64 - n as f64 / 2.0).abs() < 1e-9);
                    prop_assert!((wn * neg as f64 - n as f64 / 2.0).abs() < 1e-9);
                }
            }
            Err(_) => {
                let degenerate = (0..NUM_EMOTIONS).any(|k| {
                    let pos = bits.iter().filter(|t| t[k] == 1).count();
                    pos == 0 || pos == bits.len()
                });
                prop_assert!(degenerate);
            }
        }
    }
}

use std::io::Cursor;

use proptest::prelude::*;

use super::synth::generate;
use super::*;
use crate::numerics::Tensor;

fn example(
    id: &str,
    words: &[&str],
    boundaries: &[(f64, f64)],
    audio_rows: usize,
    visual_rows: usize,
) -> MultimodalExample {
    let audio = (0..audio_rows * 3).map(|i| i as f64 * 0.25 - 1.0).collect();
    let visual = (0..visual_rows * 2).map(|i| (i as f64).sin()).collect();
    MultimodalExample {
        id: id.into(),
        words: words.iter().map(|w| w.to_string()).collect(),
        boundaries: boundaries.to_vec(),
        audio: Tensor::new(vec![audio_rows, 3], audio).unwrap(),
        visual: Tensor::new(vec![visual_rows, 2], visual).unwrap(),
        emotions: None,
    }
}

#[test]
fn align_exact_division_and_empty_visual_span() {
    let spans = align(&[(0.0, 100.0), (95.0, 105.0)], 10.0, 25.0).unwrap();
    assert_eq!(spans[0].audio, 0..10);
    assert_eq!(spans[0].visual, 0..2);
    assert_eq!(spans[1].visual, 2..2);
    assert!(align(&[(50.0, 40.0)], 10.0, 25.0).is_err());
}

#[test]
fn stacking_examples() {
    let frames = Tensor::new(vec![10, 4], (0..40).map(f64::from).collect()).unwrap();
    let s = stack_audio(&frames, 5);
    assert_eq!(s.shape(), &[2, 20]);
    assert_eq!(unstack_audio(&s, 5), frames);

    let frames = Tensor::new(vec![7, 2], (1..=14).map(f64::from).collect()).unwrap();
    let s = stack_audio(&frames, 5);
    assert_eq!(s.shape(), &[2, 10]);
    assert_eq!(&s.row(1)[..4], &[11.0, 12.0, 13.0, 14.0]);
    assert_eq!(&s.row(1)[4..], &[0.0; 6]);
}

#[test]
fn stacked_spans_follow_the_floor_rule() {
    let ex = example("a", &["x", "y"], &[(0.0, 100.0), (100.0, 230.0)], 30, 8);
    let spans = Alignment::default().spans(&ex).unwrap();
    assert_eq!(spans[0].audio, 0..2);
    assert_eq!(spans[1].audio, 2..4);
    assert_eq!(spans[1].visual, 2..5);
}

#[test]
fn span_errors_name_the_word() {
    let ex = example("utt7", &["x", "y"], &[(0.0, 100.0), (150.0, 120.0)], 30, 8);
    match Alignment::default().spans(&ex) {
        Err(DataError::Boundary { id, index, .. }) => assert_eq!((id.as_str(), index), ("utt7", 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn validate_checks_boundaries_and_scores() {
    let a = Alignment::default();
    let mut ex = example("v", &["x", "y"], &[(0.0, 100.0), (90.0, 200.0)], 30, 8);
    assert!(matches!(
        ex.validate(&a),
        Err(DataError::Boundary { index: 1, .. })
    ));
    ex.boundaries[1] = (100.0, 400.0);
    assert!(ex.validate(&a).is_err());
    ex.boundaries[1] = (100.0, 300.0);
    ex.validate(&a).unwrap();
    ex.emotions = Some([0.0, 1.0, 3.0, 0.5, 0.0, 3.5]);
    assert!(ex.validate(&a).is_err());
}

#[test]
fn empty_file_is_empty_dataset() {
    assert!(read_dataset_from(Cursor::new("")).unwrap().is_empty());
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let mut a = example(
        "a",
        &["x", "y", "z"],
        &[(0.0, 10.5), (10.5, 33.3), (40.0, 90.0)],
        9,
        3,
    );
    a.emotions = Some([0.0, 1.0 / 3.0, 2.0, 0.0, 3.0, 0.1]);
    let mut b = example("b", &[], &[], 1, 1);
    b.audio.data_mut()[0] = f64::MIN_POSITIVE;
    let c = example("c", &["q"], &[(0.0, 1e-3)], 4, 2);
    let data = vec![a, b, c];
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &data).unwrap();
    let back = read_dataset_from(Cursor::new(&buf)).unwrap();
    assert_eq!(back, data);
    let mut again = Vec::new();
    write_dataset_to(&mut again, &back).unwrap();
    assert_eq!(again, buf);
}

fn serialized(ex: &MultimodalExample) -> String {
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, std::slice::from_ref(ex)).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn truncated_payload_names_record() {
    let text = serialized(&example("rec42", &["x"], &[(0.0, 10.0)], 4, 2));
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let data = rec["audio"]["data"].as_str().unwrap().to_string();
    // drop 8 bytes = one value (12 base64 characters re-encoded)
    use base64::Engine;
    let mut bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .unwrap();
    bytes.truncate(bytes.len() - 8);
    rec["audio"]["data"] = base64::engine::general_purpose::STANDARD
        .encode(bytes)
        .into();
    lines[1] = rec.to_string();
    let err = read_dataset_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert!(
        matches!(&err, DataError::Record { id, field, .. } if id == "rec42" && field == "audio.data")
    );
    assert!(err.to_string().contains("truncated"));
}

#[test]
fn schema_violation_reports_line_and_path() {
    let text = serialized(&example("r", &["x"], &[(0.0, 10.0)], 4, 2));
    let bad = text.replace(
        "\"boundaries\":[[0.0,10.0]]",
        "\"boundaries\":[[0.0,\"late\"]]",
    );
    assert_ne!(bad, text);
    match read_dataset_from(Cursor::new(bad)) {
        Err(DataError::Format { line, path, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(path, "boundaries[0][1]");
        }
        other => panic!("unexpected {other:?}"),
    }
    let wrong_version = text.replace("\"version\":1", "\"version\":9");
    assert!(matches!(
        read_dataset_from(Cursor::new(wrong_version)),
        Err(DataError::Format { line: 1, .. })
    ));
}

#[test]
fn embeddings_complete_and_inconsistent() {
    let emb = Embeddings::parse(Cursor::new("a 1 2\nb 3 4\n\nc 5 6\n")).unwrap();
    let vocab = Vocabulary::from_embeddings(&emb).unwrap();
    assert_eq!(vocab.len(), 3);
    assert_eq!(vocab.table().row(2), &[5.0, 6.0]);
    assert!(matches!(
        Embeddings::parse(Cursor::new("a 1 2\nb 3\n")),
        Err(DataError::Embedding { line: 2, .. })
    ));
    assert!(Embeddings::parse(Cursor::new("a 1 x\n")).is_err());
}

#[test]
fn duplicate_embedding_last_wins() {
    let emb = Embeddings::parse(Cursor::new("a 1 2\nb 3 4\na 7 8\n")).unwrap();
    assert_eq!(emb.tokens, vec!["a", "b"]);
    assert_eq!(emb.vectors[0], vec![7.0, 8.0]);
    let mut buf = Vec::new();
    emb.write(&mut buf).unwrap();
    assert_eq!(Embeddings::parse(Cursor::new(buf)).unwrap(), emb);
}

#[test]
fn oov_tokens_are_dropped_with_boundaries() {
    let emb = Embeddings::parse(Cursor::new("a 1\nb 2\n")).unwrap();
    let vocab = Vocabulary::from_embeddings(&emb).unwrap();
    let ex = example(
        "e",
        &["a", "zz", "b"],
        &[(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)],
        4,
        2,
    );
    let only_oov = example("f", &["zz"], &[(0.0, 10.0)], 4, 2);
    let (kept, report) = vocab.filter_oov(vec![ex, only_oov]);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].words, vec!["a", "b"]);
    assert_eq!(kept[0].boundaries, vec![(0.0, 10.0), (20.0, 30.0)]);
    assert_eq!(
        report,
        OovReport {
            dropped_tokens: 2,
            affected_examples: 2,
            emptied_examples: 1
        }
    );
    assert_eq!(vocab.encode(&kept[0]).unwrap(), vec![0, 1]);
    let mut v = vocab.clone();
    v.count_unigrams(&kept);
    assert_eq!(v.counts(), &[1, 1]);
}

fn small_config(seed: u64, examples: usize) -> SynthConfig {
    SynthConfig {
        seed,
        examples,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_is_seed_deterministic_and_valid() {
    let a = synth_corpus(&small_config(5, 50)).unwrap();
    let b = synth_corpus(&small_config(5, 50)).unwrap();
    let bytes = |c: &SynthCorpus| {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &c.examples).unwrap();
        c.write_manifest(&mut buf).unwrap();
        c.embeddings.write(&mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(
        bytes(&a),
        bytes(&synth_corpus(&small_config(6, 50)).unwrap())
    );
    let vocab = Vocabulary::from_embeddings(&a.embeddings).unwrap();
    assert_eq!(vocab.len(), 64);
    let al = Alignment::default();
    for ex in &a.examples {
        ex.validate(&al).unwrap();
        vocab.encode(ex).unwrap();
        let audio_rows = ex.audio.rows().div_ceil(al.stack);
        for s in al.spans(ex).unwrap() {
            assert!(s.audio.end <= audio_rows && s.visual.end <= ex.visual.rows());
        }
    }
}

#[test]
fn labels_reconstruct_from_manifest() {
    let c = synth_corpus(&small_config(8, 300)).unwrap();
    for (ex, m) in c.examples.iter().zip(&c.manifest) {
        assert_eq!(ex.id, m.id);
        assert_eq!(ex.words[m.slot], pair_token(m.pair, m.member));
        let binary = ex.emotions.unwrap().map(|s| u8::from(s > 0.0));
        assert_eq!(binary, emotion_rule(m.member, m.visual_state));
    }
    // every emotion has both classes in a corpus of this size
    for k in 0..NUM_EMOTIONS {
        let pos = c.manifest.iter().filter(|m| m.labels[k] == 1).count();
        assert!(pos > 0 && pos < c.manifest.len());
    }
}

#[test]
fn member_frequency_is_balanced() {
    let c = synth_corpus(&small_config(9, 2000)).unwrap();
    let ones = c.manifest.iter().filter(|m| m.member == 1).count();
    let freq = ones as f64 / 2000.0;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

/// Text with the slot hidden is identical when members are swapped, so any
/// text-only predictor is right on exactly half of the pooled corpus.
#[test]
fn text_only_bayes_accuracy_is_one_half() {
    let config = small_config(10, 500);
    let c = synth_corpus(&config).unwrap();
    let flipped: Vec<u8> = c.manifest.iter().map(|m| 1 - m.member).collect();
    let d = generate(&config, Some(&flipped)).unwrap();
    let mut correct = 0;
    for ((a, b), m) in c.examples.iter().zip(&d.examples).zip(&c.manifest) {
        let mut ta = a.words.clone();
        let mut tb = b.words.clone();
        ta[m.slot] = String::new();
        tb[m.slot] = String::new();
        assert_eq!(ta, tb);
        assert_eq!(a.boundaries, b.boundaries);
        assert_ne!(a.words[m.slot], b.words[m.slot]);
        // a deterministic text-only guess is right on exactly one of the two
        let guess = ta.len() % 2;
        correct += usize::from(guess == usize::from(m.member))
            + usize::from(guess == usize::from(1 - m.member));
    }
    assert_eq!(correct as f64 / (2 * c.examples.len()) as f64, 0.5);
}

/// Likelihood-ratio decision on the audio left after zeroing the slot span.
#[test]
fn audio_bayes_accuracy_with_masked_slot() {
    let c = synth_corpus(&small_config(11, 2000)).unwrap();
    let al = Alignment::default();
    let mut correct = 0;
    for (ex, m) in c.examples.iter().zip(&c.manifest) {
        let span = &al.spans(ex).unwrap()[m.slot].audio;
        let mu = &c.tones[m.pair];
        let mut llr = 0.0;
        for r in 0..ex.audio.rows() {
            if span.contains(&(r / al.stack)) {
                continue;
            }
            llr += ex
                .audio
                .row(r)
                .iter()
                .zip(mu)
                .map(|(x, u)| x * u)
                .sum::<f64>();
        }
        let predicted = u8::from(llr < 0.0);
        correct += usize::from(predicted == m.member);
    }
    let acc = correct as f64 / c.examples.len() as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn visual_pairs_reveal_state_in_text() {
    let config = SynthConfig {
        visual_pairs: 1,
        ..small_config(12, 100)
    };
    let c = synth_corpus(&config).unwrap();
    for (ex, m) in c.examples.iter().zip(&c.manifest) {
        let v = m.visual_slot.unwrap();
        assert_ne!(v, m.slot);
        assert_eq!(ex.words[v], visual_token(0, m.visual_state));
    }
}

#[test]
fn pair_members_share_an_embedding() {
    let config = SynthConfig {
        visual_pairs: 1,
        ..small_config(13, 10)
    };
    let c = synth_corpus(&config).unwrap();
    let vocab = Vocabulary::from_embeddings(&c.embeddings).unwrap();
    let vec_of = |t: &str| vocab.table().row(vocab.id(t).unwrap()).to_vec();
    assert_eq!(vec_of(&pair_token(0, 0)), vec_of(&pair_token(0, 1)));
    assert_eq!(vec_of(&visual_token(0, 0)), vec_of(&visual_token(0, 1)));
    assert_ne!(vec_of(&pair_token(0, 0)), vec_of("w000"));
    // shared tables do not depend on the number of visual pairs
    let plain = synth_corpus(&small_config(13, 10)).unwrap();
    assert_eq!(plain.tones, c.tones);
    assert_eq!(plain.visual_direction, c.visual_direction);
    let plain_vocab = Vocabulary::from_embeddings(&plain.embeddings).unwrap();
    assert_eq!(
        plain_vocab.table().row(plain_vocab.id("w007").unwrap()),
        vocab.table().row(vocab.id("w007").unwrap())
    );
}

#[test]
fn example_ranges_compose() {
    let whole = synth_corpus(&small_config(14, 12)).unwrap();
    let tail = synth_corpus(&SynthConfig {
        first_example: 7,
        ..small_config(14, 5)
    })
    .unwrap();
    assert_eq!(tail.examples, whole.examples[7..]);
    assert_eq!(tail.manifest, whole.manifest[7..]);
}

/// The conjunctive code leaves the per-state mean frame unchanged, while the
/// product of the two half projections recovers the state.
#[test]
fn conjunctive_visual_code() {
    let config = SynthConfig {
        visual_code: VisualCode::Conjunctive,
        ..small_config(15, 2000)
    };
    let c = synth_corpus(&config).unwrap();
    let dim = config.visual_dim;
    let half = dim / 2;
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    let mut correct = 0;
    for (ex, m) in c.examples.iter().zip(&c.manifest) {
        let rows = ex.visual.rows();
        let mean: Vec<f64> = (0..dim)
            .map(|j| (0..rows).map(|r| ex.visual.row(r)[j]).sum::<f64>() / rows as f64)
            .collect();
        let s = usize::from(m.visual_state);
        counts[s] += 1;
        sums[s].iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
        let proj = |range: std::ops::Range<usize>| -> f64 {
            range.map(|j| mean[j] * c.visual_direction[j]).sum()
        };
        let agree = proj(0..half) * proj(half..dim) > 0.0;
        correct += usize::from(agree == (m.visual_state == 1));
    }
    for j in 0..dim {
        let gap = sums[1][j] / counts[1] as f64 - sums[0][j] / counts[0] as f64;
        assert!(gap.abs() < 0.1, "dim {j}: {gap}");
    }
    assert!(correct as f64 / 2000.0 >= 0.99);
    let narrow = SynthConfig {
        visual_dim: 1,
        ..config
    };
    assert!(synth_corpus(&narrow).is_err());
}

#[test]
fn infeasible_parameters_are_rejected() {
    let too_many = SynthConfig {
        ambiguity_pairs: 40,
        ..SynthConfig::default()
    };
    assert!(matches!(
        synth_corpus(&too_many),
        Err(DataError::InvalidArgument(_))
    ));
    let lengths = SynthConfig {
        min_words: 4,
        max_words: 3,
        ..SynthConfig::default()
    };
    assert!(synth_corpus(&lengths).is_err());
}

proptest! {
    #[test]
    fn consecutive_spans_are_disjoint(durations in prop::collection::vec((0.0f64..80.0, 0.0f64..300.0), 1..12)) {
        let mut t = 0.0;
        let mut bounds = Vec::new();
        for (gap, len) in durations {
            t += gap;
            bounds.push((t, t + len));
            t += len;
        }
        let spans = align(&bounds, 10.0, 25.0).unwrap();
        for w in spans.windows(2) {
            prop_assert!(w[0].audio.end <= w[1].audio.start);
            prop_assert!(w[0].visual.end <= w[1].visual.start);
            let (a, b) = (stacked_span(&w[0].audio, 5), stacked_span(&w[1].audio, 5));
            prop_assert!(a.end <= b.start);
        }
    }

    #[test]
    fn stacking_preserves_energy(t in 1usize..23, d in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let s = stack_audio(&frames, 5);
        prop_assert_eq!(s.rows(), t.div_ceil(5));
        let e_in: f64 = frames.data().iter().map(|v| v * v).sum();
        let e_out: f64 = s.data().iter().map(|v| v * v).sum();
        prop_assert!((e_in - e_out).abs() <= 1e-12 * e_in.max(1.0));
        let back = unstack_audio(&s, 5);
        prop_assert_eq!(&back.data()[..t * d], frames.data());
        prop_assert!(back.data()[t * d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_random_records(seed in any::<u64>(), n in 0usize..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<MultimodalExample> = (0..n).map(|i| {
            let words = rng.random_range(0..4);
            let mut ex = example(&format!("r{i}"), &vec!["t"; words], &vec![(1.5, 2.25); words], rng.random_range(1..6), rng.random_range(1..4));
            for v in ex.audio.data_mut() {
                *v = f64::from_bits(rng.random::<u64>() & 0x7fef_ffff_ffff_ffff);
            }
            if rng.random_bool(0.5) {
                ex.emotions = Some([rng.random_range(0.0..3.0); 6]);
            }
            ex
        }).collect();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &data).unwrap();
        prop_assert_eq!(read_dataset_from(Cursor::new(buf)).unwrap(), data);
    }
}

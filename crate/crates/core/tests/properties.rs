use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svs_core::codec::{rvq_quantize, AcousticUnitSequence, Codebook};
use svs_core::features::{regulate, PhonemeVocab};
use svs_core::metrics::{rffe, soft_accuracy};
use svs_core::pitch::{decompose_f0, recompose_f0, voiced_mean, F0Sequence};
use svs_core::prompt::{assemble_prompt, drop_labels, Attribute, AttributeLabels, Gender, KeywordBank, TemplateBank, VocalRange, Volume};
use svs_core::prompt_encoder::PromptEmbedding;
use svs_core::transformer::{build_sequence, ModelConfig, SegmentKind};

const TARGET: f64 = 230.0;

/// Voiced values in a singable range, unvoiced as 0, at least one voiced.
fn f0_seq() -> impl Strategy<Value = F0Sequence> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 60.0f64..900.0], 1..120)
        .prop_filter("needs a voiced frame", |v| v.iter().any(|&x| x > 0.0))
        .prop_map(F0Sequence)
}

fn labels() -> impl Strategy<Value = AttributeLabels> {
    (
        prop::option::of(prop::sample::select(Gender::ALL.to_vec())),
        prop::option::of(prop::sample::select(Volume::ALL.to_vec())),
        prop::option::of(prop::sample::select(VocalRange::ALL.to_vec())),
    )
        .prop_map(|(gender, volume, vocal_range)| AttributeLabels {
            gender,
            volume,
            vocal_range: gender.and(vocal_range),
        })
        .prop_filter("at least one label", |l| !l.is_empty())
}

proptest! {
    #[test]
    fn melody_mean_sits_at_target(f0 in f0_seq()) {
        let d = decompose_f0(&f0, TARGET).unwrap();
        let voiced: Vec<f64> = d.melody.iter().filter(|&&m| m > 0).map(|&m| m as f64).collect();
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        prop_assert!((mean - TARGET).abs() <= 0.5 + 1e-9, "mean {mean}");
        prop_assert_eq!(d.melody.len(), f0.len());
        for (&m, &v) in d.melody.iter().zip(f0.values()) {
            prop_assert_eq!(m > 0, v > 0.0);
        }
    }

    #[test]
    fn melody_is_transposition_invariant(f0 in f0_seq(), c in 0.5f64..2.0) {
        let a = decompose_f0(&f0, TARGET).unwrap();
        let b = decompose_f0(&f0.scaled(c), TARGET).unwrap();
        for (x, y) in a.melody.iter().zip(&b.melody) {
            prop_assert!((*x as i64 - *y as i64).abs() <= 1);
        }
        let want = voiced_mean(&f0).unwrap() * c;
        prop_assert!((b.range_factor as f64 - want).abs() <= 1.0);
    }

    #[test]
    fn round_trip_within_rounding_bound(f0 in f0_seq()) {
        let d = decompose_f0(&f0, TARGET).unwrap();
        let back = recompose_f0(&d, TARGET).unwrap();
        let bound = d.range_factor as f64 / TARGET + 1.0;
        for (&r, &v) in back.values().iter().zip(f0.values()) {
            prop_assert!((r - v).abs() <= bound + 1e-9, "{r} vs {v}");
        }
    }

    #[test]
    fn rffe_identity_symmetry_and_scale(a in f0_seq(), c in 0.3f64..3.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = F0Sequence(a.values().iter().map(|&v| {
            if rng.random_bool(0.1) { 0.0 } else if v > 0.0 { v * rng.random_range(0.7..1.4) } else { 0.0 }
        }).collect());
        prop_assume!(b.voiced_count() > 0);
        prop_assert_eq!(rffe(&a, &a).unwrap(), 0.0);
        let ab = rffe(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - rffe(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - rffe(&a.scaled(c), &b.scaled(c)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn soft_accuracy_peaks_inside_and_decays_outside(lo in 0.0f64..200.0, width in 0.0f64..100.0, k in 0.01f64..30.0, e1 in 0.0f64..10.0, e2 in 0.0f64..10.0) {
        let hi = lo + width;
        prop_assert_eq!(soft_accuracy(lo + width / 2.0, lo, hi, k), 100.0);
        let (near, far) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assume!(far - near > 1e-6);
        prop_assert!(soft_accuracy(hi + near, lo, hi, k) > soft_accuracy(hi + far, lo, hi, k));
        prop_assert!(soft_accuracy(lo - far, lo, hi, k) > 0.0);
    }

    #[test]
    fn rvq_residuals_never_grow_and_pick_argmin(seed in any::<u64>(), dim in 1usize..6, size in 1usize..9, stages in 1usize..4) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books: Vec<Codebook> = (0..stages)
            .map(|_| Codebook::new(dim, (0..dim * size).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        let x: Vec<f32> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (idx, trace) = rvq_quantize(&x, &books).unwrap();
        let e0: f32 = x.iter().map(|v| v * v).sum();
        prop_assert!(trace[0] <= e0 + 1e-5);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-5);
        }
        let brute = (0..size)
            .min_by(|&a, &b| {
                let d = |i: usize| books[0].codeword(i).iter().zip(&x).map(|(c, v)| (c - v) * (c - v)).sum::<f32>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        prop_assert_eq!(idx[0], brute);
    }

    #[test]
    fn regulation_keeps_total_length_and_order(durs in prop::collection::vec(0.0f64..0.5, 1..30), rate in prop::sample::select(vec![50.0, 75.0, 86.1328125])) {
        let names: Vec<String> = (0..durs.len()).map(|i| format!("p{i}")).collect();
        let vocab = PhonemeVocab::from_symbols(names.iter().map(String::as_str));
        let seq = regulate(&names, &durs, rate, &vocab).unwrap();
        let total: f64 = durs.iter().sum();
        prop_assert_eq!(seq.len() as i64, (total * rate).round() as i64);
        // runs of equal ids follow the phoneme order
        let mut runs = seq.phoneme_ids.clone();
        runs.dedup();
        let mut source = names.iter().map(|n| vocab.id(n));
        for id in runs {
            prop_assert!(source.any(|s| s == id), "id {id} out of order");
        }
    }

    #[test]
    fn dropped_labels_stay_valid(l in labels(), p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = drop_labels(&l, p1, p2, &mut rng);
        prop_assert!(!d.is_empty());
        prop_assert!(d.vocal_range.is_none() || d.gender.is_some());
        for a in Attribute::ALL {
            prop_assert!(!d.is_present(a) || l.is_present(a));
        }
    }

    #[test]
    fn assembled_sentences_have_no_placeholders(l in labels(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = assemble_prompt(&l, &KeywordBank::builtin(), &TemplateBank::builtin(), &mut rng).unwrap();
        for a in Attribute::ALL {
            prop_assert!(!s.sentence.contains(a.placeholder()), "{}", s.sentence);
        }
        // category-specific templates carry no placeholder and pick no keyword
        for a in s.keyword_choices.keys() {
            prop_assert!(l.is_present(*a));
        }
        prop_assert_eq!(s.labels, l);
    }

    #[test]
    fn layout_length_follows_repeat_rule(p in 1usize..5, t in 1usize..12, n_q in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            n_q,
            codebook_size: 4,
            phonemes: 3,
            max_pitch: 10,
            prompt_encoders: BTreeMap::from([("toy-bow".to_string(), 2)]),
            ..Default::default()
        };
        let v = cfg.vocab();
        let prompt = PromptEmbedding {
            vectors: vec![vec![0.5, -0.5]; p],
            encoder_id: "toy-bow".into(),
            pooled: p == 1,
        };
        let phon: Vec<u32> = (0..t).map(|_| rng.random_range(0..3)).collect();
        let mel: Vec<u32> = (0..t).map(|_| rng.random_range(0..=10)).collect();
        let frames: Vec<Vec<u32>> = (0..t).map(|_| (0..n_q).map(|_| rng.random_range(0..4)).collect()).collect();
        let units = AcousticUnitSequence::new(n_q, 4, frames).unwrap();
        let full = build_sequence(&prompt, &phon, &mel, Some(3), Some(&units), &v).unwrap();
        // prompt, phonemes, melody, range factor, units, four separators
        prop_assert_eq!(full.positions(), (p + t + t + 1 + t + 4) * n_q);
        full.validate(&v).unwrap();
        let rf = full.segment(SegmentKind::RangeFactor).unwrap().start;
        let masked = full.loss_mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(masked, (1 + t) * n_q);
        prop_assert!(full.loss_mask[..rf * n_q].iter().all(|&m| !m));
        let prefix = build_sequence(&prompt, &phon, &mel, None, None, &v).unwrap();
        prop_assert_eq!(prefix.positions(), (p + t + t + 3) * n_q);
    }
}

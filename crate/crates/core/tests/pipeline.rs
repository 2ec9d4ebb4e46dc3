use mre_core::checkpoint;
use mre_core::corpus::{enumerate_pairs, gen_synthetic, PairMode, SyntheticSpec};
use mre_core::encoder::encode;
use mre_core::eval::evaluate;
use mre_core::train::{train, TrainSpec};
use mre_core::variants::predict;
use mre_core::{HeadType, Model, ModelConfig, PassMode, Variant};
use proptest::prelude::*;

fn corpus(paragraphs: usize, seed: u64) -> Vec<mre_core::corpus::AnnotatedParagraph> {
    gen_synthetic(&SyntheticSpec {
        paragraphs,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small(variant: Variant, mode: PassMode, head: HeadType) -> ModelConfig {
    ModelConfig {
        variant,
        mode,
        head,
        d_model: 16,
        ff: 16,
        ..Default::default()
    }
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let data = corpus(24, 1);
    let spec = TrainSpec {
        epochs: 2,
        ..Default::default()
    };
    for variant in Variant::ALL {
        let mode = if variant.supports(PassMode::OnePass) { PassMode::OnePass } else { PassMode::PerPair };
        let model = Model::for_corpus(small(*variant, mode, HeadType::Mlp), &data).unwrap();
        let trained = train(model, &data, &spec).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&trained, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let (a, ra) = evaluate(&trained, &data, mode).unwrap();
        let (b, rb) = evaluate(&loaded, &data, mode).unwrap();
        assert_eq!(a.render_metrics(), b.render_metrics(), "{variant}");
        assert_eq!(ra, rb);
    }
}

#[test]
fn thread_count_does_not_change_the_checkpoint() {
    let data = corpus(20, 2);
    let run = |threads| {
        let model = Model::for_corpus(small(Variant::EntityAware, PassMode::OnePass, HeadType::Linear), &data).unwrap();
        let spec = TrainSpec {
            epochs: 2,
            threads,
            ..Default::default()
        };
        checkpoint::to_bytes(&train(model, &data, &spec).unwrap().model)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn training_lowers_the_loss() {
    let data = corpus(40, 3);
    let model = Model::for_corpus(small(Variant::EntityAware, PassMode::OnePass, HeadType::Biaffine), &data).unwrap();
    let out = train(
        model,
        &data,
        &TrainSpec {
            epochs: 8,
            lr: 3e-3,
            ..Default::default()
        },
    )
    .unwrap();
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = out.curve.iter().filter(|s| s.epoch == e).map(|s| s.loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (out.curve[0].epoch, out.curve.last().unwrap().epoch);
    assert_eq!(last - first, 7);
    assert!(epoch_mean(last) < 0.7 * epoch_mean(first), "{} -> {}", epoch_mean(first), epoch_mean(last));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), mentions in 2usize..6) {
        let data = gen_synthetic(&SyntheticSpec { paragraphs: 8, mentions, seed, ..Default::default() }).unwrap();
        let cfg = ModelConfig { seed, ..small(Variant::EntityAware, PassMode::OnePass, HeadType::Linear) };
        let model = Model::for_corpus(cfg, &data).unwrap();
        let out = encode(&model, &data[0]).unwrap();
        for layer in &out.attention {
            for head in layer {
                for r in 0..head.rows() {
                    let s: f64 = head.row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(head.row(r).iter().all(|&w| w >= 0.0));
                }
            }
        }
    }

    #[test]
    fn predictions_are_distributions_with_argmax_labels(seed in any::<u64>(), head in 0usize..3) {
        let data = gen_synthetic(&SyntheticSpec { paragraphs: 8, mentions: 4, seed, ..Default::default() }).unwrap();
        let cfg = ModelConfig { seed, ..small(Variant::EntityAware, PassMode::OnePass, HeadType::ALL[head]) };
        let model = Model::for_corpus(cfg, &data).unwrap();
        let pairs = enumerate_pairs(&data[0], PairMode::AllOrdered);
        for p in predict(&model, &data[0], &pairs).unwrap() {
            let s: f64 = p.distribution.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let best = p.distribution.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(p.distribution.iter().position(|&v| v == best), Some(p.label));
        }
    }
}

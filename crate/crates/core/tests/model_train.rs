//! Network assembly, training plumbing and metrics.

use proptest::prelude::*;
use prosma::data::{generate, generate_sample, stack, Clutter, Dataset, SplitRule, SynthConfig};
use prosma::loss::{dice_bce_value, LossWeights};
use prosma::metrics::{compute_metrics, confusion};
use prosma::model::{forward, ModelConfig, ModelParams};
use prosma::nn::{ConvSpec, ResBlockSpec};
use prosma::optim::{adam_step, AdamConfig, AdamState};
use prosma::params::Bound;
use prosma::train::{train, train_step, TrainConfig};
use prosma::{Error, GateVariant, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_values(&[n, 1, size, size], (0..n * size * size).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn output_shape_and_stage_resolutions() {
    let cfg = ModelConfig::default().with_base_channels(4);
    let p = ModelParams::init(cfg.clone(), 0).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(images(1, 2, 64));
    let out = forward(&cfg, &mut tape, &b, x).unwrap();
    assert_eq!(tape.dims(out.logits), &[2, 1, 64, 64]);
    let stages: Vec<(usize, usize)> = out
        .traces
        .iter()
        .map(|(s, t)| (*s, tape.dims(t.psi.unwrap())[2]))
        .collect();
    assert_eq!(stages, vec![(4, 8), (3, 16), (2, 32), (1, 64)]);
}

#[test]
fn indivisible_input_rejected() {
    let p = ModelParams::init(ModelConfig::default().with_base_channels(2), 0).unwrap();
    let err = p.predict_logits(&images(0, 1, 40)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

fn conv3(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}
fn pw(cin: usize, cout: usize) -> usize {
    cout * cin + cout
}
fn res(cin: usize, cout: usize) -> usize {
    conv3(cin, cout) + conv3(cout, cout) + if cin != cout { pw(cin, cout) } else { 0 }
}

#[test]
fn parameter_count_matches_shape_sum() {
    let widths = [16, 32, 64, 128, 256];
    let mut want = res(1, 16);
    for l in 1..5 {
        want += res(widths[l - 1], widths[l]);
    }
    want += res(256, 256);
    for s in (0..4).rev() {
        let c = widths[s];
        let latent = (c / 2).max(8);
        let hidden = (c / 4).max(4);
        want += conv3(widths[s + 1], c);
        want += pw(c, latent) * 2 + pw(latent, 1);
        want += 3 * latent * 9 + pw(3 * latent, latent) + latent;
        want += hidden * c + hidden + c * hidden + c;
        want += res(2 * c, c);
    }
    want += pw(16, 1);
    let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
    assert_eq!(p.num_scalars(), want);
    assert_eq!(p.store.iter().map(|(_, t)| t.len()).sum::<usize>(), want);
}

#[test]
fn init_is_seeded_and_within_he_bound() {
    let cfg = ModelConfig::default().with_base_channels(4);
    let a = ModelParams::init(cfg.clone(), 5).unwrap();
    assert_eq!(a, ModelParams::init(cfg.clone(), 5).unwrap());
    assert_ne!(a, ModelParams::init(cfg, 6).unwrap());
    for (name, t) in a.store.iter() {
        if name.ends_with(".theta") {
            let softplus = |v: f64| (1.0 + v.exp()).ln();
            assert!(t.data().iter().all(|&v| (softplus(v) - 0.05).abs() < 1e-12), "{name}");
        } else if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let fan_in: usize = t.dims()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }
}

/// Plain U-Net written directly from the building blocks, no gates.
fn reference_unet(cfg: &ModelConfig, tape: &mut Tape, p: &Bound, x: Var) -> Var {
    let c = |l: usize| cfg.base_channels << (l - 1);
    let mut skips = Vec::new();
    let mut h = x;
    for l in 1..=5 {
        if l > 1 {
            h = tape.maxpool2(h).unwrap();
        }
        let cin = if l == 1 { 1 } else { c(l - 1) };
        h = ResBlockSpec::new(cin, c(l)).apply(tape, p, &format!("enc{l}"), h).unwrap();
        skips.push(h);
    }
    let mut g = ResBlockSpec::new(c(5), c(5)).apply(tape, p, "bottleneck", h).unwrap();
    for s in (1..5).rev() {
        let up = tape.bilinear_up2(g).unwrap();
        let up = ConvSpec::conv3(c(s + 1), c(s)).apply(tape, p, &format!("up{s}"), up).unwrap();
        let cat = tape.concat_channels(skips[s - 1], up).unwrap();
        g = ResBlockSpec::new(2 * c(s), c(s)).apply(tape, p, &format!("dec{s}"), cat).unwrap();
    }
    ConvSpec::pointwise(c(1), 1).apply(tape, p, "head", g).unwrap()
}

#[test]
fn plain_variant_equals_reference_unet() {
    let cfg = ModelConfig::default().with_base_channels(3).with_variant(GateVariant::Plain);
    let p = ModelParams::init(cfg.clone(), 8).unwrap();
    let x = images(2, 2, 32);
    let mut t1 = Tape::new();
    let b1 = p.bind(&mut t1, false);
    let x1 = t1.constant(x.clone());
    let out = forward(&cfg, &mut t1, &b1, x1).unwrap();
    let mut t2 = Tape::new();
    let b2 = p.bind(&mut t2, false);
    let x2 = t2.constant(x);
    let reference = reference_unet(&cfg, &mut t2, &b2, x2);
    assert_eq!(t1.value(out.logits), t2.value(reference));
    for (_, tr) in &out.traces {
        let r = tr.report(&t1).unwrap();
        assert!(r.psi.data().iter().all(|&v| v == 1.0));
        assert!(r.channel_gate.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn plain_training_reproduces_reference_losses() {
    let ds = generate(&SynthConfig {
        size: 16,
        count: 20,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let batch: Vec<_> = ds.samples.iter().take(4).collect();
    let (x, y) = stack(&batch).unwrap();
    let cfg = ModelConfig::default().with_base_channels(2).with_variant(GateVariant::Plain);
    let tc = TrainConfig::default();

    let mut ours = ModelParams::init(cfg.clone(), 1).unwrap();
    let mut st = AdamState::new();
    let a: Vec<f64> = (0..5).map(|_| train_step(&mut ours, &mut st, &x, &y, &tc).unwrap()).collect();

    let mut refp = ModelParams::init(cfg.clone(), 1).unwrap();
    let mut st = AdamState::new();
    let mut b = Vec::new();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let bound = refp.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let logits = reference_unet(&cfg, &mut tape, &bound, xv);
        let loss = tape.dice_bce_loss(logits, &y, LossWeights::default()).unwrap();
        b.push(tape.value(loss).item().unwrap());
        tape.backward(loss).unwrap();
        adam_step(&mut refp.store, &bound.grads(&tape), &mut st, &AdamConfig::default()).unwrap();
    }
    assert_eq!(a, b);
    assert_eq!(ours, refp);
}

#[test]
fn plain_and_full_diverge_under_same_seed() {
    let a = ModelParams::init(ModelConfig::default().with_base_channels(2), 3).unwrap();
    let b = ModelParams::init(ModelConfig::default().with_base_channels(2).with_variant(GateVariant::Plain), 3).unwrap();
    assert_ne!(a.store.len(), b.store.len());
    for (name, t) in b.store.iter() {
        assert_eq!(a.store.get(name), Some(t), "shared tensor {name} differs");
    }
}

#[test]
fn history_length_and_contract_errors() {
    let ds = generate(&SynthConfig {
        size: 16,
        count: 20,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = ModelParams::init(ModelConfig::default().with_base_channels(2), 0).unwrap();
    let out = train(p.clone(), &ds, &TrainConfig { epochs: 3, ..TrainConfig::default() }, |_| {}).unwrap();
    assert_eq!(out.loss_curve().len(), 3);
    assert!((1..=3).contains(&out.best_epoch));
    let empty = Dataset {
        train: vec![],
        ..ds.clone()
    };
    assert!(matches!(train(p.clone(), &empty, &TrainConfig::default(), |_| {}), Err(Error::Contract(_))));
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(p, &ds, &bad, |_| {}), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn f1_is_function_of_iou(prob in prop::collection::vec(0.0f64..1.0, 1..60), bits in prop::collection::vec(any::<bool>(), 60)) {
        let mask: Vec<f64> = bits.iter().take(prob.len()).map(|&b| b as u8 as f64).collect();
        let c = confusion(&prob, &mask, 0.5);
        let (iou, f1) = (c.iou(), c.f1());
        prop_assert!(0.0 <= iou && iou <= f1 && f1 <= 1.0);
        prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        let n = prob.len();
        let r = compute_metrics(
            &Tensor::from_values(&[1, 1, 1, n], prob.clone()).unwrap(),
            &Tensor::from_values(&[1, 1, 1, n], mask).unwrap(),
            0.5,
            &[],
        ).unwrap();
        prop_assert_eq!(r.per_image[0].f1, f1);
    }

    #[test]
    fn loss_finite_for_finite_logits(logits in prop::collection::vec(-1e4f64..1e4, 16), bits in prop::collection::vec(any::<bool>(), 16)) {
        let mask: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let l = dice_bce_value(
            &Tensor::from_values(&[1, 1, 4, 4], logits).unwrap(),
            &Tensor::from_values(&[1, 1, 4, 4], mask).unwrap(),
            LossWeights::default(),
        ).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn synthetic_samples_keep_invariants(seed in 0u64..1000, index in 0usize..50, clutter in 0usize..3) {
        let cfg = SynthConfig {
            size: 32,
            count: 50,
            seed,
            clutter: [Clutter::None, Clutter::Low, Clutter::High][clutter],
            split: SplitRule::Fractions { train: 0.7, val: 0.15 },
            ..SynthConfig::default()
        };
        let (s, layers) = generate_sample(&cfg, index).unwrap();
        let frac = s.foreground_fraction();
        prop_assert!((0.02..=0.40).contains(&frac));
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for (i, &d) in layers.distractor.iter().enumerate() {
            prop_assert!(!(d && s.mask.data()[i] == 1.0));
        }
    }
}

use super::*;
use crate::data::{generate_phantom, PhantomParams};
use crate::dropout::DropoutSpec;
use crate::gradcheck::relative_error;
use crate::seeded_rng;
use crate::tensor::Tape;

fn tiny_config(dropout: DropoutSpec) -> ModelConfig {
    ModelConfig::tiny(3, 6, dropout)
}

fn zero_input(n: usize, c: usize, hw: usize) -> (Vec<usize>, Vec<f32>) {
    (vec![n, c, hw, hw], vec![0.0; n * c * hw * hw])
}

/// Independent layer-by-layer parameter count for the dense architecture,
/// computed from the config arithmetic alone.
fn analytic_tiramisu_count(cfg: &ModelConfig) -> usize {
    let g = cfg.growth_rate;
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let bn = |c: usize| 2 * c;
    let vd_site = matches!(cfg.dropout, DropoutSpec::Variational { .. }) as usize;

    let mut total = conv(cfg.first_conv_channels, cfg.input_channels, 3);
    let mut stack = cfg.first_conv_channels;
    let mut skips = Vec::new();
    for &layers in &cfg.layers_per_block {
        for j in 0..layers {
            let cin = stack + j * g;
            total += bn(cin) + conv(g, cin, 3) + vd_site;
        }
        stack += layers * g;
        skips.push(stack);
        total += bn(stack) + conv(stack, stack, 1) + vd_site; // transition down
    }
    for j in 0..cfg.bottleneck_layers {
        let cin = stack + j * g;
        total += bn(cin) + conv(g, cin, 3) + vd_site;
    }
    let mut new_ch = cfg.bottleneck_layers * g;
    let mut final_in = 0;
    for (i, &layers) in cfg.layers_per_block.iter().rev().enumerate() {
        total += new_ch * new_ch * 3 * 3; // transposed conv, no bias
        let in_ch = new_ch + skips[skips.len() - 1 - i];
        for j in 0..layers {
            let cin = in_ch + j * g;
            total += bn(cin) + conv(g, cin, 3) + vd_site;
        }
        final_in = in_ch + layers * g;
        new_ch = layers * g;
    }
    total + conv(cfg.num_classes, final_in, 1)
}

#[test]
fn tiny_preset_output_shape_contract() {
    let cfg = tiny_config(DropoutSpec::regular_default());
    let model = build_model(&cfg, &mut seeded_rng(1)).unwrap();
    let (shape, data) = zero_input(2, 3, 64);
    let mut tape = Tape::new();
    let x = tape.leaf(shape, data, false);
    let logits = model.forward_eval(&mut tape, x).unwrap();
    assert_eq!(tape.shape(logits), &[2, 6, 64, 64]);
}

#[test]
fn tiny_parameter_count_matches_analytic_oracle() {
    for dropout in [
        DropoutSpec::regular_default(),
        DropoutSpec::variational_default(),
        DropoutSpec::targeted_default(),
    ] {
        let cfg = tiny_config(dropout);
        let model = build_model(&cfg, &mut seeded_rng(2)).unwrap();
        assert_eq!(model.param_count(), analytic_tiramisu_count(&cfg), "{dropout:?}");
    }
}

#[test]
fn full_scale_preset_parameter_count_is_in_the_millions() {
    let cfg = ModelConfig::tiramisu103(3, 6, DropoutSpec::regular_default());
    let model = build_model(&cfg, &mut seeded_rng(3)).unwrap();
    let count = model.param_count();
    assert_eq!(count, analytic_tiramisu_count(&cfg));
    assert!(
        (1_000_000..100_000_000).contains(&count),
        "parameter count {count} outside the expected order of magnitude"
    );
}

#[test]
fn forward_on_zero_input_is_finite_with_unit_softmax() {
    let cfg = tiny_config(DropoutSpec::regular_default());
    let model = build_model(&cfg, &mut seeded_rng(4)).unwrap();
    let (shape, data) = zero_input(1, 3, 32);
    let mut tape = Tape::new();
    let x = tape.leaf(shape, data, false);
    let logits = model.forward_eval(&mut tape, x).unwrap();
    let lv = tape.value(logits);
    assert!(lv.iter().all(|v| v.is_finite()));
    let probs = softmax_channels(lv, tape.shape(logits));
    let plane = 32 * 32;
    for p in 0..plane {
        let sum: f32 = (0..6).map(|c| probs[c * plane + p]).sum();
        assert!((sum - 1.0).abs() < 1e-5, "softmax sum {sum}");
    }
}

#[test]
fn train_forward_is_seed_deterministic_and_differs_from_eval() {
    for dropout in [
        DropoutSpec::Regular { p: 0.3 },
        DropoutSpec::Variational { log_alpha_init: -1.0, log_alpha_max: 0.0 },
        DropoutSpec::Targeted { gamma: 0.5, p: 0.5 },
    ] {
        let cfg = tiny_config(dropout);
        let mut model = build_model(&cfg, &mut seeded_rng(5)).unwrap();
        let mut rng = seeded_rng(77);
        let input: Vec<f32> = (0..3 * 32 * 32).map(|i| (i % 17) as f32 / 17.0).collect();

        let run_train = |model: &mut Model, seed: u64| -> Vec<u32> {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![1, 3, 32, 32], input.clone(), false);
            let mut r = seeded_rng(seed);
            let (logits, _) = model.forward_train(&mut tape, x, &mut r).unwrap();
            tape.value(logits).iter().map(|v| v.to_bits()).collect()
        };
        let a = run_train(&mut model, 9);
        let b = run_train(&mut model, 9);
        assert_eq!(a, b, "{dropout:?}: same seed must give identical logits");

        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 3, 32, 32], input.clone(), false);
        let eval = model.forward_eval(&mut tape, x).unwrap();
        let ev: Vec<u32> = tape.value(eval).iter().map(|v| v.to_bits()).collect();
        assert_ne!(a, ev, "{dropout:?}: train and eval must differ");
        let _ = &mut rng;
    }
}

#[test]
fn forward_rejects_channel_mismatch_and_bad_divisibility() {
    let cfg = tiny_config(DropoutSpec::regular_default());
    let model = build_model(&cfg, &mut seeded_rng(6)).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1, 2, 32, 32], vec![0.0; 2 * 32 * 32], false);
    assert!(matches!(model.forward_eval(&mut tape, x), Err(Error::ShapeMismatch { .. })));

    let mut tape = Tape::new();
    let x = tape.leaf(vec![1, 3, 30, 30], vec![0.0; 3 * 30 * 30], false);
    match model.forward_eval(&mut tape, x) {
        Err(Error::Config(msg)) => assert!(msg.contains("divisible by 4"), "{msg}"),
        other => panic!("expected divisibility error, got {other:?}"),
    }
}

#[test]
fn argmax_prefers_forced_class_and_lowest_index_on_ties() {
    // Logits forced toward class 2 everywhere.
    let (c, plane) = (6, 4);
    let mut logits = vec![0.0f32; c * plane];
    for p in 0..plane {
        logits[2 * plane + p] = 5.0;
    }
    let labels = argmax_labels(&logits, &[1, c, 2, 2]);
    assert!(labels.iter().all(|&l| l == 2));

    // Scaling all logits leaves the argmax unchanged.
    let doubled: Vec<f32> = logits.iter().map(|&v| v * 2.0).collect();
    assert_eq!(labels, argmax_labels(&doubled, &[1, c, 2, 2]));

    // Ties break to the lowest class index.
    let flat = vec![1.0f32; c * plane];
    assert!(argmax_labels(&flat, &[1, c, 2, 2]).iter().all(|&l| l == 0));
}

/// Stub segmenter returning the hidden truth; exercises the prediction
/// plumbing end to end.
struct OracleStub {
    truth: LabelMap,
}

impl Segmenter for OracleStub {
    fn predict(&self, _slice: &MultiContrastSlice) -> Result<LabelMap> {
        Ok(self.truth.clone())
    }

    fn name(&self) -> String {
        "oracle-stub".into()
    }
}

#[test]
fn oracle_stub_reproduces_ground_truth() {
    let (slice, truth) =
        generate_phantom(&mut seeded_rng(7), &PhantomParams::default()).unwrap();
    let stub = OracleStub { truth: truth.clone() };
    let pred = stub.predict(&slice).unwrap();
    assert_eq!(pred.classes, truth.classes);
}

#[test]
fn predict_labels_produces_valid_class_ids() {
    let cfg = tiny_config(DropoutSpec::regular_default());
    let model = build_model(&cfg, &mut seeded_rng(8)).unwrap();
    let (slice, _) = generate_phantom(&mut seeded_rng(9), &PhantomParams::default()).unwrap();
    let pred = predict_labels(&model, &slice, 1.0).unwrap();
    assert_eq!((pred.height, pred.width), (64, 64));
    assert!(pred.classes.iter().all(|&c| c < 6));
    assert!(pred.annotated_classes.contains(&3));
}

#[test]
fn unet_baseline_shares_the_interface() {
    let mut cfg = tiny_config(DropoutSpec::regular_default());
    cfg.architecture = Architecture::UnetBaseline;
    let model = build_model(&cfg, &mut seeded_rng(10)).unwrap();
    let (shape, data) = zero_input(1, 3, 64);
    let mut tape = Tape::new();
    let x = tape.leaf(shape, data, false);
    let logits = model.forward_eval(&mut tape, x).unwrap();
    assert_eq!(tape.shape(logits), &[1, 6, 64, 64]);

    // One flag flips the architecture on the same config.
    let tiramisu = build_unet_baseline(&tiny_config(DropoutSpec::regular_default()), &mut seeded_rng(10))
        .unwrap();
    assert_eq!(tiramisu.config.architecture, Architecture::UnetBaseline);
}

#[test]
fn unet_train_forward_is_deterministic() {
    let mut cfg = tiny_config(DropoutSpec::Regular { p: 0.2 });
    cfg.architecture = Architecture::UnetBaseline;
    let mut model = build_model(&cfg, &mut seeded_rng(11)).unwrap();
    let input: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 7) % 23) as f32 / 23.0).collect();
    let mut run = |seed: u64| -> Vec<u32> {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 3, 32, 32], input.clone(), false);
        let mut r = seeded_rng(seed);
        let (logits, _) = model.forward_train(&mut tape, x, &mut r).unwrap();
        tape.value(logits).iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn checkpoint_roundtrip_keeps_eval_forward_bit_identical() {
    let dir = std::env::temp_dir().join(format!("thighseg-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = tiny_config(DropoutSpec::variational_default());
    let mut model = build_model(&cfg, &mut seeded_rng(12)).unwrap();
    model.epoch = 17;
    model.seed = 99;
    // Perturb some state so the round trip is not trivially fresh.
    model.params[3].value.data[0] += 0.25;
    model.params[3].adam_m[0] = 0.5;
    model.params[3].step_count = 7;
    model.bn_stats[0].running_mean[0] = 0.33;

    let input: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 13) % 31) as f32 / 31.0).collect();
    let forward_bits = |m: &Model| -> Vec<u32> {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 3, 32, 32], input.clone(), false);
        let logits = m.forward_eval(&mut tape, x).unwrap();
        tape.value(logits).iter().map(|v| v.to_bits()).collect()
    };
    let before = forward_bits(&model);

    let path = dir.join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.epoch, 17);
    assert_eq!(loaded.seed, 99);
    assert_eq!(loaded.params[3].step_count, 7);
    assert_eq!(forward_bits(&loaded), before);
    assert_eq!(loaded.param_fingerprint(), model.param_fingerprint());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_tiny_backward_leaves_finite_gradients_everywhere() {
    for dropout in [
        DropoutSpec::Regular { p: 0.2 },
        DropoutSpec::variational_default(),
        DropoutSpec::targeted_default(),
    ] {
        let cfg = tiny_config(dropout);
        let mut model = build_model(&cfg, &mut seeded_rng(13)).unwrap();
        let mut rng = seeded_rng(14);
        let (slice, truth) = generate_phantom(&mut rng, &PhantomParams::default()).unwrap();
        let input = batch_input_tensor(&[&slice], ContrastSelection::All, 1.0);

        let mut tape = Tape::new();
        let x = tape.leaf(input.shape.clone(), input.data.clone(), false);
        let (logits, bindings) = model.forward_train(&mut tape, x, &mut rng).unwrap();
        let loss = tape
            .softmax_cross_entropy(logits, &truth.classes, crate::data::IGNORE_LABEL)
            .unwrap();
        tape.backward(loss).unwrap();
        model.accumulate_grads(&tape, &bindings);
        for p in &model.params {
            let g = p.grad().unwrap();
            assert!(g.iter().all(|v| v.is_finite()), "non-finite grad in {}", p.name);
        }
    }
}

/// Full-network gradient spot check: a 3-pixel cross-entropy probe, with a
/// handful of entries of every parameter verified against central finite
/// differences.
#[test]
fn full_tiny_gradients_match_finite_differences_on_probe_pixels() {
    let cfg = tiny_config(DropoutSpec::Regular { p: 0.0 }); // deterministic path
    let model = build_model(&cfg, &mut seeded_rng(15)).unwrap();
    let mut rng = seeded_rng(16);
    let input: Vec<f32> = {
        use rand::Rng as _;
        (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0f32)).collect()
    };
    // Three probe pixels carry labels; everything else is ignored.
    let mut labels = vec![crate::data::IGNORE_LABEL; 16 * 16];
    labels[17] = 1;
    labels[100] = 4;
    labels[200] = 0;

    let loss_with = |params: &[crate::tensor::Parameter]| -> f32 {
        let mut m = build_model(&cfg, &mut seeded_rng(15)).unwrap();
        for (dst, src) in m.params.iter_mut().zip(params) {
            dst.value.data.clone_from(&src.value.data);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1, 3, 16, 16], input.clone(), false);
        let mut r = seeded_rng(0);
        let (logits, _) = m.forward_train(&mut tape, x, &mut r).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &labels, crate::data::IGNORE_LABEL).unwrap();
        tape.value(loss)[0]
    };

    // Analytic gradients.
    let mut m = build_model(&cfg, &mut seeded_rng(15)).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1, 3, 16, 16], input.clone(), false);
    let mut r = seeded_rng(0);
    let (logits, bindings) = m.forward_train(&mut tape, x, &mut r).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels, crate::data::IGNORE_LABEL).unwrap();
    tape.backward(loss).unwrap();
    m.accumulate_grads(&tape, &bindings);

    let base = model.params.clone();
    let mut probe_rng = seeded_rng(17);
    let step = 1e-3f64;
    for (pi, p) in m.params.iter().enumerate() {
        use rand::Rng as _;
        let grad = p.grad().unwrap();
        let n = p.value.numel();
        let picks: Vec<usize> = (0..3.min(n)).map(|_| probe_rng.gen_range(0..n)).collect();
        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        for &e in &picks {
            analytic.push(grad[e]);
            let mut params = base.clone();
            let orig = params[pi].value.data[e] as f64;
            params[pi].value.data[e] = (orig + step) as f32;
            let up = loss_with(&params) as f64;
            params[pi].value.data[e] = (orig - step) as f32;
            let down = loss_with(&params) as f64;
            fd.push(((up - down) / (2.0 * step)) as f32);
        }
        let err = relative_error(&analytic, &fd);
        assert!(err < 1e-2, "{}: probe rel err {err}", p.name);
    }
}

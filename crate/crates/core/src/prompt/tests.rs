use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_params, DEFAULT_STEP};
use crate::tensor::Tensor;
use crate::testutil::{max_abs_diff, random_matrix, randomized};

const EMOTIONS: [&str; 7] = [
    "happiness",
    "sadness",
    "neutral",
    "anger",
    "surprise",
    "disgust",
    "fear",
];

fn names(c: usize) -> Vec<String> {
    EMOTIONS[..c].iter().map(|s| s.to_string()).collect()
}

fn descriptors(c: usize) -> Vec<String> {
    (0..c)
        .map(|k| format!("{} face with cue number {k}", EMOTIONS[k]))
        .collect()
}

fn config(mode: VisualPromptMode, learnable: bool) -> PromptConfig {
    PromptConfig {
        visual_mode: mode,
        learnable_context: learnable,
        context_len: 3,
        mlp_mult: 2,
        ..PromptConfig::default()
    }
}

fn setup(c: usize, d: usize, cfg: PromptConfig) -> (PromptSet, FrozenEncoder, ParameterSet) {
    let prompts = PromptSet::new(&names(c), &descriptors(c), cfg).unwrap();
    let enc = FrozenEncoder::text(11, d, d).unwrap();
    let mut params = ParameterSet::new();
    register(&mut params, &cfg, d, d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (prompts, enc, params)
}

fn x_tilde(prompts: &PromptSet, enc: &FrozenEncoder, params: &ParameterSet, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let out = enhance_labels(&mut tape, params, prompts, enc, xi).unwrap();
    tape.value(out.x_tilde).clone()
}

#[test]
fn label_embeddings_have_one_unit_row_per_class() {
    let (prompts, enc, params) = setup(7, 8, config(VisualPromptMode::Add, true));
    let mut tape = Tape::new();
    let labels = embed_labels(&mut tape, &params, &prompts, &enc).unwrap();
    for v in [labels.x_fp, labels.x_cp] {
        let t = tape.value(v);
        assert_eq!(t.shape(), &[7, 8]);
        for r in 0..7 {
            assert!((t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn class_source_uses_names_for_fine_prompts() {
    let prompts = PromptSet::new(
        &names(3),
        &descriptors(3),
        PromptConfig {
            source: PromptSource::Class,
            ..PromptConfig::default()
        },
    )
    .unwrap();
    assert_eq!(prompts.fine, prompts.coarse);
    let prompts = PromptSet::new(&names(3), &descriptors(3), PromptConfig::default()).unwrap();
    assert_ne!(prompts.fine, prompts.coarse);
    assert!(PromptSet::new(&names(3), &descriptors(2), PromptConfig::default()).is_err());
}

#[test]
fn context_is_registered_only_when_learnable() {
    let (_, _, on) = setup(3, 8, config(VisualPromptMode::Add, true));
    let (_, _, off) = setup(3, 8, config(VisualPromptMode::Add, false));
    assert_eq!(on.value(CONTEXT).unwrap().shape(), &[3, 8]);
    assert!(!off.contains(CONTEXT));
    assert_eq!(on.get(CONTEXT).unwrap().group, ParamGroup::Prompt);
}

#[test]
fn zero_context_differs_from_no_context() {
    let (prompts, enc, mut params) = setup(3, 8, config(VisualPromptMode::Add, true));
    params.set_value(CONTEXT, Tensor::zeros(&[3, 8])).unwrap();
    let mut tape = Tape::new();
    let with = embed_labels(&mut tape, &params, &prompts, &enc).unwrap();
    let (prompts_off, _, params_off) = setup(3, 8, config(VisualPromptMode::Add, false));
    let without = embed_labels(&mut tape, &params_off, &prompts_off, &enc).unwrap();
    assert!(max_abs_diff(tape.value(with.x_fp), tape.value(without.x_fp)) > 1e-3);
    assert_eq!(tape.value(with.x_cp), tape.value(without.x_cp));
}

#[test]
fn fixed_prompts_are_stable_under_parameter_changes() {
    let (prompts, enc, params) = setup(4, 8, config(VisualPromptMode::None, false));
    let mut tape = Tape::new();
    let a = embed_labels(&mut tape, &params, &prompts, &enc).unwrap();
    let a = tape.value(a.x_fp).clone();
    let moved = randomized(&params, 3, 0.5);
    let mut tape = Tape::new();
    let b = embed_labels(&mut tape, &moved, &prompts, &enc).unwrap();
    assert_eq!(&a, tape.value(b.x_fp));
}

#[test]
fn alignment_examples() {
    let x = random_matrix(3, 5, 1);
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let fp = tape.input(x);
    let a1 = alignment_scores(&mut tape, xi, fp, 1.0).unwrap();
    let a100 = alignment_scores(&mut tape, xi, fp, 0.01).unwrap();
    let (a1, a100) = (tape.value(a1).clone(), tape.value(a100).clone());
    for k in 0..3 {
        assert!((a1.at(k, k) - 1.0).abs() < 1e-12);
    }
    for (u, v) in a1.data().iter().zip(a100.data()) {
        assert!((u * 100.0 - v).abs() < 1e-9);
    }
    assert!(alignment_scores(&mut tape, xi, fp, 0.0).is_err());
}

#[test]
fn alignment_ignores_per_frame_scale_and_temperature_for_argmax() {
    let x = random_matrix(6, 8, 2);
    let fp = random_matrix(4, 8, 3);
    let factors = [0.1, 2.0, 7.5, 1.0, 0.3, 40.0];
    let mut scaled = x.clone();
    let d = 8;
    for (t, f) in factors.iter().enumerate() {
        scaled.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|v| *v *= f);
    }
    let mut tape = Tape::new();
    let (xv, sv, fv) = (tape.input(x), tape.input(scaled), tape.input(fp));
    let base = alignment_scores(&mut tape, xv, fv, 1.0).unwrap();
    let base = tape.value(base).clone();
    let rescaled = alignment_scores(&mut tape, sv, fv, 1.0).unwrap();
    assert!(max_abs_diff(&base, tape.value(rescaled)) < 1e-12);
    let argmax = |t: &Tensor, r: usize| {
        (0..t.cols())
            .max_by(|&a, &b| t.at(r, a).total_cmp(&t.at(r, b)))
            .unwrap()
    };
    for tau in [0.01, 0.1, 3.0] {
        let a = alignment_scores(&mut tape, xv, fv, tau).unwrap();
        let a = tape.value(a).clone();
        for r in 0..6 {
            assert_eq!(argmax(&a, r), argmax(&base, r));
        }
    }
}

#[test]
fn visual_prompt_examples() {
    let mut tape = Tape::new();
    // One frame: every class gets that frame.
    let a = tape.input(Tensor::new(vec![1, 3], vec![0.3, -2.0, 9.0]).unwrap());
    let x = tape.input(Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap());
    let v = visual_prompt(&mut tape, a, x).unwrap();
    assert_eq!(tape.value(v).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

    // Constant scores: frame mean.
    let frames = random_matrix(4, 3, 9);
    let a = tape.input(Tensor::full(&[4, 2], 0.7));
    let x = tape.input(frames.clone());
    let v = visual_prompt(&mut tape, a, x).unwrap();
    for c in 0..3 {
        let mean = (0..4).map(|t| frames.at(t, c)).sum::<f64>() / 4.0;
        assert!((tape.value(v).at(0, c) - mean).abs() < 1e-12);
        assert!((tape.value(v).at(1, c) - mean).abs() < 1e-12);
    }

    // Saturated scores pick out one frame.
    let a = tape.input(Tensor::new(vec![3, 1], vec![10.0, -10.0, -10.0]).unwrap());
    let x = tape.input(Tensor::eye(3));
    let v = visual_prompt(&mut tape, a, x).unwrap();
    let got = tape.value(v).data().to_vec();
    for (g, want) in got.iter().zip([1.0, 0.0, 0.0]) {
        assert!((g - want).abs() < 1e-6);
    }
}

#[test]
fn visual_prompt_weights_sum_to_one() {
    let mut tape = Tape::new();
    let a = tape.input(random_matrix(9, 5, 4).scaled(30.0));
    let w = tape.softmax(a, 0).unwrap();
    let w = tape.value(w);
    for k in 0..5 {
        let s: f64 = (0..9).map(|t| w.at(t, k)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_mlp_leaves_coarse_embeddings() {
    for mode in [VisualPromptMode::None, VisualPromptMode::Add, VisualPromptMode::Prepend] {
        let (prompts, enc, params) = setup(3, 8, config(mode, true));
        let mut tape = Tape::new();
        let xi = tape.input(random_matrix(5, 8, 1));
        let out = enhance_labels(&mut tape, &params, &prompts, &enc, xi).unwrap();
        assert_eq!(tape.value(out.x_tilde), tape.value(out.labels.x_cp));
        assert_eq!(out.v_p.is_some(), mode != VisualPromptMode::None);
    }
}

#[test]
fn modes_differ_once_mlp_is_trained() {
    let x = random_matrix(5, 8, 1);
    let mut outs = Vec::new();
    for mode in [VisualPromptMode::None, VisualPromptMode::Add, VisualPromptMode::Prepend] {
        let (prompts, enc, params) = setup(3, 8, config(mode, true));
        let params = randomized(&params, 8, 0.3);
        outs.push(x_tilde(&prompts, &enc, &params, &x));
    }
    assert!(max_abs_diff(&outs[0], &outs[1]) > 1e-3);
    assert!(max_abs_diff(&outs[1], &outs[2]) > 1e-3);
    assert!(max_abs_diff(&outs[0], &outs[2]) > 1e-3);
}

#[test]
fn fixed_path_depends_only_on_the_mlp() {
    let (prompts, enc, params) = setup(3, 8, config(VisualPromptMode::None, false));
    let params = randomized(&params, 2, 0.3);
    let a = x_tilde(&prompts, &enc, &params, &random_matrix(5, 8, 1));
    let b = x_tilde(&prompts, &enc, &params, &random_matrix(7, 8, 2));
    assert_eq!(a, b);
}

#[test]
fn prepend_needs_matching_token_width() {
    let cfg = config(VisualPromptMode::Prepend, true);
    let prompts = PromptSet::new(&names(3), &descriptors(3), cfg).unwrap();
    let enc = FrozenEncoder::text(1, 6, 8).unwrap();
    let mut params = ParameterSet::new();
    register(&mut params, &cfg, 6, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let xi = tape.input(random_matrix(4, 8, 0));
    assert!(matches!(
        enhance_labels(&mut tape, &params, &prompts, &enc, xi),
        Err(Error::Config(_))
    ));
}

#[test]
fn gradients_match_finite_differences_in_every_mode() {
    for (i, mode) in [VisualPromptMode::None, VisualPromptMode::Add, VisualPromptMode::Prepend]
        .into_iter()
        .enumerate()
    {
        let mut cfg = config(mode, true);
        cfg.tau_a = 0.5;
        let (prompts, enc, params) = setup(3, 6, cfg);
        let params = randomized(&params, 20 + i as u64, 0.3);
        let x = random_matrix(4, 6, 30 + i as u64);
        let probe = random_matrix(3, 6, 40 + i as u64);
        let report = check_params(&params, DEFAULT_STEP, |tape, p| {
            let xi = tape.input(x.clone());
            let out = enhance_labels(tape, p, &prompts, &enc, xi)?;
            let w = tape.constant(probe.clone());
            let prod = tape.mul(out.x_tilde, w)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert_eq!(report.params.len(), 5);
        for p in &report.params {
            assert!(p.rel_err < 1e-4, "{mode:?} {}: {:e}", p.name, p.rel_err);
        }
    }
}

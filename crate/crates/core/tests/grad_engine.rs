//! Oracle tests for the tape engine: backward against central finite
//! differences, guided-mode semantics, and relevance conservation.

use textshield_core::grad::{finite_difference, GradError, GradMap, NodeId, Tape, Tensor};
use textshield_core::rng::Rng;
use textshield_core::BackwardMode;

fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / m
    }
}

/// Two-layer net: out = select_0(affine(w2, b2, act(affine(w1, b1, x)))).
/// Returns the leaf ids in the order [x, w1, b1, w2, b2].
fn two_layer(
    tape: &mut Tape<f64>,
    leaves: &[Tensor<f64>; 5],
    use_relu: bool,
) -> (Vec<NodeId>, NodeId) {
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let h = tape.affine(ids[1], ids[2], ids[0]).unwrap();
    let a = if use_relu { tape.relu(h).unwrap() } else { tape.tanh(h).unwrap() };
    let y = tape.affine(ids[3], ids[4], a).unwrap();
    let out = tape.select(y, 0).unwrap();
    (ids, out)
}

fn random_two_layer_leaves(rng: &mut Rng, n_in: usize, n_hidden: usize, n_out: usize) -> [Tensor<f64>; 5] {
    let mut mk = |shape: Vec<usize>| {
        let mut t = Tensor::zeros(shape);
        t.fill_uniform(rng, -0.8, 0.8);
        t
    };
    [
        mk(vec![n_in]),
        mk(vec![n_hidden, n_in]),
        mk(vec![n_hidden]),
        mk(vec![n_out, n_hidden]),
        mk(vec![n_out]),
    ]
}

/// Gradient check of every leaf component against the finite-difference
/// oracle. `build` must evaluate the scalar output from scratch.
fn check_all_leaves(
    leaves: &[Tensor<f64>],
    grads: &GradMap<f64>,
    leaf_ids: &[NodeId],
    build: impl Fn(&[Tensor<f64>]) -> f64,
    tol: f64,
) {
    for (li, id) in leaf_ids.iter().enumerate() {
        let point = leaves[li].clone();
        let fd = finite_difference(
            |probe: &Tensor<f64>| {
                let mut alt: Vec<Tensor<f64>> = leaves.to_vec();
                alt[li] = probe.clone();
                Ok(build(&alt))
            },
            &point,
            1e-5,
        )
        .unwrap();
        let bp = grads.get(id).expect("leaf has gradient");
        for (a, b) in bp.values().iter().zip(fd.values()) {
            assert!(
                rel_err(*a, *b) <= tol,
                "leaf {li}: backward {a} vs finite difference {b}"
            );
        }
    }
}

#[test]
fn rectifier_matches_definition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
}

#[test]
fn affine_by_hand() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let x = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
    let y = tape.affine(w, b, x).unwrap();
    assert_eq!(tape.value(y).values(), &[3.0, 7.0]);
}

#[test]
fn linear_model_gradient_is_exactly_the_weights() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -1.2, 2.5]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0]));
    let x = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]));
    let y = tape.affine(w, b, x).unwrap();
    let out = tape.select(y, 0).unwrap();
    let grads = tape.backward(out, BackwardMode::Standard).unwrap();
    assert_eq!(grads.get(&x).unwrap().values(), &[0.3, -1.2, 2.5]);
}

#[test]
fn random_two_layer_net_matches_finite_differences() {
    for seed in 0..8u64 {
        let mut rng = Rng::new(1000 + seed);
        let leaves = random_two_layer_leaves(&mut rng, 4, 5, 3);
        let mut tape = Tape::<f64>::new();
        let (ids, out) = two_layer(&mut tape, &leaves, seed % 2 == 0);
        // Skip configurations where a rectifier input sits on the kink.
        if seed % 2 == 0 {
            let pre = {
                let mut t = Tape::<f64>::new();
                let l: Vec<NodeId> = leaves.iter().map(|x| t.leaf(x.clone())).collect();
                let h = t.affine(l[1], l[2], l[0]).unwrap();
                t.value(h).values().to_vec()
            };
            if pre.iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
        }
        let grads = tape.backward(out, BackwardMode::Standard).unwrap();
        let use_relu = seed % 2 == 0;
        check_all_leaves(&leaves, &grads, &ids, |alt| {
            let mut t = Tape::<f64>::new();
            let arr: [Tensor<f64>; 5] = [
                alt[0].clone(), alt[1].clone(), alt[2].clone(), alt[3].clone(), alt[4].clone(),
            ];
            let (_, o) = two_layer(&mut t, &arr, use_relu);
            t.value(o).item()
        }, 1e-4);
    }
}

#[test]
fn guided_equals_standard_without_rectifiers() {
    let mut rng = Rng::new(7);
    let leaves = random_two_layer_leaves(&mut rng, 4, 6, 2);
    let mut tape = Tape::<f64>::new();
    let (ids, out) = two_layer(&mut tape, &leaves, false);
    let std = tape.backward(out, BackwardMode::Standard).unwrap();
    let guided = tape.backward(out, BackwardMode::Guided).unwrap();
    for id in &ids {
        assert_eq!(std.get(id).unwrap().values(), guided.get(id).unwrap().values());
    }
}

#[test]
fn guided_gradient_entering_rectifier_parent_is_nonnegative() {
    for seed in 0..16u64 {
        let mut rng = Rng::new(40 + seed);
        let leaves = random_two_layer_leaves(&mut rng, 4, 6, 2);
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let h = tape.affine(ids[1], ids[2], ids[0]).unwrap();
        let a = tape.relu(h).unwrap();
        let y = tape.affine(ids[3], ids[4], a).unwrap();
        let out = tape.select(y, 0).unwrap();
        // The gradient reaching the affine below the rectifier equals the
        // masked gradient, which must be componentwise nonnegative. Checking
        // through the weight gradient: g_w1[j,i] = g_h[j] * x[i].
        let guided = tape.backward(out, BackwardMode::Guided).unwrap();
        let gw1 = guided.get(&ids[1]).unwrap();
        let x = &leaves[0];
        for j in 0..6 {
            for i in 0..4 {
                let gh = gw1.values()[j * 4 + i] / x.values()[i];
                if x.values()[i].abs() > 1e-9 {
                    assert!(gh >= -1e-12, "guided gradient below rectifier went negative");
                }
            }
        }
    }
}

#[test]
fn guided_masks_everything_when_upstream_gradients_are_negative() {
    // y = -1 * sum(relu(x)): every upstream gradient into the rectifier is
    // negative, so the guided pass reports a zero gradient for x.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let a = tape.relu(x).unwrap();
    let w = tape.leaf(Tensor::matrix(1, 3, vec![-1.0, -1.0, -1.0]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0]));
    let y = tape.affine(w, b, a).unwrap();
    let out = tape.select(y, 0).unwrap();
    let guided = tape.backward(out, BackwardMode::Guided).unwrap();
    assert!(guided.get(&x).unwrap().values().iter().all(|&g| g == 0.0));
    let standard = tape.backward(out, BackwardMode::Standard).unwrap();
    assert!(standard.get(&x).unwrap().values().iter().all(|&g| g == -1.0));
}

#[test]
fn relevance_of_single_affine_layer_approaches_w_times_x() {
    // All contributions positive, epsilon tiny: share of input i tends to w_i * x_i.
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::matrix(1, 3, vec![0.5, 1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0]));
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 0.5]));
    let y = tape.affine(w, b, x).unwrap();
    let out = tape.select(y, 0).unwrap();
    let rel = tape.relevance(out, 1e-12).unwrap();
    let rx = rel.get(&x).unwrap();
    for (got, want) in rx.values().iter().zip([0.5, 2.0, 1.0]) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn relevance_is_conserved_on_small_random_nets() {
    // Bias shares are dropped by the epsilon rule, so conservation is tight
    // only when biases are zero (as they are at model initialization).
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = Rng::new(90 + seed);
        let mut leaves = random_two_layer_leaves(&mut rng, 4, 5, 3);
        for bi in [2usize, 4] {
            leaves[bi] = Tensor::zeros(leaves[bi].shape().to_vec());
        }
        let mut tape = Tape::<f64>::new();
        let (ids, out) = two_layer(&mut tape, &leaves, seed % 2 == 0);
        let logit = tape.value(out).item();
        if logit.abs() < 0.05 {
            continue; // conservation bound is relative to the logit
        }
        let rel = tape.relevance(out, 1e-6).unwrap();
        let total: f64 = ids
            .iter()
            .filter_map(|id| rel.get(id))
            .flat_map(|t| t.values().iter().copied())
            .sum();
        assert!(
            (total - logit).abs() <= 0.02 * logit.abs(),
            "seed {seed}: relevance sum {total} vs logit {logit}"
        );
        checked += 1;
    }
    assert!(checked >= 5, "too few usable nets: {checked}");
}

#[test]
fn relevance_of_zero_input_is_zero() {
    let mut rng = Rng::new(5);
    let mut leaves = random_two_layer_leaves(&mut rng, 4, 5, 2);
    leaves[0] = Tensor::zeros(vec![4]);
    for bi in [2usize, 4] {
        leaves[bi] = Tensor::zeros(leaves[bi].shape().to_vec());
    }
    let mut tape = Tape::<f64>::new();
    let (ids, out) = two_layer(&mut tape, &leaves, false);
    let rel = tape.relevance(out, 1e-6).unwrap();
    if let Some(rx) = rel.get(&ids[0]) {
        assert!(rx.values().iter().all(|&v| v.abs() < 1e-12));
    }
}

#[test]
fn relevance_rejects_bad_epsilon_and_nonscalar_targets() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.relevance(y, 0.0), Err(GradError::BadEpsilon(_))));
    assert!(matches!(tape.relevance(y, 1e-6), Err(GradError::NotScalar(_))));
    assert!(matches!(
        tape.backward(y, BackwardMode::Standard),
        Err(GradError::NotScalar(_))
    ));
    let empty = Tape::<f64>::new();
    assert!(matches!(
        empty.backward(y, BackwardMode::Standard),
        Err(GradError::EmptyTape)
    ));
}

#[test]
fn max_pool_breaks_ties_toward_the_first_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
    let y = tape.max_pool_time(x).unwrap();
    let out = tape.select(y, 0).unwrap();
    let grads = tape.backward(out, BackwardMode::Standard).unwrap();
    assert_eq!(grads.get(&x).unwrap().values(), &[1.0, 0.0, 0.0]);
}

#[test]
fn shape_errors_name_the_operation() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.0; 2]));
    let x = tape.leaf(Tensor::vector(vec![0.0; 5]));
    let err = tape.affine(w, b, x).unwrap_err();
    assert!(err.to_string().contains("affine"), "{err}");
}

#[test]
fn replay_reproduces_recorded_outputs() {
    let mut rng = Rng::new(11);
    let leaves = random_two_layer_leaves(&mut rng, 4, 5, 3);
    let mut tape = Tape::<f64>::new();
    let (_, out) = two_layer(&mut tape, &leaves, true);
    let _ = out;
    assert!(tape.replay_matches());
}

#[test]
fn identical_seeds_produce_bit_identical_tapes_and_gradients() {
    let run = || {
        let mut rng = Rng::new(321);
        let leaves = random_two_layer_leaves(&mut rng, 4, 5, 3);
        let mut tape = Tape::<f64>::new();
        let (ids, out) = two_layer(&mut tape, &leaves, true);
        let grads = tape.backward(out, BackwardMode::Standard).unwrap();
        let values: Vec<f64> = ids
            .iter()
            .flat_map(|id| grads.get(id).map(|t| t.values().to_vec()).unwrap_or_default())
            .collect();
        (tape.value(out).item(), values)
    };
    assert_eq!(run(), run());
}

#[test]
fn engine_also_runs_at_f32() {
    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(Tensor::matrix(1, 2, vec![1.0_f32, -2.0]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.5_f32]));
    let x = tape.leaf(Tensor::vector(vec![3.0_f32, 1.0]));
    let y = tape.affine(w, b, x).unwrap();
    let s = tape.sigmoid(y).unwrap();
    let out = tape.select(s, 0).unwrap();
    let grads = tape.backward(out, BackwardMode::Standard).unwrap();
    assert!(grads.contains_key(&x));
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![2.0, 0.0]));
    let loss = tape.cross_entropy(x, 0).unwrap();
    let grads = tape.backward(loss, BackwardMode::Standard).unwrap();
    let g = grads.get(&x).unwrap();
    let p0 = (2.0_f64).exp() / ((2.0_f64).exp() + 1.0);
    assert!((g.values()[0] - (p0 - 1.0)).abs() < 1e-12);
    assert!((g.values()[1] - (1.0 - p0)).abs() < 1e-12);
}

mod common;

use common::{noise_frame, noise_tensor, numeric_grad, rel_error, tape_grad};
use proptest::prelude::*;
use vsr_core::flow::{FlowEstimator, LearnedFlow, LearnedFlowConfig};
use vsr_core::graph::{sigmoid, Graph};
use vsr_core::losses::*;
use vsr_core::{Frame, Tensor, VideoClip};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;

#[test]
fn pixel_loss_gradient() {
    let x = noise_tensor(&[3, 4, 4], 1);
    let b = noise_tensor(&[3, 4, 4], 2);
    let analytic = tape_grad(&x, |g, v| {
        let t = g.input(b.clone());
        pixel_loss_var(g, v, t).unwrap()
    });
    let numeric = numeric_grad(&x, EPS, |p| pixel_loss(p, &b).unwrap());
    assert!(rel_error(&analytic, &numeric) < TOL);
}

#[test]
fn pingpong_loss_gradient() {
    let fwd: Vec<Tensor> = (0..3).map(|i| noise_tensor(&[3, 4, 4], 10 + i)).collect();
    let bwd: Vec<Tensor> = (0..3).map(|i| noise_tensor(&[3, 4, 4], 20 + i)).collect();
    let analytic = tape_grad(&fwd[1], |g, v| {
        let f = [g.input(fwd[0].clone()), v, g.input(fwd[2].clone())];
        let b: Vec<_> = bwd.iter().map(|t| g.input(t.clone())).collect();
        pingpong_loss_var(g, &f, &b).unwrap()
    });
    let numeric = numeric_grad(&fwd[1], EPS, |p| {
        let f = [fwd[0].clone(), p.clone(), fwd[2].clone()];
        pingpong_loss(&f, &bwd).unwrap()
    });
    assert!(rel_error(&analytic, &numeric) < TOL);
}

#[test]
fn feature_loss_gradient() {
    let shapes: [&[usize]; 2] = [&[4, 4, 4], &[8, 2, 2]];
    let fg: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| noise_tensor(s, 30 + i as u64).map(|v| v - 0.3)).collect();
    let fb: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| noise_tensor(s, 40 + i as u64)).collect();
    let w = [0.7, 0.3];
    let analytic = tape_grad(&fg[0], |g, v| {
        let a = [v, g.input(fg[1].clone())];
        let b: Vec<_> = fb.iter().map(|t| g.input(t.clone())).collect();
        feature_loss_var(g, &a, &b, &w).unwrap()
    });
    let numeric = numeric_grad(&fg[0], EPS, |p| feature_loss(&[p.clone(), fg[1].clone()], &fb, &w).unwrap());
    assert!(rel_error(&analytic, &numeric) < TOL);
}

fn perturbed_flow() -> FlowEstimator {
    let mut net = LearnedFlow::new(LearnedFlowConfig { levels: 2, width: 4 }, 5).unwrap();
    for (i, t) in net.params_mut().values_mut().enumerate() {
        let n = noise_tensor(t.shape(), 100 + i as u64);
        t.add_scaled(&n.map(|v| v - 0.5), 0.2);
    }
    FlowEstimator::Learned(net)
}

#[test]
fn warping_loss_gradient_through_learned_flow() {
    let est = perturbed_flow();
    let f0 = noise_frame(4, 4, 50);
    let f1 = noise_frame(4, 4, 51);
    let x = f0.tensor().clone();
    let analytic = tape_grad(&x, |g, v| {
        let b = g.input(f1.tensor().clone());
        warping_loss_var(g, &[v, b], &est).unwrap()
    });
    let numeric = numeric_grad(&x, EPS, |p| {
        let mut g = Graph::new();
        let a = g.input(p.clone());
        let b = g.input(f1.tensor().clone());
        let l = warping_loss_var(&mut g, &[a, b], &est).unwrap();
        g.scalar(l)
    });
    assert!(rel_error(&analytic, &numeric) < TOL);
}

#[test]
fn warping_loss_graph_and_scalar_forms_agree() {
    let est = perturbed_flow();
    let frames: Vec<Frame> = (0..3).map(|i| noise_frame(6, 5, 60 + i)).collect();
    let mut g = Graph::new();
    let vars: Vec<_> = frames.iter().map(|f| g.input(f.tensor().clone())).collect();
    let v = warping_loss_var(&mut g, &vars, &est).unwrap();
    assert!((g.scalar(v) - warping_loss(&frames, &est).unwrap()).abs() < 1e-12);
}

#[test]
fn warping_loss_with_zero_flow_is_mean_consecutive_mse() {
    let frames: Vec<Frame> = (0..4).map(|i| noise_frame(5, 7, 70 + i)).collect();
    let mut oracle = 0.0;
    for k in 1..frames.len() {
        let (a, b) = (frames[k - 1].tensor().data(), frames[k].tensor().data());
        oracle += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    oracle /= 3.0;
    let got = warping_loss(&frames, &FlowEstimator::Zero).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!(warping_loss(&frames[..1], &FlowEstimator::Zero).is_err());
}

#[test]
fn gan_losses_gradients() {
    let z = Tensor::from_vec(&[2], vec![0.8, -1.3]).unwrap();
    let analytic = tape_grad(&z, |g, v| {
        let real = g.scale(v, 1.0);
        let fake = g.scale(v, -0.5);
        let a = gan_loss_d_var(g, real, fake).unwrap();
        let b = gan_loss_g_var(g, fake, GanForm::NonSaturating);
        let c = gan_loss_g_var(g, real, GanForm::Minimax);
        g.weighted_sum(&[(a, 1.0), (b, 0.5), (c, 0.25)]).unwrap()
    });
    let numeric = numeric_grad(&z, EPS, |p| {
        let d = p.data();
        let mut s = 0.0;
        for &v in d {
            s += gan_loss_d_logits(v, -0.5 * v) + 0.5 * gan_loss_g_logits(-0.5 * v, GanForm::NonSaturating)
                + 0.25 * gan_loss_g_logits(v, GanForm::Minimax);
        }
        s / d.len() as f64
    });
    assert!(rel_error(&analytic, &numeric) < TOL);
}

#[test]
fn pingpong_examples() {
    assert_eq!(pingpong_indices(2), [0, 1, 0]);
    assert_eq!(pingpong_indices(3), [0, 1, 2, 1, 0]);
    assert_eq!(pingpong_indices(4), [0, 1, 2, 3, 2, 1, 0]);
    let clip = VideoClip::new("s", (0..4).map(|i| noise_frame(3, 3, i)).collect()).unwrap();
    let pp = build_pingpong(&clip).unwrap();
    assert_eq!(pp.frames().len(), 7);
    assert_eq!(pp.original_len(), 4);
    for i in 0..7 {
        assert_eq!(pp.frames().frames()[i], pp.frames().frames()[pp.mirror(i)]);
    }
    assert_eq!(&pp.frames().frames()[..4], clip.frames());
    let one = VideoClip::new("s", vec![noise_frame(3, 3, 9)]).unwrap();
    assert!(build_pingpong(&one).is_err());
}

fn small_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..5, 1usize..5, any::<u64>()).prop_map(|(c, h, w, s)| noise_tensor(&[c, h, w], s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pingpong_loss_is_symmetric(seed in any::<u64>(), n in 1usize..5) {
        let a: Vec<Tensor> = (0..n).map(|i| noise_tensor(&[3, 4, 4], seed ^ i as u64)).collect();
        let b: Vec<Tensor> = (0..n).map(|i| noise_tensor(&[3, 4, 4], seed.wrapping_add(99 + i as u64))).collect();
        prop_assert_eq!(pingpong_loss(&a, &b).unwrap(), pingpong_loss(&b, &a).unwrap());
        prop_assert_eq!(pingpong_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn feature_loss_ignores_positive_scaling(a in small_tensor(), s in 0.01f64..100.0, seed in any::<u64>()) {
        let b = noise_tensor(a.shape(), seed);
        let w = [0.4];
        let base = feature_loss(std::slice::from_ref(&a), std::slice::from_ref(&b), &w).unwrap();
        let scaled = feature_loss(&[a.scale(s)], std::slice::from_ref(&b), &w).unwrap();
        // Exact up to the denominator guard.
        let slack = 0.4 * 4.0 * COSINE_EPS / (s.min(1.0) * a.norm() * b.norm());
        prop_assert!((base - scaled).abs() <= slack + 1e-12);
        prop_assert!((-1e-12..=2.0 * 0.4 + 1e-12).contains(&base));
    }

    #[test]
    fn logit_and_probability_forms_agree(zr in -20.0f64..20.0, zf in -20.0f64..20.0) {
        let d = gan_loss_d_logits(zr, zf) - gan_loss_d(sigmoid(zr), sigmoid(zf));
        prop_assert!(d.abs() < 1e-6);
        let g = gan_loss_g_logits(zf, GanForm::NonSaturating) - gan_loss_g(sigmoid(zf));
        prop_assert!(g.abs() < 1e-6);
        let m = gan_loss_g_logits(zf, GanForm::Minimax) - gan_loss_g_minimax(sigmoid(zf));
        prop_assert!(m.abs() < 1e-6);
        prop_assert!(gan_loss_g_minimax(sigmoid(zf)) <= 0.0);
    }

    #[test]
    fn total_is_linear_in_terms(v in prop::array::uniform5(0.0f64..10.0), k in 0.0f64..5.0) {
        let t = LossTerms { adv: v[0], pixel: v[1], pp: v[2], feat: v[3], warp: v[4] };
        let scaled = LossTerms { adv: k * v[0], pixel: k * v[1], pp: k * v[2], feat: k * v[3], warp: k * v[4] };
        let w = LossWeights::default();
        let a = total_generator_loss(&t, &w).unwrap().total;
        let b = total_generator_loss(&scaled, &w).unwrap().total;
        prop_assert!((k * a - b).abs() < 1e-9 * (1.0 + b.abs()));
    }
}

//! Finite-difference and closed-form oracles for the tape.

use drift_tensor::{NodeRef, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = randn(rng, shape);
    let n = t.norm_l2();
    t.scale(1.0 / n)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (b.abs() + 1e-12)
}

/// Centered difference of `<f(x), v>` along `u` at step `eta`.
fn centered(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, u: &Tensor, v: &Tensor, eta: f64) -> f64 {
    let mut xp = x.clone();
    xp.axpy(eta, u);
    let mut xm = x.clone();
    xm.axpy(-eta, u);
    (f(&xp).dot(v) - f(&xm).dot(v)) / (2.0 * eta)
}

/// Composite conv -> relu -> dense -> xent graph with all inputs as leaves.
struct Composite {
    kernel: Tensor,
    bias: Tensor,
    w: Tensor,
    b: Tensor,
    label: usize,
}

impl Composite {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            kernel: randn(rng, &[3, 2, 3, 3]).scale(0.5),
            bias: randn(rng, &[3]).scale(0.1),
            w: randn(rng, &[4, 3 * 4 * 4]).scale(0.3),
            b: randn(rng, &[4]),
            label: rng.random_range(0..4),
        }
    }

    fn build(&self, tape: &mut Tape, x: &Tensor) -> (NodeRef, NodeRef, NodeRef, NodeRef) {
        let xn = tape.leaf(x.clone());
        let k = tape.leaf(self.kernel.clone());
        let kb = tape.leaf(self.bias.clone());
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        let c = tape.conv2d(xn, k, kb, 1).unwrap();
        let r = tape.relu(c).unwrap();
        let flat = tape.reshape(r, &[48]).unwrap();
        let z = tape.dense(flat, w, b).unwrap();
        let l = tape.softmax_cross_entropy(z, self.label).unwrap();
        (xn, c, l, k)
    }

    fn loss(&self, x: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let (_, _, l, _) = self.build(&mut t, x);
        t.value(l).unwrap().clone()
    }
}

#[test]
fn conv_identity_kernel_and_constant_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[1, 3, 3]);
    let mut t = Tape::new();
    let xn = t.leaf(x.clone());
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let k = t.leaf(delta);
    let b = t.leaf(Tensor::zeros(&[1]));
    let y = t.conv2d(xn, k, b, 1).unwrap();
    assert_eq!(t.value(y).unwrap().data(), x.data());

    let k0 = t.leaf(Tensor::zeros(&[2, 1, 3, 3]));
    let b2 = t.leaf(Tensor::from_vec(&[2], vec![0.7, -1.5]).unwrap());
    let y2 = t.conv2d(xn, k0, b2, 1).unwrap();
    let v = t.value(y2).unwrap();
    assert!(v.data()[..9].iter().all(|&p| p == 0.7));
    assert!(v.data()[9..].iter().all(|&p| p == -1.5));
}

#[test]
fn conv_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[2, 4, 4]);
    let k = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    let v = randn(&mut rng, &[3, 4, 4]);
    let fwd = |xi: &Tensor, ki: &Tensor, bi: &Tensor| {
        let mut t = Tape::new();
        let (xn, kn, bn) = (t.leaf(xi.clone()), t.leaf(ki.clone()), t.leaf(bi.clone()));
        let y = t.conv2d(xn, kn, bn, 1).unwrap();
        (t, y, xn, kn, bn)
    };
    let (t, y, xn, kn, bn) = fwd(&x, &k, &b);
    let g = t.vjp(y, &v, &[xn, kn, bn]).unwrap();
    for trial in 0..3 {
        let ux = unit(&mut rng, &[2, 4, 4]);
        let fd = centered(&|xx| { let (t, y, ..) = fwd(xx, &k, &b); t.value(y).unwrap().clone() }, &x, &ux, &v, 1e-5);
        assert!(rel_err(g[0].dot(&ux), fd) < 1e-6, "input trial {trial}");
        let uk = unit(&mut rng, &[3, 2, 3, 3]);
        let fd = centered(&|kk| { let (t, y, ..) = fwd(&x, kk, &b); t.value(y).unwrap().clone() }, &k, &uk, &v, 1e-5);
        assert!(rel_err(g[1].dot(&uk), fd) < 1e-6, "kernel trial {trial}");
        let ub = unit(&mut rng, &[3]);
        let fd = centered(&|bb| { let (t, y, ..) = fwd(&x, &k, bb); t.value(y).unwrap().clone() }, &b, &ub, &v, 1e-5);
        assert!(rel_err(g[2].dot(&ub), fd) < 1e-6, "bias trial {trial}");
    }
}

#[test]
fn relu_vjp_matches_finite_differences_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[50]).map(|p| if p.abs() < 1e-3 { p + 0.01 } else { p });
    let v = randn(&mut rng, &[50]);
    let f = |xx: &Tensor| {
        let mut t = Tape::new();
        let n = t.leaf(xx.clone());
        let y = t.relu(n).unwrap();
        t.value(y).unwrap().clone()
    };
    let mut t = Tape::new();
    let n = t.leaf(x.clone());
    let y = t.relu(n).unwrap();
    let g = t.vjp(y, &v, &[n]).unwrap();
    let u = unit(&mut rng, &[50]);
    assert!(rel_err(g[0].dot(&u), centered(&f, &x, &u, &v, 1e-5)) < 1e-6);

    let neg = Tensor::full(&[4], -1.0);
    let mut t = Tape::new();
    let n = t.leaf(neg);
    let y = t.relu(n).unwrap();
    assert!(t.value(y).unwrap().data().iter().all(|&p| p == 0.0));
    assert!(t.vjp(y, &Tensor::full(&[4], 1.0), &[n]).unwrap()[0].data().iter().all(|&p| p == 0.0));
}

#[test]
fn dense_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[5]);
    let mut t = Tape::new();
    let xn = t.leaf(x.clone());
    let eye = t.leaf(Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 }));
    let zero = t.leaf(Tensor::zeros(&[5]));
    let y = t.dense(xn, eye, zero).unwrap();
    assert_eq!(t.value(y).unwrap(), &x);

    let b = randn(&mut rng, &[3]);
    let x0 = t.leaf(Tensor::zeros(&[5]));
    let w = randn(&mut rng, &[3, 5]);
    let wn = t.leaf(w.clone());
    let bn = t.leaf(b.clone());
    let y0 = t.dense(x0, wn, bn).unwrap();
    assert_eq!(t.value(y0).unwrap(), &b);

    let y1 = t.dense(xn, wn, bn).unwrap();
    let v = randn(&mut rng, &[3]);
    let g = t.vjp(y1, &v, &[xn, wn, bn]).unwrap();
    for j in 0..5 {
        let expect: f64 = (0..3).map(|i| w.data()[i * 5 + j] * v.data()[i]).sum();
        assert!(rel_err(g[0].data()[j], expect) <= 1e-12);
    }
    for i in 0..3 {
        for j in 0..5 {
            assert!(rel_err(g[1].data()[i * 5 + j], v.data()[i] * x.data()[j]) <= 1e-12);
        }
    }
    assert_eq!(g[2], v);
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::zeros(&[3]));
    let l = t.softmax_cross_entropy(z, 1).unwrap();
    assert!((t.value(l).unwrap().item() - 1.098612288668).abs() < 1e-9);

    let z2 = t.leaf(Tensor::from_vec(&[4], vec![0.0, 30.0, 0.0, 0.0]).unwrap());
    let l2 = t.softmax_cross_entropy(z2, 1).unwrap();
    assert!(t.value(l2).unwrap().item() <= 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = randn(&mut rng, &[6]).scale(3.0);
    let zn = t.leaf(logits.clone());
    let ln = t.softmax_cross_entropy(zn, 4).unwrap();
    let g = t.grad(ln, &[zn]).unwrap();
    let m = logits.data().iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for (j, ej) in e.iter().enumerate() {
        let expect = ej / s - if j == 4 { 1.0 } else { 0.0 };
        assert!(rel_err(g[0].data()[j], expect) <= 1e-12);
    }
}

#[test]
fn composite_graph_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let c = Composite::random(&mut rng);
        let x = randn(&mut rng, &[2, 4, 4]);
        let mut t = Tape::new();
        let (xn, _, l, _) = c.build(&mut t, &x);
        let g = t.grad(l, &[xn]).unwrap();
        let u = unit(&mut rng, &[2, 4, 4]);
        let fd = centered(&|xx| c.loss(xx), &x, &u, &Tensor::scalar(1.0), 1e-5);
        assert!(rel_err(g[0].dot(&u), fd) <= 1e-5, "{} vs {}", g[0].dot(&u), fd);
    }
}

#[test]
fn vjp_is_repeatable_and_does_not_touch_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = Composite::random(&mut rng);
    let x = randn(&mut rng, &[2, 4, 4]);
    let mut t = Tape::new();
    let (xn, conv, _, _) = c.build(&mut t, &x);
    let before = t.value(conv).unwrap().clone();
    let v1 = randn(&mut rng, &[3, 4, 4]);
    let v2 = randn(&mut rng, &[3, 4, 4]);
    let a = t.vjp(conv, &v1, &[xn]).unwrap();
    let _ = t.vjp(conv, &v2, &[xn]).unwrap();
    let a2 = t.vjp(conv, &v1, &[xn]).unwrap();
    assert_eq!(a, a2);
    assert_eq!(t.value(conv).unwrap(), &before);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = Composite::random(&mut rng);
    let x = randn(&mut rng, &[2, 4, 4]);
    let run = || {
        let mut t = Tape::new();
        let (xn, _, l, k) = c.build(&mut t, &x);
        let g = t.grad(l, &[xn, k]).unwrap();
        (t.value(l).unwrap().clone(), g)
    };
    assert_eq!(run(), run());
}

/// Differentiating a recorded VJP: d/dk <J_x(k)^T v, u> against finite differences.
#[test]
fn second_order_through_conv_relu_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = Composite::random(&mut rng);
    let x = randn(&mut rng, &[2, 4, 4]);
    let u = randn(&mut rng, &[2, 4, 4]);
    let objective = |kernel: &Tensor| -> (f64, Tensor) {
        let mut t = Tape::new();
        let cc = Composite {
            kernel: kernel.clone(),
            bias: c.bias.clone(),
            w: c.w.clone(),
            b: c.b.clone(),
            label: c.label,
        };
        let (xn, _, l, k) = cc.build(&mut t, &x);
        let one = t.leaf(Tensor::scalar(1.0));
        let gx = t.vjp_graph(l, one, &[xn]).unwrap()[0];
        let un = t.leaf(u.clone());
        let s = t.dot(gx, un).unwrap();
        let gk = t.grad(s, &[k]).unwrap().remove(0);
        (t.value(s).unwrap().item(), gk)
    };
    let (_, gk) = objective(&c.kernel);
    for _ in 0..3 {
        let dir = unit(&mut rng, &[3, 2, 3, 3]);
        let eta = 1e-5;
        let mut kp = c.kernel.clone();
        kp.axpy(eta, &dir);
        let mut km = c.kernel.clone();
        km.axpy(-eta, &dir);
        let fd = (objective(&kp).0 - objective(&km).0) / (2.0 * eta);
        assert!(rel_err(gk.dot(&dir), fd) < 1e-5, "{} vs {}", gk.dot(&dir), fd);
    }
}

/// Every primitive's graph-mode backward agrees with its numeric backward.
#[test]
fn graph_and_numeric_vjp_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = Composite::random(&mut rng);
    let x = randn(&mut rng, &[2, 4, 4]);
    let mut t = Tape::new();
    let (xn, _, l, k) = c.build(&mut t, &x);
    let sm = {
        let a = t.leaf(randn(&mut rng, &[4]));
        let s = t.softmax(a).unwrap();
        let sq = t.mul(s, s).unwrap();
        let q = t.add_const(sq, 1.0).unwrap();
        let r = t.sqrt(q).unwrap();
        let d = t.div(r, q).unwrap();
        let sum = t.sum(d).unwrap();
        let m = t.mul_scalar(d, sum).unwrap();
        let n = t.neg(m).unwrap();
        let sc = t.scale(n, 0.3).unwrap();
        let sub = t.sub(sc, s).unwrap();
        let dd = t.dot(sub, sub).unwrap();
        (a, dd)
    };
    for (out, wrt) in [(l, vec![xn, k]), (sm.1, vec![sm.0])] {
        let shape = t.value(out).unwrap().shape().to_vec();
        let ct = Tensor::full(&shape, 1.3);
        let numeric = t.vjp(out, &ct, &wrt).unwrap();
        let ctn = t.leaf(ct);
        let graph = t.vjp_graph(out, ctn, &wrt).unwrap();
        for (a, g) in numeric.iter().zip(graph) {
            let b = t.value(g).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vjp_is_linear_in_cotangent(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Composite::random(&mut rng);
        let x = randn(&mut rng, &[2, 4, 4]);
        let mut t = Tape::new();
        let (xn, conv, _, k) = c.build(&mut t, &x);
        let v1 = randn(&mut rng, &[3, 4, 4]);
        let v2 = randn(&mut rng, &[3, 4, 4]);
        let mut combo = v1.scale(a);
        combo.axpy(b, &v2);
        let lhs = t.vjp(conv, &combo, &[xn, k]).unwrap();
        let g1 = t.vjp(conv, &v1, &[xn, k]).unwrap();
        let g2 = t.vjp(conv, &v2, &[xn, k]).unwrap();
        for i in 0..2 {
            let mut rhs = g1[i].scale(a);
            rhs.axpy(b, &g2[i]);
            let scale = rhs.norm_l2().max(1e-300);
            prop_assert!(lhs[i].sub(&rhs).norm_l2() / scale <= 1e-12);
        }
    }
}

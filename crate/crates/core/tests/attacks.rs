use drift_core::attacks::*;
use drift_core::models::{BaseClassifier, Filter, FilterArch, FilterBank};
use drift_core::{rng, Result};
use drift_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

const SHAPE: [usize; 3] = [3, 6, 6];

fn image(seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[2]);
    Tensor::from_fn(&SHAPE, |_| r.random_range(0.05..0.95))
}

fn perturbed_bank(k: usize, seed: u64, scale: f64) -> FilterBank {
    let mut bank = FilterBank::with_hidden(FilterArch::ResBlock, k, 4, &SHAPE, seed).unwrap();
    let mut r = rng::stream(seed, &[3]);
    for f in bank.filters_mut() {
        for p in f.params_mut() {
            *p = p.add(&Tensor::from_fn(p.shape(), |_| r.random_range(-scale..scale)));
        }
    }
    bank
}

fn constant_oracle(g: Tensor) -> FnOracle<impl FnMut(&Tensor, usize, u64) -> Result<(f64, Tensor)>> {
    FnOracle(move |x: &Tensor, _: usize, _: u64| Ok((x.dot(&g), g.clone())))
}

#[test]
fn training_step_size_default() {
    let spec = AttackSpec { epsilon: 4.0 / 255.0, steps: 10, step_size: 4.0 / 255.0 / 10.0, ..Default::default() };
    assert!((spec.step_size - 0.4 / 255.0).abs() < 1e-18);
}

#[test]
fn mim_without_momentum_matches_pgd_signs() {
    let x = image(1);
    let mut r = rng::stream(4, &[]);
    let fields: Vec<Tensor> = (0..6).map(|_| Tensor::from_fn(&SHAPE, |_| r.random_range(-1.0..1.0))).collect();
    let f2 = fields.clone();
    let spec = AttackSpec { steps: 6, momentum_decay: 0.0, ..Default::default() };
    let mut a = FnOracle(move |_: &Tensor, _: usize, s: u64| Ok((0.0, fields[s as usize].clone())));
    let mut b = FnOracle(move |_: &Tensor, _: usize, s: u64| Ok((0.0, f2[s as usize].clone())));
    assert_eq!(mim(&mut a, &x, 0, &spec).unwrap(), pgd(&mut b, &x, 0, &spec).unwrap());
}

#[test]
fn mim_constant_field_matches_pgd() {
    let x = image(2);
    let g = Tensor::from_fn(&SHAPE, |i| if i % 3 == 0 { -1.0 } else { 0.5 });
    let spec = AttackSpec { steps: 8, ..Default::default() };
    let a = mim(&mut constant_oracle(g.clone()), &x, 0, &spec).unwrap();
    let b = pgd(&mut constant_oracle(g), &x, 0, &spec).unwrap();
    assert_eq!(a, b);
}

/// Two-pixel concave quadratic whose maximiser sits between the step grid
/// points, so gradient signs oscillate. All quantities are dyadic, so the
/// scripted trajectory is exact.
#[test]
fn mim_on_oscillating_quadratic_matches_script() {
    let c = [0.5 + 3.0 / 128.0, 0.5 - 3.0 / 128.0];
    let x = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
    let grad = move |p: &Tensor| Tensor::from_vec(&[2], vec![-2.0 * (p.data()[0] - c[0]), -2.0 * (p.data()[1] - c[1])]).unwrap();
    let g = grad;
    let spec = AttackSpec { epsilon: 0.125, steps: 4, step_size: 1.0 / 64.0, momentum_decay: 1.0, ..Default::default() };

    // g = ( 3/64, -3/64)  m = ( 0.5, -0.5)  x = (33/64, 31/64)
    // g = ( 1/64, -1/64)  m = ( 1.0, -1.0)  x = (34/64, 30/64)
    // g = (-1/64,  1/64)  m = ( 0.5, -0.5)  x = (35/64, 29/64)
    // g = (-3/64,  3/64)  m = ( 0.0,  0.0)  x unchanged
    let script = [35.0 / 64.0, 29.0 / 64.0];
    let mut o = FnOracle(move |p: &Tensor, _: usize, _: u64| Ok((0.0, g(p))));
    let r = mim(&mut o, &x, 0, &spec).unwrap();
    assert_eq!(r.x_adv.data(), &script);
    // PGD turns around at once and ends on (34/64, 30/64).
    let mut o = FnOracle(move |p: &Tensor, _: usize, _: u64| Ok((0.0, grad(p))));
    let p = pgd(&mut o, &x, 0, &spec).unwrap();
    assert_eq!(p.x_adv.data(), &[34.0 / 64.0, 30.0 / 64.0]);
}

#[test]
fn square_on_linear_scorer_decreases_margin_monotonically() {
    let x = image(3);
    let mut r = rng::stream(5, &[]);
    let c = Tensor::from_fn(&SHAPE, |_| r.random_range(-1.0..1.0));
    let m0 = 0.5;
    let score_of = |p: &Tensor| m0 + c.dot(&p.sub(&x));
    let mut seen = Vec::new();
    let spec = AttackSpec { kind: AttackKind::Square, epsilon: 2.0 / 255.0, query_budget: 300, seed: 9, ..Default::default() };
    let res = square_attack(
        |p: &Tensor, _| {
            let s = score_of(p);
            seen.push(s);
            Ok(s)
        },
        &x,
        &spec,
    )
    .unwrap();
    assert_eq!(res.queries, seen.len());
    let mut best = seen[0];
    for &s in &seen[1..] {
        best = best.min(s);
    }
    assert_eq!(res.margin, best);
    assert!((score_of(&res.x_adv) - res.margin).abs() < 1e-12);
    assert!(res.margin <= m0);
    assert!(res.delta.max_abs() <= spec.epsilon);
}

#[test]
fn square_with_zero_budget_radius_never_succeeds() {
    let x = image(4);
    let spec = AttackSpec { kind: AttackKind::Square, epsilon: 0.0, query_budget: 50, ..Default::default() };
    let r = square_attack(|p: &Tensor, _| Ok(1.0 + p.sub(&x).norm_l2()), &x, &spec).unwrap();
    assert!(!r.success);
    assert_eq!(r.delta, Tensor::zeros(&SHAPE));
}

#[test]
fn eot_single_filter_equals_pipeline_gradient() {
    let bank = perturbed_bank(1, 6, 0.2);
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(5);
    let direct = pipeline_loss_grad(&model, Some(&bank.filters()[0]), &x, 2, false).unwrap().1;
    for k in [1, 3, 10] {
        let g = eot_gradient(&bank, &model, &x, 2, k, true, 11).unwrap();
        assert!(g.sub(&direct).max_abs() < 1e-15);
    }
}

#[test]
fn eot_with_crn_is_bitwise_repeatable() {
    let bank = perturbed_bank(4, 8, 0.2);
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(6);
    let a = eot_gradient(&bank, &model, &x, 1, 5, true, 42).unwrap();
    let b = eot_gradient(&bank, &model, &x, 1, 5, true, 42).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn eot_variance_shrinks_with_samples() {
    let bank = perturbed_bank(4, 9, 0.4);
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(7);
    let total_variance = |k: usize| {
        let draws: Vec<Tensor> = (0..200).map(|s| eot_gradient(&bank, &model, &x, 0, k, true, 1000 + s).unwrap()).collect();
        let mut mean = Tensor::zeros(&SHAPE);
        for d in &draws {
            mean.axpy(1.0 / draws.len() as f64, d);
        }
        draws.iter().map(|d| d.sub(&mean).norm_l2().powi(2)).sum::<f64>() / (draws.len() - 1) as f64
    };
    let (v5, v20) = (total_variance(5), total_variance(20));
    assert!(v5 > 0.0);
    assert!(v20 <= (0.25 + 0.3) * v5, "v20 = {v20}, v5 = {v5}");
}

#[test]
fn bpda_identity_filter_and_shift() {
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(8);
    let id_bank = FilterBank::new(FilterArch::ResBlock, 2, &SHAPE, 1).unwrap();
    let truth = pipeline_loss_grad(&model, Some(&id_bank.filters()[1]), &x, 3, false).unwrap().1;
    assert_eq!(bpda_gradient(&id_bank, &model, &x, 3, 1).unwrap(), truth);

    // f(x) = x + c with a per-channel constant c.
    let mut shift = Filter::init_identity(FilterArch::ResBlock, 3, 4, 2).unwrap();
    shift.params_mut()[3] = Tensor::from_vec(&[3], vec![0.05, -0.02, 0.01]).unwrap();
    let bank = FilterBank::from_filters(vec![shift.clone()], &SHAPE, 0).unwrap();
    let shifted = shift.apply(&x).unwrap();
    let base_at_shift = pipeline_loss_grad(&model, None, &shifted, 3, false).unwrap().1;
    let bpda = bpda_gradient(&bank, &model, &x, 3, 0).unwrap();
    assert_eq!(bpda, base_at_shift);
    let truth = pipeline_loss_grad(&model, Some(&shift), &x, 3, false).unwrap().1;
    assert!(truth.sub(&bpda).max_abs() < 1e-15);
}

#[test]
fn bpda_differs_from_truth_by_the_filter_jacobian() {
    let bank = perturbed_bank(1, 10, 0.3);
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(9);
    let bpda = bpda_gradient(&bank, &model, &x, 0, 0).unwrap();
    let truth = pipeline_loss_grad(&model, Some(&bank.filters()[0]), &x, 0, false).unwrap().1;
    // chain rule: truth = J_f(x)^T bpda
    let mut tape = Tape::new();
    let f = bank.filters()[0].bind(&mut tape);
    let xn = tape.leaf(x.clone());
    let u = f.forward(&mut tape, xn).unwrap();
    let composed = tape.vjp(u, &bpda, &[xn]).unwrap().remove(0);
    assert!(composed.sub(&truth).max_abs() < 1e-12);
    assert!(bpda.sub(&truth).max_abs() > 1e-6);
}

#[test]
fn adaptive_attack_collapses_to_plain_pgd() {
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(10);
    let one = perturbed_bank(1, 11, 0.2);
    let spec = AttackSpec { eot_samples: 1, steps: 5, ..Default::default() };
    let a = adaptive_attack(&one, &model, &x, 1, &spec).unwrap();
    let b = pgd(&mut PipelineOracle::filtered(&one, &model, 0).unwrap(), &x, 1, &spec).unwrap();
    assert_eq!(a, b);

    let ident = FilterBank::new(FilterArch::ResBlock, 4, &SHAPE, 12).unwrap();
    let spec = AttackSpec { bpda_identity: true, steps: 5, ..Default::default() };
    let a = adaptive_attack(&ident, &model, &x, 1, &spec).unwrap();
    let b = pgd(&mut PipelineOracle::base(&model), &x, 1, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attacks_are_deterministic() {
    let bank = perturbed_bank(4, 13, 0.2);
    let model = BaseClassifier::new(&SHAPE, 4, 7).unwrap();
    let x = image(11);
    for crn in [true, false] {
        for kind in [AttackKind::Pgd, AttackKind::Mim] {
            let spec = AttackSpec { kind, crn, steps: 4, seed: 77, ..Default::default() };
            assert_eq!(adaptive_attack(&bank, &model, &x, 2, &spec).unwrap(), adaptive_attack(&bank, &model, &x, 2, &spec).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budgets_hold_exactly(
        xs in prop::collection::vec(0.0..=1.0f64, 12),
        gs in prop::collection::vec(-3.0..3.0f64, 12),
        eps in 0.0..0.5f64,
        steps in 1usize..6,
        l2 in any::<bool>(),
        momentum in any::<bool>(),
    ) {
        let x = Tensor::from_vec(&[12], xs).unwrap();
        let g = Tensor::from_vec(&[12], gs).unwrap();
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let spec = AttackSpec { epsilon: eps, steps, step_size: eps.max(1e-3) * 0.7, norm, ..Default::default() };
        let r = if momentum {
            mim(&mut constant_oracle(g), &x, 0, &spec).unwrap()
        } else {
            pgd(&mut constant_oracle(g), &x, 0, &spec).unwrap()
        };
        prop_assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(r.delta.clone(), r.x_adv.sub(&x));
        match norm {
            Norm::Linf => prop_assert!(r.delta.max_abs() <= eps),
            Norm::L2 => prop_assert!(r.delta.norm_l2() <= eps * (1.0 + 1e-9)),
        }
    }
}

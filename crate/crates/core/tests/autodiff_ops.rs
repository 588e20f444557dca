use nerfcam::autodiff::{
    gradient_check, AutodiffError, GradCheckOptions, ParamGroup, ParamId, ParamStore, Tape, Tensor,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random-weighted sum so no gradient entry is systematically zero.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), 0.5, 1.5, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), ParamGroup::Other, t).unwrap())
        .collect();
    let report = gradient_check(&mut store, &ids, GradCheckOptions::default(), |tape, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let y = f(tape, &vars)?;
        weighted_sum(tape, y, 99)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn unary_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let cases: Vec<(&str, Unary, f64, f64)> = vec![
        ("sin", |t, x| t.sin(x), -2.0, 2.0),
        ("cos", |t, x| t.cos(x), -2.0, 2.0),
        ("exp", |t, x| t.exp(x), -2.0, 2.0),
        ("neg", |t, x| t.neg(x), -5.0, 5.0),
        ("recip", |t, x| t.recip(x), 0.5, 2.0),
        ("powf", |t, x| t.powf(x, 2.5), 0.5, 2.0),
        ("sqrt", |t, x| t.sqrt(x), 0.5, 2.0),
        ("ln", |t, x| t.ln(x), 0.5, 2.0),
        ("relu", |t, x| t.relu(x), 0.1, 2.0),
        ("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0),
        ("softplus", |t, x| t.softplus(x), -2.0, 2.0),
        ("scale", |t, x| t.scale(x, -1.7), -5.0, 5.0),
        ("add_scalar", |t, x| t.add_scalar(x, 0.3), -5.0, 5.0),
    ];
    for (name, op, lo, hi) in cases {
        let x = random(&[3, 4], lo, hi, &mut rng);
        let err = check(vec![x], |t, v| Ok(op(t, v[0])));
        assert!(err < TOL, "{name}: {err}");
    }
    // relu and clamp_min on the negative side
    let x = random(&[5], -2.0, -0.1, &mut rng);
    assert!(check(vec![x.clone()], |t, v| Ok(t.relu(v[0]))) < TOL);
    let x = random(&[6], -2.0, 2.0, &mut rng).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    assert!(check(vec![x], |t, v| Ok(t.clamp_min(v[0], 0.0))) < TOL);
}

#[test]
fn binary_ops_with_broadcast_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[3, 4]),
        (&[3, 4], &[4]),
        (&[3, 1], &[1, 4]),
        (&[2, 1, 3], &[4, 1]),
    ];
    for (sa, sb) in shapes {
        let a = random(sa, -3.0, 3.0, &mut rng);
        let b = random(sb, 0.5, 3.0, &mut rng);
        let ab = vec![a, b];
        assert!(check(ab.clone(), |t, v| t.add(v[0], v[1])) < TOL);
        assert!(check(ab.clone(), |t, v| t.sub(v[0], v[1])) < TOL);
        assert!(check(ab.clone(), |t, v| t.mul(v[0], v[1])) < TOL);
        assert!(check(ab.clone(), |t, v| t.div(v[0], v[1])) < TOL);
    }
}

#[test]
fn linear_algebra_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[5, 3], -10.0, 10.0, &mut rng);
    let b = random(&[3, 4], -10.0, 10.0, &mut rng);
    assert!(check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1])) < TOL);
    let v3 = random(&[3], -10.0, 10.0, &mut rng);
    assert!(check(vec![a.clone(), v3], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(check(vec![a.clone()], |t, v| t.transpose(v[0])) < TOL);
    // large enough to take the parallel path
    let big = random(&[300, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3, 2], -1.0, 1.0, &mut rng);
    assert!(check(vec![big, w], |t, v| t.matmul(v[0], v[1])) < TOL);
}

#[test]
fn shape_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 4], -4.0, 4.0, &mut rng);
    for axis in 0..3 {
        assert!(check(vec![x.clone()], |t, v| t.sum_axis(v[0], axis)) < TOL);
        assert!(check(vec![x.clone()], |t, v| t.cumsum_exclusive(v[0], axis)) < TOL);
        assert!(check(vec![x.clone()], |t, v| t.slice(v[0], axis, 1, 1)) < TOL);
    }
    assert!(check(vec![x.clone()], |t, v| Ok(t.sum(v[0]))) < TOL);
    assert!(check(vec![x.clone()], |t, v| t.mean(v[0])) < TOL);
    assert!(check(vec![x.clone()], |t, v| t.reshape(v[0], &[6, 4])) < TOL);
    let y = random(&[2, 1, 4], -4.0, 4.0, &mut rng);
    assert!(check(vec![x.clone(), y.clone()], |t, v| t.concat(&[v[0], v[1]], 1)) < TOL);
    assert!(check(vec![y], |t, v| t.broadcast_to(v[0], &[3, 2, 5, 4])) < TOL);
}

#[test]
fn trivial_forward_values() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::vector(&[0.0]));
    let s = t.sin(z);
    let c = t.cos(z);
    let g = t.sigmoid(z);
    assert_eq!(t.value(s).item(), 0.0);
    assert_eq!(t.value(c).item(), 1.0);
    assert_eq!(t.value(g).item(), 0.5);

    let eye = t.constant(
        Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
    );
    let v = t.constant(Tensor::vector(&[0.3, -2.0, 7.5]));
    let out = t.matmul(eye, v).unwrap();
    assert_eq!(t.value(out).data(), &[0.3, -2.0, 7.5]);
}

#[test]
fn product_and_sine_rules() {
    let mut store = ParamStore::new();
    let x = store.insert("x", ParamGroup::Other, Tensor::scalar(2.0)).unwrap();
    let y = store.insert("y", ParamGroup::Other, Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let (vx, vy) = (tape.param(&store, x), tape.param(&store, y));
    let l = tape.mul(vx, vy).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(x).item(), 3.0);
    assert_eq!(store.grad(y).item(), 2.0);

    store.zero_grad();
    store.set_value(x, Tensor::scalar(0.0)).unwrap();
    let mut tape = Tape::new();
    let vx = tape.param(&store, x);
    let l = tape.sin(vx);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(x).item(), 1.0);
    assert_eq!(store.grad(y).item(), 0.0, "non-participating parameter keeps zero grad");
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = random(&[6, 4], -1.0, 1.0, &mut rng);
    let w1 = store.insert("w1", ParamGroup::Other, random(&[4, 8], -1.0, 1.0, &mut rng)).unwrap();
    let b1 = store.insert("b1", ParamGroup::Other, random(&[8], -0.1, 0.1, &mut rng)).unwrap();
    let w2 = store.insert("w2", ParamGroup::Other, random(&[8, 2], -1.0, 1.0, &mut rng)).unwrap();
    let b2 = store.insert("b2", ParamGroup::Other, random(&[2], -0.1, 0.1, &mut rng)).unwrap();
    let r = gradient_check(&mut store, &[w1, b1, w2, b2], GradCheckOptions::default(), |t, s| {
        let xin = t.constant(x.clone());
        let (vw1, vb1, vw2, vb2) = (t.param(s, w1), t.param(s, b1), t.param(s, w2), t.param(s, b2));
        let h = t.linear(xin, vw1, vb1)?;
        let h = t.relu(h);
        let y = t.linear(h, vw2, vb2)?;
        let y = t.sigmoid(y);
        let sq = t.square(y)?;
        t.mean(sq)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn errors_name_op_and_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    let err = t.add(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch { op: "add", lhs: vec![2, 3], rhs: vec![4] }
    );
    assert!(err.to_string().contains("add"));
    let c = t.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(t.matmul(a, c), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));

    let mut store = ParamStore::<f64>::new();
    assert!(matches!(t.backward(a, &mut store), Err(AutodiffError::NotScalar { .. })));
}

fn build_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>, w: ParamId) -> Var {
    let v = tape.param(store, w);
    let s = tape.sin(v);
    let e = tape.exp(s);
    let m = tape.mul(e, v).unwrap();
    tape.mean(m).unwrap()
}

#[test]
fn backward_is_deterministic_and_does_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let w = store.insert("w", ParamGroup::Other, random(&[50], -2.0, 2.0, &mut rng)).unwrap();
    let mut tape = Tape::new();
    let l = build_loss(&mut tape, &store, w);
    tape.backward(l, &mut store).unwrap();
    let first = store.grad(w).clone();
    store.zero_grad();
    assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(w), &first, "same tape, same grads bitwise");

    store.zero_grad();
    let mut fresh = Tape::new();
    let l2 = build_loss(&mut fresh, &store, w);
    fresh.backward(l2, &mut store).unwrap();
    assert_eq!(store.grad(w), &first, "zero_grad then backward equals a fresh tape");

    // without zeroing, gradients accumulate
    fresh.backward(l2, &mut store).unwrap();
    for (a, b) in store.grad(w).data().iter().zip(first.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn f32_engine_tracks_f64() {
    let mut store = ParamStore::<f32>::new();
    let w = store
        .insert("w", ParamGroup::Other, Tensor::vector(&[0.3f32, -1.1, 0.7]))
        .unwrap();
    let r = gradient_check(
        &mut store,
        &[w],
        GradCheckOptions { step: 1e-3, ..Default::default() },
        |t, s| {
            let v = t.param(s, w);
            let y = t.sin(v);
            let y = t.mul(y, v)?;
            Ok(t.sum(y))
        },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4 * 100.0, "{r:?}");
}

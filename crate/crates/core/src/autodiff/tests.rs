use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{conv2d_reference, ConvGeom};
use super::*;

type Probe<'a> = Box<dyn Fn(&mut Tape<f64>, Var) -> Var + 'a>;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn conv_once(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.leaf(x.clone()),
        tape.leaf(w.clone()),
        tape.leaf(b.clone()),
    );
    let y = tape.conv2d(xv, wv, bv).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_hand_example() {
    let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let y = conv_once(&x, &Tensor::ones(vec![1, 1, 3, 3]), &Tensor::zeros(vec![1]));
    assert_eq!(y.data()[4], 45.0);
    assert_eq!(y.data()[0], 12.0);
}

#[test]
fn conv_of_zero_input_is_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = t(&[3], &[0.5, -1.0, 2.0]);
    let y = conv_once(&Tensor::zeros(vec![2, 2, 4, 5]), &w, &b);
    for (i, v) in y.data().iter().enumerate() {
        let co = (i / 20) % 3;
        assert_eq!(*v, b.data()[co]);
    }
}

#[test]
fn conv_k1_scales_and_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 1, 5, 4], &mut rng);
    let y = conv_once(&x, &t(&[1, 1, 1, 1], &[2.0]), &Tensor::zeros(vec![1]));
    let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(y.data(), &doubled[..]);
    let id = conv_once(&x, &t(&[1, 1, 1, 1], &[1.0]), &Tensor::zeros(vec![1]));
    assert_eq!(id.data(), x.data());
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    assert!(matches!(tape.conv2d(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn conv_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 6, 5], &mut rng);
    let y = random(&[2, 3, 6, 5], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = Tensor::zeros(vec![4]);
    let (a, c) = (0.7, -1.3);
    let mix = Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| a * p + c * q)
            .collect(),
    )
    .unwrap();
    let lhs = conv_once(&mix, &w, &b);
    let (cx, cy) = (conv_once(&x, &w, &b), conv_once(&y, &w, &b));
    for i in 0..lhs.len() {
        let rhs = a * cx.data()[i] + c * cy.data()[i];
        let denom = rhs.abs().max(1e-12);
        assert!((lhs.data()[i] - rhs).abs() / denom < 1e-6 || (lhs.data()[i] - rhs).abs() < 1e-12);
    }
}

#[test]
fn tape_conv_matches_reference_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = ConvGeom {
        batch: 2,
        cin: 5,
        cout: 11,
        height: 7,
        width: 9,
        kernel: 3,
    };
    let x = random(&[2, 5, 7, 9], &mut rng);
    let w = random(&[11, 5, 3, 3], &mut rng);
    let b = random(&[11], &mut rng);
    let y = conv_once(&x, &w, &b);
    assert_eq!(
        y.data(),
        &conv2d_reference(g, x.data(), w.data(), b.data())[..]
    );
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(&tape, x).data(), &[0.0, 1.0]);

    // subgradient at exactly zero
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[0.0]));
    let y = tape.relu(x);
    let s = tape.sum(y);
    assert_eq!(tape.backward(s).unwrap().get(&tape, x).data(), &[0.0]);
}

#[test]
fn concat_examples_and_slice_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let parts: Vec<Tensor<f64>> = (0..4).map(|_| random(&[2, 16, 3, 3], &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|p| tape.leaf(p.clone())).collect();
    let single = tape.concat_channels(&vars[..1]).unwrap();
    assert_eq!(tape.value(single).data(), parts[0].data());
    let all = tape.concat_channels(&vars).unwrap();
    assert_eq!(tape.shape(all), &[2, 64, 3, 3]);
    for (i, p) in parts.iter().enumerate() {
        let back = tape.narrow(all, 1, 16 * i, 16).unwrap();
        assert_eq!(tape.value(back).data(), p.data());
    }
    let s = tape.sum(all);
    let g = tape.backward(s).unwrap();
    for &v in &vars {
        assert!(g.get(&tape, v).data().iter().all(|&x| x == 1.0));
    }
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
    let b = tape.leaf(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(matches!(
        tape.concat_channels(&[a, b]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = tape.leaf(Tensor::zeros(vec![2, 2]));
    let s = tape.add(x, z).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
    let m = tape.mean(x);
    assert_eq!(tape.value(m).item().unwrap(), 2.5);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().get(&tape, x).data(), &[6.0]);
}

#[test]
fn elementwise_errors() {
    let mut tape = Tape::<f64>::new();
    let neg = tape.leaf(t(&[2], &[1.0, -0.5]));
    assert!(matches!(tape.sqrt(neg), Err(Error::Domain(_))));
    let a = tape.leaf(Tensor::zeros(vec![2]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
}

#[test]
fn sqrt_adjoint_is_finite_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, 4.0]));
    let y = tape.sqrt(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get(&tape, x);
    assert!(g.all_finite());
    assert_eq!(g.data()[1], 0.25);
    assert_eq!(g.data()[0], 0.5 / SQRT_ADJOINT_EPS);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn sum_gradient_is_all_ones_and_unused_nodes_get_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2, 3], 0.3));
    let unused = tape.leaf(Tensor::full(vec![4], 9.0));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(&tape, x).data().iter().all(|&v| v == 1.0));
    assert!(g.get(&tape, unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mean_square_of_difference_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = random(&[3, 4], &mut rng);
    let cv = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone());
    let c = tape.leaf(cv.clone());
    let d = tape.sub(x, c).unwrap();
    let sq = tape.square(d);
    let m = tape.mean(sq);
    let g = tape.backward(m).unwrap().get(&tape, x);
    for i in 0..12 {
        let expected = 2.0 * (xv.data()[i] - cv.data()[i]) / 12.0;
        assert!((g.data()[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[1, 2, 5, 5], &mut rng));
    let w = tape.leaf(random(&[3, 2, 3, 3], &mut rng));
    let b = tape.leaf(random(&[3], &mut rng));
    let y = tape.conv2d(x, w, b).unwrap();
    let r = tape.relu(y);
    let m = tape.mean(r);
    let g1 = tape.backward(m).unwrap();
    let g2 = tape.backward(m).unwrap();
    for v in [x, w, b] {
        let bits = |g: &GradientMap<f64>| {
            g.get(&tape, v)
                .data()
                .iter()
                .map(|f| f.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&g1), bits(&g2));
    }
}

#[test]
fn op_kind_names_roundtrip() {
    for k in OpKind::ALL {
        assert_eq!(OpKind::from_name(k.name()), Some(k));
    }
    assert_eq!(OpKind::from_name("nope"), None);
}

/// Builds a scalar from `x` with one op under test, then compares the tape
/// gradient with central differences.
fn fd_check(x: &Tensor<f64>, build: &dyn Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let eval = |xt: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.leaf(xt.clone());
        let out = build(&mut tape, v);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v);
    let analytic = tape.backward(out).unwrap().get(&tape, v);
    let numeric = finite_diff_gradient(eval, x, 1e-5);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, 1e-4))
        .fold(0.0, f64::max)
}

/// Keep entries at least `margin` away from zero so `h` probes never cross
/// a kink.
fn away_from_zero(x: Tensor<f64>, margin: f64) -> Tensor<f64> {
    x.map(|v| {
        if v.abs() < margin {
            v.signum() * margin + v
        } else {
            v
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn ops_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(random(&[1, 4, 8, 8], &mut rng), 1e-3);
        let w3 = random(&[2, 4, 3, 3], &mut rng);
        let w1 = random(&[3, 4, 1, 1], &mut rng);
        let bias = random(&[3], &mut rng);
        let proj = random(&[1, 4, 8, 8], &mut rng);
        let other = away_from_zero(random(&[1, 4, 8, 8], &mut rng), 0.5);

        // weighted sum keeps the scalar sensitive to every element
        let project = move |tape: &mut Tape<f64>, y: Var, p: &Tensor<f64>| {
            let pv = tape.leaf(p.clone());
            let m = tape.mul(y, pv).unwrap();
            tape.sum(m)
        };
        let checks: Vec<(&str, Probe)> = vec![
            ("conv3", Box::new(|t: &mut Tape<f64>, v| {
                let w = t.leaf(w3.clone());
                let b = t.leaf(Tensor::zeros(vec![2]));
                let y = t.conv2d(v, w, b).unwrap();
                let sq = t.square(y);
                t.mean(sq)
            })),
            ("conv1", Box::new(|t: &mut Tape<f64>, v| {
                let w = t.leaf(w1.clone());
                let b = t.leaf(bias.clone());
                let y = t.conv2d(v, w, b).unwrap();
                let sq = t.square(y);
                t.sum(sq)
            })),
            ("relu", Box::new(|t: &mut Tape<f64>, v| {
                let y = t.relu(v);
                project(t, y, &proj)
            })),
            ("abs", Box::new(|t: &mut Tape<f64>, v| {
                let y = t.abs(v);
                project(t, y, &proj)
            })),
            ("mul", Box::new(|t: &mut Tape<f64>, v| {
                let y = t.mul(v, v).unwrap();
                project(t, y, &proj)
            })),
            ("div", Box::new(|t: &mut Tape<f64>, v| {
                let o = t.leaf(other.clone());
                let y = t.div(v, o).unwrap();
                let z = t.div(o, y).unwrap();
                project(t, z, &proj)
            })),
            ("sqrt", Box::new(|t: &mut Tape<f64>, v| {
                let sq = t.square(v);
                let y = t.sqrt(sq).unwrap();
                project(t, y, &proj)
            })),
            ("sub_scale_offset", Box::new(|t: &mut Tape<f64>, v| {
                let s = t.scale(v, 3.0);
                let o = t.offset(s, -0.25);
                let d = t.sub(o, v).unwrap();
                let sq = t.square(d);
                t.mean(sq)
            })),
            ("concat_narrow_tile", Box::new(|t: &mut Tape<f64>, v| {
                let c = t.concat_channels(&[v, v]).unwrap();
                let n = t.narrow(c, 1, 2, 4).unwrap();
                let tl = t.tile_channels(n, 2).unwrap();
                let sq = t.square(tl);
                t.sum(sq)
            })),
            ("filter", Box::new(|t: &mut Tape<f64>, v| {
                let f = t.filter_valid(v, &[0.25, 0.5, 0.25]).unwrap();
                let sq = t.square(f);
                t.sum(sq)
            })),
        ];
        for (name, build) in &checks {
            let err = fd_check(&x, build.as_ref());
            prop_assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

use pfs_tensor::gradcheck::{check_gradients, FD_STEP};
use pfs_tensor::{FocalParams, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Random fixed weights turn any output into a scalar with a nontrivial gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> pfs_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_t(tape.shape(y), &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_ok(inputs: &[(String, Tensor<f64>)], build: impl Fn(&mut Tape<f64>, &[Var]) -> pfs_tensor::Result<Var>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = check_gradients(inputs, build, FD_STEP, 24, &mut rng).unwrap();
    for r in report {
        assert!(r.rel_err <= TOL, "{}: rel err {} over {} coords", r.name, r.rel_err, r.coords);
    }
}

fn named(parts: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    parts.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

#[test]
fn linear_3x4_by_5x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = named(vec![
        ("x", rand_t(&[3, 4], &mut rng)),
        ("w", rand_t(&[5, 4], &mut rng)),
        ("b", rand_t(&[5], &mut rng)),
    ]);
    assert_ok(
        &inputs,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, 1)
        },
        0,
    );
}

#[test]
fn conv2d_stride_two_on_4x8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = named(vec![
        ("x", rand_t(&[4, 8, 8], &mut rng)),
        ("w", rand_t(&[3, 4, 3, 3], &mut rng)),
        ("b", rand_t(&[3], &mut rng)),
    ]);
    assert_ok(
        &inputs,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            weighted_sum(t, y, 2)
        },
        1,
    );
}

#[test]
fn conv_transpose_with_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = named(vec![
        ("x", rand_t(&[3, 2, 3], &mut rng)),
        ("w", rand_t(&[3, 2, 4, 4], &mut rng)),
        ("b", rand_t(&[2], &mut rng)),
    ]);
    assert_ok(
        &inputs,
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 4, Some((7, 10)))?;
            weighted_sum(t, y, 3)
        },
        2,
    );
}

#[test]
fn group_norm_statistics_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::uniform(&[8, 6, 5], -3.0, 5.0, &mut rng));
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape.group_norm(x, 4, g, b, 1e-5).unwrap();
    let data = tape.value(y).data();
    for grp in data.chunks(2 * 30) {
        let n = grp.len() as f64;
        let mean = grp.iter().sum::<f64>() / n;
        let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn bce_focal_and_masked_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_t(&[2, 4, 4], &mut rng).map(|v| 3.0 * v);
    let mut target = Tensor::uniform(&[2, 4, 4], 0.0, 0.9, &mut rng);
    target.data_mut()[5] = 1.0;
    target.data_mut()[20] = 1.0;
    let t2 = target.clone();
    let inputs = named(vec![("logits", logits)]);
    assert_ok(
        &inputs,
        move |t, v| {
            let p = t.sigmoid(v[0])?;
            let a = t.bce(p, t2.clone(), 1e-6)?;
            let f = t.focal_loss(p, t2.clone(), FocalParams { alpha: 2.0, beta: 4.0, eps: 1e-6 })?;
            let s = t.add(a, f)?;
            let mask: Vec<bool> = (0..32).map(|i| i % 3 == 0).collect();
            let l1 = t.masked_l1(v[0], t2.clone(), mask)?;
            t.add(s, l1)
        },
        3,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every layer type on randomized shapes, one composite graph per case.
    #[test]
    fn every_layer_matches_finite_differences(
        c_half in 1usize..3,
        h in 3usize..7,
        w in 3usize..7,
        c_out in 1usize..4,
        stride in 1usize..3,
        dilation in 1usize..3,
        seed in any::<u64>(),
    ) {
        let c = 2 * c_half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = named(vec![
            ("x", rand_t(&[c, h, w], &mut rng)),
            ("conv_w", rand_t(&[c_out, c, 3, 3], &mut rng)),
            ("conv_b", rand_t(&[c_out], &mut rng)),
            ("gn_g", rand_t(&[c], &mut rng)),
            ("gn_b", rand_t(&[c], &mut rng)),
            ("lin_w", rand_t(&[2 * c, c], &mut rng)),
            ("lin_b", rand_t(&[2 * c], &mut rng)),
            ("up_w", rand_t(&[c_out, 1, 2, 2], &mut rng)),
            ("alpha", rand_t(&[1], &mut rng)),
        ]);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let n = t.group_norm(v[0], 2, v[3], v[4], 1e-5)?;
            let g = t.global_avg_pool(v[0])?;
            let gb = t.linear(g, v[5], Some(v[6]))?;
            let gamma = t.narrow(gb, 0, c)?;
            let beta = t.narrow(gb, c, c)?;
            let mod_ = t.channel_affine(n, gamma, beta)?;
            let s = t.sigmoid(v[8])?;
            let one_minus = t.affine(s, -1.0, 1.0)?;
            let a = t.scale_by(mod_, s)?;
            let b = t.scale_by(v[0], one_minus)?;
            let shifted = t.add(a, b)?;
            let y = t.conv2d(shifted, v[1], Some(v[2]), stride, dilation, dilation)?;
            let y = t.relu(y)?;
            let up = t.conv_transpose2d(y, v[7], None, 2, None)?;
            let mask = t.narrow(up, 0, 1)?;
            let mask = t.sigmoid(mask)?;
            let cat = t.concat(&[up, mask])?;
            let first = t.narrow(cat, 0, 1)?;
            let gated = t.mul_spatial(cat, first)?;
            let cl = t.clamp(gated, -0.8, 0.8)?;
            let tail = t.sub(cl, gated)?;
            let q = t.mul(tail, tail)?;
            let base = weighted_sum(t, cl, seed ^ 1)?;
            let extra = t.mean(q)?;
            t.add(base, extra)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let report = check_gradients(&inputs, build, FD_STEP, 12, &mut rng).unwrap();
        for r in report {
            prop_assert!(r.rel_err <= TOL, "{} rel err {}", r.name, r.rel_err);
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::uniform(&[4, 9, 9], -1.0, 1.0, &mut rng));
        let w = tape.param(Tensor::uniform(&[6, 4, 3, 3], -1.0, 1.0, &mut rng));
        let y = tape.conv2d(x, w, None, 2, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let s = tape.sum(y).unwrap();
        let out = tape.value(s).clone();
        let g = tape.backward(s).unwrap();
        (out, g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

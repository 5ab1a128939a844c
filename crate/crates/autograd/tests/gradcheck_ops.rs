use octsurf_autograd::{check_gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects `y` onto fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, w);
    g.sum(p)
}

fn assert_passes(name: &str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let report = check_gradients(&inputs, 1e-6, build);
    let err = report.max_relative_error();
    assert!(err < 1e-6, "{name}: relative error {err:e} ({:?})", report.relative_errors);
}

#[test]
fn conv_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(kd, k) in &[(1usize, 3usize), (3, 3), (1, 1), (3, 1)] {
        let x = random(&[3, 2, 4, 5], &mut rng);
        let w = random(&[kd, 3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        assert_passes("conv", vec![x, w, b], |g, v| {
            let y = g.conv(v[0], v[1], v[2]);
            project(g, y, 7)
        });
    }
}

#[test]
fn instance_norm_both_groupings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for per_sample in [true, false] {
        let x = random(&[3, 2, 3, 4], &mut rng);
        let gamma = random(&[2], &mut rng);
        let beta = random(&[2], &mut rng);
        assert_passes("instance_norm", vec![x, gamma, beta], |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], per_sample);
            project(g, y, 8)
        });
    }
}

#[test]
fn pooling_upsampling_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 2, 4, 6], &mut rng);
    let b = random(&[2, 1, 4, 6], &mut rng);
    assert_passes("pool/up/concat", vec![a, b], |g, v| {
        let p = g.max_pool2(v[0]);
        let u = g.upsample2(p);
        let c = g.concat_channels(&[u, v[1], v[0]]);
        let r = g.relu(c);
        project(g, r, 9)
    });
}

#[test]
fn softmax_broadcast_mean_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 5], &mut rng);
    let y = random(&[2, 1, 5], &mut rng);
    assert_passes("softmax", vec![x, y], |g, v| {
        let s = g.broadcast_add(v[0], v[1]);
        let p = g.softmax(s, 1);
        let m = g.mean_axis(p, 2);
        let q = g.affine(m, 2.0, 0.5);
        let mm = g.mul(q, q);
        g.mean(mm)
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 7, 3], &mut rng).map(|v| v * 30.0);
    let p = octsurf_autograd::ops::softmax_values(&x, 1);
    for o in 0..2 {
        for i in 0..3 {
            let s: f64 = (0..7).map(|k| p.data()[(o * 7 + k) * 3 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

//! Property tests for the invariants of the losses, network ops,
//! preprocessing and metrics.

use octsurf_autograd::{Graph, Tensor};
use octsurf_core::eval::{connectivity_histogram, metric_alignment_mad, metric_mad_px, HistogramSpec};
use octsurf_core::losses::{loss_smooth_align, loss_smooth_l1, loss_smooth_surface};
use octsurf_core::losses::ops::Reduction;
use octsurf_core::model::ops::{soft_argmax_values, stm_values, stm_warp, topology_values};
use octsurf_core::model::{Model, ModelConfig};
use octsurf_core::preprocess::{apply_record, crop, flatten_surfaces, unflatten_surface, FlattenRecord, PatchShape};
use octsurf_core::{DisplacementVector, OctVolume, Spacing, SurfaceSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ordered_set(k: usize, nb: usize, na: usize, rows: f64, seed: u64) -> SurfaceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; k * nb * na];
    for b in 0..nb {
        for a in 0..na {
            let mut p = rng.random_range(1.0..rows / 2.0);
            for kk in 0..k {
                v[(kk * nb + b) * na + a] = p;
                p = (p + rng.random_range(0.0..rows / (2.0 * k as f64))).min(rows);
            }
        }
    }
    SurfaceSet::new(SurfaceSet::default_names(k), nb, na, v).unwrap()
}

fn random_d(nb: usize, seed: u64, range: f64) -> DisplacementVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DisplacementVector::new((0..nb).map(|_| rng.random_range(-range..range)).collect()).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn shifted(d: &DisplacementVector, c: f64) -> DisplacementVector {
    DisplacementVector::new(d.values().iter().map(|v| v + c).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_align_ignores_constant_displacement(k in 1usize..4, nb in 2usize..8, na in 1usize..6, seed: u64, c in -20.0f64..20.0) {
        let s = ordered_set(k, nb, na, 64.0, seed);
        let d = random_d(nb, seed ^ 1, 5.0);
        let a = loss_smooth_align(&s, &d, None, Reduction::Mean).unwrap();
        let b = loss_smooth_align(&s, &shifted(&d, c), None, Reduction::Mean).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        let ma = metric_alignment_mad(&s, &d).unwrap();
        let mb = metric_alignment_mad(&s, &shifted(&d, c)).unwrap();
        for (x, y) in ma.iter().zip(&mb) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn smooth_surface_ignores_constant_offset(k in 1usize..4, nb in 2usize..8, na in 1usize..6, seed: u64, c in -10.0f64..10.0) {
        let s = ordered_set(k, nb, na, 64.0, seed);
        let moved = SurfaceSet::from_fn(s.names().to_vec(), nb, na, |kk, b, a| s.at(kk, b, a) + c).unwrap();
        let a = loss_smooth_surface(&s, Reduction::Mean).unwrap();
        let b = loss_smooth_surface(&moved, Reduction::Mean).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn stm_zero_is_identity(nb in 1usize..5, c in 1usize..3, r in 2usize..12, w in 1usize..5, seed: u64) {
        let x = random_tensor(&[nb, c, r, w], seed);
        let y = stm_values(&x, &vec![0.0; nb]);
        prop_assert_eq!(x.data(), y.data());
    }

    #[test]
    fn stm_is_linear_in_the_input(nb in 1usize..5, r in 2usize..12, w in 1usize..5, seed: u64, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x = random_tensor(&[nb, 2, r, w], seed);
        let y = random_tensor(&[nb, 2, r, w], seed ^ 7);
        let d = random_d(nb, seed ^ 3, r as f64).values().to_vec();
        let mix = Tensor::from_fn(&[nb, 2, r, w], |i| alpha * x.data()[i] + beta * y.data()[i]);
        let lhs = stm_values(&mix, &d);
        let (sx, sy) = (stm_values(&x, &d), stm_values(&y, &d));
        for i in 0..lhs.len() {
            let rhs = alpha * sx.data()[i] + beta * sy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9);
        }
    }

    #[test]
    fn topology_is_idempotent_and_ordered(n in 1usize..4, k in 1usize..5, w in 1usize..6, seed: u64) {
        let x = random_tensor(&[n, k, w], seed).map(|v| 50.0 * v);
        let once = topology_values(&x);
        let twice = topology_values(&once);
        prop_assert_eq!(once.data(), twice.data());
        for i in 0..n {
            for kk in 1..k {
                for a in 0..w {
                    prop_assert!(once.data()[(i * k + kk) * w + a] >= once.data()[(i * k + kk - 1) * w + a]);
                }
            }
        }
    }

    #[test]
    fn soft_argmax_stays_in_range(n in 1usize..3, k in 1usize..4, r in 1usize..20, w in 1usize..4, seed: u64, temp in 0.1f64..20.0) {
        let logits = random_tensor(&[n, k, r, w], seed).map(|v| v * temp);
        let mut g = Graph::<f64>::new();
        let x = g.constant(logits);
        let q = g.softmax(x, 2);
        let q = g.value(q).clone();
        let s = soft_argmax_values(&q);
        prop_assert!(s.data().iter().all(|&v| (1.0 - 1e-9..=r as f64 + 1e-9).contains(&v)));
    }

    #[test]
    fn flatten_roundtrip(k in 1usize..4, nb in 2usize..5, na in 1usize..5, rows in 8usize..24, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rows as i32;
        let shifts: Vec<i32> = (0..nb * na).map(|_| rng.random_range(-r / 2..=r / 2)).collect();
        let rec = FlattenRecord { n_b: nb, n_a: na, rows, target_row: rows - rows / 4, shifts };
        let s = ordered_set(k, nb, na, rows as f64, seed);
        let back = unflatten_surface(&flatten_surfaces(&s, &rec).unwrap(), &rec).unwrap();
        for (x, y) in s.positions().iter().zip(back.positions()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let v = OctVolume::from_fn("v", na, nb, rows, Spacing::default(), |_, _, _| rng.random_range(0.0..1.0)).unwrap();
        let restored = apply_record(&apply_record(&v, &rec, 1).unwrap(), &rec, -1).unwrap();
        for a in 0..na {
            for b in 0..nb {
                let sh = rec.shift(b, a);
                for row in 0..rows {
                    let moved = row as i32 + sh;
                    if (0..r).contains(&moved) {
                        prop_assert_eq!(restored.get(a, b, row), v.get(a, b, row));
                    }
                }
            }
        }
    }

    #[test]
    fn mad_is_symmetric(k in 1usize..4, nb in 1usize..6, na in 1usize..6, s1: u64, s2: u64) {
        let p = ordered_set(k, nb, na, 64.0, s1);
        let t = ordered_set(k, nb, na, 64.0, s2);
        prop_assert_eq!(metric_mad_px(&p, &t).unwrap(), metric_mad_px(&t, &p).unwrap());
    }

    #[test]
    fn histogram_counts_every_adjacent_pair(k in 1usize..4, nb in 2usize..8, na in 1usize..6, seed: u64) {
        let s = ordered_set(k, nb, na, 200.0, seed);
        let h = connectivity_histogram(&s, HistogramSpec::default()).unwrap();
        prop_assert_eq!(h.total(), (k * (nb - 1) * na) as u64);
    }

    #[test]
    fn sum_and_mean_differ_by_count(k in 1usize..4, nb in 1usize..6, na in 1usize..6, s1: u64, s2: u64) {
        let p = ordered_set(k, nb, na, 64.0, s1);
        let t = ordered_set(k, nb, na, 64.0, s2);
        let sum = loss_smooth_l1(&p, &t, None, Reduction::Sum).unwrap();
        let mean = loss_smooth_l1(&p, &t, None, Reduction::Mean).unwrap();
        let n = (k * nb * na) as f64;
        prop_assert!((sum - mean * n).abs() <= 1e-9 * sum.abs().max(1.0));
    }

    #[test]
    fn displacement_receives_gradient_through_warp(nb in 2usize..5, r in 4usize..12, seed: u64) {
        let mut g = Graph::<f64>::new();
        // strictly increasing rows so every shift changes the output
        let x = g.constant(Tensor::from_fn(&[nb, 1, r, 2], |i| ((i / 2) % r) as f64 + 0.1 * (i % 2) as f64));
        let d = g.variable(random_d(nb, seed, 1.0).to_tensor::<f64>());
        let y = stm_warp(&mut g, x, d);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let gd = grads.get(d).expect("gradient for d");
        prop_assert!(gd.data().iter().any(|v| v.abs() > 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn crop_validates_patch_shape(rows in 0usize..20, a in 0usize..10, b in 0usize..8, r0 in 0usize..8, a0 in 0usize..4, b0 in 0usize..4) {
        let (na, nb, nr) = (8, 6, 16);
        let v = OctVolume::from_fn("v", na, nb, nr, Spacing::default(), |a, b, r| (a + 10 * b + 100 * r) as f32).unwrap();
        let s = ordered_set(2, nb, na, nr as f64, 3);
        let shape = PatchShape { rows, a, b };
        let fits = rows >= 2 && a > 0 && b >= 2 && r0 + rows <= nr && a0 + a <= na && b0 + b <= nb;
        match crop(&v, &s, None, shape, (r0, a0, b0)) {
            Ok(p) => {
                prop_assert!(fits);
                prop_assert_eq!(p.volume.shape(), (a, b, rows));
                prop_assert_eq!(p.volume.get(a - 1, b - 1, rows - 1), v.get(a0 + a - 1, b0 + b - 1, r0 + rows - 1));
                for kk in 0..2 {
                    for bb in 0..b {
                        for aa in 0..a {
                            let inside = (1.0..=rows as f64).contains(&(s.at(kk, b0 + bb, a0 + aa) - r0 as f64));
                            prop_assert_eq!(p.mask[(kk * b + bb) * a + aa] == 1.0, inside);
                        }
                    }
                }
            }
            Err(_) => prop_assert!(!fits),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoder_commutes_with_bscan_permutation(seed: u64) {
        let cfg = ModelConfig { base_channels: 2, levels: 3, seed, ..ModelConfig::desk() };
        let model = Model::<f32>::new(cfg).unwrap();
        let (nb, r, w) = (4, 16, 8);
        let x = random_tensor(&[nb, 1, r, w], seed).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..nb).collect();
        for i in (1..nb).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let slab = r * w;
        let xp = Tensor::from_fn(&[nb, 1, r, w], |i| x.data()[perm[i / slab] * slab + i % slab]);
        let feats = |input: Tensor<f32>| {
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let v = g.constant(input);
            let out = model.encode(&mut g, &bound, v);
            out.iter().map(|&f| g.value(f).clone()).collect::<Vec<_>>()
        };
        let (fa, fb) = (feats(x), feats(xp));
        for (ta, tb) in fa.iter().zip(&fb) {
            let per = ta.len() / nb;
            for b in 0..nb {
                prop_assert_eq!(&tb.data()[b * per..(b + 1) * per], &ta.data()[perm[b] * per..(perm[b] + 1) * per]);
            }
        }
    }
}

use super::*;
use crate::autodiff::{check_gradients, Graph};
use crate::geometry::{rotation_from_angles, SkeletonSpec, NUM_JOINTS};
use crate::rng::stream;
use rand::Rng;

fn randv(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = stream(seed, "loss-test", &[]);
    (0..n).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect()
}

#[test]
fn mss_zero_unit_and_oracle() {
    let t = 3;
    let y = randv(80, t * NUM_JOINTS * 3, 2.0);
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], y.clone());
    let l = loss_mss(&mut g, a, a).unwrap();
    assert_eq!(g.value_scalar(l), 0.0);

    let mut y2 = y.clone();
    y2[5 * 3] += 1.0; // one joint off by (1,0,0)
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], y.clone());
    let b = g.constant(&[t, NUM_JOINTS, 3], y2.clone());
    let l = loss_mss(&mut g, a, b).unwrap();
    assert!((g.value_scalar(l) - 1.0).abs() < 1e-12);

    // brute-force double loop
    let yb = randv(81, t * NUM_JOINTS * 3, 2.0);
    let mut expect = 0.0;
    for i in 0..t * NUM_JOINTS * 3 {
        expect += (y[i] - yb[i]) * (y[i] - yb[i]);
    }
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], y);
    let b = g.constant(&[t, NUM_JOINTS, 3], yb);
    let l = loss_mss(&mut g, a, b).unwrap();
    assert!((g.value_scalar(l) - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn tc_zero_unit_and_oracle() {
    let t = 4;
    let x = randv(82, t * NUM_JOINTS * 3, 2.0);
    // successor that agrees on the overlap: shift frames by one
    let mut x1 = randv(83, t * NUM_JOINTS * 3, 2.0);
    x1[..(t - 1) * NUM_JOINTS * 3].copy_from_slice(&x[NUM_JOINTS * 3..]);
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], x.clone());
    let b = g.constant(&[t, NUM_JOINTS, 3], x1.clone());
    let l = loss_tc(&mut g, a, b).unwrap();
    assert!(g.value_scalar(l) < 1e-24);

    // one overlap joint off by (0,2,0) -> 4
    let mut x2 = x1.clone();
    x2[(2 * NUM_JOINTS + 3) * 3 + 1] += 2.0;
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], x.clone());
    let b = g.constant(&[t, NUM_JOINTS, 3], x2.clone());
    let l = loss_tc(&mut g, a, b).unwrap();
    assert!((g.value_scalar(l) - 4.0).abs() < 1e-12);

    // loop oracle on random pair
    let xr = randv(84, t * NUM_JOINTS * 3, 2.0);
    let mut expect = 0.0;
    for f in 0..t - 1 {
        for i in 0..NUM_JOINTS * 3 {
            let d = x[(f + 1) * NUM_JOINTS * 3 + i] - xr[f * NUM_JOINTS * 3 + i];
            expect += d * d;
        }
    }
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], x);
    let b = g.constant(&[t, NUM_JOINTS, 3], xr);
    let l = loss_tc(&mut g, a, b).unwrap();
    assert!((g.value_scalar(l) - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn bl_rigid_motion_zero_and_oracle() {
    let skel = SkeletonSpec::canonical();
    let t = 5;
    // a fixed random frame moved rigidly per frame: lengths constant
    let frame = randv(85, NUM_JOINTS * 3, 1.5);
    let mut x = vec![0.0; t * NUM_JOINTS * 3];
    let mut rng = stream(86, "loss-bl", &[]);
    for f in 0..t {
        let q = rotation_from_angles(rng.gen::<f64>() * 3.0, rng.gen::<f64>());
        let shift = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        for n in 0..NUM_JOINTS {
            for r in 0..3 {
                x[(f * NUM_JOINTS + n) * 3 + r] = q[r * 3] * frame[n * 3]
                    + q[r * 3 + 1] * frame[n * 3 + 1]
                    + q[r * 3 + 2] * frame[n * 3 + 2]
                    + shift[r];
            }
        }
    }
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], x);
    let l = loss_bl(&mut g, a, &skel.edges).unwrap();
    assert!(g.value_scalar(l) < 1e-18, "rigid window bone variance {}", g.value_scalar(l));

    // hand case: one bone with lengths {1,3} over T=2 -> variance 1
    let mut x2 = vec![0.0; 2 * NUM_JOINTS * 3];
    // place head at distance 1 then 3 from neck; all other joints collapse
    x2[joint_index(0, crate::geometry::joint::HEAD, 1)] = 1.0;
    x2[joint_index(1, crate::geometry::joint::HEAD, 1)] = 3.0;
    let mut g = Graph::new();
    let a = g.constant(&[2, NUM_JOINTS, 3], x2);
    let l = loss_bl(&mut g, a, &[(crate::geometry::joint::HEAD, crate::geometry::joint::NECK)]).unwrap();
    assert!((g.value_scalar(l) - 1.0).abs() < 1e-12);

    // loop oracle on random window over all edges
    let xr = randv(87, t * NUM_JOINTS * 3, 2.0);
    let mut expect = 0.0;
    for &(m, n) in &skel.edges {
        let mut lens = Vec::new();
        for f in 0..t {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = xr[(f * NUM_JOINTS + m) * 3 + c] - xr[(f * NUM_JOINTS + n) * 3 + c];
                d2 += d * d;
            }
            lens.push(d2.sqrt());
        }
        let mu: f64 = lens.iter().sum::<f64>() / t as f64;
        expect += lens.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / t as f64;
    }
    let mut g = Graph::new();
    let a = g.constant(&[t, NUM_JOINTS, 3], xr);
    let l = loss_bl(&mut g, a, &skel.edges).unwrap();
    assert!((g.value_scalar(l) - expect).abs() < 1e-12 * expect.max(1.0));
}

fn joint_index(t: usize, n: usize, c: usize) -> usize {
    (t * NUM_JOINTS + n) * 3 + c
}

#[test]
fn adversarial_losses_reference_values() {
    let ln2 = std::f64::consts::LN_2;
    let mut g = Graph::new();
    let real = g.constant(&[3], vec![0.0; 3]);
    let fake = g.constant(&[3], vec![0.0; 3]);
    let d = loss_adv_disc(&mut g, real, fake).unwrap();
    assert!((g.value_scalar(d) - 2.0 * ln2).abs() < 1e-12);
    let gen = loss_adv_gen(&mut g, fake).unwrap();
    assert!((g.value_scalar(gen) - ln2).abs() < 1e-12);

    // confident discriminator: near-zero loss
    let mut g = Graph::new();
    let real = g.constant(&[2], vec![20.0, 20.0]);
    let fake = g.constant(&[2], vec![-20.0, -20.0]);
    let d = loss_adv_disc(&mut g, real, fake).unwrap();
    assert!(g.value_scalar(d) < 1e-8);
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let logits = randv(88, 6, 4.0);
    let err = check_gradients(
        |g, fake| {
            let real = g.constant(&[4], vec![0.3, -0.2, 0.5, 0.1]);
            loss_adv_disc(g, real, fake)
        },
        &[6],
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "disc loss fd error {err}");

    let err = check_gradients(|g, fake| loss_adv_gen(g, fake), &[6], &logits, 1e-6).unwrap();
    assert!(err < 1e-6, "gen loss fd error {err}");
}

#[test]
fn kd_zero_unit_and_oracle() {
    let k = crate::bodymodel::NUM_BODY_JOINTS;
    let map = crate::bodymodel::JOINT_MAP;
    let t = 2;
    let student = randv(89, t * k * 3, 1.0);
    // teacher exactly at mapped student joints
    let mut teacher = vec![0.0; t * NUM_JOINTS * 3];
    for f in 0..t {
        for (i, &m) in map.iter().enumerate() {
            for c in 0..3 {
                teacher[(f * NUM_JOINTS + i) * 3 + c] = student[(f * k + m) * 3 + c];
            }
        }
    }
    let mut g = Graph::new();
    let te = g.constant(&[t, NUM_JOINTS, 3], teacher.clone());
    let st = g.constant(&[t, k, 3], student.clone());
    let l = loss_kd(&mut g, te, st, &map).unwrap();
    assert!(g.value_scalar(l) < 1e-22);

    // one mapped non-hip joint off by a unit vector -> 1 (centering unaffected)
    let mut teacher2 = teacher.clone();
    teacher2[(0 * NUM_JOINTS + 6) * 3 + 2] += 1.0; // l_wrist z
    let mut g = Graph::new();
    let te = g.constant(&[t, NUM_JOINTS, 3], teacher2);
    let st = g.constant(&[t, k, 3], student.clone());
    let l = loss_kd(&mut g, te, st, &map).unwrap();
    assert!((g.value_scalar(l) - 1.0).abs() < 1e-10);

    // loop oracle with explicit centering
    let teacher_r = randv(90, t * NUM_JOINTS * 3, 1.0);
    let mut expect = 0.0;
    for f in 0..t {
        let tc = |i: usize, c: usize| {
            let root = 0.5
                * (teacher_r[(f * NUM_JOINTS + crate::geometry::joint::L_HIP) * 3 + c]
                    + teacher_r[(f * NUM_JOINTS + crate::geometry::joint::R_HIP) * 3 + c]);
            teacher_r[(f * NUM_JOINTS + i) * 3 + c] - root
        };
        let sc = |i: usize, c: usize| {
            let root = 0.5
                * (student[(f * k + map[crate::geometry::joint::L_HIP]) * 3 + c]
                    + student[(f * k + map[crate::geometry::joint::R_HIP]) * 3 + c]);
            student[(f * k + map[i]) * 3 + c] - root
        };
        for i in 0..NUM_JOINTS {
            for c in 0..3 {
                let d = tc(i, c) - sc(i, c);
                expect += d * d;
            }
        }
    }
    let mut g = Graph::new();
    let te = g.constant(&[t, NUM_JOINTS, 3], teacher_r);
    let st = g.constant(&[t, k, 3], student);
    let l = loss_kd(&mut g, te, st, &map).unwrap();
    assert!((g.value_scalar(l) - expect).abs() < 1e-10 * expect.max(1.0));
}

#[test]
fn rot_reg_and_beta_reference_values() {
    let k = 4;
    let mut rots = vec![0.0; k * 9];
    for b in 0..k {
        rots[b * 9] = 1.0;
        rots[b * 9 + 4] = 1.0;
        rots[b * 9 + 8] = 1.0;
    }
    let mut g = Graph::new();
    let r = g.constant(&[k, 3, 3], rots.clone());
    let l = loss_rot_reg(&mut g, r).unwrap();
    assert_eq!(g.value_scalar(l), 0.0);

    // one 180-degree twist: ||diag(-1,-1,1) - I||_F^2 = 8
    rots[0] = -1.0;
    rots[4] = -1.0;
    let mut g = Graph::new();
    let r = g.constant(&[k, 3, 3], rots);
    let l = loss_rot_reg(&mut g, r).unwrap();
    assert!((g.value_scalar(l) - 8.0).abs() < 1e-12);

    let mut g = Graph::new();
    let b0 = g.constant(&[10], vec![0.0; 10]);
    let l = loss_beta(&mut g, b0);
    assert_eq!(g.value_scalar(l), 0.0);
    let bv = randv(91, 10, 1.0);
    let expect: f64 = bv.iter().map(|v| v * v).sum();
    let mut g = Graph::new();
    let b1 = g.constant(&[10], bv);
    let l = loss_beta(&mut g, b1);
    assert!((g.value_scalar(l) - expect).abs() < 1e-14);
}

#[test]
fn stage_sums_with_default_weights() {
    let w = LossWeights::default();
    assert_eq!(weighted_teacher_sum(&w, 1.0, 1.0, 1.0, 1.0), 6.0);
    assert_eq!(weighted_student_sum(&w, 1.0, 1.0, 1.0), 41.0);
    let mut g = Graph::new();
    let one = g.constant(&[], vec![1.0]);
    let lt = teacher_total(&mut g, &w, one, one, one, Some(one)).unwrap();
    assert_eq!(g.value_scalar(lt), 6.0);
    let ls = student_total(&mut g, &w, one, one, one).unwrap();
    assert_eq!(g.value_scalar(ls), 41.0);
    let l = finetune_total(&mut g, &w, lt, ls, Some(one)).unwrap();
    assert_eq!(g.value_scalar(l), 6.0 + 2.0 * 41.0 + 1.0);

    assert!(LossWeights { mss: -1.0, ..w }.validate().is_err());
}

#[test]
fn window_loss_gradients_match_finite_differences() {
    let skel = SkeletonSpec::canonical();
    let t = 3;
    let x = randv(92, t * NUM_JOINTS * 3, 1.0);
    // keep bone lengths away from zero for sqrt smoothness
    let x: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 7) as f64 * 0.3).collect();

    let edges = skel.edges.clone();
    let err = check_gradients(
        move |g, xi| loss_bl(g, xi, &edges),
        &[t, NUM_JOINTS, 3],
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "bone-length loss fd error {err}");

    let other = randv(93, t * NUM_JOINTS * 3, 1.0);
    let o2 = other.clone();
    let err = check_gradients(
        move |g, xi| {
            let b = g.constant(&[t, NUM_JOINTS, 3], o2.clone());
            loss_mss(g, xi, b)
        },
        &[t, NUM_JOINTS, 3],
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "mss fd error {err}");

    let o3 = other.clone();
    let err = check_gradients(
        move |g, xi| {
            let b = g.constant(&[t, NUM_JOINTS, 3], o3.clone());
            loss_tc(g, xi, b)
        },
        &[t, NUM_JOINTS, 3],
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "tc fd error {err}");

    let k = crate::bodymodel::NUM_BODY_JOINTS;
    let teacher = randv(94, t * NUM_JOINTS * 3, 1.0);
    let map = crate::bodymodel::JOINT_MAP;
    let student = randv(95, t * k * 3, 1.0);
    let err = check_gradients(
        move |g, st| {
            let te = g.constant(&[t, NUM_JOINTS, 3], teacher.clone());
            loss_kd(g, te, st, &map)
        },
        &[t, k, 3],
        &student,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "kd fd error {err}");
}

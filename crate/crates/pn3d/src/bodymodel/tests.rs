use super::*;
use crate::rng::stream;
use rand::Rng;

fn tiny_model(seed: u64, v: usize) -> BodyModel {
    let mut rng = stream(seed, "bm-test", &[]);
    synth_model(&mut rng, v, &BodyShapeConfig::default()).unwrap()
}

fn identity_rotations(frames: usize) -> Vec<f64> {
    let mut r = vec![0.0; frames * NUM_BODY_JOINTS * 9];
    for b in 0..frames * NUM_BODY_JOINTS {
        r[b * 9] = 1.0;
        r[b * 9 + 4] = 1.0;
        r[b * 9 + 8] = 1.0;
    }
    r
}

/// Small random valid rotations: orthonormalized near-identity blocks.
fn random_rotations(rng: &mut rand_chacha::ChaCha8Rng, frames: usize, spread: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * NUM_BODY_JOINTS * 9);
    for _ in 0..frames * NUM_BODY_JOINTS {
        let mut m = [0.0; 9];
        for (i, v) in m.iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
            *v += (rng.gen::<f64>() - 0.5) * spread;
        }
        out.extend(orthonormalize(&m).unwrap());
    }
    out
}

/// Independent FK oracle: explicit 4x4 homogeneous chains multiplied from
/// the root for every joint, and per-vertex skinning in homogeneous form.
fn fk_oracle(data: &crate::autodiff::LbsData, betas: &[f64], rots: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (v_n, k_n, s_n) = (data.v, data.k, data.num_shapes);
    let mut shaped = data.template.clone();
    for i in 0..v_n * 3 {
        for b in 0..s_n {
            shaped[i] += data.shape_dirs[i * s_n + b] * betas[b];
        }
    }
    let mut rest = vec![0.0; k_n * 3];
    for k in 0..k_n {
        for v in 0..v_n {
            let w = data.regressor[k * v_n + v];
            for c in 0..3 {
                rest[k * 3 + c] += w * shaped[v * 3 + c];
            }
        }
    }
    let mat4_mul = |a: &[f64; 16], b: &[f64; 16]| {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                for k in 0..4 {
                    m[r * 4 + c] += a[r * 4 + k] * b[k * 4 + c];
                }
            }
        }
        m
    };
    let world: Vec<[f64; 16]> = {
        let mut out = Vec::with_capacity(k_n);
        for k in 0..k_n {
            // path root -> k
            let mut path = vec![k];
            let mut cur = k;
            while data.parent[cur] >= 0 {
                cur = data.parent[cur] as usize;
                path.push(cur);
            }
            path.reverse();
            let mut m = [0.0; 16];
            m[0] = 1.0;
            m[5] = 1.0;
            m[10] = 1.0;
            m[15] = 1.0;
            for &j in &path {
                let p = data.parent[j];
                let t = if p < 0 {
                    [rest[j * 3], rest[j * 3 + 1], rest[j * 3 + 2]]
                } else {
                    let p = p as usize;
                    [
                        rest[j * 3] - rest[p * 3],
                        rest[j * 3 + 1] - rest[p * 3 + 1],
                        rest[j * 3 + 2] - rest[p * 3 + 2],
                    ]
                };
                let r = &rots[j * 9..(j + 1) * 9];
                let a = [
                    r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2], 0.0,
                    0.0, 0.0, 1.0,
                ];
                m = mat4_mul(&m, &a);
            }
            out.push(m);
        }
        out
    };
    let joints: Vec<f64> = world.iter().flat_map(|m| [m[3], m[7], m[11]]).collect();
    let mut verts = vec![0.0; v_n * 3];
    for v in 0..v_n {
        let hv = [shaped[v * 3], shaped[v * 3 + 1], shaped[v * 3 + 2], 1.0];
        for k in 0..k_n {
            let w = data.skin_weights[v * NUM_BODY_JOINTS + k];
            if w == 0.0 {
                continue;
            }
            // A_k = world_k * [[I, -rest_k],[0,1]]
            let neg = [
                1.0, 0.0, 0.0, -rest[k * 3], 0.0, 1.0, 0.0, -rest[k * 3 + 1], 0.0, 0.0, 1.0,
                -rest[k * 3 + 2], 0.0, 0.0, 0.0, 1.0,
            ];
            let a = mat4_mul(&world[k], &neg);
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += a[c * 4 + j] * hv[j];
                }
                verts[v * 3 + c] += w * acc;
            }
        }
    }
    (verts, joints)
}

#[test]
fn orthonormalize_fixed_points_and_scale_invariance() {
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let r = orthonormalize(&eye).unwrap();
    for (a, b) in r.iter().zip(&eye) {
        assert!((a - b).abs() < 1e-15);
    }
    let two: Vec<f64> = eye.iter().map(|v| v * 2.0).collect();
    let r = orthonormalize(&two).unwrap();
    for (a, b) in r.iter().zip(&eye) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn orthonormalize_produces_so3_and_is_idempotent() {
    let mut rng = stream(40, "bm-ortho", &[]);
    for _ in 0..100 {
        let m: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let r = match orthonormalize(&m) {
            Ok(r) => r,
            Err(_) => continue, // skip the rare near-singular draw
        };
        for a in 0..3 {
            for b in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k * 3 + a] * r[k * 3 + b];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        assert!((det - 1.0).abs() < 1e-10);
        let again = orthonormalize(&r).unwrap();
        for (a, b) in again.iter().zip(&r) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn orthonormalize_rejects_near_singular() {
    let m = [1.0, 1.0, 0.0, 0.0, 1e-9, 0.0, 0.0, 0.0, 1.0];
    assert!(matches!(orthonormalize(&m), Err(crate::Error::IllConditioned(_))));
}

#[test]
fn lbs_rest_pose_returns_template_and_regressed_joints() {
    let model = tiny_model(41, 120);
    let (verts, joints) =
        lbs_forward(&model, &[0.0; NUM_SHAPES], &identity_rotations(1)).unwrap();
    for (a, b) in verts.iter().zip(&model.lbs.template) {
        assert!((a - b).abs() < 1e-12);
    }
    let expect = model.rest_joints();
    for (a, b) in joints.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn lbs_global_rotation_is_rigid_about_root() {
    let model = tiny_model(42, 120);
    let mut rng = stream(43, "bm-rigid", &[]);
    let q = {
        let mut m = [0.0; 9];
        for (i, v) in m.iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
            *v += (rng.gen::<f64>() - 0.5) * 1.5;
        }
        orthonormalize(&m).unwrap()
    };
    let mut rots = identity_rotations(1);
    rots[..9].copy_from_slice(&q);
    let betas = [0.0; NUM_SHAPES];
    let (verts, joints) = lbs_forward(&model, &betas, &rots).unwrap();
    let (rest_v, rest_j) = lbs_forward(&model, &betas, &identity_rotations(1)).unwrap();
    let root = [rest_j[0], rest_j[1], rest_j[2]];
    let rot_about_root = |p: &[f64]| {
        let v = [p[0] - root[0], p[1] - root[1], p[2] - root[2]];
        [
            q[0] * v[0] + q[1] * v[1] + q[2] * v[2] + root[0],
            q[3] * v[0] + q[4] * v[1] + q[5] * v[2] + root[1],
            q[6] * v[0] + q[7] * v[1] + q[8] * v[2] + root[2],
        ]
    };
    for v in 0..model.num_vertices() {
        let expect = rot_about_root(&rest_v[v * 3..v * 3 + 3]);
        for c in 0..3 {
            assert!((verts[v * 3 + c] - expect[c]).abs() < 1e-9);
        }
    }
    for k in 0..NUM_BODY_JOINTS {
        let expect = rot_about_root(&rest_j[k * 3..k * 3 + 3]);
        for c in 0..3 {
            assert!((joints[k * 3 + c] - expect[c]).abs() < 1e-9);
        }
    }
}

#[test]
fn lbs_matches_homogeneous_chain_oracle() {
    let model = tiny_model(44, 150);
    let mut rng = stream(45, "bm-fk", &[]);
    for trial in 0..5 {
        let betas: Vec<f64> = (0..NUM_SHAPES).map(|_| (rng.gen::<f64>() - 0.5) * 2.0).collect();
        let rots = random_rotations(&mut rng, 1, 1.0);
        let (verts, joints) = lbs_forward(&model, &betas, &rots).unwrap();
        let (ov, oj) = fk_oracle(&model.lbs, &betas, &rots);
        for (a, b) in joints.iter().zip(&oj) {
            assert!((a - b).abs() < 1e-9, "trial {trial} joint mismatch {a} vs {b}");
        }
        for (a, b) in verts.iter().zip(&ov) {
            assert!((a - b).abs() < 1e-9, "trial {trial} vertex mismatch {a} vs {b}");
        }
    }
}

#[test]
fn regress_joints_selector_uniform_and_oracle() {
    let mut rng = stream(46, "bm-reg", &[]);
    let v = 8;
    let verts: Vec<f64> = (0..v * 3).map(|_| rng.gen::<f64>()).collect();

    // one-hot row picks the vertex
    let mut w = vec![0.0; 2 * v];
    w[3] = 1.0; // joint 0 <- vertex 3
    for (i, x) in w.iter_mut().enumerate().take(2 * v).skip(v) {
        *x = 1.0 / v as f64;
        let _ = i;
    }
    let j = regress_joints(&w, 2, v, &verts);
    for c in 0..3 {
        assert_eq!(j[c], verts[3 * 3 + c]);
        let centroid: f64 = (0..v).map(|i| verts[i * 3 + c]).sum::<f64>() / v as f64;
        assert!((j[3 + c] - centroid).abs() < 1e-12);
    }

    // random convex rows vs triple loop
    let k = 5;
    let mut wr = vec![0.0; k * v];
    for r in 0..k {
        let mut z = 0.0;
        for c in 0..v {
            let x = rng.gen::<f64>();
            wr[r * v + c] = x;
            z += x;
        }
        for c in 0..v {
            wr[r * v + c] /= z;
        }
    }
    let out = regress_joints(&wr, k, v, &verts);
    for r in 0..k {
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..v {
                s += wr[r * v + i] * verts[i * 3 + c];
            }
            assert!((out[r * 3 + c] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn sja_weights_softmax_properties() {
    let mut rng = stream(47, "bm-sja", &[]);
    let (k, v) = (4, 30);
    let sja = SJAParams {
        logits: (0..k * v).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect(),
        joints: k,
        vertices: v,
    };
    let w = sja_weights(&sja);
    for r in 0..k {
        let sum: f64 = w[r * v..(r + 1) * v].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(w[r * v..(r + 1) * v].iter().all(|&x| x > 0.0));
    }

    // uniform logits give uniform weights
    let uniform = SJAParams { logits: vec![0.7; v], joints: 1, vertices: v };
    for &x in &sja_weights(&uniform) {
        assert!((x - 1.0 / v as f64).abs() < 1e-15);
    }
}

#[test]
fn sja_init_reproduces_one_hot_rows() {
    let (k, v) = (3, 100);
    let mut w = vec![0.0; k * v];
    w[7] = 1.0;
    w[v + 50] = 1.0;
    w[2 * v + 99] = 1.0;
    let sja = sja_init(&w, k, v, 1e-8);
    let back = sja_weights(&sja);
    let max_dev = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_dev < 1e-5, "max deviation {max_dev}");
}

#[test]
fn sja_warm_start_matches_original_regression() {
    let model = tiny_model(48, 200);
    let d = &model.lbs;
    let mut rng = stream(49, "bm-warm", &[]);
    let rots = random_rotations(&mut rng, 1, 0.6);
    let (verts, _) = lbs_forward(&model, &[0.0; NUM_SHAPES], &rots).unwrap();

    let sja = sja_init(&d.regressor, d.k, d.v, 1e-8);
    let w2 = sja_weights(&sja);
    let j_orig = regress_joints(&d.regressor, d.k, d.v, &verts);
    let j_warm = regress_joints(&w2, d.k, d.v, &verts);

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in 0..d.v {
        for c in 0..3 {
            lo[c] = lo[c].min(verts[v * 3 + c]);
            hi[c] = hi[c].max(verts[v * 3 + c]);
        }
    }
    let diameter = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    for (a, b) in j_warm.iter().zip(&j_orig) {
        assert!((a - b).abs() < 1e-4 * diameter);
    }
}

#[test]
fn linear_sja_trivial_and_oracle() {
    let n = 72;
    let j: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let out = linear_sja(&j, &eye, &vec![0.0; n]);
    assert_eq!(out, j);

    let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let out = linear_sja(&j, &vec![0.0; n * n], &b);
    assert_eq!(out, b);

    let mut rng = stream(50, "bm-lin", &[]);
    let a: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let bb: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let out = linear_sja(&j, &a, &bb);
    for r in 0..n {
        let mut s = bb[r];
        for c in 0..n {
            s += a[r * n + c] * j[c];
        }
        assert!((out[r] - s).abs() < 1e-12);
    }
}

#[test]
fn synth_model_invariants_and_bbox_containment() {
    let model = tiny_model(51, 400);
    model.validate().unwrap();
    let rest = model.rest_joints();
    let d = &model.lbs;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in 0..d.v {
        for c in 0..3 {
            lo[c] = lo[c].min(d.template[v * 3 + c]);
            hi[c] = hi[c].max(d.template[v * 3 + c]);
        }
    }
    for k in 0..d.k {
        for c in 0..3 {
            assert!(rest[k * 3 + c] >= lo[c] - 1e-9 && rest[k * 3 + c] <= hi[c] + 1e-9);
        }
    }
    assert!(model.height() > 1.5 && model.height() < 3.0);
}

#[test]
fn synth_model_too_few_vertices_rejected() {
    let mut rng = stream(52, "bm-small", &[]);
    assert!(matches!(
        synth_model(&mut rng, 40, &BodyShapeConfig::default()),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn model_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.pn3dbm");
    let p2 = dir.path().join("b.pn3dbm");
    let model = tiny_model(53, 100);
    save_model(&model, &p1).unwrap();
    let back = load_model(&p1).unwrap();
    assert_eq!(back.lbs.template, model.lbs.template);
    assert_eq!(back.lbs.skin_weights, model.lbs.skin_weights);
    assert_eq!(back.lbs.regressor, model.lbs.regressor);
    assert_eq!(back.lbs.shape_dirs, model.lbs.shape_dirs);
    assert_eq!(back.joint_map, model.joint_map);
    save_model(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn load_rejects_nonconvex_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.pn3dbm");
    let model = tiny_model(54, 100);
    let mut lbs = (*model.lbs).clone();
    lbs.skin_weights[5] += 0.5; // break row sum
    let bad = BodyModel { lbs: Arc::new(lbs), joint_map: model.joint_map.clone() };
    save_model(&bad, &p).unwrap();
    assert!(matches!(load_model(&p), Err(crate::Error::Schema(_))));
}

//! Linear blend skinning kernel: shaped template, regressed rest joints,
//! kinematic-tree transform composition and convex vertex skinning, with a
//! hand-derived reverse pass w.r.t. shape coefficients and joint rotations.

/// Constant body data consumed by the `lbs` graph op. Joint `k`'s parent
/// must have a smaller index; `parent[0] == -1`.
#[derive(Debug, Clone)]
pub struct LbsData {
    pub v: usize,
    pub k: usize,
    pub num_shapes: usize,
    pub parent: Vec<i64>,
    /// `[V,3]` rest vertices.
    pub template: Vec<f64>,
    /// `[V,3,S]` shape blend directions.
    pub shape_dirs: Vec<f64>,
    /// `[V,K]` convex skinning weights.
    pub skin_weights: Vec<f64>,
    /// `[K,V]` convex joint regressor (used for rest joints).
    pub regressor: Vec<f64>,
}

impl LbsData {
    pub fn num_shapes(&self) -> usize {
        self.num_shapes
    }
}

pub(crate) struct LbsForward {
    pub verts: Vec<f64>,
    pub joints: Vec<f64>,
}

struct Intermediate {
    shaped: Vec<f64>,
    rest: Vec<f64>,
    rel_t: Vec<f64>,
    rg: Vec<f64>,
    tg: Vec<f64>,
}

fn mat3_mul(a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
}

fn mat3_vec(a: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

/// `a^T v` for row-major `a`.
fn mat3_tvec(a: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

fn compute(data: &LbsData, betas: &[f64], rots: &[f64]) -> Intermediate {
    let (v_n, k_n, s_n) = (data.v, data.k, data.num_shapes);

    let mut shaped = data.template.clone();
    for v in 0..v_n {
        for c in 0..3 {
            let base = (v * 3 + c) * s_n;
            let mut acc = shaped[v * 3 + c];
            for (b, &beta) in betas.iter().enumerate() {
                acc += data.shape_dirs[base + b] * beta;
            }
            shaped[v * 3 + c] = acc;
        }
    }

    let mut rest = vec![0.0; k_n * 3];
    for k in 0..k_n {
        let row = &data.regressor[k * v_n..(k + 1) * v_n];
        for (v, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..3 {
                rest[k * 3 + c] += w * shaped[v * 3 + c];
            }
        }
    }

    let mut rel_t = vec![0.0; k_n * 3];
    for k in 0..k_n {
        let p = data.parent[k];
        for c in 0..3 {
            rel_t[k * 3 + c] = if p < 0 {
                rest[k * 3 + c]
            } else {
                rest[k * 3 + c] - rest[p as usize * 3 + c]
            };
        }
    }

    let mut rg = vec![0.0; k_n * 9];
    let mut tg = vec![0.0; k_n * 3];
    for k in 0..k_n {
        let rk = &rots[k * 9..(k + 1) * 9];
        let tk = [rel_t[k * 3], rel_t[k * 3 + 1], rel_t[k * 3 + 2]];
        let p = data.parent[k];
        if p < 0 {
            rg[k * 9..(k + 1) * 9].copy_from_slice(rk);
            tg[k * 3..(k + 1) * 3].copy_from_slice(&tk);
        } else {
            let p = p as usize;
            let rgp = rg[p * 9..(p + 1) * 9].to_vec();
            mat3_mul(&rgp, rk, &mut rg[k * 9..(k + 1) * 9]);
            let moved = mat3_vec(&rgp, &tk);
            for c in 0..3 {
                tg[k * 3 + c] = moved[c] + tg[p * 3 + c];
            }
        }
    }

    Intermediate { shaped, rest, rel_t, rg, tg }
}

pub(crate) fn forward(data: &LbsData, betas: &[f64], rots: &[f64]) -> LbsForward {
    let im = compute(data, betas, rots);
    let (v_n, k_n) = (data.v, data.k);
    let mut verts = vec![0.0; v_n * 3];
    for v in 0..v_n {
        let sv = [im.shaped[v * 3], im.shaped[v * 3 + 1], im.shaped[v * 3 + 2]];
        let wrow = &data.skin_weights[v * k_n..(v + 1) * k_n];
        for (k, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let local = [
                sv[0] - im.rest[k * 3],
                sv[1] - im.rest[k * 3 + 1],
                sv[2] - im.rest[k * 3 + 2],
            ];
            let moved = mat3_vec(&im.rg[k * 9..(k + 1) * 9], &local);
            for c in 0..3 {
                verts[v * 3 + c] += w * (moved[c] + im.tg[k * 3 + c]);
            }
        }
    }
    LbsForward { verts, joints: im.tg.clone() }
}

/// Gradients of (verts, joints) outputs w.r.t. betas and rotations.
pub(crate) fn backward(
    data: &LbsData,
    betas: &[f64],
    rots: &[f64],
    g_verts: &[f64],
    g_joints: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let im = compute(data, betas, rots);
    let (v_n, k_n, s_n) = (data.v, data.k, data.num_shapes);

    let mut d_rg = vec![0.0; k_n * 9];
    let mut d_tg = vec![0.0; k_n * 3];
    let mut d_shaped = vec![0.0; v_n * 3];
    let mut d_rest = vec![0.0; k_n * 3];

    // Skinning: vert_v = sum_k w (RG_k (shaped_v - rest_k) + tG_k).
    for v in 0..v_n {
        let gv = [g_verts[v * 3], g_verts[v * 3 + 1], g_verts[v * 3 + 2]];
        if gv == [0.0, 0.0, 0.0] {
            continue;
        }
        let sv = [im.shaped[v * 3], im.shaped[v * 3 + 1], im.shaped[v * 3 + 2]];
        let wrow = &data.skin_weights[v * k_n..(v + 1) * k_n];
        for (k, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let local = [
                sv[0] - im.rest[k * 3],
                sv[1] - im.rest[k * 3 + 1],
                sv[2] - im.rest[k * 3 + 2],
            ];
            let rgk = &im.rg[k * 9..(k + 1) * 9];
            let back = mat3_tvec(rgk, &gv);
            for r in 0..3 {
                for c in 0..3 {
                    d_rg[k * 9 + r * 3 + c] += w * gv[r] * local[c];
                }
                d_tg[k * 3 + r] += w * gv[r];
                d_shaped[v * 3 + r] += w * back[r];
                d_rest[k * 3 + r] -= w * back[r];
            }
        }
    }

    // Joint outputs are the world translations.
    for i in 0..k_n * 3 {
        d_tg[i] += g_joints[i];
    }

    // Tree composition, children before parents (parent index < child).
    let mut d_rots = vec![0.0; k_n * 9];
    let mut d_rel_t = vec![0.0; k_n * 3];
    for k in (0..k_n).rev() {
        let p = data.parent[k];
        let d_rg_k = d_rg[k * 9..(k + 1) * 9].to_vec();
        let d_tg_k = [d_tg[k * 3], d_tg[k * 3 + 1], d_tg[k * 3 + 2]];
        if p < 0 {
            for i in 0..9 {
                d_rots[k * 9 + i] += d_rg_k[i];
            }
            for c in 0..3 {
                d_rel_t[k * 3 + c] += d_tg_k[c];
            }
        } else {
            let p = p as usize;
            let rgp = &im.rg[p * 9..(p + 1) * 9];
            let rk = &rots[k * 9..(k + 1) * 9];
            let tk = [im.rel_t[k * 3], im.rel_t[k * 3 + 1], im.rel_t[k * 3 + 2]];
            // RG_k = RG_p R_k
            for r in 0..3 {
                for c in 0..3 {
                    // dRG_p += dRG_k R_k^T ; dR_k += RG_p^T dRG_k
                    let mut s_p = 0.0;
                    let mut s_k = 0.0;
                    for j in 0..3 {
                        s_p += d_rg_k[r * 3 + j] * rk[c * 3 + j];
                        s_k += rgp[j * 3 + r] * d_rg_k[j * 3 + c];
                    }
                    d_rg[p * 9 + r * 3 + c] += s_p;
                    d_rots[k * 9 + r * 3 + c] += s_k;
                }
            }
            // tG_k = RG_p rel_t_k + tG_p
            for r in 0..3 {
                for c in 0..3 {
                    d_rg[p * 9 + r * 3 + c] += d_tg_k[r] * tk[c];
                }
            }
            let back = mat3_tvec(rgp, &d_tg_k);
            for c in 0..3 {
                d_rel_t[k * 3 + c] += back[c];
                d_tg[p * 3 + c] += d_tg_k[c];
            }
        }
    }

    // rel_t -> rest
    for k in 0..k_n {
        let p = data.parent[k];
        for c in 0..3 {
            d_rest[k * 3 + c] += d_rel_t[k * 3 + c];
            if p >= 0 {
                d_rest[p as usize * 3 + c] -= d_rel_t[k * 3 + c];
            }
        }
    }

    // rest = regressor * shaped
    for k in 0..k_n {
        let row = &data.regressor[k * v_n..(k + 1) * v_n];
        for (v, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..3 {
                d_shaped[v * 3 + c] += w * d_rest[k * 3 + c];
            }
        }
    }

    // shaped = template + shape_dirs . betas
    let mut d_betas = vec![0.0; s_n];
    for i in 0..v_n * 3 {
        let g = d_shaped[i];
        if g == 0.0 {
            continue;
        }
        let base = i * s_n;
        for b in 0..s_n {
            d_betas[b] += g * data.shape_dirs[base + b];
        }
    }

    (d_betas, d_rots)
}

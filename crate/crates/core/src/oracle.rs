//! Plain-loop reference implementations used only by tests. Nothing here
//! touches the graph engine.

use crate::geometry::ImageSize;
use crate::model::Model;
use crate::numcore::{GruParams, ParamId, ParamSet};
use crate::suppression::ScoredProposal;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(ps: &ParamSet, id: ParamId) -> Mat {
    let t = ps.value(id);
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn vecp(ps: &ParamSet, id: ParamId) -> Vec<f64> {
    ps.value(id).data().to_vec()
}

pub fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `W x + b` by explicit loops.
pub fn lin(w: &Mat, x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut s = b.map_or(0.0, |b| b[i]);
            for k in 0..x.len() {
                s += row[k] * x[k];
            }
            s
        })
        .collect()
}

pub struct ScalarGru {
    w: [Mat; 3],
    u: [Mat; 3],
    b: [Vec<f64>; 3],
}

impl ScalarGru {
    pub fn new(ps: &ParamSet, p: &GruParams) -> Self {
        ScalarGru {
            w: [mat(ps, p.w_z), mat(ps, p.w_r), mat(ps, p.w_h)],
            u: [mat(ps, p.u_z), mat(ps, p.u_r), mat(ps, p.u_h)],
            b: [vecp(ps, p.b_z), vecp(ps, p.b_r), vecp(ps, p.b_h)],
        }
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = h.len();
        let wz = lin(&self.w[0], x, Some(&self.b[0]));
        let uz = lin(&self.u[0], h, None);
        let wr = lin(&self.w[1], x, Some(&self.b[1]));
        let ur = lin(&self.u[1], h, None);
        let z: Vec<f64> = (0..n).map(|i| sig(wz[i] + uz[i])).collect();
        let r: Vec<f64> = (0..n).map(|i| sig(wr[i] + ur[i])).collect();
        let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
        let wh = lin(&self.w[2], x, Some(&self.b[2]));
        let uh = lin(&self.u[2], &rh, None);
        (0..n)
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * (wh[i] + uh[i]).tanh())
            .collect()
    }
}

/// Returns per-step concatenated outputs and the two final hiddens.
pub fn bigru(
    fwd: &ScalarGru,
    bwd: &ScalarGru,
    seq: &[Vec<f64>],
    init_f: &[f64],
    init_b: &[f64],
) -> (Mat, Vec<f64>, Vec<f64>) {
    let n = seq.len();
    let mut hf = init_f.to_vec();
    let mut of = Vec::with_capacity(n);
    for x in seq {
        hf = fwd.step(x, &hf);
        of.push(hf.clone());
    }
    let mut hb = init_b.to_vec();
    let mut ob = vec![Vec::new(); n];
    for t in (0..n).rev() {
        hb = bwd.step(&seq[t], &hb);
        ob[t] = hb.clone();
    }
    let rows = (0..n).map(|t| [of[t].clone(), ob[t].clone()].concat()).collect();
    (rows, hf, hb)
}

/// Dense attention: `S_a[i][j] = softmax_j(w_s . tanh(W_M f_M[j] + b_M + W_H f_H[i]))`,
/// and `f_glob[i] = relu(W_G [sum_j S_a[i][j] f_M[j], f_H[i]] + b_G)`.
pub fn attention(model: &Model, f_m: &Mat, f_h: &Mat) -> (Mat, Mat) {
    let ps = &model.params;
    let ids = &model.ids;
    let (w_m, b_m, w_h) = (mat(ps, ids.w_m), vecp(ps, ids.b_m), mat(ps, ids.w_h));
    let w_s = vecp(ps, ids.w_s);
    let (w_g, b_g) = (mat(ps, ids.w_g), vecp(ps, ids.b_g));
    let n = f_m.len();
    let keys: Mat = f_m.iter().map(|r| lin(&w_m, r, Some(&b_m))).collect();
    let queries: Mat = f_h.iter().map(|r| lin(&w_h, r, None)).collect();
    let mut s_a = vec![vec![0.0; n]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                (0..w_s.len())
                    .map(|k| w_s[k] * (keys[j][k] + queries[i][k]).tanh())
                    .sum()
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            s_a[i][j] = e[j] / z;
        }
    }
    let d = f_m[0].len();
    let glob = (0..n)
        .map(|i| {
            let mut ctx = vec![0.0; d];
            for j in 0..n {
                for k in 0..d {
                    ctx[k] += s_a[i][j] * f_m[j][k];
                }
            }
            ctx.extend_from_slice(&f_h[i]);
            lin(&w_g, &ctx, Some(&b_g)).into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect();
    (s_a, glob)
}

/// Context gate per row: returns `f_C`.
pub fn gate(model: &Model, f_l: &Mat, f_h: &Mat, f_glob: &Mat) -> Mat {
    let ps = &model.params;
    let ids = &model.ids;
    let (w1, b1) = (mat(ps, ids.w_c1), vecp(ps, ids.b_c1));
    let (w2, b2) = (mat(ps, ids.w_c2), vecp(ps, ids.b_c2));
    let (w3, b3) = (mat(ps, ids.w_c3), vecp(ps, ids.b_c3));
    (0..f_l.len())
        .map(|i| {
            let all = [f_l[i].clone(), f_h[i].clone(), f_glob[i].clone()].concat();
            let z: Vec<f64> = lin(&w2, &all, Some(&b2)).into_iter().map(sig).collect();
            let v = lin(&w3, &f_glob[i], Some(&b3));
            let t = lin(&w1, &[f_l[i].clone(), f_h[i].clone()].concat(), Some(&b1));
            (0..z.len()).map(|k| (t[k] + z[k] * v[k]).tanh()).collect()
        })
        .collect()
}

pub fn decide(model: &Model, f_c: &Mat) -> Mat {
    let (w, b) = (mat(&model.params, model.ids.w_d), vecp(&model.params, model.ids.b_d));
    f_c.iter()
        .map(|r| lin(&w, r, Some(&b)).into_iter().map(sig).collect())
        .collect()
}

/// Whole network on an already-sorted sequence; returns `s1` rows.
pub fn forward_sorted(model: &Model, seq: &[&ScoredProposal], img: ImageSize) -> Mat {
    let ps = &model.params;
    let e = &model.ids.embed;
    let (w_a, b_a, w_l, b_l) = (mat(ps, e.w_a), vecp(ps, e.b_a), mat(ps, e.w_l), vecp(ps, e.b_l));
    let d_r = model.cfg.d_r;
    let f_l: Mat = seq
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut fused: Vec<f64> = lin(&w_a, &p.feat, Some(&b_a))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            fused.extend(std::iter::repeat(p.s0).take(d_r));
            for i in 0..d_r / 2 {
                let a = (t + 1) as f64 / 10000f64.powf(2.0 * i as f64 / d_r as f64);
                fused.push(a.sin());
                fused.push(a.cos());
            }
            let b = p.bbox;
            let geo = [
                (b.x1 / img.w + 0.5).ln(),
                (b.y1 / img.h + 0.5).ln(),
                (b.x2 / img.w + 0.5).ln(),
                (b.y2 / img.h + 0.5).ln(),
            ];
            for k in 0..d_r {
                fused.push(geo[k % 4]);
            }
            lin(&w_l, &fused, Some(&b_l)).into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect();
    let d_l = model.cfg.d_l;
    let enc = (
        ScalarGru::new(ps, &model.ids.encoder.fwd),
        ScalarGru::new(ps, &model.ids.encoder.bwd),
    );
    let dec = (
        ScalarGru::new(ps, &model.ids.decoder.fwd),
        ScalarGru::new(ps, &model.ids.decoder.bwd),
    );
    let zero = vec![0.0; d_l];
    let (f_m, ff, fb) = bigru(&enc.0, &enc.1, &f_l, &zero, &zero);
    let (f_h, _, _) = bigru(&dec.0, &dec.1, &f_l, &ff, &fb);
    let (_, f_glob) = attention(model, &f_m, &f_h);
    let f_c = gate(model, &f_l, &f_h, &f_glob);
    decide(model, &f_c)
}

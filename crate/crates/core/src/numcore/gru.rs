//! Gated recurrent units built from graph primitives.
//!
//! Convention: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
//! `h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h~`.
//! Hidden size equals input size.

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    pub size: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, size: usize, rng: &mut R) -> Self {
        let mut w = |name: &str, rng: &mut R| {
            params.add_uniform(format!("{prefix}.{name}"), &[size, size], size, rng)
        };
        let (w_z, w_r, w_h) = (w("w_z", rng), w("w_r", rng), w("w_h", rng));
        let (u_z, u_r, u_h) = (w("u_z", rng), w("u_r", rng), w("u_h", rng));
        let mut b = |name: &str| params.add(format!("{prefix}.{name}"), Tensor::zeros(&[size]));
        let (b_z, b_r, b_h) = (b("b_z"), b("b_r"), b("b_h"));
        GruParams {
            size,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }

    /// Looks the nine tensors up by their conventional names.
    pub fn find(params: &ParamSet, prefix: &str) -> Option<Self> {
        let f = |n: &str| params.find(&format!("{prefix}.{n}"));
        let w_z = f("w_z")?;
        Some(GruParams {
            size: params.value(w_z).rows(),
            w_z,
            w_r: f("w_r")?,
            w_h: f("w_h")?,
            u_z: f("u_z")?,
            u_r: f("u_r")?,
            u_h: f("u_h")?,
            b_z: f("b_z")?,
            b_r: f("b_r")?,
            b_h: f("b_h")?,
        })
    }
}

/// One recurrence given the already-projected inputs `W_* x + b_*`.
fn gru_step(g: &mut Graph, xz: Var, xr: Var, xh: Var, h: Var, p: &GruParams) -> Var {
    let (u_z, u_r, u_h) = (g.param(p.u_z), g.param(p.u_r), g.param(p.u_h));
    let hz = g.affine(h, u_z, None);
    let pre_z = g.add(xz, hz);
    let z = g.sigmoid(pre_z);
    let hr = g.affine(h, u_r, None);
    let pre_r = g.add(xr, hr);
    let r = g.sigmoid(pre_r);
    let rh = g.mul(r, h);
    let hh = g.affine(rh, u_h, None);
    let pre_h = g.add(xh, hh);
    let cand = g.tanh(pre_h);
    let delta = g.sub(cand, h);
    let step = g.mul(z, delta);
    g.add(h, step)
}

fn project(g: &mut Graph, x: Var, p: &GruParams) -> (Var, Var, Var) {
    let (w_z, b_z) = (g.param(p.w_z), g.param(p.b_z));
    let (w_r, b_r) = (g.param(p.w_r), g.param(p.b_r));
    let (w_h, b_h) = (g.param(p.w_h), g.param(p.b_h));
    (
        g.affine(x, w_z, Some(b_z)),
        g.affine(x, w_r, Some(b_r)),
        g.affine(x, w_h, Some(b_h)),
    )
}

/// A single GRU update for `1 x p` rows `x` and `h_prev`.
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruParams) -> Var {
    let (xz, xr, xh) = project(g, x, p);
    gru_step(g, xz, xr, xh, h_prev, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGruParams {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, size: usize, rng: &mut R) -> Self {
        BiGruParams {
            fwd: GruParams::init(params, &format!("{prefix}.fwd"), size, rng),
            bwd: GruParams::init(params, &format!("{prefix}.bwd"), size, rng),
        }
    }

    pub fn find(params: &ParamSet, prefix: &str) -> Option<Self> {
        Some(BiGruParams {
            fwd: GruParams::find(params, &format!("{prefix}.fwd"))?,
            bwd: GruParams::find(params, &format!("{prefix}.bwd"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruOutput {
    /// `N x 2p`; row `t` is `[h_fwd(t), h_bwd(t)]`.
    pub outputs: Var,
    /// Forward hidden after the last element.
    pub final_fwd: Var,
    /// Backward hidden after the first element.
    pub final_bwd: Var,
}

/// Runs a forward GRU over rows `0..N` from `init_fwd` and a backward GRU
/// over rows `N-1..=0` from `init_bwd`.
pub fn bigru(
    g: &mut Graph,
    seq: Var,
    p: &BiGruParams,
    init_fwd: Var,
    init_bwd: Var,
) -> Result<BiGruOutput> {
    let n = g.value(seq).rows();
    if n == 0 || g.value(seq).is_empty() {
        return Err(Error::InvalidInput("bigru over an empty sequence".into()));
    }
    let (fz, fr, fh) = project(g, seq, &p.fwd);
    let (bz, br, bh) = project(g, seq, &p.bwd);

    let mut h = init_fwd;
    let mut fwd = Vec::with_capacity(n);
    for t in 0..n {
        let (xz, xr, xh) = (g.row(fz, t), g.row(fr, t), g.row(fh, t));
        h = gru_step(g, xz, xr, xh, h, &p.fwd);
        fwd.push(h);
    }
    let final_fwd = h;

    let mut h = init_bwd;
    let mut bwd = vec![h; n];
    for t in (0..n).rev() {
        let (xz, xr, xh) = (g.row(bz, t), g.row(br, t), g.row(bh, t));
        h = gru_step(g, xz, xr, xh, h, &p.bwd);
        bwd[t] = h;
    }
    let final_bwd = h;

    let f = g.stack_rows(&fwd);
    let b = g.stack_rows(&bwd);
    let outputs = g.concat_cols(&[f, b]);
    Ok(BiGruOutput {
        outputs,
        final_fwd,
        final_bwd,
    })
}

//! Finite-difference checks for each graph operation in isolation.
//!
//! Every op input is a parameter and the loss is a random linear functional
//! of the op output, so no gradient is trivially zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckReport};
use super::graph::{Graph, Var};
use super::gru::{bigru, gru_cell, BiGruParams};
use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

const EPS: f64 = 1e-5;
const MAX_COORDS: usize = 200;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

struct Suite {
    rng: ChaCha8Rng,
    tol: f64,
    out: Vec<(&'static str, GradCheckReport)>,
}

impl Suite {
    fn run<F>(&mut self, name: &'static str, ps: &ParamSet, out_shape: &[usize], op: F) -> Result<()>
    where
        F: Fn(&mut Graph) -> Var,
    {
        let weights = rand_tensor(&mut self.rng, out_shape, 1.0);
        let report = grad_check(
            ps,
            |g| {
                let y = op(g);
                let c = g.input(weights.clone());
                let prod = g.mul(y, c);
                g.sum(prod)
            },
            EPS,
            self.tol,
            MAX_COORDS,
        )?;
        self.out.push((name, report));
        Ok(())
    }
}

/// Checks every differentiable graph operation plus the GRU cell and the
/// bidirectional GRU. Returns one report per operation.
pub fn op_grad_checks(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tol,
        out: Vec::new(),
    };

    let mut ps = ParamSet::new();
    let x = ps.add("x", rand_tensor(&mut s.rng, &[4, 3], 1.0));
    let w = ps.add("w", rand_tensor(&mut s.rng, &[5, 3], 1.0));
    let b = ps.add("b", rand_tensor(&mut s.rng, &[5], 1.0));
    s.run("affine", &ps, &[4, 5], |g| {
        let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
        g.affine(xv, wv, Some(bv))
    })?;

    let mut ps = ParamSet::new();
    let a = ps.add("a", rand_tensor(&mut s.rng, &[3, 4], 1.0));
    let m = ps.add("b", rand_tensor(&mut s.rng, &[4, 2], 1.0));
    s.run("matmul", &ps, &[3, 2], |g| {
        let (av, bv) = (g.param(a), g.param(m));
        g.matmul(av, bv)
    })?;

    let mut ps = ParamSet::new();
    let a = ps.add("a", rand_tensor(&mut s.rng, &[3, 3], 1.0));
    let c = ps.add("b", rand_tensor(&mut s.rng, &[3, 3], 1.0));
    s.run("add", &ps, &[3, 3], |g| {
        let (av, bv) = (g.param(a), g.param(c));
        g.add(av, bv)
    })?;
    s.run("sub", &ps, &[3, 3], |g| {
        let (av, bv) = (g.param(a), g.param(c));
        g.sub(av, bv)
    })?;
    s.run("mul", &ps, &[3, 3], |g| {
        let (av, bv) = (g.param(a), g.param(c));
        g.mul(av, bv)
    })?;
    s.run("sigmoid", &ps, &[3, 3], |g| {
        let av = g.param(a);
        g.sigmoid(av)
    })?;
    s.run("tanh", &ps, &[3, 3], |g| {
        let av = g.param(a);
        g.tanh(av)
    })?;
    s.run("relu", &ps, &[3, 3], |g| {
        let av = g.param(a);
        g.relu(av)
    })?;
    s.run("softmax_rows", &ps, &[3, 3], |g| {
        let av = g.param(a);
        g.softmax_rows(av)
    })?;

    let mut ps = ParamSet::new();
    let a = ps.add("a", rand_tensor(&mut s.rng, &[3, 2], 1.0));
    let c = ps.add("b", rand_tensor(&mut s.rng, &[3, 4], 1.0));
    s.run("concat_cols", &ps, &[3, 6], |g| {
        let (av, bv) = (g.param(a), g.param(c));
        g.concat_cols(&[av, bv])
    })?;
    s.run("row+stack_rows", &ps, &[3, 4], |g| {
        let bv = g.param(c);
        let rows: Vec<Var> = [2, 0, 2].iter().map(|&i| g.row(bv, i)).collect();
        g.stack_rows(&rows)
    })?;
    s.run("mean_cols", &ps, &[3, 1], |g| {
        let bv = g.param(c);
        g.mean_cols(bv)
    })?;

    let mut ps = ParamSet::new();
    let k = ps.add("keys", rand_tensor(&mut s.rng, &[4, 3], 1.0));
    let q = ps.add("queries", rand_tensor(&mut s.rng, &[2, 3], 1.0));
    let wa = ps.add("w", rand_tensor(&mut s.rng, &[3], 1.0));
    s.run("attention_logits", &ps, &[2, 4], |g| {
        let (kv, qv, wv) = (g.param(k), g.param(q), g.param(wa));
        g.attention_logits(kv, qv, wv)
    })?;

    let mut ps = ParamSet::new();
    let z = ps.add("z", rand_tensor(&mut s.rng, &[4, 2], 2.0));
    let labels: Vec<f64> = (0..8).map(|_| f64::from(s.rng.random_bool(0.5))).collect();
    let y = Tensor::new(&[4, 2], labels);
    let report = grad_check(
        &ps,
        |g| {
            let zv = g.param(z);
            let p = g.sigmoid(zv);
            g.weighted_bce(p, y.clone(), 4.0)
        },
        EPS,
        tol,
        MAX_COORDS,
    )?;
    s.out.push(("weighted_bce", report));

    let mut ps = ParamSet::new();
    let bi = BiGruParams::init(&mut ps, "bi", 3, &mut s.rng);
    let seq = ps.add("seq", rand_tensor(&mut s.rng, &[4, 3], 1.0));
    let h0 = ps.add("h0", rand_tensor(&mut s.rng, &[1, 3], 0.5));
    s.run("gru_cell", &ps, &[1, 3], |g| {
        let sv = g.param(seq);
        let xv = g.row(sv, 1);
        let hv = g.param(h0);
        gru_cell(g, xv, hv, &bi.fwd)
    })?;
    s.run("bigru", &ps, &[4, 6], |g| {
        let sv = g.param(seq);
        let hv = g.param(h0);
        bigru(g, sv, &bi, hv, hv).expect("four-step sequence").outputs
    })?;
    Ok(s.out)
}

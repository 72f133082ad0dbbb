//! Low-grade proposal features: a smoothed appearance vector fused with the
//! tiled score, a sinusoidal rank code, and tiled log-normalized geometry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_geometric, ImageSize};
use crate::numcore::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::suppression::ScoredProposal;

/// Width of the rank code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankEncoding {
    d_r: usize,
}

impl RankEncoding {
    pub fn new(d_r: usize) -> Result<Self> {
        if d_r < 2 || d_r % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "rank encoding width must be even and >= 2, got {d_r}"
            )));
        }
        Ok(RankEncoding { d_r })
    }

    pub fn dim(&self) -> usize {
        self.d_r
    }

    pub fn encode(&self, rank: usize) -> Vec<f64> {
        rank_encode(rank, self.d_r)
    }
}

/// Sinusoidal code: `[2i] = sin(rank / 10000^(2i/d_r))`, `[2i+1] = cos(..)`.
pub fn rank_encode(rank: usize, d_r: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_r];
    for i in 0..d_r / 2 {
        let angle = rank as f64 / 10000f64.powf(2.0 * i as f64 / d_r as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

pub fn tile_score(s0: f64, d_r: usize) -> Vec<f64> {
    vec![s0; d_r]
}

/// Repeats the 4-vector `d_r / 4` times, block after block.
pub fn tile_geo(f_geo: [f64; 4], d_r: usize) -> Result<Vec<f64>> {
    if d_r % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "geometry tiling needs a width divisible by 4, got {d_r}"
        )));
    }
    Ok(f_geo.iter().copied().cycle().take(d_r).collect())
}

/// `[tile_score(s0), rank_encode(rank), tile_geo(geometry)]`, length `3 * d_r`.
pub fn side_features(
    p: &ScoredProposal,
    rank: usize,
    img: ImageSize,
    d_r: usize,
) -> Result<Vec<f64>> {
    let mut out = tile_score(p.s0, d_r);
    out.extend(rank_encode(rank, d_r));
    out.extend(tile_geo(normalize_geometric(&p.bbox, img)?, d_r)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingParams {
    pub d_a: usize,
    pub d_l: usize,
    pub d_r: usize,
    /// `d_l x d_a`
    pub w_a: ParamId,
    pub b_a: ParamId,
    /// `d_l x (d_l + 3 d_r)`
    pub w_l: ParamId,
    pub b_l: ParamId,
}

impl EmbeddingParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        d_a: usize,
        d_l: usize,
        d_r: usize,
        rng: &mut R,
    ) -> Self {
        let fused = d_l + 3 * d_r;
        EmbeddingParams {
            d_a,
            d_l,
            d_r,
            w_a: params.add_uniform("embed.w_a", &[d_l, d_a], d_a, rng),
            b_a: params.add("embed.b_a", Tensor::zeros(&[d_l])),
            w_l: params.add_uniform("embed.w_l", &[d_l, fused], fused, rng),
            b_l: params.add("embed.b_l", Tensor::zeros(&[d_l])),
        }
    }

    pub fn find(params: &ParamSet, d_r: usize) -> Option<Self> {
        let w_a = params.find("embed.w_a")?;
        let (d_l, d_a) = params.value(w_a).dims2();
        Some(EmbeddingParams {
            d_a,
            d_l,
            d_r,
            w_a,
            b_a: params.find("embed.b_a")?,
            w_l: params.find("embed.w_l")?,
            b_l: params.find("embed.b_l")?,
        })
    }
}

/// Records `f_L` for an already-sorted sequence; row `t` uses rank `t + 1`.
pub fn embed_sequence(
    g: &mut Graph,
    seq: &[&ScoredProposal],
    img: ImageSize,
    ep: &EmbeddingParams,
) -> Result<Var> {
    let n = seq.len();
    let mut feats = Vec::with_capacity(n * ep.d_a);
    let mut side = Vec::with_capacity(n * 3 * ep.d_r);
    for (t, p) in seq.iter().enumerate() {
        if p.feat.len() != ep.d_a {
            return Err(Error::InvalidInput(format!(
                "proposal {} has a {}-dim appearance feature, model expects {}",
                p.id,
                p.feat.len(),
                ep.d_a
            )));
        }
        feats.extend_from_slice(&p.feat);
        side.extend(side_features(p, t + 1, img, ep.d_r)?);
    }
    let fa = g.input(Tensor::new(&[n, ep.d_a], feats));
    let fs = g.input(Tensor::new(&[n, 3 * ep.d_r], side));
    let (w_a, b_a) = (g.param(ep.w_a), g.param(ep.b_a));
    let pre_a = g.affine(fa, w_a, Some(b_a));
    let smooth = g.relu(pre_a);
    let fused = g.concat_cols(&[smooth, fs]);
    let (w_l, b_l) = (g.param(ep.w_l), g.param(ep.b_l));
    let pre_l = g.affine(fused, w_l, Some(b_l));
    Ok(g.relu(pre_l))
}

/// The low-grade feature of one proposal at a given rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedProposal {
    pub f_l: Vec<f64>,
    pub rank: usize,
    pub id: usize,
}

pub fn embed(
    p: &ScoredProposal,
    rank: usize,
    img: ImageSize,
    params: &ParamSet,
    ep: &EmbeddingParams,
) -> Result<EmbeddedProposal> {
    if rank == 0 {
        return Err(Error::InvalidInput("ranks start at 1".into()));
    }
    let mut g = Graph::new(params);
    let mut feats = p.feat.clone();
    if feats.len() != ep.d_a {
        return Err(Error::InvalidInput(format!(
            "proposal {} has a {}-dim appearance feature, model expects {}",
            p.id,
            feats.len(),
            ep.d_a
        )));
    }
    let fa = g.input(Tensor::row(std::mem::take(&mut feats)));
    let fs = g.input(Tensor::row(side_features(p, rank, img, ep.d_r)?));
    let (w_a, b_a) = (g.param(ep.w_a), g.param(ep.b_a));
    let pre_a = g.affine(fa, w_a, Some(b_a));
    let smooth = g.relu(pre_a);
    let fused = g.concat_cols(&[smooth, fs]);
    let (w_l, b_l) = (g.param(ep.w_l), g.param(ep.b_l));
    let pre_l = g.affine(fused, w_l, Some(b_l));
    let out = g.relu(pre_l);
    Ok(EmbeddedProposal {
        f_l: g.value(out).data().to_vec(),
        rank,
        id: p.id,
    })
}

//! Per-class sequential context model.
//!
//! Candidates of one class are sorted by score, embedded, scanned by a
//! bidirectional GRU encoder, re-scanned by a decoder that starts from the
//! encoder's final hidden states, related to every encoder position through
//! additive attention, fused by a context gate, and scored by one or more
//! sigmoid heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{embed_sequence, EmbeddingParams};
use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::numcore::checkpoint;
use crate::numcore::graph::PROB_CLAMP;
use crate::numcore::{bigru, BiGruParams, Graph, ParamId, ParamSet, Tensor, Var};
use crate::suppression::{canonical_cmp, canonical_order, ScoredProposal};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Appearance feature width.
    pub d_a: usize,
    /// Low-grade feature width; also the GRU hidden size per direction.
    pub d_l: usize,
    /// Bidirectional feature width, always `2 * d_l`.
    pub d_m: usize,
    /// Rank code width and tiling width of score and geometry.
    pub d_r: usize,
    /// Attention projection width.
    pub d_att: usize,
    /// IoU thresholds, one decision head each.
    pub heads: Vec<f64>,
    /// Longest sequence fed to the network; lower-scored extras are dropped.
    pub cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_a: 64,
            d_l: 128,
            d_m: 256,
            d_r: 32,
            d_att: 256,
            heads: vec![0.5],
            cap: 500,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(k, m));
        if self.d_l == 0 || self.d_a == 0 || self.d_att == 0 {
            return err("model", "feature widths must be positive".into());
        }
        if self.d_m != 2 * self.d_l {
            return err(
                "model.d_m",
                format!("must equal 2 * d_l = {}, got {}", 2 * self.d_l, self.d_m),
            );
        }
        if self.d_r == 0 || self.d_r % 4 != 0 {
            return err("model.d_r", format!("must be a positive multiple of 4, got {}", self.d_r));
        }
        if self.heads.is_empty() {
            return err("model.heads", "need at least one head".into());
        }
        if self.heads.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return err("model.heads", "IoU thresholds must lie in (0, 1)".into());
        }
        if self.cap == 0 {
            return err("model.cap", "must be positive".into());
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn to_meta(&self) -> Vec<(String, String)> {
        let heads: Vec<String> = self.heads.iter().map(|h| format!("{h}")).collect();
        vec![
            ("d_a".into(), self.d_a.to_string()),
            ("d_l".into(), self.d_l.to_string()),
            ("d_m".into(), self.d_m.to_string()),
            ("d_r".into(), self.d_r.to_string()),
            ("d_att".into(), self.d_att.to_string()),
            ("heads".into(), heads.join(",")),
            ("cap".into(), self.cap.to_string()),
        ]
    }

    fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing model meta `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad meta `{k}`")))
        };
        let heads = get("heads")?
            .split(',')
            .map(|h| h.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint("bad meta `heads`".into()))?;
        Ok(ModelConfig {
            d_a: num("d_a")?,
            d_l: num("d_l")?,
            d_m: num("d_m")?,
            d_r: num("d_r")?,
            d_att: num("d_att")?,
            heads,
            cap: num("cap")?,
        })
    }
}

/// Handles to every weight of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: EmbeddingParams,
    pub encoder: BiGruParams,
    pub decoder: BiGruParams,
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_c1: ParamId,
    pub b_c1: ParamId,
    pub w_c2: ParamId,
    pub b_c2: ParamId,
    pub w_c3: ParamId,
    pub b_c3: ParamId,
    pub w_d: ParamId,
    pub b_d: ParamId,
}

impl ModelParams {
    fn init(cfg: &ModelConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let (d_l, d_m, d_att) = (cfg.d_l, cfg.d_m, cfg.d_att);
        let embed = EmbeddingParams::init(ps, cfg.d_a, d_l, cfg.d_r, rng);
        let encoder = BiGruParams::init(ps, "encoder", d_l, rng);
        let decoder = BiGruParams::init(ps, "decoder", d_l, rng);
        let mut w = |ps: &mut ParamSet, name: &str, rows: usize, cols: usize| {
            ps.add_uniform(name, &[rows, cols], cols, rng)
        };
        let zeros = |ps: &mut ParamSet, name: &str, n: usize| ps.add(name, Tensor::zeros(&[n]));
        let w_m = w(ps, "attn.w_m", d_att, d_m);
        let b_m = zeros(ps, "attn.b_m", d_att);
        let w_h = w(ps, "attn.w_h", d_att, d_m);
        let w_s = w(ps, "attn.w_s", 1, d_att);
        let w_g = w(ps, "attn.w_g", d_m, 2 * d_m);
        let b_g = zeros(ps, "attn.b_g", d_m);
        let w_c1 = w(ps, "gate.w_c1", d_m, d_l + d_m);
        let b_c1 = zeros(ps, "gate.b_c1", d_m);
        let w_c2 = w(ps, "gate.w_c2", d_m, d_l + 2 * d_m);
        let b_c2 = zeros(ps, "gate.b_c2", d_m);
        let w_c3 = w(ps, "gate.w_c3", d_m, d_m);
        let b_c3 = zeros(ps, "gate.b_c3", d_m);
        let w_d = w(ps, "decide.w_d", cfg.num_heads(), d_m);
        let b_d = zeros(ps, "decide.b_d", cfg.num_heads());
        ModelParams {
            embed,
            encoder,
            decoder,
            w_m,
            b_m,
            w_h,
            w_s,
            w_g,
            b_g,
            w_c1,
            b_c1,
            w_c2,
            b_c2,
            w_c3,
            b_c3,
            w_d,
            b_d,
        }
    }

    /// Resolves handles by name and checks every shape against `cfg`.
    fn find(cfg: &ModelConfig, ps: &ParamSet) -> Result<Self> {
        let f = |n: &str| {
            ps.find(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let missing = |what: &str| Error::Checkpoint(format!("missing {what} parameters"));
        let mp = ModelParams {
            embed: EmbeddingParams::find(ps, cfg.d_r).ok_or_else(|| missing("embedding"))?,
            encoder: BiGruParams::find(ps, "encoder").ok_or_else(|| missing("encoder"))?,
            decoder: BiGruParams::find(ps, "decoder").ok_or_else(|| missing("decoder"))?,
            w_m: f("attn.w_m")?,
            b_m: f("attn.b_m")?,
            w_h: f("attn.w_h")?,
            w_s: f("attn.w_s")?,
            w_g: f("attn.w_g")?,
            b_g: f("attn.b_g")?,
            w_c1: f("gate.w_c1")?,
            b_c1: f("gate.b_c1")?,
            w_c2: f("gate.w_c2")?,
            b_c2: f("gate.b_c2")?,
            w_c3: f("gate.w_c3")?,
            b_c3: f("gate.b_c3")?,
            w_d: f("decide.w_d")?,
            b_d: f("decide.b_d")?,
        };
        // A freshly initialized reference carries the expected shapes.
        let mut reference = ParamSet::new();
        ModelParams::init(cfg, &mut reference, &mut ChaCha8Rng::seed_from_u64(0));
        if reference.len() != ps.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.len(),
                ps.len()
            )));
        }
        for p in reference.iter() {
            let id = f(&p.name)?;
            if ps.value(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    p.name,
                    ps.value(id).shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(mp)
    }

    /// Encoder pass from zero hidden states. Returns `f_M` and the
    /// (forward, backward) final hiddens.
    pub fn encode(&self, g: &mut Graph, f_l: Var) -> Result<(Var, (Var, Var))> {
        let width = g.value(f_l).cols();
        let zero = g.input(Tensor::zeros(&[1, width]));
        let out = bigru(g, f_l, &self.encoder, zero, zero)?;
        Ok((out.outputs, (out.final_fwd, out.final_bwd)))
    }

    /// Decoder pass over the same sequence, each direction starting from the
    /// encoder's final hidden of that direction.
    pub fn decode(&self, g: &mut Graph, f_l: Var, finals: (Var, Var)) -> Result<Var> {
        Ok(bigru(g, f_l, &self.decoder, finals.0, finals.1)?.outputs)
    }

    /// Returns `(S_a, f_glob)`. Row `i` of `S_a` is a distribution over
    /// encoder positions for decoder position `i`.
    pub fn global_attention(&self, g: &mut Graph, f_m: Var, f_h: Var) -> (Var, Var) {
        let (w_m, b_m, w_h, w_s) = (
            g.param(self.w_m),
            g.param(self.b_m),
            g.param(self.w_h),
            g.param(self.w_s),
        );
        let keys = g.affine(f_m, w_m, Some(b_m));
        let queries = g.affine(f_h, w_h, None);
        let logits = g.attention_logits(keys, queries, w_s);
        let s_a = g.softmax_rows(logits);
        let context = g.matmul(s_a, f_m);
        let joined = g.concat_cols(&[context, f_h]);
        let (w_g, b_g) = (g.param(self.w_g), g.param(self.b_g));
        let pre = g.affine(joined, w_g, Some(b_g));
        (s_a, g.relu(pre))
    }

    /// Returns `(f_Z, f_V, f_T, f_C)`.
    pub fn context_gate(
        &self,
        g: &mut Graph,
        f_l: Var,
        f_h: Var,
        f_glob: Var,
    ) -> (Var, Var, Var, Var) {
        let all = g.concat_cols(&[f_l, f_h, f_glob]);
        let (w_c2, b_c2) = (g.param(self.w_c2), g.param(self.b_c2));
        let pre_z = g.affine(all, w_c2, Some(b_c2));
        let f_z = g.sigmoid(pre_z);
        let (w_c3, b_c3) = (g.param(self.w_c3), g.param(self.b_c3));
        let f_v = g.affine(f_glob, w_c3, Some(b_c3));
        let low_high = g.concat_cols(&[f_l, f_h]);
        let (w_c1, b_c1) = (g.param(self.w_c1), g.param(self.b_c1));
        let f_t = g.affine(low_high, w_c1, Some(b_c1));
        let gated = g.mul(f_z, f_v);
        let sum = g.add(f_t, gated);
        let f_c = g.tanh(sum);
        (f_z, f_v, f_t, f_c)
    }

    /// Per-head keep probabilities, `N x H`.
    pub fn decide(&self, g: &mut Graph, f_c: Var) -> Var {
        let (w_d, b_d) = (g.param(self.w_d), g.param(self.b_d));
        let logits = g.affine(f_c, w_d, Some(b_d));
        g.sigmoid(logits)
    }
}

/// Graph handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub f_l: Var,
    pub f_m: Var,
    pub f_h: Var,
    pub s_a: Var,
    pub f_glob: Var,
    pub f_z: Var,
    pub f_v: Var,
    pub f_t: Var,
    pub f_c: Var,
    pub s1: Var,
}

/// Materialized intermediates of one forward pass, rows in sorted order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input indices in processing order.
    pub order: Vec<usize>,
    pub f_l: Tensor,
    pub f_m: Tensor,
    pub f_h: Tensor,
    pub s_a: Tensor,
    pub f_glob: Tensor,
    pub f_z: Tensor,
    pub f_v: Tensor,
    pub f_t: Tensor,
    pub f_c: Tensor,
    pub s1: Tensor,
}

/// Result of ordering one class's candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedCandidates {
    /// Indices fed to the network; rank is position + 1.
    pub order: Vec<usize>,
    /// Lowest-scored indices beyond the cap.
    pub truncated: Vec<usize>,
}

/// Canonical descending-score order, cut at `cap`.
pub fn sort_candidates(cands: &[ScoredProposal], cap: usize) -> SortedCandidates {
    let mut order = canonical_order(cands);
    let truncated = if order.len() > cap {
        order.split_off(cap)
    } else {
        Vec::new()
    };
    SortedCandidates { order, truncated }
}

/// Inference score: detector score times model keep probability.
/// Mean taken as offsets from the first head, so identical heads return
/// that head's value exactly.
fn head_mean(row: &[f64]) -> f64 {
    let first = row[0];
    first + row[1..].iter().map(|v| v - first).sum::<f64>() / row.len() as f64
}

pub fn final_score(s0: f64, s1: f64) -> f64 {
    s0 * s1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub ids: ModelParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = ModelParams::init(&cfg, &mut params, &mut rng);
        Ok(Model { cfg, params, ids })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let ids = ModelParams::find(&cfg, &params)?;
        Ok(Model { cfg, params, ids })
    }

    /// Records the whole network for a sorted, non-empty sequence.
    pub fn record(
        &self,
        g: &mut Graph,
        seq: &[&ScoredProposal],
        img: ImageSize,
    ) -> Result<ForwardVars> {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty candidate sequence".into()));
        }
        let mp = &self.ids;
        let f_l = embed_sequence(g, seq, img, &mp.embed)?;
        let (f_m, finals) = mp.encode(g, f_l)?;
        let f_h = mp.decode(g, f_l, finals)?;
        let (s_a, f_glob) = mp.global_attention(g, f_m, f_h);
        let (f_z, f_v, f_t, f_c) = mp.context_gate(g, f_l, f_h, f_glob);
        let s1 = mp.decide(g, f_c);
        Ok(ForwardVars {
            f_l,
            f_m,
            f_h,
            s_a,
            f_glob,
            f_z,
            f_v,
            f_t,
            f_c,
            s1,
        })
    }

    pub fn forward_trace(&self, cands: &[ScoredProposal], img: ImageSize) -> Result<ForwardTrace> {
        let sorted = sort_candidates(cands, self.cfg.cap);
        let seq: Vec<&ScoredProposal> = sorted.order.iter().map(|&i| &cands[i]).collect();
        let mut g = Graph::new(&self.params);
        let v = self.record(&mut g, &seq, img)?;
        let t = |var| g.value(var).clone();
        Ok(ForwardTrace {
            order: sorted.order.clone(),
            f_l: t(v.f_l),
            f_m: t(v.f_m),
            f_h: t(v.f_h),
            s_a: t(v.s_a),
            f_glob: t(v.f_glob),
            f_z: t(v.f_z),
            f_v: t(v.f_v),
            f_t: t(v.f_t),
            f_c: t(v.f_c),
            s1: t(v.s1),
        })
    }

    /// Head-averaged keep probability for each candidate, in input order.
    /// Candidates cut by the sequence cap get 0.
    pub fn forward(&self, cands: &[ScoredProposal], img: ImageSize) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..cands.len()).collect();
        self.forward_subset(cands, &all, img)
    }

    /// Head-averaged, clamped s1 for `pool[members[k]]`, returned in member
    /// order. Members past the length cap get 0.
    pub fn forward_subset(
        &self,
        pool: &[ScoredProposal],
        members: &[usize],
        img: ImageSize,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; members.len()];
        if members.is_empty() {
            return Ok(out);
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| canonical_cmp(&pool[members[a]], &pool[members[b]]));
        order.truncate(self.cfg.cap);
        let seq: Vec<&ScoredProposal> = order.iter().map(|&k| &pool[members[k]]).collect();
        let mut g = Graph::new(&self.params);
        let v = self.record(&mut g, &seq, img)?;
        let s1 = g.value(v.s1);
        for (row, &k) in order.iter().enumerate() {
            out[k] = head_mean(s1.row_slice(row)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        }
        Ok(out)
    }

    pub fn checkpoint_bytes(&self, extra: &[(String, String)]) -> Vec<u8> {
        let mut meta = self.cfg.to_meta();
        meta.extend_from_slice(extra);
        checkpoint::encode(&meta, &self.params)
    }

    pub fn save(&self, path: &std::path::Path, extra: &[(String, String)]) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(extra)).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, returning the model and any extra metadata.
    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<(String, String)>)> {
        let (meta, params) = checkpoint::load(path)?;
        let cfg = ModelConfig::from_meta(&meta)?;
        let model = Model::from_params(cfg, params)?;
        Ok((model, meta))
    }
}

/// Sizes used by [`composed_grad_check`].
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d_a: 6,
        d_l: 8,
        d_m: 16,
        d_r: 4,
        d_att: 16,
        heads: vec![0.5, 0.7],
        cap: 50,
    }
}

/// Finite-difference check of the full forward pass on six random candidates
/// under a weighted BCE loss.
///
/// Weights are drawn from U(-0.6, 0.6) rather than the training init: at the
/// training init some attention gradients sit near 1e-9, below what central
/// differences resolve in f64.
pub fn composed_grad_check(seed: u64, eps: f64, tol: f64) -> Result<crate::numcore::GradCheckReport> {
    use rand::Rng;
    let cfg = grad_check_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    let img = ImageSize::new(200.0, 150.0)?;
    let n = 6;
    let cands: Vec<ScoredProposal> = (0..n)
        .map(|id| {
            let x = rng.random_range(0.0..150.0);
            let y = rng.random_range(0.0..100.0);
            let w = rng.random_range(5.0..50.0);
            let h = rng.random_range(5.0..50.0);
            ScoredProposal {
                bbox: crate::geometry::BBox::new(x, y, x + w, y + h),
                class_id: 0,
                s0: rng.random_range(0.0..1.0),
                feat: (0..cfg.d_a).map(|_| rng.random_range(-1.0..1.0)).collect(),
                id,
            }
        })
        .collect();
    let sorted = sort_candidates(&cands, cfg.cap);
    let seq: Vec<&ScoredProposal> = sorted.order.iter().map(|&i| &cands[i]).collect();
    let h = cfg.num_heads();
    let targets = Tensor::new(
        &[n, h],
        (0..n * h).map(|_| f64::from(rng.random_bool(0.4))).collect(),
    );
    crate::numcore::grad_check(
        &model.params,
        |g| {
            let v = model
                .record(g, &seq, img)
                .expect("grad-check sequence is non-empty");
            g.weighted_bce(v.s1, targets.clone(), 2.0)
        },
        eps,
        tol,
        12,
    )
}

#[cfg(test)]
mod tests;

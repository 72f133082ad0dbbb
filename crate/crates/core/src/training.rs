//! Label assignment, loss, learning-rate schedule and the two-stage trainer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::model::{final_score, Model, ModelConfig};
use crate::numcore::{sgd_step, Graph, OptState, ParamSet, Tensor};
use crate::suppression::{canonical_cmp, nms, score_select, GroundTruth, ScoredProposal};
use crate::synthdata::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    I,
    II,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            other => Err(Error::InvalidInput(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    /// Stage I admits candidates with `s0 >= score_gate`; Stage II admits
    /// candidates whose Stage-I final score exceeds it.
    pub score_gate: f64,
    pub pos_weight: f64,
    /// IoU threshold of the NMS run that produces Stage-I targets.
    pub nms_thresh: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied to `lr` for the final sixth of the epochs.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        StageConfig {
            stage: Stage::I,
            score_gate: 0.01,
            pos_weight: 4.0,
            nms_thresh: 0.6,
            epochs: 12,
            lr: 0.01,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    pub fn stage2() -> Self {
        StageConfig {
            stage: Stage::II,
            pos_weight: 2.0,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| match self.stage {
            Stage::I => format!("stage1.{k}"),
            Stage::II => format!("stage2.{k}"),
        };
        if !(0.0..=1.0).contains(&self.score_gate) {
            return Err(Error::config(key("score_gate"), "must lie in [0, 1]"));
        }
        if !(self.pos_weight >= 1.0 && self.pos_weight.is_finite()) {
            return Err(Error::config(key("pos_weight"), "must be >= 1"));
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh < 1.0) {
            return Err(Error::config(key("nms_thresh"), "must lie in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(key("lr"), "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(key("lr_decay"), "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(key("momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(key("weight_decay"), "must be >= 0"));
        }
        Ok(())
    }

    /// Number of leading epochs trained at the full rate: ten twelfths of the
    /// total, rounded.
    pub fn high_lr_epochs(&self) -> usize {
        ((self.epochs * 10) as f64 / 12.0).round() as usize
    }
}

pub fn lr_schedule(cfg: &StageConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} beyond configured total {}",
            cfg.epochs
        )));
    }
    Ok(if epoch < cfg.high_lr_epochs() {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_decay
    })
}

/// Single-column targets: 1 for candidates kept by NMS at `thresh`.
pub fn assign_labels_stage1(cands: &[ScoredProposal], thresh: f64) -> Tensor {
    let mut y = Tensor::zeros(&[cands.len(), 1]);
    for i in nms(cands, thresh) {
        y.data_mut()[i] = 1.0;
    }
    y
}

/// One column per IoU threshold in `etas`. In each column every ground truth
/// marks at most one candidate: the highest-scored one whose IoU exceeds the
/// threshold and which no better-scored ground truth has claimed.
pub fn assign_labels_stage2(cands: &[ScoredProposal], gts: &[GroundTruth], etas: &[f64]) -> Tensor {
    let h = etas.len();
    let mut y = Tensor::zeros(&[cands.len(), h]);
    for (col, &eta) in etas.iter().enumerate() {
        for (_, c) in score_select(cands, gts, eta, true) {
            y.data_mut()[c * h + col] = 1.0;
        }
    }
    y
}

/// Mean weighted binary cross-entropy, evaluated outside the graph.
pub fn weighted_bce(probs: &Tensor, targets: &Tensor, pos_weight: f64) -> f64 {
    let empty = ParamSet::new();
    let mut g = Graph::new(&empty);
    let p = g.input(probs.clone());
    let loss = g.weighted_bce(p, targets.clone(), pos_weight);
    g.value(loss).item()
}

/// Candidate indices of one scene grouped by class, ascending class id.
pub fn class_groups(props: &[ScoredProposal]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in props.iter().enumerate() {
        groups.entry(p.class_id).or_default().push(i);
    }
    groups
}

/// One (image, class) training sequence. `members` index the scene's
/// proposals in canonical order, truncated to the model's length cap.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub stage: Stage,
    pub scene: usize,
    pub members: Vec<usize>,
    pub labels: Tensor,
}

fn sorted_members(props: &[ScoredProposal], mut members: Vec<usize>, cap: usize) -> Vec<usize> {
    members.sort_by(|&a, &b| canonical_cmp(&props[a], &props[b]));
    members.truncate(cap);
    members
}

fn gather(props: &[ScoredProposal], members: &[usize]) -> Vec<ScoredProposal> {
    members.iter().map(|&i| props[i].clone()).collect()
}

pub fn stage1_sequences(scenes: &[Scene], stage: &StageConfig, cap: usize) -> Vec<LabeledSequence> {
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (_, idx) in class_groups(&scene.props) {
            let gated: Vec<usize> = idx
                .into_iter()
                .filter(|&i| scene.props[i].s0 >= stage.score_gate)
                .collect();
            if gated.is_empty() {
                continue;
            }
            let members = sorted_members(&scene.props, gated, cap);
            let labels = assign_labels_stage1(&gather(&scene.props, &members), stage.nms_thresh);
            out.push(LabeledSequence {
                stage: Stage::I,
                scene: si,
                members,
                labels,
            });
        }
    }
    out
}

/// Two-stage inference. Stage I scores candidates with `s0 >= gate1`; those
/// whose final Stage-I score exceeds `gate2` go on to Stage II.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub stage1: Model,
    pub stage2: Option<Model>,
    pub gate1: f64,
    pub gate2: f64,
}

impl Cascade {
    /// Stage-I final scores for one class group (0 where gated out).
    pub fn stage1_scores(&self, props: &[ScoredProposal], members: &[usize], img: ImageSize) -> Result<Vec<f64>> {
        let gated: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| props[i].s0 >= self.gate1)
            .collect();
        let s1 = self.stage1.forward_subset(props, &gated, img)?;
        let mut out = vec![0.0; members.len()];
        let pos: BTreeMap<usize, usize> = members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        for (&i, s) in gated.iter().zip(s1) {
            out[pos[&i]] = final_score(props[i].s0, s);
        }
        Ok(out)
    }

    /// Members of a class group that pass into Stage II.
    pub fn survivors(&self, props: &[ScoredProposal], members: &[usize], img: ImageSize) -> Result<Vec<usize>> {
        let s = self.stage1_scores(props, members, img)?;
        Ok(members
            .iter()
            .zip(s)
            .filter(|&(_, v)| v > self.gate2)
            .map(|(&i, _)| i)
            .collect())
    }

    /// Final score of every proposal in a scene. Without a Stage-II model
    /// this is the Stage-I final score.
    pub fn score_scene(&self, scene: &Scene) -> Result<Vec<f64>> {
        let mut out = vec![0.0; scene.props.len()];
        for (_, members) in class_groups(&scene.props) {
            match &self.stage2 {
                None => {
                    let s = self.stage1_scores(&scene.props, &members, scene.image)?;
                    for (&i, v) in members.iter().zip(s) {
                        out[i] = v;
                    }
                }
                Some(m2) => {
                    let surv = self.survivors(&scene.props, &members, scene.image)?;
                    let s1 = m2.forward_subset(&scene.props, &surv, scene.image)?;
                    for (&i, v) in surv.iter().zip(s1) {
                        out[i] = final_score(scene.props[i].s0, v);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Stage-II sequences: Stage-I survivors labelled against ground truth, one
/// column per threshold in `etas`.
pub fn stage2_sequences(
    scenes: &[Scene],
    gate: &Cascade,
    etas: &[f64],
    cap: usize,
) -> Result<Vec<LabeledSequence>> {
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (class, members) in class_groups(&scene.props) {
            let surv = gate.survivors(&scene.props, &members, scene.image)?;
            if surv.is_empty() {
                continue;
            }
            let members = sorted_members(&scene.props, surv, cap);
            let gts: Vec<GroundTruth> = scene
                .gts
                .iter()
                .filter(|g| g.class_id == class)
                .cloned()
                .collect();
            let labels = assign_labels_stage2(&gather(&scene.props, &members), &gts, etas);
            out.push(LabeledSequence {
                stage: Stage::II,
                scene: si,
                members,
                labels,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<EpochLoss>,
}

/// Per-sequence SGD over `seqs` starting from `model`. Sequence order is
/// reshuffled every epoch from `seed`.
pub fn fit(
    mut model: Model,
    scenes: &[Scene],
    seqs: &[LabeledSequence],
    stage: &StageConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    stage.validate()?;
    if stage.epochs > 0 && seqs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stage {} has no training sequences",
            stage.stage
        )));
    }
    let mut opt = OptState::new(&model.params, stage.lr, stage.momentum, stage.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        opt.lr = lr_schedule(stage, epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let seq = &seqs[k];
            let scene = &scenes[seq.scene];
            let cands: Vec<&ScoredProposal> = seq.members.iter().map(|&i| &scene.props[i]).collect();
            let grads = {
                let mut g = Graph::new(&model.params);
                let v = model.record(&mut g, &cands, scene.image)?;
                let loss = g.weighted_bce(v.s1, seq.labels.clone(), stage.pos_weight);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, loss: value });
                }
                total += value;
                g.backward(loss)?
            };
            model.params.accumulate(&grads);
            sgd_step(&mut model.params, &mut opt);
        }
        let mean_loss = total / seqs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        losses.push(EpochLoss {
            epoch,
            mean_loss,
            lr: opt.lr,
        });
    }
    Ok(TrainOutcome { model, losses })
}

/// Model configuration used for Stage I: a single decision head.
pub fn stage1_model_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        heads: vec![cfg.heads[0]],
        ..cfg.clone()
    }
}

/// Trains one stage from a fresh initialisation. Stage II needs the Stage-I
/// model that gates its inputs.
pub fn train_stage(
    scenes: &[Scene],
    stage: &StageConfig,
    model_cfg: &ModelConfig,
    seed: u64,
    stage1: Option<&Cascade>,
) -> Result<TrainOutcome> {
    match stage.stage {
        Stage::I => {
            let cfg = stage1_model_config(model_cfg);
            let seqs = stage1_sequences(scenes, stage, cfg.cap);
            fit(Model::new(cfg, seed)?, scenes, &seqs, stage, seed)
        }
        Stage::II => {
            let gate = stage1.ok_or_else(|| {
                Error::InvalidInput("stage II training needs a stage I model".into())
            })?;
            let seqs = stage2_sequences(scenes, gate, &model_cfg.heads, model_cfg.cap)?;
            fit(Model::new(model_cfg.clone(), seed)?, scenes, &seqs, stage, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
    pub gate1: f64,
    pub gate2: f64,
    /// Candidates admitted to Stage I training.
    pub stage1_inputs: usize,
    /// Stage-I survivors admitted to Stage II training.
    pub stage2_inputs: usize,
}

impl PipelineOutcome {
    pub fn cascade(&self) -> Cascade {
        Cascade {
            stage1: self.stage1.model.clone(),
            stage2: Some(self.stage2.model.clone()),
            gate1: self.gate1,
            gate2: self.gate2,
        }
    }
}

pub fn stage1_cascade(model: Model, cfg: &PipelineConfig) -> Cascade {
    Cascade {
        stage1: model,
        stage2: None,
        gate1: cfg.stage1.score_gate,
        gate2: cfg.stage2.score_gate,
    }
}

/// Sequential training: Stage I on NMS targets, then Stage II on the
/// Stage-I survivors with ground-truth targets.
pub fn train_pipeline(scenes: &[Scene], cfg: &PipelineConfig, seed: u64) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let s1cfg = stage1_model_config(&cfg.model);
    let seqs1 = stage1_sequences(scenes, &cfg.stage1, s1cfg.cap);
    let stage1 = fit(Model::new(s1cfg, seed)?, scenes, &seqs1, &cfg.stage1, seed)?;
    let gate = stage1_cascade(stage1.model.clone(), cfg);
    let seqs2 = stage2_sequences(scenes, &gate, &cfg.model.heads, cfg.model.cap)?;
    let seed2 = seed.wrapping_add(1);
    let stage2 = fit(Model::new(cfg.model.clone(), seed2)?, scenes, &seqs2, &cfg.stage2, seed2)?;
    Ok(PipelineOutcome {
        stage1,
        stage2,
        gate1: cfg.stage1.score_gate,
        gate2: cfg.stage2.score_gate,
        stage1_inputs: seqs1.iter().map(|s| s.members.len()).sum(),
        stage2_inputs: seqs2.iter().map(|s| s.members.len()).sum(),
    })
}

pub fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "mean_loss", "lr"])
        .map_err(|e| csv_err(path, e))?;
    for l in losses {
        w.write_record([l.epoch.to_string(), l.mean_loss.to_string(), l.lr.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("csv {}: {other:?}", path.display())),
    }
}

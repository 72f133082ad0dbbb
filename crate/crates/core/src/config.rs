//! Run configuration as a plain `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! unparsable values are configuration errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::Method;
use crate::model::ModelConfig;
use crate::suppression::{SoftNmsMethod, SoftNmsParams};
use crate::synthdata::SynthConfig;
use crate::training::{PipelineConfig, StageConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub nms_thresh: f64,
    pub softnms: SoftNmsParams,
    pub vote_thresh: f64,
    pub oracle_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_thresh: 0.6,
            softnms: SoftNmsParams::default(),
            vote_thresh: 0.5,
            oracle_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Fraction of generated scenes assigned to the training split.
    pub train_fraction: f64,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            train_fraction: 0.8,
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect()
}

fn set_stage(stage: &mut StageConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "score_gate" => stage.score_gate = parse(key, value)?,
        "pos_weight" => stage.pos_weight = parse(key, value)?,
        "nms_thresh" => stage.nms_thresh = parse(key, value)?,
        "epochs" => stage.epochs = parse(key, value)?,
        "lr" => stage.lr = parse(key, value)?,
        "lr_decay" => stage.lr_decay = parse(key, value)?,
        "momentum" => stage.momentum = parse(key, value)?,
        "weight_decay" => stage.weight_decay = parse(key, value)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

fn stage_entries(prefix: &str, s: &StageConfig, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("score_gate", s.score_gate.to_string()),
        ("pos_weight", s.pos_weight.to_string()),
        ("nms_thresh", s.nms_thresh.to_string()),
        ("epochs", s.epochs.to_string()),
        ("lr", s.lr.to_string()),
        ("lr_decay", s.lr_decay.to_string()),
        ("momentum", s.momentum.to_string()),
        ("weight_decay", s.weight_decay.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let s = &mut self.synth;
        let m = &mut self.pipeline.model;
        match (section, field) {
            ("", "seed") => self.seed = parse(key, value)?,
            ("", "train_fraction") => self.train_fraction = parse(key, value)?,
            ("synth", "classes") => s.classes = parse(key, value)?,
            ("synth", "objects_min") => s.objects_min = parse(key, value)?,
            ("synth", "objects_max") => s.objects_max = parse(key, value)?,
            ("synth", "props_min") => s.props_min = parse(key, value)?,
            ("synth", "props_max") => s.props_max = parse(key, value)?,
            ("synth", "image_w") => s.image_w = parse(key, value)?,
            ("synth", "image_h") => s.image_h = parse(key, value)?,
            ("synth", "object_size_min") => s.object_size_min = parse(key, value)?,
            ("synth", "object_size_max") => s.object_size_max = parse(key, value)?,
            ("synth", "jitter") => s.jitter = parse(key, value)?,
            ("synth", "score_slope") => s.score_slope = parse(key, value)?,
            ("synth", "score_offset") => s.score_offset = parse(key, value)?,
            ("synth", "score_noise") => s.score_noise = parse(key, value)?,
            ("synth", "feat_dim") => s.feat_dim = parse(key, value)?,
            ("synth", "feat_noise") => s.feat_noise = parse(key, value)?,
            ("synth", "background_rate") => s.background_rate = parse(key, value)?,
            ("model", "d_a") => m.d_a = parse(key, value)?,
            ("model", "d_l") => m.d_l = parse(key, value)?,
            ("model", "d_m") => m.d_m = parse(key, value)?,
            ("model", "d_r") => m.d_r = parse(key, value)?,
            ("model", "d_att") => m.d_att = parse(key, value)?,
            ("model", "heads") => m.heads = parse_list(key, value)?,
            ("model", "cap") => m.cap = parse(key, value)?,
            ("stage1", f) => set_stage(&mut self.pipeline.stage1, key, f, value)?,
            ("stage2", f) => set_stage(&mut self.pipeline.stage2, key, f, value)?,
            ("eval", "nms_thresh") => self.eval.nms_thresh = parse(key, value)?,
            ("eval", "vote_thresh") => self.eval.vote_thresh = parse(key, value)?,
            ("eval", "oracle_iou") => self.eval.oracle_iou = parse(key, value)?,
            ("eval", "softnms_floor") => self.eval.softnms.score_floor = parse(key, value)?,
            ("eval", "softnms_method") => {
                self.eval.softnms.method = match value {
                    "linear" => SoftNmsMethod::Linear { thresh: 0.5 },
                    "gaussian" => SoftNmsMethod::Gaussian { sigma: 0.5 },
                    _ => return Err(Error::config(key, "expected `linear` or `gaussian`")),
                }
            }
            ("eval", "softnms_param") => {
                let v: f64 = parse(key, value)?;
                match &mut self.eval.softnms.method {
                    SoftNmsMethod::Linear { thresh } => *thresh = v,
                    SoftNmsMethod::Gaussian { sigma } => *sigma = v,
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.synth;
        let m = &self.pipeline.model;
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("synth.classes", s.classes.to_string()),
            ("synth.objects_min", s.objects_min.to_string()),
            ("synth.objects_max", s.objects_max.to_string()),
            ("synth.props_min", s.props_min.to_string()),
            ("synth.props_max", s.props_max.to_string()),
            ("synth.image_w", s.image_w.to_string()),
            ("synth.image_h", s.image_h.to_string()),
            ("synth.object_size_min", s.object_size_min.to_string()),
            ("synth.object_size_max", s.object_size_max.to_string()),
            ("synth.jitter", s.jitter.to_string()),
            ("synth.score_slope", s.score_slope.to_string()),
            ("synth.score_offset", s.score_offset.to_string()),
            ("synth.score_noise", s.score_noise.to_string()),
            ("synth.feat_dim", s.feat_dim.to_string()),
            ("synth.feat_noise", s.feat_noise.to_string()),
            ("synth.background_rate", s.background_rate.to_string()),
            ("model.d_a", m.d_a.to_string()),
            ("model.d_l", m.d_l.to_string()),
            ("model.d_m", m.d_m.to_string()),
            ("model.d_r", m.d_r.to_string()),
            ("model.d_att", m.d_att.to_string()),
            (
                "model.heads",
                m.heads.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("model.cap", m.cap.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        stage_entries("stage1", &self.pipeline.stage1, &mut out);
        stage_entries("stage2", &self.pipeline.stage2, &mut out);
        let (method, param) = match self.eval.softnms.method {
            SoftNmsMethod::Linear { thresh } => ("linear", thresh),
            SoftNmsMethod::Gaussian { sigma } => ("gaussian", sigma),
        };
        for (k, v) in [
            ("eval.nms_thresh", self.eval.nms_thresh.to_string()),
            ("eval.vote_thresh", self.eval.vote_thresh.to_string()),
            ("eval.oracle_iou", self.eval.oracle_iou.to_string()),
            ("eval.softnms_method", method.to_string()),
            ("eval.softnms_param", param.to_string()),
            ("eval.softnms_floor", self.eval.softnms.score_floor.to_string()),
        ] {
            out.push((k.to_string(), v));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Configuration from an optional file, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pipeline.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        for (key, v) in [
            ("eval.nms_thresh", self.eval.nms_thresh),
            ("eval.vote_thresh", self.eval.vote_thresh),
            ("eval.oracle_iou", self.eval.oracle_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, "must lie in (0, 1)"));
            }
        }
        if self.pipeline.model.d_a != self.synth.feat_dim {
            return Err(Error::config(
                "model.d_a",
                format!("must equal synth.feat_dim ({})", self.synth.feat_dim),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }

    /// A classical or oracle method configured from the `eval.*` keys.
    pub fn method(&self, name: &str) -> Result<Method> {
        let m: Method = name.parse()?;
        Ok(match m {
            Method::Nms { .. } => Method::Nms {
                thresh: self.eval.nms_thresh,
            },
            Method::SoftNms(_) => Method::SoftNms(self.eval.softnms),
            Method::BoxVote { .. } => Method::BoxVote {
                nms_thresh: self.eval.nms_thresh,
                vote_thresh: self.eval.vote_thresh,
            },
            Method::ScoreOracle { .. } => Method::ScoreOracle {
                iou_thresh: self.eval.oracle_iou,
            },
            other => other,
        })
    }
}

/// Desk-scale model sizes used by the acceptance runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        d_a: 64,
        d_l: 16,
        d_m: 32,
        d_r: 8,
        d_att: 32,
        heads: vec![0.5],
        cap: 500,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_entry_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(&k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn overrides_apply() {
        let text = "# comment\nseed = 11\n\nmodel.d_l = 16\nmodel.d_m = 32\nmodel.heads = 0.5, 0.7\nstage2.epochs = 3\neval.softnms_method = gaussian\neval.softnms_param = 0.3\n";
        let cfg = RunConfig::parse_text(text).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.pipeline.model.d_l, 16);
        assert_eq!(cfg.pipeline.model.heads, vec![0.5, 0.7]);
        assert_eq!(cfg.pipeline.stage2.epochs, 3);
        assert_eq!(cfg.eval.softnms.method, SoftNmsMethod::Gaussian { sigma: 0.3 });
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::parse_text("model.depth = 3\n").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("model.depth"));
        assert!(RunConfig::parse_text("stage1.warmup = 3\n").unwrap_err().is_usage());
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(RunConfig::parse_text("seed = x\n").unwrap_err().is_usage());
        assert!(RunConfig::parse_text("just words\n").unwrap_err().is_usage());
        assert!(RunConfig::parse_text("model.d_m = 7\n").unwrap_err().is_usage());
        assert!(RunConfig::parse_text("synth.feat_dim = 8\n").unwrap_err().is_usage());
    }

    #[test]
    fn methods_take_eval_settings() {
        let cfg = RunConfig::parse_text("eval.nms_thresh = 0.7\n").unwrap();
        assert_eq!(cfg.method("nms").unwrap(), Method::Nms { thresh: 0.7 });
        assert!(cfg.method("bogus").is_err());
    }
}

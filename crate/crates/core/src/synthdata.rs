//! Synthetic detection scenes: ground-truth boxes with noisy proposal clouds.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageSize};
use crate::suppression::{GroundTruth, ScoredProposal};

pub const FORMAT_TAG: &str = "seqdedup-scenes-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image: ImageSize,
    pub gts: Vec<GroundTruth>,
    pub props: Vec<ScoredProposal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub props_min: usize,
    pub props_max: usize,
    pub image_w: f64,
    pub image_h: f64,
    pub object_size_min: f64,
    pub object_size_max: f64,
    /// Standard deviation of each corner offset, as a fraction of the object size.
    pub jitter: f64,
    pub score_slope: f64,
    pub score_offset: f64,
    pub score_noise: f64,
    pub feat_dim: usize,
    pub feat_noise: f64,
    /// Fraction of all proposals that are background boxes.
    pub background_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            objects_min: 2,
            objects_max: 6,
            props_min: 10,
            props_max: 30,
            image_w: 640.0,
            image_h: 480.0,
            object_size_min: 40.0,
            object_size_max: 200.0,
            jitter: 0.2,
            score_slope: 1.0,
            score_offset: -0.1,
            score_noise: 0.1,
            feat_dim: 64,
            feat_noise: 0.5,
            background_rate: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, lo: usize, hi: usize| {
            if lo == 0 || lo > hi {
                Err(Error::config(key, format!("empty or zero range {lo}..={hi}")))
            } else {
                Ok(())
            }
        };
        if self.classes == 0 {
            return Err(Error::config("synth.classes", "must be positive"));
        }
        range("synth.objects_min", self.objects_min, self.objects_max)?;
        range("synth.props_min", self.props_min, self.props_max)?;
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::config("synth.image_w", "image extent must be positive"));
        }
        if !(self.object_size_min >= 2.0
            && self.object_size_min <= self.object_size_max
            && self.object_size_max <= self.image_w.min(self.image_h))
        {
            return Err(Error::config(
                "synth.object_size_min",
                "need 2 <= min <= max <= image extent",
            ));
        }
        for (key, v) in [
            ("synth.jitter", self.jitter),
            ("synth.score_noise", self.score_noise),
            ("synth.feat_noise", self.feat_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.background_rate) {
            return Err(Error::config("synth.background_rate", "must lie in [0, 1)"));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("synth.feat_dim", "must be positive"));
        }
        Ok(())
    }

    fn score(&self, overlap: f64, rng: &mut impl Rng) -> f64 {
        let noise: f64 = if self.score_noise > 0.0 {
            self.score_noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (self.score_slope * overlap + self.score_offset + noise).clamp(0.0, 1.0)
    }
}

fn gaussian_vec(n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Clips to the image and keeps at least one pixel of extent.
fn clip(b: BBox, img: ImageSize) -> BBox {
    let x1 = b.x1.clamp(0.0, img.w - 1.0);
    let y1 = b.y1.clamp(0.0, img.h - 1.0);
    let x2 = b.x2.clamp(x1 + 1.0, img.w);
    let y2 = b.y2.clamp(y1 + 1.0, img.h);
    BBox::new(x1, y1, x2, y2)
}

fn best_iou(b: &BBox, gts: &[GroundTruth]) -> f64 {
    gts.iter().map(|g| iou(b, &g.bbox)).fold(0.0, f64::max)
}

pub fn generate_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> Scene {
    let img = ImageSize {
        w: cfg.image_w,
        h: cfg.image_h,
    };
    let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut gts = Vec::with_capacity(n_obj);
    let mut latents = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let w = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
        let h = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
        let x1 = rng.random_range(0.0..=img.w - w);
        let y1 = rng.random_range(0.0..=img.h - h);
        gts.push(GroundTruth {
            bbox: BBox::new(x1, y1, x1 + w, y1 + h),
            class_id: rng.random_range(0..cfg.classes),
        });
        latents.push(gaussian_vec(cfg.feat_dim, 1.0, rng));
    }

    let mut props = Vec::new();
    for (gt, latent) in gts.iter().zip(&latents) {
        let n = rng.random_range(cfg.props_min..=cfg.props_max);
        let (w, h) = (gt.bbox.width(), gt.bbox.height());
        for _ in 0..n {
            let d = gaussian_vec(4, cfg.jitter, rng);
            let b = clip(
                BBox::new(
                    gt.bbox.x1 + d[0] * w,
                    gt.bbox.y1 + d[1] * h,
                    gt.bbox.x2 + d[2] * w,
                    gt.bbox.y2 + d[3] * h,
                ),
                img,
            );
            let s0 = cfg.score(iou(&b, &gt.bbox), rng);
            let feat = latent
                .iter()
                .zip(gaussian_vec(cfg.feat_dim, cfg.feat_noise, rng))
                .map(|(a, e)| a + e)
                .collect();
            props.push(ScoredProposal {
                bbox: b,
                class_id: gt.class_id,
                s0,
                feat,
                id: 0,
            });
        }
    }

    // Background count such that it makes up `background_rate` of the total.
    let n_bg = (props.len() as f64 * cfg.background_rate / (1.0 - cfg.background_rate)).round()
        as usize;
    for _ in 0..n_bg {
        let w = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
        let h = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
        let x1 = rng.random_range(0.0..=img.w - w);
        let y1 = rng.random_range(0.0..=img.h - h);
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        let s0 = cfg.score(best_iou(&b, &gts), rng);
        props.push(ScoredProposal {
            bbox: b,
            class_id: rng.random_range(0..cfg.classes),
            s0,
            feat: gaussian_vec(cfg.feat_dim, 1.0, rng),
            id: 0,
        });
    }
    for (i, p) in props.iter_mut().enumerate() {
        p.id = i;
    }
    Scene {
        image: img,
        gts,
        props,
    }
}

/// Generates `n` scenes; scene `i` draws from its own ChaCha stream so any
/// scene can be regenerated independently.
pub fn generate_dataset(cfg: &SynthConfig, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_scene(cfg, &mut rng)
        })
        .collect())
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Partitions scene indices `0..n` into groups whose sizes follow
/// `fractions`. Membership is decided by a seeded hash of the index, and each
/// group is returned in ascending index order.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(seed ^ mix64(i as u64)), i));
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut acc = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        let mut part = order[start..end.max(start)].to_vec();
        part.sort_unstable();
        out.push(part);
        start = end.max(start);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&Header {
        format: FORMAT_TAG.into(),
    })
    .expect("header serializes");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a scene file. The header line is required unless the file is empty.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if i == 0 {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(format!("bad header: {e}")))?;
            if h.format != FORMAT_TAG {
                return Err(Error::Version {
                    expected: FORMAT_TAG.into(),
                    found: h.format,
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        validate_scene(&scene).map_err(parse_err)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

fn validate_scene(s: &Scene) -> std::result::Result<(), String> {
    if !(s.image.w > 0.0 && s.image.h > 0.0) {
        return Err("image extent must be positive".into());
    }
    let bad_box = s
        .gts
        .iter()
        .map(|g| &g.bbox)
        .chain(s.props.iter().map(|p| &p.bbox))
        .any(|b| !b.is_valid() || b.area() <= 0.0);
    if bad_box {
        return Err("box with non-positive area".into());
    }
    if let Some(p) = s.props.iter().find(|p| !(0.0..=1.0).contains(&p.s0)) {
        return Err(format!("proposal {} score {} outside [0, 1]", p.id, p.s0));
    }
    Ok(())
}

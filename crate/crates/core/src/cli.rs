//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_cascade, evaluate_method, ground_truths, map_coco, oracle_methods, run_cascade,
    run_method, write_reports, Detection, RETAIN_FLOOR,
};
use crate::model::{composed_grad_check, Model};
use crate::numcore::op_grad_checks;
use crate::synthdata::{generate_dataset, load_scenes, save_scenes, split, Scene};
use crate::training::{train_pipeline, train_stage, write_loss_csv, Cascade, Stage, TrainOutcome};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "seqdedup", version, about = "Sequential-context duplicate removal for detection proposals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Nms,
    Softnms,
    Boxvote,
    NoRemoval,
    ScoreOracle,
    IouOracle,
    Model,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Nms => "nms",
            MethodArg::Softnms => "softnms",
            MethodArg::Boxvote => "boxvote",
            MethodArg::NoRemoval => "no-removal",
            MethodArg::ScoreOracle => "score-oracle",
            MethodArg::IouOracle => "iou-oracle",
            MethodArg::Model => "model",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a train/test split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
    },
    /// Train Stage I, Stage II, or both in sequence.
    Train {
        /// Scene file or a directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage-I checkpoint, required for `--stage II`.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
    },
    /// Evaluate one method on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Stage-I checkpoint, then optionally the Stage-II checkpoint.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// No removal, NMS and both oracles on the test split.
    OracleTable {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one scene's ground truth and selected boxes as SVG.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    seed: u64,
    config: &'a str,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Test,
    All,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the resolved configuration and the run manifest into `out`.
fn finish_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    write_file(&out.join(RESOLVED_FILE), cfg.to_text())?;
    let manifest = RunManifest {
        tool: "seqdedup",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        config: RESOLVED_FILE,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), text + "\n")
}

fn scenes_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(SCENES_FILE)
    } else {
        data.to_path_buf()
    }
}

/// Loads scenes, restricted to one side of the split when a split manifest
/// sits next to the scene file.
fn load_part(data: &Path, part: Part) -> Result<Vec<Scene>> {
    let path = scenes_path(data);
    let scenes = load_scenes(&path)?;
    if part == Part::All {
        return Ok(scenes);
    }
    let split_path = path.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE);
    if !split_path.exists() {
        return Ok(scenes);
    }
    let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: split_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let idx = match part {
        Part::Train => manifest.train,
        _ => manifest.test,
    };
    idx.into_iter()
        .map(|i| {
            scenes.get(i).cloned().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{} lists scene {i} but the data has {}",
                    split_path.display(),
                    scenes.len()
                ))
            })
        })
        .collect()
}

fn checkpoint_meta(stage: Stage, cfg: &RunConfig) -> Vec<(String, String)> {
    let gate = match stage {
        Stage::I => cfg.pipeline.stage1.score_gate,
        Stage::II => cfg.pipeline.stage2.score_gate,
    };
    vec![
        ("stage".into(), stage.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("score_gate".into(), gate.to_string()),
    ]
}

fn load_stage(path: &Path, want: Stage) -> Result<Model> {
    let (model, meta) = Model::load(path)?;
    if let Some((_, found)) = meta.iter().find(|(k, _)| k == "stage") {
        if *found != want.to_string() {
            return Err(Error::Checkpoint(format!(
                "{} holds a stage {found} model, expected stage {want}",
                path.display()
            )));
        }
    }
    Ok(model)
}

fn cascade_from(ckpts: &[PathBuf], cfg: &RunConfig) -> Result<Cascade> {
    let (first, rest) = ckpts
        .split_first()
        .ok_or_else(|| Error::Usage("method `model` needs --ckpt".into()))?;
    if rest.len() > 1 {
        return Err(Error::Usage("at most two --ckpt values".into()));
    }
    Ok(Cascade {
        stage1: load_stage(first, Stage::I)?,
        stage2: rest.first().map(|p| load_stage(p, Stage::II)).transpose()?,
        gate1: cfg.pipeline.stage1.score_gate,
        gate2: cfg.pipeline.stage2.score_gate,
    })
}

fn save_stage(out: &Path, stage: Stage, trained: &TrainOutcome, cfg: &RunConfig) -> Result<[String; 2]> {
    let (ckpt, loss) = match stage {
        Stage::I => ("stage1.ckpt", "loss_stage1.csv"),
        Stage::II => ("stage2.ckpt", "loss_stage2.csv"),
    };
    trained
        .model
        .save(&out.join(ckpt), &checkpoint_meta(stage, cfg))?;
    write_loss_csv(&out.join(loss), &trained.losses)?;
    Ok([ckpt.into(), loss.into()])
}

fn gen_data(config: Option<&Path>, out: &Path, n: usize) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    make_dir(out)?;
    let scenes = generate_dataset(&cfg.synth, n)?;
    save_scenes(&out.join(SCENES_FILE), &scenes)?;
    let parts = split(n, &[cfg.train_fraction, 1.0 - cfg.train_fraction], cfg.seed)?;
    let manifest = SplitManifest {
        seed: cfg.seed,
        train_fraction: cfg.train_fraction,
        train: parts[0].clone(),
        test: parts[1].clone(),
    };
    let text = serde_json::to_string(&manifest).expect("split serializes");
    write_file(&out.join(SPLIT_FILE), text + "\n")?;
    let inputs: Vec<&Path> = config.into_iter().collect();
    finish_run(out, "gen-data", &cfg, &inputs, &[SCENES_FILE, SPLIT_FILE])
}

fn train(data: &Path, stage: StageArg, config: Option<&Path>, out: &Path, stage1_ckpt: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    if stage == StageArg::II && stage1_ckpt.is_none() {
        return Err(Error::Usage(
            "--stage II needs --stage1-ckpt (or use --stage both)".into(),
        ));
    }
    let scenes = load_part(data, Part::Train)?;
    make_dir(out)?;
    let mut outputs = Vec::new();
    match stage {
        StageArg::Both => {
            let trained = train_pipeline(&scenes, &cfg.pipeline, cfg.seed)?;
            outputs.extend(save_stage(out, Stage::I, &trained.stage1, &cfg)?);
            outputs.extend(save_stage(out, Stage::II, &trained.stage2, &cfg)?);
            eprintln!(
                "stage I inputs {}, stage II inputs {}",
                trained.stage1_inputs, trained.stage2_inputs
            );
        }
        StageArg::I => {
            let trained = train_stage(&scenes, &cfg.pipeline.stage1, &cfg.pipeline.model, cfg.seed, None)?;
            outputs.extend(save_stage(out, Stage::I, &trained, &cfg)?);
        }
        StageArg::II => {
            let path = stage1_ckpt.expect("checked above");
            let gate = Cascade {
                stage1: load_stage(path, Stage::I)?,
                stage2: None,
                gate1: cfg.pipeline.stage1.score_gate,
                gate2: cfg.pipeline.stage2.score_gate,
            };
            let trained = train_stage(
                &scenes,
                &cfg.pipeline.stage2,
                &cfg.pipeline.model,
                cfg.seed.wrapping_add(1),
                Some(&gate),
            )?;
            outputs.extend(save_stage(out, Stage::II, &trained, &cfg)?);
        }
    }
    let mut inputs = vec![data];
    inputs.extend(config);
    inputs.extend(stage1_ckpt);
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish_run(out, "train", &cfg, &inputs, &names)
}

fn detections(method: MethodArg, scenes: &[Scene], ckpts: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Vec<Detection>>> {
    if method == MethodArg::Model {
        let cascade = cascade_from(ckpts, cfg)?;
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| run_cascade(&cascade, s, i))
            .collect()
    } else {
        let m = cfg.method(method.name())?;
        Ok(scenes
            .iter()
            .enumerate()
            .map(|(i, s)| run_method(&m, s, i))
            .collect())
    }
}

fn eval(data: &Path, method: MethodArg, ckpts: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let scenes = load_part(data, Part::Test)?;
    let report = if method == MethodArg::Model {
        evaluate_cascade(&cascade_from(ckpts, &cfg)?, &scenes)?
    } else {
        evaluate_method(&cfg.method(method.name())?, &scenes)
    };
    make_dir(out)?;
    write_reports(&out.join("report.csv"), &[(method.name().to_string(), report.clone())])?;
    println!(
        "{}: mAP {:.4} AP50 {:.4} AP75 {:.4} retained {:.2}",
        method.name(),
        report.map,
        report.ap50,
        report.ap75,
        report.mean_retained
    );
    let mut inputs = vec![data];
    inputs.extend(config);
    inputs.extend(ckpts.iter().map(PathBuf::as_path));
    finish_run(out, "eval", &cfg, &inputs, &["report.csv"])
}

fn oracle_table_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let scenes = load_part(data, Part::Test)?;
    let mut rows = Vec::new();
    for m in oracle_methods() {
        let m = cfg.method(m.name())?;
        let r = evaluate_method(&m, &scenes);
        println!("{}: mAP {:.4}", m.name(), r.map);
        rows.push((m.name().to_string(), r));
    }
    make_dir(out)?;
    write_reports(&out.join("oracle_table.csv"), &rows)?;
    let mut inputs = vec![data];
    inputs.extend(config);
    finish_run(out, "oracle-table", &cfg, &inputs, &["oracle_table.csv"])
}

fn grad_check_cmd(seeds: u64, out: Option<&Path>) -> Result<()> {
    let mut lines = String::new();
    let mut ok = true;
    for (name, report) in op_grad_checks(0, 1e-4)? {
        ok &= report.passed;
        writeln!(lines, "op {name}: {report}").expect("writing to a string");
    }
    for seed in 0..seeds {
        let report = composed_grad_check(seed, 1e-4, 1e-4)?;
        ok &= report.passed;
        writeln!(lines, "seed {seed}: {report}").expect("writing to a string");
    }
    print!("{lines}");
    if let Some(path) = out {
        write_file(path, &lines)?;
    }
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput("gradient check failed".into()))
    }
}

/// SVG with ground truth in green and selected boxes in red.
pub fn render_svg(scene: &Scene, selected: &[Detection]) -> String {
    let mut s = String::new();
    let (w, h) = (scene.image.w, scene.image.h);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("writing to a string");
    writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).expect("writing to a string");
    let mut rect = |b: &crate::geometry::BBox, color: &str, class: &str| {
        writeln!(
            s,
            r#"<rect class="{class}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            b.x1,
            b.y1,
            b.width(),
            b.height()
        )
        .expect("writing to a string");
    };
    for g in &scene.gts {
        rect(&g.bbox, "green", "gt");
    }
    for d in selected {
        rect(&d.bbox, "red", "det");
    }
    s.push_str("</svg>\n");
    s
}

fn render(data: &Path, index: usize, method: MethodArg, ckpts: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let scenes = load_part(data, Part::All)?;
    let scene = scenes.get(index).ok_or_else(|| {
        Error::InvalidInput(format!("scene {index} out of range (have {})", scenes.len()))
    })?;
    let one = std::slice::from_ref(scene);
    let dets: Vec<Detection> = detections(method, one, ckpts, &cfg)?
        .remove(0)
        .into_iter()
        .filter(|d| d.score > RETAIN_FLOOR)
        .collect();
    let report = map_coco(&dets, &ground_truths(one), 1);
    eprintln!("scene {index}: {} boxes kept, mAP {:.4}", dets.len(), report.map);
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    write_file(out, render_svg(scene, &dets))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, scenes } => gen_data(config.as_deref(), &out, scenes),
        Command::Train {
            data,
            stage,
            config,
            out,
            stage1_ckpt,
        } => train(&data, stage, config.as_deref(), &out, stage1_ckpt.as_deref()),
        Command::Eval {
            data,
            method,
            ckpt,
            config,
            out,
        } => eval(&data, method, &ckpt, config.as_deref(), &out),
        Command::OracleTable { data, config, out } => oracle_table_cmd(&data, config.as_deref(), &out),
        Command::GradCheck { seeds, out } => grad_check_cmd(seeds, out.as_deref()),
        Command::Render {
            data,
            scene,
            method,
            ckpt,
            config,
            out,
        } => render(&data, scene, method, &ckpt, config.as_deref(), &out),
    }
}

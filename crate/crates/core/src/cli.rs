//! Command-line front end. [`run`] parses arguments, dispatches one
//! subcommand and maps the outcome to an exit code: 0 success, 1 usage
//! error, 2 data error, 3 numeric error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, apply_pairs, dims2, KeyValue};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, SceneInput};
use crate::geo::{self, io as geo_io, Pose, TransformModel};
use crate::metrics::{self, chamfer_ap, extract_instances, Class, Instance, DEFAULT_THRESHOLDS_M};
use crate::synth::{self, BevRange, SceneSample, SceneSpec};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "satfuse", version, about = "Satellite-map fusion for HD map segmentation")]
pub struct Cli {
    /// Worker threads (falls back to SATFUSE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a world→pixel transform from landmark pairs.
    SolveAlign(SolveAlignArgs),
    /// Cut pose-oriented tiles from a georeferenced district raster.
    GenTiles(GenTilesArgs),
    /// Generate a synthetic split.
    GenSynth(GenSynthArgs),
    /// Train a fusion model on a synthetic split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a synthetic split.
    EvalCkpt(EvalCkptArgs),
    /// Score predicted class rasters against ground truth.
    Eval(EvalArgs),
    /// Time one fusion forward pass.
    BenchForward(BenchArgs),
    /// Write side-by-side panels: BEV input, satellite, prediction, ground truth.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SolveAlignArgs {
    /// Whitespace-separated `world_x world_y pixel_x pixel_y` per line.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, default_value = "similarity")]
    pub model: String,
    /// Also write the fit as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTilesArgs {
    /// District PNG with a `.json` georeferencing sidecar.
    #[arg(long)]
    pub raster: PathBuf,
    /// `x y yaw` per line (meters, radians), optionally preceded by an id.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "100x200")]
    pub res: String,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// key=value scene spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra `key=value` settings applied after the spec file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation split; periodic validation is skipped without it.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalCkptArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `60x30`, `60x60`, `120x60` or `all`.
    #[arg(long, default_value = "all")]
    pub range: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write predicted class rasters as `{id}.png` here.
    #[arg(long)]
    pub pred_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `{id}.png` class rasters.
    #[arg(long)]
    pub pred: PathBuf,
    /// A synthetic split directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Smallest connected component kept as an instance for Chamfer AP.
    #[arg(long, default_value_t = 3)]
    pub min_cells: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `HxWxC` of the BEV features.
    #[arg(long, default_value = "100x200x64")]
    pub shape: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples to render from the start of the split.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 8)]
    pub scale: u32,
}

/// Model and training settings from a key=value file plus overrides; flags
/// take precedence over the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: FusionConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: FusionConfig::desk_scale(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut rc = RunConfig::default();
        rc.apply(file, overrides)?;
        Ok(rc)
    }

    pub fn apply(&mut self, file: Option<&Path>, overrides: &[String]) -> Result<()> {
        let mut pairs = match file {
            Some(p) => config::read_pairs(p)?,
            None => Vec::new(),
        };
        pairs.extend(parse_overrides(overrides)?);
        apply_pairs(&pairs, &mut [&mut self.model as &mut dyn KeyValue, &mut self.train])?;
        self.model.validate()?;
        self.train.validate()
    }
}

fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {s:?}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Errors go to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("SATFUSE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // a pool may already exist when run is called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SolveAlign(a) => solve_align(&a),
        Command::GenTiles(a) => gen_tiles(&a),
        Command::GenSynth(a) => gen_synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::EvalCkpt(a) => eval_ckpt(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::BenchForward(a) => bench_forward(&a),
        Command::Render(a) => render(&a),
    }
}

fn number_rows(path: &Path, what: &str) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Format(format!("{what} file {} is empty", path.display())));
    }
    Ok(rows)
}

fn num(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad number {s:?} in {what}")))
}

fn solve_align(a: &SolveAlignArgs) -> Result<()> {
    let model = match a.model.as_str() {
        "similarity" => TransformModel::Similarity,
        "affine" => TransformModel::Affine,
        m => return Err(Error::Config(format!("unknown transform model {m:?}"))),
    };
    let (mut world, mut pixel) = (Vec::new(), Vec::new());
    for row in number_rows(&a.landmarks, "landmark")? {
        if row.len() != 4 {
            return Err(Error::Format(format!("landmark line needs 4 numbers, got {row:?}")));
        }
        let v: Vec<f64> = row.iter().map(|s| num(s, "landmarks")).collect::<Result<_>>()?;
        world.push([v[0], v[1]]);
        pixel.push([v[2], v[3]]);
    }
    let fit = geo::solve_landmark_transform_with(&world, &pixel, model)?;
    let json = serde_json::to_string_pretty(&fit)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::write(out, json)?;
    }
    Ok(())
}

fn gen_tiles(a: &GenTilesArgs) -> Result<()> {
    let res = dims2("res", &a.res)?;
    let district = geo_io::read_district(&a.raster)?;
    let transform = district.sidecar.transform()?;
    let transform_id = a
        .raster
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "district".into());
    let poses: Vec<(String, Pose)> = number_rows(&a.poses, "pose")?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let (id, nums) = match row.len() {
                3 => (format!("t{i:05}"), &row[..]),
                4 => (row[0].clone(), &row[1..]),
                _ => return Err(Error::Format(format!("pose line needs `[id] x y yaw`, got {row:?}"))),
            };
            let v: Vec<f64> = nums.iter().map(|s| num(s, "poses")).collect::<Result<_>>()?;
            Ok((id, Pose::new(v[0], v[1], v[2])))
        })
        .collect::<Result<_>>()?;
    let tiles: Vec<(String, geo::SatTile)> = poses
        .par_iter()
        .map(|(id, pose)| {
            let mut t = geo::extract_tile(&district.pixels, &transform, *pose, res)?;
            t.transform_id = transform_id.clone();
            Ok((id.clone(), t))
        })
        .collect::<Result<_>>()?;
    geo_io::write_tile_dataset(&a.out, &transform_id, &transform, &tiles)?;
    println!("wrote {} tiles to {}", tiles.len(), a.out.display());
    Ok(())
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut spec = SceneSpec::default();
    let mut pairs = match &a.spec {
        Some(p) => config::read_pairs(p)?,
        None => Vec::new(),
    };
    pairs.extend(parse_overrides(&a.set)?);
    apply_pairs(&pairs, &mut [&mut spec])?;
    let m = synth::write_split(&spec, a.n, &a.out)?;
    println!("wrote {} samples to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn check_grid(cfg: &FusionConfig, s: &SceneSample) -> Result<()> {
    let shape = s.f_bev.shape();
    if shape != [cfg.height, cfg.width, cfg.channels] {
        return Err(Error::Format(format!(
            "data features are {shape:?}, model config expects [{}, {}, {}]",
            cfg.height, cfg.width, cfg.channels
        )));
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let rc = RunConfig::load(a.config.as_deref(), &a.set)?;
    let (_, samples) = synth::read_split(&a.data)?;
    let val = match &a.val {
        Some(v) => synth::read_split(v)?.1,
        None => Vec::new(),
    };
    for s in samples.iter().chain(&val) {
        check_grid(&rc.model, s)?;
    }
    std::fs::create_dir_all(&a.out)?;
    let mut model = FusionModel::<f32>::new(rc.model.clone(), rc.train.seed)?;
    let mut log = String::new();
    let outcome = train::train(&mut model, &rc.train, &samples, &val, |r| {
        let line = r.to_json_line();
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    std::fs::write(a.out.join("log.jsonl"), log)?;
    std::fs::write(a.out.join("run.json"), serde_json::to_vec_pretty(&rc)?)?;
    model.save(&a.out)?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        outcome.steps,
        outcome.final_loss,
        a.out.display()
    );
    Ok(())
}

fn eval_ckpt(a: &EvalCkptArgs) -> Result<()> {
    let model = FusionModel::<f32>::load(&a.ckpt)?;
    let (manifest, samples) = synth::read_split(&a.data)?;
    let mut ids: Vec<String> = manifest.samples.iter().map(|e| e.id.clone()).collect();
    let selected: Vec<SceneSample> = match a.range.as_str() {
        "all" => samples,
        r => {
            let range: BevRange = r.parse()?;
            let keep: Vec<bool> = samples.iter().map(|s| s.meta.range == range).collect();
            let mut k = keep.iter();
            ids.retain(|_| *k.next().expect("one flag per id"));
            samples.into_iter().filter(|s| s.meta.range == range).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::Format(format!("no samples at range {}", a.range)));
    }
    for s in &selected {
        check_grid(&model.cfg, s)?;
    }
    let report = train::evaluate(&model, &selected)?;
    if let Some(dir) = &a.pred_out {
        std::fs::create_dir_all(dir)?;
        for (id, (s, p)) in ids
            .iter()
            .zip(selected.iter().zip(train::predict_all(&model, &selected)?))
        {
            geo_io::write_gray(dir.join(format!("{id}.png")), s.height(), s.width(), &p)?;
        }
    }
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.report {
        std::fs::write(out, json)?;
    }
    Ok(())
}

/// `eval` report: IoU columns per class plus Chamfer AP of extracted
/// instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFileReport {
    pub samples: usize,
    pub iou: serde_json::Value,
    pub chamfer_ap: metrics::ApReport,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (manifest, samples) = synth::read_split(&a.gt)?;
    let mut acc = metrics::IoUAccumulator::new(Class::COUNT);
    let mut preds_all: Vec<Instance> = Vec::new();
    let mut gts_all: Vec<Instance> = Vec::new();
    for (n, (e, s)) in manifest.samples.iter().zip(&samples).enumerate() {
        let (h, w, pred) = geo_io::read_gray(a.pred.join(format!("{}.png", e.id)))?;
        if (h, w) != (s.height(), s.width()) {
            return Err(Error::Format(format!(
                "prediction {} is {h}x{w}, ground truth {}x{}",
                e.id,
                s.height(),
                s.width()
            )));
        }
        acc.add(&pred, &s.gt)?;
        // instances of different samples must not match each other, so each
        // sample is moved to its own far-away origin
        let cell = manifest.spec.cell_m(s.meta.range);
        let shift = 1e4 * n as f64;
        let place = |mut v: Vec<Instance>| {
            for i in &mut v {
                i.points.iter_mut().for_each(|p| p[0] += shift);
            }
            v
        };
        preds_all.extend(place(extract_instances(&pred, h, w, cell, None, a.min_cells)?));
        gts_all.extend(place(extract_instances(&s.gt, h, w, cell, None, a.min_cells)?));
    }
    let report = EvalFileReport {
        samples: samples.len(),
        iou: acc.report().table_row(),
        chamfer_ap: chamfer_ap(&preds_all, &gts_all, &DEFAULT_THRESHOLDS_M)?,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    std::fs::write(&a.report, json)?;
    Ok(())
}

fn bench_forward(a: &BenchArgs) -> Result<()> {
    let dims: Vec<usize> = a
        .shape
        .split(['x', 'X'])
        .map(|s| config::value("shape", s.trim()))
        .collect::<Result<_>>()?;
    let [h, w, c] = dims[..] else {
        return Err(Error::Config(format!("shape: expected HxWxC, got {:?}", a.shape)));
    };
    let mut cfg = FusionConfig::full_scale();
    cfg.height = h;
    cfg.width = w;
    cfg.channels = c;
    apply_pairs(&parse_overrides(&a.set)?, &mut [&mut cfg])?;
    let model = FusionModel::<f32>::new(cfg.clone(), 0)?;
    let input = SceneInput {
        f_bev: Tensor::from_fn(&[h, w, c], |i| ((i % 97) as f32 / 97.0) - 0.5),
        sat: Tensor::from_fn(&[3, h, w], |i| (i % 31) as f32 / 31.0),
    };
    for k in 0..a.repeat.max(1) {
        let t = Instant::now();
        let logits = model.predict(&input)?;
        let secs = t.elapsed().as_secs_f64();
        println!(
            "run {k}: shape {h}x{w}x{c} tokens {} c_h {} params {} logits {:?} time {secs:.3} s",
            cfg.tokens(),
            cfg.c_h,
            model.store.num_elements(),
            logits.shape()
        );
    }
    Ok(())
}

const CLASS_COLORS: [[u8; 3]; 4] = [[30, 30, 30], [255, 170, 40], [60, 140, 255], [80, 220, 90]];

fn render(a: &RenderArgs) -> Result<()> {
    let model = FusionModel::<f32>::load(&a.ckpt)?;
    let (manifest, samples) = synth::read_split(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let n = a.n.min(samples.len());
    for (e, s) in manifest.samples.iter().zip(&samples).take(n) {
        check_grid(&model.cfg, s)?;
        let pred = model.classify(&s.input())?;
        let img = render_panels(s, &pred, a.scale.max(1));
        img.save(a.out.join(format!("{}.render.png", e.id)))?;
    }
    println!("rendered {n} panels to {}", a.out.display());
    Ok(())
}

/// Four `H×W` panels left to right: BEV feature magnitude, satellite tile,
/// prediction, ground truth; each cell drawn as `scale×scale` pixels.
pub fn render_panels(s: &SceneSample, pred: &[u8], scale: u32) -> RgbImage {
    let (h, w) = (s.height(), s.width());
    let c = s.f_bev.shape()[2];
    let mag: Vec<f32> = (0..h * w)
        .map(|i| {
            s.f_bev.data()[i * c..(i + 1) * c]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    let peak = mag.iter().copied().fold(1e-6f32, f32::max);
    let plane = h * w;
    let gap = scale;
    let pw = w as u32 * scale;
    let mut img = RgbImage::from_pixel(4 * pw + 3 * gap, h as u32 * scale, Rgb([255, 255, 255]));
    for y in 0..h as u32 * scale {
        for x in 0..pw {
            let i = (y / scale) as usize * w + (x / scale) as usize;
            let g = (mag[i] / peak * 255.0) as u8;
            let sat = |k: usize| (s.sat.data()[k * plane + i].clamp(0.0, 1.0) * 255.0) as u8;
            let panels = [
                [g, g, g],
                [sat(0), sat(1), sat(2)],
                CLASS_COLORS[pred[i].min(3) as usize],
                CLASS_COLORS[s.gt[i].min(3) as usize],
            ];
            for (k, col) in panels.iter().enumerate() {
                img.put_pixel(k as u32 * (pw + gap) + x, y, Rgb(*col));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "lr = 0.01\nfusion = concat\n").unwrap();
        let rc = RunConfig::load(Some(&f), &["lr=0.02".into()]).unwrap();
        assert_eq!(rc.train.lr, 0.02);
        assert_eq!(rc.model.fusion.to_string(), "concat");
        let err = RunConfig::load(Some(&f), &["bogus=1".into()]).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn help_and_unknown_subcommand_codes() {
        assert_eq!(run(["satfuse", "--help"]), EXIT_OK);
        assert_eq!(run(["satfuse", "frobnicate"]), EXIT_USAGE);
    }
}

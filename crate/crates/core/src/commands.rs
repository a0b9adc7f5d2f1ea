//! The `train`, `generate`, `eval`, `bench` and `make-corpus` commands, kept
//! in the library so they can be driven without spawning the binary.

use std::fs;
use std::io::BufWriter;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use crate::bench::{bench_memory, write_bench_csv};
use crate::checkpoint::Checkpoint;
use crate::data::{make_corpus, random_spec, read_corpus, render_video, write_corpus, write_video, ClipSequence, Geometry};
use crate::error::{Error, Result};
use crate::metrics::{rollout, rollout_eval, DriftReport, MetricContext, QualityMetric, RolloutSettings};
use crate::model::{Model, Segment};
use crate::parallel::threads_from_env;
use crate::runconfig::RunConfig;
use crate::trainer::{run_stage, write_loss_csv, LogRow, Stage, TrainConfig, Trainer};
use crate::SqueezeVariant;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

/// Process exit code for a failed command: 2 configuration, 3 numerical
/// failure, 4 format version, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFinite { .. } => 3,
        Error::Version { .. } => 4,
        _ => 1,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    Ok(())
}

/// The corpus from `data.dir`, or synthesized from the histogram.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<ClipSequence>> {
    let geom = Geometry::of(&cfg.model);
    let corpus = match &cfg.data.dir {
        Some(dir) => read_corpus(dir)?,
        None => make_corpus(&cfg.data.histogram, cfg.data.seed, &geom)?,
    };
    if corpus.is_empty() {
        return Err(Error::config("data.dir", "no videos found"));
    }
    if let Some(v) = corpus.iter().find(|v| v.geometry() != geom) {
        return Err(Error::config(
            "data.dir",
            format!("video {} has geometry {:?}, model expects {geom:?}", v.video_id, v.geometry()),
        ));
    }
    Ok(corpus)
}

pub fn cmd_make_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out(cfg)?;
    let dir = cfg.out.join("corpus");
    let corpus = make_corpus(&cfg.data.histogram, cfg.data.seed, &Geometry::of(&cfg.model))?;
    write_corpus(&dir, &corpus, &Geometry::of(&cfg.model))?;
    Ok(dir)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
}

fn train_stage(
    trainer: &mut Trainer,
    corpus: &[ClipSequence],
    stage_cfg: &TrainConfig,
    start: usize,
    cfg: &RunConfig,
    log: &mut Vec<LogRow>,
) -> Result<PathBuf> {
    let tag = stage_cfg.stage.tag();
    let every = cfg.checkpoint_every;
    let done = run_stage(
        trainer,
        corpus,
        stage_cfg,
        start,
        |r| {
            log.push(r.clone());
            ControlFlow::Continue(())
        },
        |done, tr| {
            if every > 0 && done % every == 0 && done < stage_cfg.steps {
                let ck = Checkpoint {
                    stage: tag.into(),
                    step: done as u64,
                    trainer: tr.clone(),
                };
                ck.save(&cfg.out.join(format!("{tag}_step{done:06}.ckpt")))?;
            }
            Ok(())
        },
    )?;
    let path = cfg.out.join(format!("{tag}.ckpt"));
    Checkpoint {
        stage: tag.into(),
        step: done as u64,
        trainer: trainer.clone(),
    }
    .save(&path)?;
    Ok(path)
}

/// Runs the configured stages (optionally resuming from a checkpoint) and
/// writes checkpoints, the loss CSV and the resolved config into `out`.
/// The loss CSV is written even when training aborts.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    prepare_out(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mut log = Vec::new();
    let result = train_all(cfg, resume, &corpus, &mut log);
    let loss_csv = cfg.out.join("loss.csv");
    write_loss_csv(BufWriter::new(fs::File::create(&loss_csv)?), &log, cfg.wall_clock)?;
    Ok(TrainOutcome {
        checkpoints: result?,
        loss_csv,
    })
}

fn train_all(cfg: &RunConfig, resume: Option<&Path>, corpus: &[ClipSequence], log: &mut Vec<LogRow>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let (mut trainer, first_stage, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stage = match ck.stage.as_str() {
                "stage1" => Stage::Stage1Full,
                "stage2" => Stage::Stage2HeadOnly,
                other => return Err(Error::Format(format!("unknown stage tag {other:?}"))),
            };
            (ck.trainer, stage, ck.step as usize)
        }
        None => (Trainer::new(Model::new(cfg.model.clone(), cfg.seed)?, &cfg.stage1)?, Stage::Stage1Full, 0),
    };
    if first_stage == Stage::Stage1Full {
        paths.push(train_stage(&mut trainer, corpus, &cfg.stage1, start, cfg, log)?);
    }
    if let Some(s2) = &cfg.stage2 {
        let start = if first_stage == Stage::Stage2HeadOnly { start } else { 0 };
        if first_stage == Stage::Stage1Full {
            trainer = Trainer::new(trainer.model, s2)?;
        }
        paths.push(train_stage(&mut trainer, corpus, s2, start, cfg, log)?);
    } else if first_stage == Stage::Stage2HeadOnly {
        return Err(Error::config("stage2.enabled", "resuming a stage-2 checkpoint needs stage 2 enabled"));
    }
    Ok(paths)
}

fn gray_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PGM of `frames` (each `H·W·C`) laid side by side.
pub fn write_pgm_strip(path: &Path, frames: &[&[f64]], geom: &Geometry) -> Result<()> {
    let (h, w, c) = (geom.height, geom.width, geom.channels);
    let mut out = format!("P5\n{} {}\n255\n", w * frames.len(), h).into_bytes();
    for y in 0..h {
        for f in frames {
            for x in 0..w {
                let p = (y * w + x) * c;
                out.push(gray_byte(f[p..p + c].iter().sum::<f64>() / c as f64));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rolls out `generate.segments` segments for a synthetic scene and writes
/// the video plus one PGM strip per segment.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, seed: u64) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    prepare_out(cfg)?;
    let model = ck.model();
    let geom = Geometry::of(&model.config);
    let n = cfg.generate.segments;
    let scene = render_video(&random_spec(n.max(1), cfg.generate.scene_seed, &geom), &geom, 0)?;
    let segments: Vec<Segment> = rollout(model, &scene, n, cfg.generate.mode, cfg.generate.sample_steps, seed)?;
    if segments.iter().any(|s| !s.all_finite()) {
        return Err(Error::NonFinite { video_id: 0, clip: 0 });
    }
    let video = ClipSequence {
        clips: segments,
        spec: crate::data::SceneSpec {
            n_clips: n,
            ..scene.spec.clone()
        },
        ..scene
    };
    let path = cfg.out.join("generated.pfv");
    write_video(&path, &video, &geom)?;
    write_pgm_strip(&cfg.out.join("conditioning.pgm"), &[video.reference_image.data()], &geom)?;
    let frame_len = geom.frame_len();
    for (i, s) in video.clips.iter().enumerate() {
        let frames: Vec<&[f64]> = s.data().chunks(frame_len).collect();
        write_pgm_strip(&cfg.out.join(format!("segment_{i:03}.pgm")), &frames, &geom)?;
    }
    Ok(path)
}

/// Drift report for every configured mode and seed on the first
/// `eval.videos` corpus videos; written to `drift.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(PathBuf, DriftReport)> {
    if cfg.eval.modes.is_empty() {
        return Err(Error::config("eval.modes", "at least one mode is required"));
    }
    if cfg.eval.seeds.is_empty() {
        return Err(Error::config("eval.seeds", "at least one seed is required"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    prepare_out(cfg)?;
    let corpus = load_corpus(cfg)?;
    let norm = MetricContext::corpus_sharpness_norm(&corpus);
    let videos = &corpus[..cfg.eval.videos.min(corpus.len())];
    let mut report = DriftReport::default();
    for &mode in &cfg.eval.modes {
        let settings = RolloutSettings {
            n_segments: cfg.eval.segments,
            mode,
            sample_steps: cfg.eval.sample_steps,
            threads: threads_from_env(),
        };
        let r = rollout_eval(ck.model(), videos, &cfg.eval.seeds, &settings, norm)?;
        report.rows.extend(r.rows);
        report.excluded += r.excluded;
    }
    let path = cfg.out.join("drift.csv");
    report.write_csv(BufWriter::new(fs::File::create(&path)?))?;
    Ok((path, report))
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out(cfg)?;
    let rows = bench_memory(&cfg.model, &cfg.bench.variants, &cfg.bench.lengths, cfg.bench.repeats, cfg.seed)?;
    let path = cfg.out.join("bench.csv");
    write_bench_csv(BufWriter::new(fs::File::create(&path)?), &rows)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: SqueezeVariant,
    pub metric: QualityMetric,
    pub median_drift: f64,
    pub mean_value: f64,
    /// Mean clip loss over the last (up to) 50 steps of the final stage.
    pub final_loss: f64,
}

fn final_loss(loss_csv: &Path) -> Result<f64> {
    let mut rd = csv::Reader::from_path(loss_csv).map_err(|e| Error::Format(format!("csv: {e}")))?;
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for r in rd.records() {
        let r = r.map_err(|e| Error::Format(format!("csv: {e}")))?;
        let num = |i: usize| r[i].parse::<f64>().map_err(|e| Error::Format(format!("loss.csv: {e}")));
        rows.push((r[1].to_string(), num(0)? as usize, num(5)?));
    }
    let Some((stage, last, _)) = rows.last().cloned() else {
        return Ok(f64::NAN);
    };
    let tail: Vec<f64> = rows
        .iter()
        .filter(|(s, step, _)| *s == stage && step + 50 > last)
        .map(|r| r.2)
        .collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Trains and evaluates every variant in `bench.variants` with otherwise
/// identical settings, each under `out/variant_X`, and writes
/// `ablation.csv`. Timing is left to `bench` so the table is reproducible.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<(PathBuf, Vec<AblationRow>)> {
    prepare_out(cfg)?;
    let mut rows = Vec::new();
    for &variant in &cfg.bench.variants {
        let mut sub = cfg.clone();
        sub.model.squeeze_variant = variant;
        sub.out = cfg.out.join(format!("variant_{variant}"));
        let trained = cmd_train(&sub, None)?;
        let ckpt = trained.checkpoints.last().expect("stage 1 always runs");
        let (_, report) = cmd_eval(&sub, ckpt)?;
        let loss = final_loss(&trained.loss_csv)?;
        for metric in QualityMetric::ALL {
            let values: Vec<f64> = report.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
            rows.push(AblationRow {
                variant,
                metric,
                median_drift: report.median_drift(metric).unwrap_or(f64::NAN),
                mean_value: values.iter().sum::<f64>() / values.len().max(1) as f64,
                final_loss: loss,
            });
        }
    }
    let path = cfg.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("csv: {e}")))?;
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["variant", "metric", "median_drift", "mean_value", "final_loss"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.variant.to_string(),
            r.metric.to_string(),
            r.median_drift.to_string(),
            r.mean_value.to_string(),
            r.final_loss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok((path, rows))
}

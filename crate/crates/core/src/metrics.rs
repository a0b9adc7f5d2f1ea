//! Pixel-level quality proxies, start/end drift, and the autoregressive
//! rollout evaluator.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{render_video, ClipSequence, Geometry, OBJECT_SIZE};
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::model::{Model, Segment};
use crate::trainer::{ConditioningStream, ForcingMode};

/// Side of the tracked subject box: the sprite plus a one-pixel border.
pub const TRACK_BOX: usize = OBJECT_SIZE + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QualityMetric {
    Sharpness,
    SubjectConsistency,
    BackgroundConsistency,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 3] = [
        QualityMetric::Sharpness,
        QualityMetric::SubjectConsistency,
        QualityMetric::BackgroundConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::Sharpness => "sharpness",
            QualityMetric::SubjectConsistency => "subject_consistency",
            QualityMetric::BackgroundConsistency => "background_consistency",
        }
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QualityMetric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::config("metric", format!("unknown metric {s:?}")))
    }
}

/// Per-video constants the proxies need: the subject template cut from the
/// reference frame and the corpus-wide sharpness scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricContext {
    pub geom: Geometry,
    /// Grayscale `TRACK_BOX²` patch around the subject in the first frame;
    /// NaN where the box leaves the frame.
    pub template: Vec<f64>,
    pub sharpness_norm: f64,
}

impl MetricContext {
    pub fn for_video(video: &ClipSequence, sharpness_norm: f64) -> Self {
        let geom = video.geometry();
        let gray = grayscale(video.reference_image.data(), &geom);
        let (oy, ox) = video.spec.object_origin(&geom, 0);
        MetricContext {
            template: crop(&gray, &geom, oy as isize - 1, ox as isize - 1),
            geom,
            sharpness_norm,
        }
    }

    /// Largest per-frame gradient variance over a ground-truth corpus.
    pub fn corpus_sharpness_norm(corpus: &[ClipSequence]) -> f64 {
        corpus
            .iter()
            .flat_map(|v| {
                let g = v.geometry();
                v.frames().into_iter().map(move |f| gradient_variance(&grayscale(&f, &g), &g))
            })
            .fold(0.0, f64::max)
    }
}

fn grayscale(frame: &[f64], geom: &Geometry) -> Vec<f64> {
    let c = geom.channels;
    frame.chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect()
}

/// `TRACK_BOX²` patch at top-left `(y, x)`, NaN outside the frame.
fn crop(gray: &[f64], geom: &Geometry, y: isize, x: isize) -> Vec<f64> {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let mut out = Vec::with_capacity(TRACK_BOX * TRACK_BOX);
    for yy in y..y + TRACK_BOX as isize {
        for xx in x..x + TRACK_BOX as isize {
            let inside = (0..h).contains(&yy) && (0..w).contains(&xx);
            out.push(if inside { gray[(yy * w + xx) as usize] } else { f64::NAN });
        }
    }
    out
}

/// Variance of the forward-difference gradient magnitude.
fn gradient_variance(gray: &[f64], geom: &Geometry) -> f64 {
    let (h, w) = (geom.height, geom.width);
    let mut mags = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = gray[y * w + x];
            let gx = gray[y * w + x + 1] - p;
            let gy = gray[(y + 1) * w + x] - p;
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    let mean = mags.iter().sum::<f64>() / mags.len() as f64;
    mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / mags.len() as f64
}

/// Normalized cross-correlation over the pairs where both entries are
/// defined; a flat patch correlates only with an identical flat patch.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| !x.is_nan() && !y.is_nan()).map(|(&x, &y)| (x, y)).collect();
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa < 1e-18 || sbb < 1e-18 {
        return if saa < 1e-18 && sbb < 1e-18 && (ma - mb).abs() < 1e-9 { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

/// Best template match in `gray`: `(score, y, x)`, first maximum in raster
/// order. Boxes may overhang the frame by one pixel so the sprite itself can
/// sit anywhere.
fn track(gray: &[f64], geom: &Geometry, template: &[f64]) -> (f64, isize, isize) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    let span = |extent: usize| -1..=(extent - TRACK_BOX) as isize + 1;
    for y in span(geom.height) {
        for x in span(geom.width) {
            let s = ncc(&crop(gray, geom, y, x), template);
            if s > best.0 {
                best = (s, y, x);
            }
        }
    }
    best
}

/// Metric value in `[0, 1]` on a window of frames (each `H·W·C` long).
pub fn metric_value(metric: QualityMetric, frames: &[Vec<f64>], ctx: &MetricContext) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Contract("metric of an empty window".into()));
    }
    let geom = &ctx.geom;
    let gray: Vec<Vec<f64>> = frames.iter().map(|f| grayscale(f, geom)).collect();
    let n = frames.len() as f64;
    let v = match metric {
        QualityMetric::Sharpness => {
            let norm = if ctx.sharpness_norm > 0.0 { ctx.sharpness_norm } else { 1.0 };
            gray.iter().map(|g| (gradient_variance(g, geom) / norm).clamp(0.0, 1.0)).sum::<f64>() / n
        }
        QualityMetric::SubjectConsistency => {
            gray.iter().map(|g| track(g, geom, &ctx.template).0.max(0.0)).sum::<f64>() / n
        }
        QualityMetric::BackgroundConsistency => {
            if gray.len() < 2 {
                return Ok(1.0);
            }
            let boxes: Vec<_> = gray.iter().map(|g| track(g, geom, &ctx.template)).collect();
            let inside = |b: &(f64, isize, isize), y: usize, x: usize| {
                let k = TRACK_BOX as isize;
                (b.1..b.1 + k).contains(&(y as isize)) && (b.2..b.2 + k).contains(&(x as isize))
            };
            let mut total = 0.0;
            for t in 0..gray.len() - 1 {
                let (mut sum, mut count) = (0.0, 0usize);
                for y in 0..geom.height {
                    for x in 0..geom.width {
                        if inside(&boxes[t], y, x) || inside(&boxes[t + 1], y, x) {
                            continue;
                        }
                        let p = y * geom.width + x;
                        sum += (gray[t + 1][p] - gray[t][p]).abs();
                        count += 1;
                    }
                }
                total += if count == 0 { 0.0 } else { sum / count as f64 };
            }
            (1.0 - total / (gray.len() - 1) as f64 / 2.0).clamp(0.0, 1.0)
        }
    };
    Ok(v)
}

/// First and last `⌈0.15·n⌉` frame indices.
pub fn window_split(n_frames: usize) -> Result<(Range<usize>, Range<usize>)> {
    if n_frames < 7 {
        return Err(Error::Contract(format!("{n_frames} frames is too short for 15% windows (need 7)")));
    }
    let k = (15 * n_frames).div_ceil(100);
    Ok((0..k, n_frames - k..n_frames))
}

/// Window used for drift: the 15% split, or single end frames for rollouts
/// shorter than seven frames.
fn drift_windows(n_frames: usize) -> Result<(Range<usize>, Range<usize>)> {
    match n_frames {
        0 => Err(Error::Contract("drift of an empty video".into())),
        1..=6 => Ok((0..1, n_frames - 1..n_frames)),
        _ => window_split(n_frames),
    }
}

/// `|M(V_start) − M(V_end)|`.
pub fn drift(metric: QualityMetric, frames: &[Vec<f64>], ctx: &MetricContext) -> Result<f64> {
    let (start, end) = drift_windows(frames.len())?;
    let a = metric_value(metric, &frames[start], ctx)?;
    let b = metric_value(metric, &frames[end], ctx)?;
    Ok((a - b).abs())
}

/// Frames of consecutive segments, each `H·W·C` long.
pub fn segment_frames(segments: &[Segment]) -> Vec<Vec<f64>> {
    segments
        .iter()
        .flat_map(|s| {
            let d = s.dims();
            let fl = d[1..].iter().product();
            s.data().chunks(fl).map(<[f64]>::to_vec).collect::<Vec<_>>()
        })
        .collect()
}

/// Generates `n_segments` segments for `video`'s prompt and first frame.
///
/// `Student(n)` streams the model's own `n`-step samples into the memory and
/// short-term context; `Direct` does the same with single-step samples;
/// `Teacher` samples each segment with `sample_steps` but conditions on the
/// ground-truth continuation of the scene.
pub fn rollout(
    model: &Model,
    video: &ClipSequence,
    n_segments: usize,
    mode: ForcingMode,
    sample_steps: usize,
    seed: u64,
) -> Result<Vec<Segment>> {
    let mut stream = ConditioningStream::new(model, &video.prompt_ids, &video.reference_image)?;
    let truth = match mode {
        ForcingMode::Teacher if n_segments > 0 => {
            let spec = crate::data::SceneSpec {
                n_clips: n_segments,
                ..video.spec.clone()
            };
            Some(render_video(&spec, &video.geometry(), video.video_id)?)
        }
        _ => None,
    };
    let steps = match mode {
        ForcingMode::Teacher => sample_steps,
        ForcingMode::Student(n) => n,
        ForcingMode::Direct => 1,
    };
    let dims = model.config.segment_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let bundle = stream.bundle(model)?;
        let x = euler_sample(model, &bundle, &dims, steps, rng.random())?;
        let cond = match &truth {
            Some(t) => t.clips[i].clone(),
            None => x.clone(),
        };
        if i + 1 < n_segments {
            stream.push(model, cond)?;
        }
        out.push(x);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub video_id: u64,
    pub seed: u64,
    pub mode: ForcingMode,
    pub n_segments: usize,
    pub metric: QualityMetric,
    /// Metric over the whole rollout.
    pub value: f64,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Rollouts that produced non-finite frames; their rows carry NaN.
    pub excluded: usize,
}

impl DriftReport {
    /// Median drift of `metric` over finite rows.
    pub fn median_drift(&self, metric: QualityMetric) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.metric == metric && r.drift.is_finite())
            .map(|r| r.drift)
            .collect();
        median(&mut v)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["video_id", "seed", "mode", "n_segments", "metric", "value", "drift"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.video_id.to_string(),
                r.seed.to_string(),
                r.mode.to_string(),
                r.n_segments.to_string(),
                r.metric.to_string(),
                r.value.to_string(),
                r.drift.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Metric values and drift for every metric on one frame sequence.
pub fn evaluate_frames(frames: &[Vec<f64>], ctx: &MetricContext) -> Result<Vec<(QualityMetric, f64, f64)>> {
    QualityMetric::ALL
        .into_iter()
        .map(|m| Ok((m, metric_value(m, frames, ctx)?, drift(m, frames, ctx)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub n_segments: usize,
    pub mode: ForcingMode,
    /// Euler steps per segment under `Teacher`.
    pub sample_steps: usize,
    pub threads: usize,
}

/// Rolls out every `(video, seed)` pair and scores the generated frames.
/// Rows are ordered by video, then seed, then metric, independent of
/// `threads`.
pub fn rollout_eval(
    model: &Model,
    videos: &[ClipSequence],
    seeds: &[u64],
    settings: &RolloutSettings,
    sharpness_norm: f64,
) -> Result<DriftReport> {
    let RolloutSettings {
        n_segments,
        mode,
        sample_steps,
        threads,
    } = *settings;
    let jobs: Vec<(usize, u64)> = (0..videos.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = crate::parallel::map(&jobs, threads, |&(v, seed)| -> Result<Option<Vec<(QualityMetric, f64, f64)>>> {
        let video = &videos[v];
        let segments = rollout(model, video, n_segments, mode, sample_steps, seed)?;
        let frames = segment_frames(&segments);
        if frames.iter().flatten().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        evaluate_frames(&frames, &MetricContext::for_video(video, sharpness_norm)).map(Some)
    });
    let mut report = DriftReport::default();
    for (&(v, seed), res) in jobs.iter().zip(results) {
        let scored = res?;
        if scored.is_none() {
            report.excluded += 1;
        }
        for (i, metric) in QualityMetric::ALL.into_iter().enumerate() {
            let (value, drift) = scored.as_ref().map_or((f64::NAN, f64::NAN), |s| (s[i].1, s[i].2));
            report.rows.push(DriftRow {
                video_id: videos[v].video_id,
                seed,
                mode,
                n_segments,
                metric,
                value,
                drift,
            });
        }
    }
    Ok(report)
}

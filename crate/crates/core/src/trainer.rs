//! Teacher / Student / Direct forcing, clip-sequential training with gradient
//! accumulation, a length curriculum and the two-stage recipe.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::ClipSequence;
use crate::error::{Error, Result};
use crate::flow::{euler_sample_from, fm_loss_var, interpolate, one_step_approx, standard_normal, velocity_target};
use crate::memorypack::{framepack_var, MemoryState};
use crate::model::{CondVars, ConditioningBundle, Model, Segment, TokenSequence};
use crate::tensor::Tensor;

/// How the previous clip is presented as conditioning during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcingMode {
    /// Ground truth.
    Teacher,
    /// A full Euler rollout with the given number of steps.
    Student(usize),
    /// Single-step approximation from a random point on the noise path.
    Direct,
}

impl fmt::Display for ForcingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForcingMode::Teacher => f.write_str("teacher"),
            ForcingMode::Student(n) => write!(f, "student:{n}"),
            ForcingMode::Direct => f.write_str("direct"),
        }
    }
}

impl FromStr for ForcingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "teacher" => Ok(ForcingMode::Teacher),
            "direct" => Ok(ForcingMode::Direct),
            _ => {
                let steps = s
                    .strip_prefix("student:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::config("mode", format!("expected teacher, direct or student:N, got {s:?}")))?;
                Ok(ForcingMode::Student(steps))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1Full,
    Stage2HeadOnly,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1Full => "stage1",
            Stage::Stage2HeadOnly => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Clips per optimizer update; `None` means all clips of the video.
    pub accumulation_window: Option<usize>,
    pub stage: Stage,
    pub mode: ForcingMode,
    pub curriculum_on: bool,
    /// Videos trained in this stage; one optimizer update per accumulation window.
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Teacher forcing on every parameter from random init.
    pub fn stage1(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            accumulation_window: None,
            stage: Stage::Stage1Full,
            mode: ForcingMode::Teacher,
            curriculum_on: false,
            steps: 2000,
            seed,
        }
    }

    /// Direct forcing on the final norm and output head only.
    pub fn stage2(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            accumulation_window: None,
            stage: Stage::Stage2HeadOnly,
            mode: ForcingMode::Direct,
            curriculum_on: true,
            steps: 1000,
            seed: seed.wrapping_add(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation_window == Some(0) {
            return Err(Error::config("train.accumulation_window", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if let ForcingMode::Student(0) = self.mode {
            return Err(Error::config("train.mode", "student steps must be at least 1"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn apply(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let grad = params.grad(id).to_vec();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = params.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                value[i] -= self.lr * (update + self.weight_decay * value[i]);
            }
        }
    }
}

/// Running conditioning state for one video: the segments presented so far
/// and the memory after absorbing each prefix of them.
#[derive(Clone, Debug)]
pub struct ConditioningStream {
    prompt_ids: Vec<usize>,
    image: Tensor,
    segments: Vec<Segment>,
    /// `memory[j]` has absorbed `segments[..j]`.
    memory: Vec<MemoryState>,
}

impl ConditioningStream {
    pub fn new(model: &Model, prompt_ids: &[usize], image: &Tensor) -> Result<Self> {
        let prompt = model.embed_prompt(prompt_ids)?;
        let img = model.embed_image(image)?;
        let psi0 = model.init_memory(&prompt, &img)?;
        Ok(ConditioningStream {
            prompt_ids: prompt_ids.to_vec(),
            image: image.clone(),
            segments: Vec::new(),
            memory: vec![psi0],
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn memory(&self) -> &MemoryState {
        self.memory.last().expect("ψ₀ always present")
    }

    fn start_frame(model: &Model, index: usize) -> i64 {
        (index * model.config.frames_per_segment) as i64
    }

    /// Appends a conditioning segment and folds it into the memory.
    pub fn push(&mut self, model: &Model, segment: Segment) -> Result<()> {
        let tokens = model.patchify(&segment, Self::start_frame(model, self.segments.len()))?;
        let next = model.update_memory(self.memory(), &tokens)?;
        self.segments.push(segment);
        self.memory.push(next);
        Ok(())
    }

    /// Conditioning for the next segment on `tape`. Gradients reach the
    /// embeddings, FramePack inputs and the most recent memory update; older
    /// memory enters as a constant.
    pub fn cond_vars(&self, tape: &mut Tape, model: &Model) -> Result<CondVars> {
        let prompt = model.prompt_var(tape, &self.prompt_ids)?;
        let image = model.patchify_var(tape, &self.image)?;
        let n = self.segments.len();
        let f = model.config.frames_per_segment;
        let schedule = model.framepack_schedule();
        let first = n.saturating_sub(schedule.depth());
        let mut history = Vec::with_capacity(n - first);
        for j in first..n {
            let v = model.patchify_var(tape, &self.segments[j])?;
            history.push((v, model.segment_positions(Self::start_frame(model, j), f)));
        }
        let memory = match history.last() {
            None => model.init_memory_var(tape, prompt, image)?,
            Some(&(newest, _)) => {
                let prev = &self.memory[n - 1];
                let psi = tape.constant(prev.psi.clone());
                let mem = model.memorize_var(tape, newest)?;
                model.squeeze_var(tape, psi, mem, prev.n_segments_absorbed, model.config.squeeze_variant)?
            }
        };
        let short_ctx = framepack_var(tape, &schedule, &history)?;
        Ok(CondVars {
            short_ctx,
            memory,
            prompt,
            image,
            target_start_frame: Self::start_frame(model, n),
        })
    }

    /// Value-level conditioning bundle for the next segment.
    pub fn bundle(&self, model: &Model) -> Result<ConditioningBundle> {
        let mut tape = Tape::no_grad();
        let cv = self.cond_vars(&mut tape, model)?;
        self.bundle_from(&tape, &cv)
    }

    fn bundle_from(&self, tape: &Tape, cv: &CondVars) -> Result<ConditioningBundle> {
        let short_ctx = match &cv.short_ctx {
            Some((v, pos)) => Some(TokenSequence::new(tape.value(*v).clone(), pos.clone())?),
            None => None,
        };
        Ok(ConditioningBundle {
            short_ctx,
            memory: MemoryState {
                psi: tape.value(cv.memory).clone(),
                n_segments_absorbed: self.segments.len(),
            },
            prompt_emb: tape.value(cv.prompt).clone(),
            image_emb: tape.value(cv.image).clone(),
            target_start_frame: cv.target_start_frame,
        })
    }
}

/// Direct-forcing conditioning from an explicit `(t, eps)`.
pub fn direct_condition(
    model: &Model,
    ground_truth: &Segment,
    t: f64,
    eps: &Tensor,
    bundle: &ConditioningBundle,
) -> Result<Segment> {
    let x_t = interpolate(ground_truth, eps, t)?.x_t;
    Ok(one_step_approx(model, &x_t, t, bundle)?.x1)
}

/// Stand-in for the previous clip under `mode`, given the bundle that was
/// used to predict that clip. Draws from `rng` only for Student and Direct.
pub fn conditioning_segment(
    model: &Model,
    mode: ForcingMode,
    ground_truth: &Segment,
    bundle: &ConditioningBundle,
    rng: &mut ChaCha8Rng,
) -> Result<Segment> {
    match mode {
        ForcingMode::Teacher => Ok(ground_truth.clone()),
        ForcingMode::Student(steps) => {
            let x0 = standard_normal(ground_truth.dims(), rng);
            euler_sample_from(model, bundle, x0, steps)
        }
        ForcingMode::Direct => {
            let t: f64 = rng.random();
            let eps = standard_normal(ground_truth.dims(), rng);
            direct_condition(model, ground_truth, t, &eps, bundle)
        }
    }
}

/// Conditioning bundle for clip `index` of `video`, built by replaying the
/// forcing mode over the preceding clips.
pub fn build_conditioning(
    video: &ClipSequence,
    index: usize,
    mode: ForcingMode,
    model: &Model,
    rng: &mut ChaCha8Rng,
) -> Result<ConditioningBundle> {
    if index >= video.clips.len() {
        return Err(Error::Contract(format!(
            "clip index {index} out of range for a {}-clip video",
            video.clips.len()
        )));
    }
    let mut stream = ConditioningStream::new(model, &video.prompt_ids, &video.reference_image)?;
    let mut bundle = stream.bundle(model)?;
    for clip in &video.clips[..index] {
        let c = conditioning_segment(model, mode, clip, &bundle, rng)?;
        stream.push(model, c)?;
        bundle = stream.bundle(model)?;
    }
    Ok(bundle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_index: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoReport {
    pub video_id: u64,
    pub mean_loss: f64,
    pub clips: Vec<ClipRecord>,
    pub updates: usize,
}

/// Model, optimizer and sampling state advanced one video at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub mode: ForcingMode,
    pub accumulation_window: Option<usize>,
}

impl Trainer {
    pub fn new(mut model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.stage {
            Stage::Stage1Full => model.unfreeze_all(),
            Stage::Stage2HeadOnly => model.freeze_all_but_head(),
        }
        model.params.zero_grad();
        let opt = AdamW::new(&model.params, cfg.learning_rate);
        Ok(Trainer {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            mode: cfg.mode,
            accumulation_window: cfg.accumulation_window,
        })
    }

    /// Forward + backward for one clip; gradients accumulate in the store.
    fn clip_pass(&mut self, stream: &ConditioningStream, clip: &Segment, video_id: u64, index: usize) -> Result<(f64, ConditioningBundle)> {
        let mut tape = Tape::new();
        let cv = stream.cond_vars(&mut tape, &self.model)?;
        let bundle = stream.bundle_from(&tape, &cv)?;
        let t: f64 = self.rng.random();
        let eps = standard_normal(clip.dims(), &mut self.rng);
        let x_t = interpolate(clip, &eps, t)?.x_t;
        let u = velocity_target(clip, &eps)?;
        let v = self.model.velocity_var(&mut tape, &x_t, t, &cv)?;
        let loss = fm_loss_var(&mut tape, v, &u)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { video_id, clip: index });
        }
        tape.backward(loss)?;
        self.model.params.accumulate_from(&tape);
        Ok((value, bundle))
    }

    /// Trains on the clips of `video` in chronological order, applying the
    /// optimizer once per accumulation window.
    pub fn train_video(&mut self, video: &ClipSequence) -> Result<VideoReport> {
        let n = video.clips.len();
        if n == 0 {
            return Err(Error::Contract(format!("video {} has no clips", video.video_id)));
        }
        let window = self.accumulation_window.unwrap_or(n);
        let mut stream = ConditioningStream::new(&self.model, &video.prompt_ids, &video.reference_image)?;
        let mut prev_bundle: Option<ConditioningBundle> = None;
        let mut clips = Vec::with_capacity(n);
        let mut updates = 0;
        self.model.params.zero_grad();
        for i in 0..n {
            let started = Instant::now();
            if let Some(bundle) = &prev_bundle {
                let c = conditioning_segment(&self.model, self.mode, &video.clips[i - 1], bundle, &mut self.rng)?;
                stream.push(&self.model, c)?;
            }
            let (loss, bundle) = self.clip_pass(&stream, &video.clips[i], video.video_id, i)?;
            prev_bundle = Some(bundle);
            let grad_norm = self.model.params.grad_norm();
            if (i + 1) % window == 0 || i + 1 == n {
                self.opt.apply(&mut self.model.params);
                self.model.params.zero_grad();
                updates += 1;
            }
            clips.push(ClipRecord {
                clip_index: i,
                loss,
                grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mean_loss = clips.iter().map(|c| c.loss).sum::<f64>() / n as f64;
        Ok(VideoReport {
            video_id: video.video_id,
            mean_loss,
            clips,
            updates,
        })
    }

    /// Per-clip gradients for `video` without touching the parameters. Uses
    /// the same random draws `train_video` would when no update happens
    /// mid-video.
    pub fn clip_gradients(&mut self, video: &ClipSequence) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut stream = ConditioningStream::new(&self.model, &video.prompt_ids, &video.reference_image)?;
        let mut prev_bundle: Option<ConditioningBundle> = None;
        let mut out = Vec::with_capacity(video.clips.len());
        for i in 0..video.clips.len() {
            if let Some(bundle) = &prev_bundle {
                let c = conditioning_segment(&self.model, self.mode, &video.clips[i - 1], bundle, &mut self.rng)?;
                stream.push(&self.model, c)?;
            }
            self.model.params.zero_grad();
            let (_, bundle) = self.clip_pass(&stream, &video.clips[i], video.video_id, i)?;
            prev_bundle = Some(bundle);
            out.push(self.model.params.iter().map(|(_, p)| p.grad.clone()).collect());
        }
        self.model.params.zero_grad();
        Ok(out)
    }
}

/// Videos sorted by clip count (ties by id) and the phase boundaries that
/// cap the clip count at 1, 2, 4, ….
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule {
    /// Corpus indices in curriculum order.
    pub order: Vec<usize>,
    /// `(max_clips, number of leading entries of order eligible)`, non-empty phases only.
    pub phases: Vec<(usize, usize)>,
}

impl CurriculumSchedule {
    /// Corpus index trained at `step` out of `total` steps.
    pub fn video_at(&self, step: usize, total: usize) -> usize {
        let p = self.phases.len();
        let phase = (step * p / total.max(1)).min(p - 1);
        let phase_start = (phase * total).div_ceil(p);
        let eligible = self.phases[phase].1;
        self.order[(step - phase_start.min(step)) % eligible]
    }
}

pub fn curriculum_order(corpus: &[ClipSequence]) -> Result<CurriculumSchedule> {
    if corpus.is_empty() {
        return Err(Error::Contract("curriculum needs a non-empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus[i].clips.len(), corpus[i].video_id));
    let longest = corpus[*order.last().unwrap()].clips.len();
    let mut phases = Vec::new();
    let mut cap = 1;
    loop {
        let eligible = order.iter().take_while(|&&i| corpus[i].clips.len() <= cap).count();
        if eligible > 0 && phases.last().is_none_or(|&(_, e)| e != eligible) {
            phases.push((cap, eligible));
        }
        if cap >= longest {
            break;
        }
        cap *= 2;
    }
    Ok(CurriculumSchedule { order, phases })
}

/// Corpus index for `step` without a curriculum: a fresh seeded permutation
/// per epoch, so the schedule depends only on `(seed, step)`.
pub fn shuffled_video_at(n_videos: usize, seed: u64, step: usize) -> usize {
    let epoch = step / n_videos;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut perm: Vec<usize> = (0..n_videos).collect();
    for i in (1..n_videos).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm[step % n_videos]
}

/// One row of the training loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub mode: ForcingMode,
    pub video_id: u64,
    pub clip_index: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Runs steps `start..cfg.steps` of a stage, one video per step. `observe`
/// sees every clip row and may stop the stage early by returning `Break`;
/// `after_step` gets the number of completed steps and the trainer.
/// Returns the number of completed steps.
pub fn run_stage(
    trainer: &mut Trainer,
    corpus: &[ClipSequence],
    cfg: &TrainConfig,
    start: usize,
    mut observe: impl FnMut(&LogRow) -> ControlFlow<()>,
    mut after_step: impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<usize> {
    if corpus.is_empty() {
        return Err(Error::Contract("training needs a non-empty corpus".into()));
    }
    let schedule = if cfg.curriculum_on { Some(curriculum_order(corpus)?) } else { None };
    for step in start..cfg.steps {
        let idx = match &schedule {
            Some(s) => s.video_at(step, cfg.steps),
            None => shuffled_video_at(corpus.len(), cfg.seed, step),
        };
        let report = trainer.train_video(&corpus[idx])?;
        let mut stop = false;
        for c in &report.clips {
            let row = LogRow {
                step,
                stage: cfg.stage,
                mode: trainer.mode,
                video_id: report.video_id,
                clip_index: c.clip_index,
                loss: c.loss,
                grad_norm: c.grad_norm,
                wall_ms: c.wall_ms,
            };
            stop |= observe(&row).is_break();
        }
        after_step(step + 1, trainer)?;
        if stop {
            return Ok(step + 1);
        }
    }
    Ok(cfg.steps.max(start))
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub stage1: Checkpoint,
    pub stage2: Option<Checkpoint>,
    pub log: Vec<LogRow>,
}

/// Stage 1 (as configured, normally Teacher on all parameters) followed by
/// an optional stage 2 starting from the stage-1 weights.
pub fn run_two_stage(
    model: Model,
    corpus: &[ClipSequence],
    stage1: &TrainConfig,
    stage2: Option<&TrainConfig>,
) -> Result<TwoStageOutput> {
    let mut log = Vec::new();
    let mut trainer = Trainer::new(model, stage1)?;
    let done = run_stage(
        &mut trainer,
        corpus,
        stage1,
        0,
        |r| {
            log.push(r.clone());
            ControlFlow::Continue(())
        },
        |_, _| Ok(()),
    )?;
    let first = Checkpoint {
        stage: stage1.stage.tag().into(),
        step: done as u64,
        trainer,
    };
    let second = match stage2 {
        None => None,
        Some(cfg) => {
            let mut trainer = Trainer::new(first.trainer.model.clone(), cfg)?;
            let done = run_stage(
                &mut trainer,
                corpus,
                cfg,
                0,
                |r| {
                    log.push(r.clone());
                    ControlFlow::Continue(())
                },
                |_, _| Ok(()),
            )?;
            Some(Checkpoint {
                stage: cfg.stage.tag().into(),
                step: done as u64,
                trainer,
            })
        }
    };
    Ok(TwoStageOutput {
        stage1: first,
        stage2: second,
        log,
    })
}

/// Loss log as CSV. Wall-clock times are written as 0 unless `wall_clock`,
/// keeping logs byte-reproducible.
pub fn write_loss_csv<W: std::io::Write>(out: W, rows: &[LogRow], wall_clock: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["step", "stage", "mode", "video_id", "clip_index", "loss", "grad_norm", "wall_ms"])
        .map_err(csv_err)?;
    for r in rows {
        let wall = if wall_clock { r.wall_ms } else { 0.0 };
        w.write_record([
            r.step.to_string(),
            r.stage.tag().to_string(),
            r.mode.to_string(),
            r.video_id.to_string(),
            r.clip_index.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            wall.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

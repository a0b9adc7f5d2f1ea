//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::data::{default_histogram, ClipHistogram};
use crate::error::{Error, Result};
use crate::memorypack::SqueezeVariant;
use crate::trainer::{ForcingMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub histogram: ClipHistogram,
    pub seed: u64,
    /// Read the corpus from here instead of synthesizing it.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub modes: Vec<ForcingMode>,
    pub seeds: Vec<u64>,
    pub segments: usize,
    pub sample_steps: usize,
    /// Number of corpus videos (lowest ids) to roll out.
    pub videos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub segments: usize,
    pub mode: ForcingMode,
    pub sample_steps: usize,
    /// Seed of the synthetic scene whose prompt and first frame condition the rollout.
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub variants: Vec<SqueezeVariant>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Record real wall-clock times in the loss log (breaks byte equality).
    pub wall_clock: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: TrainConfig,
    pub stage2: Option<TrainConfig>,
    /// Write a resumable checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            wall_clock: false,
            model: ModelConfig::default(),
            data: DataConfig {
                histogram: default_histogram(),
                seed: 0,
                dir: None,
            },
            stage1: TrainConfig::stage1(0),
            stage2: Some(TrainConfig::stage2(0)),
            checkpoint_every: 0,
            eval: EvalConfig {
                modes: vec![ForcingMode::Student(10)],
                seeds: vec![0],
                segments: 16,
                sample_steps: 10,
                videos: 10,
            },
            generate: GenerateConfig {
                segments: 16,
                mode: ForcingMode::Student(10),
                sample_steps: 10,
                scene_seed: 0,
            },
            bench: BenchConfig {
                lengths: vec![8, 16, 32, 64],
                variants: vec![SqueezeVariant::A, SqueezeVariant::B, SqueezeVariant::C],
                repeats: 20,
            },
        }
    }
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| Error::config(key, format!("bad list entry {s:?}"))))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got {raw:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "given twice"));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a missing or unreadable file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        if let Some(s) = &self.stage2 {
            s.validate()?;
        }
        if self.data.histogram.iter().all(|&(_, k)| k == 0) || self.data.histogram.iter().any(|&(c, _)| c == 0) {
            return Err(Error::config("data.histogram", "needs at least one video and positive clip counts"));
        }
        if self.eval.sample_steps == 0 || self.generate.sample_steps == 0 {
            return Err(Error::config("eval.sample_steps", "must be at least 1"));
        }
        Ok(())
    }

    fn train_key(stage: &mut TrainConfig, key: &str, full: &str, value: &str) -> Result<()> {
        let err = |r: String| Error::config(full, r);
        match key {
            "steps" => stage.steps = value.parse().map_err(|e| err(format!("{value:?}: {e}")))?,
            "lr" => stage.learning_rate = value.parse().map_err(|e| err(format!("{value:?}: {e}")))?,
            "mode" => stage.mode = value.parse().map_err(|_| err(format!("{value:?} is not teacher, direct or student:N")))?,
            "curriculum" => stage.curriculum_on = value.parse().map_err(|e| err(format!("{value:?}: {e}")))?,
            "accumulation" => {
                stage.accumulation_window = match value {
                    "all" => None,
                    n => Some(n.parse().map_err(|e| err(format!("{value:?}: {e}")))?),
                }
            }
            _ => return Err(Error::config(full, "unknown key")),
        }
        Ok(())
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |r: String| Error::config(key, r);
        let num = |v: &str| v.parse::<u64>().map_err(|e| Error::config(key, format!("{v:?}: {e}")));
        let size = |v: &str| v.parse::<usize>().map_err(|e| Error::config(key, format!("{v:?}: {e}")));
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        if let Some(k) = key.strip_prefix("stage1.") {
            return Self::train_key(&mut self.stage1, k, key, value);
        }
        if let Some(k) = key.strip_prefix("stage2.") {
            if k == "enabled" {
                let on: bool = value.parse().map_err(|e| err(format!("{value:?}: {e}")))?;
                self.stage2 = match (on, self.stage2.take()) {
                    (true, s) => Some(s.unwrap_or_else(|| TrainConfig::stage2(self.seed))),
                    (false, _) => None,
                };
                return Ok(());
            }
            let mut s = self.stage2.take().unwrap_or_else(|| TrainConfig::stage2(self.seed));
            let r = Self::train_key(&mut s, k, key, value);
            self.stage2 = Some(s);
            return r;
        }
        match key {
            "seed" => {
                self.seed = num(value)?;
                self.stage1.seed = self.seed;
                if let Some(s) = &mut self.stage2 {
                    s.seed = self.seed.wrapping_add(1);
                }
            }
            "out" => self.out = PathBuf::from(value),
            "log.wall_clock" => self.wall_clock = value.parse().map_err(|e| err(format!("{value:?}: {e}")))?,
            "train.checkpoint_every" => self.checkpoint_every = size(value)?,
            "data.seed" => self.data.seed = num(value)?,
            "data.dir" => self.data.dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.histogram" => {
                self.data.histogram = list(key, value, |s| {
                    let (c, k) = s.split_once(':')?;
                    Some((c.trim().parse().ok()?, k.trim().parse().ok()?))
                })?
            }
            "eval.modes" => self.eval.modes = list(key, value, |s| s.parse().ok())?,
            "eval.seeds" => self.eval.seeds = list(key, value, |s| s.parse().ok())?,
            "eval.segments" => self.eval.segments = size(value)?,
            "eval.sample_steps" => self.eval.sample_steps = size(value)?,
            "eval.videos" => self.eval.videos = size(value)?,
            "generate.segments" => self.generate.segments = size(value)?,
            "generate.mode" => self.generate.mode = value.parse()?,
            "generate.sample_steps" => self.generate.sample_steps = size(value)?,
            "generate.scene_seed" => self.generate.scene_seed = num(value)?,
            "bench.lengths" => self.bench.lengths = list(key, value, |s| s.parse().ok())?,
            "bench.variants" => self.bench.variants = list(key, value, |s| s.parse().ok())?,
            "bench.repeats" => self.bench.repeats = size(value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn train_pairs(prefix: &str, s: &TrainConfig, out: &mut Vec<(String, String)>) {
        let acc = s.accumulation_window.map_or("all".to_string(), |a| a.to_string());
        for (k, v) in [
            ("steps", s.steps.to_string()),
            ("lr", s.learning_rate.to_string()),
            ("mode", s.mode.to_string()),
            ("curriculum", s.curriculum_on.to_string()),
            ("accumulation", acc),
        ] {
            out.push((format!("{prefix}.{k}"), v));
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("out".into(), self.out.display().to_string()),
            ("log.wall_clock".into(), self.wall_clock.to_string()),
        ];
        out.extend(self.model.pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        let hist: Vec<String> = self.data.histogram.iter().map(|(c, k)| format!("{c}:{k}")).collect();
        out.push(("data.histogram".into(), hist.join(",")));
        out.push(("data.seed".into(), self.data.seed.to_string()));
        out.push((
            "data.dir".into(),
            self.data.dir.as_ref().map_or(String::new(), |d| d.display().to_string()),
        ));
        Self::train_pairs("stage1", &self.stage1, &mut out);
        out.push(("stage2.enabled".into(), self.stage2.is_some().to_string()));
        if let Some(s) = &self.stage2 {
            Self::train_pairs("stage2", s, &mut out);
        }
        out.push(("train.checkpoint_every".into(), self.checkpoint_every.to_string()));
        out.push(("eval.modes".into(), join(&self.eval.modes)));
        out.push(("eval.seeds".into(), join(&self.eval.seeds)));
        out.push(("eval.segments".into(), self.eval.segments.to_string()));
        out.push(("eval.sample_steps".into(), self.eval.sample_steps.to_string()));
        out.push(("eval.videos".into(), self.eval.videos.to_string()));
        out.push(("generate.segments".into(), self.generate.segments.to_string()));
        out.push(("generate.mode".into(), self.generate.mode.to_string()));
        out.push(("generate.sample_steps".into(), self.generate.sample_steps.to_string()));
        out.push(("generate.scene_seed".into(), self.generate.scene_seed.to_string()));
        out.push(("bench.lengths".into(), join(&self.bench.lengths)));
        out.push(("bench.variants".into(), join(&self.bench.variants)));
        out.push(("bench.repeats".into(), self.bench.repeats.to_string()));
        out
    }

    /// The resolved configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_round_trip() {
        let text = "
            # comment
            seed = 7
            model.squeeze_variant = C   # trailing
            stage1.steps = 12
            stage1.accumulation = 2
            stage2.mode = student:5
            eval.modes = teacher,direct
            data.histogram = 1:2,3:1
            bench.lengths = 1,2
        ";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stage1.seed, 7);
        assert_eq!(c.stage2.as_ref().unwrap().mode, ForcingMode::Student(5));
        assert_eq!(c.model.squeeze_variant, SqueezeVariant::C);
        assert_eq!(c.stage1.accumulation_window, Some(2));
        assert_eq!(c.data.histogram, vec![(1, 2), (3, 1)]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn stage2_can_be_disabled() {
        let c = RunConfig::parse("stage2.enabled = false").unwrap();
        assert!(c.stage2.is_none());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("model.bogus = 1", "model.bogus"),
            ("stage1.steps = many", "stage1.steps"),
            ("stage1.accumulation = 0", "train.accumulation_window"),
            ("eval.modes = teacher,sideways", "eval.modes"),
            ("seed = 1\nseed = 2", "seed"),
            ("no equals sign", "line 1"),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/run.cfg")),
            Err(Error::Config { .. })
        ));
    }
}

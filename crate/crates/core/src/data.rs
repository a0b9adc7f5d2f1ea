//! Deterministic toy videos: one shape moving on a flat background with
//! reflective walls and an optional occlusion interval, cut into clips.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::Segment;
use crate::tensor::Tensor;

pub const OBJECT_SIZE: usize = 5;
pub const PROMPT_LEN: usize = 8;
pub const PROMPT_VOCAB: usize = 32;
const VELOCITY_CHOICES: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

const VIDEO_MAGIC: &[u8; 4] = b"PFVV";
const VIDEO_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Cross,
    Disc,
}

impl Shape {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Shape::Square),
            1 => Ok(Shape::Cross),
            2 => Ok(Shape::Disc),
            _ => Err(Error::Format(format!("shape code {c}"))),
        }
    }

    /// Whether cell `(dy, dx)` of the `OBJECT_SIZE²` sprite is filled.
    pub fn covers(self, dy: usize, dx: usize) -> bool {
        let c = (OBJECT_SIZE / 2) as i64;
        let (y, x) = (dy as i64 - c, dx as i64 - c);
        match self {
            Shape::Square => true,
            Shape::Cross => y == 0 || x == 0,
            Shape::Disc => (y * y + x * x) as f64 <= 2.5 * 2.5,
        }
    }
}

/// Frame geometry shared by the renderer and the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            frames_per_clip: 4,
            height: 16,
            width: 16,
            channels: 1,
        }
    }
}

impl Geometry {
    pub fn of(config: &crate::config::ModelConfig) -> Self {
        Geometry {
            frames_per_clip: config.frames_per_segment,
            height: config.frame_height,
            width: config.frame_width,
            channels: config.channels,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub object_intensity: f64,
    pub background_intensity: f64,
    /// Pixels per frame, `(vy, vx)`.
    pub velocity: (f64, f64),
    /// Frames `[start, end)` during which the object is hidden.
    pub occluder: Option<(usize, usize)>,
    pub n_clips: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, geom: &Geometry) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.object_intensity) || !unit.contains(&self.background_intensity) {
            return Err(Error::config("scene.intensity", "intensities must lie in [0, 1]"));
        }
        if self.n_clips == 0 {
            return Err(Error::config("scene.n_clips", "at least one clip"));
        }
        if !self.velocity.0.is_finite() || !self.velocity.1.is_finite() {
            return Err(Error::config("scene.velocity", "must be finite"));
        }
        if geom.height < OBJECT_SIZE || geom.width < OBJECT_SIZE {
            return Err(Error::config("scene", "frame smaller than the object"));
        }
        if let Some((a, b)) = self.occluder {
            if a >= b || b > self.n_clips * geom.frames_per_clip {
                return Err(Error::config("scene.occluder", "interval must be non-empty and inside the video"));
            }
        }
        Ok(())
    }

    fn occluded(&self, frame: usize) -> bool {
        matches!(self.occluder, Some((a, b)) if (a..b).contains(&frame))
    }

    /// Start position of the sprite's top-left corner.
    fn start(&self, geom: &Geometry) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ry = (geom.height - OBJECT_SIZE) as f64;
        let rx = (geom.width - OBJECT_SIZE) as f64;
        (rng.random_range(0.0..=ry), rng.random_range(0.0..=rx))
    }

    /// Integer top-left corner of the sprite at `frame`, after reflection.
    pub fn object_origin(&self, geom: &Geometry, frame: usize) -> (usize, usize) {
        let (y0, x0) = self.start(geom);
        let f = frame as f64;
        let y = reflect(y0 + self.velocity.0 * f, (geom.height - OBJECT_SIZE) as f64);
        let x = reflect(x0 + self.velocity.1 * f, (geom.width - OBJECT_SIZE) as f64);
        (y.round() as usize, x.round() as usize)
    }

    /// Pixel mask of the visible object at `frame` (`None` while occluded).
    pub fn object_mask(&self, geom: &Geometry, frame: usize) -> Option<Vec<bool>> {
        if self.occluded(frame) {
            return None;
        }
        let (oy, ox) = self.object_origin(geom, frame);
        let mut mask = vec![false; geom.height * geom.width];
        for dy in 0..OBJECT_SIZE {
            for dx in 0..OBJECT_SIZE {
                if self.shape.covers(dy, dx) {
                    mask[(oy + dy) * geom.width + ox + dx] = true;
                }
            }
        }
        Some(mask)
    }

    pub fn render_frame(&self, geom: &Geometry, frame: usize) -> Vec<f64> {
        let bg = 2.0 * self.background_intensity - 1.0;
        let fg = 2.0 * self.object_intensity - 1.0;
        let mut out = vec![bg; geom.frame_len()];
        if let Some(mask) = self.object_mask(geom, frame) {
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    for c in 0..geom.channels {
                        out[p * geom.channels + c] = fg;
                    }
                }
            }
        }
        out
    }

    /// Attribute tokens: shape, intensities, motion and occlusion.
    pub fn prompt_ids(&self, geom: &Geometry) -> Vec<usize> {
        let bucket4 = |v: f64| ((v * 4.0).floor() as usize).min(3);
        let vel = |v: f64| {
            VELOCITY_CHOICES
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                .map(|(i, _)| i)
                .unwrap()
        };
        let total = self.n_clips * geom.frames_per_clip;
        let (flag, start_b, len_b) = match self.occluder {
            Some((a, b)) => (1, (a * 4 / total).min(3), ((b - a) / 4).min(3)),
            None => (0, 0, 0),
        };
        vec![
            self.shape.code() as usize,
            3 + bucket4(self.object_intensity),
            7 + bucket4(self.background_intensity),
            11 + vel(self.velocity.0),
            16 + vel(self.velocity.1),
            21 + flag,
            23 + start_b,
            27 + len_b,
        ]
    }
}

/// Folds `v` into `[0, range]` as a ball bouncing between two walls.
fn reflect(v: f64, range: f64) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * range;
    let m = v.rem_euclid(period);
    if m > range {
        period - m
    } else {
        m
    }
}

/// One training video: consecutive clips plus prompt and reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSequence {
    pub video_id: u64,
    pub clips: Vec<Segment>,
    pub prompt_ids: Vec<usize>,
    pub reference_image: Tensor,
    pub spec: SceneSpec,
}

impl ClipSequence {
    pub fn geometry(&self) -> Geometry {
        let d = self.reference_image.dims();
        Geometry {
            frames_per_clip: self.clips.first().map_or(0, |c| c.dims()[0]),
            height: d[0],
            width: d[1],
            channels: d[2],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.clips.iter().map(|c| c.dims()[0]).sum()
    }

    /// All frames in order, each `H·W·C` long.
    pub fn frames(&self) -> Vec<Vec<f64>> {
        let fl = self.reference_image.len();
        self.clips
            .iter()
            .flat_map(|c| c.data().chunks(fl).map(<[f64]>::to_vec).collect::<Vec<_>>())
            .collect()
    }
}

pub fn render_video(spec: &SceneSpec, geom: &Geometry, video_id: u64) -> Result<ClipSequence> {
    spec.validate(geom)?;
    let f = geom.frames_per_clip;
    let dims = [f, geom.height, geom.width, geom.channels];
    let clips = (0..spec.n_clips)
        .map(|c| {
            let data: Vec<f64> = (0..f).flat_map(|k| spec.render_frame(geom, c * f + k)).collect();
            Tensor::new(dims.to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference_image = Tensor::new(vec![geom.height, geom.width, geom.channels], spec.render_frame(geom, 0))?;
    Ok(ClipSequence {
        video_id,
        clips,
        prompt_ids: spec.prompt_ids(geom),
        reference_image,
        spec: spec.clone(),
    })
}

/// Draws a scene with `n_clips` clips from `seed`.
pub fn random_spec(n_clips: usize, seed: u64, geom: &Geometry) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
    let shape = [Shape::Square, Shape::Cross, Shape::Disc][rng.random_range(0..3)];
    let object_intensity = rng.random_range(10..=16) as f64 / 16.0;
    let background_intensity = rng.random_range(0..=5) as f64 / 16.0;
    let velocity = (
        VELOCITY_CHOICES[rng.random_range(0..5)],
        VELOCITY_CHOICES[rng.random_range(0..5)],
    );
    let total = n_clips * geom.frames_per_clip;
    let occluder = if total >= 4 && rng.random_bool(0.3) {
        let start = rng.random_range(1..total);
        let len = rng.random_range(1..=(total - start).min(8));
        Some((start, start + len))
    } else {
        None
    };
    SceneSpec {
        shape,
        object_intensity,
        background_intensity,
        velocity,
        occluder,
        n_clips,
        seed,
    }
}

/// Clip-count histogram: `(clips_per_video, number_of_videos)`.
pub type ClipHistogram = Vec<(usize, usize)>;

pub fn default_histogram() -> ClipHistogram {
    vec![(1, 10), (2, 20), (4, 20)]
}

/// Renders a corpus with exactly the requested clip-count histogram. Videos
/// get distinct seeds derived from `seed`, ids `0..n`.
pub fn make_corpus(histogram: &[(usize, usize)], seed: u64, geom: &Geometry) -> Result<Vec<ClipSequence>> {
    let n: usize = histogram.iter().map(|&(_, k)| k).sum();
    if n == 0 {
        return Err(Error::config("data.histogram", "corpus must contain at least one video"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut corpus = Vec::with_capacity(n);
    for &(clips, count) in histogram {
        for _ in 0..count {
            let mut s: u64 = rng.random();
            while !used.insert(s) {
                s = rng.random();
            }
            let id = corpus.len() as u64;
            corpus.push(render_video(&random_spec(clips, s, geom), geom, id)?);
        }
    }
    Ok(corpus)
}

/// Binary video: header (magic, version, dims, scene fields, prompt ids)
/// followed by the reference frame and all clip frames as row-major `f32`.
pub fn write_video(path: &Path, video: &ClipSequence, geom: &Geometry) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(VIDEO_MAGIC);
    w.u32(VIDEO_VERSION)?;
    w.u64(video.video_id)?;
    w.u32(video.clips.len() as u32)?;
    for d in [geom.frames_per_clip, geom.height, geom.width, geom.channels] {
        w.u32(d as u32)?;
    }
    let s = &video.spec;
    w.u8(s.shape.code())?;
    w.f64(s.object_intensity)?;
    w.f64(s.background_intensity)?;
    w.f64(s.velocity.0)?;
    w.f64(s.velocity.1)?;
    let (flag, a, b) = s.occluder.map_or((0, 0, 0), |(a, b)| (1, a, b));
    w.u8(flag)?;
    w.u64(a as u64)?;
    w.u64(b as u64)?;
    w.u64(s.n_clips as u64)?;
    w.u64(s.seed)?;
    w.u32(video.prompt_ids.len() as u32)?;
    for &id in &video.prompt_ids {
        w.u32(id as u32)?;
    }
    w.f32s(video.reference_image.data())?;
    for c in &video.clips {
        w.f32s(c.data())?;
    }
    fs::write(path, w.0)?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<(ClipSequence, Geometry)> {
    let bytes = fs::read(path)?;
    let mut r = Reader(bytes.as_slice());
    if &r.bytes::<4>()? != VIDEO_MAGIC {
        return Err(Error::Format(format!("{}: not a video file", path.display())));
    }
    let version = r.u32()?;
    if version != VIDEO_VERSION {
        return Err(Error::Version {
            found: version,
            expected: VIDEO_VERSION,
        });
    }
    let video_id = r.u64()?;
    let n_clips = r.u32()? as usize;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let geom = Geometry {
        frames_per_clip: dims[0],
        height: dims[1],
        width: dims[2],
        channels: dims[3],
    };
    let shape = Shape::from_code(r.u8()?)?;
    let object_intensity = r.f64()?;
    let background_intensity = r.f64()?;
    let velocity = (r.f64()?, r.f64()?);
    let flag = r.u8()?;
    let (a, b) = (r.u64()? as usize, r.u64()? as usize);
    let spec_clips = r.u64()? as usize;
    let seed = r.u64()?;
    let n_ids = r.u32()? as usize;
    let prompt_ids = (0..n_ids).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let reference_image = Tensor::new(vec![geom.height, geom.width, geom.channels], r.f32s(geom.frame_len())?)?;
    let clip_len = geom.frames_per_clip * geom.frame_len();
    let clips = (0..n_clips)
        .map(|_| Tensor::new(dims.to_vec(), r.f32s(clip_len)?))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let spec = SceneSpec {
        shape,
        object_intensity,
        background_intensity,
        velocity,
        occluder: (flag == 1).then_some((a, b)),
        n_clips: spec_clips,
        seed,
    };
    Ok((
        ClipSequence {
            video_id,
            clips,
            prompt_ids,
            reference_image,
            spec,
        },
        geom,
    ))
}

pub fn video_file_name(video_id: u64) -> String {
    format!("video_{video_id:05}.pfv")
}

pub fn write_corpus(dir: &Path, corpus: &[ClipSequence], geom: &Geometry) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in corpus {
        write_video(&dir.join(video_file_name(v.video_id)), v, geom)?;
    }
    Ok(())
}

/// Loads every `*.pfv` file in `dir`, ordered by video id.
pub fn read_corpus(dir: &Path) -> Result<Vec<ClipSequence>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pfv") {
            out.push(read_video(&path)?.0);
        }
    }
    out.sort_by_key(|v| v.video_id);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: Shape::Cross,
            object_intensity: 1.0,
            background_intensity: 0.25,
            velocity: (0.5, 1.0),
            occluder: None,
            n_clips: 3,
            seed: 7,
        }
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let g = Geometry::default();
        let s = SceneSpec {
            velocity: (0.0, 0.0),
            ..spec()
        };
        let v = render_video(&s, &g, 0).unwrap();
        let frames = v.frames();
        assert_eq!(frames.len(), 12);
        assert!(frames.iter().all(|f| f == &frames[0]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let g = Geometry::default();
        assert_eq!(render_video(&spec(), &g, 3).unwrap(), render_video(&spec(), &g, 3).unwrap());
    }

    #[test]
    fn occluded_frames_hide_the_object() {
        let g = Geometry::default();
        let s = SceneSpec {
            occluder: Some((8, 10)),
            n_clips: 4,
            ..spec()
        };
        let v = render_video(&s, &g, 0).unwrap();
        let fg = 2.0 * s.object_intensity - 1.0;
        for (k, f) in v.frames().iter().enumerate() {
            // oracle: object pixels are exactly the spec's mask
            let has_object = f.contains(&fg);
            assert_eq!(has_object, !(8..10).contains(&k), "frame {k}");
            if let Some(mask) = s.object_mask(&g, k) {
                for (p, &m) in mask.iter().enumerate() {
                    assert_eq!(f[p] == fg, m);
                }
            }
        }
    }

    #[test]
    fn reference_image_is_first_frame() {
        let g = Geometry::default();
        let v = render_video(&spec(), &g, 0).unwrap();
        assert_eq!(v.reference_image.data(), &v.clips[0].data()[..256]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let g = Geometry::default();
        let bad = [
            SceneSpec {
                object_intensity: 1.5,
                ..spec()
            },
            SceneSpec {
                occluder: Some((4, 40)),
                ..spec()
            },
            SceneSpec {
                occluder: Some((5, 5)),
                ..spec()
            },
            SceneSpec { n_clips: 0, ..spec() },
        ];
        for s in bad {
            assert!(matches!(render_video(&s, &g, 0), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn reflection_stays_in_range() {
        for i in -100..100 {
            let r = reflect(i as f64 * 0.7, 11.0);
            assert!((0.0..=11.0).contains(&r));
        }
        assert_eq!(reflect(12.0, 11.0), 10.0);
        assert_eq!(reflect(-1.0, 11.0), 1.0);
    }

    #[test]
    fn prompt_ids_fit_vocabulary() {
        let g = Geometry::default();
        for seed in 0..50 {
            let ids = random_spec(4, seed, &g).prompt_ids(&g);
            assert_eq!(ids.len(), PROMPT_LEN);
            assert!(ids.iter().all(|&i| i < PROMPT_VOCAB));
        }
    }

    #[test]
    fn corpus_histogram_and_seeds() {
        let g = Geometry::default();
        let c = make_corpus(&[(1, 10), (4, 10), (16, 5)], 1, &g).unwrap();
        assert_eq!(c.len(), 25);
        for (want, n) in [(1, 10), (4, 10), (16, 5)] {
            assert_eq!(c.iter().filter(|v| v.clips.len() == want).count(), n);
        }
        let seeds: BTreeSet<_> = c.iter().map(|v| v.spec.seed).collect();
        assert_eq!(seeds.len(), 25);
        assert!(c
            .iter()
            .flat_map(|v| v.clips.iter())
            .all(|clip| clip.data().iter().all(|p| (-1.0..=1.0).contains(p))));
        assert!(make_corpus(&[], 1, &g).is_err());
    }

    #[test]
    fn video_file_round_trip() {
        let g = Geometry::default();
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus(&[(2, 3)], 5, &g).unwrap();
        write_corpus(dir.path(), &corpus, &g).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn truncated_video_file_is_rejected() {
        let g = Geometry::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pfv");
        write_video(&p, &render_video(&spec(), &g, 0).unwrap(), &g).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_video(&p), Err(Error::Format(_))));
    }
}

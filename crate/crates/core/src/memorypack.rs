//! Short- and long-term context retrieval.
//!
//! FramePack keeps the newest segments at decreasing spatial resolution under
//! a constant token budget. SemanticPack folds each new segment into a fixed
//! `K × d` memory: `ψ_{n+1} = Squeeze(ψ_n, Memorize(x^n))`, so one update costs
//! the same no matter how many segments were absorbed before it.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{multi_head_attention, randn, AttnParams, Linear, Model, TokenSequence};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-6;

/// Wiring of the Squeeze cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SqueezeVariant {
    /// Visual tokens query the memory.
    #[default]
    A,
    /// Memory queries the visual tokens.
    B,
    /// As `B`, but the first update queries with `[ψ ‖ visual]` merged back to K tokens.
    C,
}

impl fmt::Display for SqueezeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SqueezeVariant::A => "A",
            SqueezeVariant::B => "B",
            SqueezeVariant::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for SqueezeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(SqueezeVariant::A),
            "B" | "b" => Ok(SqueezeVariant::B),
            "C" | "c" => Ok(SqueezeVariant::C),
            other => Err(Error::config("variant", format!("unknown squeeze variant {other:?}"))),
        }
    }
}

impl SqueezeVariant {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SqueezeVariant::A),
            1 => Ok(SqueezeVariant::B),
            2 => Ok(SqueezeVariant::C),
            _ => Err(Error::Format(format!("squeeze variant code {c}"))),
        }
    }
}

/// Long-term memory ψ: always exactly `K × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub psi: Tensor,
    pub n_segments_absorbed: usize,
}

/// Recency-ranked spatial pooling factors for the short-term context.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePackSchedule {
    /// `(recency_rank, pooling_factor)`, rank 0 = newest segment.
    pub ranks: Vec<(usize, usize)>,
    pub token_budget: usize,
    grid: (usize, usize),
}

impl FramePackSchedule {
    pub fn new(factors: Vec<usize>, grid: (usize, usize), frames_per_segment: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::config("model.framepack_factors", "schedule must not be empty"));
        }
        let mut prev = 1;
        for &f in &factors {
            let side = pool_side(f);
            if side.is_none() || f < prev {
                return Err(Error::config(
                    "model.framepack_factors",
                    "factors must be non-decreasing powers of 4",
                ));
            }
            let side = side.unwrap();
            if !grid.0.is_multiple_of(side) || !grid.1.is_multiple_of(side) {
                return Err(Error::config("model.framepack_factors", "pooling must tile the patch grid"));
            }
            prev = f;
        }
        let per_segment = frames_per_segment * grid.0 * grid.1;
        Ok(FramePackSchedule {
            token_budget: factors.iter().map(|f| per_segment / f).sum(),
            ranks: factors.into_iter().enumerate().collect(),
            grid,
        })
    }

    pub fn depth(&self) -> usize {
        self.ranks.len()
    }

    /// Compressed token count for `n_frames` frames at pooling factor `f`.
    pub fn pooled_tokens(&self, n_frames: usize, f: usize) -> usize {
        n_frames * self.grid.0 * self.grid.1 / f
    }

    /// Constant `[L_out × L_in]` averaging matrix for one segment.
    fn pooling_matrix(&self, n_frames: usize, f: usize) -> Tensor {
        let side = pool_side(f).expect("validated");
        let (gh, gw) = self.grid;
        let (ph, pw) = (gh / side, gw / side);
        let l_in = n_frames * gh * gw;
        let l_out = n_frames * ph * pw;
        let mut m = Tensor::zeros(&[l_out, l_in]);
        let w = 1.0 / f as f64;
        for fr in 0..n_frames {
            for y in 0..gh {
                for x in 0..gw {
                    let src = (fr * gh + y) * gw + x;
                    let dst = (fr * ph + y / side) * pw + x / side;
                    m.data_mut()[dst * l_in + src] = w;
                }
            }
        }
        m
    }
}

fn pool_side(f: usize) -> Option<usize> {
    if f == 0 || !f.is_power_of_two() || !f.trailing_zeros().is_multiple_of(2) {
        return None;
    }
    Some(1 << (f.trailing_zeros() / 2))
}

/// FramePack on the tape. History is oldest → newest; the output is in the
/// same chronological order, with the newest segment at full resolution.
pub(crate) fn framepack_var(
    tape: &mut Tape,
    schedule: &FramePackSchedule,
    history: &[(Var, Vec<i64>)],
) -> Result<Option<(Var, Vec<i64>)>> {
    if history.is_empty() {
        return Ok(None);
    }
    let per_frame = schedule.grid.0 * schedule.grid.1;
    let kept = history.len().min(schedule.depth());
    let mut parts = Vec::with_capacity(kept);
    let mut positions = Vec::new();
    for (offset, (tokens, pos)) in history[history.len() - kept..].iter().enumerate() {
        let rank = kept - 1 - offset;
        let factor = schedule.ranks[rank].1;
        let n_tokens = tape.dims(*tokens)[0];
        if !n_tokens.is_multiple_of(per_frame) || pos.len() != n_tokens {
            return Err(Error::shape("framepack", tape.dims(*tokens), &[per_frame]));
        }
        let n_frames = n_tokens / per_frame;
        if factor == 1 {
            parts.push(*tokens);
            positions.extend_from_slice(pos);
            continue;
        }
        let pool = schedule.pooling_matrix(n_frames, factor);
        positions.extend(pooled_positions(&pool, pos));
        let pool = tape.constant(pool);
        parts.push(tape.matmul(pool, *tokens)?);
    }
    let out = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    Ok(Some((out, positions)))
}

/// Mean source position of each pooled token, rounded to the nearest frame.
fn pooled_positions(pool: &Tensor, pos: &[i64]) -> Vec<i64> {
    let (rows, cols) = (pool.dims()[0], pool.dims()[1]);
    (0..rows)
        .map(|r| {
            let row = &pool.data()[r * cols..(r + 1) * cols];
            let (mut sum, mut n) = (0i64, 0i64);
            for (w, p) in row.iter().zip(pos) {
                if *w != 0.0 {
                    sum += p;
                    n += 1;
                }
            }
            (sum as f64 / n as f64).round() as i64
        })
        .collect()
}

/// Compresses a history of token sequences into the short-term context.
/// An empty history yields `None`.
pub fn framepack_compress(
    schedule: &FramePackSchedule,
    history: &[TokenSequence],
) -> Result<Option<TokenSequence>> {
    let mut tape = Tape::no_grad();
    let vars: Vec<_> = history
        .iter()
        .map(|s| (tape.constant(s.tokens.clone()), s.positions.clone()))
        .collect();
    match framepack_var(&mut tape, schedule, &vars)? {
        Some((v, pos)) => Ok(Some(TokenSequence::new(tape.value(v).clone(), pos)?)),
        None => Ok(None),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MemoryPackParams {
    init_weight: ParamId,
    init_bias: ParamId,
    memorize_attn: AttnParams,
    memorize_proj: Linear,
    squeeze_attn: AttnParams,
    squeeze_merge: ParamId,
}

impl MemoryPackParams {
    pub(crate) fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = c.d_model;
        let k = c.memory_tokens;
        let n_ctx = c.prompt_len + c.tokens_per_frame();
        let per_window = k / (c.tokens_per_segment() / c.memorize_window);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        MemoryPackParams {
            init_weight: store.add("memory.init.weight", randn(&[k, n_ctx], inv(n_ctx), rng)),
            init_bias: store.add("memory.init.bias", Tensor::zeros(&[k, d])),
            memorize_attn: AttnParams::new(store, "memory.memorize.attn", d, rng),
            memorize_proj: Linear::new(store, "memory.memorize.proj", d, per_window * d, inv(d), rng),
            squeeze_attn: AttnParams::new(store, "memory.squeeze.attn", d, rng),
            squeeze_merge: store.add("memory.squeeze.merge", randn(&[k, 2 * k], inv(2 * k), rng)),
        }
    }
}

impl Model {
    pub fn framepack_schedule(&self) -> FramePackSchedule {
        let c = &self.config;
        FramePackSchedule::new(c.framepack_factors.clone(), c.grid(), c.frames_per_segment)
            .expect("validated with the config")
    }

    /// ψ₀: token-axis projection of `[prompt ‖ image]` down to K tokens.
    pub(crate) fn init_memory_var(&self, tape: &mut Tape, prompt: Var, image: Var) -> Result<Var> {
        let (pd, id) = (tape.dims(prompt).to_vec(), tape.dims(image).to_vec());
        if pd.len() != 2 || id.len() != 2 || pd[1] != id[1] || pd[1] != self.config.d_model {
            return Err(Error::shape("init_memory", &pd, &id));
        }
        let p = &self.memory;
        let w = tape.param(&self.params, p.init_weight);
        if tape.dims(w)[1] != pd[0] + id[0] {
            return Err(Error::shape("init_memory", tape.dims(w), &[pd[0] + id[0]]));
        }
        let cat = tape.concat_rows(&[prompt, image])?;
        let psi = tape.matmul(w, cat)?;
        let b = tape.param(&self.params, p.init_bias);
        tape.add(psi, b)
    }

    /// Windowed self-attention (no cross-window logits), then per-window mean
    /// pooling and projection to `K / n_windows` tokens each.
    pub(crate) fn memorize_var(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        self.memorize_windowed(tape, tokens, self.config.memorize_window)
    }

    fn memorize_windowed(&self, tape: &mut Tape, tokens: Var, window: usize) -> Result<Var> {
        let c = &self.config;
        let (l, d) = (tape.dims(tokens)[0], c.d_model);
        let k = c.memory_tokens;
        if l < k {
            return Err(Error::config("model.memory_tokens", format!("{l} tokens < K = {k}")));
        }
        if window == 0 || l % window != 0 || !k.is_multiple_of(l / window) {
            return Err(Error::config("model.memorize_window", format!("{l} tokens in windows of {window}")));
        }
        let n_windows = l / window;
        let per_window = k / n_windows;
        let proj_out = self.params.value(self.memory.memorize_proj.weight).dims()[1];
        if proj_out != per_window * d {
            return Err(Error::config("model.memorize_window", "projection sized for another window count"));
        }
        let mean_row = tape.constant(Tensor::full(&[1, window], 1.0 / window as f64));
        let mut out = Vec::with_capacity(n_windows);
        for w in 0..n_windows {
            let xw = tape.slice_rows(tokens, w * window, (w + 1) * window)?;
            let h = tape.normalize(xw, NORM_EPS)?;
            let a = multi_head_attention(tape, &self.params, &self.memory.memorize_attn, h, h, c.n_heads, None)?;
            let y = tape.add(xw, a)?;
            let pooled = tape.matmul(mean_row, y)?;
            let z = self.memory.memorize_proj.forward(tape, &self.params, pooled)?;
            out.push(tape.reshape(z, &[per_window, d])?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            tape.concat_rows(&out)
        }
    }

    pub(crate) fn squeeze_var(
        &self,
        tape: &mut Tape,
        psi: Var,
        mem: Var,
        absorbed: usize,
        variant: SqueezeVariant,
    ) -> Result<Var> {
        let k = self.config.memory_tokens;
        let want = [k, self.config.d_model];
        if tape.dims(psi) != want || tape.dims(mem) != want {
            return Err(Error::shape("squeeze", tape.dims(psi), tape.dims(mem)));
        }
        let heads = self.config.n_heads;
        let attn = &self.memory.squeeze_attn;
        let (query, kv) = match variant {
            SqueezeVariant::A => (mem, psi),
            SqueezeVariant::B => (psi, mem),
            SqueezeVariant::C if absorbed == 0 => {
                let cat = tape.concat_rows(&[psi, mem])?;
                let merge = tape.param(&self.params, self.memory.squeeze_merge);
                (tape.matmul(merge, cat)?, mem)
            }
            SqueezeVariant::C => (psi, mem),
        };
        let qn = tape.normalize(query, NORM_EPS)?;
        let kvn = tape.normalize(kv, NORM_EPS)?;
        let a = multi_head_attention(tape, &self.params, attn, qn, kvn, heads, None)?;
        tape.add(query, a)
    }

    pub fn init_memory(&self, prompt_emb: &Tensor, image_emb: &Tensor) -> Result<MemoryState> {
        let mut tape = Tape::no_grad();
        let p = tape.constant(prompt_emb.clone());
        let i = tape.constant(image_emb.clone());
        let psi = self.init_memory_var(&mut tape, p, i)?;
        Ok(MemoryState {
            psi: tape.value(psi).clone(),
            n_segments_absorbed: 0,
        })
    }

    pub fn memorize(&self, segment: &TokenSequence) -> Result<Tensor> {
        self.memorize_with_window(segment, self.config.memorize_window)
    }

    /// Memorize with an explicit window size (must match the projection the
    /// model was built with).
    pub fn memorize_with_window(&self, segment: &TokenSequence, window: usize) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(segment.tokens.clone());
        let m = self.memorize_windowed(&mut tape, x, window)?;
        Ok(tape.value(m).clone())
    }

    pub fn squeeze(&self, state: &MemoryState, mem_tokens: &Tensor, variant: SqueezeVariant) -> Result<MemoryState> {
        let mut tape = Tape::no_grad();
        let psi = tape.constant(state.psi.clone());
        let mem = tape.constant(mem_tokens.clone());
        let out = self.squeeze_var(&mut tape, psi, mem, state.n_segments_absorbed, variant)?;
        Ok(MemoryState {
            psi: tape.value(out).clone(),
            n_segments_absorbed: state.n_segments_absorbed + 1,
        })
    }

    /// Reference point for the memory's cost: one multi-head self-attention
    /// pass over every history token, as a model without compression would
    /// run per generated segment.
    pub fn full_attention_context(&self, history: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(history.clone());
        let xn = tape.normalize(x, NORM_EPS)?;
        let a = multi_head_attention(&mut tape, &self.params, &self.memory.memorize_attn, xn, xn, self.config.n_heads, None)?;
        Ok(tape.value(a).clone())
    }

    /// `ψ_{n+1} = Squeeze(ψ_n, Memorize(x^n))` with the configured variant.
    pub fn update_memory(&self, state: &MemoryState, segment: &TokenSequence) -> Result<MemoryState> {
        let mem = self.memorize(segment)?;
        self.squeeze(state, &mem, self.config.squeeze_variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n_frames: usize, start: i64, seed: u64) -> TokenSequence {
        let tokens = Tensor::from_fn(&[n_frames * 16, 64], |i| ((i as u64 * 2654435761 + seed) % 997) as f64 / 997.0);
        let positions = (0..n_frames * 16).map(|i| start + (i / 16) as i64).collect();
        TokenSequence::new(tokens, positions).unwrap()
    }

    fn schedule() -> FramePackSchedule {
        FramePackSchedule::new(vec![1, 4, 16], (4, 4), 4).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(schedule().token_budget, 84);
        assert!(FramePackSchedule::new(vec![1, 2], (4, 4), 4).is_err());
        assert!(FramePackSchedule::new(vec![4, 1], (4, 4), 4).is_err());
        assert!(FramePackSchedule::new(vec![1, 64], (4, 4), 4).is_err());
        assert!(FramePackSchedule::new(vec![], (4, 4), 4).is_err());
    }

    #[test]
    fn empty_history_gives_no_context() {
        assert!(framepack_compress(&schedule(), &[]).unwrap().is_none());
    }

    #[test]
    fn single_segment_is_unchanged() {
        let s = seq(4, 0, 1);
        let out = framepack_compress(&schedule(), std::slice::from_ref(&s)).unwrap().unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn three_segments_pack_to_84_tokens() {
        let h: Vec<_> = (0..3).map(|i| seq(4, 4 * i, i as u64)).collect();
        let out = framepack_compress(&schedule(), &h).unwrap().unwrap();
        assert_eq!(out.len(), 4 + 16 + 64);
        // oldest (16×) → one token per frame at that frame's index
        assert_eq!(&out.positions[..4], &[0, 1, 2, 3]);
        assert_eq!(out.positions[4], 4);
        assert_eq!(out.positions[83], 11);
    }

    #[test]
    fn long_history_keeps_constant_budget() {
        let h: Vec<_> = (0..10).map(|i| seq(4, 4 * i, i as u64)).collect();
        let out = framepack_compress(&schedule(), &h).unwrap().unwrap();
        assert_eq!(out.len(), 84);
        assert_eq!(out.positions[0], 28);
    }

    #[test]
    fn pooling_averages_two_by_two_blocks() {
        let s = seq(1, 0, 3);
        let out = framepack_compress(&schedule(), &[s.clone(), seq(1, 1, 4)]).unwrap().unwrap();
        // first pooled token of the rank-1 segment = mean of grid cells (0,0),(0,1),(1,0),(1,1)
        let d = 64;
        for c in 0..d {
            let want = [0, 1, 4, 5].iter().map(|&r| s.tokens.data()[r * d + c]).sum::<f64>() / 4.0;
            assert!((out.tokens.data()[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("B".parse::<SqueezeVariant>().unwrap(), SqueezeVariant::B);
        assert!("D".parse::<SqueezeVariant>().is_err());
        for v in [SqueezeVariant::A, SqueezeVariant::B, SqueezeVariant::C] {
            assert_eq!(SqueezeVariant::from_code(v.code()).unwrap(), v);
        }
    }

    fn model(window: usize) -> Model {
        let cfg = ModelConfig {
            memorize_window: window,
            ..ModelConfig::default()
        };
        Model::new(cfg, 11).unwrap()
    }

    fn state(seed: u64) -> MemoryState {
        MemoryState {
            psi: seq(1, 0, seed).tokens.map(|v| v - 0.5),
            n_segments_absorbed: 0,
        }
    }

    fn zero_param(m: &mut Model, prefix: &str) {
        let ids: Vec<ParamId> = m.params.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
        for id in ids {
            m.params.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn memorize_gives_k_tokens() {
        let m = model(16);
        assert_eq!(m.memorize(&seq(4, 0, 1)).unwrap().dims(), &[16, 64]);
        let short = TokenSequence::new(Tensor::zeros(&[8, 64]), vec![0; 8]).unwrap();
        assert!(matches!(m.memorize(&short), Err(Error::Config { .. })));
    }

    #[test]
    fn memorize_windows_do_not_see_each_other() {
        let m = model(16);
        let s = seq(4, 0, 2);
        let mut t = s.clone();
        t.tokens.data_mut()[16 * 64..32 * 64].fill(0.0);
        let a = m.memorize(&s).unwrap();
        let b = m.memorize(&t).unwrap();
        // window w produces rows 4w..4w+4
        assert_eq!(a.data()[..4 * 64], b.data()[..4 * 64]);
        assert_eq!(a.data()[8 * 64..], b.data()[8 * 64..]);
        assert_ne!(a.data()[4 * 64..8 * 64], b.data()[4 * 64..8 * 64]);
    }

    #[test]
    fn single_window_equals_unmasked_attention() {
        let m = model(64);
        let s = seq(4, 0, 3);
        let got = m.memorize(&s).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(s.tokens.clone());
        let h = tape.normalize(x, NORM_EPS).unwrap();
        let a = multi_head_attention(&mut tape, &m.params, &m.memory.memorize_attn, h, h, 4, None).unwrap();
        let y = tape.add(x, a).unwrap();
        let mean = tape.constant(Tensor::full(&[1, 64], 1.0 / 64.0));
        let pooled = tape.matmul(mean, y).unwrap();
        let z = m.memory.memorize_proj.forward(&mut tape, &m.params, pooled).unwrap();
        assert!(tape.value(z).reshape(&[16, 64]).unwrap().max_abs_diff(&got) < 1e-10);
    }

    #[test]
    fn init_memory_projects_prompt_and_image() {
        let m = model(16);
        let prompt = m.embed_prompt(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let image = m.embed_image(&Tensor::zeros(&[16, 16, 1])).unwrap();
        let a = m.init_memory(&prompt, &image).unwrap();
        assert_eq!((a.psi.dims(), a.n_segments_absorbed), (&[16usize, 64][..], 0));
        let other = m.embed_prompt(&[8, 7, 6, 5, 4, 3, 2, 1]).unwrap();
        assert_ne!(m.init_memory(&other, &image).unwrap().psi, a.psi);
        let zero = m.init_memory(&Tensor::zeros(&[8, 64]), &Tensor::zeros(&[16, 64])).unwrap();
        assert!(zero.psi.data().iter().all(|&v| v == 0.0));
        assert!(m.init_memory(&Tensor::zeros(&[8, 32]), &Tensor::zeros(&[16, 32])).is_err());
    }

    #[test]
    fn squeeze_residual_and_wiring() {
        let mut m = model(16);
        let st = state(4);
        let mem = m.memorize(&seq(4, 0, 5)).unwrap();
        let outs: Vec<Tensor> = [SqueezeVariant::A, SqueezeVariant::B, SqueezeVariant::C]
            .iter()
            .map(|&v| {
                let o = m.squeeze(&st, &mem, v).unwrap();
                assert_eq!((o.psi.dims(), o.n_segments_absorbed), (&[16usize, 64][..], 1));
                o.psi
            })
            .collect();
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[1], outs[2]);
        assert_ne!(outs[0], outs[2]);
        // after the first update C is wired exactly like B
        let later = MemoryState {
            n_segments_absorbed: 3,
            ..st.clone()
        };
        assert_eq!(m.squeeze(&later, &mem, SqueezeVariant::B).unwrap(), m.squeeze(&later, &mem, SqueezeVariant::C).unwrap());
        zero_param(&mut m, "memory.squeeze.attn.");
        assert_eq!(m.squeeze(&st, &mem, SqueezeVariant::A).unwrap().psi, mem);
        assert!(m.squeeze(&st, &Tensor::zeros(&[8, 64]), SqueezeVariant::A).is_err());
    }

    #[test]
    fn update_is_squeeze_of_memorize() {
        let m = model(16);
        let st = state(6);
        let s = seq(4, 0, 7);
        let manual = m.squeeze(&st, &m.memorize(&s).unwrap(), m.config.squeeze_variant).unwrap();
        assert_eq!(m.update_memory(&st, &s).unwrap(), manual);
    }

    #[test]
    fn hundred_updates_stay_finite_and_k_sized() {
        let m = model(16);
        let mut st = state(8);
        for i in 0..100 {
            st = m.update_memory(&st, &seq(4, 4 * i, i as u64)).unwrap();
        }
        assert_eq!(st.n_segments_absorbed, 100);
        assert_eq!(st.psi.dims(), &[16, 64]);
        assert!(st.psi.all_finite());
    }

    #[test]
    fn fold_order_matters() {
        let m = model(16);
        let (a, b) = (seq(4, 0, 9), seq(4, 4, 10));
        let st = state(12);
        let ab = m.update_memory(&m.update_memory(&st, &a).unwrap(), &b).unwrap();
        let ba = m.update_memory(&m.update_memory(&st, &b).unwrap(), &a).unwrap();
        assert!(ab.psi.max_abs_diff(&ba.psi) > 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn framepack_budget_is_constant_past_depth(n in 1usize..12, seed in 0u64..1000) {
            let h: Vec<_> = (0..n).map(|i| seq(4, 4 * i as i64, seed + i as u64)).collect();
            let out = framepack_compress(&schedule(), &h).unwrap().unwrap();
            let want = [64, 80, 84][n.min(3) - 1];
            proptest::prop_assert_eq!(out.len(), want);
            proptest::prop_assert!(out.len() <= schedule().token_budget);
            proptest::prop_assert!(out.positions.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

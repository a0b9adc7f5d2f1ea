//! Toy MM-DiT backbone: patchified segment tokens, RoPE self-attention over
//! `[image ‖ short context ‖ noisy tokens]`, cross-attention to
//! `[memory ‖ prompt ‖ image]`, adaptive-norm timestep injection and a
//! linear velocity head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::memorypack::{MemoryPackParams, MemoryState};
use crate::tensor::Tensor;

/// A latent clip, `F × H × W × C`.
pub type Segment = Tensor;

const NORM_EPS: f64 = 1e-6;

/// Names of the parameters left trainable by head-only fine-tuning.
pub const HEAD_PARAMS: [&str; 4] = ["final_norm.gain", "final_norm.bias", "head.weight", "head.bias"];

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    /// Global frame index of each token.
    pub positions: Vec<i64>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, positions: Vec<i64>) -> Result<Self> {
        if tokens.dims().len() != 2 || tokens.dims()[0] != positions.len() {
            return Err(Error::shape("token_sequence", tokens.dims(), &[positions.len()]));
        }
        Ok(TokenSequence { tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Everything the backbone conditions on besides the noisy segment and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// FramePack output; `None` before any history exists.
    pub short_ctx: Option<TokenSequence>,
    pub memory: MemoryState,
    pub prompt_emb: Tensor,
    pub image_emb: Tensor,
    /// Global frame index of the first frame of the segment being generated.
    pub target_start_frame: i64,
}

/// Tape-resident counterpart of [`ConditioningBundle`].
#[derive(Clone, Debug)]
pub struct CondVars {
    pub short_ctx: Option<(Var, Vec<i64>)>,
    pub memory: Var,
    pub prompt: Var,
    pub image: Var,
    pub target_start_frame: i64,
}

impl ConditioningBundle {
    pub fn to_vars(&self, tape: &mut Tape) -> CondVars {
        CondVars {
            short_ctx: self
                .short_ctx
                .as_ref()
                .map(|s| (tape.constant(s.tokens.clone()), s.positions.clone())),
            memory: tape.constant(self.memory.psi.clone()),
            prompt: tape.constant(self.prompt_emb.clone()),
            image: tape.constant(self.image_emb.clone()),
            target_start_frame: self.target_start_frame,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), randn(&[fan_in, fan_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnParams {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttnParams {
            q: Linear::new(store, &format!("{name}.q"), d, d, std, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, std, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, std, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, std, rng),
        }
    }
}

/// Scaled per-head logits `[Lq × Lkv]` and the value projection. With
/// `rope`, queries and keys are rotated by their positions first.
fn attention_logits(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttnParams,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    rope: Option<(&[i64], &[i64])>,
) -> Result<(Vec<Var>, Var)> {
    let mut q = p.q.forward(tape, store, q_in)?;
    let mut k = p.k.forward(tape, store, kv_in)?;
    let v = p.v.forward(tape, store, kv_in)?;
    let d = tape.dims(q)[1];
    let dh = d / n_heads;
    if let Some((qp, kp)) = rope {
        q = tape.rope(q, qp, dh)?;
        k = tape.rope(k, kp, dh)?;
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut logits = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh) = if n_heads == 1 {
            (q, k)
        } else {
            (tape.slice_cols(q, h * dh, (h + 1) * dh)?, tape.slice_cols(k, h * dh, (h + 1) * dh)?)
        };
        let kt = tape.transpose(kh)?;
        let l = tape.matmul(qh, kt)?;
        logits.push(tape.scale(l, scale));
    }
    Ok((logits, v))
}

/// Multi-head scaled dot-product attention. With `rope`, queries and keys are
/// rotated by their positions before the logits are formed.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttnParams,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    rope: Option<(&[i64], &[i64])>,
) -> Result<Var> {
    let (logits, v) = attention_logits(tape, store, p, q_in, kv_in, n_heads, rope)?;
    let dh = tape.dims(v)[1] / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for (h, l) in logits.into_iter().enumerate() {
        let vh = if n_heads == 1 { v } else { tape.slice_cols(v, h * dh, (h + 1) * dh)? };
        let attn = tape.softmax(l, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    p.o.forward(tape, store, merged)
}

#[derive(Clone, Debug)]
struct BlockParams {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    mlp_in: Linear,
    mlp_out: Linear,
    /// Timestep embedding → (shift, scale) for each of the three norms.
    modulation: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    spatial_pos: ParamId,
    prompt_table: ParamId,
    time_mlp1: Linear,
    time_mlp2: Linear,
    blocks: Vec<BlockParams>,
    final_gain: ParamId,
    final_bias: ParamId,
    head: Linear,
    pub(crate) memory: MemoryPackParams,
}

pub(crate) fn randn(dims: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(dims, |_| normal.sample(rng))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();

        let patch_embed = Linear::new(&mut store, "patch_embed", config.patch_dim(), d, inv(config.patch_dim()), &mut rng);
        let spatial_pos = store.add("spatial_pos", randn(&[config.tokens_per_frame(), d], 0.1, &mut rng));
        let prompt_table = store.add("prompt_table", randn(&[config.prompt_vocab, d], 0.5, &mut rng));
        let time_mlp1 = Linear::new(&mut store, "time_mlp1", d, d, inv(d), &mut rng);
        let time_mlp2 = Linear::new(&mut store, "time_mlp2", d, d, inv(d), &mut rng);
        let hidden = d * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = format!("blocks.{l}");
            blocks.push(BlockParams {
                self_attn: AttnParams::new(&mut store, &format!("{name}.self_attn"), d, &mut rng),
                cross_attn: AttnParams::new(&mut store, &format!("{name}.cross_attn"), d, &mut rng),
                mlp_in: Linear::new(&mut store, &format!("{name}.mlp_in"), d, hidden, inv(d), &mut rng),
                mlp_out: Linear::new(&mut store, &format!("{name}.mlp_out"), hidden, d, inv(hidden), &mut rng),
                modulation: Linear::new(&mut store, &format!("{name}.modulation"), d, 6 * d, 0.0, &mut rng),
            });
        }
        let memory = MemoryPackParams::new(&mut store, &config, &mut rng);
        let final_gain = store.add(HEAD_PARAMS[0], Tensor::full(&[d], 1.0));
        let final_bias = store.add(HEAD_PARAMS[1], Tensor::zeros(&[d]));
        let head = Linear {
            weight: store.add(HEAD_PARAMS[2], randn(&[d, config.patch_dim()], 0.1 * inv(d), &mut rng)),
            bias: store.add(HEAD_PARAMS[3], Tensor::zeros(&[config.patch_dim()])),
        };
        Ok(Model {
            config,
            params: store,
            patch_embed,
            spatial_pos,
            prompt_table,
            time_mlp1,
            time_mlp2,
            blocks,
            final_gain,
            final_bias,
            head,
            memory,
        })
    }

    /// Token index → (frame, patch row, patch col) order used by patchify.
    fn patch_gather_index(&self, frames: usize) -> Vec<usize> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let p = c.patch_size;
        let mut idx = Vec::with_capacity(frames * c.frame_height * c.frame_width * c.channels);
        for f in 0..frames {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c.channels {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                idx.push(((f * c.frame_height + y) * c.frame_width + x) * c.channels + ch);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let c = &self.config;
        let d = frames.dims();
        let ok = match d.len() {
            4 => d[1..] == [c.frame_height, c.frame_width, c.channels],
            3 => d == [c.frame_height, c.frame_width, c.channels],
            _ => false,
        };
        if !ok {
            return Err(Error::shape("patchify", d, &c.segment_dims()));
        }
        Ok(if d.len() == 4 { d[0] } else { 1 })
    }

    /// Linear patch embedding plus spatial position embedding. `frames` is
    /// `F × H × W × C` (or a single `H × W × C` image).
    pub(crate) fn patchify_var(&self, tape: &mut Tape, frames: &Tensor) -> Result<Var> {
        let n_frames = self.check_frames(frames)?;
        let c = &self.config;
        let per_frame = c.tokens_per_frame();
        let patches: Vec<f64> = self
            .patch_gather_index(n_frames)
            .into_iter()
            .map(|i| frames.data()[i])
            .collect();
        let patches = tape.constant(Tensor::new(vec![n_frames * per_frame, c.patch_dim()], patches)?);
        let emb = self.patch_embed.forward(tape, &self.params, patches)?;
        let pos = tape.param(&self.params, self.spatial_pos);
        let d = c.d_model;
        let tile: Vec<usize> = (0..n_frames * per_frame * d).map(|i| i % (per_frame * d)).collect();
        let pos = tape.gather(pos, tile, &[n_frames * per_frame, d])?;
        tape.add(emb, pos)
    }

    /// Frame-level positions for a segment starting at global frame `start`.
    pub fn segment_positions(&self, start: i64, n_frames: usize) -> Vec<i64> {
        let per_frame = self.config.tokens_per_frame();
        (0..n_frames * per_frame)
            .map(|i| start + (i / per_frame) as i64)
            .collect()
    }

    pub fn patchify(&self, segment: &Segment, start_frame: i64) -> Result<TokenSequence> {
        let n_frames = self.check_frames(segment)?;
        let mut tape = Tape::no_grad();
        let v = self.patchify_var(&mut tape, segment)?;
        TokenSequence::new(tape.value(v).clone(), self.segment_positions(start_frame, n_frames))
    }

    /// Inverse of the patch rearrangement: `[L × p²C]` → `F × H × W × C`.
    pub(crate) fn unpatchify_var(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let fwd = self.patch_gather_index(self.config.frames_per_segment);
        let mut inv = vec![0; fwd.len()];
        for (token_slot, &pixel) in fwd.iter().enumerate() {
            inv[pixel] = token_slot;
        }
        tape.gather(tokens, inv, &self.config.segment_dims())
    }

    pub(crate) fn prompt_var(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let c = &self.config;
        if ids.len() != c.prompt_len || ids.iter().any(|&i| i >= c.prompt_vocab) {
            return Err(Error::Contract(format!(
                "prompt ids {ids:?} must be {} ids below {}",
                c.prompt_len, c.prompt_vocab
            )));
        }
        let d = c.d_model;
        let table = tape.param(&self.params, self.prompt_table);
        let index = ids.iter().flat_map(|&id| id * d..(id + 1) * d).collect();
        tape.gather(table, index, &[ids.len(), d])
    }

    pub fn embed_prompt(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.prompt_var(&mut tape, ids)?;
        Ok(tape.value(v).clone())
    }

    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.patchify_var(&mut tape, image)?;
        Ok(tape.value(v).clone())
    }

    fn timestep_var(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        let d = self.config.d_model;
        let feats = tape.constant(timestep_features(t, d));
        let h = self.time_mlp1.forward(tape, &self.params, feats)?;
        let h = tape.silu(h);
        self.time_mlp2.forward(tape, &self.params, h)
    }

    fn modulated_norm(&self, tape: &mut Tape, x: Var, shift: Var, scale_p1: Var) -> Result<Var> {
        let n = tape.normalize(x, NORM_EPS)?;
        let n = tape.mul_row(n, scale_p1)?;
        tape.add_row(n, shift)
    }

    /// Shift and (1 + scale) rows for the three modulated norms of `layer`.
    fn modulation_var(&self, tape: &mut Tape, layer: usize, temb: Var) -> Result<[Var; 6]> {
        let d = self.config.d_model;
        let act = tape.silu(temb);
        let mods = self.blocks[layer].modulation.forward(tape, &self.params, act)?;
        let ones = tape.constant(Tensor::full(&[1, d], 1.0));
        let mut out = [mods; 6];
        for (i, o) in out.iter_mut().enumerate() {
            let m = tape.slice_cols(mods, i * d, (i + 1) * d)?;
            *o = if i % 2 == 1 { tape.add(m, ones)? } else { m };
        }
        Ok(out)
    }

    /// Normalized queries and the `[context ‖ queries]` key/value rows with
    /// their positions.
    fn self_attention_inputs(
        &self,
        tape: &mut Tape,
        x: Var,
        x_pos: &[i64],
        ctx: Option<(Var, &[i64])>,
        shift: Var,
        scale_p1: Var,
    ) -> Result<(Var, Var, Vec<i64>)> {
        let h = self.modulated_norm(tape, x, shift, scale_p1)?;
        Ok(match ctx {
            Some((c, c_pos)) => {
                let cn = self.modulated_norm(tape, c, shift, scale_p1)?;
                let kv = tape.concat_rows(&[cn, h])?;
                (h, kv, c_pos.iter().chain(x_pos).copied().collect())
            }
            None => (h, h, x_pos.to_vec()),
        })
    }

    /// One DiT block. `ctx` tokens act only as keys/values of self-attention.
    #[allow(clippy::too_many_arguments)]
    fn block_var(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        x_pos: &[i64],
        ctx: Option<(Var, &[i64])>,
        cross_kv: Var,
        temb: Var,
    ) -> Result<Var> {
        let b = &self.blocks[layer];
        let [sh1, sc1, sh2, sc2, sh3, sc3] = self.modulation_var(tape, layer, temb)?;
        let (h, kv, kv_pos) = self.self_attention_inputs(tape, x, x_pos, ctx, sh1, sc1)?;
        let heads = self.config.n_heads;
        let sa = multi_head_attention(tape, &self.params, &b.self_attn, h, kv, heads, Some((x_pos, &kv_pos)))?;
        let x = tape.add(x, sa)?;

        let h = self.modulated_norm(tape, x, sh2, sc2)?;
        let ca = multi_head_attention(tape, &self.params, &b.cross_attn, h, cross_kv, heads, None)?;
        let x = tape.add(x, ca)?;

        let h = self.modulated_norm(tape, x, sh3, sc3)?;
        let h = b.mlp_in.forward(tape, &self.params, h)?;
        let h = tape.gelu(h);
        let h = b.mlp_out.forward(tape, &self.params, h)?;
        tape.add(x, h)
    }

    /// Self-attention context `[image (position 0) ‖ short context]` and the
    /// cross-attention keys/values `[memory ‖ prompt ‖ image]`.
    fn context_vars(&self, tape: &mut Tape, cond: &CondVars) -> Result<(Var, Vec<i64>, Var)> {
        let n_img = tape.dims(cond.image)[0];
        let mut ctx_pos = vec![0i64; n_img];
        let ctx = match &cond.short_ctx {
            Some((s, pos)) => {
                ctx_pos.extend_from_slice(pos);
                tape.concat_rows(&[cond.image, *s])?
            }
            None => cond.image,
        };
        let cross = tape.concat_rows(&[cond.memory, cond.prompt, cond.image])?;
        let cross = tape.normalize(cross, NORM_EPS)?;
        Ok((ctx, ctx_pos, cross))
    }

    /// Runs one block on explicit token inputs; exposed for tests and probes.
    pub fn attention_block(
        &self,
        layer: usize,
        x: &TokenSequence,
        t: f64,
        cond: &ConditioningBundle,
    ) -> Result<TokenSequence> {
        let mut tape = Tape::no_grad();
        let cv = cond.to_vars(&mut tape);
        let (ctx, ctx_pos, cross) = self.context_vars(&mut tape, &cv)?;
        let temb = self.timestep_var(&mut tape, t)?;
        let xv = tape.constant(x.tokens.clone());
        let out = self.block_var(&mut tape, layer, xv, &x.positions, Some((ctx, &ctx_pos)), cross, temb)?;
        TokenSequence::new(tape.value(out).clone(), x.positions.clone())
    }

    /// Self-attention logits of `layer` per head (`[L_x × L_kv]`) and the
    /// key/value positions, for probing positional behaviour.
    pub fn self_attention_logits(
        &self,
        layer: usize,
        x: &TokenSequence,
        t: f64,
        cond: &ConditioningBundle,
    ) -> Result<(Vec<Tensor>, Vec<i64>)> {
        let mut tape = Tape::no_grad();
        let cv = cond.to_vars(&mut tape);
        let (ctx, ctx_pos, _) = self.context_vars(&mut tape, &cv)?;
        let temb = self.timestep_var(&mut tape, t)?;
        let xv = tape.constant(x.tokens.clone());
        let [sh1, sc1, ..] = self.modulation_var(&mut tape, layer, temb)?;
        let (h, kv, kv_pos) = self.self_attention_inputs(&mut tape, xv, &x.positions, Some((ctx, &ctx_pos)), sh1, sc1)?;
        let heads = self.config.n_heads;
        let rope = Some((x.positions.as_slice(), kv_pos.as_slice()));
        let (logits, _) = attention_logits(&mut tape, &self.params, &self.blocks[layer].self_attn, h, kv, heads, rope)?;
        Ok((logits.into_iter().map(|l| tape.value(l).clone()).collect(), kv_pos))
    }

    /// Velocity prediction for a noisy segment, shaped like the segment.
    pub fn velocity_var(&self, tape: &mut Tape, x_t: &Segment, t: f64, cond: &CondVars) -> Result<Var> {
        let c = &self.config;
        if x_t.dims() != c.segment_dims() {
            return Err(Error::shape("predict_velocity", x_t.dims(), &c.segment_dims()));
        }
        let mut x = self.patchify_var(tape, x_t)?;
        let x_pos = self.segment_positions(cond.target_start_frame, c.frames_per_segment);
        let (ctx, ctx_pos, cross) = self.context_vars(tape, cond)?;
        let temb = self.timestep_var(tape, t)?;
        for layer in 0..c.n_layers {
            x = self.block_var(tape, layer, x, &x_pos, Some((ctx, &ctx_pos)), cross, temb)?;
        }
        let g = tape.param(&self.params, self.final_gain);
        let b = tape.param(&self.params, self.final_bias);
        let x = tape.layernorm(x, g, b, NORM_EPS)?;
        let out = self.head.forward(tape, &self.params, x)?;
        self.unpatchify_var(tape, out)
    }

    pub fn predict_velocity(&self, x_t: &Segment, t: f64, cond: &ConditioningBundle) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let cv = cond.to_vars(&mut tape);
        let v = self.velocity_var(&mut tape, x_t, t, &cv)?;
        Ok(tape.value(v).clone())
    }

    /// Restricts training to the final norm and output head.
    pub fn freeze_all_but_head(&mut self) {
        self.params.set_trainable(|n| HEAD_PARAMS.contains(&n));
    }

    pub fn unfreeze_all(&mut self) {
        self.params.set_trainable(|_| true);
    }
}

impl VelocityField for Model {
    type Cond = ConditioningBundle;

    fn velocity(&self, x_t: &Tensor, t: f64, cond: &ConditioningBundle) -> Result<Tensor> {
        self.predict_velocity(x_t, t, cond)
    }
}

/// Sinusoidal features of `t`, `[1 × d]`: cosines then sines.
pub fn timestep_features(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[1, d], |i| {
        let k = i % half;
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        let arg = 1000.0 * t * freq;
        if i < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            frame_height: 8,
            frame_width: 8,
            frames_per_segment: 2,
            patch_size: 4,
            memory_tokens: 4,
            memorize_window: 4,
            prompt_len: 4,
            prompt_vocab: 8,
            framepack_factors: vec![1, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_segment_is_64_tokens() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let seg = Tensor::zeros(&m.config.segment_dims());
        assert_eq!(m.patchify(&seg, 0).unwrap().len(), 64);
    }

    #[test]
    fn segment_positions_follow_global_start() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let seg = Tensor::zeros(&m.config.segment_dims());
        let a = m.patchify(&seg, 0).unwrap().positions;
        let b = m.patchify(&seg, 4).unwrap().positions;
        assert_eq!((a[0], a[15], a[16], a[63]), (0, 0, 1, 3));
        assert_eq!((b[0], b[63]), (4, 7));
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let m = Model::new(tiny(), 0).unwrap();
        assert!(m.patchify(&Tensor::zeros(&[2, 8, 4, 1]), 0).is_err());
    }

    #[test]
    fn unpatchify_inverts_rearrangement() {
        let m = Model::new(tiny(), 0).unwrap();
        let seg = Tensor::from_fn(&m.config.segment_dims(), |i| i as f64);
        let mut tape = Tape::no_grad();
        let patches: Vec<f64> = m.patch_gather_index(2).into_iter().map(|i| seg.data()[i]).collect();
        let p = tape.constant(Tensor::new(vec![8, 16], patches).unwrap());
        let back = m.unpatchify_var(&mut tape, p).unwrap();
        assert_eq!(tape.value(back), &seg);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            d_model: 18,
            ..tiny()
        };
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config { .. })));
        let cfg = ModelConfig {
            patch_size: 3,
            ..tiny()
        };
        assert!(Model::new(cfg, 0).is_err());
    }

    #[test]
    fn prompt_ids_are_validated() {
        let m = Model::new(tiny(), 0).unwrap();
        assert!(m.embed_prompt(&[0, 1, 2]).is_err());
        assert!(m.embed_prompt(&[0, 1, 2, 8]).is_err());
        assert_eq!(m.embed_prompt(&[0, 1, 2, 7]).unwrap().dims(), &[4, 16]);
    }

    #[test]
    fn head_freeze_marks_exactly_four_params() {
        let mut m = Model::new(tiny(), 0).unwrap();
        m.freeze_all_but_head();
        let names: Vec<_> = m
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect();
        assert_eq!(names, HEAD_PARAMS);
    }

    fn randomized(cfg: ModelConfig, seed: u64) -> Model {
        let mut m = Model::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let dims = m.params.value(id).dims().to_vec();
            *m.params.value_mut(id) = randn(&dims, 0.3, &mut rng);
        }
        m
    }

    fn bundle(m: &Model, seed: u64, shift: i64) -> (TokenSequence, ConditioningBundle) {
        let c = &m.config;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_seg = c.tokens_per_segment();
        let x_pos = m.segment_positions(2 + shift, c.frames_per_segment);
        let x = TokenSequence::new(randn(&[per_seg, d], 1.0, &mut rng), x_pos).unwrap();
        let ctx_pos = m.segment_positions(shift, c.frames_per_segment);
        let short = TokenSequence::new(randn(&[per_seg, d], 1.0, &mut rng), ctx_pos).unwrap();
        let cond = ConditioningBundle {
            short_ctx: Some(short),
            memory: MemoryState {
                psi: randn(&[c.memory_tokens, d], 1.0, &mut rng),
                n_segments_absorbed: 1,
            },
            prompt_emb: randn(&[c.prompt_len, d], 1.0, &mut rng),
            image_emb: randn(&[c.tokens_per_frame(), d], 1.0, &mut rng),
            target_start_frame: 2 + shift,
        };
        (x, cond)
    }

    // Plain row-major matrices for the loop reference.
    type Mat = Vec<Vec<f64>>;

    fn rows(t: &Tensor) -> Mat {
        let (_, c) = t.matrix_dims();
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    fn lin(m: &Model, name: &str, x: &Mat) -> Mat {
        let w = m.params.value(m.params.find(&format!("{name}.weight")).unwrap());
        let b = m.params.value(m.params.find(&format!("{name}.bias")).unwrap()).data();
        let (fi, fo) = (w.dims()[0], w.dims()[1]);
        x.iter()
            .map(|r| {
                (0..fo)
                    .map(|o| {
                        let mut acc = b[o];
                        for i in 0..fi {
                            acc += r[i] * w.data()[i * fo + o];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn standardize(x: &Mat) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()).collect()
            })
            .collect()
    }

    fn rotate(x: &Mat, pos: &[i64], dh: usize) -> Mat {
        x.iter()
            .zip(pos)
            .map(|(r, &p)| {
                let mut o = r.clone();
                for i in (0..r.len()).step_by(2) {
                    let j = (i % dh) / 2;
                    let a = p as f64 * 10000f64.powf(-2.0 * j as f64 / dh as f64);
                    o[i] = r[i] * a.cos() - r[i + 1] * a.sin();
                    o[i + 1] = r[i] * a.sin() + r[i + 1] * a.cos();
                }
                o
            })
            .collect()
    }

    fn attend(m: &Model, name: &str, q_in: &Mat, kv_in: &Mat, rope: Option<(&[i64], &[i64])>) -> Mat {
        let heads = m.config.n_heads;
        let (mut q, mut k, v) = (lin(m, &format!("{name}.q"), q_in), lin(m, &format!("{name}.k"), kv_in), lin(m, &format!("{name}.v"), kv_in));
        let dh = q[0].len() / heads;
        if let Some((qp, kp)) = rope {
            q = rotate(&q, qp, dh);
            k = rotate(&k, kp, dh);
        }
        let mut merged = vec![vec![0.0; q[0].len()]; q.len()];
        for h in 0..heads {
            for (i, qi) in q.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    for c in 0..dh {
                        merged[i][h * dh + c] += e[j] / z * vj[h * dh + c];
                    }
                }
            }
        }
        lin(m, &format!("{name}.o"), &merged)
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn reference_block(m: &Model, layer: usize, x: &TokenSequence, t: f64, cond: &ConditioningBundle) -> Mat {
        let d = m.config.d_model;
        let name = format!("blocks.{layer}");
        let silu = |v: &Mat| -> Mat { v.iter().map(|r| r.iter().map(|z| z / (1.0 + (-z).exp())).collect()).collect() };
        let temb = lin(m, "time_mlp2", &silu(&lin(m, "time_mlp1", &rows(&timestep_features(t, d)))));
        let mods = lin(m, &format!("{name}.modulation"), &silu(&temb))[0].clone();
        let modnorm = |v: &Mat, i: usize| -> Mat {
            standardize(v)
                .iter()
                .map(|r| r.iter().enumerate().map(|(c, z)| z * (1.0 + mods[(2 * i + 1) * d + c]) + mods[2 * i * d + c]).collect())
                .collect()
        };
        let short = cond.short_ctx.as_ref().unwrap();
        let mut ctx = rows(&cond.image_emb);
        let mut kv_pos = vec![0; ctx.len()];
        ctx.extend(rows(&short.tokens));
        kv_pos.extend(&short.positions);
        kv_pos.extend(&x.positions);
        let xr = rows(&x.tokens);
        let h = modnorm(&xr, 0);
        let mut kv = modnorm(&ctx, 0);
        kv.extend(h.clone());
        let xr = add(&xr, &attend(m, &format!("{name}.self_attn"), &h, &kv, Some((&x.positions, &kv_pos))));
        let mut cross = rows(&cond.memory.psi);
        cross.extend(rows(&cond.prompt_emb));
        cross.extend(rows(&cond.image_emb));
        let xr = add(&xr, &attend(m, &format!("{name}.cross_attn"), &modnorm(&xr, 1), &standardize(&cross), None));
        let gelu = |z: f64| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
        let hid: Mat = lin(m, &format!("{name}.mlp_in"), &modnorm(&xr, 2))
            .iter()
            .map(|r| r.iter().map(|&z| gelu(z)).collect())
            .collect();
        add(&xr, &lin(m, &format!("{name}.mlp_out"), &hid))
    }

    #[test]
    fn block_matches_loop_reference() {
        let m = randomized(tiny(), 3);
        for seed in 0..3 {
            let (x, cond) = bundle(&m, seed, 0);
            for layer in 0..2 {
                let got = m.attention_block(layer, &x, 0.37, &cond).unwrap();
                let want = reference_block(&m, layer, &x, 0.37, &cond);
                let err = got
                    .tokens
                    .data()
                    .iter()
                    .zip(want.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-10, "layer {layer}: {err}");
            }
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let mut m = randomized(tiny(), 4);
        let ids: Vec<ParamId> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("blocks.0."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            m.params.value_mut(id).data_mut().fill(0.0);
        }
        let (x, cond) = bundle(&m, 1, 0);
        assert_eq!(m.attention_block(0, &x, 0.5, &cond).unwrap(), x);
    }

    #[test]
    fn memory_token_order_is_irrelevant() {
        let m = randomized(tiny(), 5);
        let (x, cond) = bundle(&m, 2, 0);
        let mut permuted = cond.clone();
        let psi = rows(&cond.memory.psi);
        let order = [2, 0, 3, 1];
        let data: Vec<f64> = order.iter().flat_map(|&i| psi[i].clone()).collect();
        permuted.memory.psi = Tensor::new(cond.memory.psi.dims().to_vec(), data).unwrap();
        let a = m.attention_block(1, &x, 0.2, &cond).unwrap();
        let b = m.attention_block(1, &x, 0.2, &permuted).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-12);
        // the memory is live: changing one entry moves the output
        permuted.memory.psi.data_mut()[0] += 1.0;
        let c = m.attention_block(1, &x, 0.2, &permuted).unwrap();
        assert!(a.tokens.max_abs_diff(&c.tokens) > 1e-6);
    }

    #[test]
    fn video_logits_are_shift_invariant_and_image_stays_at_zero() {
        let m = randomized(tiny(), 6);
        let n_img = m.config.tokens_per_frame();
        let (x0, c0) = bundle(&m, 7, 0);
        let (l0, pos0) = m.self_attention_logits(0, &x0, 0.6, &c0).unwrap();
        for delta in [1, 5, 1000] {
            let (x1, c1) = bundle(&m, 7, delta);
            let (l1, pos1) = m.self_attention_logits(0, &x1, 0.6, &c1).unwrap();
            assert!(pos1[..n_img].iter().all(|&p| p == 0));
            assert!(pos1[n_img..].iter().zip(&pos0[n_img..]).all(|(a, b)| a - b == delta));
            for (a, b) in l0.iter().zip(&l1) {
                let cols = a.dims()[1];
                for r in 0..a.dims()[0] {
                    for c in n_img..cols {
                        let i = r * cols + c;
                        assert!((a.data()[i] - b.data()[i]).abs() < 1e-10);
                    }
                }
            }
            // image keys sit at absolute position 0, so their logits do move
            assert!(l0[0].max_abs_diff(&l1[0]) > 1e-8);
        }
    }

    #[test]
    fn output_matches_segment_shape_and_is_deterministic() {
        let m = randomized(tiny(), 8);
        let (_, cond) = bundle(&m, 3, 0);
        let x = Tensor::from_fn(&m.config.segment_dims(), |i| (i as f64 * 0.37).sin());
        let a = m.predict_velocity(&x, 0.4, &cond).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(a, m.predict_velocity(&x, 0.4, &cond).unwrap());
    }
}

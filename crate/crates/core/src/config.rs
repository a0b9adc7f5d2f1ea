use crate::error::{Error, Result};
use crate::memorypack::SqueezeVariant;

/// Shape hyper-parameters of the backbone and its memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub patch_size: usize,
    pub frames_per_segment: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
    pub memory_tokens: usize,
    /// Tokens per Memorize attention window.
    pub memorize_window: usize,
    pub mlp_ratio: usize,
    pub squeeze_variant: SqueezeVariant,
    /// Spatial pooling factor per recency rank, newest first.
    pub framepack_factors: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            patch_size: 4,
            frames_per_segment: 4,
            frame_height: 16,
            frame_width: 16,
            channels: 1,
            prompt_vocab: 32,
            prompt_len: 8,
            memory_tokens: 16,
            memorize_window: 16,
            mlp_ratio: 4,
            squeeze_variant: SqueezeVariant::A,
            framepack_factors: vec![1, 4, 16],
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_height / self.patch_size, self.frame_width / self.patch_size)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.frames_per_segment * self.tokens_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn segment_dims(&self) -> [usize; 4] {
        [self.frames_per_segment, self.frame_height, self.frame_width, self.channels]
    }

    pub fn image_dims(&self) -> [usize; 3] {
        [self.frame_height, self.frame_width, self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: &str| Err(Error::config(k, r));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(2 * self.n_heads) {
            return bad("model.d_model", "must be divisible by 2*n_heads");
        }
        if self.patch_size == 0
            || !self.frame_height.is_multiple_of(self.patch_size)
            || !self.frame_width.is_multiple_of(self.patch_size)
        {
            return bad("model.patch_size", "patch grid must divide the frame exactly");
        }
        if self.n_layers == 0 || self.frames_per_segment == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("model", "layer/frame/channel counts must be positive");
        }
        if self.prompt_len == 0 || self.prompt_vocab == 0 {
            return bad("model.prompt_len", "prompt length and vocabulary must be positive");
        }
        let l = self.tokens_per_segment();
        let k = self.memory_tokens;
        if k == 0 || l < k {
            return bad("model.memory_tokens", "segment token count must be at least K");
        }
        let w = self.memorize_window;
        if w == 0 || !l.is_multiple_of(w) || !k.is_multiple_of(l / w) {
            return bad(
                "model.memorize_window",
                "window must divide the segment tokens and the window count must divide K",
            );
        }
        if self.prompt_len + self.tokens_per_frame() < k {
            return bad("model.memory_tokens", "prompt + image tokens must be at least K");
        }
        crate::memorypack::FramePackSchedule::new(self.framepack_factors.clone(), self.grid(), self.frames_per_segment)?;
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; `set` accepts every key.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let factors: Vec<String> = self.framepack_factors.iter().map(|f| f.to_string()).collect();
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("frames_per_segment", self.frames_per_segment.to_string()),
            ("frame_height", self.frame_height.to_string()),
            ("frame_width", self.frame_width.to_string()),
            ("channels", self.channels.to_string()),
            ("prompt_vocab", self.prompt_vocab.to_string()),
            ("prompt_len", self.prompt_len.to_string()),
            ("memory_tokens", self.memory_tokens.to_string()),
            ("memorize_window", self.memorize_window.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("squeeze_variant", self.squeeze_variant.to_string()),
            ("framepack_factors", factors.join(",")),
        ]
    }

    /// Sets one field from its textual form. `key` has no `model.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |reason: String| Error::config(format!("model.{key}"), reason);
        let int = || value.trim().parse::<usize>().map_err(|e| err(format!("{value:?}: {e}")));
        match key {
            "d_model" => self.d_model = int()?,
            "n_heads" => self.n_heads = int()?,
            "n_layers" => self.n_layers = int()?,
            "patch_size" => self.patch_size = int()?,
            "frames_per_segment" => self.frames_per_segment = int()?,
            "frame_height" => self.frame_height = int()?,
            "frame_width" => self.frame_width = int()?,
            "channels" => self.channels = int()?,
            "prompt_vocab" => self.prompt_vocab = int()?,
            "prompt_len" => self.prompt_len = int()?,
            "memory_tokens" => self.memory_tokens = int()?,
            "memorize_window" => self.memorize_window = int()?,
            "mlp_ratio" => self.mlp_ratio = int()?,
            "squeeze_variant" => self.squeeze_variant = value.parse().map_err(|_| err(format!("{value:?} is not A, B or C")))?,
            "framepack_factors" => {
                self.framepack_factors = value
                    .split(',')
                    .map(|f| f.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(format!("{value:?}: {e}")))?
            }
            _ => return Err(Error::config(format!("model.{key}"), "unknown key")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig {
            squeeze_variant: SqueezeVariant::C,
            framepack_factors: vec![1, 4],
            n_layers: 2,
            ..ModelConfig::default()
        };
        c.memory_tokens = 8;
        let mut back = ModelConfig::default();
        for (k, v) in c.pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = ModelConfig::default();
        let e = c.set("d_model", "x").unwrap_err().to_string();
        assert!(e.contains("model.d_model"), "{e}");
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("squeeze_variant", "D").is_err());
    }
}

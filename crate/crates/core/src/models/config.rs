use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::corpus::MAX_TARGET_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FusionalRnn,
    UnifiedTransformer,
    S2sI,
    S2sC,
    S2sIc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::FusionalRnn,
        ModelKind::UnifiedTransformer,
        ModelKind::S2sI,
        ModelKind::S2sC,
        ModelKind::S2sIc,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::FusionalRnn => "Fusional RNN",
            ModelKind::UnifiedTransformer => "Unified Transformer",
            ModelKind::S2sI => "S2S-I",
            ModelKind::S2sC => "S2S-C",
            ModelKind::S2sIc => "S2S-IC",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::FusionalRnn => "fusional",
            ModelKind::UnifiedTransformer => "transformer",
            ModelKind::S2sI => "s2s-i",
            ModelKind::S2sC => "s2s-c",
            ModelKind::S2sIc => "s2s-ic",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fusional" | "fusional-rnn" => ModelKind::FusionalRnn,
            "transformer" | "unified-transformer" => ModelKind::UnifiedTransformer,
            "s2s-i" => ModelKind::S2sI,
            "s2s-c" => ModelKind::S2sC,
            "s2s-ic" => ModelKind::S2sIc,
            other => return Err(ModelError::Config(format!("unknown model kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Frame slots per window.
    pub m: usize,
    /// Comment slots per window.
    pub n: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub frame_dim: usize,
    pub use_video: bool,
    pub use_comments: bool,
    /// Longest decoder target before EOS.
    pub max_target_len: usize,
    /// Longest concatenated comment sequence for the transformer text encoder.
    pub max_text_len: usize,
    pub positional_encoding: bool,
    pub dropout: f64,
}

/// Room for `n` comments of the longest target plus separators, never below 120.
fn text_budget(n: usize) -> usize {
    (n * (MAX_TARGET_LEN + 1)).max(120)
}

impl ModelConfig {
    /// Defaults for `kind`: 512-dim embeddings and states, 5 frames and
    /// 5 comments, 8 heads, one block per transformer stack.
    pub fn new(kind: ModelKind, vocab_size: usize, frame_dim: usize) -> Self {
        let (m, n) = (5, 5);
        Self {
            kind,
            embed_dim: 512,
            hidden_dim: 512,
            vocab_size,
            m,
            n,
            heads: 8,
            layers: 1,
            ff_dim: 4 * 512,
            frame_dim,
            use_video: kind != ModelKind::S2sC,
            use_comments: kind != ModelKind::S2sI,
            max_target_len: MAX_TARGET_LEN,
            max_text_len: text_budget(n),
            positional_encoding: true,
            dropout: 0.0,
        }
    }

    /// Sets embedding and hidden width together (and the feed-forward width to 4x).
    pub fn with_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self.hidden_dim = dim;
        self.ff_dim = 4 * dim;
        self
    }

    pub fn with_window(mut self, m: usize, n: usize) -> Self {
        self.m = m;
        self.n = n;
        self.max_text_len = text_budget(n);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.kind == ModelKind::S2sI && (self.use_comments || !self.use_video) {
            return err("s2s_i is video-only: use_video=true, use_comments=false".into());
        }
        if self.kind == ModelKind::S2sC && (self.use_video || !self.use_comments) {
            return err("s2s_c is comment-only: use_video=false, use_comments=true".into());
        }
        if !self.use_video && !self.use_comments {
            return err("at least one of use_video/use_comments must be set".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.vocab_size < crate::corpus::SPECIALS.len() {
            return err("dimensions and vocabulary size must be positive".into());
        }
        if (self.use_video || self.kind == ModelKind::FusionalRnn) && self.m == 0 {
            return err("m must be positive when video is used".into());
        }
        if (self.use_comments || self.kind == ModelKind::FusionalRnn) && self.n == 0 {
            return err("n must be positive when comments are used".into());
        }
        if self.use_video && self.frame_dim == 0 {
            return err("frame_dim must be positive when video is used".into());
        }
        if self.kind == ModelKind::UnifiedTransformer {
            if self.embed_dim != self.hidden_dim {
                return err("transformer requires embed_dim == hidden_dim".into());
            }
            if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
                return err(format!(
                    "hidden_dim {} not divisible by {} heads",
                    self.hidden_dim, self.heads
                ));
            }
            if self.layers == 0 || self.ff_dim == 0 {
                return err("transformer needs at least one layer and a positive ff_dim".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

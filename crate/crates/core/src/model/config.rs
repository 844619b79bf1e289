use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::Window;
use crate::error::{Error, Result};

/// Max-pool geometry used by every tokenizer stage with pooling enabled.
pub const POOL_WINDOW: Window = Window {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One convolutional tokenizer stage: conv → ReLU → optional 3×3/2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pooling: bool,
}

impl TokenizerStage {
    pub fn window(&self) -> Window {
        Window {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub tokenizer: Vec<TokenizerStage>,
    pub attn_dropout: f64,
    pub stochastic_depth: f64,
    pub image: ImageShape,
    pub classes_first_task: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// The 32×32 RGB profile: d=256, 6 layers, 4 heads, one 3×3 stride-2 padding-3 tokenizer conv.
    pub fn cifar() -> Self {
        ModelConfig {
            embed_dim: 256,
            layers: 6,
            heads: 4,
            ffn_ratio: 2,
            tokenizer: vec![TokenizerStage {
                out_channels: 256,
                kernel: 3,
                stride: 2,
                padding: 3,
                pooling: true,
            }],
            attn_dropout: 0.1,
            stochastic_depth: 0.1,
            image: ImageShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            classes_first_task: 10,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk-scale profile used by tests: one tokenizer stage producing `embed_dim` channels.
    pub fn tiny(embed_dim: usize, layers: usize, heads: usize, image: ImageShape, classes: usize) -> Self {
        ModelConfig {
            embed_dim,
            layers,
            heads,
            ffn_ratio: 2,
            tokenizer: vec![TokenizerStage {
                out_channels: embed_dim,
                kernel: 3,
                stride: 2,
                padding: 3,
                pooling: true,
            }],
            attn_dropout: 0.1,
            stochastic_depth: 0.1,
            image,
            classes_first_task: classes,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return cfg(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return cfg(format!("embed_dim {} must be even for sinusoidal positions", self.embed_dim));
        }
        if self.ffn_ratio == 0 {
            return cfg("ffn_ratio must be positive".into());
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("stochastic_depth", self.stochastic_depth),
        ] {
            if !(0.0..1.0).contains(&p) {
                return cfg(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.tokenizer.is_empty() {
            return cfg("tokenizer needs at least one stage".into());
        }
        if self.tokenizer.last().map(|s| s.out_channels) != Some(self.embed_dim) {
            return cfg("last tokenizer stage must output embed_dim channels".into());
        }
        if self.image.numel() == 0 {
            return cfg("image dimensions must be positive".into());
        }
        if self.classes_first_task == 0 {
            return cfg("classes_first_task must be positive".into());
        }
        self.token_grid().map(|_| ())
    }

    /// Spatial extent of the final tokenizer feature map.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.image.height, self.image.width);
        for (i, stage) in self.tokenizer.iter().enumerate() {
            let (h0, w0) = (h, w);
            let collapse = move || Error::Config(format!("tokenizer stage {i} collapses a {h0}x{w0} map to zero"));
            let win = stage.window();
            let (nh, nw) = (win.out_extent(h).ok_or_else(collapse)?, win.out_extent(w).ok_or_else(collapse)?);
            h = nh;
            w = nw;
            if stage.pooling {
                let (ph, pw) = (
                    POOL_WINDOW.out_extent(h).ok_or_else(collapse)?,
                    POOL_WINDOW.out_extent(w).ok_or_else(collapse)?,
                );
                h = ph;
                w = pw;
            }
        }
        Ok((h, w))
    }

    pub fn num_tokens(&self) -> Result<usize> {
        self.token_grid().map(|(h, w)| h * w)
    }
}

//! Conv → flatten → MLP head turning pooled regions into prompt tokens and
//! class logits.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Linear, ParamStore};

/// Per-instance prompt tokens `(r, n_tokens, width)` and class logits
/// `(r, classes + 1)`, background at index 0.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub class_logits: Tensor,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PromptHead {
    conv: Conv2d,
    hidden: Linear,
    tokens: Linear,
    classifier: Linear,
    roi_size: usize,
    channels: usize,
    n_tokens: usize,
    width: usize,
}

impl PromptHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &ParamStore,
        channels: usize,
        roi_size: usize,
        conv_channels: usize,
        hidden: usize,
        n_tokens: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&ps.pp("conv"), channels, conv_channels, 3)?,
            hidden: Linear::new(&ps.pp("hidden"), conv_channels * roi_size * roi_size, hidden)?,
            tokens: Linear::new(&ps.pp("tokens"), hidden, n_tokens * width)?,
            classifier: Linear::new(&ps.pp("classifier"), hidden, num_classes + 1)?,
            roi_size,
            channels,
            n_tokens,
            width,
        })
    }

    pub fn token_shape(&self) -> (usize, usize) {
        (self.n_tokens, self.width)
    }

    /// `roi`: `(r, s, s, c)` as produced by RoIAlign.
    pub fn forward(&self, roi: &Tensor) -> Result<PromptEmbedding> {
        let (r, s, s2, c) = roi.dims4()?;
        if s != self.roi_size || s2 != self.roi_size || c != self.channels {
            return shape_err(format!(
                "prompt head expects (r, {0}, {0}, {1}), got {2:?}",
                self.roi_size,
                self.channels,
                roi.dims()
            ));
        }
        let x = roi.permute((0, 3, 1, 2))?.contiguous()?;
        self.tail(&self.conv.forward(&x)?, r)
    }

    /// Same result as RoIAlign followed by [`PromptHead::forward`], computed
    /// from the `(n, c)` features and the RoIAlign sampling matrix
    /// `(r·s·s, n)` of [`roi_matrix`](super::roi_align::roi_matrix). The
    /// convolution's channel mixing happens before pooling, which is far
    /// cheaper to differentiate.
    pub fn forward_pooled(&self, features: &Tensor, roi_matrix: &Tensor, r: usize) -> Result<PromptEmbedding> {
        let (_, c) = features.dims2()?;
        let s = self.roi_size;
        if c != self.channels {
            return shape_err(format!("prompt head expects {} channels, got {c}", self.channels));
        }
        if roi_matrix.dims2()?.0 != r * s * s {
            return shape_err(format!("sampling matrix {:?} does not hold {r} regions", roi_matrix.dims()));
        }
        let y = self
            .conv
            .forward_linear_input(features, roi_matrix, s, s)?
            .reshape((r, s, s, ()))?
            .permute((0, 3, 1, 2))?;
        self.tail(&y, r)
    }

    /// ReLU, flatten and the MLP over conv output `(r, out, s, s)`.
    fn tail(&self, conv_out: &Tensor, r: usize) -> Result<PromptEmbedding> {
        let x = conv_out.relu()?.flatten_from(1)?;
        let h = self.hidden.forward(&x)?.relu()?;
        Ok(PromptEmbedding {
            tokens: self.tokens.forward(&h)?.reshape((r, self.n_tokens, self.width))?,
            class_logits: self.classifier.forward(&h)?,
        })
    }
}

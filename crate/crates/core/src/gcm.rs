//! Global context: attention-pool the feature map into one context vector
//! per sample, squeeze it through a normalized bottleneck, and fuse the
//! resulting per-channel gate back into the map.
//!
//! With the default fusion the output is `x * (1 + delta)` with
//! `delta in (0,1)`, so the module can only rescale features upward by a
//! factor between 1 and 2 — a gentle, sign-preserving modulation. A
//! zero-initialized output projection makes the gate exactly 0.5 everywhere,
//! i.e. training starts from a benign uniform 1.5x scaling.

use crate::tensor::{Graph, ReduceKind, Result, ValId};
use serde::Serialize;

/// How the per-channel gate is combined with the input map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FusionMode {
    /// `x * delta`
    Multiplication,
    /// `x + delta`
    Addition,
    /// `x * (1 + delta)` — the default.
    MultiplicationThenAddition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GcmConfig {
    /// Channel shrink factor of the bottleneck; the gated channel count D
    /// must be divisible by it.
    pub bottleneck_ratio: usize,
    pub ln_eps: f64,
    pub fusion_mode: FusionMode,
}

impl Default for GcmConfig {
    fn default() -> Self {
        GcmConfig { bottleneck_ratio: 4, ln_eps: 1e-5, fusion_mode: FusionMode::MultiplicationThenAddition }
    }
}

impl GcmConfig {
    pub fn validate(&self, channels: usize) -> std::result::Result<(), String> {
        if self.bottleneck_ratio == 0 {
            return Err("bottleneck_ratio must be >= 1".into());
        }
        if channels % self.bottleneck_ratio != 0 {
            return Err(format!(
                "channel count {} not divisible by bottleneck_ratio {}",
                channels, self.bottleneck_ratio
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Attention distribution over the H*W positions: `[N, H*W]`, rows sum to 1.
/// `w1` is a 1x1 conv kernel `[1, D, 1, 1]` producing one logit per position.
pub fn attention_weights(g: &mut Graph, x: ValId, w1: ValId) -> Result<ValId> {
    let shape = g.shape(x).to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let logits = g.conv2d(x, w1, 1, 0)?;
    let flat = g.reshape(logits, vec![n, h * w])?;
    g.softmax(flat, 1)
}

/// Context vector per sample: attention-weighted sum of the feature columns,
/// `[N, D]`. Uniform attention (zero `w1`) reduces this to the spatial mean.
pub fn global_attention_pool(g: &mut Graph, x: ValId, w1: ValId) -> Result<ValId> {
    let shape = g.shape(x).to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let a = attention_weights(g, x, w1)?;
    let a4 = g.reshape(a, vec![n, 1, h, w])?;
    let weighted = g.mul(x, a4)?;
    g.reduce(weighted, &[2, 3], ReduceKind::Sum, false)
}

/// Squeeze-and-gate transform: `sigmoid(W3 relu(LN(W2 beta)))`, output
/// strictly in (0,1). `w2: [D, D/r]`, `w3: [D/r, D]` as matmul operands.
pub fn bottleneck_transform(
    g: &mut Graph,
    beta: ValId,
    w2: ValId,
    w3: ValId,
    ln_eps: f64,
) -> Result<ValId> {
    let z = g.matmul(beta, w2)?;
    let normed = g.layer_norm(z, ln_eps)?;
    let activated = g.relu(normed);
    let u = g.matmul(activated, w3)?;
    Ok(g.sigmoid(u))
}

/// Full module: gate the input map channel-wise by the bottleneck output.
pub fn gcm_forward(
    g: &mut Graph,
    x: ValId,
    w1: ValId,
    w2: ValId,
    w3: ValId,
    cfg: &GcmConfig,
) -> Result<ValId> {
    let shape = g.shape(x).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let beta = global_attention_pool(g, x, w1)?;
    let delta = bottleneck_transform(g, beta, w2, w3, cfg.ln_eps)?;
    let delta4 = g.reshape(delta, vec![n, d, 1, 1])?;
    match cfg.fusion_mode {
        FusionMode::Multiplication => g.mul(x, delta4),
        FusionMode::Addition => g.add(x, delta4),
        FusionMode::MultiplicationThenAddition => {
            let gate = g.add_scalar(delta4, 1.0);
            g.mul(x, gate)
        }
    }
}

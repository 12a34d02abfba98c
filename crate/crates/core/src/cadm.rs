//! Cascaded attentive dropout: channel dropout followed by a stochastic
//! choice between spatial dropout and importance reweighting.
//!
//! The binary masks are built from forward activations and enter the graph
//! as constants (straight-through): gradients flow through the kept values
//! but never through mask construction. The importance map is an ordinary
//! smooth function (sigmoid of the channel-mean attention map) and is
//! differentiated normally. The whole module is bypassed in eval mode so
//! that inference stays deterministic.

use crate::tensor::{Graph, ReduceKind, Result, Tensor, ValId};
use crate::Mode;
use rand::Rng;
use serde::Serialize;

/// Where the reference maximum for the spatial mask comes from: each row's
/// own maximum (default) or the whole map's maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpatialMaxScope {
    Row,
    Map,
}

/// Which dropout stages run: channel only, spatial only, or the full
/// channel-then-spatial cascade (default). Exists for the ablation driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DropoutDim {
    Channel,
    Spatial,
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CadmConfig {
    /// Channel threshold: channel d drops when its confidence exceeds
    /// `lambda1` times the per-sample maximum confidence (strictly).
    pub lambda1: f64,
    /// Spatial threshold, same rule against the row (or map) maximum.
    pub lambda2: f64,
    /// Probability of the dropout branch; the alternative is the
    /// importance-map branch.
    pub drop_rate: f64,
    pub spatial_max_scope: SpatialMaxScope,
    pub dropout_dim: DropoutDim,
}

impl Default for CadmConfig {
    fn default() -> Self {
        CadmConfig {
            lambda1: 0.8,
            lambda2: 0.8,
            drop_rate: 0.8,
            spatial_max_scope: SpatialMaxScope::Row,
            dropout_dim: DropoutDim::Cascade,
        }
    }
}

impl CadmConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda1 > 0.0 && self.lambda1 <= 1.0) {
            return Err(format!("lambda1 must be in (0,1], got {}", self.lambda1));
        }
        if !(self.lambda2 > 0.0 && self.lambda2 <= 1.0) {
            return Err(format!("lambda2 must be in (0,1], got {}", self.lambda2));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(format!("drop_rate must be in [0,1], got {}", self.drop_rate));
        }
        Ok(())
    }
}

/// Which multiplier the stochastic branch picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Drop,
    Importance,
    /// Eval mode: module inactive, output equals input.
    Bypass,
}

/// Record of one forward pass's dropout decisions, for logging and replay.
#[derive(Debug, Clone, Serialize)]
pub struct DropDecision {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-sample per-channel keep mask (0 or 1), length `batch * channels`.
    pub channel_mask: Option<Vec<f64>>,
    /// Per-sample spatial keep mask, length `batch * height * width`.
    /// Present only when the drop branch actually used it.
    pub spatial_mask: Option<Vec<f64>>,
    /// The uniform draw in `[0,1)` behind the branch choice.
    pub alpha: Option<f64>,
    pub branch: Branch,
}

/// Per-channel confidence: global average pool to `[N, D]`.
pub fn channel_confidence(g: &mut Graph, x: ValId) -> Result<ValId> {
    g.reduce(x, &[2, 3], ReduceKind::Mean, false)
}

/// Binary keep-mask over channels: per sample, drop (0) every channel whose
/// confidence strictly exceeds `lambda1` times that sample's maximum.
pub fn channel_drop_mask(f: &[f64], n: usize, d: usize, lambda1: f64) -> Vec<f64> {
    debug_assert_eq!(f.len(), n * d);
    let mut mask = vec![1.0; n * d];
    for s in 0..n {
        let row = &f[s * d..(s + 1) * d];
        let fmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thresh = fmax * lambda1;
        for c in 0..d {
            if row[c] > thresh {
                mask[s * d + c] = 0.0;
            }
        }
    }
    mask
}

/// Binary keep-mask over positions: drop (0) every position whose attention
/// value strictly exceeds `lambda2` times the reference maximum — the
/// position's own row maximum under `Row` scope, the map maximum under `Map`.
pub fn spatial_drop_mask(
    xa: &[f64],
    n: usize,
    h: usize,
    w: usize,
    lambda2: f64,
    scope: SpatialMaxScope,
) -> Vec<f64> {
    debug_assert_eq!(xa.len(), n * h * w);
    let mut mask = vec![1.0; n * h * w];
    for s in 0..n {
        let map = &xa[s * h * w..(s + 1) * h * w];
        let map_max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..h {
            let row = &map[i * w..(i + 1) * w];
            let gmax = match scope {
                SpatialMaxScope::Row => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                SpatialMaxScope::Map => map_max,
            };
            let thresh = gmax * lambda2;
            for j in 0..w {
                if row[j] > thresh {
                    mask[s * h * w + i * w + j] = 0.0;
                }
            }
        }
    }
    mask
}

/// Channel-mean attention map `[N,1,H,W]`, kept on the graph so the
/// importance branch stays differentiable.
pub fn self_attention_map(g: &mut Graph, x: ValId) -> Result<ValId> {
    g.reduce(x, &[1], ReduceKind::Mean, true)
}

/// Sigmoid of the attention map; values strictly in (0,1).
pub fn importance_map(g: &mut Graph, xa: ValId) -> ValId {
    g.sigmoid(xa)
}

/// Full module forward. Training mode draws one uniform `alpha` per call
/// (one decision per batch) and picks the dropout branch iff
/// `alpha + drop_rate > 1`; eval mode returns the input untouched.
pub fn cadm_forward<R: Rng>(
    g: &mut Graph,
    x: ValId,
    cfg: &CadmConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(ValId, DropDecision)> {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "cadm expects [N,D,H,W]");
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut decision = DropDecision {
        batch: n,
        channels: d,
        height: h,
        width: w,
        channel_mask: None,
        spatial_mask: None,
        alpha: None,
        branch: Branch::Bypass,
    };
    if mode == Mode::Eval {
        return Ok((x, decision));
    }
    // One uniform draw per forward pass, whatever the dropout dimension, so
    // ablation variants consume the rng stream identically.
    let alpha: f64 = rng.random();
    let branch = if alpha + cfg.drop_rate > 1.0 { Branch::Drop } else { Branch::Importance };
    decision.alpha = Some(alpha);
    decision.branch = branch;

    // Channel stage.
    let x_cd = if cfg.dropout_dim != DropoutDim::Spatial {
        let f = channel_confidence(g, x)?;
        let mask = channel_drop_mask(g.data(f), n, d, cfg.lambda1);
        decision.channel_mask = Some(mask.clone());
        let m_cd = g.constant(Tensor::from_vec(vec![n, d, 1, 1], mask)?);
        g.mul(x, m_cd)?
    } else {
        x
    };
    if cfg.dropout_dim == DropoutDim::Channel {
        return Ok((x_cd, decision));
    }

    // Spatial stage: attention map over channels, then either the binary
    // spatial mask or the smooth importance map.
    let xa = self_attention_map(g, x_cd)?;
    let out = match branch {
        Branch::Drop => {
            let mask = spatial_drop_mask(g.data(xa), n, h, w, cfg.lambda2, cfg.spatial_max_scope);
            decision.spatial_mask = Some(mask.clone());
            let m_sd = g.constant(Tensor::from_vec(vec![n, 1, h, w], mask)?);
            g.mul(x_cd, m_sd)?
        }
        Branch::Importance => {
            let m_imp = importance_map(g, xa);
            g.mul(x_cd, m_imp)?
        }
        Branch::Bypass => unreachable!("bypass handled above"),
    };
    Ok((out, decision))
}

//! Three-stage convolutional trunk with two attention hooks: attentive
//! dropout on the quarter-resolution map after the second pooling, and the
//! global-context gate on the final map, right before region pooling.

use crate::cadm::{cadm_forward, Branch, CadmConfig, DropDecision};
use crate::gcm::{gcm_forward, GcmConfig};
use crate::tensor::{Graph, Result, TensorError, ValId};
use crate::Mode;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stage_channels: [16, 32, 32] }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.stage_channels[2]
    }
}

/// One conv stage's parameters on the graph: 3x3 kernel plus bias.
pub type ConvStage = (ValId, ValId);

/// Run the trunk. `conv` holds the three stages' (weight `[Co,Ci,3,3]`,
/// bias `[Co,1,1]`) pairs. Output is `[N, stage_channels[2], H/4, W/4]`;
/// the returned record describes what the dropout module did (a bypass
/// record when it is disabled or in eval mode).
pub fn backbone_forward<R: Rng>(
    g: &mut Graph,
    image: ValId,
    conv: &[ConvStage; 3],
    cadm_cfg: Option<&CadmConfig>,
    gcm: Option<(&GcmConfig, ValId, ValId, ValId)>,
    mode: Mode,
    rng: &mut R,
) -> Result<(ValId, DropDecision)> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TensorError::InvalidShape(format!("backbone expects [N,3,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
        return Err(TensorError::InvalidShape(format!("spatial size {}x{} not divisible by 4", h, w)));
    }

    let stage = |g: &mut Graph, x: ValId, (wt, b): ConvStage| -> Result<ValId> {
        let c = g.conv2d(x, wt, 1, 1)?;
        let cb = g.add(c, b)?;
        Ok(g.relu(cb))
    };

    let s1 = stage(g, image, conv[0])?;
    let p1 = g.maxpool2d(s1, 2, 2)?;
    let s2 = stage(g, p1, conv[1])?;
    let p2 = g.maxpool2d(s2, 2, 2)?;

    // Attentive dropout on the quarter-resolution map.
    let (x3, decision) = match cadm_cfg {
        Some(cfg) => cadm_forward(g, p2, cfg, mode, rng)?,
        None => {
            let sh = g.shape(p2);
            let dec = DropDecision {
                batch: sh[0],
                channels: sh[1],
                height: sh[2],
                width: sh[3],
                channel_mask: None,
                spatial_mask: None,
                alpha: None,
                branch: Branch::Bypass,
            };
            (p2, dec)
        }
    };

    let s3 = stage(g, x3, conv[2])?;

    // Context gate on the final map.
    let out = match gcm {
        Some((cfg, w1, w2, w3)) => gcm_forward(g, s3, w1, w2, w3, cfg)?,
        None => s3,
    };
    Ok((out, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_stages(g: &mut Graph, rng: &mut ChaCha8Rng, grad: bool) -> [ConvStage; 3] {
        let chans = [(3usize, 8usize), (8, 16), (16, 32)];
        let mut out = Vec::new();
        for (ci, co) in chans {
            let mut w = Tensor::uniform(vec![co, ci, 3, 3], -0.2, 0.2, rng);
            let mut b = Tensor::zeros(vec![co, 1, 1]);
            w.requires_grad = grad;
            b.requires_grad = grad;
            out.push((g.leaf(w), g.leaf(b)));
        }
        [out[0], out[1], out[2]]
    }

    #[test]
    fn output_shape_is_quarter_resolution_32_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let conv = conv_stages(&mut g, &mut rng, false);
        let (out, _) =
            backbone_forward(&mut g, img, &conv, None, None, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 8, 8]);
    }

    #[test]
    fn rejects_indivisible_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(vec![1, 3, 30, 32]));
        let conv = conv_stages(&mut g, &mut rng, false);
        assert!(backbone_forward(&mut g, img, &conv, None, None, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_uses_no_randomness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img_t = Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let run = |img_t: &Tensor| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut g = Graph::new();
            let img = g.leaf(img_t.clone());
            let conv = conv_stages(&mut g, &mut rng, false);
            let cfg = CadmConfig::default();
            let (out, dec) =
                backbone_forward(&mut g, img, &conv, Some(&cfg), None, Mode::Eval, &mut rng)
                    .unwrap();
            assert_eq!(dec.branch, Branch::Bypass);
            (g.data(out).to_vec(), rng.random::<u64>())
        };
        let (a, ra) = run(&img_t);
        let (b, rb) = run(&img_t);
        assert_eq!(a, b);
        // identical rng positions afterwards: eval drew nothing
        assert_eq!(ra, rb);
    }

    #[test]
    fn same_seed_training_forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img_t = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let img = g.leaf(img_t.clone());
            let conv = conv_stages(&mut g, &mut rng, false);
            let cfg = CadmConfig::default();
            let (out, dec) =
                backbone_forward(&mut g, img, &conv, Some(&cfg), None, Mode::Train, &mut rng)
                    .unwrap();
            (g.data(out).to_vec(), dec.alpha)
        };
        let (a, alpha_a) = run();
        let (b, alpha_b) = run();
        assert_eq!(a, b);
        assert_eq!(alpha_a, alpha_b);
    }

    #[test]
    fn gradient_reaches_every_conv_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng));
        let conv = conv_stages(&mut g, &mut rng, true);
        let (out, _) =
            backbone_forward(&mut g, img, &conv, None, None, Mode::Train, &mut rng).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        for (w, b) in conv {
            assert!(g.grad(w).unwrap().iter().any(|&v| v != 0.0));
            assert!(g.grad(b).unwrap().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn disabled_gcm_equals_zeroed_gate_up_to_the_exact_factor() {
        // With a zero output projection the gate is exactly 1.5, so the
        // gated trunk output must equal the plain trunk output times 1.5.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img_t = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let seeds = 13u64;
        let plain = {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds);
            let mut g = Graph::new();
            let img = g.leaf(img_t.clone());
            let conv = conv_stages(&mut g, &mut rng, false);
            let (out, _) =
                backbone_forward(&mut g, img, &conv, None, None, Mode::Eval, &mut rng).unwrap();
            g.data(out).to_vec()
        };
        let gated = {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds);
            let mut g = Graph::new();
            let img = g.leaf(img_t.clone());
            let conv = conv_stages(&mut g, &mut rng, false);
            let w1 = g.leaf(Tensor::uniform(vec![1, 32, 1, 1], -0.2, 0.2, &mut rng));
            let w2 = g.leaf(Tensor::uniform(vec![32, 8], -0.2, 0.2, &mut rng));
            let w3 = g.leaf(Tensor::zeros(vec![8, 32]));
            let cfg = GcmConfig::default();
            let (out, _) = backbone_forward(
                &mut g,
                img,
                &conv,
                None,
                Some((&cfg, w1, w2, w3)),
                Mode::Eval,
                &mut rng,
            )
            .unwrap();
            g.data(out).to_vec()
        };
        assert_eq!(plain.len(), gated.len());
        for (p, q) in plain.iter().zip(&gated) {
            assert_eq!(*q, 1.5 * p);
        }
    }
}

//! Full detector: named parameter table, weight initialization, and the
//! train/eval forward passes that wire the trunk, the RoI head, and the
//! per-branch losses together.
//!
//! Parameters live outside any graph as master tensors; each forward pass
//! binds clones of them as graph leaves, so gradients are read back in the
//! same fixed order every iteration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, BackboneConfig, ConvStage};
use crate::boxes::BBox;
use crate::cadm::{CadmConfig, DropDecision};
use crate::gcm::GcmConfig;
use crate::head::{
    distillation_targets, inference_scores, mil_loss, mine_pseudo_labels, refinement_loss,
    strip_background, total_loss, wsddn_head, PseudoLabelSet, SoftmaxAssignment,
};
use crate::tensor::{Graph, Result, Tensor, TensorError, ValId};
use crate::Mode;

/// RoI pool output is POOL x POOL bins per channel.
pub const POOL: usize = 3;
/// Two 2x2 max pools put the feature map at quarter resolution.
pub const SPATIAL_SCALE: f64 = 0.25;
/// Width of the shared fully-connected layer feeding all heads.
pub const HIDDEN: usize = 64;
/// IoU at which a proposal inherits its seed's class during mining.
pub const IOU_ASSIGN: f64 = 0.5;

/// Master weights, keyed by stable names (the checkpoint format and the
/// optimizer both rely on the ordering).
#[derive(Debug, Clone)]
pub struct DetectorParams {
    entries: Vec<(String, Tensor)>,
    pub classes: usize,
    pub k_refine: usize,
    pub bottleneck_ratio: usize,
}

fn xavier<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng).with_grad()
}

/// He-style uniform init for layers feeding a relu; preserves forward
/// variance through the nonlinearity better than the symmetric rule.
fn he<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng).with_grad()
}

impl DetectorParams {
    /// Initialize all weights. Order (and therefore rng consumption) is
    /// fixed by (classes, k_refine, bottleneck_ratio). The context gate's
    /// final projection starts at zero so the module begins as a constant
    /// 0.5 gate; biases start at zero.
    pub fn init<R: Rng>(
        classes: usize,
        k_refine: usize,
        bottleneck_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(classes >= 1 && k_refine >= 1);
        let ch = BackboneConfig::default().stage_channels;
        let d = ch[2];
        if d % bottleneck_ratio != 0 {
            return Err(TensorError::InvalidShape(format!(
                "bottleneck ratio {bottleneck_ratio} does not divide {d} channels"
            )));
        }
        let hid = d / bottleneck_ratio;
        let feat_dim = d * POOL * POOL;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mut conv_in = 3;
        for (i, &co) in ch.iter().enumerate() {
            entries.push((
                format!("conv{}.w", i + 1),
                he(vec![co, conv_in, 3, 3], conv_in * 9, rng),
            ));
            entries.push((format!("conv{}.b", i + 1), Tensor::zeros(vec![co, 1, 1]).with_grad()));
            conv_in = co;
        }
        entries.push(("gcm.w1".into(), xavier(vec![1, d, 1, 1], d, 1, rng)));
        entries.push(("gcm.w2".into(), xavier(vec![d, hid], d, hid, rng)));
        entries.push(("gcm.w3".into(), Tensor::zeros(vec![hid, d]).with_grad()));
        entries.push(("trunk.w".into(), he(vec![feat_dim, HIDDEN], feat_dim, rng)));
        entries.push(("trunk.b".into(), Tensor::zeros(vec![HIDDEN]).with_grad()));
        for name in ["det", "cls"] {
            entries.push((format!("{name}.w"), xavier(vec![HIDDEN, classes], HIDDEN, classes, rng)));
            entries.push((format!("{name}.b"), Tensor::zeros(vec![classes]).with_grad()));
        }
        for k in 0..k_refine {
            entries.push((
                format!("ref{k}.w"),
                xavier(vec![HIDDEN, classes + 1], HIDDEN, classes + 1, rng),
            ));
            entries.push((format!("ref{k}.b"), Tensor::zeros(vec![classes + 1]).with_grad()));
        }
        entries.push(("dis.w".into(), xavier(vec![HIDDEN, classes + 1], HIDDEN, classes + 1, rng)));
        entries.push(("dis.b".into(), Tensor::zeros(vec![classes + 1]).with_grad()));
        Ok(DetectorParams { entries, classes, k_refine, bottleneck_ratio })
    }

    /// Rebuild from a named tensor table (checkpoint load). Shapes are
    /// validated against a freshly initialized layout.
    pub fn from_table(
        table: Vec<(String, Tensor)>,
        classes: usize,
        k_refine: usize,
        bottleneck_ratio: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = DetectorParams::init(classes, k_refine, bottleneck_ratio, &mut rng)?;
        if table.len() != reference.entries.len() {
            return Err(TensorError::InvalidShape(format!(
                "parameter table has {} entries, expected {}",
                table.len(),
                reference.entries.len()
            )));
        }
        for ((name, t), (want_name, want)) in table.iter().zip(&reference.entries) {
            if name != want_name || t.shape() != want.shape() {
                return Err(TensorError::InvalidShape(format!(
                    "table entry {name:?} {:?} does not match expected {want_name:?} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        let entries = table.into_iter().map(|(n, t)| (n, t.with_grad())).collect();
        Ok(DetectorParams { entries, classes, k_refine, bottleneck_ratio })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    fn index_of(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }
}

/// Graph leaves for every parameter, in table order.
pub struct BoundParams {
    pub ids: Vec<ValId>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &DetectorParams) -> Self {
        let ids = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        BoundParams { ids }
    }

    fn id(&self, params: &DetectorParams, name: &str) -> ValId {
        self.ids[params.index_of(name)]
    }
}

/// Pseudo-label supervision used by one training forward: for each image,
/// the per-branch refinement sets followed by the distillation set. Captured
/// from one pass and fed back in, it pins the otherwise data-dependent
/// supervision — which finite-difference gradient checks require, since the
/// mined selections enter backward as constants.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub per_image: Vec<ImageSupervision>,
}

/// One image's share of a [`Supervision`] capture.
#[derive(Debug, Clone)]
pub struct ImageSupervision {
    pub refine: Vec<PseudoLabelSet>,
    pub distill: PseudoLabelSet,
}

/// Everything the training loop needs from one forward pass.
pub struct TrainForward {
    pub total: ValId,
    pub l_cls: ValId,
    pub l_dis: ValId,
    pub l_ref: Vec<ValId>,
    pub decision: DropDecision,
    pub bound: BoundParams,
    pub supervision: Supervision,
}

fn conv_stages(params: &DetectorParams, bound: &BoundParams) -> [ConvStage; 3] {
    [
        (bound.id(params, "conv1.w"), bound.id(params, "conv1.b")),
        (bound.id(params, "conv2.w"), bound.id(params, "conv2.b")),
        (bound.id(params, "conv3.w"), bound.id(params, "conv3.b")),
    ]
}

/// RoI features for one image of the batch: `[R, HIDDEN]`.
fn proposal_features(
    g: &mut Graph,
    params: &DetectorParams,
    bound: &BoundParams,
    feat: ValId,
    image_index: usize,
    boxes: &[BBox],
) -> Result<ValId> {
    let fi = g.batch_select(feat, image_index)?;
    let arrs: Vec<[f64; 4]> = boxes.iter().map(|b| b.as_array()).collect();
    let pooled = g.roi_pool(fi, &arrs, SPATIAL_SCALE, POOL)?;
    let d = g.shape(fi)[1];
    let flat = g.reshape(pooled, vec![boxes.len(), d * POOL * POOL])?;
    let lin = g.matmul(flat, bound.id(params, "trunk.w"))?;
    let biased = g.add(lin, bound.id(params, "trunk.b"))?;
    Ok(g.relu(biased))
}

/// Raw `[R, C+1]` logits of one classifier branch; softmax separately where
/// probabilities are needed (losses work on the logits directly).
fn branch_logits(g: &mut Graph, h: ValId, w: ValId, b: ValId) -> Result<ValId> {
    let lin = g.matmul(h, w)?;
    g.add(lin, b)
}

fn mean_over_images(g: &mut Graph, parts: &[ValId]) -> Result<ValId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// Training forward over a batch. Each `images[i]` is `[3, H, W]` with its
/// own proposal list and image-level labels; losses are averaged over the
/// batch. The pseudo labels are mined from this same pass's scores and
/// enter the graph as constants.
pub fn forward_train<R: Rng>(
    g: &mut Graph,
    params: &DetectorParams,
    images: &[Tensor],
    labels: &[Vec<f64>],
    proposals: &[Vec<BBox>],
    cadm_cfg: Option<&CadmConfig>,
    gcm_cfg: Option<&GcmConfig>,
    rng: &mut R,
) -> Result<TrainForward> {
    let bound = BoundParams::bind(g, params);
    forward_train_bound(g, params, bound, images, labels, proposals, cadm_cfg, gcm_cfg, rng, None)
}

/// [`forward_train`] against parameter leaves the caller already placed in
/// the graph (`bound.ids` in table order) — the form gradient checks need.
/// `frozen` replaces on-the-fly mining with a fixed supervision capture so
/// repeated passes at perturbed parameters share identical constants.
#[allow(clippy::too_many_arguments)]
pub fn forward_train_bound<R: Rng>(
    g: &mut Graph,
    params: &DetectorParams,
    bound: BoundParams,
    images: &[Tensor],
    labels: &[Vec<f64>],
    proposals: &[Vec<BBox>],
    cadm_cfg: Option<&CadmConfig>,
    gcm_cfg: Option<&GcmConfig>,
    rng: &mut R,
    frozen: Option<&Supervision>,
) -> Result<TrainForward> {
    assert!(!images.is_empty());
    assert_eq!(images.len(), labels.len());
    assert_eq!(images.len(), proposals.len());
    assert_eq!(bound.ids.len(), params.len());
    let b = images.len();
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);

    let mut data = Vec::with_capacity(b * 3 * h * w);
    for img in images {
        if img.shape() != [3, h, w] {
            return Err(TensorError::InvalidShape(format!(
                "batch images disagree: {:?} vs [3, {h}, {w}]",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let batch = g.constant(Tensor::from_vec(vec![b, 3, h, w], data)?);

    let conv = conv_stages(params, &bound);
    let gcm = gcm_cfg.map(|cfg| {
        (cfg, bound.id(params, "gcm.w1"), bound.id(params, "gcm.w2"), bound.id(params, "gcm.w3"))
    });
    let (feat, decision) = backbone_forward(g, batch, &conv, cadm_cfg, gcm, Mode::Train, rng)?;

    let c = params.classes;
    let mut cls_parts = Vec::with_capacity(b);
    let mut dis_parts = Vec::with_capacity(b);
    let mut ref_parts: Vec<Vec<ValId>> = vec![Vec::with_capacity(b); params.k_refine];
    let mut sup_images = Vec::with_capacity(b);
    for i in 0..b {
        let boxes = &proposals[i];
        let r = boxes.len();
        assert!(r > 0, "image {i} has no proposals");
        assert_eq!(labels[i].len(), c);
        let hfeat = proposal_features(g, params, &bound, feat, i, boxes)?;
        let (x_r, phi) = wsddn_head(
            g,
            hfeat,
            bound.id(params, "det.w"),
            bound.id(params, "det.b"),
            bound.id(params, "cls.w"),
            bound.id(params, "cls.b"),
            SoftmaxAssignment::DetOverProposals,
        )?;
        cls_parts.push(mil_loss(g, phi, &labels[i])?);

        let mut prev: Vec<f64> = g.data(x_r).to_vec();
        let mut branch_data: Vec<Vec<f64>> = Vec::with_capacity(params.k_refine);
        let mut refine_sets = Vec::with_capacity(params.k_refine);
        for k in 0..params.k_refine {
            let logits = branch_logits(
                g,
                hfeat,
                bound.id(params, &format!("ref{k}.w")),
                bound.id(params, &format!("ref{k}.b")),
            )?;
            let probs = g.softmax(logits, 1)?;
            let mined = match frozen {
                Some(s) => s.per_image[i].refine[k].clone(),
                None => mine_pseudo_labels(&prev, r, c, boxes, &labels[i], IOU_ASSIGN),
            };
            ref_parts[k].push(refinement_loss(g, logits, &mined)?);
            refine_sets.push(mined);
            let pd = g.data(probs).to_vec();
            prev = strip_background(&pd, r, c + 1);
            branch_data.push(pd);
        }

        let dis_logits =
            branch_logits(g, hfeat, bound.id(params, "dis.w"), bound.id(params, "dis.b"))?;
        let mined = match frozen {
            Some(s) => s.per_image[i].distill.clone(),
            None => {
                let targets = distillation_targets(&branch_data);
                let stripped = strip_background(&targets, r, c + 1);
                mine_pseudo_labels(&stripped, r, c, boxes, &labels[i], IOU_ASSIGN)
            }
        };
        dis_parts.push(refinement_loss(g, dis_logits, &mined)?);
        sup_images.push(ImageSupervision { refine: refine_sets, distill: mined });
    }

    let l_cls = mean_over_images(g, &cls_parts)?;
    let l_dis = mean_over_images(g, &dis_parts)?;
    let mut l_ref = Vec::with_capacity(params.k_refine);
    for parts in &ref_parts {
        l_ref.push(mean_over_images(g, parts)?);
    }
    let total = total_loss(g, l_cls, l_dis, &l_ref)?;
    let supervision = Supervision { per_image: sup_images };
    Ok(TrainForward { total, l_cls, l_dis, l_ref, decision, bound, supervision })
}

/// Inference scores for one image: flattened `[R, C]`, the mean of the
/// refinement (and optionally distillation) branch probabilities with the
/// background column removed. Deterministic; the dropout module is bypassed.
pub fn forward_eval(
    g: &mut Graph,
    params: &DetectorParams,
    image: &Tensor,
    proposals: &[BBox],
    gcm_cfg: Option<&GcmConfig>,
    include_distill: bool,
) -> Result<Vec<f64>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let x = g.constant(Tensor::from_vec(vec![1, 3, h, w], image.data().to_vec())?);
    let bound = BoundParams::bind(g, params);
    let conv = conv_stages(params, &bound);
    let gcm = gcm_cfg.map(|cfg| {
        (cfg, bound.id(params, "gcm.w1"), bound.id(params, "gcm.w2"), bound.id(params, "gcm.w3"))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval consumes no randomness
    let (feat, _) = backbone_forward(g, x, &conv, None, gcm, Mode::Eval, &mut rng)?;

    let hfeat = proposal_features(g, params, &bound, feat, 0, proposals)?;
    let r = proposals.len();
    let c = params.classes;
    let mut branch_data: Vec<Vec<f64>> = Vec::with_capacity(params.k_refine);
    for k in 0..params.k_refine {
        let logits = branch_logits(
            g,
            hfeat,
            bound.id(params, &format!("ref{k}.w")),
            bound.id(params, &format!("ref{k}.b")),
        )?;
        let probs = g.softmax(logits, 1)?;
        branch_data.push(g.data(probs).to_vec());
    }
    let dis_data = if include_distill {
        let logits = branch_logits(g, hfeat, bound.id(params, "dis.w"), bound.id(params, "dis.b"))?;
        let probs = g.softmax(logits, 1)?;
        Some(g.data(probs).to_vec())
    } else {
        None
    };
    Ok(inference_scores(&branch_data, dis_data.as_deref(), r, c + 1))
}

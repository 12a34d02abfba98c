//! Training loop: momentum SGD over the full detector, per-iteration
//! structured logging, checkpointing, evaluation, and the ablation driver.
//!
//! Determinism contract: a (seed, config, data) triple fixes every logged
//! number bit-exactly. Two independent rng streams derived from the seed
//! keep concerns apart — stream 0 picks batches and flip coins, stream 1
//! initializes weights and drives the dropout branch draws — so toggling a
//! module never perturbs batch composition.

use std::fmt;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::cadm::Branch;
use crate::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{flip_image_h, grid_proposals, DataError, Dataset};
use crate::eval::{evaluate_detections, nms, ApMode, Detection, EvalReport, GroundTruth};
use crate::gcm::FusionMode;
use crate::model::{forward_eval, forward_train, DetectorParams};
use crate::tensor::{Graph, TensorError};

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Config(ConfigError),
    Data(DataError),
    Checkpoint(CheckpointError),
    /// Loss left the reals: `diagnostic` holds the offending batch and the
    /// rng states needed to replay it.
    NonFinite { iteration: usize, diagnostic: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::NonFinite { iteration, diagnostic } => {
                write!(f, "non-finite loss at iteration {iteration}\n{diagnostic}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

/// Momentum SGD with L2 decay folded into the gradient:
/// `v <- mu*v - lr*(g + wd*theta)`, `theta <- theta + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &DetectorParams, momentum: f64, weight_decay: f64) -> Self {
        let velocities = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Sgd { momentum, weight_decay, velocities }
    }

    pub fn step(&mut self, params: &mut DetectorParams, grads: &[&[f64]], lr: f64) {
        assert_eq!(grads.len(), self.velocities.len());
        for (i, grad) in grads.iter().enumerate() {
            let v = &mut self.velocities[i];
            let theta = params.tensor_mut(i).data_mut();
            assert_eq!(grad.len(), theta.len());
            for j in 0..theta.len() {
                v[j] = self.momentum * v[j] - lr * (grad[j] + self.weight_decay * theta[j]);
                theta[j] += v[j];
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub l_cls: f64,
    pub l_ref: Vec<f64>,
    pub l_dis: f64,
    pub total: f64,
    pub branch_taken: String,
}

impl IterRecord {
    /// Absolute gap between the logged total and the re-summed components.
    pub fn decomposition_gap(&self) -> f64 {
        let mut resum = self.l_cls + self.l_dis;
        for l in &self.l_ref {
            resum += l;
        }
        (self.total - resum).abs()
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Drop => "drop",
        Branch::Importance => "importance",
        Branch::Bypass => "bypass",
    }
}

/// All mutable training state; stepping it consumes the two rng streams in
/// a fixed order so runs are replayable from any checkpoint.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: DetectorParams,
    pub sgd: Sgd,
    pub data_rng: ChaCha8Rng,
    pub model_rng: ChaCha8Rng,
    pub iteration: usize,
    proposals: Vec<BBox>,
    flipped_proposals: Vec<BBox>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let proposals = grid_proposals(
            dataset.height,
            dataset.width,
            &cfg.proposal_scales,
            &cfg.proposal_ratios,
            cfg.proposal_stride,
        )?;
        let flipped_proposals =
            proposals.iter().map(|b| b.flip_h(dataset.width as f64)).collect();
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model_rng.set_stream(1);
        let params = DetectorParams::init(
            dataset.classes,
            cfg.k_refine,
            cfg.gcm.bottleneck_ratio,
            &mut model_rng,
        )?;
        let sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            params,
            sgd,
            data_rng,
            model_rng,
            iteration: 0,
            proposals,
            flipped_proposals,
        })
    }

    /// Rebuild the exact state a checkpoint was saved from.
    pub fn from_checkpoint(ck: &Checkpoint, dataset: &Dataset) -> Result<Self, TrainError> {
        let cfg = TrainConfig::from_text(&ck.config_text)?;
        let mut weights = Vec::new();
        let mut vel: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, t) in &ck.tensors {
            match name.strip_prefix("vel.") {
                Some(base) => vel.push((base.to_string(), t.data().to_vec())),
                None => weights.push((name.clone(), t.clone())),
            }
        }
        let params = DetectorParams::from_table(
            weights,
            dataset.classes,
            cfg.k_refine,
            cfg.gcm.bottleneck_ratio,
        )?;
        let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
        if vel.len() != sgd.velocities.len() {
            return Err(TrainError::Checkpoint(CheckpointError::Io(format!(
                "checkpoint has {} velocity tensors, expected {}",
                vel.len(),
                sgd.velocities.len()
            ))));
        }
        for (i, (name, v)) in vel.into_iter().enumerate() {
            if name != params.name(i) || v.len() != sgd.velocities[i].len() {
                return Err(TrainError::Checkpoint(CheckpointError::Io(format!(
                    "velocity entry {i} is {name:?}, expected vel.{}",
                    params.name(i)
                ))));
            }
            sgd.velocities[i] = v;
        }
        let proposals = grid_proposals(
            dataset.height,
            dataset.width,
            &cfg.proposal_scales,
            &cfg.proposal_ratios,
            cfg.proposal_stride,
        )?;
        let flipped_proposals =
            proposals.iter().map(|b| b.flip_h(dataset.width as f64)).collect();
        Ok(Trainer {
            cfg,
            params,
            sgd,
            data_rng: ck.data_rng.restore(),
            model_rng: ck.model_rng.restore(),
            iteration: ck.iteration as usize,
            proposals,
            flipped_proposals,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, crate::tensor::Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, v) in self.sgd.velocities.iter().enumerate() {
            let shape = self.params.tensor(i).shape().to_vec();
            tensors.push((
                format!("vel.{}", self.params.name(i)),
                crate::tensor::Tensor::from_vec(shape, v.clone()).expect("velocity tensor"),
            ));
        }
        Checkpoint {
            config_text: self.cfg.to_text(),
            iteration: self.iteration as u64,
            data_rng: RngState::capture(&self.data_rng),
            model_rng: RngState::capture(&self.model_rng),
            tensors,
        }
    }

    /// Run one optimization step and return its log record.
    pub fn step(&mut self, dataset: &Dataset) -> Result<IterRecord, TrainError> {
        let n = dataset.scenes.len();
        assert!(n > 0, "empty dataset");
        let b = self.cfg.batch_size;
        let indices: Vec<usize> =
            (0..b).map(|_| self.data_rng.random_range(0..n)).collect();
        let flips: Vec<bool> = if self.cfg.flip_augment {
            (0..b).map(|_| self.data_rng.random::<bool>()).collect()
        } else {
            vec![false; b]
        };

        let mut images = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let mut proposals = Vec::with_capacity(b);
        for (&idx, &flip) in indices.iter().zip(&flips) {
            let scene = &dataset.scenes[idx];
            if flip {
                images.push(flip_image_h(&scene.image));
                proposals.push(self.flipped_proposals.clone());
            } else {
                images.push(scene.image.clone());
                proposals.push(self.proposals.clone());
            }
            labels.push(scene.image_labels.clone());
        }

        let rng_note = format!(
            "data_rng: stream={} word_pos={}\nmodel_rng: stream={} word_pos={}",
            self.data_rng.get_stream(),
            self.data_rng.get_word_pos(),
            self.model_rng.get_stream(),
            self.model_rng.get_word_pos(),
        );
        let mut g = Graph::new();
        let cadm = self.cfg.cadm_enabled.then_some(&self.cfg.cadm);
        let gcm = self.cfg.gcm_enabled.then_some(&self.cfg.gcm);
        let out = match forward_train(
            &mut g,
            &self.params,
            &images,
            &labels,
            &proposals,
            cadm,
            gcm,
            &mut self.model_rng,
        ) {
            Ok(out) => out,
            Err(crate::tensor::TensorError::NonFinite) => {
                return Err(TrainError::NonFinite {
                    iteration: self.iteration,
                    diagnostic: format!(
                        "forward pass produced a non-finite value\n\
                         batch scenes: {indices:?}\nflips: {flips:?}\n{rng_note}",
                    ),
                });
            }
            Err(e) => return Err(e.into()),
        };

        let total = g.data(out.total)[0];
        let l_cls = g.data(out.l_cls)[0];
        let l_dis = g.data(out.l_dis)[0];
        let l_ref: Vec<f64> = out.l_ref.iter().map(|&l| g.data(l)[0]).collect();
        if !total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                diagnostic: format!(
                    "batch scenes: {indices:?}\nflips: {flips:?}\n\
                     components: l_cls={l_cls} l_dis={l_dis} l_ref={l_ref:?}\n\
                     branch: {}\n{rng_note}",
                    branch_name(out.decision.branch),
                ),
            });
        }

        g.backward(out.total)?;
        let grads: Vec<&[f64]> = out
            .bound
            .ids
            .iter()
            .map(|&id| g.grad(id).expect("parameter leaf missing gradient"))
            .collect();
        let lr = self.cfg.lr_at(self.iteration);
        self.sgd.step(&mut self.params, &grads, lr);

        let record = IterRecord {
            iter: self.iteration,
            l_cls,
            l_ref,
            l_dis,
            total,
            branch_taken: branch_name(out.decision.branch).to_string(),
        };
        debug_assert!(record.decomposition_gap() <= 1e-12);
        self.iteration += 1;
        Ok(record)
    }

    /// Step until `cfg.iterations`, passing each record to `log`.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut log: impl FnMut(&IterRecord),
    ) -> Result<(), TrainError> {
        while self.iteration < self.cfg.iterations {
            let record = self.step(dataset)?;
            log(&record);
        }
        Ok(())
    }
}

/// Evaluate a model on a dataset with ground truth: eval-mode forwards,
/// per-class NMS at 0.3, then AP/CorLoc. Returns the post-NMS detections
/// alongside the metrics.
pub fn evaluate_model(
    params: &DetectorParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<Detection>), TrainError> {
    let proposals = grid_proposals(
        dataset.height,
        dataset.width,
        &cfg.proposal_scales,
        &cfg.proposal_ratios,
        cfg.proposal_stride,
    )?;
    let c = dataset.classes;
    let gcm = cfg.gcm_enabled.then_some(&cfg.gcm);
    let mut all: Vec<Detection> = Vec::new();
    for (image_id, scene) in dataset.scenes.iter().enumerate() {
        let mut g = Graph::new();
        let scores =
            forward_eval(&mut g, params, &scene.image, &proposals, gcm, cfg.eval_include_distill)?;
        for class_id in 0..c {
            let dets: Vec<Detection> = proposals
                .iter()
                .enumerate()
                .map(|(r, bx)| Detection {
                    image_id,
                    class_id,
                    score: scores[r * c + class_id],
                    bbox: *bx,
                })
                .collect();
            all.extend(nms(&dets, 0.3));
        }
    }
    let gts: Vec<GroundTruth> = dataset
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(image_id, s)| {
            s.objects.iter().map(move |(class_id, bbox)| GroundTruth {
                image_id,
                class_id: *class_id,
                bbox: *bbox,
            })
        })
        .collect();
    let report = evaluate_detections(&all, &gts, c, 0.5, ApMode::Voc07ElevenPoint);
    Ok((report, all))
}

/// Render the evaluation report as parseable `key = value` lines.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("map = {}\n", report.map));
    out.push_str(&format!("mean_corloc = {}\n", report.mean_corloc));
    for (c, ap) in report.per_class_ap.iter().enumerate() {
        out.push_str(&format!("ap_class_{c} = {}\n", ap.ap));
        if ap.no_gt {
            out.push_str(&format!("ap_class_{c}_no_gt = true\n"));
        }
    }
    for (c, cl) in report.per_class_corloc.iter().enumerate() {
        match cl {
            Some(v) => out.push_str(&format!("corloc_class_{c} = {v}\n")),
            None => out.push_str(&format!("corloc_class_{c} = none\n")),
        }
    }
    out
}

/// Which family of configurations an ablation run compares.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationMode {
    /// Module on/off grid: baseline, each alone, both.
    OnOff,
    /// The three context fusion variants.
    Fusion,
    /// Channel-only, spatial-only, and cascaded dropout.
    DropoutDim,
    /// One hyperparameter swept over explicit values.
    Sweep { param: SweepParam, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    DropRate,
}

/// One ablation table row.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    /// Swept value for sweep modes (the plot-data x axis).
    pub sweep_x: Option<f64>,
    pub map: f64,
    pub mean_corloc: f64,
    pub final_loss: f64,
}

fn cell_configs(base: &TrainConfig, mode: &AblationMode) -> Vec<(String, Option<f64>, TrainConfig)> {
    match mode {
        AblationMode::OnOff => [
            ("baseline", false, false),
            ("+dropout", true, false),
            ("+context", false, true),
            ("+both", true, true),
        ]
        .into_iter()
        .map(|(label, cadm, gcm)| {
            let mut cfg = base.clone();
            cfg.cadm_enabled = cadm;
            cfg.gcm_enabled = gcm;
            (label.to_string(), None, cfg)
        })
        .collect(),
        AblationMode::Fusion => [
            ("multiplication", FusionMode::Multiplication),
            ("addition", FusionMode::Addition),
            ("multiplication_then_addition", FusionMode::MultiplicationThenAddition),
        ]
        .into_iter()
        .map(|(label, fm)| {
            let mut cfg = base.clone();
            cfg.gcm_enabled = true;
            cfg.gcm.fusion_mode = fm;
            (label.to_string(), None, cfg)
        })
        .collect(),
        AblationMode::DropoutDim => {
            use crate::cadm::DropoutDim;
            [
                ("channel", DropoutDim::Channel),
                ("spatial", DropoutDim::Spatial),
                ("cascade", DropoutDim::Cascade),
            ]
            .into_iter()
            .map(|(label, dim)| {
                let mut cfg = base.clone();
                cfg.cadm_enabled = true;
                cfg.cadm.dropout_dim = dim;
                (label.to_string(), None, cfg)
            })
            .collect()
        }
        AblationMode::Sweep { param, values } => {
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted
                .into_iter()
                .map(|v| {
                    let mut cfg = base.clone();
                    cfg.cadm_enabled = true;
                    let name = match param {
                        SweepParam::Lambda1 => {
                            cfg.cadm.lambda1 = v;
                            "lambda1"
                        }
                        SweepParam::Lambda2 => {
                            cfg.cadm.lambda2 = v;
                            "lambda2"
                        }
                        SweepParam::DropRate => {
                            cfg.cadm.drop_rate = v;
                            "drop_rate"
                        }
                    };
                    (format!("{name}={v}"), Some(v), cfg)
                })
                .collect()
        }
    }
}

/// Train and evaluate every cell of the grid with identical data and seed.
pub fn run_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    mode: &AblationMode,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationCell>, TrainError> {
    let mut cells = Vec::new();
    for (label, sweep_x, cfg) in cell_configs(base, mode) {
        progress(&label);
        let mut trainer = Trainer::new(cfg.clone(), dataset)?;
        let mut last_total = f64::NAN;
        trainer.run(dataset, |rec| last_total = rec.total)?;
        let (report, _) = evaluate_model(&trainer.params, dataset, &cfg)?;
        cells.push(AblationCell {
            label,
            sweep_x,
            map: report.map,
            mean_corloc: report.mean_corloc,
            final_loss: last_total,
        });
    }
    Ok(cells)
}

/// Fixed-width comparison table: rows = configs, columns = metrics.
pub fn format_ablation_table(cells: &[AblationCell]) -> String {
    let width = cells.iter().map(|c| c.label.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}  {:>8}  {:>8}  {:>12}\n", "config", "mAP", "CorLoc", "final_loss");
    for c in cells {
        out.push_str(&format!(
            "{:width$}  {:>8.4}  {:>8.4}  {:>12.6}\n",
            c.label, c.map, c.mean_corloc, c.final_loss
        ));
    }
    out
}

/// Tab-separated sweep data for plotting; empty for non-sweep grids.
pub fn format_plot_data(cells: &[AblationCell]) -> String {
    let mut out = String::new();
    for c in cells {
        if let Some(x) = c.sweep_x {
            out.push_str(&format!("{x}\t{}\t{}\t{}\n", c.map, c.mean_corloc, c.final_loss));
        }
    }
    out
}

/// Parse an ablation grid file: ordinary config lines plus `ablate_mode`
/// (`onoff`/`fusion`/`dropout_dim`/`sweep`), and for sweeps `sweep_param`
/// (`lambda1`/`lambda2`/`drop_rate`) and `sweep_values` (comma list).
pub fn parse_grid(text: &str) -> Result<(TrainConfig, AblationMode), TrainError> {
    let mut cfg = TrainConfig::default();
    let mut mode_name: Option<String> = None;
    let mut sweep_param: Option<String> = None;
    let mut sweep_values: Option<Vec<f64>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(ConfigError::BadLine(line.into())))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "ablate_mode" => mode_name = Some(v.to_string()),
            "sweep_param" => sweep_param = Some(v.to_string()),
            "sweep_values" => {
                let vals: Result<Vec<f64>, _> =
                    v.split(',').map(|s| s.trim().parse::<f64>()).collect();
                sweep_values = Some(vals.map_err(|_| {
                    TrainError::Config(ConfigError::BadValue {
                        key: "sweep_values".into(),
                        value: v.into(),
                        expected: "comma-separated numbers",
                    })
                })?);
            }
            _ => cfg.set(k, v)?,
        }
    }
    cfg.validate()?;
    let mode = match mode_name.as_deref() {
        Some("onoff") => AblationMode::OnOff,
        Some("fusion") => AblationMode::Fusion,
        Some("dropout_dim") => AblationMode::DropoutDim,
        Some("sweep") => {
            let param = match sweep_param.as_deref() {
                Some("lambda1") => SweepParam::Lambda1,
                Some("lambda2") => SweepParam::Lambda2,
                Some("drop_rate") => SweepParam::DropRate,
                other => {
                    return Err(TrainError::Config(ConfigError::BadValue {
                        key: "sweep_param".into(),
                        value: other.unwrap_or("<missing>").into(),
                        expected: "lambda1/lambda2/drop_rate",
                    }))
                }
            };
            let values = sweep_values.filter(|v| !v.is_empty()).ok_or_else(|| {
                TrainError::Config(ConfigError::Invalid(
                    "sweep mode needs non-empty sweep_values".into(),
                ))
            })?;
            AblationMode::Sweep { param, values }
        }
        other => {
            return Err(TrainError::Config(ConfigError::BadValue {
                key: "ablate_mode".into(),
                value: other.unwrap_or("<missing>").into(),
                expected: "onoff/fusion/dropout_dim/sweep",
            }))
        }
    };
    Ok((cfg, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_dataset;
    use crate::tensor::Tensor;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        write_dataset(dir.path(), n, 4, 32, 32, &mut rng).unwrap();
        crate::data::load_dataset(dir.path()).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 6;
        cfg.decay_iteration = 4;
        cfg.batch_size = 2;
        cfg.proposal_scales = vec![16, 24];
        cfg.proposal_stride = 8;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn sgd_with_zero_lr_is_a_null_update() {
        let mut params = DetectorParams::init(2, 1, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut sgd = Sgd::new(&params, 0.9, 5e-4);
        let grads: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| vec![1.0; t.numel()]).collect();
        for _ in 0..5 {
            let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            sgd.step(&mut params, &refs, 0.0);
        }
        for ((_, t), want) in params.iter().zip(&before) {
            assert_eq!(t.data(), want.as_slice());
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_by_the_hand_factor() {
        // zero gradient, zero momentum history: theta' = theta * (1 - lr*wd)
        let mut params = DetectorParams::init(2, 1, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let (lr, wd) = (0.1, 0.5);
        let mut sgd = Sgd::new(&params, 0.0, wd);
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let refs: Vec<&[f64]> = zeros.iter().map(|g| g.as_slice()).collect();
        sgd.step(&mut params, &refs, lr);
        for ((_, t), want) in params.iter().zip(&before) {
            for (got, w) in t.data().iter().zip(want) {
                assert!((got - w * (1.0 - lr * wd)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn momentum_follows_the_two_step_recurrence() {
        let mut params = DetectorParams::init(2, 1, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let theta0 = params.tensor(0).data()[0];
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut sgd = Sgd::new(&params, mu, 0.0);
        let grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![g; t.numel()]).collect();
        let refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
        sgd.step(&mut params, &refs, lr);
        sgd.step(&mut params, &refs, lr);
        let v1 = -lr * g;
        let v2 = mu * v1 - lr * g;
        assert!((params.tensor(0).data()[0] - (theta0 + v1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn short_training_logs_finite_decomposable_records() {
        let ds = tiny_dataset(4, 10);
        let mut trainer = Trainer::new(tiny_config(), &ds).unwrap();
        let mut records = Vec::new();
        trainer.run(&ds, |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 6);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.iter, i);
            assert!(r.total.is_finite() && r.total > 0.0);
            assert_eq!(r.l_ref.len(), 3);
            assert!(r.decomposition_gap() <= 1e-12, "iter {i} gap {}", r.decomposition_gap());
            assert!(["drop", "importance", "bypass"].contains(&r.branch_taken.as_str()));
        }
        // records serialize as one JSON object per line
        let line = serde_json::to_string(&records[0]).unwrap();
        let back: IterRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.iter, 0);
        assert_eq!(back.total, records[0].total);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let ds = tiny_dataset(4, 11);
        let run = || {
            let mut t = Trainer::new(tiny_config(), &ds).unwrap();
            let mut rs = Vec::new();
            t.run(&ds, |r| rs.push(r.total.to_bits())).unwrap();
            rs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flip_augmentation_still_trains_deterministically() {
        let ds = tiny_dataset(4, 12);
        let mut cfg = tiny_config();
        cfg.flip_augment = true;
        let run = |cfg: TrainConfig| {
            let mut t = Trainer::new(cfg, &ds).unwrap();
            let mut rs = Vec::new();
            t.run(&ds, |r| rs.push(r.total.to_bits())).unwrap();
            rs
        };
        assert_eq!(run(cfg.clone()), run(cfg));
    }

    #[test]
    fn resumed_training_matches_uninterrupted_bitwise() {
        let ds = tiny_dataset(4, 13);
        let mut cfg = tiny_config();
        cfg.iterations = 8;
        cfg.decay_iteration = 5;

        let mut full = Trainer::new(cfg.clone(), &ds).unwrap();
        let mut full_records = Vec::new();
        full.run(&ds, |r| full_records.push(r.total.to_bits())).unwrap();

        let mut first = Trainer::new(cfg.clone(), &ds).unwrap();
        for _ in 0..4 {
            first.step(&ds).unwrap();
        }
        let ck = first.checkpoint();
        let bytes = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(&loaded, &ds).unwrap();
        let mut tail = Vec::new();
        resumed.run(&ds, |r| tail.push(r.total.to_bits())).unwrap();

        assert_eq!(tail.len(), 4);
        assert_eq!(&full_records[4..], tail.as_slice());
        for ((_, a), (_, b)) in full.params.iter().zip(resumed.params.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn poisoned_weights_abort_with_a_diagnostic() {
        let ds = tiny_dataset(2, 14);
        let mut trainer = Trainer::new(tiny_config(), &ds).unwrap();
        trainer.params.tensor_mut(0).data_mut()[0] = f64::NAN;
        match trainer.step(&ds) {
            Err(TrainError::NonFinite { iteration: 0, diagnostic }) => {
                assert!(diagnostic.contains("batch scenes"), "{diagnostic}");
                assert!(diagnostic.contains("model_rng"), "{diagnostic}");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let ds = tiny_dataset(3, 15);
        let cfg = tiny_config();
        let trainer = Trainer::new(cfg.clone(), &ds).unwrap();
        let (r1, d1) = evaluate_model(&trainer.params, &ds, &cfg).unwrap();
        let (r2, d2) = evaluate_model(&trainer.params, &ds, &cfg).unwrap();
        assert!(r1.map >= 0.0 && r1.map <= 1.0);
        assert_eq!(r1.map.to_bits(), r2.map.to_bits());
        assert_eq!(d1.len(), d2.len());
        let text = format_report(&r1);
        assert!(text.contains("map = "));
        assert!(text.contains("corloc_class_3"));
    }

    #[test]
    fn oracle_detections_score_perfectly() {
        // inject ground truth as detections with score 1
        let ds = tiny_dataset(5, 16);
        let dets: Vec<Detection> = ds
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(image_id, s)| {
                s.objects.iter().map(move |(class_id, bbox)| Detection {
                    image_id,
                    class_id: *class_id,
                    score: 1.0,
                    bbox: *bbox,
                })
            })
            .collect();
        let gts: Vec<GroundTruth> = ds
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(image_id, s)| {
                s.objects.iter().map(move |(class_id, bbox)| GroundTruth {
                    image_id,
                    class_id: *class_id,
                    bbox: *bbox,
                })
            })
            .collect();
        let present: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
        let report = evaluate_detections(&dets, &gts, 4, 0.5, ApMode::Voc07ElevenPoint);
        for c in present {
            assert!((report.per_class_ap[c].ap - 1.0).abs() < 1e-12);
            assert_eq!(report.per_class_corloc[c], Some(1.0));
        }
        assert!((report.mean_corloc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_file_parses_and_rejects() {
        let (cfg, mode) = parse_grid("ablate_mode = onoff\nseed = 9\niterations = 6\ndecay_iteration = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(mode, AblationMode::OnOff);
        let (_, mode) = parse_grid(
            "ablate_mode = sweep\nsweep_param = lambda2\nsweep_values = 0.9, 0.6, 0.8\n",
        )
        .unwrap();
        match mode {
            AblationMode::Sweep { param: SweepParam::Lambda2, values } => {
                assert_eq!(values, vec![0.9, 0.6, 0.8]);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_grid("ablate_mode = bogus\n").is_err());
        assert!(parse_grid("ablate_mode = sweep\nsweep_param = lambda1\n").is_err());
    }

    #[test]
    fn sweep_rows_come_out_in_ascending_order() {
        let base = tiny_config();
        let mode = AblationMode::Sweep {
            param: SweepParam::Lambda2,
            values: vec![0.9, 0.6, 0.95, 0.7, 0.8],
        };
        let cells = cell_configs(&base, &mode);
        let xs: Vec<f64> = cells.iter().map(|(_, x, _)| x.unwrap()).collect();
        assert_eq!(xs, vec![0.6, 0.7, 0.8, 0.9, 0.95]);
        assert_eq!(cells.len(), 5);
    }

    #[test]
    fn single_cell_grid_yields_one_row() {
        let ds = tiny_dataset(2, 17);
        let mut base = tiny_config();
        base.iterations = 2;
        base.decay_iteration = 1;
        let mode =
            AblationMode::Sweep { param: SweepParam::DropRate, values: vec![0.5] };
        let cells = run_ablation(&base, &ds, &mode, |_| {}).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(cells[0].final_loss.is_finite());
        let table = format_ablation_table(&cells);
        assert_eq!(table.lines().count(), 2);
        let plot = format_plot_data(&cells);
        assert_eq!(plot.lines().count(), 1);
    }

    #[test]
    fn ablation_baseline_cell_equals_direct_training_bitwise() {
        let ds = tiny_dataset(3, 18);
        let mut base = tiny_config();
        base.iterations = 3;
        base.decay_iteration = 2;
        let cells = run_ablation(&base, &ds, &AblationMode::OnOff, |_| {}).unwrap();
        let baseline = &cells[0];

        let mut direct_cfg = base.clone();
        direct_cfg.cadm_enabled = false;
        direct_cfg.gcm_enabled = false;
        let mut trainer = Trainer::new(direct_cfg.clone(), &ds).unwrap();
        let mut last = f64::NAN;
        trainer.run(&ds, |r| last = r.total).unwrap();
        assert_eq!(baseline.final_loss.to_bits(), last.to_bits());
        let (report, _) = evaluate_model(&trainer.params, &ds, &direct_cfg).unwrap();
        assert_eq!(baseline.map.to_bits(), report.map.to_bits());
    }

    #[test]
    fn velocity_round_trip_preserves_optimizer_state() {
        let ds = tiny_dataset(2, 19);
        let mut trainer = Trainer::new(tiny_config(), &ds).unwrap();
        trainer.step(&ds).unwrap();
        trainer.step(&ds).unwrap();
        let ck = trainer.checkpoint();
        let restored = Trainer::from_checkpoint(&ck, &ds).unwrap();
        for (a, b) in trainer.sgd.velocities.iter().zip(&restored.sgd.velocities) {
            assert_eq!(a, b);
        }
        assert_eq!(restored.iteration, 2);
    }

    #[test]
    fn checkpoint_velocities_are_well_formed_tensors() {
        let ds = tiny_dataset(2, 20);
        let trainer = Trainer::new(tiny_config(), &ds).unwrap();
        let ck = trainer.checkpoint();
        let n_params = trainer.params.len();
        assert_eq!(ck.tensors.len(), 2 * n_params);
        for (name, t) in &ck.tensors[n_params..] {
            assert!(name.starts_with("vel."));
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
        let _unused: Tensor = ck.tensors[0].1.clone();
    }
}

//! Gradient-fidelity sweeps: packaged finite-difference audits of the
//! dropout module, the context module, and the full detection head, shared
//! by the `gradcheck` CLI subcommand and the integration suite.
//!
//! Each sweep compares autodiff against central differences at step 1e-5 and
//! demands relative error below 1e-4. Data-dependent selections (masks,
//! mined labels) are pinned where the backward pass treats them as
//! constants, so the checks measure exactly the function being
//! differentiated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cadm::{cadm_forward, Branch, CadmConfig};
use crate::data::{generate_scene, grid_proposals};
use crate::gcm::{gcm_forward, FusionMode, GcmConfig};
use crate::model::{forward_train, forward_train_bound, BoundParams, DetectorParams};
use crate::tensor::{grad_check, grad_check_sampled, GradCheckReport, Graph, Result, Tensor};
use crate::Mode;

/// Probe size for all sweeps.
pub const FD_STEP: f64 = 1e-5;
/// Relative error bound for all sweeps.
pub const FD_TOL: f64 = 1e-4;

/// One labelled finite-difference audit.
pub struct NamedReport {
    pub label: String,
    pub report: GradCheckReport,
}

/// Total coordinates actually compared (skipped kinks excluded).
pub fn total_checked(reports: &[NamedReport]) -> usize {
    reports.iter().map(|r| r.report.checked).sum()
}

/// True iff every audit stayed within tolerance.
pub fn all_passed(reports: &[NamedReport]) -> bool {
    reports.iter().all(|r| r.report.passed())
}

/// Dropout module: both branches, with the branch choice forced through the
/// drop-rate extremes so each path is exercised deterministically. Inputs
/// stay positive and away from the mask thresholds; probes that cross one
/// anyway are skipped by the curvature filter.
pub fn check_cadm() -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for (label, drop_rate, want) in [
        ("cadm drop branch", 1.0, Branch::Drop),
        ("cadm importance branch", 0.0, Branch::Importance),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::uniform(vec![2, 8, 5, 5], 0.1, 1.0, &mut rng);
        let cfg = CadmConfig { drop_rate, ..CadmConfig::default() };
        let report = grad_check(
            &[x],
            move |g, ids| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                let (y, dec) = cadm_forward(g, ids[0], &cfg, Mode::Train, &mut r)?;
                assert_eq!(dec.branch, want);
                g.sum_all(y)
            },
            FD_STEP,
            FD_TOL,
        )?;
        out.push(NamedReport { label: label.to_string(), report });
    }
    Ok(out)
}

/// Context module: the full path (attention pool, normalized bottleneck,
/// fusion) for each of the three fusion modes, probing the input map and all
/// three weights.
pub fn check_gcm() -> Result<Vec<NamedReport>> {
    let (n, d, r) = (2, 8, 4);
    let mut out = Vec::new();
    for (label, mode) in [
        ("gcm multiplication fusion", FusionMode::Multiplication),
        ("gcm addition fusion", FusionMode::Addition),
        ("gcm gated fusion", FusionMode::MultiplicationThenAddition),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = Tensor::uniform(vec![n, d, 4, 4], -1.0, 1.0, &mut rng);
        let w1 = Tensor::uniform(vec![1, d, 1, 1], -0.5, 0.5, &mut rng);
        let w2 = Tensor::uniform(vec![d, d / r], -0.5, 0.5, &mut rng);
        let w3 = Tensor::uniform(vec![d / r, d], -0.5, 0.5, &mut rng);
        let cfg = GcmConfig { fusion_mode: mode, ..GcmConfig::default() };
        let report = grad_check(
            &[x, w1, w2, w3],
            move |g, ids| {
                let y = gcm_forward(g, ids[0], ids[1], ids[2], ids[3], &cfg)?;
                g.sum_all(y)
            },
            FD_STEP,
            FD_TOL,
        )?;
        out.push(NamedReport { label: label.to_string(), report });
    }
    Ok(out)
}

/// Full head: conv trunk, context module, RoI pooling, the two-stream MIL
/// head, and every refinement/distillation loss, with the mined supervision
/// captured once and pinned (it enters backward as constants).
pub fn check_head() -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let params = DetectorParams::init(4, 2, 4, &mut rng)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for seed in 0..2 {
        let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), 4, 32, 32);
        labels.push(s.image_labels.clone());
        images.push(s.image);
    }
    let boxes = grid_proposals(32, 32, &[16, 24], &[1.0], 8).expect("static grid");
    let proposals = vec![boxes.clone(), boxes];
    let gcm = GcmConfig::default();

    let sup = {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        forward_train(&mut g, &params, &images, &labels, &proposals, None, Some(&gcm), &mut r)?
            .supervision
    };
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check_sampled(
        &tensors,
        |g, ids| {
            let bound = BoundParams { ids: ids.to_vec() };
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let out = forward_train_bound(
                g,
                &params,
                bound,
                &images,
                &labels,
                &proposals,
                None,
                Some(&gcm),
                &mut r,
                Some(&sup),
            )?;
            Ok(out.total)
        },
        FD_STEP,
        FD_TOL,
        230,
        123,
    )?;
    Ok(vec![NamedReport { label: "full head, frozen supervision".to_string(), report }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadm_sweep_passes_with_enough_coverage() {
        let reports = check_cadm().unwrap();
        assert_eq!(reports.len(), 2);
        assert!(all_passed(&reports), "{:?}", reports[0].report.max_rel_err);
        assert!(total_checked(&reports) >= 200);
    }

    #[test]
    fn gcm_sweep_passes_with_enough_coverage() {
        let reports = check_gcm().unwrap();
        assert_eq!(reports.len(), 3);
        assert!(all_passed(&reports));
        assert!(total_checked(&reports) >= 200);
    }

    #[test]
    fn head_sweep_passes_with_enough_coverage() {
        let reports = check_head().unwrap();
        assert!(all_passed(&reports), "max rel err {}", reports[0].report.max_rel_err);
        assert!(total_checked(&reports) >= 200);
    }
}

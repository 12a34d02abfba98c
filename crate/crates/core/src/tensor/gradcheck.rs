//! Finite-difference validation of the backward pass.
//!
//! The checker rebuilds the forward computation from scratch for every probe,
//! so the builder closure must be deterministic; this is verified up front by
//! comparing two forward passes bit for bit. Coordinates sitting on a kink
//! (relu corner, max tie, clamp edge) are detected by a curvature probe and
//! skipped rather than reported as failures.

use super::{Graph, Result, Tensor, TensorError, ValId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates skipped by the kink filter.
    pub skipped: usize,
    /// Largest relative error among checked coordinates.
    pub max_rel_err: f64,
    /// `(param index, coordinate)` of the worst error, if any were checked.
    pub worst: Option<(usize, usize)>,
    /// Error tolerance the run was judged against.
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared absolutely instead of amplifying finite-difference noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn forward<F>(params: &[Tensor], build: &F) -> Result<(Graph, Vec<ValId>, ValId)>
where
    F: Fn(&mut Graph, &[ValId]) -> Result<ValId>,
{
    let mut g = Graph::new();
    let ids: Vec<ValId> = params.iter().map(|p| g.leaf(p.clone().with_grad())).collect();
    let loss = build(&mut g, &ids)?;
    Ok((g, ids, loss))
}

fn loss_value<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[ValId]) -> Result<ValId>,
{
    let (g, _, loss) = forward(params, build)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NotScalarLoss { numel: v.numel() });
    }
    Ok(v.data()[0])
}

/// Compare analytic gradients against central differences on every
/// coordinate of every parameter. `step` is the probe size (1e-5 is a good
/// default for f64), `tol` the relative error bound.
pub fn grad_check<F>(params: &[Tensor], build: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[ValId]) -> Result<ValId>,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    grad_check_coords(params, build, step, tol, &all)
}

/// Same as [`grad_check`] but probing at most `max_coords` coordinates,
/// chosen without replacement by a seeded RNG. Use for large parameter sets.
pub fn grad_check_sampled<F>(
    params: &[Tensor],
    build: F,
    step: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[ValId]) -> Result<ValId>,
{
    let mut all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    if all.len() > max_coords {
        // Partial Fisher-Yates: the first max_coords entries become the sample.
        let mut rng = StdRng::seed_from_u64(seed);
        for i in 0..max_coords {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(max_coords);
    }
    grad_check_coords(params, build, step, tol, &all)
}

fn grad_check_coords<F>(
    params: &[Tensor],
    build: F,
    step: f64,
    tol: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[ValId]) -> Result<ValId>,
{
    // Determinism gate: two independent forward passes must agree bit for bit.
    let l0 = loss_value(params, &build)?;
    let l0_again = loss_value(params, &build)?;
    if l0.to_bits() != l0_again.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    // Analytic gradients from one backward sweep.
    let (mut g, ids, loss) = forward(params, &build)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|&id| g.grad(id).expect("leaf requires grad").to_vec()).collect();

    let mut report =
        GradCheckReport { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None, tol };
    let mut probe: Vec<Tensor> = params.to_vec();
    for &(pi, ci) in coords {
        let orig = probe[pi].data()[ci];
        probe[pi].data_mut()[ci] = orig + step;
        let lp = loss_value(&probe, &build)?;
        probe[pi].data_mut()[ci] = orig - step;
        let lm = loss_value(&probe, &build)?;
        probe[pi].data_mut()[ci] = orig;

        // Curvature probe: a kink makes the second difference O(step) instead
        // of O(step^2), so a threshold linear in step separates the two.
        if (lp - 2.0 * l0 + lm).abs() > step * l0.abs().max(1.0) {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        let err = rel_err(analytic[pi][ci], numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((pi, ci));
        }
    }
    Ok(report)
}

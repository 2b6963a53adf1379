//! Finite-difference verification of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Precision, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of input coordinates checked (all when fewer exist).
    pub points: usize,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Times the step is divided by ten after a kink crossing.
    pub retries: u32,
    /// Difference on the smooth piece of the base point: every evaluation
    /// replays the base point's branch decisions, and the central quotient
    /// is Richardson-extrapolated, so no coordinate is skipped.
    pub freeze_branches: bool,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            points: 100,
            floor: 1e-3,
            retries: 2,
            freeze_branches: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink at every step tried.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences. Unless branches are frozen: when a perturbation changes the branch signature on one
/// side only, a one-sided second-order difference is used; otherwise the
/// step is reduced, and the coordinate is skipped if every step crosses a
/// kink.
pub fn gradcheck<F>(
    f: F,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new(Precision::Double);
    if opts.freeze_branches {
        g.record_branches();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar_value(out);
    let base_sig = g.branch_signature();
    let record = g.take_branch_record();
    g.backward(out)?;

    let eval = |ins: &[Tensor]| -> Result<(f64, u64), AutodiffError> {
        let mut g = Graph::new(Precision::Double);
        if opts.freeze_branches {
            g.replay_branches(record.clone());
        }
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.scalar_value(out), g.branch_signature()))
    };
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let chosen = sample(&mut rng, total, opts.points.min(total));
    let mut report = GradcheckReport::default();
    let mut work = inputs.to_vec();
    for flat in chosen.iter() {
        let (mut t, mut i) = (0, flat);
        while i >= inputs[t].len() {
            i -= inputs[t].len();
            t += 1;
        }
        let x0 = inputs[t].data()[i];
        let mut at = |dx: f64| -> Result<Option<f64>, AutodiffError> {
            work[t].data_mut()[i] = x0 + dx;
            let (v, sig) = eval(&work)?;
            work[t].data_mut()[i] = x0;
            Ok((sig == base_sig).then_some(v))
        };
        let mut numeric = None;
        let mut h = opts.step;
        if opts.freeze_branches {
            let mut central = |h: f64| -> Result<f64, AutodiffError> {
                let (fp, fm) = (at(h)?.unwrap_or(f64::NAN), at(-h)?.unwrap_or(f64::NAN));
                Ok((fp - fm) / (2.0 * h))
            };
            let (d1, d2) = (central(h)?, central(0.5 * h)?);
            numeric = Some((4.0 * d2 - d1) / 3.0);
        }
        for _ in 0..=opts.retries {
            if numeric.is_some() {
                break;
            }
            let (fp, fm) = (at(h)?, at(-h)?);
            if let (Some(fp), Some(fm)) = (fp, fm) {
                numeric = Some((fp - fm) / (2.0 * h));
                break;
            }
            // a kink on one side only: second-order one-sided difference on
            // the other, at the initial step only since its rounding error is
            // four times that of the central quotient
            let side = if fp.is_some() { h } else if fm.is_some() { -h } else { 0.0 };
            if side != 0.0 && h == opts.step {
                if let Some(f2) = at(2.0 * side)? {
                    let f1 = fp.or(fm).unwrap_or(base);
                    numeric = Some((4.0 * f1 - 3.0 * base - f2) / (2.0 * side));
                    break;
                }
            }
            h /= 10.0;
        }
        let Some(n) = numeric else {
            report.skipped += 1;
            continue;
        };
        let a = analytic[t][i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

//! Central finite differences against tape gradients.
//!
//! The differentiated output is projected onto a seeded random direction so
//! every output entry contributes. Each trainable store entry (inputs are
//! registered as trainable entries too) is perturbed by `±h`. A perturbation
//! that changes the tape's branch fingerprint crossed a ReLU, pooling or
//! absolute-value kink; the step is shrunk and, if the kink persists, the case
//! is rebuilt from a new seed.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::autograd::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::store::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const MAX_RESAMPLES: usize = 5;
/// Step reductions tried when a perturbation crosses a kink.
const STEP_REDUCTIONS: [f64; 3] = [1.0, 0.1, 0.01];

pub type ForwardFn = Box<dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>>;

/// A differentiable computation with its parameters.
pub struct GradCheckCase {
    pub store: ParamStore<f64>,
    pub mode: NormMode,
    pub forward: ForwardFn,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter (all when `None`).
    pub max_entries: Option<usize>,
    /// Multiply the analytic gradient of the named parameter (negative controls).
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            max_entries: None,
            corrupt: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub worst_group: String,
    pub passed: bool,
    pub resamples: usize,
    pub smallest_step: f64,
}

/// `max_i |a_i - n_i| / max(1e-8, max_i |a_i|, max_i |n_i|)` over one parameter group.
pub fn group_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

struct Eval {
    value: f64,
    signature: u64,
}

fn evaluate(case: &GradCheckCase, store: &ParamStore<f64>, projection: &Matrix<f64>) -> Result<Eval> {
    let mut tape = Tape::new(case.mode);
    let out = (case.forward)(store, &mut tape)?;
    let value = tape
        .value(out)
        .as_slice()
        .iter()
        .zip(projection.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    Ok(Eval {
        value,
        signature: tape.kink_signature(),
    })
}

enum Attempt {
    Done(GradCheckReport),
    Kink,
}

fn attempt(case: &GradCheckCase, seed: u64, opts: &GradCheckOptions) -> Result<Attempt> {
    let mut tape = Tape::new(case.mode);
    let out = (case.forward)(&case.store, &mut tape)?;
    let shape = (tape.value(out).rows(), tape.value(out).cols());
    let mut prng = rng::stream(seed, "gradcheck-projection");
    let projection = Matrix::from_vec(
        shape.0,
        shape.1,
        (0..shape.0 * shape.1).map(|_| prng.gen_range(-1.0..1.0)).collect(),
    )?;
    let base_sig = tape.kink_signature();
    let root = tape.dot(out, projection.clone())?;
    let grads = tape.backward(root)?;

    let mut store = case.store.clone();
    let mut groups = Vec::new();
    let mut smallest_step = opts.step;
    let mut pick = rng::stream(seed, "gradcheck-entries");
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let len = store.value(id).as_slice().len();
        let zero = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
        let mut analytic_all = grads.param(id).unwrap_or(&zero).as_slice().to_vec();
        if let Some((target, factor)) = &opts.corrupt {
            if *target == name {
                analytic_all.iter_mut().for_each(|g| *g *= factor);
            }
        }
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < len => {
                let mut v = sample(&mut pick, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = store.value(id).as_slice()[e];
            let mut found = None;
            for red in STEP_REDUCTIONS {
                let h = opts.step * red;
                store.value_mut(id).as_mut_slice()[e] = orig + h;
                let plus = evaluate(case, &store, &projection)?;
                store.value_mut(id).as_mut_slice()[e] = orig - h;
                let minus = evaluate(case, &store, &projection)?;
                store.value_mut(id).as_mut_slice()[e] = orig;
                if plus.signature == base_sig && minus.signature == base_sig {
                    found = Some((plus.value - minus.value) / (2.0 * h));
                    smallest_step = smallest_step.min(h);
                    break;
                }
            }
            match found {
                Some(n) => {
                    numeric.push(n);
                    analytic.push(analytic_all[e]);
                }
                None => return Ok(Attempt::Kink),
            }
        }
        groups.push(GroupReport {
            param: name,
            checked: entries.len(),
            max_rel_err: group_rel_err(&analytic, &numeric),
        });
    }
    let (worst_group, max_rel_err) = groups
        .iter()
        .map(|g| (g.param.clone(), g.max_rel_err))
        .fold((String::new(), 0.0), |acc, g| if g.1 > acc.1 { g } else { acc });
    Ok(Attempt::Done(GradCheckReport {
        passed: max_rel_err <= opts.tol,
        groups,
        max_rel_err,
        worst_group,
        resamples: 0,
        smallest_step,
    }))
}

/// Check `build(seed)`; on persistent kinks rebuild with fresh seeds.
pub fn grad_check(
    build: &dyn Fn(u64) -> Result<GradCheckCase>,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    for resample in 0..=MAX_RESAMPLES {
        let s = rng::mix64(seed.wrapping_add(resample as u64));
        let case = build(s)?;
        if let Attempt::Done(mut report) = attempt(&case, s, opts)? {
            report.resamples = resample;
            return Ok(report);
        }
    }
    Err(Error::NonDifferentiablePoint(MAX_RESAMPLES))
}

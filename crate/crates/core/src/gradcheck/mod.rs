//! Finite-difference verification of analytic gradients.
//!
//! Every check runs in `f64`. For each parameter tensor a few random entries
//! are perturbed by `±h` and the central difference is compared against the
//! reverse-mode gradient. Perturbed evaluations replay the ReLU, clamp and
//! max-pool decisions of the unperturbed pass, so the difference quotient
//! measures the same smooth piece as the gradient even when `±h` crosses a
//! kink. Such probes are counted in [`TensorReport::kinks`].

mod suite;

pub use suite::{run_full, run_modules, run_ops, CaseReport, Scope, MODULE_CASES, OP_CASES};

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            probes: 5,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub probes: Vec<ProbeResult>,
    /// Probes whose perturbation crossed a kink.
    pub kinks: usize,
}

impl TensorReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
            && self.tensors.iter().all(|t| !t.probes.is_empty())
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error().total_cmp(&b.max_rel_error()))
    }

    pub fn num_probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes.len()).sum()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Checks the gradient of the scalar `f` with respect to every trainable
/// parameter in `store`.
pub fn check<F>(store: &ParamStore<f64>, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::recording();
    let bound = store.bind(&tape);
    let loss = f(&bound)?;
    if loss.numel() != 1 {
        return Err(Error::Tape(format!(
            "gradient check needs a scalar, got {:?}",
            loss.shape()
        )));
    }
    let log = Rc::new(tape.take_branch_log());
    let mut grads = tape.backward(loss)?;
    let analytic = bound.collect_grads(&mut grads);
    drop(bound);

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let tape = Tape::replaying(Rc::clone(&log));
        let p = s.bind(&tape);
        let y = f(&p)?.item();
        tape.check_replay()?;
        Ok((y, tape.crossed_kinks() > 0))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut tensors = Vec::new();
    for ((id, param), grad) in store.iter().zip(analytic) {
        if !param.trainable {
            continue;
        }
        let n = param.value.numel();
        let grad = grad.map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; n]);
        let mut probes = Vec::new();
        let mut kinks = 0;
        for idx in sample(&mut rng, n, n.min(cfg.probes)).into_vec() {
            let orig = param.value.data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + cfg.h;
            let (up, kink_up) = eval(&work)?;
            work.value_mut(id).data_mut()[idx] = orig - cfg.h;
            let (down, kink_down) = eval(&work)?;
            work.value_mut(id).data_mut()[idx] = orig;
            kinks += (kink_up || kink_down) as usize;
            let numeric = (up - down) / (2.0 * cfg.h);
            probes.push(ProbeResult {
                index: idx,
                analytic: grad[idx],
                numeric,
                rel_error: rel_error(grad[idx], numeric),
            });
        }
        tensors.push(TensorReport {
            name: param.name.clone(),
            probes,
            kinks,
        });
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}

//! Self-checks exposed on the command line: GAM-versus-baseline equivalence
//! and analytic-versus-finite-difference gradients.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::baseline::{baseline_head, compose_b, BaselineHeadParams, InputSequence};
use crate::config::RunConfig;
use crate::error::Result;
use crate::finite_diff::{finite_diff_grad, worst_relative_errors};
use crate::gam::{gam_head, FeatureMap, GamHeadParams, MixtureSpec};
use crate::model::param_group;
use crate::rng::{derive_seed, gaussian, rng_from_seed};
use crate::task::gen_batch;

/// Max-norm tolerance for GAM reproducing the baseline head.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;
/// Relative tolerance for analytic against central-difference gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FINITE_DIFF_STEP: f64 = 1e-5;

const EQUIV_STREAM: u64 = 11;
const GRAD_STREAM: u64 = 12;

/// A random baseline instance with `n ≤ 8`, `M ≤ 16`, `d_k ≤ 8`, `M_v ≤ 8`.
#[derive(Clone, Debug)]
pub struct BaselineInstance {
    pub seq: InputSequence,
    pub params: BaselineHeadParams,
}

pub fn random_baseline_instance(seed: u64) -> BaselineInstance {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=16);
    let d_k = rng.random_range(1..=8);
    let m_v = rng.random_range(1..=8);
    let y = gaussian(&mut rng, &[n, m], 1.0);
    let scale = 1.0 / (m as f64).sqrt();
    let params = BaselineHeadParams {
        w_q: gaussian(&mut rng, &[m, d_k], scale),
        w_k: gaussian(&mut rng, &[m, d_k], scale),
        w_v: gaussian(&mut rng, &[m, m_v], scale),
    };
    BaselineInstance { seq: InputSequence::new(y).expect("matrix input"), params }
}

/// The single-brain identity-map GAM head built from a baseline head.
pub fn subsuming_head(params: &BaselineHeadParams, perturb: f64) -> GamHeadParams {
    let mut brain = compose_b(params);
    for v in brain.data_mut() {
        *v += perturb;
    }
    GamHeadParams {
        brains: vec![brain],
        w_v: params.w_v.clone(),
        mixture: MixtureSpec::FixedUniform { n_b: 1 },
        fmap: FeatureMap::identity(),
    }
}

#[derive(Clone, Debug)]
pub struct EquivReport {
    pub trials: usize,
    pub max_deviation: f64,
    /// Seed of the first trial above tolerance.
    pub failing_seed: Option<u64>,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.failing_seed.is_none()
    }
}

/// Compares GAM against the baseline head on `trials` random instances.
pub fn equiv_check(seed: u64, trials: usize, perturb: f64) -> Result<EquivReport> {
    let mut max_deviation: f64 = 0.0;
    let mut failing_seed = None;
    for t in 0..trials {
        let trial_seed = derive_seed(seed, EQUIV_STREAM, t as u64);
        let inst = random_baseline_instance(trial_seed);
        let reference = baseline_head(&inst.seq, &inst.params)?;
        let gam = gam_head(&inst.seq, &subsuming_head(&inst.params, perturb))?;
        let dev = gam.max_abs_diff(&reference);
        max_deviation = max_deviation.max(dev);
        if dev > EQUIVALENCE_TOLERANCE && failing_seed.is_none() {
            failing_seed = Some(trial_seed);
        }
    }
    Ok(EquivReport { trials, max_deviation, failing_seed })
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group.
    pub groups: BTreeMap<String, f64>,
    /// Parameter with the worst error overall.
    pub worst: Option<(String, f64)>,
    pub trials: usize,
    /// Trials skipped because the geometric combination met a sign conflict.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|(_, e)| *e < GRADIENT_TOLERANCE)
    }
}

/// Analytic gradients of the full model against central differences on
/// `trials` random parameter draws and batches.
///
/// `perturb` adds `perturb · (1 + |g|)` to every analytic entry; any value
/// above the tolerance must make the check fail.
pub fn grad_check(config: &RunConfig, seed: u64, trials: usize, batch_size: usize, perturb: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let model = config.language_model()?;
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst: Option<(String, f64)> = None;
    let mut skipped = 0;
    for t in 0..trials {
        let trial_seed = derive_seed(seed, GRAD_STREAM, t as u64);
        let mut params = model.init_params(trial_seed)?;
        // Move off the symmetric initial point (zero logits, unit coefficients).
        let mut rng = rng_from_seed(trial_seed ^ 0x5eed);
        for (_, p) in params.iter_mut() {
            let noise = gaussian(&mut rng, p.shape(), 0.1);
            p.add_assign(&noise);
        }
        let batch = gen_batch(&config.task, trial_seed, batch_size)?;
        if model.sign_conflicts(&params, &batch)? > 0 {
            skipped += 1;
            continue;
        }
        let mut analytic = model.loss_and_grad(&params, &batch)?.grads;
        if perturb != 0.0 {
            for (_, g) in analytic.iter_mut() {
                for v in g.data_mut() {
                    *v += perturb * (1.0 + v.abs());
                }
            }
        }
        let numeric = finite_diff_grad(|p| model.loss(p, &batch), &params, FINITE_DIFF_STEP)?;
        for (name, err) in worst_relative_errors(&analytic, &numeric)? {
            let slot = groups.entry(param_group(&name)).or_insert(0.0);
            *slot = slot.max(err);
            if worst.as_ref().is_none_or(|(_, w)| err > *w) {
                worst = Some((name, err));
            }
        }
    }
    Ok(GradCheckReport { groups, worst, trials, skipped })
}

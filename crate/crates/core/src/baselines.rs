//! Comparison methods sharing the FedCPF plumbing: local-only training,
//! FedAvg, FedProx, single-round change selection and random freezing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{check_len, Error, Result};
use crate::mask_upgrade::SelectionRule;
use crate::param::{
    fraction_budget, mask_union, personalization_fraction, top_fraction_indices, BinaryMask, ParamVector,
};
use crate::protocol::{AggregationRule, Protocol, RoundRecord};

/// A baseline method with its method-specific parameters. `p` and `rho` for
/// the selection variants come from the shared hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum BaselineKind {
    LocalOnly,
    Fedavg { weighted: bool },
    Fedprox { mu: f64, weighted: bool },
    SingleRoundSelect,
    RandomFreeze { seed: u64 },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::LocalOnly => "local_only",
            BaselineKind::Fedavg { .. } => "fedavg",
            BaselineKind::Fedprox { .. } => "fedprox",
            BaselineKind::SingleRoundSelect => "single_round_select",
            BaselineKind::RandomFreeze { .. } => "random_freeze",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BaselineKind::Fedprox { mu, .. } = self {
            if !(mu.is_finite() && *mu >= 0.0) {
                return Err(Error::config(
                    "baseline.mu",
                    format!("must be finite and >= 0, got {mu}"),
                ));
            }
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        let (selection, aggregation) = match *self {
            BaselineKind::LocalOnly => (None, AggregationRule::LocalOnly),
            BaselineKind::Fedavg { weighted } | BaselineKind::Fedprox { weighted, .. } => {
                (None, AggregationRule::FedAvg { weighted })
            }
            BaselineKind::SingleRoundSelect => (Some(SelectionRule::SingleRound), AggregationRule::Masked),
            BaselineKind::RandomFreeze { seed } => (Some(SelectionRule::Random { seed }), AggregationRule::Masked),
        };
        Protocol { selection, aggregation }
    }

    pub fn prox_mu(&self) -> Option<f64> {
        match *self {
            BaselineKind::Fedprox { mu, .. } => Some(mu),
            _ => None,
        }
    }
}

/// Runs `kind` on the data and seed `config` describes, ignoring its `method`.
pub fn run_baseline(kind: BaselineKind, config: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    kind.validate()?;
    Ok(crate::harness::execute_with(config, kind.protocol(), kind.prox_mu())?.records)
}

fn check_same_len(params: &[ParamVector]) -> Result<usize> {
    let first = params
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one client"))?;
    for p in params {
        check_len("client parameters", p.len(), first.len())?;
    }
    Ok(first.len())
}

/// `Σ (w_i / Σw) · θ_i`.
pub fn fedavg_aggregate(params: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let len = check_same_len(params)?;
    check_len("fedavg weights", weights.len(), params.len())?;
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::contract("fedavg weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; len];
    for (p, w) in params.iter().zip(weights) {
        let share = w / total;
        for (o, x) in out.iter_mut().zip(p.values()) {
            *o += share * x;
        }
    }
    params[0].with_values(out)
}

/// Plain mean, summed in client order and divided once, so that it matches the
/// masked aggregation bit for bit when no client personalizes anything.
pub fn unweighted_average(params: &[ParamVector]) -> Result<ParamVector> {
    let len = check_same_len(params)?;
    let mut out = vec![0.0; len];
    for p in params {
        for (o, x) in out.iter_mut().zip(p.values()) {
            *o += x;
        }
    }
    let n = params.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    params[0].with_values(out)
}

/// `base_loss + mu/2 · ‖θ − θ_g‖²`.
pub fn fedprox_local_loss(base_loss: f64, theta: &ParamVector, theta_g: &ParamVector, mu: f64) -> Result<f64> {
    check_len("fedprox", theta.len(), theta_g.len())?;
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::contract(format!("mu must be >= 0, got {mu}")));
    }
    let sq: f64 = theta
        .values()
        .iter()
        .zip(theta_g.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(base_loss + 0.5 * mu * sq)
}

/// Adds `mu · (θ − anchor)` to `grad`, skipping indices set in `freeze`.
pub fn add_prox_grad(
    grad: &mut ParamVector,
    theta: &ParamVector,
    anchor: &ParamVector,
    mu: f64,
    freeze: Option<&BinaryMask>,
) -> Result<()> {
    check_len("prox gradient", grad.len(), theta.len())?;
    check_len("prox anchor", anchor.len(), theta.len())?;
    if let Some(f) = freeze {
        check_len("prox freeze mask", f.len(), theta.len())?;
    }
    for (j, g) in grad.values_mut().iter_mut().enumerate() {
        if freeze.is_some_and(|f| f.get(j)) {
            continue;
        }
        *g += mu * (theta.values()[j] - anchor.values()[j]);
    }
    Ok(())
}

/// Ranks global parameters by this round's change alone.
pub fn single_round_select(
    v_before: &ParamVector,
    v_after: &ParamVector,
    p: f64,
    eta: &BinaryMask,
    rho: f64,
) -> Result<BinaryMask> {
    check_len("single_round_select", v_before.len(), v_after.len())?;
    check_len("single_round_select", v_before.len(), eta.len())?;
    if personalization_fraction(eta)? >= rho {
        return Ok(eta.clone());
    }
    let delta: Vec<f64> = v_after
        .values()
        .iter()
        .zip(v_before.values())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let selected = top_fraction_indices(&v_before.with_values(delta)?, p, eta)?;
    mask_union(&selected, eta)
}

/// Freezes `floor(p · eligible)` uniformly random global parameters.
pub fn random_freeze_select(eta: &BinaryMask, p: f64, rho: f64, seed: u64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("p must lie in [0, 1], got {p}")));
    }
    if personalization_fraction(eta)? >= rho {
        return Ok(eta.clone());
    }
    let eligible: Vec<usize> = (0..eta.len()).filter(|&j| !eta.get(j)).collect();
    let budget = fraction_budget(p, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = eta.clone();
    for pick in rand::seq::index::sample(&mut rng, eligible.len(), budget) {
        next.set(eligible[pick], true);
    }
    Ok(next)
}

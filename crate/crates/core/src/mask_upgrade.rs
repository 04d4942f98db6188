//! Client-side mask growth: local training, windowed average change rate and
//! top-p% selection of new personalized parameters.
//!
//! Each round a client trains locally, measures how far each of its global
//! parameters moved, and accumulates those absolute moves since the start of
//! the current window. The window restarts whenever training accuracy reaches
//! the next milestone `k · acc`. While the personalized fraction is below
//! `rho`, the `p` share of global parameters with the highest windowed
//! average change is frozen (added to the mask). Masks only ever grow.

use serde::{Deserialize, Serialize};

use crate::baselines::{random_freeze_select, single_round_select};
use crate::error::{check_len, Error, Result};
use crate::model::{self, TokenModelConfig};
use crate::param::{
    mask_apply, mask_not, mask_union, personalization_fraction, top_fraction_indices, BinaryMask, ParamVector,
};
use crate::protocol::ClientState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMode {
    /// Personalized parameters keep training locally but skip aggregation.
    #[default]
    #[serde(rename = "aggregation-freeze")]
    AggregationFreeze,
    /// Personalized parameters also receive zero gradient locally.
    #[serde(rename = "hard-freeze")]
    HardFreeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Share of the remaining global parameters frozen per selection event.
    pub p: f64,
    /// Personalized fraction at which mask growth stops.
    pub rho: f64,
    /// Accuracy milestone step.
    pub acc: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub freeze_mode: FreezeMode,
    /// Mini-batch size; 0 means the full local training set.
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            p: 0.05,
            rho: 0.5,
            acc: 0.05,
            local_epochs: 1,
            lr: 0.05,
            freeze_mode: FreezeMode::AggregationFreeze,
            batch_size: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("hyper.p", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("hyper.rho", "must lie in [0, 1]"));
        }
        if !(self.acc > 0.0 && self.acc.is_finite()) {
            return Err(Error::config("hyper.acc", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("hyper.local_epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("hyper.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Running sum of absolute global-parameter moves since round `r_th`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaWindow {
    pub delta_sum: ParamVector,
    pub r_th: usize,
    /// Next accuracy milestone index; starts at 0 so the first check always fires.
    pub k: u32,
}

impl DeltaWindow {
    pub fn new(like: &ParamVector) -> Self {
        Self {
            delta_sum: ParamVector::zeros_like(like),
            r_th: 0,
            k: 0,
        }
    }

    /// Restarts the window at `current_round` if `train_accuracy ≥ k · acc`.
    /// Checked once per call; returns whether the window moved.
    pub fn advance(&mut self, train_accuracy: f64, acc: f64, current_round: usize) -> bool {
        if train_accuracy >= f64::from(self.k) * acc {
            self.r_th = current_round;
            self.k += 1;
            self.delta_sum.values_mut().iter_mut().for_each(|d| *d = 0.0);
            true
        } else {
            false
        }
    }

    /// Adds `|after − before|` elementwise.
    pub fn accumulate(&mut self, before: &ParamVector, after: &ParamVector) -> Result<()> {
        check_len("accumulate_delta", before.len(), after.len())?;
        check_len("accumulate_delta", before.len(), self.delta_sum.len())?;
        for ((d, b), a) in self
            .delta_sum
            .values_mut()
            .iter_mut()
            .zip(before.values())
            .zip(after.values())
        {
            *d += (a - b).abs();
        }
        Ok(())
    }

    /// Windowed sum divided by `current_round − r_th`, clamped below at 1.
    pub fn average(&self, current_round: usize) -> Result<ParamVector> {
        if current_round < self.r_th {
            return Err(Error::contract(format!(
                "round {current_round} precedes window start {}",
                self.r_th
            )));
        }
        let span = (current_round - self.r_th).max(1) as f64;
        let values = self.delta_sum.values().iter().map(|d| d / span).collect();
        self.delta_sum.with_values(values)
    }

    fn forget(&mut self, indices: &BinaryMask) {
        for (d, &hit) in self.delta_sum.values_mut().iter_mut().zip(indices.as_slice()) {
            if hit {
                *d = 0.0;
            }
        }
    }
}

/// Result of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub theta: ParamVector,
    pub train_accuracy: f64,
}

/// Held-out scores of a client model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Produces a client's locally trained parameters for a round.
pub trait LocalTrainer: Sync {
    fn train(&self, client: &ClientState, hyper: &HyperParams, round: usize) -> Result<LocalOutcome>;

    /// Scores `client.theta` on the client's held-out data, if it has any.
    fn evaluate(&self, _client: &ClientState) -> Result<Option<TestMetrics>> {
        Ok(None)
    }
}

/// Mini-batch SGD on the token model, optionally with a proximal pull towards
/// the round's starting parameters.
#[derive(Clone, Debug)]
pub struct SgdTrainer {
    pub model: TokenModelConfig,
    pub prox_mu: Option<f64>,
}

impl SgdTrainer {
    pub fn new(model: TokenModelConfig) -> Self {
        Self { model, prox_mu: None }
    }

    pub fn with_prox(model: TokenModelConfig, mu: f64) -> Self {
        Self {
            model,
            prox_mu: Some(mu),
        }
    }
}

impl LocalTrainer for SgdTrainer {
    fn train(&self, client: &ClientState, hyper: &HyperParams, round: usize) -> Result<LocalOutcome> {
        let prox = self.prox_mu.map(|mu| (&client.theta, mu));
        local_update(client, hyper, &self.model, prox, round)
    }

    fn evaluate(&self, client: &ClientState) -> Result<Option<TestMetrics>> {
        let Some(data) = &client.dataset else {
            return Ok(None);
        };
        let preds = model::predict(&data.test, &client.theta, &self.model)?;
        let m = crate::metrics::classification_metrics(&preds, &data.test.labels, self.model.n_classes)?;
        Ok(Some(TestMetrics {
            accuracy: m.accuracy,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
        }))
    }
}

/// `local_epochs` passes of mini-batch SGD over the client's training split.
///
/// With `prox = Some((anchor, mu))` the loss gains `mu/2 · ‖θ − anchor‖²`.
pub fn local_update(
    client: &ClientState,
    hyper: &HyperParams,
    model_config: &TokenModelConfig,
    prox: Option<(&ParamVector, f64)>,
    round: usize,
) -> Result<LocalOutcome> {
    let data = client
        .dataset
        .as_ref()
        .ok_or_else(|| Error::contract(format!("client {} has no dataset", client.id)))?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::contract(format!(
            "client {} has an empty training split",
            client.id
        )));
    }
    let freeze = match hyper.freeze_mode {
        FreezeMode::HardFreeze => Some(&client.eta),
        FreezeMode::AggregationFreeze => None,
    };
    let n = train.sample_count();
    let batch_size = if hyper.batch_size == 0 {
        n
    } else {
        hyper.batch_size.min(n)
    };
    let wrap = |epoch: usize, e: Error| Error::Training {
        client: client.id,
        round,
        epoch,
        reason: e.to_string(),
    };

    let mut theta = client.theta.clone();
    for epoch in 0..hyper.local_epochs {
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let owned;
            let batch = if start == 0 && end == n {
                train
            } else {
                owned = train.slice(start, end);
                &owned
            };
            let (_, mut grad) =
                model::loss_and_grad(batch, &theta, model_config, freeze).map_err(|e| wrap(epoch, e))?;
            if let Some((anchor, mu)) = prox {
                crate::baselines::add_prox_grad(&mut grad, &theta, anchor, mu, freeze)?;
            }
            theta = model::sgd_step(&theta, &grad, hyper.lr)?;
            if !theta.is_finite() {
                return Err(wrap(epoch, Error::Numeric("parameters diverged".into())));
            }
            start = end;
        }
    }
    let train_accuracy = model::accuracy(train, &theta, model_config).map_err(|e| wrap(hyper.local_epochs, e))?;
    Ok(LocalOutcome { theta, train_accuracy })
}

/// How a client picks newly personalized parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Windowed average change rate.
    ChangeRateWindow,
    /// Current-round change only.
    SingleRound,
    /// Uniformly random, seeded per client and round.
    Random { seed: u64 },
}

/// Everything a client hands back after its local phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub theta_trained: ParamVector,
    /// Personalized part `θ ⊙ η` of the trained parameters.
    pub u_plus: ParamVector,
    /// Global part `θ ⊙ ¬η` of the trained parameters.
    pub v_plus: ParamVector,
    pub eta_before: BinaryMask,
    pub eta_next: BinaryMask,
    pub window: DeltaWindow,
    pub train_accuracy: f64,
}

impl ClientUpdate {
    pub fn newly_frozen(&self) -> usize {
        self.eta_next.count_ones() - self.eta_before.count_ones()
    }
}

/// Windowed change-rate mask upgrade for one client.
pub fn mask_upgrade<T: LocalTrainer + ?Sized>(
    client: &ClientState,
    trainer: &T,
    hyper: &HyperParams,
    current_round: usize,
) -> Result<ClientUpdate> {
    client_step(
        client,
        trainer,
        hyper,
        Some(SelectionRule::ChangeRateWindow),
        current_round,
    )
}

/// Local training followed by mask growth under `rule` (`None`: never grow).
pub fn client_step<T: LocalTrainer + ?Sized>(
    client: &ClientState,
    trainer: &T,
    hyper: &HyperParams,
    rule: Option<SelectionRule>,
    current_round: usize,
) -> Result<ClientUpdate> {
    let eta = &client.eta;
    let not_eta = mask_not(eta);
    let v_before = mask_apply(&client.theta, &not_eta)?;
    let trained = trainer.train(client, hyper, current_round)?;
    check_len("trained parameters", trained.theta.len(), client.theta.len())?;
    let u_plus = mask_apply(&trained.theta, eta)?;
    let v_plus = mask_apply(&trained.theta, &not_eta)?;

    let mut window = client.window.clone();
    let growing = personalization_fraction(eta)? < hyper.rho;
    let eta_next = match rule {
        Some(rule) if growing => match rule {
            SelectionRule::ChangeRateWindow => {
                window.advance(trained.train_accuracy, hyper.acc, current_round);
                window.accumulate(&v_before, &v_plus)?;
                let avg = window.average(current_round)?;
                let selected = top_fraction_indices(&avg, hyper.p, eta)?;
                window.forget(&selected);
                mask_union(&selected, eta)?
            }
            SelectionRule::SingleRound => single_round_select(&v_before, &v_plus, hyper.p, eta, hyper.rho)?,
            SelectionRule::Random { seed } => {
                random_freeze_select(eta, hyper.p, hyper.rho, mix_seed(seed, client.id, current_round))?
            }
        },
        _ => eta.clone(),
    };

    Ok(ClientUpdate {
        client: client.id,
        theta_trained: trained.theta,
        u_plus,
        v_plus,
        eta_before: eta.clone(),
        eta_next,
        window,
        train_accuracy: trained.train_accuracy,
    })
}

/// Splitmix64-style mixing of a base seed with client and round indices.
pub fn mix_seed(base: u64, client: usize, round: usize) -> u64 {
    let mut z =
        base ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (round as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

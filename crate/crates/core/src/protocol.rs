//! Server/client round protocol: partition each client's parameters by its
//! mask, run the client phase, average global parameters over the clients
//! that still treat them as global, and splice the result back into every
//! client around its personalized parameters.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fedavg_aggregate, unweighted_average};
use crate::data::ClientDataset;
use crate::error::{check_len, Error, Result};
use crate::mask_upgrade::{
    client_step, ClientUpdate, DeltaWindow, HyperParams, LocalTrainer, SelectionRule, TestMetrics,
};
use crate::model::TokenModelConfig;
use crate::param::{mask_apply, mask_not, personalization_fraction, BinaryMask, ParamVector};

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub theta: ParamVector,
    pub eta: BinaryMask,
    pub window: DeltaWindow,
    pub dataset: Option<Arc<ClientDataset>>,
    /// Local training-set size, used for sample-weighted averaging.
    pub sample_count: usize,
}

impl ClientState {
    pub fn new(id: usize, theta: ParamVector) -> Self {
        let len = theta.len();
        Self {
            id,
            window: DeltaWindow::new(&theta),
            theta,
            eta: BinaryMask::zeros(len),
            dataset: None,
            sample_count: 0,
        }
    }

    pub fn with_dataset(mut self, dataset: Arc<ClientDataset>) -> Self {
        self.sample_count = dataset.sample_count();
        self.dataset = Some(dataset);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub theta_g: ParamVector,
    pub round: usize,
    /// Number of clients that contributed to each index in the last aggregation.
    pub zeta: ParamVector,
    pub eta_g: BinaryMask,
}

impl GlobalState {
    pub fn new(theta_g: ParamVector) -> Self {
        let len = theta_g.len();
        Self {
            zeta: ParamVector::zeros_like(&theta_g),
            theta_g,
            round: 0,
            eta_g: BinaryMask::zeros(len),
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.theta_g.to_le_bytes()))
    }
}

/// Identical initial parameters on every client, all masks zero.
pub fn init_federation(
    n_clients: usize,
    model_config: &TokenModelConfig,
    seed: u64,
) -> Result<(GlobalState, Vec<ClientState>)> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    model_config.validate()?;
    let theta0 = model_config.init_params(seed);
    let clients = (0..n_clients).map(|id| ClientState::new(id, theta0.clone())).collect();
    Ok((GlobalState::new(theta0), clients))
}

/// `(θ ⊙ η, θ ⊙ ¬η)`.
pub fn partition_params(theta: &ParamVector, eta: &BinaryMask) -> Result<(ParamVector, ParamVector)> {
    Ok((mask_apply(theta, eta)?, mask_apply(theta, &mask_not(eta))?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub theta_g: ParamVector,
    pub zeta: ParamVector,
    pub eta_g: BinaryMask,
}

/// Averages each index over the clients whose mask leaves it global.
///
/// Indices no client contributes to get value 0 and `eta_g = 0`; no division
/// happens there.
pub fn aggregate_global(contributions: &[(ParamVector, BinaryMask)]) -> Result<Aggregate> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one contribution"))?;
    let len = first.len();
    let mut sum = vec![0.0; len];
    let mut zeta = vec![0.0; len];
    for (v_plus, eta) in contributions {
        check_len("aggregate_global", v_plus.len(), len)?;
        check_len("aggregate_global", eta.len(), len)?;
        for j in 0..len {
            if !eta.get(j) {
                sum[j] += v_plus.values()[j];
                zeta[j] += 1.0;
            }
        }
    }
    let eta_g = BinaryMask::from_bools(zeta.iter().map(|&z| z != 0.0).collect());
    for j in 0..len {
        sum[j] = if eta_g.get(j) { sum[j] / zeta[j] } else { 0.0 };
    }
    Ok(Aggregate {
        theta_g: first.with_values(sum)?,
        zeta: first.with_values(zeta)?,
        eta_g,
    })
}

/// `θ_g ⊙ ¬η + u⁺ ⊙ η`, realized as a per-index selection.
pub fn broadcast_reconstruct(theta_g: &ParamVector, eta: &BinaryMask, u_plus: &ParamVector) -> Result<ParamVector> {
    check_len("broadcast_reconstruct", theta_g.len(), eta.len())?;
    check_len("broadcast_reconstruct", theta_g.len(), u_plus.len())?;
    let values = (0..theta_g.len())
        .map(|j| {
            if eta.get(j) {
                u_plus.values()[j]
            } else {
                theta_g.values()[j]
            }
        })
        .collect();
    theta_g.with_values(values)
}

/// How trained client parameters are combined on the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Mask-aware counting average over clients that hold an index as global.
    Masked,
    /// Plain FedAvg over full client models.
    FedAvg { weighted: bool },
    /// No server: every client keeps its own trained model.
    LocalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub selection: Option<SelectionRule>,
    pub aggregation: AggregationRule,
}

impl Protocol {
    pub const FEDCPF: Protocol = Protocol {
        selection: Some(SelectionRule::ChangeRateWindow),
        aggregation: AggregationRule::Masked,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client: usize,
    pub train_accuracy: f64,
    pub test: Option<TestMetrics>,
    pub personalization_fraction: f64,
    /// How far the personalized fraction exceeds `rho`, if at all.
    pub rho_overshoot: f64,
    pub newly_frozen: usize,
    pub window_k: u32,
    pub window_r_th: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub seed: u64,
    pub clients: Vec<ClientRoundStats>,
    /// Excluded from the serialized history, which must be reproducible.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl RoundRecord {
    pub fn mean_test<F: Fn(&TestMetrics) -> f64>(&self, f: F) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.clients.iter().map(|c| c.test.as_ref().map(&f)).collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_train_accuracy(&self) -> f64 {
        self.clients.iter().map(|c| c.train_accuracy).sum::<f64>() / self.clients.len().max(1) as f64
    }
}

/// Full output of a round, including the per-client intermediate values.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    pub record: RoundRecord,
    pub updates: Vec<ClientUpdate>,
}

/// One communication round: client phase (parallel), aggregation, reconstruction.
pub fn run_round<T: LocalTrainer + ?Sized>(
    global: &GlobalState,
    clients: &[ClientState],
    hyper: &HyperParams,
    trainer: &T,
    protocol: &Protocol,
    seed: u64,
) -> Result<RoundOutput> {
    let start = Instant::now();
    let round = global.round;
    let updates: Vec<ClientUpdate> = clients
        .par_iter()
        .map(|c| client_step(c, trainer, hyper, protocol.selection, round))
        .collect::<Result<_>>()?;

    let mut next_global = global.clone();
    next_global.round = round + 1;
    let new_thetas: Vec<ParamVector> = match protocol.aggregation {
        AggregationRule::Masked => {
            let contributions: Vec<(ParamVector, BinaryMask)> = updates
                .iter()
                .map(|u| (u.v_plus.clone(), u.eta_before.clone()))
                .collect();
            let agg = aggregate_global(&contributions)?;
            next_global.theta_g = agg.theta_g;
            next_global.zeta = agg.zeta;
            next_global.eta_g = agg.eta_g;
            updates
                .iter()
                .map(|u| {
                    debug_assert!(
                        (0..u.eta_before.len()).all(|j| next_global.eta_g.get(j) || u.eta_before.get(j)),
                        "client {} reads an index no client aggregated",
                        u.client
                    );
                    broadcast_reconstruct(&next_global.theta_g, &u.eta_before, &u.u_plus)
                })
                .collect::<Result<_>>()?
        }
        AggregationRule::FedAvg { weighted } => {
            let params: Vec<ParamVector> = updates.iter().map(|u| u.theta_trained.clone()).collect();
            next_global.theta_g = if weighted {
                let weights: Vec<f64> = clients.iter().map(|c| c.sample_count as f64).collect();
                fedavg_aggregate(&params, &weights)?
            } else {
                unweighted_average(&params)?
            };
            let n = clients.len() as f64;
            next_global.zeta = next_global.theta_g.with_values(vec![n; next_global.theta_g.len()])?;
            next_global.eta_g = BinaryMask::ones(next_global.theta_g.len());
            vec![next_global.theta_g.clone(); clients.len()]
        }
        AggregationRule::LocalOnly => updates.iter().map(|u| u.theta_trained.clone()).collect(),
    };

    let next_clients: Vec<ClientState> = clients
        .iter()
        .zip(&updates)
        .zip(new_thetas)
        .map(|((c, u), theta)| ClientState {
            id: c.id,
            theta,
            eta: u.eta_next.clone(),
            window: u.window.clone(),
            dataset: c.dataset.clone(),
            sample_count: c.sample_count,
        })
        .collect();

    let tests: Vec<Option<TestMetrics>> = next_clients
        .par_iter()
        .map(|c| trainer.evaluate(c))
        .collect::<Result<_>>()?;
    let stats = updates
        .iter()
        .zip(tests)
        .map(|(u, test)| {
            let frac = personalization_fraction(&u.eta_next)?;
            Ok(ClientRoundStats {
                client: u.client,
                train_accuracy: u.train_accuracy,
                test,
                personalization_fraction: frac,
                rho_overshoot: (frac - hyper.rho).max(0.0),
                newly_frozen: u.newly_frozen(),
                window_k: u.window.k,
                window_r_th: u.window.r_th,
            })
        })
        .collect::<Result<_>>()?;

    Ok(RoundOutput {
        global: next_global,
        clients: next_clients,
        record: RoundRecord {
            round,
            seed,
            clients: stats,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        updates,
    })
}

/// A running federation: global state, clients and the rules they follow.
pub struct Federation<T: LocalTrainer> {
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    pub trainer: T,
    pub hyper: HyperParams,
    pub protocol: Protocol,
    pub seed: u64,
}

impl<T: LocalTrainer> Federation<T> {
    pub fn step(&mut self) -> Result<RoundOutput> {
        let out = run_round(
            &self.global,
            &self.clients,
            &self.hyper,
            &self.trainer,
            &self.protocol,
            self.seed,
        )?;
        self.global = out.global.clone();
        self.clients = out.clients.clone();
        Ok(out)
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundRecord>> {
        (0..rounds).map(|_| self.step().map(|o| o.record)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::flat(v.to_vec()).unwrap()
    }

    fn m(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(bits).unwrap()
    }

    #[test]
    fn partition_examples() {
        let theta = pv(&[3.0, -2.0, 5.0]);
        let (u, v) = partition_params(&theta, &m(&[1, 0, 1])).unwrap();
        assert_eq!(u.values(), &[3.0, 0.0, 5.0]);
        assert_eq!(v.values(), &[0.0, -2.0, 0.0]);
        let (u, v) = partition_params(&theta, &m(&[0, 0, 0])).unwrap();
        assert_eq!((u.values(), v.values()), (&[0.0, 0.0, 0.0][..], theta.values()));
        let (u, v) = partition_params(&theta, &m(&[1, 1, 1])).unwrap();
        assert_eq!((u.values(), v.values()), (theta.values(), &[0.0, 0.0, 0.0][..]));
        assert!(partition_params(&theta, &m(&[1])).is_err());
    }

    #[test]
    fn aggregate_hand_trace() {
        let agg = aggregate_global(&[
            (pv(&[0.0, 4.0, 6.0]), m(&[1, 0, 0])),
            (pv(&[2.0, 8.0, 0.0]), m(&[0, 0, 1])),
        ])
        .unwrap();
        assert_eq!(agg.zeta.values(), &[1.0, 2.0, 1.0]);
        assert_eq!(agg.theta_g.values(), &[2.0, 6.0, 6.0]);
        assert_eq!(agg.eta_g, m(&[1, 1, 1]));
    }

    #[test]
    fn aggregate_without_contributors() {
        let agg = aggregate_global(&[
            (pv(&[0.0, 0.0, 0.0]), m(&[1, 1, 1])),
            (pv(&[0.0, 0.0, 0.0]), m(&[1, 1, 1])),
        ])
        .unwrap();
        assert_eq!(agg.zeta.values(), &[0.0, 0.0, 0.0]);
        assert_eq!(agg.theta_g.values(), &[0.0, 0.0, 0.0]);
        assert_eq!(agg.eta_g, m(&[0, 0, 0]));
        assert!(aggregate_global(&[]).is_err());
    }

    #[test]
    fn aggregate_homogeneous_is_mean() {
        let agg = aggregate_global(&[
            (pv(&[1.0, 3.0, -2.0]), m(&[0, 0, 0])),
            (pv(&[3.0, 5.0, 4.0]), m(&[0, 0, 0])),
        ])
        .unwrap();
        assert_eq!(agg.theta_g.values(), &[2.0, 4.0, 1.0]);
    }

    #[test]
    fn reconstruct_examples() {
        let g = pv(&[2.0, 6.0, 6.0]);
        let u = pv(&[9.0, 0.0, 0.0]);
        assert_eq!(
            broadcast_reconstruct(&g, &m(&[1, 0, 0]), &u).unwrap().values(),
            &[9.0, 6.0, 6.0]
        );
        assert_eq!(broadcast_reconstruct(&g, &m(&[0, 0, 0]), &u).unwrap(), g);
        assert_eq!(broadcast_reconstruct(&g, &m(&[1, 1, 1]), &u).unwrap(), u);
        assert!(broadcast_reconstruct(&g, &m(&[1]), &u).is_err());
    }

    #[test]
    fn init_is_identical_across_clients() {
        let cfg = TokenModelConfig::default();
        let (g, clients) = init_federation(5, &cfg, 42).unwrap();
        assert_eq!(clients.len(), 5);
        for c in &clients {
            assert_eq!(c.theta.to_le_bytes(), g.theta_g.to_le_bytes());
            assert_eq!(c.eta.count_ones(), 0);
        }
        let (g2, _) = init_federation(1, &cfg, 42).unwrap();
        assert_eq!(g2.theta_g, g.theta_g);
        assert!(init_federation(0, &cfg, 42).is_err());
    }
}

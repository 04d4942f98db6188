use std::sync::Arc;

use fedcpf::baselines::{random_freeze_select, run_baseline, single_round_select, BaselineKind};
use fedcpf::config::{ExperimentConfig, Method};
use fedcpf::data::ClientDataset;
use fedcpf::harness::{self, history_jsonl};
use fedcpf::mask_upgrade::{
    client_step, local_update, mask_upgrade, FreezeMode, HyperParams, LocalOutcome, LocalTrainer, SelectionRule,
};
use fedcpf::model::{Batch, TokenModelConfig};
use fedcpf::param::{personalization_fraction, BinaryMask, ParamVector};
use fedcpf::protocol::{
    aggregate_global, broadcast_reconstruct, run_round, AggregationRule, ClientState, GlobalState, Protocol,
};
use fedcpf::Result;
use proptest::prelude::*;

struct Scripted {
    /// Indexed by client, then round.
    deltas: Vec<Vec<Vec<f64>>>,
    train_accuracy: f64,
}

impl LocalTrainer for Scripted {
    fn train(&self, client: &ClientState, _hyper: &HyperParams, round: usize) -> Result<LocalOutcome> {
        let d = &self.deltas[client.id][round];
        let values = client.theta.values().iter().zip(d).map(|(t, d)| t + d).collect();
        Ok(LocalOutcome {
            theta: client.theta.with_values(values)?,
            train_accuracy: self.train_accuracy,
        })
    }
}

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::flat(v.to_vec()).unwrap()
}

fn small_model() -> TokenModelConfig {
    TokenModelConfig {
        phi: 2,
        d_model: 4,
        d_attn: 4,
        n_classes: 2,
        lambda_suppress: 1e8,
        input_dim: 2,
    }
}

/// Class 0 sits at +m on every feature, class 1 at -m.
fn separable_client(model: &TokenModelConfig, margin: f64) -> ClientState {
    let per = model.phi * model.input_dim;
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let features: Vec<f64> = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(if y == 0 { margin } else { -margin }, per))
        .collect();
    let train = Batch::new(model.phi, model.input_dim, features, labels).unwrap();
    let data = ClientDataset {
        client_id: 0,
        test: train.clone(),
        train,
        class_proportions: vec![0.5, 0.5],
        class_counts: vec![8, 8],
        partition_hash: String::new(),
    };
    ClientState::new(0, model.init_params(11)).with_dataset(Arc::new(data))
}

#[test]
fn local_update_with_zero_step_is_identity() {
    let model = small_model();
    let client = separable_client(&model, 1.0);
    let hyper = HyperParams {
        lr: 0.0,
        ..HyperParams::default()
    };
    let out = local_update(&client, &hyper, &model, None, 0).unwrap();
    assert_eq!(out.theta.to_le_bytes(), client.theta.to_le_bytes());
}

#[test]
fn hard_freeze_with_full_mask_changes_nothing() {
    let model = small_model();
    let mut client = separable_client(&model, 1.0);
    client.eta = BinaryMask::ones(client.theta.len());
    let hyper = HyperParams {
        freeze_mode: FreezeMode::HardFreeze,
        local_epochs: 3,
        lr: 0.5,
        ..HyperParams::default()
    };
    let out = local_update(&client, &hyper, &model, None, 0).unwrap();
    assert_eq!(out.theta, client.theta);
    assert!((0.0..=1.0).contains(&out.train_accuracy));
}

#[test]
fn separable_set_is_learned() {
    let model = small_model();
    let client = separable_client(&model, 2.0);
    let hyper = HyperParams {
        local_epochs: 5,
        lr: 0.1,
        batch_size: 1,
        ..HyperParams::default()
    };
    let out = local_update(&client, &hyper, &model, None, 0).unwrap();
    assert_eq!(out.train_accuracy, 1.0);
}

#[test]
fn window_reset_forgets_pre_window_spike() {
    // Index 0 spiked before the window restarts; after the restart only index
    // 1 moves and must be the one frozen.
    let hyper = HyperParams {
        p: 0.25,
        rho: 1.0,
        acc: 0.5,
        ..HyperParams::default()
    };
    let mut client = ClientState::new(0, pv(&[0.0; 4]));
    client.window.delta_sum = pv(&[9.0, 0.1, 0.0, 0.0]);
    client.window.k = 1;
    let trainer = Scripted {
        deltas: vec![vec![vec![], vec![0.0, 0.1, 0.0, 0.0]]],
        train_accuracy: 0.6,
    };
    let u = mask_upgrade(&client, &trainer, &hyper, 1).unwrap();
    assert_eq!((u.window.k, u.window.r_th), (2, 1));
    assert_eq!(u.eta_next.to_bits(), vec![0, 1, 0, 0]);

    let stale = Scripted {
        train_accuracy: 0.4,
        ..trainer
    };
    let u = mask_upgrade(&client, &stale, &hyper, 1).unwrap();
    assert_eq!(u.eta_next.to_bits(), vec![1, 0, 0, 0]);
}

#[test]
fn split_recombines_exactly_after_training() {
    let model = small_model();
    let mut client = separable_client(&model, 1.0);
    for j in (0..client.theta.len()).step_by(3) {
        client.eta.set(j, true);
    }
    let trainer = fedcpf::mask_upgrade::SgdTrainer::new(model);
    let u = client_step(
        &client,
        &trainer,
        &HyperParams::default(),
        Some(SelectionRule::ChangeRateWindow),
        0,
    )
    .unwrap();
    for j in 0..client.theta.len() {
        assert_eq!(
            (u.u_plus.values()[j] + u.v_plus.values()[j]).to_bits(),
            u.theta_trained.values()[j].to_bits()
        );
    }
}

#[test]
fn round_zero_without_selection_is_fedavg() {
    let deltas = vec![
        vec![vec![0.5, -1.0, 0.25]],
        vec![vec![1.5, 2.0, -0.75]],
        vec![vec![0.0, 0.125, 3.0]],
    ];
    let trainer = Scripted {
        deltas,
        train_accuracy: 0.3,
    };
    let hyper = HyperParams {
        p: 0.0,
        ..HyperParams::default()
    };
    let theta = pv(&[1.0, 2.0, 3.0]);
    let clients: Vec<ClientState> = (0..3).map(|i| ClientState::new(i, theta.clone())).collect();
    let global = GlobalState::new(theta);
    let a = run_round(&global, &clients, &hyper, &trainer, &Protocol::FEDCPF, 0).unwrap();
    let fedavg = Protocol {
        selection: None,
        aggregation: AggregationRule::FedAvg { weighted: false },
    };
    let b = run_round(&global, &clients, &hyper, &trainer, &fedavg, 0).unwrap();
    assert_eq!(a.global.theta_g.to_le_bytes(), b.global.theta_g.to_le_bytes());
    for (x, y) in a.clients.iter().zip(&b.clients) {
        assert_eq!(x.theta, y.theta);
    }
}

#[test]
fn fedavg_of_identical_clients_is_each_client() {
    let deltas = vec![vec![vec![0.5, -1.0]; 3]; 2];
    let trainer = Scripted {
        deltas,
        train_accuracy: 0.3,
    };
    let theta = pv(&[1.0, 2.0]);
    let mut clients: Vec<ClientState> = (0..2).map(|i| ClientState::new(i, theta.clone())).collect();
    for c in &mut clients {
        c.sample_count = 10;
    }
    let mut global = GlobalState::new(theta);
    let proto = BaselineKind::Fedavg { weighted: true }.protocol();
    for _ in 0..3 {
        let out = run_round(&global, &clients, &HyperParams::default(), &trainer, &proto, 0).unwrap();
        for u in &out.updates {
            assert_eq!(u.theta_trained, out.global.theta_g);
        }
        global = out.global;
        clients = out.clients;
    }
}

#[test]
fn fedprox_pins_towards_anchor_as_mu_grows() {
    let model = small_model();
    let client = separable_client(&model, 1.0);
    let hyper = HyperParams {
        local_epochs: 10,
        lr: 0.05,
        ..HyperParams::default()
    };
    let dists: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
        .iter()
        .map(|&mu| {
            let out = local_update(&client, &hyper, &model, Some((&client.theta, mu)), 0).unwrap();
            out.theta
                .values()
                .iter()
                .zip(client.theta.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
}

fn tiny(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(method);
    cfg.rounds = 6;
    cfg.model.d_model = 4;
    cfg.model.d_attn = 4;
    cfg.data.samples_per_client = 40;
    cfg
}

#[test]
fn local_only_single_client_matches_fedcpf_without_growth() {
    let mut cfg = tiny(Method::LocalOnly);
    cfg.n_clients = 1;
    cfg.model.n_classes = 3;
    cfg.hyper.rho = 0.0;
    let a = run_baseline(BaselineKind::LocalOnly, &cfg).unwrap();
    let b = harness::run_federation(&cfg).unwrap();
    assert_eq!(history_jsonl(&a).unwrap(), history_jsonl(&b).unwrap());
}

#[test]
fn run_federation_record_counts() {
    let mut cfg = tiny(Method::Fedcpf);
    cfg.rounds = 0;
    assert!(harness::run_federation(&cfg).unwrap().is_empty());
    cfg.rounds = 100;
    let recs = harness::run_federation(&cfg).unwrap();
    assert_eq!(recs.len(), 100);
    assert!(recs.iter().all(|r| r.clients.len() == 5));
    for c in 0..5 {
        let fracs: Vec<f64> = recs.iter().map(|r| r.clients[c].personalization_fraction).collect();
        assert!(fracs.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn every_method_sees_the_same_partition() {
    let digests: Vec<String> = Method::ALL
        .iter()
        .map(|&m| {
            let mut cfg = tiny(m);
            cfg.rounds = 1;
            harness::execute(&cfg).unwrap().partition_digest
        })
        .collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn contribution_accounting_in_a_real_run() {
    let cfg = tiny(Method::Fedcpf);
    let mut fed = harness::build_federation(&cfg, Protocol::FEDCPF, None).unwrap();
    for _ in 0..cfg.rounds {
        let out = fed.step().unwrap();
        let total: f64 = out.global.zeta.values().iter().sum();
        let expected: usize = out
            .updates
            .iter()
            .map(|u| u.eta_before.len() - u.eta_before.count_ones())
            .sum();
        assert_eq!(total, expected as f64);
    }
}

fn masks(n_clients: usize, len: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<bool>)>> {
    prop::collection::vec(
        (
            prop::collection::vec(-10.0f64..10.0, len),
            prop::collection::vec(any::<bool>(), len),
        ),
        1..=n_clients,
    )
}

proptest! {
    #[test]
    fn aggregation_accounting(contribs in (1usize..12).prop_flat_map(|len| masks(5, len))) {
        let input: Vec<(ParamVector, BinaryMask)> = contribs
            .iter()
            .map(|(v, m)| {
                let eta = BinaryMask::from_bools(m.clone());
                let v = v.iter().zip(m).map(|(x, &b)| if b { 0.0 } else { *x }).collect();
                (pv_owned(v), eta)
            })
            .collect();
        let agg = aggregate_global(&input).unwrap();
        let total: f64 = agg.zeta.values().iter().sum();
        let expected: usize = input.iter().map(|(_, m)| m.len() - m.count_ones()).sum();
        prop_assert_eq!(total, expected as f64);
        for j in 0..agg.zeta.len() {
            let z = agg.zeta.values()[j];
            prop_assert!(z <= input.len() as f64);
            prop_assert_eq!(agg.eta_g.get(j), z != 0.0);
            if z == 0.0 {
                prop_assert_eq!(agg.theta_g.values()[j], 0.0);
            }
            prop_assert!(agg.theta_g.values()[j].is_finite());
        }
    }

    #[test]
    fn reconstruction_keeps_personal_entries(
        (g, u, m) in (1usize..16).prop_flat_map(|len| (
            prop::collection::vec(-5.0f64..5.0, len),
            prop::collection::vec(-5.0f64..5.0, len),
            prop::collection::vec(any::<bool>(), len),
        ))
    ) {
        let eta = BinaryMask::from_bools(m.clone());
        let out = broadcast_reconstruct(&pv(&g), &eta, &pv(&u)).unwrap();
        for j in 0..g.len() {
            let want = if m[j] { u[j] } else { g[j] };
            prop_assert_eq!(out.values()[j].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn selection_rules_keep_mask_invariants(
        rho in 0.0f64..1.0,
        p in 0.0f64..0.6,
        seed in any::<u64>(),
        steps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 20), 1..12),
    ) {
        let rounds = steps.len();
        let trainer = Scripted { deltas: vec![steps], train_accuracy: 0.4 };
        let hyper = HyperParams { p, rho, ..HyperParams::default() };
        for rule in [SelectionRule::ChangeRateWindow, SelectionRule::SingleRound, SelectionRule::Random { seed }] {
            let mut c = ClientState::new(0, pv(&[0.0; 20]));
            let mut stopped: Option<BinaryMask> = None;
            for r in 0..rounds {
                let u = client_step(&c, &trainer, &hyper, Some(rule), r).unwrap();
                let before = personalization_fraction(&u.eta_before).unwrap();
                let after = personalization_fraction(&u.eta_next).unwrap();
                prop_assert!(u.eta_next.contains(&u.eta_before));
                prop_assert!(after <= (before + p).min(1.0) + 1e-12);
                if let Some(s) = &stopped {
                    prop_assert_eq!(s, &u.eta_next);
                }
                if before >= rho {
                    prop_assert_eq!(&u.eta_next, &u.eta_before);
                    stopped.get_or_insert(u.eta_next.clone());
                }
                for j in 0..20 {
                    if u.eta_next.get(j) {
                        prop_assert_eq!(u.window.delta_sum.values()[j], 0.0);
                    }
                }
                c.theta = u.theta_trained;
                c.eta = u.eta_next;
                c.window = u.window;
            }
        }
    }

    #[test]
    fn unit_window_matches_single_round(
        p in 0.05f64..0.5,
        steps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..8),
    ) {
        let rounds = steps.len();
        let trainer = Scripted { deltas: vec![steps], train_accuracy: 1.0 };
        let hyper = HyperParams { p, rho: 1.0, acc: 1e-9, ..HyperParams::default() };
        let mut c = ClientState::new(0, pv(&[0.0; 12]));
        for r in 0..rounds {
            let v_before = fedcpf::param::mask_apply(&c.theta, &fedcpf::param::mask_not(&c.eta)).unwrap();
            let u = mask_upgrade(&c, &trainer, &hyper, r).unwrap();
            let single = single_round_select(&v_before, &u.v_plus, p, &c.eta, 1.0).unwrap();
            prop_assert_eq!(&u.eta_next, &single);
            c.theta = u.theta_trained;
            c.eta = u.eta_next;
            c.window = u.window;
        }
    }

    #[test]
    fn random_freeze_budget(len in 1usize..40, p in 0.0f64..1.0, seed in any::<u64>()) {
        let eta = BinaryMask::zeros(len);
        let next = random_freeze_select(&eta, p, 1.0, seed).unwrap();
        prop_assert_eq!(next.count_ones(), fedcpf::param::fraction_budget(p, len));
    }
}

fn pv_owned(v: Vec<f64>) -> ParamVector {
    ParamVector::flat(v).unwrap()
}

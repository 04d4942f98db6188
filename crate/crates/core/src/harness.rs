//! Experiment orchestration and report files.
//!
//! A run directory holds:
//!
//! * `history.jsonl`: one [`RoundRecord`] per line.
//! * `summary.csv`: one row per round with client-averaged metrics, header
//!   [`SUMMARY_HEADER`].
//! * `resolved_config.toml`: the config with all defaults filled in.
//! * `final.json`: partition digest, final global-model digest and final
//!   client-averaged test metrics.
//! * `timing.csv`: wall time per round (the only non-reproducible file).
//! * `partition.jsonl`: every generated sample, when `data.export` is set.
//!
//! Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::data::{export_partition, generate_partition, partition_digest, ClientDataset};
use crate::error::{Error, Result};
use crate::mask_upgrade::{mix_seed, LocalTrainer, SgdTrainer, TestMetrics};
use crate::metrics::{mean, variance, welch_t_test, TTest};
use crate::model::{self, GradCheckReport, TokenModelConfig};
use crate::protocol::{init_federation, ClientState, Federation, GlobalState, Protocol, RoundRecord};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDCPF_OUT";

pub const SUMMARY_HEADER: &str =
    "round,train_accuracy,test_accuracy,macro_precision,macro_recall,macro_f1,personalization_fraction,newly_frozen";

/// Client-averaged metrics after a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub train_accuracy: f64,
    pub test: TestMetrics,
    pub personalization_fraction: f64,
    pub newly_frozen: usize,
}

impl SummaryRow {
    pub fn from_record(rec: &RoundRecord) -> Self {
        let n = rec.clients.len().max(1) as f64;
        Self {
            round: rec.round,
            train_accuracy: rec.mean_train_accuracy(),
            test: TestMetrics {
                accuracy: rec.mean_test(|t| t.accuracy).unwrap_or(f64::NAN),
                macro_precision: rec.mean_test(|t| t.macro_precision).unwrap_or(f64::NAN),
                macro_recall: rec.mean_test(|t| t.macro_recall).unwrap_or(f64::NAN),
                macro_f1: rec.mean_test(|t| t.macro_f1).unwrap_or(f64::NAN),
            },
            personalization_fraction: rec.clients.iter().map(|c| c.personalization_fraction).sum::<f64>() / n,
            newly_frozen: rec.clients.iter().map(|c| c.newly_frozen).sum(),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.train_accuracy,
            self.test.accuracy,
            self.test.macro_precision,
            self.test.macro_recall,
            self.test.macro_f1,
            self.personalization_fraction,
            self.newly_frozen
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub partition_digest: String,
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    /// Client-averaged held-out metrics of the final client models.
    pub final_metrics: TestMetrics,
    datasets: Vec<Arc<ClientDataset>>,
}

#[derive(Serialize)]
struct FinalReport<'a> {
    method: &'a str,
    seed: u64,
    rounds: usize,
    partition_digest: &'a str,
    global_digest: String,
    final_metrics: &'a TestMetrics,
}

/// Model-initialization seed, kept apart from the data-generation stream.
pub fn model_seed(seed: u64) -> u64 {
    mix_seed(seed, usize::MAX, usize::MAX)
}

/// Client datasets plus a freshly initialized federation for `config`.
pub fn build_federation(
    config: &ExperimentConfig,
    protocol: Protocol,
    prox_mu: Option<f64>,
) -> Result<Federation<SgdTrainer>> {
    config.validate()?;
    let datasets = generate_partition(config.n_clients, &config.skew_spec(), config.seed)?;
    let (global, clients) = init_federation(config.n_clients, &config.model, model_seed(config.seed))?;
    let clients = clients
        .into_iter()
        .zip(datasets)
        .map(|(c, d)| c.with_dataset(Arc::new(d)))
        .collect();
    let trainer = match prox_mu {
        Some(mu) => SgdTrainer::with_prox(config.model.clone(), mu),
        None => SgdTrainer::new(config.model.clone()),
    };
    Ok(Federation {
        global,
        clients,
        trainer,
        hyper: config.hyper.clone(),
        protocol,
        seed: config.seed,
    })
}

fn mean_metrics(all: &[TestMetrics]) -> TestMetrics {
    let avg = |f: fn(&TestMetrics) -> f64| mean(&all.iter().map(f).collect::<Vec<_>>());
    TestMetrics {
        accuracy: avg(|t| t.accuracy),
        macro_precision: avg(|t| t.macro_precision),
        macro_recall: avg(|t| t.macro_recall),
        macro_f1: avg(|t| t.macro_f1),
    }
}

/// Runs `config`'s data and seed under an explicit protocol and trainer.
pub fn execute_with(config: &ExperimentConfig, protocol: Protocol, prox_mu: Option<f64>) -> Result<RunResult> {
    let mut fed = build_federation(config, protocol, prox_mu)?;
    let datasets: Vec<Arc<ClientDataset>> = fed.clients.iter().filter_map(|c| c.dataset.clone()).collect();
    let digest = partition_digest(&datasets.iter().map(|d| (**d).clone()).collect::<Vec<_>>())?;
    let records = fed.run(config.rounds)?;
    let per_client: Vec<TestMetrics> = fed
        .clients
        .iter()
        .map(|c| fed.trainer.evaluate(c).map(|m| m.expect("clients carry datasets")))
        .collect::<Result<_>>()?;
    Ok(RunResult {
        config: config.clone(),
        records,
        partition_digest: digest,
        global: fed.global,
        clients: fed.clients,
        final_metrics: mean_metrics(&per_client),
        datasets,
    })
}

/// FedCPF on `config`, whatever its `method` says.
pub fn run_federation(config: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    Ok(execute_with(config, Protocol::FEDCPF, None)?.records)
}

/// Runs the method named in `config`.
pub fn execute(config: &ExperimentConfig) -> Result<RunResult> {
    match config.baseline_kind() {
        None => execute_with(config, Protocol::FEDCPF, None),
        Some(kind) => execute_with(config, kind.protocol(), kind.prox_mu()),
    }
}

pub fn summary_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&SummaryRow::from_record(r).csv_line());
        out.push('\n');
    }
    out
}

pub fn history_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes every run artifact into `dir`, creating it if needed.
pub fn write_run(result: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.jsonl"), history_jsonl(&result.records)?)?;
    fs::write(dir.join("summary.csv"), summary_csv(&result.records))?;
    fs::write(dir.join("resolved_config.toml"), result.config.to_toml_string()?)?;
    let report = FinalReport {
        method: result.config.method.name(),
        seed: result.config.seed,
        rounds: result.config.rounds,
        partition_digest: &result.partition_digest,
        global_digest: result.global.digest(),
        final_metrics: &result.final_metrics,
    };
    fs::write(dir.join("final.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut timing = String::from("round,wall_time_ms\n");
    for r in &result.records {
        let _ = writeln!(timing, "{},{}", r.round, r.wall_time_ms);
    }
    fs::write(dir.join("timing.csv"), timing)?;
    if result.config.data.export {
        let data: Vec<ClientDataset> = result.datasets.iter().map(|d| (**d).clone()).collect();
        let mut w = BufWriter::new(fs::File::create(dir.join("partition.jsonl"))?);
        export_partition(&data, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// `--out`, then `output_dir` from the config, then `$FEDCPF_OUT/<name>`,
/// then `runs/<name>`.
pub fn resolve_output_dir(cli_out: Option<&Path>, config_dir: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = cli_out.or(config_dir) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

/// Runs `f` on a dedicated pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::config("workers", e.to_string()))?;
    Ok(pool.install(f))
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        variance(xs).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            sd: sample_sd(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: Method,
    /// Final client-averaged test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub accuracy: MeanSd,
    pub macro_precision: MeanSd,
    pub macro_recall: MeanSd,
    pub macro_f1: MeanSd,
    /// Welch test of accuracy against the first method; `None` with one seed.
    pub vs_first: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    /// Partition digest per seed, shared by every method.
    pub digests: Vec<String>,
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_HEADER: &str = "method,seeds,accuracy_mean,accuracy_sd,precision_mean,precision_sd,recall_mean,recall_sd,f1_mean,f1_sd,t_vs_first,p_vs_first";

impl CompareReport {
    /// One row per `(method, seed)` with the final accuracy.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,seed,accuracy\n");
        for r in &self.rows {
            for (seed, acc) in self.seeds.iter().zip(&r.accuracies) {
                let _ = writeln!(out, "{},{},{}", r.method, seed, acc);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let (t, p) = match &r.vs_first {
                Some(tt) => (tt.t.to_string(), tt.p.to_string()),
                None => ("n/a".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                self.seeds.len(),
                r.accuracy.mean,
                r.accuracy.sd,
                r.macro_precision.mean,
                r.macro_precision.sd,
                r.macro_recall.mean,
                r.macro_recall.sd,
                r.macro_f1.mean,
                r.macro_f1.sd,
                t,
                p
            );
        }
        out
    }
}

/// Runs every `(method, seed)` pair from `template` and tabulates final
/// client-averaged metrics. Fails with [`Error::Fairness`] if two methods saw
/// different data for the same seed.
pub fn compare(template: &ExperimentConfig, methods: &[Method], seeds: &[u64]) -> Result<CompareReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::config("compare", "needs at least one method and one seed"));
    }
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let mut cfg = template.clone();
            cfg.method = method;
            cfg.seed = seed;
            execute(&cfg)
        })
        .collect::<Result<_>>()?;

    let digests: Vec<String> = results[..seeds.len()]
        .iter()
        .map(|r| r.partition_digest.clone())
        .collect();
    for (res, &(method, seed)) in results.iter().zip(&jobs) {
        let idx = seeds.iter().position(|&s| s == seed).expect("seed from list");
        if res.partition_digest != digests[idx] {
            return Err(Error::Fairness(format!(
                "method {method} saw partition {} for seed {seed}, expected {}",
                res.partition_digest, digests[idx]
            )));
        }
    }

    let mut rows: Vec<CompareRow> = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let chunk = &results[mi * seeds.len()..(mi + 1) * seeds.len()];
        let col = |f: fn(&TestMetrics) -> f64| chunk.iter().map(|r| f(&r.final_metrics)).collect::<Vec<f64>>();
        let accuracies = col(|t| t.accuracy);
        let vs_first = if seeds.len() < 2 {
            None
        } else {
            Some(welch_t_test(
                &accuracies,
                &rows.first().map_or(accuracies.clone(), |r| r.accuracies.clone()),
            )?)
        };
        rows.push(CompareRow {
            method,
            accuracy: MeanSd::of(&accuracies),
            macro_precision: MeanSd::of(&col(|t| t.macro_precision)),
            macro_recall: MeanSd::of(&col(|t| t.macro_recall)),
            macro_f1: MeanSd::of(&col(|t| t.macro_f1)),
            accuracies,
            vs_first,
        });
    }
    Ok(CompareReport {
        seeds: seeds.to_vec(),
        digests,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rho,
    Acc,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(SweepParam::Rho),
            "acc" => Ok(SweepParam::Acc),
            other => Err(Error::config(
                "param",
                format!("expected `rho` or `acc`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// Final summary row of the run; `None` for a zero-round run.
    pub last: Option<SummaryRow>,
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::Rho => "rho",
        SweepParam::Acc => "acc",
    };
    let mut out = format!("{name},{SUMMARY_HEADER}\n");
    for r in rows {
        match &r.last {
            Some(s) => {
                let _ = writeln!(out, "{},{}", r.value, s.csv_line());
            }
            None => {
                let _ = writeln!(out, "{},,,,,,,,", r.value);
            }
        }
    }
    out
}

/// One run per value of `param`, everything else fixed by `template`.
pub fn sweep(template: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "needs at least one value"));
    }
    values
        .par_iter()
        .map(|&value| {
            let mut cfg = template.clone();
            match param {
                SweepParam::Rho => cfg.hyper.rho = value,
                SweepParam::Acc => cfg.hyper.acc = value,
            }
            let res = execute(&cfg)?;
            Ok(SweepRow {
                value,
                last: res.records.last().map(SummaryRow::from_record),
            })
        })
        .collect()
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_CONFIGS: usize = 10;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSuite {
    pub reports: Vec<GradCheckReport>,
}

impl GradcheckSuite {
    pub fn worst(&self) -> &GradCheckReport {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("non-empty suite")
    }

    pub fn passed(&self) -> bool {
        self.worst().max_rel_error <= GRADCHECK_TOLERANCE
    }
}

pub fn gradcheck_model() -> TokenModelConfig {
    TokenModelConfig {
        phi: 3,
        d_model: 4,
        d_attn: 4,
        n_classes: 3,
        lambda_suppress: 1e8,
        input_dim: 3,
    }
}

/// Finite-difference check on [`GRADCHECK_CONFIGS`] seeded parameter/batch
/// draws. `corrupt` perturbs one analytic gradient entry as a negative control.
pub fn gradcheck_suite(seed: u64, corrupt: bool) -> Result<GradcheckSuite> {
    let cfg = gradcheck_model();
    let reports = (0..GRADCHECK_CONFIGS)
        .into_par_iter()
        .map(|i| {
            let s = mix_seed(seed, i, 0);
            let params = cfg.init_params(s);
            let batch = model::random_batch(&cfg, 4, s ^ 1);
            let (_, mut grad) = model::loss_and_grad(&batch, &params, &cfg, None)?;
            if corrupt {
                let wq = params
                    .segments()
                    .iter()
                    .find(|seg| seg.name == model::SEG_WQ)
                    .expect("wq segment");
                grad.values_mut()[wq.offset] += 1e-2;
            }
            model::gradcheck(&batch, &params, &cfg, &grad, GRADCHECK_STEP)
        })
        .collect::<Result<_>>()?;
    Ok(GradcheckSuite { reports })
}

//! Experiment driver: dataset generation, LoRA / proximal training,
//! rank reduction, landscape certification, and bound arithmetic.
//!
//! Exit codes: 0 = pass, 1 = usage/configuration error, 2 = certified
//! failure (an experiment ran to completion and its check failed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lntk::bound::{self, BoundSpec, SyntheticTask};
use lntk::error::{Error, Result};
use lntk::io::{self, ExperimentConfig};
use lntk::landscape::{self, SospTolerances, ToyInstance};
use lntk::model::{self, LinearizedDataset};
use lntk::optim::{self, rank_threshold, InitScheme, TrainConfig, TrainOutcome};
use lntk::prox;
use lntk::reduce::{self, ReduceConfig};

#[derive(Parser)]
#[command(name = "lntk", version, about = "linearized LoRA landscape laboratory")]
struct Cli {
    /// key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV traces and JSON summaries.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    perturb_eps: Option<f64>,
    /// Dataset selector: toy-a | toy-b | toy-c | path to a .lntk file.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// synthetic-mse | synthetic-ce | toy-a | toy-b | toy-c
        #[arg(long, default_value = "synthetic-mse")]
        kind: String,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        feature_bound: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma_y: f64,
        #[arg(long, default_value_t = 16)]
        n_train: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a toy fixture and check it against its closed-form floor.
    Toy {
        #[arg(long)]
        which: String,
        /// zero: pass iff the final loss reaches ~0;
        /// floor: pass iff it stays at or above the rank-constrained floor.
        #[arg(long, default_value = "zero")]
        check: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Factored (LoRA) training on a dataset.
    TrainLora {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Proximal-gradient solve of the convex regularized risk.
    TrainProx {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve the convex problem, then reduce the minimizer's rank.
    ReduceRank {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Multistart landscape certification against the convex oracle.
    Landscape {
        #[arg(long)]
        runs: Option<usize>,
        /// Use r = rank_threshold(K, N) regardless of the configured rank.
        #[arg(long, default_value_t = false)]
        threshold_rank: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the prescribed lambda, excess-risk bound, and perturbation
    /// budget for a bound specification.
    GenBound {
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        feature_bound: f64,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        slack_eps: Option<f64>,
        /// Loss Lipschitz constant; defaults to sqrt(2) (cross-entropy).
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        nuclear_true: f64,
        #[arg(long, default_value_t = 1.0)]
        nuclear_lambda: f64,
    },
    /// Re-run a JSON summary with its recorded seed and config and
    /// check that the final values reproduce to 1e-12.
    Report {
        #[arg(long)]
        summary: PathBuf,
    },
}

/// Self-contained record of one experiment: re-running `command` with
/// `config` (and `bound_spec` where relevant) must reproduce `finals`.
#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    command: String,
    config: ExperimentConfig,
    bound_spec: Option<BoundSpec>,
    tolerances: BTreeMap<String, f64>,
    finals: BTreeMap<String, f64>,
    verdicts: BTreeMap<String, bool>,
    pass: bool,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are successful exits.
            if e.use_stderr() {
                eprintln!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match execute(cli) {
        Ok(pass) => {
            if pass {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, out_dir: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match cli_config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(r) = o.rank {
        cfg.rank = r;
    }
    if let Some(l) = o.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = o.step_size {
        cfg.step_size = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(p) = o.perturb_eps {
        cfg.perturb_eps = p;
    }
    if let Some(t) = &o.task {
        cfg.task = t.clone();
    }
}

fn resolve_dataset(task: &str) -> Result<LinearizedDataset> {
    match task {
        "toy-a" => Ok(landscape::toy_instance(ToyInstance::A)),
        "toy-b" => Ok(landscape::toy_instance(ToyInstance::B)),
        "toy-c" => Ok(landscape::toy_instance(ToyInstance::C)),
        path if path.ends_with(".lntk") => io::read_dataset(Path::new(path)),
        other => Err(Error::Config(format!(
            "unknown task `{other}` (expected toy-a|toy-b|toy-c or a .lntk path)"
        ))),
    }
}

/// Training configuration for a concrete dataset: a configured batch
/// size larger than N degrades to full batch.
fn train_config_for(cfg: &ExperimentConfig, n: usize) -> TrainConfig {
    let mut tc = cfg.to_train_config();
    if tc.batch_size.map_or(false, |b| b > n) {
        tc.batch_size = None;
    }
    tc
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn write_summary(cfg: &ExperimentConfig, name: &str, summary: &Summary) -> Result<()> {
    io::write_json(&cfg.out_dir.join(format!("{name}_summary.json")), summary)
}

/// Rank-1 floor of a 2x2, K=1 squared-error instance by grid refinement
/// over directions: for fixed unit u(alpha), v(beta) the optimal scale
/// is closed-form, so only the two angles are searched.
fn rank1_floor(data: &LinearizedDataset) -> Result<f64> {
    if data.shape().rows() != 2 || data.shape().cols() != 2 || data.output_dim() != 1 {
        return Err(Error::InvalidArgument("rank-1 floor oracle expects a 2x2, K=1 instance".into()));
    }
    let eval = |alpha: f64, beta: f64| -> f64 {
        let u = nalgebra::DVector::from_vec(vec![alpha.cos(), alpha.sin()]);
        let v = nalgebra::DVector::from_vec(vec![beta.cos(), beta.sin()]);
        let outer = &u * v.transpose();
        let mut num = 0.0;
        let mut den = 0.0;
        for s in data.samples() {
            let g = s.features.block_inner(0, &outer);
            let y = match &s.label {
                model::Label::Target(t) => t[0] - s.base_output[0],
                model::Label::Class(_) => unreachable!("squared-error instance"),
            };
            num += g * y;
            den += g * g;
        }
        let scale = if den > 0.0 { num / den } else { 0.0 };
        model::empirical_risk(&(outer * scale), data).expect("toy risk")
    };
    let pi = std::f64::consts::PI;
    let (mut ca, mut cb, mut width) = (0.0, 0.0, pi);
    let mut best = f64::INFINITY;
    for _ in 0..12 {
        let steps = 40;
        let (mut na, mut nb) = (ca, cb);
        for i in 0..=steps {
            for j in 0..=steps {
                let a = ca - width + 2.0 * width * i as f64 / steps as f64;
                let b = cb - width + 2.0 * width * j as f64 / steps as f64;
                let val = eval(a, b);
                if val < best {
                    best = val;
                    na = a;
                    nb = b;
                }
            }
        }
        ca = na;
        cb = nb;
        width *= 0.3;
    }
    Ok(best)
}

fn execute(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.config, &cli.out_dir)?;
    match cli.command {
        Command::GenData { out, kind, m, n, k, feature_bound, sigma_y, n_train, seed } => {
            let data = match kind.as_str() {
                "synthetic-mse" => {
                    let task = SyntheticTask::default_mse(m, n, k, feature_bound, sigma_y, seed);
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                    task.draw_dataset(n_train, &mut rng)?
                }
                "synthetic-ce" => {
                    let task = SyntheticTask::default_ce(m, n, k, feature_bound, seed);
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                    task.draw_dataset(n_train, &mut rng)?
                }
                other => resolve_dataset(other)?,
            };
            io::write_dataset(&out, &data)?;
            println!(
                "wrote {} samples (K = {}, blocks {:?}) to {}",
                data.len(),
                data.output_dim(),
                data.shape().blocks(),
                out.display()
            );
            Ok(true)
        }

        Command::Toy { which, check, overrides } => {
            let instance = match which.as_str() {
                "a" => ToyInstance::A,
                "b" => ToyInstance::B,
                "c" => ToyInstance::C,
                other => return Err(Error::Config(format!("unknown toy instance `{other}`"))),
            };
            cfg.task = format!("toy-{which}");
            // Toy-tuned defaults; explicit flags still win. The fixtures
            // are checked against unpenalized floors, so lambda is zero.
            cfg.lambda = 0.0;
            cfg.step_size = 0.05;
            cfg.epochs = 60_000;
            cfg.init = InitScheme::BothGaussian;
            cfg.sigma_init = 0.3;
            cfg.batch_size = 0;
            cfg.tol_grad = 1e-12;
            apply_overrides(&mut cfg, &overrides);
            ensure_out_dir(&cfg)?;
            let summary = run_toy(&cfg, instance)?;
            write_summary(&cfg, "toy", &summary)?;
            let verdict = match check.as_str() {
                "zero" => summary.verdicts["reaches_zero"],
                "floor" => summary.verdicts["at_or_above_floor"],
                other => return Err(Error::Config(format!("unknown check mode `{other}`"))),
            };
            println!(
                "toy {which}: final loss {:.3e}, floor {:.3e}, check `{check}` -> {}",
                summary.finals["final_risk"],
                summary.finals["floor"],
                if verdict { "pass" } else { "fail" }
            );
            Ok(verdict)
        }

        Command::TrainLora { overrides } => {
            apply_overrides(&mut cfg, &overrides);
            ensure_out_dir(&cfg)?;
            let summary = run_train_lora(&cfg)?;
            write_summary(&cfg, "train_lora", &summary)?;
            println!(
                "train-lora on {}: final objective {:.6e}, grad {:.3e} ({})",
                cfg.task,
                summary.finals["final_factored_risk"],
                summary.finals["final_grad_norm"],
                if summary.pass { "pass" } else { "fail" }
            );
            Ok(summary.pass)
        }

        Command::TrainProx { overrides } => {
            apply_overrides(&mut cfg, &overrides);
            ensure_out_dir(&cfg)?;
            let summary = run_train_prox(&cfg)?;
            write_summary(&cfg, "train_prox", &summary)?;
            println!(
                "train-prox on {}: objective {:.6e} ({})",
                cfg.task,
                summary.finals["objective"],
                if summary.pass { "pass" } else { "fail" }
            );
            Ok(summary.pass)
        }

        Command::ReduceRank { overrides } => {
            apply_overrides(&mut cfg, &overrides);
            ensure_out_dir(&cfg)?;
            let summary = run_reduce_rank(&cfg)?;
            write_summary(&cfg, "reduce_rank", &summary)?;
            println!(
                "reduce-rank on {}: rank {} (dim count {} <= KN {}), drift {:.3e} ({})",
                cfg.task,
                summary.finals["rank"] as usize,
                summary.finals["dim_count"] as usize,
                summary.finals["kn"] as usize,
                summary.finals["objective_drift"].abs(),
                if summary.pass { "pass" } else { "fail" }
            );
            Ok(summary.pass)
        }

        Command::Landscape { runs, threshold_rank, overrides } => {
            apply_overrides(&mut cfg, &overrides);
            if let Some(r) = runs {
                cfg.runs = r;
            }
            ensure_out_dir(&cfg)?;
            let summary = run_landscape(&cfg, threshold_rank)?;
            write_summary(&cfg, "landscape", &summary)?;
            println!(
                "landscape on {}: spread {:.3e}, global {:.6e}, within-bound {}, rank-deficient {}",
                cfg.task,
                summary.finals["spread"],
                summary.finals["reference_global"],
                summary.verdicts["all_within_bound"],
                summary
                    .verdicts
                    .get("all_rank_deficient")
                    .map(|b| b.to_string())
                    .unwrap_or_else(|| "n/a".into()),
            );
            Ok(summary.pass)
        }

        Command::GenBound { k, n, feature_bound, eta, slack_eps, lipschitz, nuclear_true, nuclear_lambda } => {
            ensure_out_dir(&cfg)?;
            let spec = BoundSpec {
                k,
                feature_bound,
                n,
                eta: eta.unwrap_or(cfg.eta),
                slack_eps: slack_eps.unwrap_or(cfg.slack_eps),
                loss_lipschitz: lipschitz.unwrap_or(bound::CE_LIPSCHITZ),
                nuclear_true,
                nuclear_lambda,
            };
            let summary = run_gen_bound(&cfg, &spec)?;
            write_summary(&cfg, "gen_bound", &summary)?;
            println!(
                "lambda = {:.12e}\nexcess_bound = {:.12e}\nperturbation_budget = {:.12e}",
                summary.finals["lambda"],
                summary.finals["excess_bound"],
                summary.finals["perturbation_budget"],
            );
            Ok(true)
        }

        Command::Report { summary } => {
            let text = std::fs::read_to_string(&summary)?;
            let recorded: Summary = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("summary json: {e}")))?;
            let replay = replay(&recorded)?;
            let mut ok = true;
            for (key, want) in &recorded.finals {
                let Some(got) = replay.finals.get(key) else {
                    println!("{key}: missing in replay");
                    ok = false;
                    continue;
                };
                let same = (want - got).abs() <= 1e-12
                    || (want.is_nan() && got.is_nan())
                    || (want.is_infinite() && got == want);
                if !same {
                    println!("{key}: recorded {want:.17e} vs replay {got:.17e}");
                    ok = false;
                }
            }
            println!("report: {}", if ok { "reproduced" } else { "MISMATCH" });
            Ok(ok)
        }
    }
}

fn replay(recorded: &Summary) -> Result<Summary> {
    let cfg = &recorded.config;
    match recorded.command.as_str() {
        "toy" => {
            let instance = match cfg.task.as_str() {
                "toy-a" => ToyInstance::A,
                "toy-b" => ToyInstance::B,
                "toy-c" => ToyInstance::C,
                other => return Err(Error::Config(format!("summary has non-toy task `{other}`"))),
            };
            run_toy(cfg, instance)
        }
        "train-lora" => run_train_lora(cfg),
        "train-prox" => run_train_prox(cfg),
        "reduce-rank" => run_reduce_rank(cfg),
        "landscape" => run_landscape(cfg, false),
        "gen-bound" => {
            let spec = recorded
                .bound_spec
                .as_ref()
                .ok_or_else(|| Error::Format("gen-bound summary lacks its spec".into()))?;
            run_gen_bound(cfg, spec)
        }
        other => Err(Error::Config(format!("cannot replay command `{other}`"))),
    }
}

fn run_toy(cfg: &ExperimentConfig, instance: ToyInstance) -> Result<Summary> {
    let data = landscape::toy_instance(instance);
    let tc = train_config_for(cfg, data.len());
    let trace = optim::train(&data, &tc)?;
    io::write_trace_csv(&cfg.out_dir.join("toy_trace.csv"), &trace.records)?;
    let final_risk = trace.final_regularized_risk();
    let floor = if cfg.rank >= 2 { 0.0 } else { rank1_floor(&data)? };
    let mut finals = BTreeMap::new();
    finals.insert("final_risk".into(), final_risk);
    finals.insert("floor".into(), floor);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("reaches_zero".into(), final_risk < 1e-8);
    verdicts.insert("at_or_above_floor".into(), final_risk >= floor - 1e-6);
    let mut tolerances = BTreeMap::new();
    tolerances.insert("zero_tol".into(), 1e-8);
    tolerances.insert("floor_tol".into(), 1e-6);
    Ok(Summary {
        command: "toy".into(),
        config: cfg.clone(),
        bound_spec: None,
        tolerances,
        finals,
        verdicts: verdicts.clone(),
        pass: verdicts["at_or_above_floor"],
    })
}

fn run_train_lora(cfg: &ExperimentConfig) -> Result<Summary> {
    let data = resolve_dataset(&cfg.task)?;
    let tc = train_config_for(cfg, data.len());
    let trace = optim::train(&data, &tc)?;
    io::write_trace_csv(&cfg.out_dir.join("train_lora_trace.csv"), &trace.records)?;
    let mut finals = BTreeMap::new();
    finals.insert("final_factored_risk".into(), trace.final_factored_risk());
    finals.insert("final_regularized_risk".into(), trace.final_regularized_risk());
    finals.insert("final_grad_norm".into(), trace.final_grad_norm());
    let mut verdicts = BTreeMap::new();
    let diverged = matches!(trace.outcome, TrainOutcome::Diverged);
    verdicts.insert("finite".into(), !diverged);
    let tols = SospTolerances {
        tol_grad: cfg.tol_grad,
        tol_hess: cfg.tol_hess,
        rank_tol: cfg.rank_tol,
    };
    let side = (data.shape().rows() + data.shape().cols()) * tc.rank;
    if !diverged && side <= model::HESSIAN_GUARD {
        let cert =
            landscape::sosp_certificate(&trace.factors, &data, tc.lambda, &trace.perturbation, &tols)?;
        finals.insert("grad_norm".into(), cert.grad_norm);
        finals.insert("hessian_min_eigenvalue".into(), cert.hessian_min_eigenvalue);
        finals.insert("factor_rank".into(), cert.factor_rank as f64);
        verdicts.insert("sosp".into(), cert.is_sosp());
    }
    let mut tolerances = BTreeMap::new();
    tolerances.insert("tol_grad".into(), cfg.tol_grad);
    tolerances.insert("tol_hess".into(), cfg.tol_hess);
    tolerances.insert("rank_tol".into(), cfg.rank_tol);
    let pass = !diverged;
    Ok(Summary {
        command: "train-lora".into(),
        config: cfg.clone(),
        bound_spec: None,
        tolerances,
        finals,
        verdicts,
        pass,
    })
}

fn run_train_prox(cfg: &ExperimentConfig) -> Result<Summary> {
    let data = resolve_dataset(&cfg.task)?;
    let res = prox::global_minimum(&data, cfg.lambda)?;
    let records: Vec<optim::EpochRecord> = res
        .trace
        .iter()
        .enumerate()
        .map(|(i, &obj)| optim::EpochRecord {
            epoch: i,
            factored_risk: obj,
            regularized_risk: obj,
            grad_norm: f64::NAN,
        })
        .collect();
    io::write_trace_csv(&cfg.out_dir.join("train_prox_trace.csv"), &records)?;
    let mut finals = BTreeMap::new();
    finals.insert("objective".into(), res.objective());
    finals.insert("nuclear_norm".into(), model::nuclear_norm(&res.delta)?);
    finals.insert("iterations".into(), res.iterations as f64);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("converged".into(), res.converged);
    Ok(Summary {
        command: "train-prox".into(),
        config: cfg.clone(),
        bound_spec: None,
        tolerances: BTreeMap::new(),
        finals,
        verdicts,
        pass: res.converged,
    })
}

fn run_reduce_rank(cfg: &ExperimentConfig) -> Result<Summary> {
    let data = resolve_dataset(&cfg.task)?;
    let sol = prox::global_minimum(&data, cfg.lambda)?;
    let reduce_cfg = ReduceConfig { rank_tol: cfg.rank_tol, ..ReduceConfig::default() };
    let report = reduce::rank_reduce(&sol.delta, &data, cfg.lambda, &reduce_cfg)?;
    let kn = data.len() * data.output_dim();
    let dim_count = report.rank * (report.rank + 1) / 2;
    let drift = report.final_objective - sol.objective();
    let mut finals = BTreeMap::new();
    finals.insert("rank".into(), report.rank as f64);
    finals.insert("dim_count".into(), dim_count as f64);
    finals.insert("kn".into(), kn as f64);
    finals.insert("objective_drift".into(), drift);
    finals.insert("final_objective".into(), report.final_objective);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("dimension_count".into(), dim_count <= kn);
    verdicts.insert("objective_preserved".into(), drift.abs() < 1e-6);
    let pass = verdicts["dimension_count"] && verdicts["objective_preserved"];
    let mut tolerances = BTreeMap::new();
    tolerances.insert("drift_tol".into(), 1e-6);
    tolerances.insert("rank_tol".into(), cfg.rank_tol);
    Ok(Summary {
        command: "reduce-rank".into(),
        config: cfg.clone(),
        bound_spec: None,
        tolerances,
        finals,
        verdicts,
        pass,
    })
}

fn run_landscape(cfg: &ExperimentConfig, threshold_rank: bool) -> Result<Summary> {
    let data = resolve_dataset(&cfg.task)?;
    let mut cfg = cfg.clone();
    if threshold_rank {
        cfg.rank = rank_threshold(data.output_dim(), data.len());
    }
    let tc = train_config_for(&cfg, data.len());
    let report = landscape::multistart(&data, &tc, cfg.runs.max(2), 1e-6)?;
    let mut finals = BTreeMap::new();
    finals.insert("spread".into(), report.spread);
    finals.insert("reference_global".into(), report.reference_global);
    finals.insert("reference_nuclear".into(), report.reference_nuclear);
    finals.insert("diverged".into(), report.diverged as f64);
    for run in &report.runs {
        finals.insert(format!("run_{}_final", run.seed), run.final_unperturbed);
    }
    let mut verdicts = BTreeMap::new();
    verdicts.insert("all_within_bound".into(), report.all_within_bound);
    let mut pass = report.all_within_bound;
    if cfg.perturb_eps > 0.0 {
        // Perturbed stationary points are almost surely rank deficient
        // at (or above) the threshold rank.
        let deficient = report
            .runs
            .iter()
            .filter(|r| matches!(r.outcome, TrainOutcome::Converged))
            .all(|r| r.certificate.factor_rank < tc.rank);
        verdicts.insert("all_rank_deficient".into(), deficient);
        if tc.rank >= rank_threshold(data.output_dim(), data.len()) {
            pass = pass && deficient;
        }
    }
    let mut tolerances = BTreeMap::new();
    tolerances.insert("bound_slack".into(), report.slack);
    Ok(Summary {
        command: "landscape".into(),
        config: cfg,
        bound_spec: None,
        tolerances,
        finals,
        verdicts,
        pass,
    })
}

fn run_gen_bound(cfg: &ExperimentConfig, spec: &BoundSpec) -> Result<Summary> {
    let lambda = bound::lambda_from_bound(spec)?;
    let excess = bound::excess_risk_bound(spec)?;
    let budget = bound::perturbation_budget(spec, lambda)?;
    let mut finals = BTreeMap::new();
    finals.insert("lambda".into(), lambda);
    finals.insert("excess_bound".into(), excess);
    finals.insert("perturbation_budget".into(), budget);
    Ok(Summary {
        command: "gen-bound".into(),
        config: cfg.clone(),
        bound_spec: Some(spec.clone()),
        tolerances: BTreeMap::new(),
        finals,
        verdicts: BTreeMap::new(),
        pass: true,
    })
}

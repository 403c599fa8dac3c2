use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use idpg_core::accountant::{count, Method, MethodSpec, ParamBudget};
use idpg_core::analysis::{compare_models, CosineReport, COSINE_KS};
use idpg_core::data::Example;
use idpg_core::gradcheck::{self, GRAD_TOLERANCE, ORACLE_TOLERANCE};
use idpg_core::run::{best_by_dev, few_shot_sweep, lr_sweep, run_experiment, AnyModel, FewShotRow, RunConfig, RunOutcome};
use idpg_core::train::LR_GRID;

#[derive(Parser)]
#[command(name = "idpg", version, about = "Instance-dependent prompt generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    /// One JSON object per line.
    Record,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Split {
    Train,
    #[default]
    Dev,
    Test,
    /// Every split, in train, dev, test order.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Trainable-parameter budget of a method; all methods when none is given.
    CountParams(CountArgs),
    /// Train from a run config and report the scores of every split.
    Train(TrainArgs),
    /// Score a checkpoint on a split of the config's task.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Factored against materialized PHM forwards on random shapes.
    OracleCheck(OracleArgs),
    /// Top-k cosine ranking of sentence pairs under two checkpoints.
    AnalyzeCosine(CosineArgs),
    /// Few-shot sweep: mean and standard deviation of the test metric.
    FewShot(FewShotArgs),
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    d: Option<usize>,
    /// Transformer layers.
    #[arg(long = "N", alias = "layers")]
    layers: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    enc_dim: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep these learning rates and keep the best by dev score; without
    /// values the default grid is used.
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    split: Split,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check this seed only; seeds 0..20 otherwise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct CosineArgs {
    /// Run config naming the pair task.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    idpg: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    #[arg(long = "k", value_delimiter = ',', default_values_t = COSINE_KS)]
    ks: Vec<usize>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "k", value_delimiter = ',', default_values_t = [100, 500, 1000])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1000)]
    dev_size: usize,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

/// Exit status of a subcommand that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

type CmdResult = Result<Status, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CountParams(a) => count_params(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::OracleCheck(a) => oracle_check(a),
        Command::AnalyzeCosine(a) => analyze_cosine(a),
        Command::FewShot(a) => few_shot(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn print_budget(b: &ParamBudget, spec: &MethodSpec) {
    let d = &spec.dims;
    let dims: Vec<String> = [("d", d.d), ("N", d.layers), ("m", d.m), ("t", d.t), ("n", d.n), ("enc_dim", d.enc_dim)]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
        .collect();
    println!("{} ({})", b.method, dims.join(" "));
    for c in &b.components {
        println!("  {:<14} {:>13} {:>9}", c.label, grouped(c.count), c.display);
    }
    print!("  {:<14} {:>13} {:>9}", "total", grouped(b.total), b.display);
    if b.table_display != b.display {
        print!("  (summary table: {})", b.table_display);
    }
    println!();
}

fn count_params(a: CountArgs) -> CmdResult {
    let methods: Vec<Method> = match a.method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    for (i, method) in methods.into_iter().enumerate() {
        let mut spec = MethodSpec::reference(method);
        let dims = &mut spec.dims;
        for (slot, v) in [
            (&mut dims.d, a.d),
            (&mut dims.layers, a.layers),
            (&mut dims.m, a.m),
            (&mut dims.t, a.t),
            (&mut dims.n, a.n),
            (&mut dims.enc_dim, a.enc_dim),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        let budget = count(&spec)?;
        match a.format {
            Format::Text => {
                if i > 0 {
                    println!();
                }
                print_budget(&budget, &spec);
            }
            Format::Record => println!("{}", json!({ "spec": spec, "budget": budget })),
        }
    }
    Ok(Status::Ok)
}

fn print_scores(label: &str, scores: &std::collections::BTreeMap<String, f64>) {
    let parts: Vec<String> = scores.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{label:<6} {}", parts.join(" "));
}

fn print_outcome(o: &RunOutcome, format: Format) {
    let s = &o.summary;
    match format {
        Format::Text => {
            println!(
                "task={} method={} seed={} lr={} trainable={} best_epoch={} steps={}",
                s.task,
                s.method,
                s.seed,
                s.lr,
                s.trainable_params,
                s.best_epoch.map_or("none".to_string(), |e| e.to_string()),
                s.steps
            );
            print_scores("train", &s.train);
            print_scores("dev", &s.dev);
            print_scores("test", &s.test);
        }
        Format::Record => println!("{}", json!(s)),
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let Some(grid) = a.lr_grid else {
        print_outcome(&run_experiment(&cfg)?, a.format);
        return Ok(Status::Ok);
    };
    let grid = if grid.is_empty() { LR_GRID.to_vec() } else { grid };
    let outcomes = lr_sweep(&cfg, &grid)?;
    for o in &outcomes {
        print_outcome(o, a.format);
    }
    let Some(best) = best_by_dev(&outcomes) else {
        eprintln!("no learning rate produced a defined dev score");
        return Ok(Status::CheckFailed);
    };
    let chosen = &outcomes[best];
    if let Format::Text = a.format {
        println!("selected lr={}", chosen.summary.lr);
    }
    let out = &cfg.output;
    if let Some(p) = &out.checkpoint {
        chosen.model.save(p)?;
    }
    if let Some(p) = &out.log {
        std::fs::write(p, &chosen.log)?;
    }
    if let Some(p) = &out.summary {
        std::fs::write(p, serde_json::to_string_pretty(&chosen.summary)?)?;
    }
    Ok(Status::Ok)
}

fn split_examples(ds: &idpg_core::data::TaskDataset, split: Split) -> Vec<Example> {
    match split {
        Split::Train => ds.train.clone(),
        Split::Dev => ds.dev.clone(),
        Split::Test => ds.test.clone(),
        Split::All => ds.all_examples().cloned().collect(),
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let ds = cfg.load_task()?;
    let model = AnyModel::load(&a.checkpoint)?;
    let scores = model.evaluate(&split_examples(&ds, a.split), &ds.metrics())?;
    match a.format {
        Format::Text => print_scores(&format!("{:?}", a.split).to_lowercase(), &scores),
        Format::Record => println!("{}", json!({ "task": ds.name, "scores": scores })),
    }
    Ok(Status::Ok)
}

fn grad_check(a: GradcheckArgs) -> CmdResult {
    let report = match a.seed {
        Some(s) => gradcheck::run_suite([s])?,
        None => gradcheck::run_suite(0..20)?,
    };
    match a.format {
        Format::Text => {
            for (name, worst) in report.by_name() {
                println!("{name:<36} {worst:.3e}");
            }
            println!("worst relative error {:.3e} (tolerance {GRAD_TOLERANCE:e})", report.worst());
        }
        Format::Record => {
            for c in &report.cases {
                println!("{}", json!(c));
            }
            println!("{}", json!({ "worst": report.worst(), "tolerance": GRAD_TOLERANCE, "passed": report.passed() }));
        }
    }
    Ok(if report.passed() { Status::Ok } else { Status::CheckFailed })
}

fn oracle_check(a: OracleArgs) -> CmdResult {
    let report = gradcheck::oracle_check(a.count, a.seed)?;
    match a.format {
        Format::Text => println!(
            "{} configs, worst |blocked - materialized| {:.3e} (threshold {ORACLE_TOLERANCE:e})",
            report.cases.len(),
            report.worst()
        ),
        Format::Record => {
            for c in &report.cases {
                println!("{}", json!(c));
            }
            println!("{}", json!({ "worst": report.worst(), "threshold": ORACLE_TOLERANCE, "passed": report.passed() }));
        }
    }
    Ok(if report.passed() { Status::Ok } else { Status::CheckFailed })
}

fn analyze_cosine(a: CosineArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let ds = cfg.load_task()?;
    let baseline = AnyModel::load(&a.baseline)?;
    let idpg = AnyModel::load(&a.idpg)?;
    let report: CosineReport = compare_models(&baseline, &idpg, &split_examples(&ds, a.split), &a.ks)?;
    match a.format {
        Format::Text => print!("{}", report.render()),
        Format::Record => {
            for row in &report.rows {
                println!("{}", json!({ "pairs": report.pairs, "group_sizes": report.group_sizes, "row": row }));
            }
        }
    }
    Ok(Status::Ok)
}

fn few_shot(a: FewShotArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let rows: Vec<FewShotRow> = few_shot_sweep(&cfg, &a.ks, &a.seeds, a.dev_size)?;
    for r in &rows {
        match a.format {
            Format::Text => println!("K={:<5} {} {:.4} ± {:.4}", r.k, r.metric, r.mean, r.stdev),
            Format::Record => println!("{}", json!(r)),
        }
    }
    Ok(Status::Ok)
}

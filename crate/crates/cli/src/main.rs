//! `mlefuse` — simulator CLI for one-shot distributed MLE combination.
//!
//! Subcommands:
//!   simulate   run a (model, combiner, n, d) experiment grid, emit CSV/JSON
//!   curvature  print Fisher information and statistical curvature at theta
//!   predict    evaluate the asymptotic bias/MSE predictions for a regime
//!   gmm-demo   mixture fusion pipeline: train/test log-likelihoods per method
//!
//! Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mlefuse_core::curved::{curvature_general, wrap_angle, EllipseModel};
use mlefuse_core::error::Error as CoreError;
use mlefuse_core::expfam::{Parameterization, SampleSet};
use mlefuse_core::harness::{
    aggregate, attach_predictions, gmm_demo, render_summary, write_results, CombinerChoice,
    ExperimentConfig, GmmDemoConfig, GmmTruth, ModelSpec, OutputFormat, PartitionScheme,
};
use mlefuse_core::theory::predict_asymptotics;
use nalgebra::DVector;

const USAGE: &str = "\
mlefuse — one-shot distributed MLE combination simulator

USAGE:
  mlefuse <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
  simulate   Run seeded combination experiments over an (n, d) grid.
    --config FILE           JSON config (flat keys mirroring the flags below;
                            explicit flags override the file)
    --model NAME            ellipse | variance | gmm         (required)
    --a X --b X             ellipse axes                     (default 1, 5)
    --theta-star X          ellipse true angle, radians      (default pi/4)
    --sigma-sq X            variance-model true variance     (default 1)
    --k N                   mixture components               (default 3)
    --dim N                 mixture dimension                (default 2)
    --separation X          mixture mean separation          (default 8)
    --n LIST                comma list of total sample sizes (default 1000)
    --d N                   number of machines               (default 10)
    --trials N              Monte-Carlo trials per n         (default 100)
    --combiners LIST        subset of linear,kl,naive_linear,
                            matched_linear,kl_bootstrap
    --partition NAME        iid_random | label_wise          (default iid_random)
    --parameterization NAME natural | variance | std | precision
    --seed N                master seed                      (default 0)
    --misspecified MX,MY    ellipse only: draw data from N((MX,MY), I)
    --m-per-local N         bootstrap draws per local model  (default 500)
    --exact-moments         ellipse only: sample sufficient statistics
                            directly (distributionally identical, faster)
    --out PATH              write summary here (default: print to stdout)
    --format NAME           csv | json                       (default csv)

  curvature  Print the curvature report for a model point.
    --model ellipse --a X --b X --theta X

  predict    Evaluate the closed-form regime predictions.
    --gamma-sq X --fisher X --beta X --n N --d N

  gmm-demo   Mixture fusion demo: per-method train/test log-likelihood.
    --k N --d N --n N --n-test N --trials N --m-per-local N
    --partition NAME --skew X --seed N --separation X
    --data FILE.csv         headerless numeric CSV; add --labeled if the last
                            column is an integer group label
    --out PATH --format NAME
";

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match dispatch(&args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{USAGE}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let Some(sub) = args.first() else {
        return Err(usage_err("missing subcommand"));
    };
    match sub.as_str() {
        "simulate" => simulate(&args[1..]),
        "curvature" => curvature(&args[1..]),
        "predict" => predict(&args[1..]),
        "gmm-demo" => gmm_demo_cmd(&args[1..]),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(usage_err(format!("unknown subcommand '{other}'"))),
    }
}

/// Flag parser: every flag is `--key value` except listed boolean switches.
fn parse_flags(
    args: &[String],
    allowed: &[&str],
    switches: &[&str],
) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(key) = arg.strip_prefix("--") else {
            return Err(usage_err(format!("unexpected argument '{arg}'")));
        };
        if !allowed.contains(&key) && !switches.contains(&key) {
            return Err(usage_err(format!("unknown flag '--{key}'")));
        }
        if switches.contains(&key) {
            map.insert(key.to_string(), "true".to_string());
            i += 1;
        } else {
            let Some(value) = args.get(i + 1) else {
                return Err(usage_err(format!("flag '--{key}' needs a value")));
            };
            map.insert(key.to_string(), value.clone());
            i += 2;
        }
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> CliResult<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| usage_err(format!("flag '--{key}': cannot parse '{raw}'"))),
    }
}

// ---------------------------------------------------------------- simulate

/// Flat JSON config mirroring the flags; flags override file values.
fn load_config_file(path: &str) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage_err(format!("cannot read config '{path}': {e}")))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage_err(format!("config '{path}' is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| usage_err(format!("config '{path}' must be a JSON object")))?;
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let flat = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(|x| match x {
                    serde_json::Value::String(s) => Ok(s.clone()),
                    serde_json::Value::Number(n) => Ok(n.to_string()),
                    _ => Err(usage_err(format!(
                        "config key '{k}': unsupported array item"
                    ))),
                })
                .collect::<CliResult<Vec<String>>>()?
                .join(","),
            _ => {
                return Err(usage_err(format!(
                    "config key '{k}': unsupported value type"
                )))
            }
        };
        map.insert(k.replace('-', "_"), flat);
    }
    Ok(map)
}

const SIMULATE_FLAGS: &[&str] = &[
    "config",
    "model",
    "a",
    "b",
    "theta-star",
    "sigma-sq",
    "k",
    "dim",
    "separation",
    "n",
    "d",
    "trials",
    "combiners",
    "partition",
    "parameterization",
    "seed",
    "misspecified",
    "m-per-local",
    "out",
    "format",
];

fn simulate(args: &[String]) -> CliResult<()> {
    let flags = parse_flags(args, SIMULATE_FLAGS, &["exact-moments"])?;
    // merge: config file first, flags win
    let mut merged = match flags.get("config") {
        Some(path) => load_config_file(path)?,
        None => BTreeMap::new(),
    };
    for (k, v) in &flags {
        if k != "config" {
            merged.insert(k.replace('-', "_"), v.clone());
        }
    }
    let get = |key: &str| merged.get(key).cloned();

    let model_name = get("model").ok_or_else(|| usage_err("simulate requires --model"))?;
    let model = match model_name.as_str() {
        "ellipse" => ModelSpec::Ellipse {
            a: parse_merged(&merged, "a")?.unwrap_or(1.0),
            b: parse_merged(&merged, "b")?.unwrap_or(5.0),
            theta_star: parse_merged(&merged, "theta_star")?.unwrap_or(std::f64::consts::FRAC_PI_4),
        },
        "variance" => ModelSpec::Variance {
            sigma_sq_star: parse_merged(&merged, "sigma_sq")?.unwrap_or(1.0),
        },
        "gmm" => {
            let k = parse_merged::<usize>(&merged, "k")?.unwrap_or(3);
            ModelSpec::Gmm {
                truth: GmmTruth::Generated {
                    k,
                    dim: parse_merged(&merged, "dim")?.unwrap_or(2),
                    separation: parse_merged(&merged, "separation")?.unwrap_or(8.0),
                    seed: parse_merged(&merged, "seed")?.unwrap_or(0),
                },
                k,
            }
        }
        other => return Err(usage_err(format!("unknown model '{other}'"))),
    };

    let mut config = ExperimentConfig::new(model);
    if let Some(raw) = get("n") {
        config.n_grid = raw
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| usage_err(format!("--n: cannot parse '{tok}'")))
            })
            .collect::<CliResult<Vec<_>>>()?;
    }
    if let Some(v) = parse_merged(&merged, "d")? {
        config.d = v;
    }
    if let Some(v) = parse_merged(&merged, "trials")? {
        config.trials = v;
    }
    if let Some(raw) = get("combiners") {
        config.combiners = raw
            .split(',')
            .map(|tok| CombinerChoice::parse(tok.trim()).map_err(CliError::from))
            .collect::<CliResult<Vec<_>>>()?;
    }
    if let Some(raw) = get("partition") {
        config.partition = parse_partition(&raw)?;
    }
    if let Some(raw) = get("parameterization") {
        config.parameterization = parse_parameterization(&raw)?;
    }
    if let Some(v) = parse_merged(&merged, "seed")? {
        config.master_seed = v;
    }
    if let Some(raw) = get("misspecified") {
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 2 {
            return Err(usage_err("--misspecified expects 'MX,MY'"));
        }
        let mx = parts[0]
            .trim()
            .parse::<f64>()
            .map_err(|_| usage_err("--misspecified: bad MX"))?;
        let my = parts[1]
            .trim()
            .parse::<f64>()
            .map_err(|_| usage_err("--misspecified: bad MY"))?;
        config.misspecified_truth = Some([mx, my]);
    }
    if let Some(v) = parse_merged(&merged, "m_per_local")? {
        config.m_per_local = v;
    }
    if merged.get("exact_moments").map(String::as_str) == Some("true") {
        config.exact_moment_sampling = true;
    }

    let format = match get("format") {
        Some(raw) => OutputFormat::parse(&raw)?,
        None => OutputFormat::Csv,
    };

    let records = mlefuse_core::harness::run_experiment(&config)?;
    let flagged = records.iter().filter(|r| r.flag.is_some()).count();
    let mut summary = aggregate(&records)?;
    attach_predictions(&mut summary, &config)?;

    match get("out") {
        Some(path) => {
            write_results(&summary, &records, &PathBuf::from(&path), format)?;
            eprintln!(
                "wrote {} summary rows ({} records, {} flagged) to {}",
                summary.len(),
                records.len(),
                flagged,
                path
            );
        }
        None => print!("{}", render_summary(&summary, format)),
    }
    Ok(())
}

fn parse_merged<T: std::str::FromStr>(
    merged: &BTreeMap<String, String>,
    key: &str,
) -> CliResult<Option<T>> {
    parse_num::<T>(merged, key)
}

fn parse_partition(raw: &str) -> CliResult<PartitionScheme> {
    match raw {
        "iid_random" => Ok(PartitionScheme::IidRandom),
        "label_wise" => Ok(PartitionScheme::LabelWise),
        other => Err(usage_err(format!("unknown partition scheme '{other}'"))),
    }
}

fn parse_parameterization(raw: &str) -> CliResult<Parameterization> {
    match raw {
        "natural" => Ok(Parameterization::Natural),
        "variance" => Ok(Parameterization::Variance),
        "std" => Ok(Parameterization::Std),
        "precision" => Ok(Parameterization::Precision),
        other => Err(usage_err(format!("unknown parameterization '{other}'"))),
    }
}

// ---------------------------------------------------------------- curvature

fn curvature(args: &[String]) -> CliResult<()> {
    let flags = parse_flags(args, &["model", "a", "b", "theta"], &[])?;
    match flags.get("model").map(String::as_str) {
        Some("ellipse") | None => {}
        Some(other) => {
            return Err(usage_err(format!(
                "curvature supports 'ellipse', got '{other}'"
            )))
        }
    }
    let a: f64 = parse_num(&flags, "a")?.unwrap_or(1.0);
    let b: f64 = parse_num(&flags, "b")?.unwrap_or(5.0);
    let theta: f64 = parse_num(&flags, "theta")?.unwrap_or(0.0);

    let model = EllipseModel::new(a, b)?;
    let theta = wrap_angle(theta);
    let report = curvature_general(&model, &DVector::from_element(1, theta))?;
    println!("model: ellipse(a={a}, b={b})");
    println!("theta: {theta}");
    println!("fisher_info: {}", report.fisher_info[(0, 0)]);
    println!("gamma_sq: {}", report.gamma_sq);
    println!("gamma: {}", report.gamma_sq.sqrt());
    println!("lambda: {}", report.lambda[(0, 0)]);
    Ok(())
}

// ------------------------------------------------------------------ predict

fn predict(args: &[String]) -> CliResult<()> {
    let flags = parse_flags(args, &["gamma-sq", "fisher", "beta", "n", "d"], &[])?;
    let gamma_sq: f64 =
        parse_num(&flags, "gamma-sq")?.ok_or_else(|| usage_err("predict requires --gamma-sq"))?;
    let fisher: f64 =
        parse_num(&flags, "fisher")?.ok_or_else(|| usage_err("predict requires --fisher"))?;
    let beta: f64 = parse_num(&flags, "beta")?.unwrap_or(0.0);
    let n: usize = parse_num(&flags, "n")?.ok_or_else(|| usage_err("predict requires --n"))?;
    let d: usize = parse_num(&flags, "d")?.ok_or_else(|| usage_err("predict requires --d"))?;

    let p = predict_asymptotics(gamma_sq, fisher, beta, n, d)?;
    println!("regime: n={n} d={d} gamma_sq={gamma_sq} fisher={fisher} beta={beta}");
    println!("bias_vs_mle: {}", p.bias_vs_mle);
    println!("mse_vs_mle: {}", p.mse_vs_mle);
    println!("mse_excess_vs_true: {}", p.mse_excess_vs_true);
    Ok(())
}

// ----------------------------------------------------------------- gmm-demo

const GMM_DEMO_FLAGS: &[&str] = &[
    "k",
    "d",
    "n",
    "n-test",
    "trials",
    "m-per-local",
    "partition",
    "skew",
    "seed",
    "separation",
    "data",
    "out",
    "format",
];

fn gmm_demo_cmd(args: &[String]) -> CliResult<()> {
    let flags = parse_flags(args, GMM_DEMO_FLAGS, &["labeled"])?;
    let k: usize = parse_num(&flags, "k")?.unwrap_or(3);
    let d: usize = parse_num(&flags, "d")?.unwrap_or(10);
    let n: usize = parse_num(&flags, "n")?.unwrap_or(500);
    let trials: usize = parse_num(&flags, "trials")?.unwrap_or(20);
    let seed: u64 = parse_num(&flags, "seed")?.unwrap_or(0);

    let mut cfg = GmmDemoConfig::synthetic(k, d, n, trials, seed);
    if let Some(v) = parse_num(&flags, "n-test")? {
        cfg.n_test = v;
    }
    if let Some(v) = parse_num(&flags, "m-per-local")? {
        cfg.m_per_local = v;
    }
    if let Some(raw) = flags.get("partition") {
        cfg.partition = parse_partition(raw)?;
    }
    if let Some(v) = parse_num(&flags, "skew")? {
        cfg.skew = v;
    }
    if let Some(v) = parse_num::<f64>(&flags, "separation")? {
        cfg.truth = GmmTruth::Generated {
            k,
            dim: 2,
            separation: v,
            seed,
        };
    }
    if let Some(path) = flags.get("data") {
        cfg.data = Some(load_csv_data(path, flags.contains_key("labeled"))?);
    }

    let (rows, _) = gmm_demo(&cfg)?;
    let header = "method,trials,train_ll,test_ll,se_test_ll";
    let body = |r: &mlefuse_core::harness::GmmDemoRow| {
        format!(
            "{},{},{},{},{}",
            r.method,
            r.trials,
            r.train_ll,
            r.test_ll,
            r.se_test_ll.map_or("NaN".to_string(), |v| v.to_string())
        )
    };
    match flags.get("out") {
        Some(path) => {
            let format = match flags.get("format") {
                Some(raw) => OutputFormat::parse(raw)?,
                None => OutputFormat::Csv,
            };
            let text = match format {
                OutputFormat::Csv => {
                    let mut out = String::from(header);
                    out.push('\n');
                    for r in &rows {
                        out.push_str(&body(r));
                        out.push('\n');
                    }
                    out
                }
                OutputFormat::Json => {
                    let vals: Vec<serde_json::Value> = rows
                        .iter()
                        .map(|r| {
                            serde_json::json!({
                                "method": r.method,
                                "trials": r.trials,
                                "train_ll": r.train_ll,
                                "test_ll": r.test_ll,
                                "se_test_ll": r.se_test_ll,
                            })
                        })
                        .collect();
                    let mut s = serde_json::to_string_pretty(&vals).expect("plain JSON");
                    s.push('\n');
                    s
                }
            };
            std::fs::write(path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
            eprintln!("wrote {} method rows to {}", rows.len(), path);
        }
        None => {
            println!("{header}");
            for r in &rows {
                println!("{}", body(r));
            }
        }
    }
    Ok(())
}

/// Headerless numeric CSV; `labeled` marks a trailing integer label column.
fn load_csv_data(path: &str, labeled: bool) -> CliResult<SampleSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage_err(format!("cannot read data '{path}': {e}")))?;
    let mut dim = 0usize;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let ncols = fields.len();
        let want_dim = if labeled {
            ncols.saturating_sub(1)
        } else {
            ncols
        };
        if dim == 0 {
            if want_dim == 0 {
                return Err(usage_err(format!(
                    "{path}:{}: no feature columns",
                    lineno + 1
                )));
            }
            dim = want_dim;
        } else if want_dim != dim {
            return Err(usage_err(format!(
                "{path}:{}: expected {dim} feature columns, found {want_dim}",
                lineno + 1
            )));
        }
        for tok in &fields[..dim] {
            let v: f64 = tok.trim().parse().map_err(|_| {
                usage_err(format!(
                    "{path}:{}: cannot parse '{tok}' as a number",
                    lineno + 1
                ))
            })?;
            data.push(v);
        }
        if labeled {
            let tok = fields[dim].trim();
            let label: i64 = tok.parse().map_err(|_| {
                usage_err(format!("{path}:{}: cannot parse label '{tok}'", lineno + 1))
            })?;
            labels.push(label);
        }
    }
    let set = SampleSet::new(dim, data).map_err(CliError::from)?;
    if labeled {
        set.with_labels(labels).map_err(CliError::from)
    } else {
        Ok(set)
    }
}

//! Command-line entry point: backbone training, bank generation, the
//! equality and addition experiment suites, and the epsilon sweep, with
//! JSON/CSV artifacts and seed-keyed caching.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use plot::backbones::{train_gru_adder, train_heq_mlp, GruAdder, HeqMlp};
use plot::banks::{
    gen_adder_banks, gen_heq_banks, verify_adder_banks, verify_heq_banks, AdderBanks, HeqBanks,
};
use plot::numerics::rng::SeedStream;
use plot::pipeline::addition::{AdditionOutput, StageAOutput, ADDITION_DEFAULT_EPS};
use plot::pipeline::heq::HEQ_DEFAULT_EPS;
use plot::pipeline::{
    heq_eps_sweep, run_addition_plot, run_addition_variant, run_heq_das, run_heq_plot,
    AdditionConfig, AdditionVariant, ExperimentResult,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "plot", version, about = "Localization of causal variables via optimal transport")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a backbone and write its checkpoint.
    Train {
        /// Experiment: heq or addition.
        experiment: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden-state width (addition only).
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value = "plot-out")]
        out: PathBuf,
    },
    /// Generate counterfactual banks and print the verification report.
    Banks {
        /// Experiment: heq or addition.
        experiment: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "plot-out")]
        out: PathBuf,
    },
    /// Run an experiment suite over seeds and emit result tables.
    Run {
        /// Experiment: heq or addition.
        experiment: String,
        /// Comma-separated methods. heq: plot,das. addition:
        /// plot,nat,pca,das,full-das.
        #[arg(long, default_value = "")]
        methods: String,
        /// Seeds: a..b inclusive range or comma-separated list.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        /// Entropic regularization strength.
        #[arg(long)]
        eps: Option<f64>,
        /// Hidden-state width (addition only).
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value = "plot-out")]
        out: PathBuf,
        /// Worker threads for seed-level parallelism; 1 forces serial
        /// execution for timing studies, 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Train missing backbone checkpoints instead of failing.
        #[arg(long)]
        train_if_missing: bool,
    },
    /// Rerun the equality transport pipeline across regularization strengths.
    EpsSweep {
        #[arg(long, default_value = "0..0")]
        seeds: String,
        /// Comma-separated epsilon values.
        #[arg(long, default_value = "1,2,4,8,16")]
        eps: String,
        #[arg(long, default_value = "plot-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        train_if_missing: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { experiment, seed, d, out } => cmd_train(&experiment, seed, d, &out),
        Cmd::Banks { experiment, seed, out } => cmd_banks(&experiment, seed, &out),
        Cmd::Run { experiment, methods, seeds, eps, d, out, threads, train_if_missing } => {
            cmd_run(&experiment, &methods, &seeds, eps, d, &out, threads, train_if_missing)
        }
        Cmd::EpsSweep { seeds, eps, out, threads, train_if_missing } => {
            cmd_eps_sweep(&seeds, &eps, &out, threads, train_if_missing)
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing and provenance helpers
// ---------------------------------------------------------------------------

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().context("bad seed range start")?;
        let b: u64 = b.trim().parse().context("bad seed range end")?;
        if b < a {
            bail!("empty seed range '{s}'");
        }
        return Ok((a..=b).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| t.trim().parse().with_context(|| format!("bad seed '{t}'")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

fn config_hash(parts: &[String]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for &b in p.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(Serialize)]
struct Provenance {
    seed: u64,
    config_hash: String,
    version: &'static str,
}

fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os("PLOT_CACHE_DIR").map(PathBuf::from).unwrap_or_else(|| out.join("cache"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Checkpoints and banks (cached by experiment, seed, config hash)
// ---------------------------------------------------------------------------

fn heq_model(out: &Path, seed: u64, train_if_missing: bool) -> Result<HeqMlp> {
    let hash = config_hash(&["heq-mlp-v2".into()]);
    let path = cache_dir(out).join(format!("heq-mlp-seed{seed}-{hash}.json"));
    if path.exists() {
        return Ok(serde_json::from_str(&fs::read_to_string(&path)?)?);
    }
    if !train_if_missing {
        bail!("missing checkpoint {} (pass --train-if-missing or run `plot train heq`)", path.display());
    }
    let model = train_heq_mlp(&SeedStream::new(seed))?;
    write_json(&path, &model)?;
    Ok(model)
}

fn adder_model(out: &Path, seed: u64, d: usize, train_if_missing: bool) -> Result<GruAdder> {
    let hash = config_hash(&["gru-adder-v1".into(), format!("d={d}")]);
    let path = cache_dir(out).join(format!("adder-d{d}-seed{seed}-{hash}.json"));
    if path.exists() {
        return Ok(serde_json::from_str(&fs::read_to_string(&path)?)?);
    }
    if !train_if_missing {
        bail!("missing checkpoint {} (pass --train-if-missing or run `plot train addition`)", path.display());
    }
    let model = train_gru_adder(&SeedStream::new(seed), d)?;
    write_json(&path, &model)?;
    Ok(model)
}

fn heq_banks(seed: u64) -> Result<HeqBanks> {
    let banks = gen_heq_banks(seed)?;
    let report = verify_heq_banks(&banks);
    if !report.pass {
        bail!("equality bank verification failed: {:?}", report.violations);
    }
    Ok(banks)
}

fn adder_banks(seed: u64) -> Result<AdderBanks> {
    let banks = gen_adder_banks(seed)?;
    let report = verify_adder_banks(&banks);
    if !report.pass {
        bail!("addition bank verification failed: {:?}", report.violations);
    }
    Ok(banks)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_train(experiment: &str, seed: u64, d: usize, out: &Path) -> Result<()> {
    match experiment {
        "heq" => {
            let model = heq_model(out, seed, true)?;
            println!("val_acc={}", model.validation_accuracy);
        }
        "addition" => {
            let model = adder_model(out, seed, d, true)?;
            println!("table_acc={}", model.train_accuracy);
        }
        other => bail!("unknown experiment '{other}' (expected heq or addition)"),
    }
    Ok(())
}

fn cmd_banks(experiment: &str, seed: u64, out: &Path) -> Result<()> {
    match experiment {
        "heq" => {
            let banks = heq_banks(seed)?;
            write_json(&out.join(format!("heq-banks-seed{seed}.json")), &banks)?;
            let report = verify_heq_banks(&banks);
            println!("verify pass={} violations={:?}", report.pass, report.violations);
            println!(
                "sizes fit={} cal={} test={:?}",
                banks.fit.len(),
                banks.cal.len(),
                banks.test.iter().map(|b| b.pairs.len()).collect::<Vec<_>>()
            );
        }
        "addition" => {
            let banks = adder_banks(seed)?;
            write_json(&out.join(format!("adder-banks-seed{seed}.json")), &banks)?;
            let report = verify_adder_banks(&banks);
            println!("verify pass={} violations={:?}", report.pass, report.violations);
            println!(
                "sizes fit={} cal={} test={}",
                banks.fit.len(),
                banks.cal.len(),
                banks.test.len()
            );
        }
        other => bail!("unknown experiment '{other}' (expected heq or addition)"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SeedRunRecord {
    provenance: Provenance,
    results: Vec<ExperimentResult>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    experiment: &str,
    methods: &str,
    seeds: &str,
    eps: Option<f64>,
    d: usize,
    out: &Path,
    threads: usize,
    train_if_missing: bool,
) -> Result<()> {
    let seeds = parse_seeds(seeds)?;
    let methods = match (experiment, methods.is_empty()) {
        ("heq", true) => vec!["plot".to_string(), "das".to_string()],
        ("addition", true) => {
            vec!["nat".into(), "pca".into(), "das".into(), "full-das".into()]
        }
        (_, false) => parse_list(methods),
        (other, _) => bail!("unknown experiment '{other}'"),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;

    let hash = config_hash(&[
        experiment.to_string(),
        methods.join(","),
        format!("eps={eps:?}"),
        format!("d={d}"),
    ]);
    let runs: Vec<(u64, Result<SeedRunRecord>)> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| {
                let rec = match experiment {
                    "heq" => run_heq_seed(seed, &methods, eps, out, train_if_missing, &hash),
                    "addition" => {
                        run_addition_seed(seed, &methods, eps, d, out, train_if_missing, &hash)
                    }
                    other => Err(anyhow::anyhow!("unknown experiment '{other}'")),
                };
                (seed, rec)
            })
            .collect()
    });

    let mut ok = Vec::new();
    let mut failed = 0usize;
    for (seed, rec) in runs {
        match rec {
            Ok(r) => ok.push(r),
            Err(e) => {
                failed += 1;
                eprintln!("seed {seed} failed: {e:#}");
            }
        }
    }
    if !ok.is_empty() {
        let summary = summarize(&methods, &ok);
        let path = out.join(format!("{experiment}-summary-{hash}.csv"));
        write_text(&path, &summary)?;
        println!("{summary}");
        println!("wrote {}", path.display());
    }
    if failed > 0 {
        bail!("{failed} seed run(s) failed");
    }
    Ok(())
}

fn run_heq_seed(
    seed: u64,
    methods: &[String],
    eps: Option<f64>,
    out: &Path,
    train_if_missing: bool,
    hash: &str,
) -> Result<SeedRunRecord> {
    let model = heq_model(out, seed, train_if_missing)?;
    let banks = heq_banks(seed)?;
    let eps = eps.unwrap_or(HEQ_DEFAULT_EPS);
    let mut results = Vec::new();
    for m in methods {
        match m.as_str() {
            "plot" => {
                let run = run_heq_plot(&model, &banks, eps)?;
                write_text(
                    &out.join(format!("heq-seed{seed}-coupling.csv")),
                    &run.coupling.to_csv(),
                )?;
                write_text(
                    &out.join(format!("heq-seed{seed}-handles.csv")),
                    &handles_csv(&run.handles),
                )?;
                results.push(run.result);
            }
            "das" => {
                let run = run_heq_das(
                    &model,
                    &banks,
                    &SeedStream::new(seed),
                    plot::interventions::DAS_DEFAULT_LR,
                    plot::interventions::DAS_DEFAULT_MAX_EPOCHS,
                )?;
                results.push(run.result);
            }
            other => bail!("unknown heq method '{other}' (expected plot or das)"),
        }
    }
    let record = SeedRunRecord {
        provenance: Provenance { seed, config_hash: hash.to_string(), version: VERSION },
        results,
    };
    write_json(&out.join(format!("heq-seed{seed}-results.json")), &record)?;
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn run_addition_seed(
    seed: u64,
    methods: &[String],
    eps: Option<f64>,
    d: usize,
    out: &Path,
    train_if_missing: bool,
    hash: &str,
) -> Result<SeedRunRecord> {
    let model = adder_model(out, seed, d, train_if_missing)?;
    let banks = adder_banks(seed)?;
    let mut cfg = AdditionConfig::new(SeedStream::new(seed));
    cfg.eps = eps.unwrap_or(ADDITION_DEFAULT_EPS);
    let mut results = Vec::new();
    for m in methods {
        if m == "plot" {
            let stage_a = run_addition_plot(&model, &banks, cfg.eps)?;
            emit_stage_a(out, seed, d, &stage_a)?;
            results.push(stage_a.result);
            continue;
        }
        let variant = AdditionVariant::parse(m).map_err(|e| anyhow::anyhow!("{e}"))?;
        let AdditionOutput { result, stage_a } = run_addition_variant(&model, &banks, variant, &cfg)?;
        if let Some(sa) = stage_a {
            emit_stage_a(out, seed, d, &sa)?;
        }
        results.push(result);
    }
    let record = SeedRunRecord {
        provenance: Provenance { seed, config_hash: hash.to_string(), version: VERSION },
        results,
    };
    write_json(&out.join(format!("adder-d{d}-seed{seed}-results.json")), &record)?;
    Ok(record)
}

fn emit_stage_a(out: &Path, seed: u64, d: usize, stage_a: &StageAOutput) -> Result<()> {
    write_text(
        &out.join(format!("adder-d{d}-seed{seed}-coupling.csv")),
        &stage_a.coupling.to_csv(),
    )?;
    let ts = stage_a
        .timesteps
        .iter()
        .enumerate()
        .map(|(i, t)| format!("C{},{t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    write_text(&out.join(format!("adder-d{d}-seed{seed}-timesteps.csv")), &format!("carry,timestep\n{ts}\n"))
}

fn handles_csv(handles: &[plot::interventions::Handle]) -> String {
    let mut s = String::from("variable,site,weight,lambda\n");
    for h in handles {
        for (site, w) in h.sites.iter().zip(&h.weights) {
            s.push_str(&format!("{},{},{},{}\n", h.variable, site.label, w, h.lambda));
        }
    }
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean +/- sample std over seeds, one row per method, plus per-variable
/// sensitivity/invariance columns flattened into extra rows.
fn summarize(methods: &[String], runs: &[SeedRunRecord]) -> String {
    let mut s = String::from("method,metric,mean,std\n");
    for mi in 0..methods.len() {
        let per_seed: Vec<&ExperimentResult> = runs.iter().map(|r| &r.results[mi]).collect();
        let name = &per_seed[0].method;
        let accs: Vec<f64> = per_seed.iter().map(|r| r.average_exact).collect();
        let times: Vec<f64> = per_seed.iter().map(|r| r.runtime_seconds).collect();
        let (am, asd) = mean_std(&accs);
        let (tm, tsd) = mean_std(&times);
        s.push_str(&format!("{name},average_exact,{am:.4},{asd:.4}\n"));
        s.push_str(&format!("{name},runtime_seconds,{tm:.2},{tsd:.2}\n"));
        for vi in 0..per_seed[0].per_variable.len() {
            let var = &per_seed[0].per_variable[vi].variable;
            let sens: Vec<f64> = per_seed.iter().map(|r| r.per_variable[vi].sensitivity).collect();
            let inv: Vec<f64> = per_seed.iter().map(|r| r.per_variable[vi].invariance).collect();
            let (sm, ssd) = mean_std(&sens);
            let (im, isd) = mean_std(&inv);
            s.push_str(&format!("{name},{var}_sensitivity,{sm:.4},{ssd:.4}\n"));
            s.push_str(&format!("{name},{var}_invariance,{im:.4},{isd:.4}\n"));
        }
    }
    s
}

fn cmd_eps_sweep(
    seeds: &str,
    eps: &str,
    out: &Path,
    threads: usize,
    train_if_missing: bool,
) -> Result<()> {
    let seeds = parse_seeds(seeds)?;
    let eps_values: Vec<f64> = parse_list(eps)
        .iter()
        .map(|t| t.parse::<f64>().with_context(|| format!("bad eps '{t}'")))
        .collect::<Result<_>>()?;
    if eps_values.is_empty() {
        bail!("no eps values given");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let runs: Vec<(u64, Result<Vec<(f64, f64)>>)> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| {
                let run = (|| -> Result<Vec<(f64, f64)>> {
                    let model = heq_model(out, seed, train_if_missing)?;
                    let banks = heq_banks(seed)?;
                    Ok(heq_eps_sweep(&model, &banks, &eps_values)?)
                })();
                (seed, run)
            })
            .collect()
    });

    let mut s = String::from("eps,seed,average_exact\n");
    let mut failed = 0usize;
    for (seed, run) in &runs {
        match run {
            Ok(rows) => {
                for &(e, acc) in rows {
                    s.push_str(&format!("{e},{seed},{acc:.4}\n"));
                }
            }
            Err(err) => {
                failed += 1;
                eprintln!("seed {seed} failed: {err:#}");
            }
        }
    }
    let path = out.join("heq-eps-sweep.csv");
    write_text(&path, &s)?;
    println!("{s}");
    println!("wrote {}", path.display());
    if failed > 0 {
        bail!("{failed} seed run(s) failed");
    }
    Ok(())
}

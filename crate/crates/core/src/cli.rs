//! Command-line front end. `run` is the whole program minus process exit, so it can be tested.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{summarize, ExperimentTable};
use crate::error::{Error, Result};
use crate::estimators::{evaluate, EstimatorId, Observed};
use crate::oracle::{self, Design, Mechanism, ScienceTable, StrataPopulation};
use crate::simulate::{McRow, SimConfig};

#[derive(Debug, Parser)]
#[command(name = "blockvar", version, about = "Variance estimation for blocked and matched-pairs experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CompareFramework {
    Finite,
    M1,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the treatment effect and its variance from an experiment CSV.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated estimator ids.
        #[arg(long)]
        estimator: String,
        /// Normal-approximation confidence level, e.g. 0.95.
        #[arg(long)]
        ci: Option<f64>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run a Monte Carlo study described by a JSON config and write a results CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to BLOCKVAR_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare the variance of blocked and completely randomized designs.
    Compare {
        #[arg(long, value_enum)]
        framework: CompareFramework,
        #[arg(long, conflicts_with = "strata")]
        science: Option<PathBuf>,
        #[arg(long)]
        strata: Option<PathBuf>,
        /// Treated proportion of the complete design (m1).
        #[arg(long)]
        p_cr: Option<f64>,
        /// Common treated proportion per block (finite).
        #[arg(long, conflicts_with = "design")]
        p: Option<f64>,
        /// CSV `block,n_t` with treated counts per block (finite).
        #[arg(long)]
        design: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{e}");
            return code;
        }
    };
    let result = match cli.command {
        Command::Analyze { input, estimator, ci, format } => analyze(&input, &estimator, ci, format, out, err),
        Command::Simulate { config, out: path, seed, threads } => simulate(&config, &path, seed, threads, err),
        Command::Compare { framework, science, strata, p_cr, p, design } => {
            compare(framework, science.as_deref(), strata.as_deref(), p_cr, p, design.as_deref(), out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Rounds to 12 significant digits; this is the precision of every number the CLI writes.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

fn num(x: f64) -> Value {
    json!(round12(x))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn analyze(
    input: &Path,
    estimators: &str,
    ci: Option<f64>,
    format: Format,
    out: &mut impl Write,
    err: &mut impl Write,
) -> Result<i32> {
    let ids = EstimatorId::parse_list(estimators)?;
    let z = match ci {
        None => None,
        Some(level) if level > 0.0 && level < 1.0 => Some(Normal::standard().inverse_cdf((1.0 + level) / 2.0)),
        Some(_) => return Err(Error::validation("--ci must lie strictly between 0 and 1")),
    };
    let table = ExperimentTable::from_reader(open(input)?)?;
    let summary = summarize(&table)?;
    let obs = Observed::from_table(&table);
    let mut entries = Map::new();
    let mut succeeded = 0;
    let mut text_rows = Vec::new();
    for id in ids {
        match evaluate(id, &obs) {
            Ok(r) => {
                succeeded += 1;
                let interval = z.map(|z| [r.estimate - z * r.se, r.estimate + z * r.se]);
                text_rows.push(format!(
                    "{:<10} {:>14} {:>14} {:>14}{}",
                    id.as_str(),
                    round12(r.estimate),
                    round12(r.variance),
                    round12(r.se),
                    interval.map(|[lo, hi]| format!("  [{}, {}]", round12(lo), round12(hi))).unwrap_or_default()
                ));
                for w in &r.warnings {
                    text_rows.push(format!("  warning: {w}"));
                }
                let mut fields = json!({ "estimate": num(r.estimate), "variance": num(r.variance), "se": num(r.se) });
                if let Some([lo, hi]) = interval {
                    fields["ci"] = json!([round12(lo), round12(hi)]);
                }
                fields["warnings"] = json!(r.warnings);
                entries.insert(id.to_string(), fields);
            }
            Err(e) => {
                text_rows.push(format!("{:<10} error: {e}", id.as_str()));
                entries.insert(id.to_string(), json!({ "error": e.to_string() }));
            }
        }
    }
    let blocks: Vec<Value> = summary
        .blocks
        .iter()
        .map(|b| {
            json!({
                "block": b.block_id,
                "n_k": b.n_k,
                "n_t": b.n_tk,
                "n_c": b.n_ck,
                "mean_t": round12(b.mean_t),
                "mean_c": round12(b.mean_c),
                "s2_t": b.s2_t.map(round12),
                "s2_c": b.s2_c.map(round12),
                "tau_hat": round12(b.tau_hat),
                "class": b.class.to_string(),
            })
        })
        .collect();
    let estimate = crate::estimators::tau_hat_blk(&summary);
    match format {
        Format::Json => {
            let report = json!({ "estimate": num(estimate), "per_estimator": entries, "block_table": blocks });
            serde_json::to_writer_pretty(&mut *out, &report).map_err(std::io::Error::from)?;
            writeln!(out)?;
        }
        Format::Text => {
            writeln!(out, "blocked estimate: {}", round12(estimate))?;
            writeln!(out, "blocks: {} (units {}, in small blocks {})", summary.k(), summary.n, summary.n_small)?;
            writeln!(out, "{:<10} {:>14} {:>14} {:>14}", "estimator", "estimate", "variance", "se")?;
            for row in text_rows {
                writeln!(out, "{row}")?;
            }
        }
    }
    if succeeded == 0 {
        writeln!(err, "error: every requested estimator failed")?;
        return Ok(3);
    }
    Ok(0)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("BLOCKVAR_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("BLOCKVAR_THREADS must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

/// Writes the results CSV for a study.
pub fn write_results_csv(rows: &[McRow<f64>], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["estimator", "mean_tau", "var_tau", "mean_vhat", "rel_bias", "var_vhat", "mc_se"])
        .map_err(csv_err)?;
    for r in rows {
        let f = |x: f64| round12(x).to_string();
        w.write_record([
            r.estimator.to_string(),
            f(r.mean_tau),
            f(r.var_tau),
            f(r.mean_vhat),
            r.rel_bias.map(f).unwrap_or_else(|| "NA".into()),
            f(r.var_vhat),
            f(r.mc_se),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>, err: &mut impl Write) -> Result<i32> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", config.display()))))?;
    let mut cfg = SimConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = thread_count(threads)? {
        if t == 0 {
            return Err(Error::validation("--threads must be at least 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    let result = pool.install(|| cfg.run())?;
    for w in &result.warnings {
        writeln!(err, "warning: {w}")?;
    }
    let file = File::create(out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out.display()))))?;
    write_results_csv(&result.rows, std::io::BufWriter::new(file))?;
    Ok(if result.rows.is_empty() { 3 } else { 0 })
}

fn compare(
    framework: CompareFramework,
    science: Option<&Path>,
    strata: Option<&Path>,
    p_cr: Option<f64>,
    p: Option<f64>,
    design: Option<&Path>,
    out: &mut impl Write,
) -> Result<i32> {
    let report = match framework {
        CompareFramework::Finite => {
            if strata.is_some() || p_cr.is_some() {
                return Err(Error::validation("the finite framework takes --science with --p or --design"));
            }
            let path = science.ok_or_else(|| Error::validation("the finite framework needs --science"))?;
            let sci = ScienceTable::from_reader(open(path)?)?;
            let design = match (p, design) {
                (Some(p), None) => Design::with_proportion(&sci, p)?,
                (None, Some(d)) => Design::from_csv_reader(open(d)?, &sci)?,
                _ => return Err(Error::validation("the finite framework needs --p or --design")),
            };
            compare_finite(&sci, &design)?
        }
        CompareFramework::M1 => {
            if science.is_some() || p.is_some() || design.is_some() {
                return Err(Error::validation("the m1 framework takes --strata and optionally --p-cr"));
            }
            let path = strata.ok_or_else(|| Error::validation("the m1 framework needs --strata"))?;
            let pop = StrataPopulation::from_json(&std::fs::read_to_string(path)?)?;
            compare_m1(&pop, p_cr)?
        }
    };
    serde_json::to_writer_pretty(&mut *out, &report).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(0)
}

fn compare_finite(sci: &ScienceTable<f64>, design: &Design) -> Result<Value> {
    let var_cr = oracle::true_var_finite(sci, design, Mechanism::Complete)?;
    let var_blk = oracle::true_var_finite(sci, design, Mechanism::Blocked)?;
    let equal = design.p_k_equal();
    let (difference, decomposition) = if equal {
        let c = oracle::compare_designs_finite(sci, design)?;
        (c.difference, json!({ "between": round12(c.between), "within": round12(c.within) }))
    } else {
        (var_cr - var_blk, Value::Null)
    };
    let bias = if equal { num(oracle::ignore_blocking_bias_finite(sci, design)?) } else { Value::Null };
    Ok(json!({
        "framework": "finite",
        "p_k_equal": equal,
        "var_cr": num(var_cr),
        "var_blk": num(var_blk),
        "difference": num(difference),
        "decomposition": decomposition,
        "ignore_blocking_bias": bias,
    }))
}

fn compare_m1(pop: &StrataPopulation<f64>, p_cr: Option<f64>) -> Result<Value> {
    let n = pop.n();
    let n_t_cr = match p_cr {
        Some(p) => {
            let x = p * n as f64;
            if !(p > 0.0 && p < 1.0) || (x - x.round()).abs() > 1e-9 {
                return Err(Error::validation("--p-cr must lie in (0, 1) with p_cr * n whole"));
            }
            x.round() as usize
        }
        None if pop.p_k_equal() => pop.n_t(),
        None => return Err(Error::validation("treated proportions differ across strata; pass --p-cr")),
    };
    let c = oracle::compare_designs_unequal(pop, n_t_cr)?;
    let equal = pop.p_k_equal() && n_t_cr * pop.strata()[0].n_k == pop.strata()[0].n_tk * n;
    let difference = if equal { oracle::compare_designs_m1(pop)? } else { c.difference };
    let bias = if pop.p_k_equal() { num(oracle::ignore_blocking_bias_m1(pop)?) } else { Value::Null };
    Ok(json!({
        "framework": "m1",
        "p_k_equal": pop.p_k_equal(),
        "p_cr": num(n_t_cr as f64 / n as f64),
        "var_cr": num(oracle::true_var_cr_m1(pop, n_t_cr)?),
        "var_blk": num(oracle::true_var_m1(pop)),
        "difference": num(difference),
        "difference_nonnegative": difference >= 0.0,
        "decomposition": { "between": round12(c.between), "proportion_penalty": round12(c.proportion_penalty) },
        "srs_vs_m1_gap": num(oracle::srs_vs_m1_gap(pop)),
        "ignore_blocking_bias": bias,
    }))
}

//! Command-line front end: `simulate` writes reference datasets, `discover`
//! runs the full pipeline from a config file, and `summarize` re-reads a
//! chain file at a new inclusion threshold without re-running the MCMC.
//!
//! Exit codes are stable: 0 success, 1 runtime failure, 2 usage or config
//! error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::basis::{DerivSpec, OperatorSpec};
use crate::config::{ConfigError, RunConfig};
use crate::diagnostics::{equation_summary, DiscoverySummary};
use crate::gridtensor::{AxisSpec, GridTensorFile};
use crate::sampler::{run_chain_with_plan, ChainSamples, SamplerError, SweepRecord};
use crate::simulate::{
    add_noise, apply_missingness, simulate_burgers, simulate_heat2d, simulate_reaction_diffusion,
    BurgersSpec, HeatSpec, MissingSpec, NoiseSpec, ReactionDiffusionSpec, SimOutput,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PDEDISCOVER_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pdediscover", version, about = "Discover dynamic equations from gridded data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SystemArg {
    Burgers,
    Heat,
    ReactionDiffusion,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a reference dataset, optionally with noise and missing data.
    Simulate {
        system: SystemArg,
        /// Noise fraction of the process standard deviation (e.g. 0.02).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Missing-at-random fraction in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: $PDEDISCOVER_OUT or the working dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run discovery as described by a config file.
    Discover { config: PathBuf },
    /// Re-summarize an existing chain file at a new threshold.
    Summarize {
        chain: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { system, noise, missing, seed, out } => {
            cmd_simulate(system, noise, missing, seed, &default_out_dir(out)).map(|files| {
                for f in files {
                    println!("wrote {}", f.display());
                }
            })
        }
        Command::Discover { config } => cmd_discover(&config).map(|outputs| {
            for eq in &outputs.summary.equations {
                println!("{eq}");
            }
            for w in &outputs.summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("outputs in {}", outputs.out_dir.display());
        }),
        Command::Summarize { chain, threshold, out } => {
            let out_dir = out.unwrap_or_else(|| {
                chain.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
            });
            cmd_summarize(&chain, threshold, &out_dir).map(|summary| {
                for eq in &summary.equations {
                    println!("{eq}");
                }
            })
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn pct(v: f64) -> String {
    format!("{}", v * 100.0)
}

/// Simulate a system and write the clean dataset plus noisy and masked
/// variants when requested. Returns the written paths.
pub fn cmd_simulate(
    system: SystemArg,
    noise: f64,
    missing: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(CliError::Usage(format!("noise fraction {noise} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&missing) {
        return Err(CliError::Usage(format!("missing fraction {missing} outside [0, 1)")));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let (name, sim): (&str, SimOutput) = match system {
        SystemArg::Burgers => (
            "burgers",
            simulate_burgers(&BurgersSpec::default())
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        ),
        SystemArg::Heat => (
            "heat",
            simulate_heat2d(&HeatSpec::default()).map_err(|e| CliError::Runtime(e.to_string()))?,
        ),
        SystemArg::ReactionDiffusion => (
            "reaction_diffusion",
            simulate_reaction_diffusion(&ReactionDiffusionSpec::default())
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        ),
    };
    println!("true equation: {}", sim.equation);

    let axis = if sim.ys.is_empty() {
        AxisSpec::OneD { xs: sim.xs.clone() }
    } else {
        AxisSpec::TwoD { xs: sim.xs.clone(), ys: sim.ys.clone() }
    };
    let io_err = |e: crate::gridtensor::GridTensorError| CliError::Runtime(e.to_string());
    let mut written = Vec::new();

    let clean_path = out_dir.join(format!("{name}_clean.gt"));
    GridTensorFile::complete(axis.clone(), sim.times.clone(), sim.tensor.clone())
        .map_err(io_err)?
        .write(&clean_path)
        .map_err(io_err)?;
    written.push(clean_path);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise > 0.0 || missing > 0.0 {
        let noisy = add_noise(&sim.tensor, &NoiseSpec::fraction(noise), &mut rng);
        if noise > 0.0 {
            let noisy_path = out_dir.join(format!("{name}_noise{}pct.gt", pct(noise)));
            GridTensorFile::complete(axis.clone(), sim.times.clone(), noisy.clone())
                .map_err(io_err)?
                .write(&noisy_path)
                .map_err(io_err)?;
            written.push(noisy_path);
        }
        if missing > 0.0 {
            let obs = apply_missingness(&noisy, &MissingSpec { fraction: missing }, &mut rng)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let masked_path = out_dir.join(format!(
                "{name}_noise{}pct_missing{}pct.gt",
                pct(noise),
                pct(missing)
            ));
            GridTensorFile::from_observations(axis, sim.times.clone(), &obs)
                .map_err(io_err)?
                .write(&masked_path)
                .map_err(io_err)?;
            written.push(masked_path);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// chain file format
// ---------------------------------------------------------------------------

fn encode_operator(g: &OperatorSpec) -> String {
    g.terms
        .iter()
        .map(|(c, d)| format!("{c}:{}:{}", d.dx, d.dy))
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_operator(s: &str) -> Result<OperatorSpec, CliError> {
    let mut terms = Vec::new();
    for piece in s.split(',') {
        let parts: Vec<&str> = piece.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::Runtime(format!("malformed operator entry `{piece}`")));
        }
        let coeff: f64 =
            parts[0].parse().map_err(|_| CliError::Runtime("bad operator coefficient".into()))?;
        let dx: usize =
            parts[1].parse().map_err(|_| CliError::Runtime("bad operator dx".into()))?;
        let dy: usize =
            parts[2].parse().map_err(|_| CliError::Runtime("bad operator dy".into()))?;
        terms.push((coeff, DerivSpec::new(dx, dy, 0)));
    }
    Ok(OperatorSpec { terms })
}

/// Write the chain as long-format CSV with a metadata comment line.
pub fn write_chain_csv(
    path: &Path,
    chain: &ChainSamples,
    g: &OperatorSpec,
    j_order: usize,
) -> Result<(), CliError> {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# pdediscover chain v1 burn_in={} j={} op={}",
        chain.burn_in,
        j_order,
        encode_operator(g)
    );
    let _ = writeln!(text, "iteration,parameter,component,term,value");
    let d_count = chain.n_terms;
    for (iter, rec) in chain.records.iter().enumerate() {
        for (n, comp) in chain.component_names.iter().enumerate() {
            for (d, term) in chain.term_names.iter().enumerate() {
                let _ = writeln!(text, "{iter},m,{comp},{term},{}", rec.m[n * d_count + d]);
            }
        }
        for (n, comp) in chain.component_names.iter().enumerate() {
            for (d, term) in chain.term_names.iter().enumerate() {
                let _ = writeln!(
                    text,
                    "{iter},gamma,{comp},{term},{}",
                    u8::from(rec.gamma[n * d_count + d])
                );
            }
        }
        for (n, comp) in chain.component_names.iter().enumerate() {
            let _ = writeln!(text, "{iter},pi,{comp},,{}", rec.pi[n]);
            let _ = writeln!(text, "{iter},sigma2_u,{comp},,{}", rec.sigma2_u[n]);
            let _ = writeln!(text, "{iter},sigma2_v,{comp},,{}", rec.sigma2_v[n]);
        }
    }
    for (iter, a) in &chain.a_draws {
        for (k, v) in a.iter().enumerate() {
            let _ = writeln!(text, "{iter},a,,{k},{v}");
        }
    }
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Parse a chain CSV back, together with the operator needed to re-render
/// equations.
pub fn read_chain_csv(path: &Path) -> Result<(ChainSamples, OperatorSpec, usize), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| CliError::Runtime("empty chain file".into()))?;
    if !meta.starts_with("# pdediscover chain v1") {
        return Err(CliError::Runtime("missing chain metadata line".into()));
    }
    let mut burn_in = None;
    let mut j_order = 1usize;
    let mut operator = OperatorSpec::identity();
    for piece in meta.trim_start_matches('#').split_whitespace() {
        if let Some(v) = piece.strip_prefix("burn_in=") {
            burn_in =
                Some(v.parse().map_err(|_| CliError::Runtime("bad burn_in in metadata".into()))?);
        } else if let Some(v) = piece.strip_prefix("j=") {
            j_order = v.parse().map_err(|_| CliError::Runtime("bad j in metadata".into()))?;
        } else if let Some(v) = piece.strip_prefix("op=") {
            operator = decode_operator(v)?;
        }
    }
    let burn_in = burn_in.ok_or_else(|| CliError::Runtime("metadata lacks burn_in".into()))?;
    let header = lines.next().ok_or_else(|| CliError::Runtime("missing CSV header".into()))?;
    if header != "iteration,parameter,component,term,value" {
        return Err(CliError::Runtime("unexpected CSV header".into()));
    }

    let mut component_names: Vec<String> = Vec::new();
    let mut term_names: Vec<String> = Vec::new();
    struct Row {
        iter: usize,
        param: u8, // 0 = m, 1 = gamma, 2 = pi, 3 = s2u, 4 = s2v
        comp: String,
        term: String,
        value: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut a_draws: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(5, ',');
        let bad = || CliError::Runtime(format!("malformed chain row {}", lineno + 3));
        let iter: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let param = parts.next().ok_or_else(bad)?;
        let comp = parts.next().ok_or_else(bad)?.to_string();
        let term = parts.next().ok_or_else(bad)?.to_string();
        let value: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let code = match param {
            "m" => 0,
            "gamma" => 1,
            "pi" => 2,
            "sigma2_u" => 3,
            "sigma2_v" => 4,
            "a" => {
                match a_draws.last_mut() {
                    Some((it, vals)) if *it == iter => vals.push(value),
                    _ => a_draws.push((iter, vec![value])),
                }
                continue;
            }
            _ => return Err(bad()),
        };
        if code == 0 {
            if !component_names.contains(&comp) {
                component_names.push(comp.clone());
            }
            if !term_names.contains(&term) {
                term_names.push(term.clone());
            }
        }
        rows.push(Row { iter, param: code, comp, term, value });
    }
    if component_names.is_empty() || term_names.is_empty() {
        return Err(CliError::Runtime("chain file holds no coefficient rows".into()));
    }
    let n_count = component_names.len();
    let d_count = term_names.len();
    let n_iters = rows.iter().map(|r| r.iter + 1).max().unwrap_or(0);
    let mut records = vec![
        SweepRecord {
            m: vec![0.0; n_count * d_count],
            gamma: vec![false; n_count * d_count],
            pi: vec![0.0; n_count],
            sigma2_u: vec![0.0; n_count],
            sigma2_v: vec![0.0; n_count],
        };
        n_iters
    ];
    let comp_index = |name: &str| component_names.iter().position(|c| c == name);
    let term_index = |name: &str| term_names.iter().position(|t| t == name);
    for row in rows {
        let rec = &mut records[row.iter];
        let n = comp_index(&row.comp)
            .ok_or_else(|| CliError::Runtime(format!("unknown component `{}`", row.comp)))?;
        match row.param {
            0 | 1 => {
                let d = term_index(&row.term)
                    .ok_or_else(|| CliError::Runtime(format!("unknown term `{}`", row.term)))?;
                if row.param == 0 {
                    rec.m[n * d_count + d] = row.value;
                } else {
                    rec.gamma[n * d_count + d] = row.value != 0.0;
                }
            }
            2 => rec.pi[n] = row.value,
            3 => rec.sigma2_u[n] = row.value,
            4 => rec.sigma2_v[n] = row.value,
            _ => unreachable!(),
        }
    }
    Ok((
        ChainSamples {
            n_components: n_count,
            n_terms: d_count,
            burn_in,
            component_names,
            term_names,
            records,
            a_draws,
        },
        operator,
        j_order,
    ))
}

// ---------------------------------------------------------------------------
// summary and manifest writers
// ---------------------------------------------------------------------------

fn write_summary_files(
    out_dir: &Path,
    summary: &DiscoverySummary,
) -> Result<(), CliError> {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut csv = String::from(
        "component,term,inclusion_probability,mean,hpd_lower,hpd_upper,included\n",
    );
    for t in &summary.terms {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            t.component_name,
            t.term_name,
            t.inclusion,
            fmt_opt(t.mean),
            fmt_opt(t.hpd_lower),
            fmt_opt(t.hpd_upper),
            u8::from(t.included)
        );
    }
    fs::write(out_dir.join("summary.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("cannot write summary.csv: {e}")))?;

    let mut eq = String::new();
    for line in &summary.equations {
        let _ = writeln!(eq, "{line}");
    }
    for w in &summary.warnings {
        let _ = writeln!(eq, "# warning: {w}");
    }
    fs::write(out_dir.join("equation.txt"), eq)
        .map_err(|e| CliError::Runtime(format!("cannot write equation.txt: {e}")))
}

/// Everything `discover` produced, for callers and tests.
pub struct DiscoverOutputs {
    pub summary: DiscoverySummary,
    pub chain: ChainSamples,
    pub out_dir: PathBuf,
}

/// Full pipeline: resolve the config, run diagnostics and the chain, then
/// write chain.csv, summary.csv, equation.txt, and manifest.toml.
pub fn cmd_discover(config_path: &Path) -> Result<DiscoverOutputs, CliError> {
    let (cfg, text) = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let run = cfg.resolve(base, text)?;

    let obs = run.dataset.observation_set().map_err(|e| CliError::Usage(e.to_string()))?;
    let (chain, plan) = run_chain_with_plan(
        &obs,
        &run.evaluations,
        &run.library,
        &run.covariates,
        &run.model,
    )?;
    let summary = equation_summary(&chain, &run.operator, run.j_order, run.model.inclusion_threshold)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    fs::create_dir_all(&run.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", run.out_dir.display())))?;
    write_chain_csv(&run.out_dir.join("chain.csv"), &chain, &run.operator, run.j_order)?;
    write_summary_files(&run.out_dir, &summary)?;

    let config_hash = hex_digest(run.config_text.as_bytes());
    let dataset_bytes = fs::read(&run.dataset_path)
        .map_err(|e| CliError::Runtime(format!("cannot hash dataset: {e}")))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "seed = {}", run.model.seed);
    let _ = writeln!(manifest, "iterations = {}", run.model.iterations);
    let _ = writeln!(manifest, "burn_in = {}", run.model.burn_in);
    let _ = writeln!(manifest, "inclusion_threshold = {}", run.model.inclusion_threshold);
    let _ = writeln!(manifest, "config_sha256 = \"{config_hash}\"");
    let _ = writeln!(manifest, "dataset_sha256 = \"{}\"", hex_digest(&dataset_bytes));
    let _ = writeln!(manifest, "beta_rss = {}", plan.beta);
    let _ = writeln!(manifest, "subsample = {}", plan.size);
    if let Some(kappa) = plan.condition_number {
        let _ = writeln!(manifest, "condition_number = {kappa}");
    }
    fs::write(run.out_dir.join("manifest.toml"), manifest)
        .map_err(|e| CliError::Runtime(format!("cannot write manifest.toml: {e}")))?;

    log::info!(
        "discovery finished: beta = {}, subsample = {}, outputs in {}",
        plan.beta,
        plan.size,
        run.out_dir.display()
    );
    Ok(DiscoverOutputs { summary, chain, out_dir: run.out_dir })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Re-summarize an existing chain at a new threshold.
pub fn cmd_summarize(
    chain_path: &Path,
    threshold: f64,
    out_dir: &Path,
) -> Result<DiscoverySummary, CliError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let (chain, operator, j_order) = read_chain_csv(chain_path)?;
    let summary = equation_summary(&chain, &operator, j_order, threshold)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_summary_files(out_dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SweepRecord;

    fn small_chain() -> ChainSamples {
        let mut records = Vec::new();
        for i in 0..6usize {
            let on = i % 3 != 0;
            records.push(SweepRecord {
                m: vec![if on { -0.9 - 0.01 * i as f64 } else { 0.0 }, 0.0],
                gamma: vec![on, false],
                pi: vec![0.4 + 0.01 * i as f64],
                sigma2_u: vec![0.01],
                sigma2_v: vec![0.02],
            });
        }
        ChainSamples {
            n_components: 1,
            n_terms: 2,
            burn_in: 2,
            component_names: vec!["u".into()],
            term_names: vec!["u*u_x".into(), "u_xx".into()],
            records,
            a_draws: vec![(0, vec![0.5, -0.25])],
        }
    }

    #[test]
    fn chain_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        let chain = small_chain();
        write_chain_csv(&path, &chain, &OperatorSpec::laplacian(), 1).unwrap();
        let (back, op, j) = read_chain_csv(&path).unwrap();
        assert_eq!(back, chain);
        assert_eq!(op, OperatorSpec::laplacian());
        assert_eq!(j, 1);
    }

    #[test]
    fn summarize_round_trip_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        write_chain_csv(&path, &small_chain(), &OperatorSpec::identity(), 1).unwrap();
        let s = cmd_summarize(&path, 0.5, dir.path()).unwrap();
        // Post burn-in: iterations 2..6, gamma on for 3 of 4.
        assert!(s.equations[0].starts_with("u_t = -0.9"));
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("equation.txt").exists());
        assert!(cmd_summarize(&path, 1.5, dir.path()).is_err());

        let s2 = cmd_summarize(&path, 0.9, dir.path()).unwrap();
        assert_eq!(s2.equations[0], "u_t = 0");
    }

    #[test]
    fn malformed_chain_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        fs::write(&path, "not a chain\n").unwrap();
        match cmd_summarize(&path, 0.5, dir.path()) {
            Err(e @ CliError::Runtime(_)) => assert_eq!(e.exit_code(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn simulate_writes_reproducible_files() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let files_a = cmd_simulate(SystemArg::Burgers, 0.02, 0.05, 7, &out_a).unwrap();
        let files_b = cmd_simulate(SystemArg::Burgers, 0.02, 0.05, 7, &out_b).unwrap();
        assert_eq!(files_a.len(), 3);
        for (a, b) in files_a.iter().zip(&files_b) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
        }
        // Masked variant really has ~5% missing.
        let masked = GridTensorFile::read(&files_a[2]).unwrap();
        let missing = masked.mask.iter().filter(|m| !**m).count();
        let share = missing as f64 / masked.mask.len() as f64;
        assert!((share - 0.05).abs() < 0.01, "missing share {share}");
        assert!(cmd_simulate(SystemArg::Burgers, 2.0, 0.0, 1, &out_a).is_err());
    }
}

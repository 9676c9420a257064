//! `xva` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xva_core::config::{CachePolicy, RunConfig};
use xva_core::pipeline::{run, weighted_terminal_estimate, RunArtifacts, Stage};
use xva_core::report::{build_report, write_manifest, write_outputs};
use xva_core::stats::combined_se;
use xva_core::{Result, XvaError};

#[derive(Parser, Debug)]
#[command(name = "xva", version, about = "Monte Carlo xVA engine with locally risk-minimizing hedging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `mc.n_paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Overrides `grid.n_steps`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Overrides `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Neither read nor write the stage cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// DVA with the literal `(1 − R^C)` factor.
    #[arg(long, global = true)]
    strict_paper: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate scenarios (assets, density, intensities, defaults).
    Simulate,
    /// Clean value and close-out inputs.
    CleanValue,
    /// Solve the backward equation.
    Solve,
    /// Hedging strategy, cost process and decomposition checks.
    Hedge,
    /// Valuation adjustments.
    Xva,
    /// Every stage and every output.
    All,
    /// Every stage plus the invariant suite; exit 4 if the decomposition gap fails.
    Diagnose,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| XvaError::config("--config", "a configuration file is required"))?;
    let mut cfg = RunConfig::from_path(path).map_err(|e| match e {
        XvaError::Io(io) => XvaError::config("--config", format!("{}: {io}", path.display())),
        other => other,
    })?;
    if let Some(s) = cli.seed {
        cfg.mc.seed = s;
    }
    if let Some(n) = cli.paths {
        cfg.mc.n_paths = n;
    }
    if let Some(n) = cli.steps {
        cfg.grid.n_steps = n;
    }
    if let Some(o) = &cli.out {
        cfg.run.output_dir = o.clone();
    }
    if cli.no_cache {
        cfg.run.cache_policy = CachePolicy::Off;
    }
    if cli.strict_paper {
        cfg.xva.strict_paper = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn invariant_suite(art: &RunArtifacts) -> Vec<Check> {
    let mut out = Vec::new();
    let mut add = |name, pass, detail: String| out.push(Check { name, pass, detail });
    let sc = &art.scenarios;
    let (cs, ss, hs, xs) = match (&art.clean, &art.solve, &art.hedge, &art.xva) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return out,
    };
    let scale = art.config.contract_spec().notional_scale();
    add("terminal identity", ss.terminal_gap == 0.0, format!("max gap {:e}", ss.terminal_gap));
    let r = &hs.checks;
    add(
        "funding position reconstruction",
        r.psi_f_reconstruction_max <= 1e-9 * scale,
        format!("max {:e}", r.psi_f_reconstruction_max),
    );
    add("repo constraint", r.repo_constraint_max <= 1e-9 * scale, format!("max {:e}", r.repo_constraint_max));
    add("zero-achieving", r.zero_achieving_max <= 1e-9 * scale, format!("max {:e}", r.zero_achieving_max));
    add(
        "mean-variance tradeoff bound",
        r.tradeoff_violations == 0,
        format!("max {:.6} ≤ {:.6}, {} violations", r.tradeoff_max, r.tradeoff_bound, r.tradeoff_violations),
    );
    let failed = |v: &[xva_core::hedging::NodeTest]| v.iter().filter(|t| !t.pass).count();
    add(
        "cost martingale (3 SE per node)",
        r.martingale_pass,
        format!("{} of {} nodes outside", failed(&r.martingale), r.martingale.len()),
    );
    add(
        "cost orthogonality (3 SE per node)",
        r.orthogonality_pass,
        format!("{} of {} tests outside", failed(&r.orthogonality), r.orthogonality.len()),
    );
    add(
        "FS residual relative L2 < 5%",
        r.residual.relative_l2 < 0.05,
        format!("{:.4}", r.residual.relative_l2),
    );
    let (v, w) = (cs.clean.v0, cs.clean.v0_weighted);
    let se = combined_se(&[v.std_error, w.std_error]);
    add(
        "clean value: drift-shifted vs density-weighted",
        (v.value - w.value).abs() <= 3.0 * se,
        format!("{:.6} vs {:.6} (3 SE = {:.2e})", v.value, w.value, 3.0 * se),
    );
    if !ss.driver.stochastic_intensity && ss.driver.lambda_sup == (0.0, 0.0) {
        let d = weighted_terminal_estimate(sc, ss);
        let se = combined_se(&[d.std_error, ss.solution.y0.std_error]);
        add(
            "linear BSDE equivalence",
            (d.value - ss.solution.y0.value).abs() <= 3.0 * se,
            format!("{:.6} vs {:.6}", ss.solution.y0.value, d.value),
        );
    }
    add(
        "CVA, DVA nonnegative",
        xs.cva_dva.cva.value >= 0.0 && xs.cva_dva.dva.value >= 0.0,
        format!("{:.6}, {:.6}", xs.cva_dva.cva.value, xs.cva_dva.dva.value),
    );
    add(
        "FVA fixed point converged",
        xs.fva.converged,
        format!("{} iterations", xs.fva.iterations),
    );
    add(
        "decomposition identity",
        xs.decomposition.pass,
        format!("gap {:.3e}, tolerance {:.3e}", xs.decomposition.gap.value, xs.decomposition.tolerance),
    );
    out
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load(cli)?;
    let until = match cli.command {
        Command::Simulate => Stage::Simulate,
        Command::CleanValue => Stage::CleanValue,
        Command::Solve => Stage::Solve,
        Command::Hedge => Stage::Hedge,
        Command::Xva | Command::All | Command::Diagnose => Stage::Xva,
    };
    let dir = cfg.run.output_dir.clone();
    let cache = (cfg.run.cache_policy != CachePolicy::Off).then_some(dir.as_path());
    let art = run(&cfg, until, cache)?;
    let files = write_outputs(&dir, &art)?;
    write_manifest(&dir, &art, &files)?;
    for w in &art.warnings {
        eprintln!("warning: {w}");
    }
    let report = build_report(&art);
    for m in &report.metrics {
        println!("{:<26} {:>16.8} ± {:.2e}", m.metric, m.estimate, m.std_error);
    }
    for (stage, h) in &art.cache_hashes {
        println!("cache {stage}: {h}");
    }
    if let Command::Diagnose = cli.command {
        let checks = invariant_suite(&art);
        let mut decomposition_ok = true;
        for c in &checks {
            println!("{} {:<48} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            if c.name == "decomposition identity" && !c.pass {
                decomposition_ok = false;
            }
        }
        if !decomposition_ok {
            return Ok(4);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

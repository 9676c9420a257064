//! Reports, diagnostics, manifest and plot-ready CSV files.
//!
//! `report.json`, `diagnostics.json` and every CSV depend only on the
//! configuration and seed; wall-clock timings go to `manifest.json` only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bsde::{node_means, StepDiagnostics};
use crate::error::Result;
use crate::hedging::FsDiagnostics;
use crate::market::validate_market;
use crate::pipeline::{RunArtifacts, Stage};
use crate::regression::FitDiagnostics;
use crate::stats::{mean, Estimate};
use crate::xva::survival_weighted_intensity;

/// One reported quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// Point estimates at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvaReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub stage: Stage,
    pub mode: String,
    pub metrics: Vec<Metric>,
    pub decomposition_pass: Option<bool>,
}

impl XvaReport {
    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

fn push(m: &mut Vec<Metric>, name: &str, e: Estimate) {
    m.push(Metric {
        metric: name.to_string(),
        estimate: e.value,
        std_error: e.std_error,
    });
}

pub fn build_report(art: &RunArtifacts) -> XvaReport {
    let cfg = &art.config;
    let mut metrics = Vec::new();
    let mut stage = Stage::Simulate;
    let mut mode = format!("{:?}", cfg.xva.mode).to_lowercase();
    let sc = &art.scenarios;
    let n = sc.bundle.n_paths;
    let defaulted = (0..n).filter(|&p| sc.credit.defaulted(p)).count();
    push(&mut metrics, "default_fraction", Estimate::exact(defaulted as f64 / n as f64));
    if let Some(cs) = &art.clean {
        stage = Stage::CleanValue;
        push(&mut metrics, "clean_value", cs.clean.v0);
        push(&mut metrics, "clean_value_weighted", cs.clean.v0_weighted);
        push(&mut metrics, "collateral_0", Estimate::exact(cs.state.c[[0, 0]]));
    }
    if let Some(ss) = &art.solve {
        stage = Stage::Solve;
        push(&mut metrics, "y0", ss.solution.y0);
        for i in 0..ss.solution.z_bar.len() {
            push(&mut metrics, &format!("z0_{i}"), Estimate::exact(ss.solution.z_bar[i][[0, 0]]));
        }
    }
    if let Some(hs) = &art.hedge {
        stage = Stage::Hedge;
        for i in 0..hs.strategy.xi.len() {
            push(&mut metrics, &format!("xi0_{i}"), Estimate::exact(hs.strategy.xi[i][[0, 0]]));
        }
        push(&mut metrics, "fs_residual_relative_l2", Estimate::exact(hs.checks.residual.relative_l2));
    }
    let mut decomposition_pass = None;
    if let Some(x) = &art.xva {
        stage = Stage::Xva;
        mode = format!("{:?}", x.cva_dva.mode).to_lowercase();
        push(&mut metrics, "cva", x.cva_dva.cva);
        push(&mut metrics, "dva", x.cva_dva.dva);
        push(&mut metrics, "cva_alt", x.cva_dva_alt.cva);
        push(&mut metrics, "dva_alt", x.cva_dva_alt.dva);
        push(&mut metrics, "colva", x.colva);
        push(&mut metrics, "fva", x.fva.fva);
        push(&mut metrics, "fva_from_hedge", x.fva.fva_from_hedge);
        push(&mut metrics, "hedge_value", x.hedge_value);
        push(&mut metrics, "decomposition_gap", x.decomposition.gap);
        if let Some(t) = x.two_step_cva {
            push(&mut metrics, "cva_two_step", t);
        }
        push(&mut metrics, "kva", x.kva.kva);
        push(&mut metrics, "v_full", x.v_full);
        decomposition_pass = Some(x.decomposition.pass);
    }
    XvaReport {
        config_hash: art.config_hash.clone(),
        seed: cfg.mc.seed,
        n_paths: cfg.mc.n_paths,
        n_steps: cfg.grid.n_steps,
        stage,
        mode,
        metrics,
        decomposition_pass,
    }
}

/// Structured diagnostics (deterministic).
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics<'a> {
    pub market: crate::market::MarketValidation,
    pub tie_scenarios: usize,
    pub defaulted_scenarios: usize,
    pub clean_value_fits: Option<&'a [FitDiagnostics]>,
    pub excluded_flows: Option<usize>,
    pub terminal_identity_gap: Option<f64>,
    pub terminal_second_moments: Option<[f64; 3]>,
    pub lipschitz: Option<(f64, f64)>,
    pub z0_extrapolated: Option<bool>,
    pub bsde_steps: Option<&'a [StepDiagnostics]>,
    pub hedging: Option<&'a FsDiagnostics>,
    pub fva_iterations: Option<usize>,
    pub fva_converged: Option<bool>,
    pub decomposition: Option<&'a crate::xva::DecompositionCheck>,
    pub kva_expected_shortfall: Option<&'a [Option<Estimate>]>,
    pub warnings: &'a [String],
}

pub fn build_diagnostics(art: &RunArtifacts) -> Diagnostics<'_> {
    let sc = &art.scenarios;
    let n = sc.bundle.n_paths;
    Diagnostics {
        market: validate_market(&art.config.market),
        tie_scenarios: sc.credit.tie_paths.len(),
        defaulted_scenarios: (0..n).filter(|&p| sc.credit.defaulted(p)).count(),
        clean_value_fits: art.clean.as_ref().map(|c| c.clean.diagnostics.as_slice()),
        excluded_flows: art.solve.as_ref().map(|s| s.ledger.excluded_flows),
        terminal_identity_gap: art.solve.as_ref().map(|s| s.terminal_gap),
        terminal_second_moments: art.solve.as_ref().map(|s| s.terminal.second_moments),
        lipschitz: art.solve.as_ref().map(|s| s.solution.lipschitz),
        z0_extrapolated: art.solve.as_ref().map(|s| s.solution.z0_extrapolated),
        bsde_steps: art.solve.as_ref().map(|s| s.solution.diagnostics.as_slice()),
        hedging: art.hedge.as_ref().map(|h| &h.checks),
        fva_iterations: art.xva.as_ref().map(|x| x.fva.iterations),
        fva_converged: art.xva.as_ref().map(|x| x.fva.converged),
        decomposition: art.xva.as_ref().map(|x| &x.decomposition),
        kva_expected_shortfall: art.xva.as_ref().map(|x| x.kva.es.as_slice()),
        warnings: &art.warnings,
    }
}

/// Provenance of a run; the only output that may differ between identical runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub scenario_hash: String,
    pub versions: Vec<(String, String)>,
    pub threads: usize,
    pub timings: Vec<(String, f64)>,
    pub cache: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

/// Number of scenarios exported in the sampled CSV files.
pub const SAMPLE_SCENARIOS: usize = 10;

fn write_csv<T: Serialize>(path: &Path, header: &[String], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `report.csv` rows: `metric, estimate, std_error, mode, n_paths, seed, config_hash`.
pub fn write_report_csv(path: &Path, report: &XvaReport) -> Result<()> {
    let header: Vec<String> = ["metric", "estimate", "std_error", "mode", "n_paths", "seed", "config_hash"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(
        path,
        &header,
        report.metrics.iter().map(|m| {
            (
                m.metric.clone(),
                m.estimate,
                m.std_error,
                report.mode.clone(),
                report.n_paths,
                report.seed,
                report.config_hash.clone(),
            )
        }),
    )
}

/// Cost-process fan: one row per node, one column per sampled scenario.
pub fn write_cost_fan(path: &Path, art: &RunArtifacts, sample: &[usize]) -> Result<()> {
    let mut header = vec!["node".to_string(), "time".to_string()];
    header.extend(sample.iter().map(|p| format!("scenario_{p}")));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(&header)?;
    if let (Some(hs), false) = (&art.hedge, sample.is_empty()) {
        let grid = art.scenarios.bundle.grid;
        for k in 0..grid.n_nodes() {
            let mut rec = vec![k.to_string(), grid.time(k).to_string()];
            rec.extend(sample.iter().map(|&p| hs.costs.cost[[p, k]].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sample_of(n: usize) -> Vec<usize> {
    (0..n.min(SAMPLE_SCENARIOS)).collect()
}

/// Writes every artifact available for the stages that ran; returns the file names.
pub fn write_outputs(dir: &Path, art: &RunArtifacts) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let report = build_report(art);
    let p = dir.join("report.json");
    fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
    files.push(p);
    let p = dir.join("report.csv");
    write_report_csv(&p, &report)?;
    files.push(p);
    let p = dir.join("diagnostics.json");
    fs::write(&p, serde_json::to_string_pretty(&build_diagnostics(art))? + "\n")?;
    files.push(p);

    let sc = &art.scenarios;
    let grid = sc.bundle.grid;
    let sample = sample_of(sc.bundle.n_paths);
    if let Some(ss) = &art.solve {
        let d = ss.solution.z_bar.len();
        let mut header = vec!["node".to_string(), "time".to_string(), "mean_y".to_string()];
        header.extend((0..d).map(|i| format!("mean_z_{i}")));
        header.push("mean_u_b".to_string());
        header.push("mean_u_c".to_string());
        let p = dir.join("bsde_means.csv");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&p)?;
        w.write_record(&header)?;
        for m in node_means(&ss.solution, &ss.g, &sc.bundle) {
            let mut rec = vec![m.node.to_string(), m.time.to_string(), m.y.to_string()];
            rec.extend(m.z.iter().map(|z| z.to_string()));
            rec.push(m.u_b.to_string());
            rec.push(m.u_c.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        files.push(p);

        let p = dir.join("ledger_sample.csv");
        let header: Vec<String> = ["scenario", "node", "time", "a", "a_c", "a_rc", "l"].iter().map(|s| s.to_string()).collect();
        let l = &ss.ledger;
        write_csv(
            &p,
            &header,
            sample.iter().flat_map(|&s| {
                (0..grid.n_nodes()).map(move |k| (s, k, grid.time(k), l.a[[s, k]], l.a_c[[s, k]], l.a_rc[[s, k]], l.l[[s, k]]))
            }),
        )?;
        files.push(p);
    }
    if let Some(hs) = &art.hedge {
        let d = hs.strategy.xi.len();
        let p = dir.join("strategy_sample.csv");
        let mut header = vec!["scenario".to_string(), "node".to_string(), "time".to_string()];
        header.extend((0..d).map(|i| format!("xi_{i}")));
        header.extend((0..d).map(|i| format!("psi_{i}")));
        header.push("psi_f".to_string());
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&p)?;
        w.write_record(&header)?;
        for &s in &sample {
            for k in 0..grid.n_nodes() {
                let mut rec = vec![s.to_string(), k.to_string(), grid.time(k).to_string()];
                rec.extend((0..d).map(|i| hs.strategy.xi[i][[s, k]].to_string()));
                rec.extend((0..d).map(|i| hs.strategy.psi[i][[s, k]].to_string()));
                rec.push(hs.strategy.psi_f[[s, k]].to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        files.push(p);
        let p = dir.join("cost_fan.csv");
        write_cost_fan(&p, art, &sample)?;
        files.push(p);
    }
    if let (Some(x), Some(cs)) = (&art.xva, &art.clean) {
        let p = dir.join("xva_profile.csv");
        write_xva_profile(&p, art, cs, x)?;
        files.push(p);
    }
    Ok(files)
}

/// Per-node contributions to CVA, DVA, ColVA, FVA and KVA and the exposures.
fn write_xva_profile(
    path: &Path,
    art: &RunArtifacts,
    cs: &crate::pipeline::CleanStage,
    x: &crate::pipeline::XvaStage,
) -> Result<()> {
    let sc = &art.scenarios;
    let cfg = &art.config;
    let grid = sc.bundle.grid;
    let (n, dt) = (sc.bundle.n_paths, grid.dt());
    let acc = &sc.bundle.accounts;
    let wc = survival_weighted_intensity(&sc.credit, true);
    let wb = survival_weighted_intensity(&sc.credit, false);
    let lgd_c = 1.0 - cfg.contract.recovery_counterparty;
    let lgd_b = cfg.xva_config().dva_lgd(&cfg.contract_spec());
    let header: Vec<String> = ["node", "time", "epe", "ene", "cva", "dva", "colva", "kva_es"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<(usize, f64, f64, f64, f64, f64, f64, f64)> = (0..grid.n_steps)
        .map(|k| {
            let mut epe = Vec::with_capacity(n);
            let mut ene = Vec::with_capacity(n);
            let mut cva = Vec::with_capacity(n);
            let mut dva = Vec::with_capacity(n);
            let mut col = Vec::with_capacity(n);
            for p in 0..n {
                let w = sc.density.z[[p, k]] / acc.discount[k];
                let e = cs.state.q[[p, k]] - cs.state.c[[p, k]];
                epe.push(w * e.max(0.0));
                ene.push(w * (-e).max(0.0));
                cva.push(lgd_c * wc[[p, k]] * w * e.max(0.0) * dt);
                dva.push(lgd_b * wb[[p, k]] * w * (-e).max(0.0) * dt);
                let alive = k < sc.credit.stop_node(p);
                col.push(if alive {
                    w * cs.state.c[[p, k]] * (cs.state.rbar[[p, k]] - acc.funding_rate[k]) * dt
                } else {
                    0.0
                });
            }
            let es = x.kva.es[k].map_or(0.0, |e| e.value);
            (k, grid.time(k), mean(&epe), mean(&ene), mean(&cva), mean(&dva), mean(&col), es)
        })
        .collect();
    write_csv(path, &header, rows)
}

/// Writes `manifest.json`.
pub fn write_manifest(dir: &Path, art: &RunArtifacts, files: &[PathBuf]) -> Result<()> {
    let m = RunManifest {
        config_hash: art.config_hash.clone(),
        scenario_hash: art.config.scenario_hash(),
        versions: vec![
            ("xva-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("schema".to_string(), crate::config::SCHEMA_VERSION.to_string()),
        ],
        threads: rayon::current_num_threads(),
        timings: art.timings.clone(),
        cache: art.cache_hashes.clone(),
        warnings: art.warnings.clone(),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all((serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
    Ok(())
}

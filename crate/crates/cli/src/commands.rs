use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use msmm::design::{build_design, log_population, read_population, Design, DesignOptions};
use msmm::diagnostics::DiagnosticsReport;
use msmm::fay_herriot::fit_fh;
use msmm::graph::{build_adjacency, read_edge_list, SpatialStructure};
use msmm::mixture::{fit_msmm, MixturePosterior};
use msmm::moran::{content_key, moran_operator, read_cache, select_basis, write_cache, MoranBasis};
use msmm::msm::fit_msm;
use msmm::par::run_chains;
use msmm::posterior::{predict_summaries, read_dump, PosteriorDraws};
use msmm::seed::{derive_seed, rng_from_seed};
use msmm::simulation::{run_study, two_field_fixture, StudyConfig, TwoFieldSpec};
use msmm::tabulation::{
    back_transform, gvf_impute, gvf_predictor, load_tabulation, log_transform, mean_cv_reduction, write_predictions,
    ColumnSchema, LogTable, TabulationTable,
};
use msmm::Observations;
use rand::seq::index::sample;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ModelKind, RunConfig};
use crate::failure::Failure;

/// Number of latent entries tracked in the diagnostics report.
const TRACKED_ENTRIES: usize = 5;

/// Seed path for picking the tracked entries, apart from every chain path.
const TRACKED_PATH: u64 = u64::MAX;

/// Inputs shared by `fit`, `basis` and data-driven `simulate`.
struct Prepared {
    table: TabulationTable,
    logs: LogTable,
    design: Design,
    spatial: SpatialStructure,
    inputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn prepare(config: &RunConfig) -> Result<Prepared, Failure> {
    config.require_inputs()?;
    let tab_path = config.tabulation.as_ref().expect("checked");
    let adj_path = config.adjacency.as_ref().expect("checked");
    let mut inputs = BTreeMap::new();
    inputs.insert("tabulation".to_string(), file_digest(tab_path)?);
    inputs.insert("adjacency".to_string(), file_digest(adj_path)?);

    let table = load_tabulation(tab_path, &ColumnSchema::default())?;
    let mut logs = log_transform(&table);
    let missing = logs.needs_imputation().len();
    if missing > 0 {
        info!("imputing {missing} sampling variances with the GVF smoother");
        logs = gvf_impute(&logs, &gvf_predictor(&table), config.gvf())?;
    }

    let edges = read_edge_list(fs::File::open(adj_path)?)?;
    let adjacency = build_adjacency(&edges, table.areas())?;
    let spatial = SpatialStructure::new(adjacency, table.cells())?;

    let log_pop = match &config.population {
        Some(p) => {
            inputs.insert("population".to_string(), file_digest(p)?);
            Some(log_population(table.areas(), &read_population(fs::File::open(p)?)?)?)
        }
        None => None,
    };
    let options = DesignOptions {
        intercept: config.intercept,
        cell_indicators: config.cell_indicators,
    };
    let design = build_design(table.areas().len(), table.cells(), log_pop.as_deref(), options)?;
    Ok(Prepared {
        table,
        logs,
        design,
        spatial,
        inputs,
    })
}

/// Cache key: the design and adjacency contents plus the basis size rule.
fn basis_key(design: &Design, spatial: &SpatialStructure, config: &RunConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(content_key(&design.matrix, &spatial.a));
    h.update(format!("{:?}", config.basis_size()).as_bytes());
    h.finalize().into()
}

/// Loads the basis from `out/basis.bin` when its key matches, else builds and
/// stores it. Returns the basis and the cache file bytes.
fn basis_with_cache(p: &Prepared, config: &RunConfig) -> Result<(MoranBasis, Vec<u8>), Failure> {
    let key = basis_key(&p.design, &p.spatial, config);
    let path = config.out.join("basis.bin");
    if let Ok(bytes) = fs::read(&path) {
        match read_cache(bytes.as_slice(), &key) {
            Ok(Some(basis)) => {
                info!("reusing basis cache {}", path.display());
                return Ok((basis, bytes));
            }
            Ok(None) => info!("basis cache {} is stale; rebuilding", path.display()),
            Err(e) => warn!("ignoring unreadable basis cache {}: {e}", path.display()),
        }
    }
    let basis = MoranBasis::build(&p.design.matrix, &p.spatial, config.basis_size())?;
    let mut bytes = Vec::new();
    write_cache(&mut bytes, &key, &basis)?;
    fs::write(&path, &bytes)?;
    Ok((basis, bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Writes `<command>.manifest.json` with the resolved config and the digests
/// of every input and output.
fn write_manifest(
    config: &RunConfig,
    command: &str,
    inputs: &BTreeMap<String, String>,
    outputs: &[&str],
) -> Result<(), Failure> {
    let config_json = serde_json::to_vec(config)?;
    let outputs = outputs
        .iter()
        .map(|name| Ok((name.to_string(), file_digest(&config.out.join(name))?)))
        .collect::<Result<_, Failure>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_sha256: sha256_hex(&config_json),
        config,
        inputs,
        outputs,
    };
    write_json(&config.out.join(format!("{command}.manifest.json")), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn ensure_out(config: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&config.out)
        .map_err(|e| Failure::config(format!("cannot create output directory {}: {e}", config.out.display())))
}

pub fn basis(config: &RunConfig) -> Result<(), Failure> {
    config.validate()?;
    let p = prepare(config)?;
    ensure_out(config)?;
    let g = moran_operator(&p.design.matrix, &p.spatial.a)?;
    let eb = select_basis(&g, config.basis_size())?;
    let spectrum = eb.spectrum.clone();
    let basis = MoranBasis::from_eigenbasis(eb, &p.spatial.q)?;
    let mut bytes = Vec::new();
    write_cache(&mut bytes, &basis_key(&p.design, &p.spatial, config), &basis)?;
    fs::write(config.out.join("basis.bin"), &bytes)?;
    let report = json!({
        "areas": p.spatial.areas(),
        "cells": p.spatial.cells,
        "design_columns": p.design.columns,
        "positive_count": basis.positive_count,
        "r": basis.rank(),
        "kept_eigenvalues": basis.eigenvalues,
        "spectrum": spectrum,
        "design_overlap_max": basis.design_overlap(&p.design.matrix),
        "cache_sha256": sha256_hex(&bytes),
    });
    write_json(&config.out.join("basis.json"), &report)?;
    write_manifest(config, "basis", &p.inputs, &["basis.bin", "basis.json"])?;
    println!(
        "basis: r = {} of {} positive eigenvalues, max |Psi'X| = {:.2e}",
        basis.rank(),
        basis.positive_count,
        basis.design_overlap(&p.design.matrix)
    );
    Ok(())
}

/// One chain's draws, with the mixture-only extras when present.
struct Chain {
    draws: PosteriorDraws,
    modal_clusters: Option<usize>,
    warnings: Vec<String>,
}

impl From<PosteriorDraws> for Chain {
    fn from(draws: PosteriorDraws) -> Self {
        Self {
            draws,
            modal_clusters: None,
            warnings: Vec::new(),
        }
    }
}

impl From<MixturePosterior> for Chain {
    fn from(m: MixturePosterior) -> Self {
        Self {
            modal_clusters: m.modal_clusters(),
            warnings: m.warnings,
            draws: m.draws,
        }
    }
}

fn fit_chains(config: &RunConfig, obs: &Observations, design: &Design, basis: &MoranBasis) -> Result<Vec<Chain>, Failure> {
    let x = &design.matrix;
    let chains = match config.model {
        ModelKind::Msm => run_chains(config.chains, config.seed, config.parallel, |seed| {
            let c = msmm::msm::MsmConfig {
                mcmc: config.mcmc().with_seed(seed),
                ..config.msm()
            };
            fit_msm(obs, x, basis, &c).map(Chain::from)
        })?,
        ModelKind::Fh => run_chains(config.chains, config.seed, config.parallel, |seed| {
            let c = msmm::fay_herriot::FhConfig {
                mcmc: config.mcmc().with_seed(seed),
                ..config.fh()
            };
            fit_fh(obs, x, &c).map(Chain::from)
        })?,
        ModelKind::Msmm => run_chains(config.chains, config.seed, config.parallel, |seed| {
            let c = msmm::mixture::MixtureConfig {
                mcmc: config.mcmc().with_seed(seed),
                ..config.mixture()
            };
            fit_msmm(obs, x, basis, &c).map(Chain::from)
        })?,
    };
    Ok(chains)
}

/// Scalar traces worth diagnosing for each model.
fn headline_parameters(model: ModelKind) -> &'static [&'static str] {
    match model {
        ModelKind::Msm => &["sigma2_eta"],
        ModelKind::Msmm => &["alpha", "sigma2_eta", "k"],
        ModelKind::Fh => &["sigma2"],
    }
}

pub fn fit(config: &RunConfig) -> Result<(), Failure> {
    config.validate()?;
    let p = prepare(config)?;
    ensure_out(config)?;
    let (basis, _) = basis_with_cache(&p, config)?;
    let obs = Observations::from_log_table(&p.logs)?;
    info!(
        "fitting {:?} with {} chain(s) of {} iterations",
        config.model, config.chains, config.iterations
    );
    let mut chains = fit_chains(config, &obs, &p.design, &basis)?;

    // latent entries tracked alongside the scalar parameters; their values
    // do not depend on cluster labels
    let n = obs.len();
    let tracked: Vec<usize> = {
        let mut rng = rng_from_seed(derive_seed(config.seed, &[TRACKED_PATH]));
        let mut idx = sample(&mut rng, n, TRACKED_ENTRIES.min(n)).into_vec();
        idx.sort_unstable();
        idx
    };
    for chain in &mut chains {
        for &i in &tracked {
            let values = chain.draws.latent.column(i);
            chain.draws.traces.insert(format!("y[{i}]"), values);
        }
    }

    let merged = PosteriorDraws::merge(&chains.iter().map(|c| c.draws.clone()).collect::<Vec<_>>())?;
    let log_summary = predict_summaries(&merged)?;
    let counts = back_transform(&merged.latent)?;
    let mut pred = BufWriter::new(fs::File::create(config.out.join("predictions.csv"))?);
    write_predictions(&mut pred, &p.table, &log_summary, &counts)?;
    pred.flush()?;

    let names: Vec<String> = headline_parameters(config.model)
        .iter()
        .map(|s| s.to_string())
        .chain(tracked.iter().map(|i| format!("y[{i}]")))
        .collect();
    let traces: BTreeMap<String, Vec<Vec<f64>>> = names
        .iter()
        .map(|name| {
            let per_chain = chains
                .iter()
                .map(|c| c.draws.trace(name).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            (name.clone(), per_chain)
        })
        .collect();
    let report = DiagnosticsReport::from_chains(&traces);
    let rows = p.table.rows();
    let entries: Vec<_> = tracked
        .iter()
        .map(|&i| json!({ "parameter": format!("y[{i}]"), "area_id": rows[i].area_id, "cell_index": rows[i].cell_index }))
        .collect();
    let warnings: Vec<&String> = chains.iter().flat_map(|c| &c.warnings).collect();
    for w in &warnings {
        warn!("{w}");
    }
    let diagnostics = json!({
        "model": merged.model,
        "chains": config.chains,
        "retained_per_chain": chains[0].draws.retained(),
        "parameters": report.parameters,
        "tracked_entries": entries,
        "modal_clusters": chains.iter().filter_map(|c| c.modal_clusters).collect::<Vec<_>>(),
        "mean_cv_reduction": mean_cv_reduction(&p.table, &counts),
        "warnings": warnings,
    });
    write_json(&config.out.join("diagnostics.json"), &diagnostics)?;

    let mut outputs = vec!["predictions.csv", "diagnostics.json"];
    if config.keep_draws {
        let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(config.out.join("draws.csv"))?));
        w.write_record(["chain", "iteration", "parameter", "value"])?;
        for (c, chain) in chains.iter().enumerate() {
            chain.draws.write_dump(c, &mut w)?;
        }
        w.flush()?;
        outputs.push("draws.csv");
    }
    write_manifest(config, "fit", &p.inputs, &outputs)?;

    println!("{}: {} predictions written to {}", merged.model, p.table.len(), config.out.join("predictions.csv").display());
    for d in &report.parameters {
        if let Some(psrf) = d.psrf {
            println!("  {:<14} mean {:>10.4}  psrf {psrf:.3}", d.name, d.mean);
        }
    }
    if let Some(r) = mean_cv_reduction(&p.table, &counts) {
        println!("  mean CV reduction {:.1}%", 100.0 * r);
    }
    Ok(())
}

pub fn simulate(config: &RunConfig) -> Result<(), Failure> {
    config.validate()?;
    if config.replicates == 0 {
        return Err(Failure::config("replicates must be at least 1"));
    }
    ensure_out(config)?;
    let (truth, design, basis, truth_partition, inputs) = if config.tabulation.is_some() {
        let p = prepare(config)?;
        let (basis, _) = basis_with_cache(&p, config)?;
        (p.logs, p.design.matrix, basis, None, p.inputs)
    } else {
        info!("no tabulation configured; using a synthetic two-field grid");
        let spec = TwoFieldSpec {
            side: config.grid_side,
            cells: config.grid_cells,
            basis_size: config.basis_size(),
            ..Default::default()
        };
        let f = two_field_fixture(spec, config.seed)?;
        (f.truth, f.design, f.basis, Some(f.groups), BTreeMap::new())
    };
    let study = StudyConfig {
        replicates: config.replicates,
        seed: config.seed,
        msmm: config.mixture(),
        fh: config.fh(),
        msm: config.simulate_msm.then(|| config.msm()),
        truth,
        design,
        basis,
        truth_partition,
        parallel: config.parallel,
    };
    info!("running {} replicates", study.replicates);
    let result = run_study(&study)?;
    let mut w = BufWriter::new(fs::File::create(config.out.join("study.csv"))?);
    result.write_csv(&mut w)?;
    w.flush()?;
    write_manifest(config, "simulate", &inputs, &["study.csv"])?;
    for s in &result.summaries {
        match s.amse {
            Some(q) => println!("{:<5} median AMSE {:.4} over {} replicates", s.model.name(), q.median, s.scored),
            None => println!("{:<5} no scored replicates", s.model.name()),
        }
    }
    Ok(())
}

/// Recomputes diagnostics from a draw dump; prints JSON or writes it to
/// `out/diagnostics.json`.
pub fn diagnose(dump: &Path, out: Option<&PathBuf>) -> Result<(), Failure> {
    let file = fs::File::open(dump).map_err(|e| Failure::config(format!("cannot open {}: {e}", dump.display())))?;
    let traces = read_dump(file)?;
    if traces.is_empty() {
        return Err(Failure::data(format!("{} holds no draws", dump.display())));
    }
    let by_param: BTreeMap<String, Vec<Vec<f64>>> = traces
        .into_iter()
        .map(|(name, chains)| (name, chains.into_values().collect()))
        .collect();
    let report = DiagnosticsReport::from_chains(&by_param);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("diagnostics.json"), &report)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{}", report.to_json()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

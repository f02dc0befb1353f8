use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use uum_core::config::RunConfig;
use uum_core::data::PreparedData;
use uum_core::evaluation::{EvalReport, evaluate};
use uum_core::model::{Model, Variant, checkpoint_id, encode_checkpoint, load_checkpoint_as};
use uum_core::numerics::compensated_sum;
use uum_core::synthgen::generate_dataset;
use uum_core::training::{loss_trace_csv, train};
use uum_core::{Result, UumError};

use crate::output::Outputs;

fn config_line(cfg: &RunConfig) -> String {
    format!("# config {}\n", cfg.echo())
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        log::info!("wrote {}", p.display());
    }
}

fn load_prepared(cfg: &RunConfig) -> Result<(uum_core::data::DatasetManifest, PreparedData)> {
    let (manifest, users) = cfg.load_data()?;
    let prepared = cfg.data.prepare(&users);
    log::info!(
        "{} users, {} training windows, {} test windows",
        prepared.sequences.len(),
        prepared.train.len(),
        prepared.test.len()
    );
    Ok((manifest, prepared))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let data = generate_dataset(&cfg.generator)?;
    log::info!("generated {} events for {} users", data.event_count(), data.users.len());
    let mut out = Outputs::new();
    out.stage(&cfg.paths.events(), data.events_text().as_bytes())?;
    out.stage(&cfg.paths.manifest(), data.manifest.to_json().as_bytes())?;
    let truth = config_line(cfg) + &data.ground_truth_text();
    out.stage(&cfg.paths.out_dir.join("ground_truth.csv"), truth.as_bytes())?;
    report_written(&out.commit()?);
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let (manifest, prepared) = load_prepared(cfg)?;
    let mut model = Model::new(cfg.model.clone(), manifest)?;
    let outcome = train(&mut model, &prepared.train, &cfg.train, None)?;
    let means = outcome.epoch_mean_retrieval();
    for (e, m) in means.iter().enumerate() {
        println!("epoch {:>3}  mean retrieval loss {m:.6}", e + 1);
    }
    let mut out = Outputs::new();
    out.stage(&cfg.paths.checkpoint(), &encode_checkpoint(&model))?;
    let trace = config_line(cfg) + &loss_trace_csv(&outcome.trace);
    out.stage(&cfg.paths.out_dir.join("loss_trace.csv"), trace.as_bytes())?;
    report_written(&out.commit()?);
    println!("checkpoint {}", checkpoint_id(&cfg.paths.checkpoint())?);
    Ok(())
}

/// Evaluation report together with the full run configuration.
#[derive(Serialize)]
struct EvalArtifact<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    run_config: &'a RunConfig,
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.paths.checkpoint(), Path::to_path_buf)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint_path(cfg, checkpoint);
    let (manifest, prepared) = load_prepared(cfg)?;
    let model = load_checkpoint_as(&path, &cfg.model, &manifest)?;
    let mut report = evaluate(&model, &prepared.test, &prepared.catalog, &cfg.eval)?;
    report.checkpoint_id = Some(checkpoint_id(&path)?);
    println!(
        "recall@{k} {:.6}  ndcg@{k} {:.6}  ({} examples, {} negatives)",
        report.recall_at_k,
        report.ndcg_at_k,
        report.count,
        report.negatives,
        k = report.k
    );
    let json = serde_json::to_string_pretty(&EvalArtifact { report: &report, run_config: cfg }).expect("report serializes") + "\n";
    let csv = format!("{}{}\n{}\n", config_line(cfg), EvalReport::CSV_HEADER, report.csv_row());
    let mut out = Outputs::new();
    out.stage(&cfg.paths.out_dir.join("eval.json"), json.as_bytes())?;
    out.stage(&cfg.paths.out_dir.join("eval.csv"), csv.as_bytes())?;
    report_written(&out.commit()?);
    Ok(())
}

/// One row per user: the pooled embedding over the most recent events that
/// fit the positional capacity.
pub fn export(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint_path(cfg, checkpoint);
    let (manifest, prepared) = load_prepared(cfg)?;
    let model = load_checkpoint_as(&path, &cfg.model, &manifest)?;
    let cap = model.config.positional_capacity;
    let contexts: Vec<&[uum_core::data::Event]> = prepared
        .sequences
        .iter()
        .map(|s| &s.events[s.events.len().saturating_sub(cap)..])
        .collect();
    if contexts.iter().any(|c| c.is_empty()) {
        return Err(UumError::Data("a user has no events to embed".into()));
    }
    let f = model.latent_dim();
    let chunks: Vec<uum_core::numerics::Tensor> = contexts.par_chunks(256).map(|c| model.user_embeddings(c)).collect::<Result<_>>()?;
    let mut text = format!("# f={f} checkpoint={} config={}\n", checkpoint_id(&path)?, cfg.echo());
    let mut rows = chunks.iter().flat_map(|t| t.data().chunks(f));
    for seq in &prepared.sequences {
        let h = rows.next().expect("one embedding per user");
        text.push_str(&seq.user_id.to_string());
        for v in h {
            write!(text, ",{v}").expect("writing to a string");
        }
        text.push('\n');
    }
    let mut out = Outputs::new();
    out.stage(&cfg.paths.out_dir.join("embeddings.csv"), text.as_bytes())?;
    report_written(&out.commit()?);
    println!("exported {} users at f={f}", prepared.sequences.len());
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Run {
    variant: Variant,
    seed: u64,
    recall: f64,
    ndcg: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

fn compare_table(runs: &[Run], k: usize) -> String {
    let mut t = format!("{:<26}{:>22}{:>22}\n", "variant", format!("recall@{k}"), format!("ndcg@{k}"));
    for variant in Variant::ALL {
        let pick = |f: fn(&Run) -> f64| runs.iter().filter(|r| r.variant == variant).map(f).collect::<Vec<_>>();
        let (rm, rs) = mean_std(&pick(|r| r.recall));
        let (nm, ns) = mean_std(&pick(|r| r.ndcg));
        let _ = writeln!(
            t,
            "{:<26}{:>22}{:>22}",
            variant.as_str(),
            format!("{rm:.4} ± {rs:.4}"),
            format!("{nm:.4} ± {ns:.4}")
        );
    }
    t
}

/// Trains every variant on identical data for each seed offset and
/// evaluates them under one negative-sampling seed.
pub fn compare(cfg: &RunConfig) -> Result<()> {
    let (manifest, prepared) = load_prepared(cfg)?;
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .into_iter()
        .flat_map(|v| (0..cfg.compare.seeds as u64).map(move |s| (v, s)))
        .collect();
    let run = |&(variant, offset): &(Variant, u64)| -> Result<Run> {
        let mut model_cfg = cfg.model.clone();
        model_cfg.variant = variant;
        model_cfg.init_seed = cfg.model.init_seed.wrapping_add(offset);
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = cfg.train.seed.wrapping_add(offset);
        let mut model = Model::new(model_cfg, manifest.clone())?;
        train(&mut model, &prepared.train, &train_cfg, None)?;
        let r = evaluate(&model, &prepared.test, &prepared.catalog, &cfg.eval)?;
        log::info!("{} seed {offset}: recall {:.4} ndcg {:.4}", variant.as_str(), r.recall_at_k, r.ndcg_at_k);
        Ok(Run { variant, seed: offset, recall: r.recall_at_k, ndcg: r.ndcg_at_k })
    };
    let runs: Vec<Run> = if cfg.compare.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let table = compare_table(&runs, cfg.eval.k);
    print!("{table}");
    let mut csv = config_line(cfg) + "variant,seed,recall_at_k,ndcg_at_k\n";
    for r in &runs {
        let _ = writeln!(csv, "{},{},{},{}", r.variant.as_str(), r.seed, r.recall, r.ndcg);
    }
    let mut out = Outputs::new();
    out.stage(&cfg.paths.out_dir.join("compare.csv"), csv.as_bytes())?;
    out.stage(&cfg.paths.out_dir.join("compare.txt"), (config_line(cfg) + &table).as_bytes())?;
    report_written(&out.commit()?);
    Ok(())
}

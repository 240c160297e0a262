use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use coopadapt_api::{AdaptKind, AdaptRequest, JobResult, PretrainRequest, RunLocation, SweepCell, SweepRequest};
use coopadapt_core::config::ExperimentConfig;
use coopadapt_core::evaluation::evaluate_model;
use coopadapt_core::grl::GrlFactor;
use coopadapt_core::sample::Domain;
use coopadapt_core::synthgen::Dataset;
use coopadapt_core::training::{
    adapt, baseline_self_training, load_checkpoint, load_prepared, pretrain_source, AdaptMethod, EpochRecord,
    PreparedSample, RunHooks, RunOutcome, Start,
};
use coopadapt_core::{Error, Result};

use crate::HttpError;

pub(crate) type Sink<'a> = &'a mut (dyn FnMut(&EpochRecord) + Send);
pub(crate) type Work = Box<dyn FnOnce(&AtomicBool, Sink<'_>) -> Result<JobResult> + Send>;

/// A validated job, ready to queue.
pub(crate) struct Plan {
    pub kind: String,
    pub run_dir: PathBuf,
    pub work: Work,
}

pub(crate) const CONFIG_FILE: &str = "config.json";

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<runs_root>/<config hash>-s<seed>/<stage>`, with the resolved config written inside.
fn prepare_run_dir(cfg: &ExperimentConfig, root: &Path, stage: &str) -> Result<PathBuf> {
    let dir = root.join(format!("{}-s{}", cfg.hash(), cfg.seed)).join(stage);
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    Ok(dir)
}

fn dataset_path(path: &Option<PathBuf>, key: &str) -> std::result::Result<PathBuf, HttpError> {
    let p = path
        .clone()
        .ok_or_else(|| HttpError::config(format!("data.{key} is not set")))?;
    Dataset::open(&p)?;
    Ok(p)
}

fn load(path: &Path, domain: Domain, with_labels: bool) -> Result<Vec<PreparedSample>> {
    load_prepared(&Dataset::open(path)?, domain, with_labels)
}

fn existing(path: &Path, what: &str) -> std::result::Result<(), HttpError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HttpError::config(format!("{what} {} does not exist", path.display())))
    }
}

fn hooks<'a>(cancel: &'a AtomicBool, sink: Sink<'a>) -> RunHooks<'a> {
    RunHooks {
        on_epoch: Some(Box::new(move |r: &EpochRecord| sink(r))),
        cancel: Some(cancel),
    }
}

fn summarize(outcome: RunOutcome) -> JobResult {
    let mut empty_rounds: Vec<usize> = outcome
        .records
        .iter()
        .filter(|r| r.pseudo_labels == Some(0))
        .filter_map(|r| r.round)
        .collect();
    empty_rounds.dedup();
    let warnings = empty_rounds
        .into_iter()
        .map(|k| format!("self-training round {k} produced no pseudo-labels; finetuning skipped"))
        .collect();
    JobResult {
        final_checkpoint: Some(outcome.final_checkpoint),
        epochs_completed: outcome.records.len(),
        warnings,
        sweep: Vec::new(),
    }
}

pub(crate) fn plan_pretrain(req: PretrainRequest) -> std::result::Result<Plan, HttpError> {
    let cfg = req.config;
    cfg.validate()?;
    let source = dataset_path(&cfg.data.source, "source")?;
    let start = match req.location.resume {
        Some(p) => {
            existing(&p, "checkpoint")?;
            Start::Resume(p)
        }
        None => Start::Fresh,
    };
    let run_dir = prepare_run_dir(&cfg, &req.location.runs_root, "pretrain")?;
    let dir = run_dir.clone();
    Ok(Plan {
        kind: "pretrain".into(),
        run_dir,
        work: Box::new(move |cancel, sink| {
            let src = load(&source, Domain::Source, true)?;
            pretrain_source(&cfg, &src, &dir, start, hooks(cancel, sink)).map(summarize)
        }),
    })
}

fn stage_name(kind: AdaptKind) -> &'static str {
    match kind {
        AdaptKind::Dusa => "dusa",
        AdaptKind::Discriminator => "discriminator",
        AdaptKind::SelfTrain => "self-train",
    }
}

fn adapt_start(cfg: &ExperimentConfig, from: Option<PathBuf>, loc: &RunLocation) -> std::result::Result<Start, HttpError> {
    if let Some(p) = &loc.resume {
        existing(p, "checkpoint")?;
        return Ok(Start::Resume(p.clone()));
    }
    match from {
        Some(p) => {
            existing(&p, "checkpoint")?;
            Ok(Start::InitFrom(p))
        }
        None if cfg.train.allow_cold_start => Ok(Start::Fresh),
        None => Err(HttpError::config(
            "adaptation starts from a pretrained checkpoint; pass one with --from (or set train.allow_cold_start)",
        )),
    }
}

pub(crate) fn plan_adapt(req: AdaptRequest) -> std::result::Result<Plan, HttpError> {
    let cfg = req.config;
    cfg.validate()?;
    let start = adapt_start(&cfg, req.from, &req.location)?;
    let target = dataset_path(&cfg.data.target, "target")?;
    let needs_source = req.method != AdaptKind::SelfTrain || cfg.selftrain.mix_source;
    let source = if needs_source {
        Some(dataset_path(&cfg.data.source, "source")?)
    } else {
        None
    };
    let method = req.method;
    let run_dir = prepare_run_dir(&cfg, &req.location.runs_root, stage_name(method))?;
    let dir = run_dir.clone();
    Ok(Plan {
        kind: format!("adapt:{}", stage_name(method)),
        run_dir,
        work: Box::new(move |cancel, sink| {
            let src = match &source {
                Some(p) => load(p, Domain::Source, true)?,
                None => Vec::new(),
            };
            // Target annotations are never read by adaptation.
            let tgt = load(&target, Domain::Target, false)?;
            let hooks = hooks(cancel, sink);
            let outcome = match method {
                AdaptKind::Dusa => adapt(AdaptMethod::Dusa, &cfg, &src, &tgt, &dir, start, hooks),
                AdaptKind::Discriminator => adapt(AdaptMethod::NaiveDiscriminator, &cfg, &src, &tgt, &dir, start, hooks),
                AdaptKind::SelfTrain => baseline_self_training(&cfg, &src, &tgt, &dir, start, hooks),
            }?;
            Ok(summarize(outcome))
        }),
    })
}

pub(crate) fn plan_sweep(req: SweepRequest) -> std::result::Result<Plan, HttpError> {
    let base = req.config;
    base.validate()?;
    if req.lsa_gammas.is_empty() || req.cia_gammas.is_empty() {
        return Err(HttpError::config("sweep needs at least one factor per adapter"));
    }
    let mut cells = Vec::new();
    for &l in &req.lsa_gammas {
        for &c in &req.cia_gammas {
            let mut cfg = base.clone();
            cfg.grl.lsa_gamma = GrlFactor::new(l)?;
            cfg.grl.cia_gamma = GrlFactor::new(c)?;
            cells.push((l, c, cfg));
        }
    }
    let start = adapt_start(&base, req.from, &RunLocation {
        runs_root: req.location.runs_root.clone(),
        resume: None,
    })?;
    let source = dataset_path(&base.data.source, "source")?;
    let target = dataset_path(&base.data.target, "target")?;
    let eval = match &base.data.eval {
        Some(_) => Some(dataset_path(&base.data.eval, "eval")?),
        None => None,
    };
    let root = req.location.runs_root;
    let mut planned = Vec::new();
    for (l, c, cfg) in cells {
        let dir = prepare_run_dir(&cfg, &root, "dusa")?;
        planned.push((l, c, cfg, dir));
    }
    Ok(Plan {
        kind: "sweep".into(),
        run_dir: root,
        work: Box::new(move |cancel, sink| {
            let src = load(&source, Domain::Source, true)?;
            let tgt = load(&target, Domain::Target, false)?;
            let test = match &eval {
                Some(p) => Some(load(p, Domain::Target, true)?),
                None => None,
            };
            let mut result = JobResult {
                final_checkpoint: None,
                epochs_completed: 0,
                warnings: Vec::new(),
                sweep: Vec::new(),
            };
            for (l, c, cfg, dir) in planned {
                log::info!("sweep cell lsa {l} cia {c}");
                let outcome = adapt(AdaptMethod::Dusa, &cfg, &src, &tgt, &dir, start.clone(), hooks(cancel, &mut *sink))?;
                result.epochs_completed += outcome.records.len();
                let report = match &test {
                    Some(samples) => {
                        let (model, _, _) = load_checkpoint(&outcome.final_checkpoint)?;
                        let mut report = evaluate_model(&model, samples, &cfg.eval.thresholds)?;
                        report.checkpoint = Some(outcome.final_checkpoint.clone());
                        write_json(&dir.join("eval.json"), &report)?;
                        Some(report)
                    }
                    None => None,
                };
                result.sweep.push(SweepCell {
                    lsa_gamma: l,
                    cia_gamma: c,
                    checkpoint: outcome.final_checkpoint,
                    report,
                });
            }
            Ok(result)
        }),
    })
}

//! Pretraining, adaptation and self-training runs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::data::{augmented, epoch_order, split_indices, tags, PreparedSample};
use super::model::{load_checkpoint, save_checkpoint, AdapterArch, AdapterKind, Model, Stage, TrainState};
use super::step::{accumulate, sample_graph, Reversal, SampleStats, SampleTerms};
use crate::adapters::LsaInput;
use crate::config::ExperimentConfig;
use crate::detector::{decode_boxes, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::nn::{sigmoid, Adam, Grads, Graph};
use crate::rng::{derive_seed, stream};
use crate::sample::Domain;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

/// Where a run's weights and optimiser state come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Start {
    /// Randomly initialised detector.
    Fresh,
    /// Weights and optimiser moments of an earlier stage; counters restart.
    InitFrom(PathBuf),
    /// Continue an interrupted run of the same stage.
    Resume(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    Dusa,
    NaiveDiscriminator,
    /// Detector frozen; only the adapter heads learn. Measures how separable frozen features are.
    FrozenProbe,
}

impl AdaptMethod {
    fn stage(self) -> Stage {
        match self {
            AdaptMethod::Dusa => Stage::Dusa,
            AdaptMethod::NaiveDiscriminator => Stage::NaiveDiscriminator,
            AdaptMethod::FrozenProbe => Stage::FrozenProbe,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub round: Option<usize>,
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub steps: usize,
    pub det_loss: Option<f64>,
    pub sim_loss: Option<f64>,
    pub sim_acc: Option<f64>,
    pub agent_loss: Option<f64>,
    pub agent_acc: Option<f64>,
    pub val_det_loss: Option<f64>,
    /// Sim/real discriminator accuracy on held-out source and target frames.
    pub heldout_sim_acc: Option<f64>,
    pub pseudo_labels: Option<usize>,
}

/// Observers of a running job.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + Send + 'a>>,
    /// Checked between steps; setting it aborts with [`Error::Cancelled`].
    pub cancel: Option<&'a AtomicBool>,
}

impl RunHooks<'_> {
    fn check(&self) -> Result<()> {
        match self.cancel {
            Some(c) if c.load(Ordering::Relaxed) => Err(Error::Cancelled),
            _ => Ok(()),
        }
    }

    fn emit(&mut self, r: &EpochRecord) {
        if let Some(f) = self.on_epoch.as_mut() {
            f(r);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
    pub state: TrainState,
}

struct Run {
    dir: PathBuf,
    metrics: BufWriter<File>,
    records: Vec<EpochRecord>,
}

impl Run {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
            records: Vec::new(),
        })
    }

    fn log(&mut self, r: EpochRecord, hooks: &mut RunHooks) -> Result<()> {
        let line = serde_json::to_string(&r).map_err(|e| Error::json(self.dir.join(METRICS_FILE), e))?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))?;
        hooks.emit(&r);
        self.records.push(r);
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &Model, adam: &Adam, state: &TrainState) -> Result<PathBuf> {
        let d = self.dir.join(CHECKPOINT_DIR).join(name);
        save_checkpoint(&d, model, adam, state)?;
        Ok(d)
    }

    fn finish(self, model: &Model, adam: &Adam, state: TrainState) -> Result<RunOutcome> {
        let final_checkpoint = self.checkpoint(FINAL_CHECKPOINT, model, adam, &state)?;
        Ok(RunOutcome {
            final_checkpoint,
            records: self.records,
            state,
        })
    }
}

fn require_nonempty(samples: &[PreparedSample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{what} dataset is empty")));
    }
    Ok(())
}

/// Builds the model, optimiser and counters a run starts from.
fn start_model(cfg: &ExperimentConfig, stage: Stage, start: &Start) -> Result<(Model, Adam, TrainState, bool)> {
    let hash = cfg.hash();
    match start {
        Start::Fresh => {
            let model = Model::new(cfg.detector.clone(), derive_seed(cfg.seed, &[tags::INIT, 0]))?;
            let adam = Adam::new(cfg.train.adam, model.store.len());
            Ok((model, adam, TrainState::new(stage, cfg.seed, hash, cfg.train.adam), false))
        }
        Start::InitFrom(dir) => {
            let (model, mut adam, _) = load_checkpoint(dir)?;
            adam.config = cfg.train.adam;
            Ok((model, adam, TrainState::new(stage, cfg.seed, hash, cfg.train.adam), false))
        }
        Start::Resume(dir) => {
            let (model, mut adam, mut state) = load_checkpoint(dir)?;
            if state.stage != stage {
                return Err(Error::Checkpoint(format!(
                    "cannot resume a {} run from a {} checkpoint",
                    stage.as_str(),
                    state.stage.as_str()
                )));
            }
            adam.config = cfg.train.adam;
            state.config_hash = hash;
            Ok((model, adam, state, true))
        }
    }
}

fn refuse_cold_start(cfg: &ExperimentConfig, start: &Start) -> Result<()> {
    if *start == Start::Fresh && !cfg.train.allow_cold_start {
        return Err(Error::Config(
            "adaptation needs a pretrained checkpoint; set train.allow_cold_start to override".into(),
        ));
    }
    Ok(())
}

#[derive(Default)]
struct Tally {
    det: (f64, usize),
    sim: (f64, usize, usize),
    agent: (f64, usize),
    agent_cells: (usize, usize),
}

impl Tally {
    fn add(&mut self, s: &SampleStats) {
        if let Some(d) = s.det {
            self.det.0 += d;
            self.det.1 += 1;
        }
        let sims = s.sim.iter().chain(s.naive.iter());
        for &(l, ok) in sims {
            self.sim.0 += l;
            self.sim.1 += usize::from(ok);
            self.sim.2 += 1;
        }
        if let Some((l, c, n)) = s.agent {
            self.agent.0 += l;
            self.agent.1 += 1;
            self.agent_cells.0 += c;
            self.agent_cells.1 += n;
        }
    }

    fn fill(&self, r: &mut EpochRecord) {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        r.det_loss = mean(self.det.0, self.det.1);
        r.sim_loss = mean(self.sim.0, self.sim.2);
        r.sim_acc = mean(self.sim.1 as f64, self.sim.2);
        r.agent_loss = mean(self.agent.0, self.agent.1);
        r.agent_acc = mean(self.agent_cells.0 as f64, self.agent_cells.1);
    }
}

/// Mean unweighted detection loss over `samples`.
pub fn detection_loss_mean(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    require_nonempty(samples, "validation")?;
    let terms = SampleTerms {
        det: Some(1.0),
        ..Default::default()
    };
    let rev = Reversal { lsa: 0.0, cia: 0.0 };
    let mut sum = 0.0;
    for s in samples {
        let sg = sample_graph(model, s, terms, rev, None, None)?;
        sum += sg.stats.det.expect("detection term requested");
    }
    Ok(sum / samples.len() as f64)
}

/// Fraction of samples whose domain the sim/real discriminator (or the naive
/// baseline's, which scores every agent) classifies correctly. Dropout is off.
pub fn sim_disc_accuracy(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    require_nonempty(samples, "held-out")?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let feats = model.detector.encode_agents(&mut g, &model.store, &s.clouds)?;
        let pe = g.input(model.positional.clone());
        let want = s.domain == Domain::Target;
        if let Some(a) = &model.adapters {
            let f = g.concat(feats[0], pe)?;
            let out = a.lsa_sample::<rand_chacha::ChaCha8Rng>(
                &mut g,
                &model.store,
                LsaInput {
                    features: f,
                    domain: s.domain,
                },
                0.0,
                None,
            )?;
            correct += usize::from((sigmoid(g.value(out.logit).item()) >= 0.5) == want);
            total += 1;
        } else if let Some(d) = &model.naive {
            for &f in &feats {
                let f = g.concat(f, pe)?;
                let pooled = g.mean_spatial(f)?;
                let logit = d.forward::<rand_chacha::ChaCha8Rng>(&mut g, &model.store, pooled, None)?;
                correct += usize::from((sigmoid(g.value(logit).item()) >= 0.5) == want);
                total += 1;
            }
        } else {
            return Err(Error::Invariant("model has no sim/real discriminator".into()));
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Frozen inference on one prepared sample.
pub fn predict(model: &Model, sample: &PreparedSample) -> Result<BoxSet> {
    let mut g = Graph::new();
    let feats = model.detector.encode_agents(&mut g, &model.store, &sample.clouds)?;
    let head = model.detector.fuse_and_predict(&mut g, &model.store, &feats)?;
    decode_boxes(
        &HeadOutput::from_graph(&g, head),
        model.detector.anchors(),
        &model.detector.config.decode,
    )
}

/// One optimiser step over a batch of `(sample, terms)` pairs, in order.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[(PreparedSample, SampleTerms)],
    reversal: Reversal,
    lr: f64,
    dropout_seed: Option<(u64, &[u64])>,
    freeze_detector: bool,
    tally: &mut Tally,
) -> Result<()> {
    let mut grads = Grads::for_store(&model.store);
    let mut rng = dropout_seed.map(|(seed, t)| stream(seed, t));
    for (sample, terms) in batch {
        let sg = sample_graph(model, sample, *terms, reversal, None, rng.as_mut())?;
        accumulate(&sg, &mut grads)?;
        tally.add(&sg.stats);
    }
    if freeze_detector {
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.is_detector_param(id) {
                grads.remove(id);
            }
        }
    }
    adam.step(&mut model.store, &grads, lr);
    Ok(())
}

fn source_batch(
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    order: &[usize],
    epoch: usize,
    step: usize,
) -> Vec<PreparedSample> {
    let b = cfg.train.batch_source;
    order[step * b..((step + 1) * b).min(order.len())]
        .iter()
        .enumerate()
        .map(|(slot, &i)| augmented(&source[i], &cfg.train.augment, cfg.seed, tags::SOURCE_AUGMENT, epoch, step, slot))
        .collect()
}

/// Source-only detector training with early stopping on held-out source frames.
pub fn pretrain_source(
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    run_dir: &Path,
    start: Start,
    mut hooks: RunHooks,
) -> Result<RunOutcome> {
    cfg.validate()?;
    require_nonempty(source, "source")?;
    let (mut model, mut adam, mut state, resumed) = start_model(cfg, Stage::Pretrain, &start)?;
    let mut run = Run::open(run_dir, resumed)?;
    let (train_idx, val_idx) = split_indices(source.len(), cfg.train.early_stop.val_fraction);
    let val: Vec<PreparedSample> = val_idx.iter().map(|&i| source[i].clone()).collect();
    let steps = train_idx.len().div_ceil(cfg.train.batch_source);
    let es = cfg.train.early_stop;

    for epoch in state.epochs_completed..cfg.train.epochs {
        if state.stopped_early {
            break;
        }
        let lr = cfg.train.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, tags::SOURCE_ORDER, &train_idx);
        let mut tally = Tally::default();
        for step in 0..steps {
            hooks.check()?;
            let batch = source_batch(cfg, source, &order, epoch, step);
            let w = 1.0 / batch.len() as f64;
            let batch: Vec<_> = batch
                .into_iter()
                .map(|s| {
                    (
                        s,
                        SampleTerms {
                            det: Some(w),
                            ..Default::default()
                        },
                    )
                })
                .collect();
            let rev = Reversal { lsa: 0.0, cia: 0.0 };
            train_step(&mut model, &mut adam, &batch, rev, lr, None, false, &mut tally)?;
            state.global_step += 1;
        }
        state.epochs_completed = epoch + 1;
        let mut rec = EpochRecord {
            stage: Stage::Pretrain.as_str().into(),
            epoch,
            global_step: state.global_step,
            lr,
            steps,
            ..Default::default()
        };
        tally.fill(&mut rec);
        if !val.is_empty() {
            let v = detection_loss_mean(&model, &val)?;
            rec.val_det_loss = Some(v);
            if es.enabled {
                if state.best_val.is_none_or(|b| v < b - es.min_delta) {
                    state.best_val = Some(v);
                    state.bad_epochs = 0;
                } else {
                    state.bad_epochs += 1;
                    if state.bad_epochs >= es.patience {
                        info!("early stop after epoch {epoch}: no val improvement for {} epochs", es.patience);
                        state.stopped_early = true;
                    }
                }
            }
        }
        info!("pretrain epoch {epoch}: det {:?} val {:?}", rec.det_loss, rec.val_det_loss);
        run.log(rec, &mut hooks)?;
        run.checkpoint(&format!("epoch_{epoch:03}"), &model, &adam, &state)?;
    }
    run.finish(&model, &adam, state)
}

fn adapter_arch(cfg: &ExperimentConfig, method: AdaptMethod) -> AdapterArch {
    AdapterArch {
        kind: match method {
            AdaptMethod::NaiveDiscriminator => AdapterKind::NaiveDiscriminator,
            _ => AdapterKind::Dusa,
        },
        lsa: cfg.lsa,
        cia: cfg.cia,
        naive: cfg.naive,
    }
}

/// Joint detector and adapter training on labelled source and unlabelled target frames.
///
/// Source frames are split exactly as in pretraining, so with zero adapter weights the
/// detector follows the same trajectory as continued pretraining.
pub fn adapt(
    method: AdaptMethod,
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    target: &[PreparedSample],
    run_dir: &Path,
    start: Start,
    mut hooks: RunHooks,
) -> Result<RunOutcome> {
    cfg.validate()?;
    refuse_cold_start(cfg, &start)?;
    require_nonempty(source, "source")?;
    require_nonempty(target, "target")?;
    if target.iter().any(|s| s.domain != Domain::Target) || source.iter().any(|s| s.domain != Domain::Source) {
        return Err(Error::Dataset("adaptation needs source-domain and target-domain frames".into()));
    }
    let stage = method.stage();
    let (mut model, mut adam, mut state, resumed) = start_model(cfg, stage, &start)?;
    model.attach(adapter_arch(cfg, method), derive_seed(cfg.seed, &[tags::INIT, 1]))?;
    let mut run = Run::open(run_dir, resumed)?;

    let frac = cfg.train.early_stop.val_fraction;
    let (src_train, src_val) = split_indices(source.len(), frac);
    let (tgt_train, tgt_val) = split_indices(target.len(), frac);
    let heldout: Vec<PreparedSample> = src_val
        .iter()
        .map(|&i| source[i].clone())
        .chain(tgt_val.iter().map(|&i| target[i].clone()))
        .collect();
    let steps = src_train.len().div_ceil(cfg.train.batch_source);
    let total_steps = (steps * cfg.train.epochs).max(1) as f64;
    let (a1, a2) = (cfg.train.alpha_sim, cfg.train.alpha_agent);
    let lsa_on = method != AdaptMethod::NaiveDiscriminator && cfg.lsa.enabled;
    let cia_on = method != AdaptMethod::NaiveDiscriminator && cfg.cia.enabled;
    let det_on = method != AdaptMethod::FrozenProbe;

    for epoch in state.epochs_completed..cfg.train.epochs {
        let lr = cfg.train.lr_at(epoch);
        let src_order = epoch_order(cfg.seed, epoch, tags::SOURCE_ORDER, &src_train);
        let tgt_order = epoch_order(cfg.seed, epoch, tags::TARGET_ORDER, &tgt_train);
        let mut tally = Tally::default();
        for step in 0..steps {
            hooks.check()?;
            let progress = (epoch * steps + step) as f64 / total_steps;
            let rev = Reversal {
                lsa: cfg.grl.schedule.factor(cfg.grl.lsa_gamma, progress),
                cia: cfg.grl.schedule.factor(cfg.grl.cia_gamma, progress),
            };
            let srcs = source_batch(cfg, source, &src_order, epoch, step);
            let bt = cfg.train.batch_target;
            let tgts: Vec<PreparedSample> = (0..bt)
                .map(|slot| {
                    let i = tgt_order[(step * bt + slot) % tgt_order.len()];
                    augmented(&target[i], &cfg.train.augment, cfg.seed, tags::TARGET_AUGMENT, epoch, step, slot)
                })
                .collect();
            let (ns, nt) = (srcs.len(), tgts.len());
            let b = (ns + nt) as f64;
            let agents: usize = srcs.iter().chain(&tgts).map(|s| s.clouds.len()).sum();
            let naive = (method == AdaptMethod::NaiveDiscriminator).then_some(a1 / agents as f64);
            let mut batch = Vec::with_capacity(ns + nt);
            for s in srcs {
                let terms = SampleTerms {
                    det: det_on.then_some(1.0 / ns as f64),
                    lsa: lsa_on.then_some(a1 / b),
                    cia: None,
                    naive,
                };
                batch.push((s, terms));
            }
            for s in tgts {
                let terms = SampleTerms {
                    det: None,
                    lsa: lsa_on.then_some(a1 / b),
                    cia: cia_on.then_some(a2 / nt as f64),
                    naive,
                };
                batch.push((s, terms));
            }
            let tag = [tags::DROPOUT, epoch as u64, step as u64];
            train_step(
                &mut model,
                &mut adam,
                &batch,
                rev,
                lr,
                Some((cfg.seed, &tag)),
                method == AdaptMethod::FrozenProbe,
                &mut tally,
            )?;
            state.global_step += 1;
        }
        state.epochs_completed = epoch + 1;
        let mut rec = EpochRecord {
            stage: stage.as_str().into(),
            epoch,
            global_step: state.global_step,
            lr,
            steps,
            ..Default::default()
        };
        tally.fill(&mut rec);
        if !heldout.is_empty() && (lsa_on || method == AdaptMethod::NaiveDiscriminator) {
            rec.heldout_sim_acc = Some(sim_disc_accuracy(&model, &heldout)?);
        }
        info!(
            "{} epoch {epoch}: det {:?} sim {:?} agent {:?} heldout acc {:?}",
            stage.as_str(),
            rec.det_loss,
            rec.sim_loss,
            rec.agent_loss,
            rec.heldout_sim_acc
        );
        run.log(rec, &mut hooks)?;
        run.checkpoint(&format!("epoch_{epoch:03}"), &model, &adam, &state)?;
    }
    run.finish(&model, &adam, state)
}

pub fn adapt_dusa(
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    target: &[PreparedSample],
    run_dir: &Path,
    start: Start,
    hooks: RunHooks,
) -> Result<RunOutcome> {
    adapt(AdaptMethod::Dusa, cfg, source, target, run_dir, start, hooks)
}

pub fn baseline_naive_discriminator(
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    target: &[PreparedSample],
    run_dir: &Path,
    start: Start,
    hooks: RunHooks,
) -> Result<RunOutcome> {
    adapt(AdaptMethod::NaiveDiscriminator, cfg, source, target, run_dir, start, hooks)
}

/// Frozen-inference pseudo-labels of every target frame, filtered by `tau`.
pub fn pseudo_label(model: &Model, target: &[PreparedSample], cfg: &ExperimentConfig) -> Result<Vec<BoxSet>> {
    target
        .iter()
        .map(|s| {
            Ok(predict(model, s)?
                .into_iter()
                .filter(|b| cfg.selftrain.keeps(b.score.unwrap_or(0.0)))
                .collect())
        })
        .collect()
}

/// Alternates pseudo-labelling of the target frames with detection finetuning on them.
/// Labelled source frames join the finetuning set when `selftrain.mix_source` is on.
pub fn baseline_self_training(
    cfg: &ExperimentConfig,
    source: &[PreparedSample],
    target: &[PreparedSample],
    run_dir: &Path,
    start: Start,
    mut hooks: RunHooks,
) -> Result<RunOutcome> {
    cfg.validate()?;
    refuse_cold_start(cfg, &start)?;
    require_nonempty(target, "target")?;
    let pl = cfg.selftrain;
    if pl.mix_source {
        require_nonempty(source, "source")?;
    }
    let (mut model, mut adam, mut state, resumed) = start_model(cfg, Stage::SelfTrain, &start)?;
    let mut run = Run::open(run_dir, resumed)?;
    let first_round = state.round.unwrap_or(0);

    for round in first_round..pl.rounds {
        let labels = pseudo_label(&model, target, cfg)?;
        let n_labels: usize = labels.iter().map(Vec::len).sum();
        let mut pool: Vec<PreparedSample> = target
            .iter()
            .zip(labels)
            .filter(|(_, l)| !l.is_empty())
            .map(|(s, l)| PreparedSample {
                boxes: Some(l),
                ..s.clone()
            })
            .collect();
        if pl.mix_source {
            pool.extend(source.iter().cloned());
        }
        info!("self-training round {round}: {n_labels} pseudo-labels on {} frames", pool.len());
        if n_labels == 0 {
            warn!("self-training round {round} produced no pseudo-labels; skipping finetuning");
        }
        let items: Vec<usize> = (0..pool.len()).collect();
        let bs = cfg.train.batch_target;
        let steps = if n_labels == 0 { 0 } else { items.len().div_ceil(bs) };
        for e in 0..pl.epochs_per_round {
            let epoch = round * pl.epochs_per_round + e;
            let lr = cfg.train.lr_at(epoch);
            let order = epoch_order(cfg.seed, epoch, tags::TARGET_ORDER, &items);
            let mut tally = Tally::default();
            for step in 0..steps {
                hooks.check()?;
                let batch: Vec<_> = order[step * bs..((step + 1) * bs).min(order.len())]
                    .iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        augmented(&pool[i], &cfg.train.augment, cfg.seed, tags::TARGET_AUGMENT, epoch, step, slot)
                    })
                    .collect();
                let w = 1.0 / batch.len() as f64;
                let batch: Vec<_> = batch
                    .into_iter()
                    .map(|s| {
                        (
                            s,
                            SampleTerms {
                                det: Some(w),
                                ..Default::default()
                            },
                        )
                    })
                    .collect();
                let rev = Reversal { lsa: 0.0, cia: 0.0 };
                train_step(&mut model, &mut adam, &batch, rev, lr, None, false, &mut tally)?;
                state.global_step += 1;
            }
            state.epochs_completed = epoch + 1;
            let mut rec = EpochRecord {
                stage: Stage::SelfTrain.as_str().into(),
                round: Some(round),
                epoch,
                global_step: state.global_step,
                lr,
                steps,
                pseudo_labels: Some(n_labels),
                ..Default::default()
            };
            tally.fill(&mut rec);
            run.log(rec, &mut hooks)?;
        }
        state.round = Some(round + 1);
        run.checkpoint(&format!("round_{round:02}"), &model, &adam, &state)?;
    }
    run.finish(&model, &adam, state)
}

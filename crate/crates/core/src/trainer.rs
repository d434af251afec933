//! Unsupervised training against the two-hot pseudo target.
//!
//! Each step matrixes every problem of the batch, optionally adds a variant
//! whose candidates were partly replaced by panels of other problems, and
//! minimizes the mean binary cross-entropy of all variants with Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::net::{ModelConfig, NcdModel, RowBank, FEATURE_DIM, PARAM_NAMES};
use crate::problem::{matrixize, matrixize_columns, pseudo_target, replace_negatives, DonorPool, ProblemView, ReplacementRecord, ROWS};
use crate::synth::CONTEXT_PANELS;
use crate::tensor::{dropout_mask, Float, Graph, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Candidates replaced per problem in the negative variant.
    pub k: usize,
    pub dropout: f64,
    pub seed: u64,
    pub use_negatives: bool,
    pub use_decentralization: bool,
    pub fuse_columns: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 64,
            epochs: 8,
            k: 4,
            dropout: 0.5,
            seed: 0,
            use_negatives: true,
            use_decentralization: true,
            fuse_columns: false,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            v.push(format!("train.lr must be a positive number, got {}", self.lr));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                v.push(format!("train.betas[{i}] must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            v.push(format!("train.eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if self.k > 8 {
            v.push(format!("train.k must lie in [0, 8], got {}", self.k));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("train.dropout must lie in [0, 1), got {}", self.dropout));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(crate::config::ConfigError::Invalid(v).into())
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { dropout: self.dropout as Float, decentralize: self.use_decentralization, fuse_columns: self.fuse_columns }
    }

    /// CRC-32 of the canonical JSON form, as 8 hex digits.
    pub fn fingerprint(&self) -> String {
        format!("{:08x}", crc32fast::hash(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    /// Fingerprint that ignores the epoch budget, so a run can be extended.
    fn resume_fingerprint(&self) -> u32 {
        let c = TrainConfig { epochs: 0, ..self.clone() };
        crc32fast::hash(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Adam hyperparameters in tensor precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { lr: c.lr, beta1: c.betas[0], beta2: c.betas[1], eps: c.eps }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> std::result::Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Shape {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = (1.0 - config.beta1.powi(t)) as Float;
    let bc2 = (1.0 - config.beta2.powi(t)) as Float;
    let (b1, b2) = (config.beta1 as Float, config.beta2 as Float);
    let (lr, eps) = (config.lr as Float, config.eps as Float);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_REPLACE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_INIT: u64 = 4;

/// Independent generator per (seed, purpose, index), so toggling one use
/// of randomness leaves the others unchanged.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let key = crate::synth::problem_seed(seed ^ purpose.wrapping_mul(0xA076_1D64_78BD_642F), index);
    ChaCha8Rng::seed_from_u64(key)
}

/// Model initialization used by training and by the untrained baseline.
pub fn initial_model(config: &TrainConfig) -> NcdModel {
    let seed = crate::synth::problem_seed(config.seed ^ STREAM_INIT.wrapping_mul(0xA076_1D64_78BD_642F), 0);
    NcdModel::init(seed, config.model_config())
}

/// Binary cross-entropy of one logit, stable form.
pub fn row_loss(logit: Float, label: u8) -> Float {
    let y = Float::from(label);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Per-problem loss split into rows kept from the original problem and rows
/// whose candidate was replaced. Labels are the pseudo target in both parts.
pub fn split_loss(logits: &[Float; ROWS], record: &ReplacementRecord) -> (Float, Float) {
    let target = pseudo_target();
    let replaced = record.replaced_rows();
    let mut kept = 0.0;
    let mut swapped = 0.0;
    for (j, (&l, &y)) in logits.iter().zip(&target.labels).enumerate() {
        if replaced.contains(&j) {
            swapped += row_loss(l, y);
        } else {
            kept += row_loss(l, y);
        }
    }
    (kept, swapped)
}

/// Everything one optimizer step needs besides the model.
struct StepPlan {
    images: Tensor,
    /// Row indices (into `images`) of every scored instance.
    instances: Vec<[usize; ROWS]>,
    mask: Option<Tensor>,
    /// Instance groups summed into the original-variant logits.
    original: Vec<Vec<usize>>,
    /// Same for the replaced variant; `None` without negatives.
    replaced: Option<Vec<Vec<usize>>>,
}

fn plan_step(batch: &[ProblemView<'_>], pool: &DonorPool<'_>, config: &TrainConfig, step: u64) -> Result<StepPlan> {
    let size = batch[0].panels().first().map_or(0, |p| p.size);
    let mut bank = RowBank::new(size);
    let views = if config.fuse_columns { 2 } else { 1 };
    let mut instances: Vec<[usize; ROWS]> = Vec::new();
    let mut original = vec![Vec::with_capacity(batch.len()); views];
    for view in batch {
        let panels = view.panel_refs();
        let rows = matrixize(view.problem_id(), panels.len())?;
        original[0].push(instances.len());
        instances.push(bank.push_matrix(&panels, &rows)?);
        if config.fuse_columns {
            let cols = matrixize_columns(view.problem_id(), panels.len())?;
            original[1].push(instances.len());
            instances.push(bank.push_matrix(&panels, &cols)?);
        }
    }
    let base_instances = instances.len();

    // Masks are drawn for the original instances only; a replaced variant
    // reuses the mask of the instance it was derived from.
    let mut masks: Vec<Tensor> = Vec::new();
    if config.dropout > 0.0 {
        let mut rng = stream_rng(config.seed, STREAM_DROPOUT, step);
        for _ in 0..base_instances {
            masks.push(dropout_mask(&[ROWS, FEATURE_DIM], config.dropout as Float, &mut rng)?);
        }
    }

    let replaced = if config.use_negatives {
        let mut rng = stream_rng(config.seed, STREAM_REPLACE, step);
        let mut groups = vec![Vec::with_capacity(batch.len()); views];
        for (i, view) in batch.iter().enumerate() {
            let (panels, record) = replace_negatives(*view, config.k, pool, &mut rng)?;
            for v in 0..views {
                let src = original[v][i];
                if record.replaced_slots.is_empty() {
                    groups[v].push(src);
                    continue;
                }
                let mut ids = instances[src];
                for &slot in &record.replaced_slots {
                    let candidate = panels[CONTEXT_PANELS + slot];
                    let row = if v == 0 { [panels[6], panels[7], candidate] } else { [panels[2], panels[5], candidate] };
                    ids[2 + slot] = bank.push(row)?;
                }
                groups[v].push(instances.len());
                instances.push(ids);
                if !masks.is_empty() {
                    masks.push(masks[src].clone());
                }
            }
        }
        Some(groups)
    } else {
        None
    };

    let mask = if masks.is_empty() {
        None
    } else {
        let data: Vec<Float> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
        Some(Tensor::new(vec![instances.len() * ROWS, FEATURE_DIM], data)?)
    };
    Ok(StepPlan { images: bank.into_tensor()?, instances, mask, original, replaced })
}

fn param_norms(model: &NcdModel) -> Vec<(String, Float)> {
    PARAM_NAMES
        .iter()
        .zip(&model.params.tensors)
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v * v).sum::<Float>().sqrt()))
        .collect()
}

/// Training loss of `batch` at `step` and its gradient for every parameter.
///
/// Replacement and dropout draws depend only on `(config.seed, step)`, so
/// this is a deterministic function of the parameters.
pub fn batch_loss(
    model: &NcdModel,
    batch: &[ProblemView<'_>],
    pool: &DonorPool<'_>,
    config: &TrainConfig,
    step: u64,
) -> Result<(Float, Vec<Tensor>)> {
    let (g, p, loss, value) = loss_graph(model, batch, pool, config, step)?;
    let mut grads = g.backward(loss)?;
    let grads = p.vars.iter().map(|&v| grads.take(v).expect("parameters require grad")).collect();
    Ok((value, grads))
}

/// The loss [`batch_loss`] would return, without the backward pass.
pub fn batch_loss_value(
    model: &NcdModel,
    batch: &[ProblemView<'_>],
    pool: &DonorPool<'_>,
    config: &TrainConfig,
    step: u64,
) -> Result<Float> {
    loss_graph(model, batch, pool, config, step).map(|(_, _, _, value)| value)
}

fn loss_graph(
    model: &NcdModel,
    batch: &[ProblemView<'_>],
    pool: &DonorPool<'_>,
    config: &TrainConfig,
    step: u64,
) -> Result<(Graph, crate::net::ParamVars, crate::tensor::Var, Float)> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let plan = plan_step(batch, pool, config, step)?;
    let numeric = |cause: String, model: &NcdModel| Error::NonFiniteLoss {
        step,
        cause,
        batch_ids: batch.iter().map(|p| p.problem_id()).collect(),
        param_norms: param_norms(model),
    };
    let forward = || -> std::result::Result<(Graph, crate::net::ParamVars, crate::tensor::Var), TensorError> {
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let images = g.constant(plan.images.clone());
        let feats = model.extract(&mut g, &p, images)?;
        let logits = model.score_instances(&mut g, &p, feats, &plan.instances, plan.mask.as_ref())?;
        let target_row: Vec<Float> = pseudo_target().labels.iter().map(|&y| Float::from(y)).collect();
        let targets = Tensor::new(vec![batch.len(), ROWS], target_row.repeat(batch.len()))?;
        let fused = |g: &mut Graph, groups: &[Vec<usize>]| -> std::result::Result<_, TensorError> {
            let mut acc = g.gather(logits, &groups[0])?;
            for extra in &groups[1..] {
                let more = g.gather(logits, extra)?;
                acc = g.add(acc, more)?;
            }
            g.bce_with_logits(acc, &targets)
        };
        let mut loss = fused(&mut g, &plan.original)?;
        if let Some(groups) = &plan.replaced {
            let rep = fused(&mut g, groups)?;
            let both = g.add(loss, rep)?;
            loss = g.scale(both, 0.5)?;
        }
        Ok((g, p, loss))
    };
    let (g, p, loss) = forward().map_err(|e| numeric(e.to_string(), model))?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(numeric(format!("loss = {value}"), model));
    }
    Ok((g, p, loss, value))
}

pub fn train_step(
    model: &mut NcdModel,
    adam: &mut AdamState,
    batch: &[ProblemView<'_>],
    pool: &DonorPool<'_>,
    config: &TrainConfig,
    step: u64,
) -> Result<Float> {
    let (value, grads) = batch_loss(model, batch, pool, config, step)?;
    adam_step(&mut model.params.tensors, &grads, adam, &AdamConfig::from(config))?;
    if model.params.tensors.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            cause: "parameters became non-finite".into(),
            batch_ids: batch.iter().map(|p| p.problem_id()).collect(),
            param_norms: param_norms(model),
        });
    }
    Ok(value)
}

/// One line of the metrics journal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub k: usize,
    pub wall_ms: u64,
}

/// Training progress: model, optimizer, and position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: NcdModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Self {
        let model = initial_model(config);
        let adam = AdamState::new(&model.params.tensors);
        Self { model, adam, epoch: 0, step: 0 }
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            ck.push(format!("optim.m.{name}"), self.adam.m[i].clone());
            ck.push(format!("optim.v.{name}"), self.adam.v[i].clone());
        }
        ck.push("optim.t", Tensor::scalar(self.adam.t as Float));
        ck.push("state.epoch", Tensor::scalar(self.epoch as Float));
        ck.push("state.step", Tensor::scalar(self.step as Float));
        let fp = config.resume_fingerprint().to_le_bytes().map(Float::from).to_vec();
        ck.push("state.config_fingerprint", Tensor::new(vec![4], fp).expect("4 bytes"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let model = NcdModel::from_checkpoint(ck)?;
        let stored: Vec<u8> = ck.require("state.config_fingerprint")?.data().iter().map(|&b| b as u8).collect();
        if stored != config.resume_fingerprint().to_le_bytes() {
            return Err(
                crate::config::ConfigError::Invalid(vec!["checkpoint was written with a different training configuration".into()]).into()
            );
        }
        let mut adam = AdamState::new(&model.params.tensors);
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            adam.m[i] = ck.require(&format!("optim.m.{name}"))?.clone();
            adam.v[i] = ck.require(&format!("optim.v.{name}"))?.clone();
        }
        adam.t = ck.scalar("optim.t")? as u64;
        Ok(Self { model, adam, epoch: ck.scalar("state.epoch")? as usize, step: ck.scalar("state.step")? as u64 })
    }
}

pub fn steps_per_epoch(problems: usize, batch_size: usize) -> usize {
    problems.div_ceil(batch_size.max(1))
}

/// Run the remaining epochs of `state`, calling `on_step` after every step.
pub fn train_epochs(
    state: &mut TrainState,
    data: &[ProblemView<'_>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&MetricRecord),
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let pool = DonorPool::new(data);
    let start = Instant::now();
    while state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE, state.epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ProblemView> = chunk.iter().map(|&i| data[i]).collect();
            let loss = train_step(&mut state.model, &mut state.adam, &batch, &pool, config, state.step)?;
            on_step(&MetricRecord {
                step: state.step,
                epoch: state.epoch,
                loss: f64::from(loss),
                lr: config.lr,
                k: if config.use_negatives { config.k } else { 0 },
                wall_ms: start.elapsed().as_millis() as u64,
            });
            state.step += 1;
        }
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Where a run keeps its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ncdm")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ncdm"))
    }

    pub fn journal(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRecord>,
}

/// Train to `config.epochs`, writing a checkpoint per epoch and a metrics
/// journal when `out` is given. `resume` continues from a checkpoint.
pub fn run_training(data: &[ProblemView<'_>], config: &TrainConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::read(path)?, config)?,
        None => TrainState::fresh(config),
    };
    let run = out.map(|d| RunDir { dir: d.to_path_buf() });
    let mut metrics = Vec::new();
    let mut journal = None;
    if let Some(run) = &run {
        std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
        let path = run.journal();
        let kept = if resume.is_some() { read_journal(&path)?.into_iter().filter(|r| r.step < state.step).collect() } else { Vec::new() };
        let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(|e| Error::io(&path, e))?;
        for r in &kept {
            writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(&path, e))?;
        }
        metrics = kept;
        journal = Some((f, path));
    }
    let mut io_error = None;
    train_epochs(
        &mut state,
        data,
        config,
        |rec| {
            if let Some((f, path)) = journal.as_mut() {
                if let Err(e) = writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")) {
                    io_error.get_or_insert(Error::io(path.clone(), e));
                }
            }
            metrics.push(rec.clone());
        },
        |st| {
            if let Some(run) = &run {
                let ck = st.to_checkpoint(config);
                ck.write(&run.epoch_checkpoint(st.epoch))?;
                ck.write(&run.checkpoint())?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Some(run) = &run {
        if config.epochs == 0 || state.epoch == 0 {
            state.to_checkpoint(config).write(&run.checkpoint())?;
        }
    }
    Ok(TrainOutcome { state, metrics })
}

pub fn read_journal(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

//! MLP encoder, joint-loss backpropagation and the SGD training loop.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentMasks, ViewMode};
use crate::checkpoint::{Checkpoint, Tensor};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{classification_batch, joint_loss, ClassifierHead, ContrastiveConfig};
use crate::margin::{batch_margin, ema_update, MarginState};
use crate::numerics::{matmul, matmul_nt, matmul_tn, normalize_rows, normalize_rows_backward, EmbeddingBatch, Mat};
use crate::pairing::build_plan;

// Independent generator streams derived from one seed.
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_MASKS: u64 = 2;
const STREAM_INPUT_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Affine layer `y = x W^T + b` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Mat::from_vec(output, input, weight).expect("finite init"),
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        let mut y = matmul_nt(x, &self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    fn backward(&self, x: &Mat, grad_out: &Mat, grad: &mut Linear) -> Mat {
        grad.weight = matmul_tn(grad_out, x);
        grad.bias = vec![0.0; self.bias.len()];
        for r in 0..grad_out.rows() {
            for (b, g) in grad.bias.iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        matmul(grad_out, &self.weight)
    }
}

/// `tanh` trunk followed by a linear embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub trunk: Vec<Linear>,
    pub embed: Linear,
}

/// Activations saved by the trunk forward pass; `acts[0]` is the input.
struct TrunkCache {
    acts: Vec<Mat>,
}

impl TrunkCache {
    fn output(&self) -> &Mat {
        self.acts.last().expect("input is always cached")
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut trunk = Vec::with_capacity(cfg.hidden.len());
        let mut width = input_dim;
        for &h in &cfg.hidden {
            trunk.push(Linear::init(width, h, rng));
            width = h;
        }
        let embed = Linear::init(width, cfg.embed_dim, rng);
        Encoder { trunk, embed }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.embed).input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.output_dim()
    }

    fn trunk_forward(&self, x: &Mat) -> Result<TrunkCache> {
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        acts.push(x.clone());
        for layer in &self.trunk {
            let mut z = layer.forward(acts.last().unwrap())?;
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            acts.push(z);
        }
        Ok(TrunkCache { acts })
    }

    fn trunk_backward(&self, cache: &TrunkCache, grad_out: Mat, grads: &mut [Linear]) {
        let mut g = grad_out;
        for (l, layer) in self.trunk.iter().enumerate().rev() {
            let a = &cache.acts[l + 1];
            for (gi, ai) in g.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *gi *= 1.0 - ai * ai;
            }
            g = layer.backward(&cache.acts[l], &g, &mut grads[l]);
        }
    }

    /// Trunk output for each input row.
    pub fn hidden(&self, x: &Mat) -> Result<Mat> {
        let mut cache = self.trunk_forward(x)?;
        Ok(cache.acts.pop().expect("input is always cached"))
    }

    /// Unit-norm embeddings, no augmentation.
    pub fn embed(&self, x: &Mat) -> Result<Mat> {
        let mut e = self.embed.forward(&self.hidden(x)?)?;
        normalize_rows(&mut e)?;
        Ok(e)
    }

    /// Unit-norm two-view embeddings through the given dropout channels.
    pub fn embed_views(&self, x: &Mat, masks: &AugmentMasks) -> Result<Mat> {
        let views = masks.apply(&self.hidden(x)?)?;
        let mut e = self.embed.forward(&views)?;
        normalize_rows(&mut e)?;
        Ok(e)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut push = |prefix: String, l: &Linear| {
            out.push(Tensor {
                name: format!("{prefix}.weight"),
                dims: vec![l.weight.rows(), l.weight.cols()],
                data: l.weight.as_slice().to_vec(),
            });
            out.push(Tensor {
                name: format!("{prefix}.bias"),
                dims: vec![l.bias.len()],
                data: l.bias.clone(),
            });
        };
        for (i, l) in self.trunk.iter().enumerate() {
            push(format!("trunk.{i}"), l);
        }
        push("embed".into(), &self.embed);
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let linear = |prefix: &str| -> Result<Option<Linear>> {
            let (Some(w), Some(b)) = (ckpt.get(&format!("{prefix}.weight")), ckpt.get(&format!("{prefix}.bias")))
            else {
                return Ok(None);
            };
            if w.dims.len() != 2 || b.dims.len() != 1 || b.dims[0] != w.dims[0] {
                return Err(Error::Corrupt(format!("tensor shapes of {prefix} are inconsistent")));
            }
            Ok(Some(Linear {
                weight: Mat::from_vec(w.dims[0], w.dims[1], w.data.clone())?,
                bias: b.data.clone(),
            }))
        };
        let mut trunk = Vec::new();
        while let Some(l) = linear(&format!("trunk.{}", trunk.len()))? {
            trunk.push(l);
        }
        let embed = linear("embed")?.ok_or_else(|| Error::Corrupt("checkpoint has no embed layer".into()))?;
        let enc = Encoder { trunk, embed };
        let mut width = enc.input_dim();
        for l in enc.trunk.iter().chain(std::iter::once(&enc.embed)) {
            if l.input_dim() != width {
                return Err(Error::Corrupt("layer widths do not chain".into()));
            }
            width = l.output_dim();
        }
        Ok(enc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Model {
    pub fn new(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        let mut rng = stream(cfg.seed, STREAM_INIT);
        let encoder = Encoder::new(input_dim, &cfg.model, &mut rng);
        let d = cfg.model.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let w = (0..d * classes).map(|_| rng.random_range(-bound..bound)).collect();
        let head = ClassifierHead::new(Mat::from_vec(d, classes, w)?, cfg.loss.s, cfg.loss.margin(), cfg.loss.head)?
            .with_arc_extension(cfg.loss.arc_extension);
        Ok(Model { encoder, head })
    }

    /// Parameter slices in a fixed order: trunk weights and biases, embed,
    /// head.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder.trunk {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.encoder.embed.weight.as_mut_slice());
        out.push(&mut self.encoder.embed.bias);
        out.push(self.head.weight.as_mut_slice());
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            trunk: self.encoder.trunk.iter().map(Linear::zeros_like).collect(),
            embed: self.encoder.embed.zeros_like(),
            head: Mat::zeros(self.head.weight.rows(), self.head.weight.cols()),
        }
    }

    /// Predicted class per row: the class vector with the largest cosine.
    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let e = self.encoder.embed(x)?;
        let nh = self.head.normalized()?;
        let cos = matmul_nt(&e, &nh.unit);
        Ok((0..cos.rows())
            .map(|r| {
                cos.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &c)| if c > b.1 { (j, c) } else { b })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let pred = self.predict(&ds.inputs)?;
        let truth = ds.class_indices();
        Ok(pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.encoder.to_tensors();
        tensors.push(Tensor {
            name: "head.weight".into(),
            dims: vec![self.head.weight.rows(), self.head.weight.cols()],
            data: self.head.weight.as_slice().to_vec(),
        });
        Checkpoint { tensors }
    }

    /// Rebuild a model; the head's scale, margin and kind come from `cfg`.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let encoder = Encoder::from_checkpoint(ckpt)?;
        let w = ckpt
            .get("head.weight")
            .ok_or_else(|| Error::Corrupt("checkpoint has no head.weight".into()))?;
        if w.dims.len() != 2 || w.dims[0] != encoder.embed_dim() {
            return Err(Error::Corrupt("head.weight shape does not match the embedding".into()));
        }
        let head = ClassifierHead::new(
            Mat::from_vec(w.dims[0], w.dims[1], w.data.clone())?,
            cfg.loss.s,
            cfg.loss.margin(),
            cfg.loss.head,
        )?
        .with_arc_extension(cfg.loss.arc_extension);
        let expected = 2 * encoder.trunk.len() + 3;
        if ckpt.tensors.len() != expected {
            return Err(Error::Corrupt(format!(
                "expected {expected} tensors, found {}",
                ckpt.tensors.len()
            )));
        }
        Ok(Model { encoder, head })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?, cfg)
    }
}

/// Gradients mirroring the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<Linear>,
    pub embed: Linear,
    pub head: Mat,
}

impl Gradients {
    /// Same order as [`Model::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.trunk {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.embed.weight.as_slice());
        out.push(&self.embed.bias);
        out.push(self.head.as_slice());
        out
    }
}

/// How the views of one step are formed.
#[derive(Debug, Clone)]
pub enum Views {
    /// Two dropout channels after the trunk.
    Feature(AugmentMasks),
    /// Pre-augmented 2N x d_in inputs, both passed through the whole encoder.
    Input(Mat),
    /// One clean view; classification only.
    Single,
}

impl Views {
    /// Draw the views of one step.
    pub fn sample<R: Rng + ?Sized>(
        cfg: &AugmentConfig,
        inputs: &Mat,
        hidden_dim: usize,
        mask_rng: &mut R,
        noise_rng: &mut R,
    ) -> Result<Views> {
        Ok(match cfg.mode {
            ViewMode::Feature => Views::Feature(AugmentMasks::sample(cfg, inputs.rows(), hidden_dim, mask_rng)?),
            ViewMode::Input => {
                let (n, d) = (inputs.rows(), inputs.cols());
                let mut out = Mat::zeros(2 * n, d);
                for v in 0..2 {
                    for i in 0..n {
                        let dst = out.row_mut(v * n + i);
                        for (o, x) in dst.iter_mut().zip(inputs.row(i)) {
                            let noisy = x + cfg.input_noise * noise_rng.sample::<f64, _>(StandardNormal);
                            *o = if noise_rng.random::<f64>() < cfg.input_mask { 0.0 } else { noisy };
                        }
                    }
                }
                Views::Input(out)
            }
            ViewMode::None => Views::Single,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub total: f64,
    pub classification: f64,
    pub contrastive: f64,
    /// Batch margin of this step (0 for single-view steps).
    pub m_k: f64,
    /// Margin state after folding in `m_k`; the loss used the incoming `m_c`.
    pub margin: MarginState,
    pub grads: Gradients,
}

/// One forward and backward pass of the joint objective.
///
/// The contrastive loss reads the incoming adaptive margin as a constant;
/// this batch's margin is folded in afterwards.
pub fn forward_backward(
    model: &Model,
    inputs: &Mat,
    labels: &[usize],
    views: &Views,
    margin: &MarginState,
    cfg: &ContrastiveConfig,
) -> Result<StepOutput> {
    if !inputs.is_finite() {
        return Err(Error::NonFinite { context: "inputs" });
    }
    if labels.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.rows(),
            actual: labels.len(),
        });
    }
    let enc = &model.encoder;
    let trunk_in = match views {
        Views::Input(x2) => {
            if x2.rows() != 2 * inputs.rows() {
                return Err(Error::DimensionMismatch {
                    expected: 2 * inputs.rows(),
                    actual: x2.rows(),
                });
            }
            x2
        }
        _ => inputs,
    };
    let cache = enc.trunk_forward(trunk_in)?;
    let emb_in = match views {
        Views::Feature(masks) => masks.apply(cache.output())?,
        _ => cache.output().clone(),
    };
    let mut unit = enc.embed.forward(&emb_in)?;
    let norms = normalize_rows(&mut unit)?;

    let n = inputs.rows();
    let (total, classification, contrastive, m_k, new_margin, grad_unit, grad_head) = match views {
        Views::Single => {
            let r = classification_batch(&unit, labels, &model.head, 1.0 / n as f64)?;
            (r.value, r.value, 0.0, 0.0, *margin, r.grad_embeddings, r.grad_weights)
        }
        _ => {
            let batch = EmbeddingBatch::paired(unit, labels)?;
            let plan = build_plan(n, labels, cfg.protocol, cfg.scm)?;
            let m_k = batch_margin(&batch, &plan)?;
            let next = ema_update(*margin, m_k)?;
            let j = joint_loss(&batch, &model.head, &plan, margin.m_c, cfg)?;
            unit = batch.embeddings;
            (
                j.result.value,
                j.classification,
                j.contrastive,
                m_k,
                next,
                j.result.grad_embeddings,
                j.result.grad_weights,
            )
        }
    };

    let mut grads = model.zero_grads();
    grads.head = grad_head.expect("classifier gradient always present");
    let grad_e = normalize_rows_backward(&unit, &norms, &grad_unit);
    let grad_emb_in = enc.embed.backward(&emb_in, &grad_e, &mut grads.embed);
    let grad_hidden = match views {
        Views::Feature(masks) => masks.backward(&grad_emb_in),
        _ => grad_emb_in,
    };
    enc.trunk_backward(&cache, grad_hidden, &mut grads.trunk);

    if !total.is_finite() {
        return Err(Error::NonFinite { context: "loss" });
    }
    Ok(StepOutput {
        total,
        classification,
        contrastive,
        m_k,
        margin: new_margin,
        grads,
    })
}

/// Momentum buffers, one per parameter tensor; created on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            index: params.len().min(grads.len()),
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::ShapeMismatch {
            index: state.velocity.len().min(params.len()),
            expected: params.len(),
            actual: state.velocity.len(),
        });
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::ShapeMismatch {
                index: i,
                expected: p.len(),
                actual: if p.len() != g.len() { g.len() } else { v.len() },
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Step schedule: the initial rate divided by 10 at every milestone reached.
pub fn lr_at(epoch: usize, initial: f64, milestones: &[usize]) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count();
    initial * 10f64.powi(-(drops as i32))
}

/// Class-balanced sampler: each batch draws `P` distinct identities and
/// fills `N` slots round-robin from their shuffled samples.
pub struct BatchSampler {
    groups: Vec<Vec<usize>>,
    batch: usize,
    per_batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(groups: Vec<Vec<usize>>, batch: usize, identities_per_batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        let nonempty = groups.iter().filter(|g| !g.is_empty()).count();
        if nonempty < 2 {
            return Err(Error::DegenerateBatch(format!(
                "{nonempty} identities available, a batch needs at least 2"
            )));
        }
        if batch < 2 {
            return Err(Error::DegenerateBatch(format!("batch size {batch} is below 2")));
        }
        let groups = groups.into_iter().filter(|g| !g.is_empty()).collect();
        Ok(BatchSampler {
            groups,
            batch,
            per_batch: identities_per_batch.max(2),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<usize>> {
        let p = self.per_batch.min(self.groups.len());
        let classes = sample_indices(&mut self.rng, self.groups.len(), p).into_vec();
        let per_class = self.batch.div_ceil(p);
        let draws: Vec<Vec<usize>> = classes
            .iter()
            .map(|&c| {
                let g = &self.groups[c];
                let k = per_class.min(g.len());
                sample_indices(&mut self.rng, g.len(), k)
                    .into_iter()
                    .map(|i| g[i])
                    .collect()
            })
            .collect();
        // slots 0 and 1 always come from different identities
        Ok((0..self.batch).map(|s| draws[s % p][(s / p) % draws[s % p].len()]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub classification: f64,
    pub contrastive: f64,
    pub total: f64,
    pub m_k: f64,
    pub m_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Serialize)]
struct MarginRow {
    step: u64,
    m_k: f64,
    m_c: f64,
}

impl TrainLog {
    pub fn m_c_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.m_c).collect()
    }

    /// Write `trainlog.csv`, `margin.csv` and `epochs.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_csv(&dir.join("trainlog.csv"), &self.steps)?;
        let margin: Vec<MarginRow> = self
            .steps
            .iter()
            .map(|s| MarginRow {
                step: s.step,
                m_k: s.m_k,
                m_c: s.m_c,
            })
            .collect();
        write_csv(&dir.join("margin.csv"), &margin)?;
        write_csv(&dir.join("epochs.csv"), &self.epochs)?;
        Ok(())
    }

    pub fn read_steps(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize().map(|row| row.map_err(csv_err)).collect()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub margin: MarginState,
}

/// Run the full schedule on `train`, optionally evaluating on `eval`.
pub fn train(cfg: &TrainConfig, train: &Dataset, eval_ds: Option<&Dataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.num_identities() < 2 {
        return Err(Error::DegenerateBatch("training set has fewer than 2 identities".into()));
    }
    let mut model = Model::new(cfg, train.input_dim(), train.num_identities())?;
    let classes = train.class_indices();
    let mut sampler = BatchSampler::new(
        train.indices_by_class(),
        cfg.train.batch_size,
        cfg.train.identities_per_batch,
        stream(cfg.seed, STREAM_SAMPLER),
    )?;
    let mut mask_rng = stream(cfg.augment_seed(), STREAM_MASKS);
    let mut noise_rng = stream(cfg.augment_seed(), STREAM_INPUT_NOISE);
    let con = cfg.contrastive();
    let mut margin = MarginState::from_config(&cfg.margin);
    let mut sgd = SgdState::default();
    let mut log = TrainLog::default();
    let steps_per_epoch = (train.len() / cfg.train.batch_size).max(1);
    let mut step = 0u64;

    for epoch in 0..cfg.train.epochs {
        let lr = lr_at(epoch, cfg.train.lr, &cfg.train.milestones);
        for _ in 0..steps_per_epoch {
            let idx = sampler.next_batch()?;
            let inputs = train.inputs.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let views = Views::sample(
                &cfg.augment,
                &inputs,
                model.encoder.hidden_dim(),
                &mut mask_rng,
                &mut noise_rng,
            )?;
            let out = forward_backward(&model, &inputs, &labels, &views, &margin, &con)?;
            margin = out.margin;
            sgd_step(
                &mut model.params_mut(),
                &out.grads.slices(),
                &mut sgd,
                lr,
                cfg.train.momentum,
                cfg.train.weight_decay,
            )?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                classification: out.classification,
                contrastive: out.contrastive,
                total: out.total,
                m_k: out.m_k,
                m_c: margin.m_c,
            });
            step += 1;
        }
        let (eval_accuracy, eval_gap) = match eval_ds {
            Some(ds) if cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0 => {
                let v = eval::quick_verification(&model.encoder, ds)?;
                (Some(v.accuracy), Some(v.gap))
            }
            _ => (None, None),
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_accuracy: model.accuracy(train)?,
            eval_accuracy,
            eval_gap,
        });
    }
    Ok(TrainOutcome { model, log, margin })
}

/// Write checkpoint, logs and the canonical config into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    outcome.model.save(dir.join("model.crfc"))?;
    outcome.log.write(dir)?;
    fs::write(dir.join("config.json"), cfg.dump())?;
    Ok(())
}

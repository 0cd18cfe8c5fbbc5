//! The EM training loop: one clustering pass per epoch, then Adam updates of
//! the encoder over shuffled minibatches against a frozen decoder.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clustering::{multi_cluster, ClusterModel, Points, DEFAULT_ALPHA, DEFAULT_MAX_ITER};
use crate::data::{Dataset, SkeletonSequence};
use crate::error::{PcrpError, Result};
use crate::loss::{protomae, ContrastConfig};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::rnn::{encode_sequences, step_inputs, GruParams};
use crate::seed::{self, DECODER_INIT, ENCODER_INIT, KMEANS, NEGATIVES, SHUFFLE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Pretraining hyperparameters. The JSON config file mirrors this struct;
/// missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_fixed: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub ks: Vec<usize>,
    pub alpha: f64,
    pub r: usize,
    pub lambda_contrast: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub use_pc: bool,
    pub use_rp: bool,
    pub precision: Precision,
    pub kmeans_max_iter: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_fixed: 50,
            hidden_dim: 128,
            layer_count: 1,
            ks: vec![40, 70, 100],
            alpha: DEFAULT_ALPHA,
            r: ContrastConfig::default().r,
            lambda_contrast: ContrastConfig::default().lambda_contrast,
            pretrain_lr: 1e-3,
            pretrain_epochs: 50,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            use_pc: true,
            use_rp: true,
            precision: Precision::F32,
            kmeans_max_iter: DEFAULT_MAX_ITER,
            grad_clip: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PcrpError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_fixed", self.t_fixed),
            ("hidden_dim", self.hidden_dim),
            ("layer_count", self.layer_count),
            ("r", self.r),
            ("batch_size", self.batch_size),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PcrpError::Param(format!("{name} must be positive")));
        }
        let rates = [
            ("alpha", self.alpha),
            ("pretrain_lr", self.pretrain_lr),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(PcrpError::Param(format!("{name} must be positive, got {v}")));
        }
        if !(self.lambda_contrast >= 0.0 && self.lambda_contrast.is_finite()) {
            return Err(PcrpError::Param("lambda_contrast must be non-negative".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(PcrpError::Param(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(PcrpError::Param(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.use_pc && (self.ks.is_empty() || self.ks.contains(&0)) {
            return Err(PcrpError::Param("ks must be non-empty and positive when use_pc is set".into()));
        }
        Ok(())
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            r: self.r,
            lambda_contrast: self.lambda_contrast,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.pretrain_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[&Tensor<F>]) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(PcrpError::Shape {
            op: "adam_update",
            left: vec![params.len(), state.m.len()],
            right: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(PcrpError::Shape {
                op: "adam_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (c1, c2) = (F::lit(1.0 - cfg.beta1.powi(t)), F::lit(1.0 - cfg.beta2.powi(t)));
    let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
    let one = F::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

const ENCODE_CHUNK: usize = 128;

/// Raw final-step encodings of every sequence, row-major `N×C`, in dataset
/// order. Chunks are encoded in parallel when more than one thread is available.
pub fn encode_dataset<F: Real>(ds: &Dataset, encoder: &GruParams<F>) -> Result<Vec<f64>> {
    let refs: Vec<&SkeletonSequence> = ds.sequences.iter().collect();
    let encode = |chunk: &[&SkeletonSequence]| -> Result<Vec<f64>> {
        Ok(encode_sequences(encoder, chunk)?.data().iter().map(|x| x.as_f64()).collect())
    };
    let parts: Vec<Vec<f64>> = if rayon::current_num_threads() > 1 {
        refs.par_chunks(ENCODE_CHUNK).map(encode).collect::<Result<_>>()?
    } else {
        refs.chunks(ENCODE_CHUNK).map(encode).collect::<Result<_>>()?
    };
    Ok(parts.concat())
}

fn normalize_rows(data: &mut [f64], dim: usize) -> Result<()> {
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(PcrpError::Normalization { norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Clusters the unit-normalized encodings of the whole dataset once per
/// entry of `cfg.ks`. Returns no models when prototype contrast is disabled.
pub fn e_step<F: Real>(ds: &Dataset, encoder: &GruParams<F>, cfg: &TrainConfig, epoch: usize) -> Result<Vec<ClusterModel>> {
    if !cfg.use_pc {
        return Ok(Vec::new());
    }
    let mut enc = encode_dataset(ds, encoder)?;
    normalize_rows(&mut enc, encoder.hidden_dim)?;
    let points = Points::new(&enc, encoder.hidden_dim)?;
    multi_cluster(
        points,
        &cfg.ks,
        seed::derive(cfg.seed, KMEANS, epoch as u64),
        cfg.alpha,
        cfg.kmeans_max_iter,
    )
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub mae: f64,
    pub contrast: Option<f64>,
}

/// One gradient step of the encoder on `batch`. `indices` are the dataset
/// positions of the batch, used to find each sample's prototypes.
#[allow(clippy::too_many_arguments)]
pub fn m_step<F: Real>(
    batch: &[&SkeletonSequence],
    indices: &[usize],
    encoder: &mut GruParams<F>,
    decoder: &GruParams<F>,
    models: &[ClusterModel],
    cfg: &TrainConfig,
    state: &mut AdamState<F>,
    negatives_seed: u64,
) -> Result<BatchLoss> {
    if !decoder.frozen {
        return Err(PcrpError::Contract("decoder must be frozen".into()));
    }
    if encoder.frozen {
        return Err(PcrpError::Contract("encoder must be trainable".into()));
    }
    let mut g = Graph::new();
    let enc = encoder.bind(&mut g);
    let dec = decoder.bind(&mut g);
    let inputs: Vec<Var> = step_inputs::<F>(batch)?.into_iter().map(|t| g.constant(t)).collect();
    let outputs = enc.encode(&mut g, &inputs)?;
    let v = *outputs.last().unwrap();
    let predictions = dec.decode(&mut g, v, inputs.len())?;
    let targets: Vec<Var> = if cfg.use_rp {
        inputs.iter().rev().copied().collect()
    } else {
        inputs.clone()
    };
    let encodings = if models.is_empty() { v } else { g.l2_normalize(v)? };
    let terms = protomae(
        &mut g,
        &targets,
        &predictions,
        encodings,
        indices,
        models,
        &cfg.contrast(),
        negatives_seed,
    )?;
    let mut grads = g.backward(terms.total, &enc.vars)?;
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    let mut params = encoder.tensors_mut();
    adam_update(&mut params, &grads, state, &cfg.adam())?;
    let scalar = |v: Var| g.value(v).item().map(|x| x.as_f64());
    Ok(BatchLoss {
        total: scalar(terms.total)?,
        mae: scalar(terms.mae)?,
        contrast: terms.contrast.map(scalar).transpose()?,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub e_step_seconds: f64,
    pub m_step_seconds: f64,
    pub mean_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_contrast: Option<f64>,
}

/// Training state: encoder, frozen decoder, optimizer and epoch counter.
#[derive(Clone, Debug)]
pub struct Trainer<F: Real> {
    pub cfg: TrainConfig,
    pub encoder: GruParams<F>,
    pub decoder: GruParams<F>,
    pub adam: AdamState<F>,
    pub epoch: usize,
}

impl<F: Real> Trainer<F> {
    /// Seeded initialization for frames of `input_dim` values.
    pub fn new(cfg: TrainConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (c, l) = (cfg.hidden_dim, cfg.layer_count);
        let encoder = GruParams::init(input_dim, c, l, None, false, seed::derive(cfg.seed, ENCODER_INIT, 0))?;
        let decoder = GruParams::init(c, c, l, Some(input_dim), true, seed::derive(cfg.seed, DECODER_INIT, 0))?;
        let adam = AdamState::new(&encoder.tensors());
        Ok(Self {
            cfg,
            encoder,
            decoder,
            adam,
            epoch: 0,
        })
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.is_empty() {
            return Err(PcrpError::Param("training set is empty".into()));
        }
        if ds.joint_count * 3 != self.encoder.input_dim {
            return Err(PcrpError::Shape {
                op: "train",
                left: vec![ds.joint_count * 3],
                right: vec![self.encoder.input_dim],
            });
        }
        if let Some(s) = ds.sequences.iter().find(|s| s.frames() != self.cfg.t_fixed) {
            return Err(PcrpError::Param(format!(
                "sequence `{}` has {} frames, expected t_fixed = {}",
                s.id,
                s.frames(),
                self.cfg.t_fixed
            )));
        }
        Ok(())
    }

    /// Runs one EM epoch on a length-fixed dataset. Returns the log record
    /// and the clusterings used for the epoch.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<(EpochRecord, Vec<ClusterModel>)> {
        self.check_dataset(ds)?;
        let epoch = self.epoch + 1;
        let started = Instant::now();
        let models = e_step(ds, &self.encoder, &self.cfg, epoch)?;
        let e_step_seconds = started.elapsed().as_secs_f64();
        if let Some(k_min) = models.iter().map(|m| m.k).min() {
            if self.cfg.r > k_min {
                warn!("epoch {epoch}: r = {} exceeds k = {k_min}; clamped per clustering", self.cfg.r);
            }
        }

        let started = Instant::now();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, SHUFFLE, epoch as u64)));
        let (mut loss_sum, mut mae_sum, mut contrast_sum) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&SkeletonSequence> = idx.iter().map(|&i| &ds.sequences[i]).collect();
            let neg_seed = seed::derive(self.cfg.seed, NEGATIVES, ((epoch as u64) << 32) | b as u64);
            let loss = m_step(
                &batch,
                idx,
                &mut self.encoder,
                &self.decoder,
                &models,
                &self.cfg,
                &mut self.adam,
                neg_seed,
            )?;
            if !loss.total.is_finite() {
                return Err(PcrpError::Domain(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            let w = idx.len() as f64;
            loss_sum += w * loss.total;
            mae_sum += w * loss.mae;
            contrast_sum += w * loss.contrast.unwrap_or(0.0);
        }
        let n = ds.len() as f64;
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n,
            e_step_seconds,
            m_step_seconds: started.elapsed().as_secs_f64(),
            mean_mae: mae_sum / n,
            mean_contrast: (!models.is_empty()).then_some(contrast_sum / n),
        };
        info!(
            "epoch {} loss {:.6} (e-step {:.2}s, m-step {:.2}s)",
            record.epoch, record.mean_loss, record.e_step_seconds, record.m_step_seconds
        );
        Ok((record, models))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_models(&self.encoder, &self.decoder, &self.cfg)
    }
}

/// Output locations for [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint: PathBuf,
    /// JSONL training log, one record per epoch.
    pub log: Option<PathBuf>,
    /// Also write `<checkpoint>.epoch<N>` after every epoch.
    pub checkpoint_every_epoch: bool,
    /// Directory for per-epoch clustering dumps (`clusters_epoch<N>.json`).
    pub cluster_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).map_err(|e| PcrpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    w.flush().map_err(|e| PcrpError::io(path, e))
}

fn train_with<F: Real>(ds: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let ds = ds.fix_length(cfg.t_fixed)?;
    let mut trainer = Trainer::<F>::new(cfg.clone(), ds.joint_count * 3)?;
    let mut log = match &opts.log {
        Some(p) => Some((p, BufWriter::new(File::create(p).map_err(|e| PcrpError::io(p, e))?))),
        None => None,
    };
    let mut epochs = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        let (record, models) = trainer.run_epoch(&ds)?;
        if let Some((path, w)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| PcrpError::io(&**path, e))?;
        }
        if let Some(dir) = &opts.cluster_dir {
            write_json(&dir.join(format!("clusters_epoch{}.json", record.epoch)), &models)?;
        }
        if opts.checkpoint_every_epoch {
            let mut name = opts.checkpoint.clone().into_os_string();
            name.push(format!(".epoch{}", record.epoch));
            trainer.checkpoint()?.save(PathBuf::from(name))?;
        }
        epochs.push(record);
    }
    trainer.checkpoint()?.save(&opts.checkpoint)?;
    Ok(TrainReport {
        checkpoint: opts.checkpoint.clone(),
        epochs,
    })
}

/// Full pretraining run: length-fixes the dataset, trains for
/// `cfg.pretrain_epochs` epochs on a pool of `cfg.threads` workers and
/// writes the final checkpoint.
pub fn train(ds: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PcrpError::Param(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match cfg.precision {
        Precision::F32 => train_with::<f32>(ds, cfg, opts),
        Precision::F64 => train_with::<f64>(ds, cfg, opts),
    })
}

//! MAE training with Adam, fold evaluation, checkpoints and the three-way
//! fusion ablation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_volumes, normalize, stratified_kfold, FoldSplit, VolumeSample};
use crate::error::{Error, Result};
use crate::model::{checksum, Fusion, SurvivalNet, SurvivalNetConfig};
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CKPT1";
/// Samples per forward pass during evaluation. Predictions do not depend on
/// it: every op is computed per sample.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Drives minibatch order; the model's own seed drives initialization.
    pub seed: u64,
    /// Number of cross-validation folds.
    pub k: usize,
    /// Seed of the fold assignment, shared by every run of an ablation.
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            k: 5,
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A model with its optimizer state and epoch counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub net: SurvivalNet,
    pub optimizer: Adam,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    /// Mean training MAE of every completed epoch.
    pub loss_history: Vec<f64>,
}

impl Trainer {
    pub fn new(model: &SurvivalNetConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let net = SurvivalNet::build(model)?;
        let optimizer = Adam::new(train.adam(), &net.params());
        Ok(Trainer {
            net,
            optimizer,
            train: train.clone(),
            epochs_completed: 0,
            loss_history: Vec::new(),
        })
    }

    /// Deterministic minibatch order of `epoch`.
    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One forward/backward/update on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &[&VolumeSample]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true);
        let x = g.input(batch_volumes(batch)?);
        let treatments: Vec<_> = batch.iter().map(|s| s.treatment).collect();
        let pred = self.net.forward(&mut g, &bound, x, &treatments)?;
        let target = g.input(Tensor::new(
            vec![batch.len(), 1],
            batch.iter().map(|s| s.survival_days).collect(),
        )?);
        let loss = g.mae(pred, target)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        self.optimizer.update(self.net.params_mut(), &grads)?;
        Ok(value)
    }

    /// Runs `epochs` more epochs over `samples`.
    pub fn run(&mut self, samples: &[VolumeSample], epochs: usize) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        for _ in 0..epochs {
            let epoch = self.epochs_completed;
            let order = self.epoch_order(samples.len(), epoch);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(self.train.batch_size).enumerate() {
                let batch: Vec<&VolumeSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let loss = self.step(&batch).map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("epoch {} batch {b}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
                total += loss * batch.len() as f64;
            }
            if !self.net.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters after epoch {}",
                    epoch + 1
                )));
            }
            self.loss_history.push(total / samples.len() as f64);
            self.epochs_completed += 1;
        }
        Ok(())
    }
}

/// Trains a fresh model on already-normalized `samples` for `train.epochs`.
pub fn train_fold(
    samples: &[VolumeSample],
    model: &SurvivalNetConfig,
    train: &TrainConfig,
) -> Result<(SurvivalNet, Vec<f64>)> {
    let mut trainer = Trainer::new(model, train)?;
    trainer.run(samples, train.epochs)?;
    Ok((trainer.net, trainer.loss_history))
}

/// Raw predictions, one per sample, each with its own treatment.
pub fn predict_samples(net: &SurvivalNet, samples: &[VolumeSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&VolumeSample> = chunk.iter().collect();
        let x = batch_volumes(&refs)?;
        let t: Vec<_> = chunk.iter().map(|s| s.treatment).collect();
        out.extend(net.predict(&x, &t)?);
    }
    Ok(out)
}

/// Mean absolute error in days.
pub fn evaluate(net: &SurvivalNet, samples: &[VolumeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate on zero samples".into()));
    }
    let preds = predict_samples(net, samples)?;
    Ok(mean_abs_error(&preds, samples))
}

fn mean_abs_error(preds: &[f64], samples: &[VolumeSample]) -> f64 {
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.survival_days).abs())
        .sum::<f64>()
        / samples.len() as f64
}

/// `(mean, population std)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fusion: Fusion,
    pub seed: u64,
    /// Test MAE of each fold, in days.
    pub fold_mae: Vec<f64>,
    pub mean_mae: f64,
    /// Population std over folds.
    pub std_mae: f64,
    /// Per fold, mean training MAE of every epoch.
    pub loss_history: Vec<Vec<f64>>,
    pub model: SurvivalNetConfig,
    pub train: TrainConfig,
}

impl RunReport {
    pub fn summary(&self) -> String {
        format!("MAE (in days): {:.1} ± {:.1}", self.mean_mae, self.std_mae)
    }
}

/// Normalizes every sample; a thin wrapper kept next to the training entry
/// points so callers cannot forget it.
pub fn prepare(samples: &[VolumeSample]) -> Result<Vec<VolumeSample>> {
    samples.iter().map(normalize).collect()
}

/// K-fold cross-validation on raw samples. Fold `f`'s trained state is
/// handed to `on_fold` before the next fold starts.
pub fn cross_validate(
    samples: &[VolumeSample],
    model: &SurvivalNetConfig,
    train: &TrainConfig,
    mut on_fold: impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<RunReport> {
    train.validate()?;
    model.validate()?;
    let prepared = prepare(samples)?;
    let split = stratified_kfold(&prepared, train.k, train.split_seed)?;
    cross_validate_split(&prepared, &split, model, train, &mut on_fold)
}

fn cross_validate_split(
    prepared: &[VolumeSample],
    split: &FoldSplit,
    model: &SurvivalNetConfig,
    train: &TrainConfig,
    on_fold: &mut impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<RunReport> {
    let mut fold_mae = Vec::with_capacity(split.k);
    let mut loss_history = Vec::with_capacity(split.k);
    for fold in 0..split.k {
        let pick = |idx: Vec<usize>| -> Vec<VolumeSample> { idx.into_iter().map(|i| prepared[i].clone()).collect() };
        let train_set = pick(split.train_indices(fold));
        let test_set = pick(split.test_indices(fold));
        let mut trainer = Trainer::new(model, train)?;
        trainer.run(&train_set, train.epochs).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("fold {fold}, {msg}")),
            other => other,
        })?;
        fold_mae.push(evaluate(&trainer.net, &test_set)?);
        on_fold(fold, &trainer)?;
        loss_history.push(trainer.loss_history);
    }
    let (mean_mae, std_mae) = mean_std(&fold_mae);
    Ok(RunReport {
        fusion: model.fusion,
        seed: train.seed,
        fold_mae,
        mean_mae,
        std_mae,
        loss_history,
        model: model.clone(),
        train: train.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: Fusion,
    /// Mean over seeds of each seed's cross-validated MAE.
    pub mean_mae: f64,
    /// Population std over seeds.
    pub std_mae: f64,
    pub seed_mae: Vec<f64>,
    /// Mean over seeds of the per-seed std over folds.
    pub mean_fold_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Rows in the fixed order none, concat, adain.
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunReport>,
    pub model: SurvivalNetConfig,
    pub train: TrainConfig,
}

impl AblationReport {
    pub fn row(&self, fusion: Fusion) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.fusion == fusion)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("Treatment fusion | MAE (in days)\n-----------------+--------------\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} | {:.1} ± {:.1}\n",
                r.fusion.to_string(),
                r.mean_mae,
                r.std_mae
            ));
        }
        s
    }
}

/// Cross-validates all three fusion modes for every seed. Folds are shared
/// by all runs; a seed sets both the model initialization and the
/// minibatch order, so only the fusion pathway differs within a seed.
pub fn run_ablation(
    samples: &[VolumeSample],
    model: &SurvivalNetConfig,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    run_ablation_with(samples, model, train, seeds, |_, _, _| Ok(()))
}

/// [`run_ablation`] that hands every trained fold model to
/// `on_fold(seed, fold, trainer)`; the fusion mode is in the trainer's config.
pub fn run_ablation_with(
    samples: &[VolumeSample],
    model: &SurvivalNetConfig,
    train: &TrainConfig,
    seeds: &[u64],
    mut on_fold: impl FnMut(u64, usize, &Trainer) -> Result<()>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    train.validate()?;
    let prepared = prepare(samples)?;
    let split = stratified_kfold(&prepared, train.k, train.split_seed)?;
    let mut runs = Vec::with_capacity(3 * seeds.len());
    let mut rows = Vec::with_capacity(3);
    for fusion in Fusion::ALL {
        let mut seed_mae = Vec::with_capacity(seeds.len());
        let mut fold_stds = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let m = SurvivalNetConfig {
                fusion,
                seed,
                ..model.clone()
            };
            let t = TrainConfig {
                seed,
                ..train.clone()
            };
            let report = cross_validate_split(&prepared, &split, &m, &t, &mut |fold, trainer| {
                on_fold(seed, fold, trainer)
            })?;
            seed_mae.push(report.mean_mae);
            fold_stds.push(report.std_mae);
            runs.push(report);
        }
        let (mean_mae, std_mae) = mean_std(&seed_mae);
        rows.push(AblationRow {
            fusion,
            mean_mae,
            std_mae,
            seed_mae,
            mean_fold_std: mean_std(&fold_stds).0,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        runs,
        model: model.clone(),
        train: train.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: SurvivalNetConfig,
    train: TrainConfig,
    optimizer: AdamConfig,
    step: u64,
    epochs_completed: usize,
    loss_history: Vec<f64>,
    params: Vec<BlobEntry>,
    first_moments: Vec<BlobEntry>,
    second_moments: Vec<BlobEntry>,
}

/// Writes `CKPT1`, a little-endian `u64` header length, the JSON header,
/// then parameters, Adam first moments and Adam second moments as
/// little-endian `f64` blobs in manifest order.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let names = trainer.net.param_names();
    let mut blob = Vec::new();
    let mut section = |tensors: &[&Tensor]| -> Vec<BlobEntry> {
        names
            .iter()
            .zip(tensors)
            .map(|(name, t)| {
                let offset = blob.len() as u64;
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                BlobEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    checksum: checksum(t.data()),
                }
            })
            .collect()
    };
    let params = section(&trainer.net.params());
    let first_moments = section(&trainer.optimizer.m.iter().collect::<Vec<_>>());
    let second_moments = section(&trainer.optimizer.v.iter().collect::<Vec<_>>());
    let header = CheckpointHeader {
        model: trainer.net.config().clone(),
        train: trainer.train.clone(),
        optimizer: trainer.optimizer.config,
        step: trainer.optimizer.step,
        epochs_completed: trainer.epochs_completed,
        loss_history: trainer.loss_history.clone(),
        params,
        first_moments,
        second_moments,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blobs(path: &Path, blob: &[u8], base: u64, entries: &[BlobEntry]) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(Error::format(
                    path,
                    base + blob.len() as u64,
                    format!("blob for {} ends past end of file", e.name),
                ));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if checksum(&data) != e.checksum {
                return Err(Error::format(
                    path,
                    base + e.offset,
                    format!("checksum mismatch for {}", e.name),
                ));
            }
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

/// Restores the trainer stored at `path`, building the network from the
/// model config recorded in the file.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    load_checkpoint_inner(path, None)
}

/// Restores the trainer stored at `path` into a network built from
/// `model`; any parameter whose name or shape disagrees is reported.
pub fn load_checkpoint_with(path: &Path, model: &SurvivalNetConfig) -> Result<Trainer> {
    load_checkpoint_inner(path, Some(model))
}

fn load_checkpoint_inner(path: &Path, model: Option<&SurvivalNetConfig>) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len || &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "missing CKPT1 magic"));
    }
    if bytes.len() < magic_len + 8 {
        return Err(Error::format(path, magic_len as u64, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
    let hstart = magic_len + 8;
    if bytes.len() < hstart + hlen {
        return Err(Error::format(path, hstart as u64, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[hstart..hstart + hlen])
        .map_err(|e| Error::format(path, hstart as u64, format!("bad header: {e}")))?;
    let base = (hstart + hlen) as u64;
    let blob = &bytes[hstart + hlen..];

    let config = model.cloned().unwrap_or_else(|| header.model.clone());
    let mut net = SurvivalNet::build(&config)?;
    net.load_params(read_blobs(path, blob, base, &header.params)?)?;
    let moments = |entries: &[BlobEntry]| -> Result<Vec<Tensor>> {
        let named = read_blobs(path, blob, base, entries)?;
        let names = net.param_names();
        if named.len() != names.len() || named.iter().zip(&names).any(|((a, _), b)| a != b) {
            return Err(Error::Shape("optimizer moments do not match the parameter manifest".into()));
        }
        Ok(named.into_iter().map(|(_, t)| t).collect())
    };
    let m = moments(&header.first_moments)?;
    let v = moments(&header.second_moments)?;
    Ok(Trainer {
        net,
        optimizer: Adam {
            config: header.optimizer,
            step: header.step,
            m,
            v,
        },
        train: header.train,
        epochs_completed: header.epochs_completed,
        loss_history: header.loss_history,
    })
}

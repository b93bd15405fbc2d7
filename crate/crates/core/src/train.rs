//! SGD training with momentum, the learning-rate schedule, and evaluation
//! over manifests of SSCV samples.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use grf_tensor::{Graph, ParamRole, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::FusionStrategy;
use crate::loss::{weight_schedule, weighted_ce, EvalMask, Normalization, ScRegion};
use crate::metrics::{Confusion, EvalReport};
use crate::network::{argmax_labels, Model, NetworkConfig, Scale, NUM_CLASSES};
use crate::projection::{visibility_mask, VisibilityGrid};
use crate::scene::{downsample_labels, SceneSample, NONEMPTY_CLASSES};
use crate::sscv::{load_sample, read_manifest};

mod as_str {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Training hyperparameters. Serialized as TOML; every key is optional and
/// defaults to the values below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(with = "as_str")]
    pub scale: Scale,
    pub stages: usize,
    #[serde(with = "as_str")]
    pub fusion: FusionStrategy,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    /// L2 penalty on conv weights; biases are not decayed.
    pub weight_decay: f64,
    /// Loss weights of classes 1..=11; the empty weight follows its schedule.
    pub nonempty_weights: Vec<f64>,
    #[serde(with = "as_str")]
    pub normalization: Normalization,
    #[serde(with = "as_str")]
    pub sc_region: ScRegion,
    /// Rescale the batch gradient to at most this global L2 norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    /// Held-out split evaluated after every epoch; the training split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Tiny,
            stages: 2,
            fusion: FusionStrategy::Grf,
            seed: 0,
            epochs: 30,
            batch_size: 4,
            lr0: 0.01,
            lr_decay: 0.1,
            lr_step: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            nonempty_weights: vec![1.0; NONEMPTY_CLASSES],
            normalization: Normalization::Mean,
            sc_region: ScRegion::Occluded,
            clip_norm: None,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0) || self.lr_step == 0 {
            return config_err("learning rate, decay and decay interval must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return config_err("momentum must be in [0, 1) and weight decay non-negative");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.nonempty_weights.len() != NONEMPTY_CLASSES {
            return config_err(format!(
                "expected {NONEMPTY_CLASSES} nonempty class weights, got {}",
                self.nonempty_weights.len()
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return config_err("clip norm must be positive");
        }
        weight_schedule(0, &self.nonempty_weights)?;
        self.network().validate()
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::profile(self.scale, self.stages).with_fusion(self.fusion)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Read a config file; relative manifest paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in [&mut cfg.train_manifest, &mut cfg.test_manifest].into_iter().flatten() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }
}

/// `lr0 * lr_decay^floor(epoch / lr_step)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_step) as i32)
}

/// One momentum step over the store's accumulated gradients:
/// `v <- mu v - lr (g + lambda theta)`, `theta <- theta + v`, with the decay
/// term applied to weights only.
pub fn sgd_step(store: &mut ParamStore, velocity: &mut [Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if velocity.len() != store.len() {
        return shape_err(format!("{} momentum buffers for {} parameters", velocity.len(), store.len()));
    }
    for (e, v) in store.entries_mut().iter_mut().zip(velocity.iter_mut()) {
        v.expect_same_shape(&e.value)?;
        let decay = if e.role == ParamRole::Weight { weight_decay } else { 0.0 };
        let (theta, grad, vel) = (e.value.data_mut(), e.grad.data(), v.data_mut());
        for i in 0..theta.len() {
            vel[i] = momentum * vel[i] - lr * (grad[i] + decay * theta[i]);
            theta[i] += vel[i];
        }
    }
    Ok(())
}

pub fn zero_velocity(store: &ParamStore) -> Vec<Tensor> {
    store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect()
}

fn clip_grads(store: &mut ParamStore, max_norm: f64) {
    let norm = store
        .entries()
        .iter()
        .flat_map(|e| e.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for e in store.entries_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// A sample with labels and masks at the network's output resolution.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: SceneSample,
    pub labels: Vec<u8>,
    pub visibility: VisibilityGrid,
    pub mask: EvalMask,
}

/// Downsample labels to the output grid and classify output voxels by visibility.
pub fn prepare(sample: SceneSample, net: &NetworkConfig, sc: ScRegion) -> Result<Prepared> {
    let out_grid = net.output_grid()?;
    let g = &sample.grid;
    if g.extents != net.grid.extents || (g.resolution - net.grid.resolution).abs() > 1e-6 {
        return shape_err(format!(
            "sample grid {:?} at {} m does not match network grid {:?} at {} m",
            g.extents, g.resolution, net.grid.extents, net.grid.resolution
        ));
    }
    let [rows, cols] = net.image;
    if sample.depth.height != rows || sample.depth.width != cols {
        return shape_err(format!(
            "sample image {}x{} does not match network input {rows}x{cols}",
            sample.depth.height, sample.depth.width
        ));
    }
    let factor = g.extents[0] / out_grid.extents[0];
    let labels = downsample_labels(&sample.labels, g.extents, factor)?;
    let visibility = visibility_mask(&sample.depth, &sample.camera, &g.coarsened(factor)?);
    let mask = EvalMask::from_visibility(&visibility, &labels, sc)?;
    Ok(Prepared {
        sample,
        labels,
        visibility,
        mask,
    })
}

/// Load and prepare every sample listed in a manifest.
pub fn load_split(manifest: &Path, net: &NetworkConfig, sc: ScRegion) -> Result<Vec<Prepared>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| prepare(load_sample(&e.path)?, net, sc))
        .collect()
}

/// Loss of one sample; its gradient is added into the store scaled by `scale`.
pub fn accumulate_sample(
    model: &mut Model,
    p: &Prepared,
    epoch: usize,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<f64> {
    let weights = weight_schedule(epoch, &cfg.nonempty_weights)?;
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &p.sample.rgb, &p.sample.depth, &p.sample.camera)?;
    let loss = weighted_ce(&mut g, logits, &p.labels, &weights, &p.mask, cfg.normalization)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    grads.accumulate_into(&mut model.store, scale);
    Ok(value)
}

/// Confusion counts of the model's predictions over prepared samples, one
/// accumulator per SC region.
pub fn evaluate_regions(model: &Model, data: &[Prepared], regions: &[ScRegion]) -> Result<Vec<Confusion>> {
    let mut acc = vec![Confusion::new(NUM_CLASSES); regions.len()];
    for p in data {
        let pred = model.predict(&p.sample.rgb, &p.sample.depth, &p.sample.camera)?;
        for (c, &r) in acc.iter_mut().zip(regions) {
            let mask = EvalMask::from_visibility(&p.visibility, &p.labels, r)?;
            c.add(&pred, &p.labels, &mask)?;
        }
    }
    Ok(acc)
}

pub fn evaluate(model: &Model, data: &[Prepared]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyManifest("no samples to evaluate".into()));
    }
    let mut c = Confusion::new(NUM_CLASSES);
    for p in data {
        let pred = model.predict(&p.sample.rgb, &p.sample.depth, &p.sample.camera)?;
        c.add(&pred, &p.labels, &p.mask)?;
    }
    Ok(c.report())
}

/// Predicted labels of one sample on the output grid.
pub fn predict_sample(model: &Model, sample: &SceneSample) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &sample.rgb, &sample.depth, &sample.camera)?;
    Ok(argmax_labels(g.value(logits)))
}

/// One epoch's record in the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub report: EvalReport,
}

impl EpochLog {
    /// Single line with full-precision values, so equal lines mean equal runs.
    pub fn line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:?}"));
        let mut s = format!(
            "epoch={} lr={:?} loss={:?} sc_iou={} miou={}",
            self.epoch,
            self.lr,
            self.train_loss,
            f(self.report.sc.iou),
            f(self.report.ssc.mean)
        );
        for v in &self.report.ssc.per_class {
            let _ = write!(s, " {}", f(*v));
        }
        s
    }
}

/// Serializable shuffling RNG position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model, optimizer state and progress of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::build(config.network(), config.seed)?;
        let velocity = zero_velocity(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            velocity,
            rng,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Forward/backward over `batch`, average the gradients and update.
    /// Returns the mean sample loss.
    pub fn step(&mut self, batch: &[&Prepared]) -> Result<f64> {
        if batch.is_empty() {
            return config_err("empty batch");
        }
        self.model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for p in batch {
            loss += accumulate_sample(&mut self.model, p, self.epoch, &self.config, scale)?;
        }
        if let Some(c) = self.config.clip_norm {
            clip_grads(&mut self.model.store, c);
        }
        let lr = lr_schedule(self.epoch, &self.config);
        sgd_step(
            &mut self.model.store,
            &mut self.velocity,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        Ok(loss * scale)
    }

    /// Shuffle and train one pass over `train`; returns the mean sample loss.
    pub fn train_epoch(&mut self, train: &[Prepared]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyManifest("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)? * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// [`Trainer::train_epoch`], then evaluate on `test` and log the result.
    pub fn run_epoch(&mut self, train: &[Prepared], test: &[Prepared]) -> Result<EpochLog> {
        let lr = lr_schedule(self.epoch, &self.config);
        let train_loss = self.train_epoch(train)?;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            train_loss,
            report: evaluate(&self.model, test)?,
        };
        self.log.push(log.line());
        Ok(log)
    }

    /// Train until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run(
        &mut self,
        train: &[Prepared],
        test: &[Prepared],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(train, test)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// Load the train split and the test split (or the train split again).
    pub fn load_data(&self) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
        let net = self.config.network();
        let Some(train_path) = &self.config.train_manifest else {
            return config_err("train_manifest is not set");
        };
        let train = load_split(train_path, &net, self.config.sc_region)?;
        let test = match &self.config.test_manifest {
            Some(p) => load_split(p, &net, self.config.sc_region)?,
            None => train.clone(),
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.01);
        assert!((lr_schedule(10, &c) - 0.001).abs() < 1e-18);
        assert!((lr_schedule(25, &c) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = TrainConfig {
            clip_norm: Some(5.0),
            fusion: FusionStrategy::Sum,
            train_manifest: Some("train.txt".into()),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = TrainConfig::from_toml("epochs = 3\nfusion = \"lstm\"\n").unwrap();
        assert_eq!(d.epochs, 3);
        assert_eq!(d.fusion, FusionStrategy::Lstm);
        assert_eq!(d.batch_size, 4);
        assert_eq!(TrainConfig::from_toml("batch_size = 0").unwrap_err().code(), "config");
        assert_eq!(TrainConfig::from_toml("bogus = 1").unwrap_err().code(), "config");
    }

    #[test]
    fn plain_sgd_two_steps_by_hand() {
        let mut s = ParamStore::new();
        let id = s.insert("w", ParamRole::Weight, Tensor::scalar(1.0)).unwrap();
        let mut v = zero_velocity(&s);
        // f(w) = w^2, lr 0.1: 1 -> 0.8 -> 0.64
        for expect in [0.8, 0.64] {
            let w = s.value(id).item();
            s.get_mut(id).grad = Tensor::scalar(2.0 * w);
            sgd_step(&mut s, &mut v, 0.1, 0.0, 0.0).unwrap();
            assert!((s.value(id).item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_two_steps_by_hand() {
        let mut s = ParamStore::new();
        let id = s.insert("w", ParamRole::Weight, Tensor::scalar(1.0)).unwrap();
        let mut v = zero_velocity(&s);
        // g = 1 each step, mu 0.5, lr 0.1, lambda 0.1:
        // v1 = -0.1 * (1 + 0.1) = -0.11, w1 = 0.89
        // v2 = 0.5 * -0.11 - 0.1 * (1 + 0.089) = -0.1639, w2 = 0.7261
        for expect in [0.89, 0.7261] {
            s.get_mut(id).grad = Tensor::scalar(1.0);
            sgd_step(&mut s, &mut v, 0.1, 0.5, 0.1).unwrap();
            assert!((s.value(id).item() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn bias_is_not_decayed() {
        let mut s = ParamStore::new();
        s.insert("b", ParamRole::Bias, Tensor::scalar(2.0)).unwrap();
        s.insert("w", ParamRole::Weight, Tensor::scalar(2.0)).unwrap();
        let mut v = zero_velocity(&s);
        sgd_step(&mut s, &mut v, 0.1, 0.9, 0.5).unwrap();
        assert_eq!(s.entries()[0].value.item(), 2.0);
        assert!((s.entries()[1].value.item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::RngCore;
        let mut a = ChaCha8Rng::seed_from_u64(3);
        a.set_stream(1);
        a.next_u64();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

//! Run configuration, optimizer, schedule, and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::error::{Error, Result};
use crate::lfr::SelectionStrategy;
use crate::losses::{eval_metrics, DepthCaps, LossConfig, MetricReport};
use crate::model::{Model, ModelConfig, Prediction};
use crate::parallel::par_map;
use crate::params::{ParamGroup, ParamStore};
use crate::synth::{load_entries, manifest_location, read_manifest, Manifest, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Step size of adapters, gates, head, and scorer.
    pub lr: f64,
    /// Backbone step size as a fraction of `lr`.
    pub backbone_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to every parameter except gates.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    /// First 0-based epoch with a frozen backbone; `⌈2/3·epochs⌉` when absent.
    pub freeze_epoch: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            backbone_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            warmup_frac: 0.1,
            freeze_epoch: None,
        }
    }
}

impl OptimConfig {
    pub fn freeze_at(&self) -> usize {
        self.freeze_epoch.unwrap_or((2 * self.epochs).div_ceil(3))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_frac)));
        }
        if self.freeze_at() > self.epochs {
            return Err(Error::Config(format!(
                "freeze epoch {} beyond {} epochs",
                self.freeze_at(),
                self.epochs
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.backbone_lr_ratio >= 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    /// Multiplier of the base rate at optimizer step `t` of `total`: linear
    /// warmup, then cosine decay to zero.
    pub fn schedule(&self, t: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if t < warm {
            return (t + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * (t - warm) as f64 / span).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub use_hn: bool,
    /// Keep gates at zero and out of the optimizer.
    pub pin_gates: bool,
    pub optim: OptimConfig,
    /// Brightness jitter half-width (factor drawn from `1 ± jitter`).
    pub jitter: f64,
    pub caps: DepthCaps,
    /// Run seed; also seeds the backbone.
    pub seed: u64,
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            use_hn: true,
            pin_gates: false,
            optim: OptimConfig::default(),
            jitter: 0.1,
            caps: DepthCaps::default(),
            seed: 0,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 1)", self.jitter)));
        }
        if self.model.backbone.seed != self.seed {
            return Err(Error::Config("backbone seed must equal the run seed".into()));
        }
        Ok(())
    }

    /// Sets the run seed and the backbone seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.backbone.seed = seed;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Moment buffers of the adaptive optimizer, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay step. `rate(group)` gives the step size of
    /// each group; parameters without a gradient are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        cfg: &OptimConfig,
        rate: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr = rate(p.group);
            let wd = if p.group == ParamGroup::Gate { 0.0 } else { cfg.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * (mh / (vh.sqrt() + cfg.eps) + wd * *x);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub backbone_frozen: bool,
    pub first_batch_loss: f64,
    pub train_loss: f64,
    pub gates: Vec<f64>,
    pub val: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub input_hash: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_val: MetricReport,
}

/// Loaded train and validation splits.
pub struct Dataset {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub input_hash: String,
}

impl Dataset {
    /// Loads a manifest (or the directory holding it) and every listed scene.
    pub fn load(path: &Path) -> Result<Self> {
        let (file, dir) = manifest_location(path);
        let manifest = read_manifest(&file)?;
        let mut hasher_input = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        for e in manifest.train.iter().chain(&manifest.val) {
            for name in [&e.rgb, &e.depth] {
                let p = dir.join(name);
                hasher_input.extend(std::fs::read(&p).map_err(|err| Error::io(&p, err))?);
            }
        }
        let train = load_entries(&dir, &manifest.train)?;
        let val = load_entries(&dir, &manifest.val)?;
        Ok(Self {
            input_hash: sha256_hex(&hasher_input),
            manifest,
            dir,
            train,
            val,
        })
    }
}

/// Predictions and per-image-averaged metrics over `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    caps: DepthCaps,
    workers: usize,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let results = par_map(samples, workers, |_, s| -> Result<(MetricReport, Prediction)> {
        let p = model.predict(&s.rgb)?;
        Ok((eval_metrics(&p.depth, &s.depth, caps)?, p))
    });
    let (reports, preds): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let mean = MetricReport::mean(&reports).ok_or_else(|| Error::domain("evaluate", "empty split"))?;
    Ok((mean, preds))
}

/// Mean valid depth over `samples`.
pub fn mean_depth(samples: &[Sample]) -> f64 {
    let (sum, n) = samples.iter().fold((0.0, 0usize), |(s, n), x| {
        let add: f64 = x.depth.depth.iter().zip(&x.depth.valid).filter(|(_, v)| **v).map(|(d, _)| d).sum();
        (s + add, n + x.depth.valid_count())
    });
    sum / n as f64
}

/// Metrics of predicting `value` everywhere.
pub fn constant_baseline(value: f64, samples: &[Sample], caps: DepthCaps) -> Result<MetricReport> {
    let reports: Vec<MetricReport> = samples
        .iter()
        .map(|s| eval_metrics(&vec![value; s.depth.len()], &s.depth, caps))
        .collect::<Result<_>>()?;
    MetricReport::mean(&reports).ok_or_else(|| Error::domain("constant_baseline", "empty split"))
}

/// Trainable predicate for an epoch.
fn trainable(cfg: &RunConfig, frozen: bool) -> impl Fn(ParamGroup) -> bool {
    let pin = cfg.pin_gates;
    move |g| match g {
        ParamGroup::Backbone => !frozen,
        ParamGroup::Gate => !pin,
        _ => true,
    }
}

/// Mean loss and index-ordered mean gradient over a batch.
pub fn batch_gradient(
    model: &Model,
    batch: &[(usize, f64)],
    samples: &[Sample],
    cfg: &RunConfig,
    frozen: bool,
    workers: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let pred = trainable(cfg, frozen);
    let results = par_map(batch, workers, |_, &(i, factor)| {
        let s = &samples[i];
        let img = if factor == 1.0 { s.rgb.clone() } else { s.rgb.brightness(factor) };
        model.loss_and_grads(&img, &s.depth, &cfg.loss, cfg.use_hn, &pred)
    });
    let mut total = 0.0;
    let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    None => *acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in sum.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, sum))
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains on `data` and writes config, run info, log, and checkpoints to
/// `out`.
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path, workers: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), &cfg.to_json()?)?;
    let info = RunInfo {
        config_hash: cfg.hash()?,
        input_hash: data.input_hash.clone(),
        train_scenes: data.train.len(),
        val_scenes: data.val.len(),
    };
    write_json(&out.join("run_info.json"), &(serde_json::to_string_pretty(&info)? + "\n"))?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut model = Model::init(&cfg.model)?;
    if cfg.pin_gates {
        for s in &model.lfr.slots {
            model.store.get_mut(s.gate).data_mut()[0] = 0.0;
        }
    }
    let mut optim = AdamState::new(&model.store);
    let o = &cfg.optim;
    let per_epoch = data.train.len().div_ceil(o.batch_size);
    let total_steps = per_epoch * o.epochs;
    let mut log = Vec::with_capacity(o.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut last_val = None;

    for epoch in 0..o.epochs {
        let frozen = epoch >= o.freeze_at();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let jobs: Vec<(usize, f64)> = order
            .into_iter()
            .map(|i| {
                let f = if cfg.jitter > 0.0 {
                    rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter)
                } else {
                    1.0
                };
                (i, f)
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut first_batch_loss = f64::NAN;
        let mut lr_now = 0.0;
        for (b, batch) in jobs.chunks(o.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let (loss, grads) = batch_gradient(&model, batch, &data.train, cfg, frozen, workers)?;
            if !loss.is_finite() {
                return Err(Error::Numeric { op: "total_loss".into() });
            }
            if b == 0 {
                first_batch_loss = loss;
            }
            epoch_loss += loss * batch.len() as f64;
            lr_now = o.lr * o.schedule(step, total_steps);
            let base = lr_now;
            optim.update(&mut model.store, &grads, o, |g| {
                if g == ParamGroup::Backbone {
                    base * o.backbone_lr_ratio
                } else {
                    base
                }
            });
        }
        let (val, _) = evaluate(&model, &data.val, cfg.caps, workers)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr: lr_now,
            backbone_frozen: frozen,
            first_batch_loss,
            train_loss: epoch_loss / data.train.len() as f64,
            gates: model.lfr.slots.iter().map(|s| model.store.get(s.gate).data()[0].tanh()).collect(),
            val,
        };
        writeln!(log_file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "epoch {} loss {:.5} val abs_rel {:.5}",
            rec.epoch,
            rec.train_loss,
            rec.val.abs_rel
        );
        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch: (epoch + 1) as u64,
            params: model.store.clone(),
            optim: optim.clone(),
        };
        if best.map_or(true, |(_, a)| val.abs_rel < a) {
            best = Some((epoch + 1, val.abs_rel));
            ckpt.save(&out.join("best.ckpt"))?;
        }
        if epoch + 1 == o.epochs {
            ckpt.save(&out.join("final.ckpt"))?;
        }
        last_val = Some(val);
        log.push(rec);
    }
    let final_val = last_val.expect("epochs >= 1");
    write_json(&out.join("final_metrics.json"), &(serde_json::to_string_pretty(&final_val)? + "\n"))?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.map_or(0, |b| b.0),
        final_val,
    })
}

/// Rebuilds a model from a checkpoint, checking that the stored parameters
/// match the configured architecture.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let mut model = Model::init(&ck.config.model)?;
    if model.store.len() != ck.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, architecture expects {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    for (dst, src) in model.store.params_mut().iter_mut().zip(ck.params.params()) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() || dst.group != src.group {
            return Err(Error::Config(format!("checkpoint parameter {} does not match {}", src.name, dst.name)));
        }
        dst.value = src.value.clone();
    }
    Ok(model)
}

/// One trained strategy in a [`StrategyComparison`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub rank: usize,
    pub strategy: SelectionStrategy,
    pub metrics: MetricReport,
}

/// Strategies ranked by validation AbsRel (lower first); ties keep the
/// order of [`SelectionStrategy::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub config_hash: String,
    pub ranking: Vec<StrategyEntry>,
}

impl StrategyComparison {
    pub fn new(config_hash: String, results: &[(SelectionStrategy, MetricReport)]) -> Result<Self> {
        if results.iter().any(|(_, m)| !m.abs_rel.is_finite()) {
            return Err(Error::Degenerate("non-finite abs_rel in strategy comparison".into()));
        }
        let order = |s: &SelectionStrategy| SelectionStrategy::ALL.iter().position(|x| x == s);
        let mut sorted = results.to_vec();
        sorted.sort_by(|a, b| a.1.abs_rel.total_cmp(&b.1.abs_rel).then(order(&a.0).cmp(&order(&b.0))));
        Ok(Self {
            config_hash,
            ranking: sorted
                .into_iter()
                .enumerate()
                .map(|(i, (strategy, metrics))| StrategyEntry {
                    rank: i + 1,
                    strategy,
                    metrics,
                })
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let o = OptimConfig::default();
        let total = 100;
        assert!((o.schedule(0, total) - 0.1).abs() < 1e-15);
        assert!((o.schedule(9, total) - 1.0).abs() < 1e-15);
        assert!((o.schedule(10, total) - 1.0).abs() < 1e-15);
        assert!(o.schedule(55, total) < o.schedule(30, total));
        assert!(o.schedule(99, total) < 1e-3);
        assert_eq!(o.freeze_at(), 20);
        let o5 = OptimConfig {
            epochs: 5,
            ..OptimConfig::default()
        };
        assert_eq!(o5.freeze_at(), 4);
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = RunConfig::default().with_seed(9);
        cfg.loss.lambda = 0.1 + 0.2;
        cfg.optim.lr = 1.0 / 3.0;
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(RunConfig::from_json("{}").unwrap().validate().is_ok());
        let mut bad = RunConfig::default();
        bad.optim.warmup_frac = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::default();
        bad.optim.freeze_epoch = Some(31);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Head, crate::numerics::Tensor::vector(vec![1.0, -1.0]));
        store.add("g", ParamGroup::Gate, crate::numerics::Tensor::vector(vec![0.0]));
        let mut st = AdamState::new(&store);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        st.update(&mut store, &[Some(vec![2.0, -0.5]), None], &cfg, |_| 0.1);
        let w = store.params()[0].value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.params()[1].value.data(), &[0.0]);
        assert_eq!(st.m[1], vec![0.0]);
    }

    #[test]
    fn strategy_ranking_orders_by_abs_rel_then_strategy() {
        let gt = DepthMapFixture::map();
        let report = |scale: f64| {
            let p: Vec<f64> = gt.depth.iter().map(|d| d * scale).collect();
            eval_metrics(&p, &gt, DepthCaps::default()).unwrap()
        };
        let results = [
            (SelectionStrategy::LearnedScores, report(1.2)),
            (SelectionStrategy::NodeDegree, report(1.1)),
            (SelectionStrategy::MaximalSimilarity, report(1.2)),
            (SelectionStrategy::MinimalSimilarity, report(1.5)),
        ];
        let c = StrategyComparison::new("h".into(), &results).unwrap();
        let order: Vec<_> = c.ranking.iter().map(|e| (e.rank, e.strategy)).collect();
        assert_eq!(
            order,
            vec![
                (1, SelectionStrategy::NodeDegree),
                (2, SelectionStrategy::MaximalSimilarity),
                (3, SelectionStrategy::LearnedScores),
                (4, SelectionStrategy::MinimalSimilarity),
            ]
        );
        let mut bad = results.to_vec();
        bad[0].1.abs_rel = f64::NAN;
        assert!(StrategyComparison::new("h".into(), &bad).is_err());
    }

    struct DepthMapFixture;

    impl DepthMapFixture {
        fn map() -> crate::image::DepthMap {
            crate::image::DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
        }
    }
}

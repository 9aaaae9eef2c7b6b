//! Full depth model: backbone, recombination, and head behind one
//! parameter store.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureStack};
use crate::error::{Error, Result};
use crate::head::{aggregate, Head, HeadConfig};
use crate::image::{DepthMap, Image};
use crate::lfr::{Lfr, RecombinedSet, SelectionStrategy};
use crate::losses::{total_loss_var, LossConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamStore};

/// Which features feed the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Equidistant layers, no adapters.
    UniformBaseline,
    /// The last layer copied into every slot.
    LastOnly,
    #[default]
    Lfr,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::UniformBaseline => "uniform-baseline",
            Mode::LastOnly => "last-only",
            Mode::Lfr => "lfr",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::UniformBaseline, Mode::LastOnly, Mode::Lfr]
            .into_iter()
            .find(|m| m.name() == s.replace('_', "-"))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub strategy: SelectionStrategy,
    pub k: usize,
    /// Adapter bottleneck width; `C/2` when absent.
    pub bottleneck: Option<usize>,
    pub mode: Mode,
    pub multilevel: bool,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            strategy: SelectionStrategy::MinimalSimilarity,
            k: 4,
            bottleneck: None,
            mode: Mode::Lfr,
            multilevel: true,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        let l = self.backbone.depth;
        if self.k == 0 || self.k > l - 1 {
            return Err(Error::Config(format!("K = {} must lie in 1..={}", self.k, l - 1)));
        }
        if self.bottleneck == Some(0) {
            return Err(Error::Config("adapter bottleneck must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck.unwrap_or((self.backbone.width / 2).max(1))
    }
}

/// Layers `round(i·L/K)` for `i = 1..=K`.
pub fn uniform_layers(depth: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|i| (2 * i * depth + k) / (2 * k)).collect()
}

/// Recorded forward pass of one sample.
pub struct Forward {
    /// `(H·W)×1` aggregated depth.
    pub depth: Var,
    /// `1×K` level weights.
    pub weights: Var,
    pub selected: Vec<usize>,
}

/// Inference output of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub depth: Vec<f64>,
    pub level_weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub lfr: Lfr,
    pub head: Head,
}

impl Model {
    /// Every component draws from its own stream of the backbone seed, so
    /// the initial parameters do not depend on mode or strategy.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&cfg.backbone, &mut store)?;
        let c = cfg.backbone.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed);
        rng.set_stream(1);
        let lfr = Lfr::init(c, cfg.k, cfg.bottleneck_width(), cfg.strategy, &mut rng, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed);
        rng.set_stream(2);
        let head = Head::init(
            &cfg.head,
            c,
            cfg.backbone.grid(),
            cfg.backbone.patch_size,
            cfg.k,
            &mut rng,
            &mut store,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            lfr,
            head,
        })
    }

    fn stack_of(&self, tape: &Tape, layers: &[Var]) -> Result<FeatureStack> {
        let seqs: Vec<&Tensor> = layers.iter().map(|v| tape.value(*v)).collect();
        FeatureStack::from_sequences(&seqs, self.cfg.backbone.grid())
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<Forward> {
        let enc = self.backbone.forward(tape, b, image)?;
        let depth = enc.layers.len();
        let last = enc.layers[depth - 1];
        let k = self.cfg.k;
        let mut scorer = None;
        let (feats, selected) = match self.cfg.mode {
            Mode::Lfr => {
                let stack = self.stack_of(tape, &enc.layers)?;
                let selected = self.lfr.select(&self.store, &stack)?;
                let mut feats = Vec::with_capacity(k);
                for (slot, &l) in selected.iter().enumerate() {
                    feats.push(self.lfr.recombine(tape, b, slot, enc.layers[l - 1], last)?);
                }
                if self.cfg.strategy == SelectionStrategy::LearnedScores {
                    let mut logits: Option<Var> = None;
                    for &l in &selected {
                        let cls = tape.slice_rows(enc.layers[l - 1], 0, 1)?;
                        let s = self.lfr.score(tape, b, cls)?;
                        logits = Some(match logits {
                            None => s,
                            Some(o) => tape.concat_cols(o, s)?,
                        });
                    }
                    scorer = logits;
                }
                (feats, selected)
            }
            Mode::LastOnly => (vec![last; k], vec![depth; k]),
            Mode::UniformBaseline => {
                let sel = uniform_layers(depth, k);
                (sel.iter().map(|&l| enc.layers[l - 1]).collect(), sel)
            }
        };
        let n = self.cfg.backbone.num_tokens();
        let (depth_map, weights) = if self.cfg.multilevel {
            let mut levels = Vec::with_capacity(k);
            let mut cls = Vec::with_capacity(k);
            for (slot, &f) in feats.iter().enumerate() {
                let tok = tape.slice_rows(f, 1, n)?;
                levels.push(self.head.decode_level(tape, b, slot, tok)?);
                cls.push(tape.slice_rows(f, 0, 1)?);
            }
            let mut logits = self.head.level_logits(tape, b, &cls)?;
            if let Some(s) = scorer {
                logits = tape.add(logits, s)?;
            }
            let w = tape.softmax(logits)?;
            (aggregate(tape, w, &levels)?, w)
        } else {
            let mut sum = feats[0];
            for &f in &feats[1..] {
                sum = tape.add(sum, f)?;
            }
            let mean = tape.scale(sum, 1.0 / k as f64)?;
            let tok = tape.slice_rows(mean, 1, n)?;
            let w = tape.constant(Tensor::matrix(1, k, vec![1.0 / k as f64; k])?);
            (self.head.decode_level(tape, b, 0, tok)?, w)
        };
        Ok(Forward {
            depth: depth_map,
            weights,
            selected,
        })
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let f = self.forward(&mut tape, &b, image)?;
        Ok(Prediction {
            depth: tape.value(f.depth).data().to_vec(),
            level_weights: tape.value(f.weights).data().to_vec(),
            selected: f.selected,
        })
    }

    pub fn features(&self, image: &Image) -> Result<FeatureStack> {
        self.backbone.extract(&self.store, image)
    }

    /// Recombination of one image under the configured strategy.
    pub fn recombined(&self, image: &Image) -> Result<RecombinedSet> {
        self.lfr.run(&self.store, &self.features(image)?)
    }

    /// Loss of one sample and the gradient of every parameter accepted by
    /// `trainable` (`None` where no gradient reached the parameter).
    pub fn loss_and_grads(
        &self,
        image: &Image,
        gt: &DepthMap,
        loss: &LossConfig,
        use_hn: bool,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, trainable);
        let f = self.forward(&mut tape, &b, image)?;
        let l = total_loss_var(&mut tape, f.depth, gt, loss, use_hn)?;
        let value = tape.value(l).data()[0];
        tape.backward(l)?;
        let grads = b.vars().iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_height: 16,
                image_width: 16,
                patch_size: 4,
                depth: 4,
                width: 8,
                heads: 2,
                mlp_ratio: 2.0,
                seed: 5,
            },
            k: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn uniform_layer_choice() {
        assert_eq!(uniform_layers(8, 4), vec![2, 4, 6, 8]);
        assert_eq!(uniform_layers(12, 4), vec![3, 6, 9, 12]);
        assert_eq!(uniform_layers(3, 2), vec![2, 3]);
    }

    #[test]
    fn init_is_mode_independent() {
        let a = Model::init(&small()).unwrap();
        let mut cfg = small();
        cfg.mode = Mode::UniformBaseline;
        cfg.strategy = SelectionStrategy::NodeDegree;
        let b = Model::init(&cfg).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn zero_gates_match_last_only() {
        let img = Image::new(16, 16, (0..768).map(|i| ((i * 37) % 100) as f64 / 100.0).collect()).unwrap();
        let a = Model::init(&small()).unwrap();
        let mut cfg = small();
        cfg.mode = Mode::LastOnly;
        let b = Model::init(&cfg).unwrap();
        let pa = a.predict(&img).unwrap();
        let pb = b.predict(&img).unwrap();
        assert_eq!(pa.depth, pb.depth);
        assert_eq!(pa.level_weights, pb.level_weights);
        assert!((pa.level_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pa.selected.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn every_mode_runs() {
        let img = Image::zeros(16, 16);
        let gt = DepthMap::new(16, 16, (0..256).map(|i| 1.0 + i as f64 / 64.0).collect()).unwrap();
        for mode in [Mode::UniformBaseline, Mode::LastOnly, Mode::Lfr] {
            for multilevel in [false, true] {
                for strategy in SelectionStrategy::ALL {
                    let mut cfg = small();
                    cfg.mode = mode;
                    cfg.multilevel = multilevel;
                    cfg.strategy = strategy;
                    let m = Model::init(&cfg).unwrap();
                    let (l, g) = m.loss_and_grads(&img, &gt, &LossConfig::default(), true, |_| true).unwrap();
                    assert!(l.is_finite() && l > 0.0);
                    assert_eq!(g.len(), m.store.len());
                }
            }
        }
    }
}

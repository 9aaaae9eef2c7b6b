//! Per-level depth decoders and class-token-weighted aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Pointwise, Tape, Tensor, Var};
use crate::params::{normal_init, Binding, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Channels of the per-token projection.
    pub token_channels: usize,
    /// Channels after the first upsampling stage.
    pub mid_channels: usize,
    pub max_depth: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            token_channels: 16,
            mid_channels: 4,
            max_depth: 10.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_channels == 0 || self.mid_channels == 0 {
            return Err(Error::Config("head channel counts must be positive".into()));
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(Error::Config(format!("max_depth {} must be positive", self.max_depth)));
        }
        Ok(())
    }
}

/// Upsampling factors of the two stages for patch size `p`.
pub fn stage_factors(p: usize) -> (usize, usize) {
    if p % 2 == 0 {
        (p / 2, 2)
    } else {
        (p, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Head {
    cfg: HeadConfig,
    grid: (usize, usize),
    patch: usize,
    pub decoders: Vec<Decoder>,
    pub weight_w: ParamId,
    pub weight_b: ParamId,
}

impl Head {
    /// One decoder per level plus the shared level-weight projection.
    pub fn init(
        cfg: &HeadConfig,
        width: usize,
        grid: (usize, usize),
        patch: usize,
        levels: usize,
        rng: &mut impl Rng,
        store: &mut ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        let (s1, s2) = stage_factors(patch);
        let (d0, d1) = (cfg.token_channels, cfg.mid_channels);
        let g = ParamGroup::Head;
        let mut decoders = Vec::with_capacity(levels);
        for k in 1..=levels {
            let name = |x: &str| format!("head.level{k}.{x}");
            decoders.push(Decoder {
                w0: store.add(name("w0"), g, normal_init(rng, &[width, d0], 1.0 / (width as f64).sqrt())),
                b0: store.add(name("b0"), g, Tensor::zeros(&[d0])),
                w1: store.add(name("w1"), g, normal_init(rng, &[d0, s1 * s1 * d1], 1.0 / (d0 as f64).sqrt())),
                b1: store.add(name("b1"), g, Tensor::zeros(&[s1 * s1 * d1])),
                w2: store.add(name("w2"), g, normal_init(rng, &[d1, s2 * s2], 1.0 / (d1 as f64).sqrt())),
                b2: store.add(name("b2"), g, Tensor::zeros(&[s2 * s2])),
            });
        }
        let weight_w = store.add("head.weight.w", g, normal_init(rng, &[width, 1], 0.02));
        let weight_b = store.add("head.weight.b", g, Tensor::zeros(&[1]));
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            patch,
            decoders,
            weight_w,
            weight_b,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn levels(&self) -> usize {
        self.decoders.len()
    }

    /// Decodes `N×C` image tokens into an `(H·W)×1` depth map in
    /// `(0, max_depth)`.
    pub fn decode_level(&self, tape: &mut Tape, b: &Binding, level: usize, tokens: Var) -> Result<Var> {
        let (rows, cols) = self.grid;
        if tape.shape(tokens).first() != Some(&(rows * cols)) {
            return Err(Error::dim("decode_level", tape.shape(tokens), &[rows * cols]));
        }
        let d = &self.decoders[level];
        let (s1, s2) = stage_factors(self.patch);
        let x = tape.matmul(tokens, b.var(d.w0))?;
        let x = tape.add_row(x, b.var(d.b0))?;
        let x = tape.gelu(x)?;
        let x = tape.matmul(x, b.var(d.w1))?;
        let x = tape.add_row(x, b.var(d.b1))?;
        let x = tape.pixel_shuffle(x, rows, cols, s1, self.cfg.mid_channels)?;
        let x = tape.gelu(x)?;
        let x = tape.matmul(x, b.var(d.w2))?;
        let x = tape.add_row(x, b.var(d.b2))?;
        let x = tape.pixel_shuffle(x, rows * s1, cols * s1, s2, 1)?;
        let x = tape.pointwise(Pointwise::Sigmoid, x)?;
        tape.scale(x, self.cfg.max_depth)
    }

    /// Shared-projection logits of `K` class tokens (each `1×C`), as `1×K`.
    pub fn level_logits(&self, tape: &mut Tape, b: &Binding, cls: &[Var]) -> Result<Var> {
        let mut out: Option<Var> = None;
        for &c in cls {
            let l = tape.matmul(c, b.var(self.weight_w))?;
            let l = tape.add_row(l, b.var(self.weight_b))?;
            out = Some(match out {
                None => l,
                Some(o) => tape.concat_cols(o, l)?,
            });
        }
        out.ok_or_else(|| Error::domain("level_weights", "no levels"))
    }
}

/// Convex combination of equally sized maps.
pub fn aggregate(tape: &mut Tape, weights: Var, levels: &[Var]) -> Result<Var> {
    tape.weighted_sum(weights, levels)
}

/// 16-bit binary PGM (big-endian samples) of depth scaled by 1000.
pub fn depth_pgm16(depth: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for d in depth {
        let v = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

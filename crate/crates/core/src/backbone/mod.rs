//! Toy vision transformer that emits the token matrix and class token of
//! every layer.
//!
//! Blocks are pre-norm (`x + attn(ln(x))`, then `x + mlp(ln(x))`). Recorded
//! features are the post-block outputs, before any final normalization.

mod features;

pub use features::{dump_features, load_features, read_features, write_features, FeatureStack};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal_init, Binding, ParamGroup, ParamId, ParamStore};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            depth: 8,
            width: 32,
            heads: 4,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} < 2", self.depth)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// `N = (H/p)·(W/p)`.
    pub fn num_tokens(&self) -> usize {
        token_count(self.image_height, self.image_width, self.patch_size)
    }

    pub fn hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }
}

pub fn token_count(height: usize, width: usize, patch: usize) -> usize {
    (height / patch) * (width / patch)
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
}

/// Output of a recorded forward pass: one `(N+1)×C` sequence per layer with
/// the class token in row 0.
pub struct Encoded {
    pub layers: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl Backbone {
    /// Registers freshly initialized parameters. Residual output projections
    /// start at zero, so every block is initially the identity.
    pub fn init(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.width;
        let p = cfg.patch_size;
        let hidden = cfg.hidden();
        let g = ParamGroup::Backbone;
        let patch_w = store.add("backbone.patch.w", g, normal_init(&mut rng, &[p * p * 3, c], INIT_STD));
        let patch_b = store.add("backbone.patch.b", g, Tensor::zeros(&[c]));
        let cls = store.add("backbone.cls", g, normal_init(&mut rng, &[1, c], INIT_STD));
        let pos = store.add(
            "backbone.pos",
            g,
            normal_init(&mut rng, &[cfg.num_tokens() + 1, c], INIT_STD),
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = |s: &str| format!("backbone.block{}.{s}", l + 1);
            blocks.push(BlockParams {
                ln1_g: store.add(name("ln1.g"), g, Tensor::full(&[c], 1.0)),
                ln1_b: store.add(name("ln1.b"), g, Tensor::zeros(&[c])),
                w_qkv: store.add(name("attn.qkv.w"), g, normal_init(&mut rng, &[c, 3 * c], INIT_STD)),
                b_qkv: store.add(name("attn.qkv.b"), g, Tensor::zeros(&[3 * c])),
                w_o: store.add(name("attn.out.w"), g, Tensor::zeros(&[c, c])),
                b_o: store.add(name("attn.out.b"), g, Tensor::zeros(&[c])),
                ln2_g: store.add(name("ln2.g"), g, Tensor::full(&[c], 1.0)),
                ln2_b: store.add(name("ln2.b"), g, Tensor::zeros(&[c])),
                w_fc1: store.add(name("mlp.fc1.w"), g, normal_init(&mut rng, &[c, hidden], INIT_STD)),
                b_fc1: store.add(name("mlp.fc1.b"), g, Tensor::zeros(&[hidden])),
                w_fc2: store.add(name("mlp.fc2.w"), g, Tensor::zeros(&[hidden, c])),
                b_fc2: store.add(name("mlp.fc2.b"), g, Tensor::zeros(&[c])),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Overwrites every parameter of block `layer` (1-based) with zeros,
    /// layer-norm gains included.
    pub fn zero_block(&self, store: &mut ParamStore, layer: usize) {
        let b = &self.blocks[layer - 1];
        for id in [
            b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc1, b.b_fc1, b.w_fc2,
            b.b_fc2,
        ] {
            for x in store.get_mut(id).data_mut() {
                *x = 0.0;
            }
        }
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch_w
    }

    pub fn patch_bias(&self) -> ParamId {
        self.patch_b
    }

    pub fn position(&self) -> ParamId {
        self.pos
    }

    pub fn class_token(&self) -> ParamId {
        self.cls
    }

    /// Flattens non-overlapping patches into an `N × (p·p·3)` matrix, patches
    /// in row-major grid order and each patch flattened as (row, col, channel).
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let cfg = &self.cfg;
        if image.height != cfg.image_height || image.width != cfg.image_width {
            return Err(Error::Config(format!(
                "image {}x{} does not match configured {}x{}",
                image.height, image.width, cfg.image_height, cfg.image_width
            )));
        }
        let p = cfg.patch_size;
        let (rows, cols) = cfg.grid();
        let mut data = Vec::with_capacity(rows * cols * p * p * 3);
        for gy in 0..rows {
            for gx in 0..cols {
                for dy in 0..p {
                    let y = gy * p + dy;
                    let start = (y * image.width + gx * p) * 3;
                    data.extend_from_slice(&image.data[start..start + p * 3]);
                }
            }
        }
        Tensor::matrix(rows * cols, p * p * 3, data)
    }

    /// Patch tokens with the class token prepended and position encodings
    /// added: an `(N+1)×C` sequence.
    pub fn patch_embed(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let proj = tape.matmul(patches, b.var(self.patch_w))?;
        let proj = tape.add_row(proj, b.var(self.patch_b))?;
        let seq = tape.concat_rows(b.var(self.cls), proj)?;
        tape.add(seq, b.var(self.pos))
    }

    /// Runs every block, recording the output sequence of each layer.
    pub fn encode(&self, tape: &mut Tape, b: &Binding, tokens: Var) -> Result<Encoded> {
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, attn) = self.block_forward(tape, b, block, x)?;
            layers.push(y);
            attention.push(attn);
            x = y;
        }
        Ok(Encoded { layers, attention })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<Encoded> {
        let tokens = self.patch_embed(tape, b, image)?;
        self.encode(tape, b, tokens)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        p: &BlockParams,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let c = self.cfg.width;
        let heads = self.cfg.heads;
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let h = tape.layer_norm(x, b.var(p.ln1_g), b.var(p.ln1_b), LN_EPS)?;
        let qkv = tape.matmul(h, b.var(p.w_qkv))?;
        let qkv = tape.add_row(qkv, b.var(p.b_qkv))?;
        let mut attn_maps = Vec::with_capacity(heads);
        let mut merged: Option<Var> = None;
        for i in 0..heads {
            let q = tape.slice_cols(qkv, i * hd, hd)?;
            let k = tape.slice_cols(qkv, c + i * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * c + i * hd, hd)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            attn_maps.push(attn);
            let out = tape.matmul(attn, v)?;
            merged = Some(match merged {
                None => out,
                Some(m) => tape.concat_cols(m, out)?,
            });
        }
        let merged = merged.expect("heads >= 1");
        let o = tape.matmul(merged, b.var(p.w_o))?;
        let o = tape.add_row(o, b.var(p.b_o))?;
        let x = tape.add(x, o)?;

        let h = tape.layer_norm(x, b.var(p.ln2_g), b.var(p.ln2_b), LN_EPS)?;
        let m = tape.matmul(h, b.var(p.w_fc1))?;
        let m = tape.add_row(m, b.var(p.b_fc1))?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, b.var(p.w_fc2))?;
        let m = tape.add_row(m, b.var(p.b_fc2))?;
        let x = tape.add(x, m)?;
        Ok((x, attn_maps))
    }

    /// Inference-only feature extraction.
    pub fn extract(&self, store: &ParamStore, image: &Image) -> Result<FeatureStack> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let enc = self.forward(&mut tape, &b, image)?;
        let seqs: Vec<&Tensor> = enc.layers.iter().map(|v| tape.value(*v)).collect();
        FeatureStack::from_sequences(&seqs, self.cfg.grid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            seed: 3,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn token_count_law() {
        assert_eq!(token_count(64, 64, 8), 64);
        assert_eq!(token_count(480, 640, 16), 1200);
        assert_eq!(BackboneConfig::default().num_tokens(), 64);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.patch_size = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.depth = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_and_projection_yield_position_encodings() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store).unwrap();
        for x in store.get_mut(bb.patch_weight()).data_mut() {
            *x = 0.0;
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let seq = bb.patch_embed(&mut tape, &b, &Image::zeros(16, 16)).unwrap();
        let seq = tape.value(seq);
        let pos = store.get(bb.position());
        assert_eq!(seq.shape(), &[17, 8]);
        assert_eq!(&seq.data()[8..], &pos.data()[8..]);
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store).unwrap();
        assert!(matches!(bb.extract(&store, &Image::zeros(8, 16)), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store).unwrap();
        bb.zero_block(&mut store, 1);
        bb.zero_block(&mut store, 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let img = noise_image(16, 16, 1);
        let tokens = bb.patch_embed(&mut tape, &b, &img).unwrap();
        let enc = bb.encode(&mut tape, &b, tokens).unwrap();
        assert_eq!(enc.layers.len(), 2);
        for l in &enc.layers {
            assert_eq!(tape.value(*l), tape.value(tokens));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut cfg = small_cfg();
        cfg.depth = 3;
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let enc = bb.forward(&mut tape, &b, &noise_image(16, 16, 2)).unwrap();
        assert_eq!(enc.layers.len(), 3);
        for layer in &enc.attention {
            assert_eq!(layer.len(), cfg.heads);
            for a in layer {
                let t = tape.value(*a);
                for r in 0..t.rows() {
                    let s: f64 = t.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = small_cfg();
        let img = noise_image(16, 16, 5);
        let run = || {
            let mut store = ParamStore::new();
            let bb = Backbone::init(&cfg, &mut store).unwrap();
            // Non-zero residual weights so the blocks do real work.
            for p in store.params_mut() {
                if p.name.ends_with("out.w") || p.name.ends_with("fc2.w") {
                    for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                        *x = ((i as f64) * 0.37).sin() * 0.05;
                    }
                }
            }
            bb.extract(&store, &img).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.depth(), cfg.depth);
        assert_ne!(a.tokens(1), a.tokens(2));
    }
}

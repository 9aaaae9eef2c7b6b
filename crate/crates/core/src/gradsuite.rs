//! Finite-difference checks over every differentiable op and the composed
//! training pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::image::{DepthMap, Image};
use crate::losses::{total_loss_var, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, Pointwise, Tape, Tensor, Var};
use crate::params::{normal_init, Binding};

pub const ELEMENTARY_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;
pub const ELEMENTARY_STEP: f64 = 1e-5;
pub const COMPOSED_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: Option<String>,
}

/// Runs one check; evaluation errors count as failures.
pub fn check<F>(name: &str, f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> CheckOutcome
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    match grad_check(f, inputs, step) {
        Ok(r) => {
            let err = r.max_rel_err();
            CheckOutcome {
                name: name.to_string(),
                max_rel_err: err,
                tolerance,
                passed: err < tolerance,
                detail: None,
            }
        }
        Err(e) => CheckOutcome {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            tolerance,
            passed: false,
            detail: Some(e.to_string()),
        },
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal_init(rng, shape, 1.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(rng, shape).map(|x| 0.5 + x.abs())
}

/// Weighted sum of every output entry, so each check exercises a dense
/// upstream gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(normal_init(&mut rng, &shape, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn elementary_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    cases.push(("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![rand_t(rng, &[5, 4]), rand_t(rng, &[4, 6])]));
    cases.push((
        "matmul_nt",
        Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        vec![rand_t(rng, &[3, 4]), rand_t(rng, &[5, 4])],
    ));
    cases.push(("add", Box::new(|t, v| t.add(v[0], v[1])), vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])]));
    cases.push(("add_row", Box::new(|t, v| t.add_row(v[0], v[1])), vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4])]));
    cases.push(("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])]));
    cases.push(("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![rand_t(rng, &[3, 4])]));
    cases.push((
        "mul_scalar",
        Box::new(|t, v| t.mul_scalar(v[0], v[1])),
        vec![rand_t(rng, &[3, 4]), rand_t(rng, &[1])],
    ));
    cases.push(("tanh", Box::new(|t, v| t.tanh(v[0])), vec![rand_t(rng, &[10])]));
    cases.push(("gelu", Box::new(|t, v| t.gelu(v[0])), vec![rand_t(rng, &[10])]));
    // Entries kept away from the kink at 0.
    let relu_in = rand_t(rng, &[10]).map(|x| if x.abs() < 0.1 { x + 0.3 * x.signum() + 0.01 } else { x });
    cases.push(("relu", Box::new(|t, v| t.pointwise(Pointwise::Relu, v[0])), vec![relu_in]));
    cases.push(("log", Box::new(|t, v| t.pointwise(Pointwise::Log, v[0])), vec![positive(rng, &[10])]));
    cases.push(("exp", Box::new(|t, v| t.pointwise(Pointwise::Exp, v[0])), vec![rand_t(rng, &[10])]));
    cases.push(("sigmoid", Box::new(|t, v| t.pointwise(Pointwise::Sigmoid, v[0])), vec![rand_t(rng, &[10])]));
    cases.push(("softmax", Box::new(|t, v| t.softmax(v[0])), vec![rand_t(rng, &[7])]));
    cases.push(("softmax_rows", Box::new(|t, v| t.softmax(v[0])), vec![rand_t(rng, &[3, 5])]));
    cases.push((
        "layer_norm",
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        vec![rand_t(rng, &[4, 6]), rand_t(rng, &[6]), rand_t(rng, &[6])],
    ));
    cases.push((
        "concat_channels",
        Box::new(|t, v| t.concat_cols(v[0], v[1])),
        vec![rand_t(rng, &[3, 2]), rand_t(rng, &[3, 4])],
    ));
    cases.push((
        "concat_rows",
        Box::new(|t, v| t.concat_rows(v[0], v[1])),
        vec![rand_t(rng, &[1, 4]), rand_t(rng, &[3, 4])],
    ));
    cases.push(("slice_cols", Box::new(|t, v| t.slice_cols(v[0], 1, 3)), vec![rand_t(rng, &[3, 5])]));
    cases.push(("slice_rows", Box::new(|t, v| t.slice_rows(v[0], 1, 2)), vec![rand_t(rng, &[4, 3])]));
    cases.push(("reshape", Box::new(|t, v| t.reshape(v[0], vec![6, 2])), vec![rand_t(rng, &[3, 4])]));
    cases.push(("sum", Box::new(|t, v| t.sum(v[0])), vec![rand_t(rng, &[3, 4])]));
    cases.push(("mean", Box::new(|t, v| t.mean(v[0])), vec![rand_t(rng, &[3, 4])]));
    cases.push((
        "pixel_shuffle",
        Box::new(|t, v| t.pixel_shuffle(v[0], 2, 3, 2, 2)),
        vec![rand_t(rng, &[6, 8])],
    ));
    cases.push((
        "weighted_sum",
        Box::new(|t, v| t.weighted_sum(v[0], &[v[1], v[2]])),
        vec![rand_t(rng, &[2]), rand_t(rng, &[4, 1]), rand_t(rng, &[4, 1])],
    ));
    cases
}

/// Every elementary op, each followed by a random linear projection.
pub fn elementary_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    elementary_cases(&mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (name, op, inputs))| {
            check(
                name,
                |t, v| {
                    let y = op(t, v)?;
                    project(t, y, i as u64)
                },
                &inputs,
                ELEMENTARY_STEP,
                ELEMENTARY_TOL,
            )
        })
        .collect()
}

/// Reduced architecture used by the composed check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            depth: 3,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            seed: 11,
        },
        k: 2,
        ..ModelConfig::default()
    }
}

/// Model with every parameter perturbed away from its structured
/// initialization (zero residual projections, zero gates).
pub fn randomized_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.params_mut() {
        let noise = normal_init(&mut rng, p.value.shape(), 0.2);
        for (x, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    Ok(model)
}

/// Synthetic micro-batch matching `cfg`.
pub fn micro_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<(Image, DepthMap)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.backbone.image_height, cfg.backbone.image_width);
    (0..n)
        .map(|_| {
            let img = rand_t(&mut rng, &[h * w * 3]).map(|x| (0.5 + 0.2 * x).clamp(0.0, 1.0));
            let depth = rand_t(&mut rng, &[h * w]).map(|x| 1.0 + 4.0 * (0.5 + 0.3 * x).clamp(0.05, 1.0));
            Ok((Image::new(h, w, img.into_data())?, DepthMap::new(h, w, depth.into_data())?))
        })
        .collect()
}

/// Mean total loss of `batch` as a function of every model parameter.
pub fn composed_check(model: &Model, batch: &[(Image, DepthMap)], loss: &LossConfig, name: &str) -> CheckOutcome {
    let inputs: Vec<Tensor> = model.store.params().iter().map(|p| p.value.clone()).collect();
    check(
        name,
        |tape, vars| {
            let b = Binding::from_vars(vars.to_vec());
            let mut total: Option<Var> = None;
            for (img, gt) in batch {
                let f = model.forward(tape, &b, img)?;
                let l = total_loss_var(tape, f.depth, gt, loss, true)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            tape.scale(total, 1.0 / batch.len() as f64)
        },
        &inputs,
        COMPOSED_STEP,
        COMPOSED_TOL,
    )
}

/// The full suite: elementary ops, then backbone, LFR, head and loss
/// composed over a 2-sample micro-batch.
pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = elementary_checks();
    let cfg = micro_config();
    let model = randomized_model(&cfg, 12)?;
    let batch = micro_batch(&cfg, 2, 13)?;
    out.push(composed_check(&model, &batch, &LossConfig::default(), "pipeline"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementary_ops_pass() {
        let out = elementary_checks();
        assert!(out.len() >= 25);
        for c in &out {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn broken_op_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[6]);
        // Backward claims d sum(x) / dx = 2.
        struct Wrong;
        impl crate::numerics::CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong_sum"
            }
            fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
                vec![vec![2.0 * grad_out[0]; inputs[0].numel()]]
            }
        }
        let c = check(
            "wrong",
            |t, v| {
                let total = Tensor::vector(vec![t.value(v[0]).data().iter().sum()]);
                t.custom(Box::new(Wrong), &[v[0]], total)
            },
            &[x],
            ELEMENTARY_STEP,
            ELEMENTARY_TOL,
        );
        assert!(!c.passed);
        assert!((c.max_rel_err - 0.5).abs() < 1e-6);
    }
}

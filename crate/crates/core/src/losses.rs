//! Training objectives (scale-invariant log loss, hierarchical normalization
//! loss) and the standard depth evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;
use crate::numerics::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub hn_scales: Vec<usize>,
    /// Floor of the patch spread in the HN normalization, in depth units.
    pub epsilon: f64,
    /// Normalize log depth instead of metric depth inside the HN loss.
    pub hn_log_depth: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            hn_scales: vec![1, 4, 8],
            epsilon: 0.5,
            hn_log_depth: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.hn_scales.is_empty() || self.hn_scales.contains(&0) {
            return Err(Error::Config("hn_scales must be non-empty positive integers".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn check_inputs(op: &'static str, pred: &[f64], gt: &DepthMap) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::dim(op, &[pred.len()], &[gt.height, gt.width]));
    }
    let mut n = 0;
    for (i, (&p, (&g, &v))) in pred.iter().zip(gt.depth.iter().zip(&gt.valid)).enumerate() {
        if !v {
            continue;
        }
        if !(p > 0.0) || !(g > 0.0) {
            return Err(Error::domain(op, format!("non-positive depth at pixel {i} (pred {p}, gt {g})")));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain(op, "no valid pixels"));
    }
    Ok(n)
}

/// Scale-invariant log loss and its gradient with respect to `pred`.
///
/// `sqrt(mean(g²) - λ·mean(g)²)` with `g = log pred - log gt` over valid
/// pixels. The gradient is zero where the loss is exactly zero.
pub fn silog_loss_with_grad(pred: &[f64], gt: &DepthMap, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let n = check_inputs("silog_loss", pred, gt)? as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..pred.len() {
        if gt.valid[i] {
            let g = pred[i].ln() - gt.depth[i].ln();
            sum += g;
            sum_sq += g * g;
        }
    }
    let mean = sum / n;
    let mut radicand = sum_sq / n - lambda * mean * mean;
    if radicand < 0.0 {
        if radicand > -1e-12 {
            log::warn!("silog radicand {radicand:e} clamped to zero");
            radicand = 0.0;
        } else {
            return Err(Error::domain("silog_loss", format!("negative radicand {radicand:e}")));
        }
    }
    let loss = radicand.sqrt();
    let mut grad = vec![0.0; pred.len()];
    if loss > 0.0 {
        for i in 0..pred.len() {
            if gt.valid[i] {
                let g = pred[i].ln() - gt.depth[i].ln();
                grad[i] = (g - lambda * mean) / (n * loss * pred[i]);
            }
        }
    }
    Ok((loss, grad))
}

pub fn silog_loss(pred: &[f64], gt: &DepthMap, lambda: f64) -> Result<f64> {
    silog_loss_with_grad(pred, gt, lambda).map(|(l, _)| l)
}

/// `(v - mean(v)) / max(mad(v), ε)` with `mad` the mean absolute deviation.
///
/// Patches spread wider than `ε` are normalized exactly, so the result is
/// invariant to positive affine maps of `values`; flatter patches are only
/// centered and divided by `ε`.
pub fn hn_patch_normalize(values: &[f64], epsilon: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let mad = values.iter().map(|v| (v - mean).abs()).sum::<f64>() / m;
    let denom = mad.max(epsilon);
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// Splits `0..extent` into `m` contiguous bands with bounds `⌊i·extent/m⌋`.
fn bands(extent: usize, m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).map(move |i| (i * extent / m, (i + 1) * extent / m))
}

/// Hierarchical normalization loss and its gradient with respect to `pred`.
///
/// At every scale `M` the map is cut into an `M×M` grid of patches; each
/// valid pixel belongs to one patch per scale, so it is covered by exactly
/// `hn_scales.len()` patches.
pub fn hn_loss_with_grad(pred: &[f64], gt: &DepthMap, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let n_valid = check_inputs("hn_loss", pred, gt)?;
    cfg.validate()?;
    let (h, w) = (gt.height, gt.width);
    let transform = |v: f64| if cfg.hn_log_depth { v.ln() } else { v };
    let coeff = 1.0 / (n_valid as f64 * cfg.hn_scales.len() as f64);
    let eps = cfg.epsilon;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let mut idx = Vec::new();
    for &scale in &cfg.hn_scales {
        for (y0, y1) in bands(h, scale) {
            for (x0, x1) in bands(w, scale) {
                idx.clear();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = y * w + x;
                        if gt.valid[i] {
                            idx.push(i);
                        }
                    }
                }
                if idx.is_empty() {
                    continue;
                }
                let p: Vec<f64> = idx.iter().map(|&i| transform(pred[i])).collect();
                let g: Vec<f64> = idx.iter().map(|&i| transform(gt.depth[i])).collect();
                let np = hn_patch_normalize(&p, eps);
                let ng = hn_patch_normalize(&g, eps);
                let m = p.len() as f64;
                let mean = p.iter().sum::<f64>() / m;
                let mad = p.iter().map(|v| (v - mean).abs()).sum::<f64>() / m;
                let denom = mad.max(eps);
                let spread = if mad > eps { 1.0 } else { 0.0 };
                // a_i = dL/dn_i, s_i = sign(p_i - mean)
                let a: Vec<f64> = np.iter().zip(&ng).map(|(x, t)| coeff * sign(x - t)).collect();
                let s: Vec<f64> = p.iter().map(|v| sign(v - mean)).collect();
                let a_mean = a.iter().sum::<f64>() / m;
                let s_mean = s.iter().sum::<f64>() / m;
                let a_dot_c: f64 = a.iter().zip(&p).map(|(ai, pi)| ai * (pi - mean)).sum();
                for k in 0..idx.len() {
                    loss += coeff * (np[k] - ng[k]).abs();
                    let d = (a[k] - a_mean) / denom - spread * a_dot_c / (denom * denom) * (s[k] - s_mean) / m;
                    let chain = if cfg.hn_log_depth { 1.0 / pred[idx[k]] } else { 1.0 };
                    grad[idx[k]] += d * chain;
                }
            }
        }
    }
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn hn_loss(pred: &[f64], gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    hn_loss_with_grad(pred, gt, cfg).map(|(l, _)| l)
}

/// `silog + hn`.
pub fn total_loss(pred: &[f64], gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    Ok(silog_loss(pred, gt, cfg.lambda)? + hn_loss(pred, gt, cfg)?)
}

/// Scalar loss recorded on a tape with a gradient computed during forward.
struct PrecomputedLoss {
    name: &'static str,
    grad: Vec<f64>,
}

impl CustomOp for PrecomputedLoss {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![self.grad.iter().map(|g| g * grad_out[0]).collect()]
    }
}

fn record(tape: &mut Tape, name: &'static str, pred: Var, (loss, grad): (f64, Vec<f64>)) -> Result<Var> {
    tape.custom(Box::new(PrecomputedLoss { name, grad }), &[pred], Tensor::scalar(loss))
}

pub fn silog_loss_var(tape: &mut Tape, pred: Var, gt: &DepthMap, lambda: f64) -> Result<Var> {
    let lg = silog_loss_with_grad(tape.value(pred).data(), gt, lambda)?;
    record(tape, "silog_loss", pred, lg)
}

pub fn hn_loss_var(tape: &mut Tape, pred: Var, gt: &DepthMap, cfg: &LossConfig) -> Result<Var> {
    let lg = hn_loss_with_grad(tape.value(pred).data(), gt, cfg)?;
    record(tape, "hn_loss", pred, lg)
}

/// Training objective on a tape; `use_hn = false` drops the HN term.
pub fn total_loss_var(tape: &mut Tape, pred: Var, gt: &DepthMap, cfg: &LossConfig, use_hn: bool) -> Result<Var> {
    let s = silog_loss_var(tape, pred, gt, cfg.lambda)?;
    if !use_hn {
        return Ok(s);
    }
    let h = hn_loss_var(tape, pred, gt, cfg)?;
    tape.add(s, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    #[serde(rename = "d1")]
    pub delta1: f64,
    #[serde(rename = "d2")]
    pub delta2: f64,
    #[serde(rename = "d3")]
    pub delta3: f64,
    #[serde(rename = "n_valid")]
    pub valid_pixel_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCaps {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthCaps {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 10.0,
        }
    }
}

/// Standard depth metrics over valid pixels, with predictions clamped to
/// `caps` first.
pub fn eval_metrics(pred: &[f64], gt: &DepthMap, caps: DepthCaps) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::dim("eval_metrics", &[pred.len()], &[gt.height, gt.width]));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut log10, mut g_sum, mut g_sq) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for i in 0..pred.len() {
        if !gt.valid[i] {
            continue;
        }
        let g = gt.depth[i];
        if !(g > 0.0) {
            return Err(Error::domain("eval_metrics", format!("non-positive ground truth at pixel {i}")));
        }
        if !(pred[i] > 0.0) && !(caps.min_depth > 0.0) {
            return Err(Error::domain("eval_metrics", format!("non-positive prediction at pixel {i}")));
        }
        let p = pred[i].clamp(caps.min_depth, caps.max_depth);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let lg = p.ln() - g.ln();
        sq_log += lg * lg;
        log10 += (p.log10() - g.log10()).abs();
        g_sum += lg;
        g_sq += lg * lg;
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("eval_metrics", "no valid pixels"));
    }
    let nf = n as f64;
    let mean_g = g_sum / nf;
    Ok(MetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        silog: (g_sq / nf - mean_g * mean_g).max(0.0).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        valid_pixel_count: n,
    })
}

impl MetricReport {
    /// Per-image average of a set of reports; pixel counts are summed.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            log10: avg(|r| r.log10),
            silog: avg(|r| r.silog),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            valid_pixel_count: reports.iter().map(|r| r.valid_pixel_count).sum(),
        })
    }
}

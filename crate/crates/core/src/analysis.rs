//! Layer-wise statistics over backbone features: inter-sample
//! representational distance, alignment with depth geometry, and per-sample
//! linear depth predictability. Also anchor-token similarity maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::image::DepthMap;
use crate::numerics::Tensor;
use crate::parallel::par_map;

/// `1 - r` for the Pearson correlation `r` of `x` and `y`.
pub fn pearson_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(1.0 - pearson(x, y)?)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::domain("pearson", "need at least 2 entries"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant vector, correlation undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", &[x.len()], &[y.len()]));
    }
    if x.len() < 3 {
        return Err(Error::domain("spearman", format!("need at least 3 entries, got {}", x.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Symmetric `S×S` matrix of pairwise Pearson distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    fn from_vectors(vectors: &[Vec<f64>], what: &str) -> Result<Self> {
        let s = vectors.len();
        let mut data = vec![0.0; s * s];
        for i in 0..s {
            for j in i + 1..s {
                let d = pearson_distance(&vectors[i], &vectors[j]).map_err(|e| match e {
                    Error::Degenerate(msg) => Error::Degenerate(format!("{what} samples {i} and {j}: {msg}")),
                    other => other,
                })?;
                data[i * s + j] = d;
                data[j * s + i] = d;
            }
        }
        Ok(Self { size: s, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    /// Strictly-upper-triangle entries in row-major order.
    pub fn upper(&self) -> Vec<f64> {
        let s = self.size;
        (0..s)
            .flat_map(|i| (i + 1..s).map(move |j| (i, j)))
            .map(|(i, j)| self.data[i * s + j])
            .collect()
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let u = self.upper();
        u.iter().sum::<f64>() / u.len() as f64
    }
}

/// Per-sample mean over the `N` image tokens (class token excluded).
pub fn mean_token(tokens: &Tensor) -> Vec<f64> {
    let (n, c) = (tokens.rows(), tokens.cols());
    let mut out = vec![0.0; c];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Representational dissimilarity matrix of layer `l` (1-based).
pub fn build_rdm(stacks: &[FeatureStack], layer: usize) -> Result<DistanceMatrix> {
    if stacks.len() < 3 {
        return Err(Error::domain("build_rdm", format!("need S >= 3 samples, got {}", stacks.len())));
    }
    let c = stacks[0].width();
    if let Some(bad) = stacks.iter().find(|s| s.width() != c) {
        return Err(Error::dim("build_rdm", &[c], &[bad.width()]));
    }
    let means: Vec<Vec<f64>> = stacks.iter().map(|s| mean_token(s.tokens(layer))).collect();
    DistanceMatrix::from_vectors(&means, &format!("layer {layer}"))
}

/// Depth distance matrix over flattened raw depth maps.
pub fn build_ddm(depths: &[DepthMap]) -> Result<DistanceMatrix> {
    if let Some(first) = depths.first() {
        if let Some(bad) = depths.iter().find(|d| !d.same_size(first)) {
            return Err(Error::dim(
                "build_ddm",
                &[first.height, first.width],
                &[bad.height, bad.width],
            ));
        }
    }
    let vecs: Vec<Vec<f64>> = depths.iter().map(|d| d.depth.clone()).collect();
    DistanceMatrix::from_vectors(&vecs, "depth")
}

/// Spearman correlation between the upper triangles of two matrices.
pub fn spearman(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::dim("spearman", &[a.size], &[b.size]));
    }
    spearman_rho(&a.upper(), &b.upper())
}

/// Bilinear resampling with half-pixel centers (align-corners false).
pub fn bilinear_downsample(src: &[f64], height: usize, width: usize, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 {
        return Err(Error::domain("bilinear_downsample", "zero target extent"));
    }
    if src.len() != height * width {
        return Err(Error::dim("bilinear_downsample", &[height, width], &[src.len()]));
    }
    if rows > height || cols > width {
        return Err(Error::domain(
            "bilinear_downsample",
            format!("target {rows}x{cols} larger than source {height}x{width}"),
        ));
    }
    let coord = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1, fy) = coord(r, rows, height);
        for c in 0..cols {
            let (x0, x1, fx) = coord(c, cols, width);
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct R2Fit {
    pub r2: f64,
    pub rank_deficient: bool,
}

/// In-sample `R²` of an ordinary least-squares fit `y ≈ X·β + β₀`.
///
/// Solved through an SVD; singular values below the usual rank tolerance
/// are dropped, which yields the minimum-norm solution when the design is
/// rank deficient.
pub fn depth_r2(tokens: &Tensor, target: &[f64]) -> Result<R2Fit> {
    let (n, c) = (tokens.rows(), tokens.cols());
    if target.len() != n {
        return Err(Error::dim("depth_r2", &[n], &[target.len()]));
    }
    if n <= c {
        return Err(Error::IllPosed(format!("{n} observations for {c} predictors")));
    }
    let mean = target.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("constant depth target".into()));
    }
    let design = DMatrix::from_fn(n, c + 1, |i, j| if j < c { tokens.get(i, j) } else { 1.0 });
    let y = DVector::from_column_slice(target);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (n.max(c + 1) as f64) * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::IllPosed(format!("least squares failed: {e}")))?;
    let resid = &y - &design * beta;
    let ss_res = resid.norm_squared();
    Ok(R2Fit {
        r2: 1.0 - ss_res / ss_tot,
        rank_deficient: rank < c + 1,
    })
}

/// Cosine similarity of the anchor token to every token, row-major over the
/// patch grid.
pub fn anchor_similarity_map(tokens: &Tensor, anchor: usize, grid: (usize, usize)) -> Result<Vec<f64>> {
    let n = tokens.rows();
    if grid.0 * grid.1 != n {
        return Err(Error::dim("anchor_similarity_map", &[grid.0, grid.1], &[n]));
    }
    if anchor >= n {
        return Err(Error::domain("anchor_similarity_map", format!("anchor {anchor} >= {n}")));
    }
    let norms: Vec<f64> = (0..n).map(|i| crate::numerics::dot(tokens.row(i), tokens.row(i)).sqrt()).collect();
    if let Some(i) = norms.iter().position(|v| *v == 0.0) {
        return Err(Error::Degenerate(format!("token {i} has zero norm")));
    }
    let a = tokens.row(anchor);
    Ok((0..n)
        .map(|i| {
            if i == anchor {
                1.0
            } else {
                (crate::numerics::dot(a, tokens.row(i)) / (norms[anchor] * norms[i])).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// 8-bit binary PGM with similarity mapped linearly from `[-1, 1]` to
/// `[0, 255]`.
pub fn similarity_pgm(map: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.iter().map(|s| (((s.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub mean_rdm: f64,
    pub rdm_ci: [f64; 2],
    pub spearman_to_depth: f64,
    pub mean_r2: f64,
    pub r2_ci: [f64; 2],
    /// Samples whose design matrix was rank deficient.
    pub rank_deficient: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layers: Vec<LayerStats>,
    /// Spearman correlation between layer index and mean `R²`; `None` when
    /// the `R²` profile is constant across layers.
    pub r2_trend_spearman: Option<f64>,
}

impl LayerReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Mean and `mean ± 1.96·stderr` interval.
pub fn mean_ci(values: &[f64]) -> (f64, [f64; 2]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, [mean, mean]);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, [mean - half, mean + half])
}

/// Full per-layer analysis over `S` samples.
pub fn layer_report(stacks: &[FeatureStack], depths: &[DepthMap], workers: usize) -> Result<LayerReport> {
    if stacks.len() != depths.len() {
        return Err(Error::dim("layer_report", &[stacks.len()], &[depths.len()]));
    }
    if stacks.len() < 3 {
        return Err(Error::domain("layer_report", format!("need S >= 3 samples, got {}", stacks.len())));
    }
    let depth_count = stacks[0].depth();
    if let Some(bad) = stacks.iter().find(|s| s.depth() != depth_count) {
        return Err(Error::dim("layer_report", &[depth_count], &[bad.depth()]));
    }
    let ddm = build_ddm(depths)?;
    let targets: Vec<Vec<f64>> = stacks
        .iter()
        .zip(depths)
        .map(|(s, d)| {
            let (rows, cols) = s.grid();
            bilinear_downsample(&d.depth, d.height, d.width, rows, cols)
        })
        .collect::<Result<_>>()?;

    let mut layers = Vec::with_capacity(depth_count);
    for l in 1..=depth_count {
        let rdm = build_rdm(stacks, l)?;
        let (mean_rdm, rdm_ci) = mean_ci(&rdm.upper());
        let spearman_to_depth = spearman(&rdm, &ddm)?;
        let fits: Vec<Result<R2Fit>> = par_map(stacks, workers, |i, s| depth_r2(s.tokens(l), &targets[i]));
        let fits: Vec<R2Fit> = fits.into_iter().collect::<Result<_>>()?;
        let r2: Vec<f64> = fits.iter().map(|f| f.r2).collect();
        let (mean_r2, r2_ci) = mean_ci(&r2);
        layers.push(LayerStats {
            layer: l,
            mean_rdm,
            rdm_ci,
            spearman_to_depth,
            mean_r2,
            r2_ci,
            rank_deficient: fits.iter().filter(|f| f.rank_deficient).count(),
        });
    }
    let index: Vec<f64> = (1..=depth_count).map(|l| l as f64).collect();
    let profile: Vec<f64> = layers.iter().map(|s| s.mean_r2).collect();
    let r2_trend_spearman = match spearman_rho(&index, &profile) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(Error::Domain { .. }) if depth_count < 3 => None,
        Err(e) => return Err(e),
    };
    Ok(LayerReport {
        layers,
        r2_trend_spearman,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_distance_cases() {
        let x = [1.0, 2.0, 5.0, -1.0];
        assert!(pearson_distance(&x, &x).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_distance(&x, &neg).unwrap() - 2.0).abs() < 1e-15);
        let d = pearson_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        // r = 3 / sqrt(2 · 42/9)
        let r = 3.0 / (2.0f64 * 42.0 / 9.0).sqrt();
        assert!((d - (1.0 - r)).abs() < 1e-15);
        assert!((d - 0.018_018).abs() < 1e-5);
        assert!(matches!(pearson_distance(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 3.0, 4.0]).unwrap(), 1.0);
        assert!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn downsample_cases() {
        let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(bilinear_downsample(&ramp, 4, 4, 2, 2).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        assert_eq!(bilinear_downsample(&ramp, 4, 4, 4, 4).unwrap(), ramp);
        assert_eq!(bilinear_downsample(&[3.0; 12], 3, 4, 2, 3).unwrap(), vec![3.0; 6]);
        assert!(bilinear_downsample(&ramp, 4, 4, 0, 2).is_err());
    }

    #[test]
    fn anchor_map_cases() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let m = anchor_similarity_map(&t, 0, (1, 3)).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 1.0]);
        let eq = Tensor::from_rows(&vec![vec![0.3, -0.2]; 4]).unwrap();
        assert!(anchor_similarity_map(&eq, 2, (2, 2))
            .unwrap()
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-15));
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(anchor_similarity_map(&z, 0, (1, 2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn r2_cases() {
        let (n, c) = (20, 3);
        let tokens = Tensor::matrix(n, c, (0..n * c).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|i| 0.5 + 2.0 * tokens.get(i, 0) - tokens.get(i, 2)).collect();
        assert!((depth_r2(&tokens, &y).unwrap().r2 - 1.0).abs() < 1e-9);
        let narrow = Tensor::zeros(&[3, 3]);
        assert!(matches!(depth_r2(&narrow, &[1.0, 2.0, 3.0]), Err(Error::IllPosed(_))));
    }

    #[test]
    fn rank_deficient_design_is_flagged() {
        let n = 10;
        let mut data = Vec::new();
        for i in 0..n {
            let v = i as f64;
            data.extend_from_slice(&[v, 2.0 * v, (v * 0.3).sin()]);
        }
        let tokens = Tensor::matrix(n, 3, data).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i as f64).sqrt()).collect();
        let fit = depth_r2(&tokens, &y).unwrap();
        assert!(fit.rank_deficient);
        assert!(fit.r2 <= 1.0 && fit.r2 >= 0.0);
    }
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Trained runs are shared between the trend,
//! analysis and strategy criteria; expect roughly half an hour single core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lfr_core::analysis::{depth_r2, pearson_distance, spearman_rho};
use lfr_core::backbone::FeatureStack;
use lfr_core::cli;
use lfr_core::gradsuite::{micro_config, randomized_model, run_suite};
use lfr_core::image::DepthMap;
use lfr_core::lfr::{select_layers, SelectionStrategy};
use lfr_core::losses::{eval_metrics, hn_loss, silog_loss, total_loss, DepthCaps, LossConfig, MetricReport};
use lfr_core::model::Mode;
use lfr_core::numerics::Tensor;
use lfr_core::synth::{generate_split, SceneSpec};
use lfr_core::train::{train, Dataset, RunConfig, StrategyComparison, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, passed: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict {
        id,
        name,
        passed,
        detail: detail.into(),
    };
    println!(
        "criterion {:>2} {} {}: {}",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.name,
        v.detail
    );
    v
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn run_cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("lfr").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
    DepthMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.5..9.5)).collect()).unwrap()
}

// Brute-force oracles.

fn naive_pearson_distance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    1.0 - sxy / (sxx * syy).sqrt()
}

fn naive_rank(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    1.0 - naive_pearson_distance(&naive_rank(x), &naive_rank(y))
}

/// R² from the normal equations solved by Gauss-Jordan elimination.
fn naive_r2(x: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let p = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = x[i].clone();
        r.push(1.0);
        r
    };
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..n {
        let r = row(i);
        for j in 0..p {
            for k in 0..p {
                a[j][k] += r[j] * r[k];
            }
            a[j][p] += r[j] * y[i];
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=p {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|j| a[j][p] / a[j][j]).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let fit: f64 = row(i).iter().zip(&beta).map(|(u, b)| u * b).sum();
        ss_res += (y[i] - fit) * (y[i] - fit);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    1.0 - ss_res / ss_tot
}

// Criteria.

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = run_suite().unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst_elem = results
        .iter()
        .filter(|r| r.name != "pipeline")
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let pipeline = results.iter().find(|r| r.name == "pipeline").map(|r| r.max_rel_err).unwrap_or(f64::INFINITY);
    verdict(
        1,
        "gradient suite",
        failed.is_empty() && worst_elem < 1e-6 && pipeline < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst elementary {worst_elem:.2e}, pipeline {pipeline:.2e}, {elapsed:.1?}, failed {failed:?}",
            results.len()
        ),
    )
}

fn micro_dataset(root: &Path) -> PathBuf {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        seed: 9,
        ..SceneSpec::default()
    };
    let dir = root.join("micro_data");
    generate_split(&spec, 8, 4, &dir).unwrap();
    dir
}

fn micro_run_config(root: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = micro_config();
    cfg.seed = cfg.model.backbone.seed;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 4;
    let path = root.join("micro_config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn first_batch_loss(run: &Path) -> f64 {
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    first["first_batch_loss"].as_f64().unwrap()
}

fn gate_zero_identity(root: &Path, data: &Path, cfg_path: &Path) -> Verdict {
    let mut cfg = RunConfig::from_json(&std::fs::read_to_string(cfg_path).unwrap()).unwrap();
    cfg.model.backbone.depth = 6;
    cfg.model.k = 3;
    // Perturbed weights so that layers and adapters are non-trivial, then
    // every gate reset to zero.
    let mut model = randomized_model(&cfg.model, 17).unwrap();
    for slot in model.lfr.slots.clone() {
        model.store.get_mut(slot.gate).data_mut()[0] = 0.0;
    }
    let dataset = Dataset::load(data).unwrap();
    let mut bitwise = true;
    for sample in dataset.train.iter().chain(&dataset.val) {
        let stack = model.features(&sample.rgb).unwrap();
        let set = model.recombined(&sample.rgb).unwrap();
        let last = stack.depth();
        for k in 0..set.tokens.len() {
            let same_tok = set.tokens[k].data().iter().zip(stack.tokens(last).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let same_cls = set.cls[k].data().iter().zip(stack.cls(last).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            bitwise &= same_tok && same_cls && set.gates[k] == 0.0;
        }
    }
    let last_run = root.join("c2_last");
    let pinned_run = root.join("c2_pinned");
    let code_a = run_cli(&["train", "--config", s(cfg_path), "--data", s(data), "--out", s(&last_run), "--mode", "last-only", "--epochs", "1"]);
    let code_b = run_cli(&[
        "train", "--config", s(cfg_path), "--data", s(data), "--out", s(&pinned_run), "--mode", "lfr", "--pin-gates", "--epochs", "1",
    ]);
    let (a, b) = (first_batch_loss(&last_run), first_batch_loss(&pinned_run));
    verdict(
        2,
        "gate-zero identity",
        bitwise && code_a == 0 && code_b == 0 && (a - b).abs() <= 1e-12,
        format!("recombined == last layer bitwise: {bitwise}; first-step loss last-only {a:.15} vs pinned lfr {b:.15}"),
    )
}

/// Smallest mean absolute deviation over every patch of every HN scale.
fn min_patch_spread(map: &DepthMap, scales: &[usize]) -> f64 {
    let (h, w) = (map.height, map.width);
    let mut worst = f64::INFINITY;
    for &m in scales {
        for py in 0..m {
            for px in 0..m {
                let mut v = Vec::new();
                for y in py * h / m..(py + 1) * h / m {
                    for x in px * w / m..(px + 1) * w / m {
                        v.push(map.at(y, x));
                    }
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                worst = worst.min(v.iter().map(|u| (u - mean).abs()).sum::<f64>() / v.len() as f64);
            }
        }
    }
    worst
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_map(&mut rng, 32, 32);
    let cfg = LossConfig::default();
    let e: Vec<f64> = gt.depth.iter().map(|d| d * std::f64::consts::E).collect();
    let silog = silog_loss(&e, &gt, 0.85).unwrap();
    let silog_err = (silog - 0.15f64.sqrt()).abs();
    // Non-degenerate: even the halved map spreads beyond epsilon in every patch.
    let spread = 0.5 * min_patch_spread(&gt, &cfg.hn_scales);
    let mut hn_worst = 0.0f64;
    for a in [0.5, 2.0] {
        for b in [0.0, 1.0] {
            let p: Vec<f64> = gt.depth.iter().map(|d| a * d + b).collect();
            hn_worst = hn_worst.max(hn_loss(&p, &gt, &cfg).unwrap());
        }
    }
    let total = total_loss(&gt.depth, &gt, &cfg).unwrap();
    verdict(
        3,
        "closed-form loss identities",
        silog_err < 1e-9 && spread > cfg.epsilon && hn_worst < 1e-9 && total == 0.0,
        format!(
            "|silog - sqrt(0.15)| {silog_err:.1e}, worst affine hn {hn_worst:.1e} (min patch spread {spread:.2} > eps {}), total(gt, gt) {total}",
            cfg.epsilon
        ),
    )
}

fn statistics_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut dp, mut ds, mut dr) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(5..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.4 * v + rng.gen_range(-2.0..2.0)).collect();
        dp = dp.max((pearson_distance(&x, &y).unwrap() - naive_pearson_distance(&x, &y)).abs());
        // Coarse integer values force many ties.
        let xt: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
        let yt: Vec<f64> = xt.iter().map(|v| v + rng.gen_range(0..3) as f64).collect();
        if xt.iter().any(|v| *v != xt[0]) && yt.iter().any(|v| *v != yt[0]) {
            ds = ds.max((spearman_rho(&xt, &yt).unwrap() - naive_spearman(&xt, &yt)).abs());
        }
        let (rows, c) = (rng.gen_range(12..40), rng.gen_range(2..8));
        let feats: Vec<Vec<f64>> = (0..rows).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let target: Vec<f64> = feats.iter().map(|f| f.iter().sum::<f64>() + rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::matrix(rows, c, feats.concat()).unwrap();
        dr = dr.max((depth_r2(&t, &target).unwrap().r2 - naive_r2(&feats, &target)).abs());
    }
    verdict(
        4,
        "statistics oracles",
        dp < 1e-10 && ds < 1e-10 && dr < 1e-10,
        format!("max deviation pearson {dp:.1e}, spearman {ds:.1e}, r2 {dr:.1e} over 100 instances each"),
    )
}

fn selection_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strategies = [
        SelectionStrategy::MinimalSimilarity,
        SelectionStrategy::MaximalSimilarity,
        SelectionStrategy::NodeDegree,
    ];
    let mut mismatches = 0;
    for _ in 0..50 {
        let (layers, grid, c) = (8, (4, 4), 6);
        let n = grid.0 * grid.1;
        let mut tok: Vec<Tensor> = (0..layers)
            .map(|_| Tensor::matrix(n, c, (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let mut cls: Vec<Tensor> = (0..layers)
            .map(|_| Tensor::matrix(1, c, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let before = FeatureStack::new(tok.clone(), cls.clone(), grid).unwrap();
        for l in 0..layers {
            for r in 0..n {
                if rng.gen_bool(0.5) {
                    let f = rng.gen_range(0.01..100.0);
                    tok[l].data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
                }
            }
            if rng.gen_bool(0.5) {
                let f = rng.gen_range(0.01..100.0);
                cls[l].data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
        let after = FeatureStack::new(tok, cls, grid).unwrap();
        for st in strategies {
            let a = select_layers(&before, st, 3, None).unwrap();
            let b = select_layers(&after, st, 3, None).unwrap();
            if a != b {
                mismatches += 1;
            }
        }
    }
    verdict(
        5,
        "selection invariance",
        mismatches == 0,
        format!("{mismatches} mismatched selections over 50 stacks x 3 strategies"),
    )
}

struct Ladder {
    uniform: Vec<f64>,
    last: Vec<f64>,
    lfr: Vec<f64>,
    lfr_runs: Vec<PathBuf>,
    slowest: Duration,
    lfr_outcome: Option<TrainOutcome>,
}

fn base_config(seed: u64) -> RunConfig {
    RunConfig::default().with_seed(seed)
}

fn timed_train(cfg: &RunConfig, data: &Dataset, out: &Path) -> (TrainOutcome, Duration) {
    let start = Instant::now();
    let o = train(cfg, data, out, 1).unwrap();
    (o, start.elapsed())
}

fn run_ladder(root: &Path, data: &Dataset) -> Ladder {
    let mut l = Ladder {
        uniform: vec![],
        last: vec![],
        lfr: vec![],
        lfr_runs: vec![],
        slowest: Duration::ZERO,
        lfr_outcome: None,
    };
    for seed in SEEDS {
        for (name, mode, hn, ml) in [
            ("uniform", Mode::UniformBaseline, false, false),
            ("last", Mode::LastOnly, false, false),
            ("lfr", Mode::Lfr, true, true),
        ] {
            let mut cfg = base_config(seed);
            cfg.model.mode = mode;
            cfg.use_hn = hn;
            cfg.model.multilevel = ml;
            let out = root.join(format!("{name}_seed{seed}"));
            let (o, t) = timed_train(&cfg, data, &out);
            l.slowest = l.slowest.max(t);
            println!("  {name:<8} seed {seed}: final val abs_rel {:.4} ({t:.0?})", o.final_val.abs_rel);
            match mode {
                Mode::UniformBaseline => l.uniform.push(o.final_val.abs_rel),
                Mode::LastOnly => l.last.push(o.final_val.abs_rel),
                Mode::Lfr => {
                    l.lfr.push(o.final_val.abs_rel);
                    l.lfr_runs.push(out);
                    if seed == SEEDS[0] {
                        l.lfr_outcome = Some(o);
                    }
                }
            }
        }
    }
    l
}

fn ladder_trend(l: &Ladder) -> Verdict {
    let (u, la, f) = (median(l.uniform.clone()), median(l.last.clone()), median(l.lfr.clone()));
    let gain = (u - f) / u;
    verdict(
        6,
        "last-layer ablation trend",
        u >= la && la >= f && gain >= 0.02 && l.slowest < Duration::from_secs(15 * 60),
        format!(
            "median val abs_rel uniform {u:.4} / last-only {la:.4} / lfr {f:.4}, lfr gain over uniform {:.1}%, slowest run {:.0?}",
            100.0 * gain,
            l.slowest
        ),
    )
}

fn r2_trend(root: &Path, data_dir: &Path, l: &Ladder) -> Verdict {
    let mut trends = Vec::new();
    for (i, run) in l.lfr_runs.iter().enumerate() {
        let out = root.join(format!("analyze_trained{i}"));
        let code = run_cli(&["analyze", "--data", s(data_dir), "--checkpoint", s(&run.join("final.ckpt")), "--out", s(&out)]);
        let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
        trends.push((code, stats["r2_trend_spearman"].as_f64()));
    }
    let untrained = root.join("analyze_untrained");
    let code_untrained = run_cli(&["analyze", "--data", s(data_dir), "--seed", "0", "--out", s(&untrained)]);
    let positive = trends.iter().filter(|(c, t)| *c == 0 && t.is_some_and(|v| v > 0.0)).count();
    verdict(
        7,
        "depth predictability trend",
        positive >= 2 && code_untrained == 0 && untrained.join("stats.json").exists(),
        format!(
            "trained r2_trend_spearman {:?}, positive for {positive}/3; untrained exit code {code_untrained}",
            trends.iter().map(|(_, t)| t.map(|v| (v * 1e4).round() / 1e4)).collect::<Vec<_>>()
        ),
    )
}

fn strategy_parity(root: &Path, data: &Dataset, l: &Ladder) -> Verdict {
    let mut results: Vec<(SelectionStrategy, MetricReport)> = Vec::new();
    let mut hash = String::new();
    for st in SelectionStrategy::ALL {
        let mut cfg = base_config(SEEDS[0]);
        cfg.model.strategy = st;
        if st == SelectionStrategy::MinimalSimilarity {
            if let Some(o) = &l.lfr_outcome {
                hash = cfg.hash().unwrap();
                results.push((st, o.final_val.clone()));
                continue;
            }
        }
        let (o, _) = timed_train(&cfg, data, &root.join(format!("strategy_{}", st.name())));
        results.push((st, o.final_val));
    }
    let cmp = StrategyComparison::new(hash, &results).unwrap();
    let path = root.join("strategy_comparison.json");
    cmp.save(&path).unwrap();
    let complete = cmp.ranking.len() == 4 && cmp.ranking.iter().all(|e| e.metrics.valid_pixel_count > 0);
    let reread: StrategyComparison = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    verdict(
        8,
        "selection strategy parity harness",
        complete && reread == cmp,
        cmp.ranking
            .iter()
            .map(|e| format!("#{} {} {:.4}", e.rank, e.strategy.name(), e.metrics.abs_rel))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn metric_conventions() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let caps = DepthCaps::default();
    let gt = DepthMap::new(8, 8, (0..64).map(|_| rng.gen_range(0.5..4.5)).collect()).unwrap();
    let uncapped = gt.depth.iter().all(|d| 2.0 * d < caps.max_depth);
    let same = eval_metrics(&gt.depth, &gt, caps).unwrap();
    let zero = [same.abs_rel, same.sq_rel, same.rmse, same.rmse_log, same.log10, same.silog].iter().all(|v| *v == 0.0);
    let ones = same.delta1 == 1.0 && same.delta2 == 1.0 && same.delta3 == 1.0;
    let twice: Vec<f64> = gt.depth.iter().map(|d| 2.0 * d).collect();
    let m = eval_metrics(&twice, &gt, caps).unwrap();
    verdict(
        9,
        "metric conventions",
        uncapped && zero && ones && m.abs_rel == 1.0 && m.delta3 == 0.0,
        format!("doubled within caps {uncapped}, identity zeros {zero}, deltas one {ones}; doubled: abs_rel {}, d3 {}", m.abs_rel, m.delta3),
    )
}

fn all_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(all_files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path, cfg_path: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_lfr");
    let gen_cfg = root.join("det_gen.json");
    std::fs::write(&gen_cfg, r#"{"spec":{"height":16,"width":16,"seed":21},"n_train":6,"n_val":4}"#).unwrap();
    let attempt = |tag: &str, threads: &str| -> (PathBuf, bool) {
        let base = root.join("det");
        let _ = std::fs::remove_dir_all(&base);
        let data = base.join("data");
        let run = base.join("run");
        let ck = run.join("final.ckpt");
        let (ev, an, sel, grad) = (base.join("eval"), base.join("analyze"), base.join("select"), base.join("grad"));
        let cmds: Vec<Vec<String>> = [
            vec!["generate", "--config", s(&gen_cfg), "--out", s(&data)],
            vec!["train", "--config", s(cfg_path), "--data", s(&data), "--out", s(&run)],
            vec!["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&ev), "--save-depth"],
            vec!["analyze", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&an)],
            vec!["select-stats", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&sel)],
            vec!["gradcheck", "--out", s(&grad)],
        ]
        .iter()
        .map(|c| c.iter().map(|x| x.to_string()).collect())
        .collect();
        let mut ok = true;
        for c in &cmds {
            let st = std::process::Command::new(bin)
                .args(c)
                .env("LFR_THREADS", threads)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            ok &= st.success();
        }
        let kept = root.join(tag);
        let _ = std::fs::remove_dir_all(&kept);
        std::fs::rename(&base, &kept).unwrap();
        (kept, ok)
    };
    let (a, ok_a) = attempt("det_a", "1");
    let (b, ok_b) = attempt("det_b", "4");
    let fa = all_files(&a);
    let fb = all_files(&b);
    let rel = |base: &Path, v: &[PathBuf]| -> Vec<PathBuf> { v.iter().map(|p| p.strip_prefix(base).unwrap().to_path_buf()).collect() };
    let same_names = rel(&a, &fa) == rel(&b, &fb);
    let mut differing = Vec::new();
    let mut compared = 0;
    if same_names {
        for (x, y) in fa.iter().zip(&fb) {
            let is_json = x.extension().is_some_and(|e| e == "json" || e == "jsonl");
            let is_ckpt = x.extension().is_some_and(|e| e == "ckpt");
            if is_json || is_ckpt {
                compared += 1;
                if std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
                    differing.push(x.strip_prefix(&a).unwrap().display().to_string());
                }
            }
        }
    }
    verdict(
        10,
        "determinism",
        ok_a && ok_b && same_names && compared > 0 && differing.is_empty(),
        format!("{compared} JSON/checkpoint files compared across two full reruns (LFR_THREADS 1 and 4), differing {differing:?}"),
    )
}

#[test]
fn acceptance() {
    let root = work_dir();
    let micro_data = micro_dataset(&root);
    let micro_cfg = micro_run_config(&root);
    let mut verdicts = vec![
        gradient_suite(),
        gate_zero_identity(&root, &micro_data, &micro_cfg),
        loss_identities(),
        statistics_oracles(),
        selection_invariance(),
    ];

    let data_dir = root.join("data");
    generate_split(&SceneSpec::default(), 200, 50, &data_dir).unwrap();
    let data = Dataset::load(&data_dir).unwrap();
    let ladder = run_ladder(&root, &data);
    verdicts.push(ladder_trend(&ladder));
    verdicts.push(r2_trend(&root, &data_dir, &ladder));
    verdicts.push(strategy_parity(&root, &data, &ladder));
    verdicts.push(metric_conventions());
    verdicts.push(determinism(&root, &micro_cfg));

    verdicts.sort_by_key(|v| v.id);
    println!("---- summary ----");
    for v in &verdicts {
        println!("criterion {:>2} {} {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.name);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

//! The ten acceptance criteria, run in order with one PASS/FAIL line each.
//! The directional criteria share one ablation run at the desk-scale config
//! in `configs/acceptance.toml`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cstn::ablate::{self, AblationOptions, AblationReport};
use cstn::checks;
use cstn::data::generate;
use cstn::metrics::MetricsReport;
use cstn::pyramid::{PyramidOutput, ScaleInfo};
use cstn::stn::{cstn_conv, AffineTheta};
use cstn::wsol::{
    joint_softmax, loss_scale, loss_theta, map_inference, topk_boxes, total_loss, Decoder, JointDistribution,
    LossWeights,
};
use cstn::{Graph, Tensor, TrainConfig};

const CONFIG: &str = include_str!("../../../configs/acceptance.toml");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Every registered gradient check on 20 seeds within five minutes.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = (0.0, "");
    for c in checks::registry() {
        let required = if c.linear { 1e-6 } else { 1e-4 };
        if c.tolerance() != required {
            failures.push(format!("{} runs at tolerance {:e}", c.name, c.tolerance()));
        }
        for seed in 0..20 {
            match c.run(seed, false) {
                Ok(r) if r.passed && r.max_rel_error < required => {
                    if r.max_rel_error / required > worst.0 {
                        worst = (r.max_rel_error / required, c.name);
                    }
                }
                Ok(r) => failures.push(format!("{} seed {seed}: {r}", c.name)),
                Err(e) => failures.push(format!("{} seed {seed}: {e}", c.name)),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 300.0,
        format!(
            "{} checks x 20 seeds in {secs:.1}s, worst error/tolerance {:.1e} ({}){}",
            checks::registry().len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    )
}

/// Identity transforms reduce the transformer convolution to a plain one.
fn reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=3);
        let (p, q) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut g = Graph::new();
        let f = g.constant(Tensor::randn(&[n, p, h, w], 1.0, &mut rng));
        let wt = g.constant(Tensor::randn(&[q, p, 3, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::randn(&[q], 1.0, &mut rng));
        let theta = g.constant(AffineTheta::identity(n, h, w).into_tensor());
        let a = cstn_conv(&mut g, f, theta, wt, Some(b)).unwrap();
        let c = g.conv2d(f, wt, Some(b), 1, 1).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(c).data()) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst < 1e-9, format!("20 cases, max |cstn_conv - conv2d| = {worst:.2e}"))
}

fn scale_infos(dims: &[(usize, usize)]) -> Vec<ScaleInfo> {
    dims.iter()
        .enumerate()
        .map(|(s, &(height, width))| ScaleInfo {
            level: s,
            stride: 8 << s,
            height,
            width,
            base_size: 3.0,
        })
        .collect()
}

/// Joint tables against explicit flattened-list oracles.
fn joint_tables() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum_err, mut shift_err, mut oracle_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=6);
        let dims: Vec<(usize, usize)> = (0..rng.random_range(1..=2))
            .map(|_| (rng.random_range(1..=4), rng.random_range(1..=4)))
            .collect();
        let mut logits: Vec<Tensor> = dims.iter().map(|&(h, w)| Tensor::randn(&[n, c, h, w], 3.0, &mut rng)).collect();
        // exact ties exercise the lowest-index rule
        if rng.random_bool(0.3) {
            let t = &mut logits[0];
            let v = t.data()[0];
            let last = t.numel() - 1;
            t.data_mut()[last] = v;
        }
        let refs: Vec<&Tensor> = logits.iter().collect();
        let jd = JointDistribution::from_logits(&refs).unwrap();
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<Tensor> = logits
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + shift))
            .collect();
        let jd2 = JointDistribution::from_logits(&shifted.iter().collect::<Vec<_>>()).unwrap();
        let layout = jd.layout().clone();
        let marg = jd.marginalize_classes();
        let scales = scale_infos(&dims);
        let thetas: Vec<AffineTheta> = dims.iter().map(|&(h, w)| AffineTheta::identity(n, h, w)).collect();
        let dec = Decoder {
            thetas: &thetas,
            scales: &scales,
            image_w: 64.0,
            image_h: 64.0,
            use_transform: true,
        };
        for b in 0..n {
            // flattened list in (s, l, c) order, built directly from the maps
            let mut flat = Vec::new();
            for (s, t) in logits.iter().enumerate() {
                let hw = dims[s].0 * dims[s].1;
                for l in 0..hw {
                    for ch in 0..c {
                        flat.push((t.data()[(b * c + ch) * hw + l], s, l, ch));
                    }
                }
            }
            let max = flat.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = flat.iter().map(|e| (e.0 - max).exp()).sum();
            let row = jd.row(b);
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&p| p < 0.0) {
                mismatches += 1;
            }
            let mut class_sum = vec![0.0; c];
            for (i, &(v, s, l, ch)) in flat.iter().enumerate() {
                let p = (v - max).exp() / z;
                oracle_err = oracle_err.max((row[i] - p).abs());
                oracle_err = oracle_err.max((jd.get(b, s, l, ch) - p).abs());
                class_sum[ch] += p;
            }
            for ch in 0..c {
                oracle_err = oracle_err.max((marg.data()[b * c + ch] - class_sum[ch]).abs());
            }
            sum_err = sum_err.max((marg.data()[b * c..(b + 1) * c].iter().sum::<f64>() - 1.0).abs());
            for (x, y) in row.iter().zip(jd2.row(b)) {
                shift_err = shift_err.max((x - y).abs());
            }
            // exhaustive scan: strictly greater replaces, so the first maximum stays
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            let pred = map_inference(&jd, b, &dec);
            let (s, l, ch) = (flat[best].1, flat[best].2, flat[best].3);
            if (pred.scale, pred.location, pred.class) != (s, l, ch)
                || layout.decode(best) != (s, l, ch)
                || pred.score != row[best]
            {
                mismatches += 1;
            }
            // sort-based top-k per class
            for ch in 0..c {
                let mut entries: Vec<(f64, usize)> = (0..row.len())
                    .filter(|&i| flat[i].3 == ch)
                    .map(|i| (row[i], i))
                    .collect();
                entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let want: Vec<usize> = entries.iter().take(5).map(|e| e.1).collect();
                if jd.topk_for_class(b, ch, 5) != want {
                    mismatches += 1;
                }
                let boxes = topk_boxes(&jd, b, ch, 5, &dec);
                if boxes.len() != want.len() || boxes.iter().zip(&want).any(|(bx, &i)| bx.score != row[i]) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(
        sum_err < 1e-9 && shift_err < 1e-12 && oracle_err < 1e-12 && mismatches == 0,
        format!(
            "200 tables: sum error {sum_err:.1e}, shift error {shift_err:.1e}, oracle error {oracle_err:.1e}, {mismatches} MAP/top-k mismatches"
        ),
    )
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The total loss against components recomputed by plain loops, plus the
/// analytic hand cases of the two regularizers.
fn loss_recomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let c = rng.random_range(2..=6);
        let dims = [(4, 4), (2, 2)];
        let logits: Vec<Tensor> = dims.iter().map(|&(h, w)| Tensor::randn(&[n, c, h, w], 2.0, &mut rng)).collect();
        let thetas: Vec<Tensor> = dims.iter().map(|&(h, w)| Tensor::randn(&[n, 6, h, w], 0.5, &mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let w = LossWeights {
            lambda: rng.random_range(0.0..1.0),
            alpha: rng.random_range(0.0..1.0),
        };
        let mut g = Graph::new();
        let out = PyramidOutput {
            logits: logits.iter().map(|t| g.constant(t.clone())).collect(),
            thetas: thetas.iter().map(|t| g.constant(t.clone())).collect(),
            scales: scale_infos(&dims),
        };
        let terms = total_loss(&mut g, &out, &labels, w).unwrap().values(&g);

        let (mut cls, mut scale) = (0.0, 0.0);
        for b in 0..n {
            let mut all = Vec::new();
            let mut own = Vec::new();
            let mut per_scale_max = [f64::NEG_INFINITY; 2];
            for (s, t) in logits.iter().enumerate() {
                let hw = dims[s].0 * dims[s].1;
                for ch in 0..c {
                    for l in 0..hw {
                        let v = t.data()[(b * c + ch) * hw + l];
                        all.push(v);
                        if ch == labels[b] {
                            own.push(v);
                            per_scale_max[s] = per_scale_max[s].max(v);
                        }
                    }
                }
            }
            let lz = logsumexp(&all);
            cls += lz - logsumexp(&own);
            scale += ((per_scale_max[0] - lz).exp() - (per_scale_max[1] - lz).exp()).max(0.0);
        }
        cls /= n as f64;
        scale /= n as f64;
        let ident = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut theta = 0.0;
        for (s, t) in thetas.iter().enumerate() {
            let hw = dims[s].0 * dims[s].1;
            for (i, v) in t.data().iter().enumerate() {
                let k = (i / hw) % 6;
                theta += (v - ident[k]).powi(2);
            }
        }
        theta /= n as f64;
        let expected = cls + w.lambda * theta + w.alpha * scale;
        worst = worst.max((terms.total - expected).abs() / expected.abs().max(1.0));
    }

    // one location with t1 = 0.5, the rest identity
    let mut g = Graph::new();
    let mut t = AffineTheta::identity(1, 3, 3).into_tensor();
    t.data_mut()[2 * 9 + 4] = 0.5;
    let tv = g.constant(t);
    let lt = loss_theta(&mut g, &[tv]).unwrap();
    let theta_case = g.value(lt).item().unwrap();

    // finer maximum 0.6, coarser maximum 0.4
    let hinge = |pf: f64, pc: f64| {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 1, 1, 1], vec![pf.ln()]).unwrap());
        let b = g.constant(Tensor::new(&[1, 1, 1, 1], vec![pc.ln()]).unwrap());
        let j = joint_softmax(&mut g, &[a, b]).unwrap();
        let v = loss_scale(&mut g, &j, &[0]).unwrap();
        g.value(v).item().unwrap()
    };
    let hand = [
        (theta_case, 0.25),
        (hinge(0.6, 0.4), 0.6 - 0.4),
        (hinge(0.4, 0.6), 0.0),
        (hinge(0.5, 0.5), 0.0),
    ];
    let hand_err = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        worst < 1e-12 && hand_err < 1e-12,
        format!("20 random batches, max relative error {worst:.1e}; hand cases max error {hand_err:.1e}"),
    )
}

fn pts(v: f64) -> f64 {
    100.0 * v
}

fn transform_gain(r: &AblationReport) -> Outcome {
    let m = &r.main;
    let gain = pts(m.transformed.top1_loc - m.default.top1_loc);
    let minutes = (m.train_seconds + m.eval_seconds) / 60.0;
    outcome(
        gain >= 5.0 && minutes < 30.0,
        format!(
            "Top-1 Loc {:.1} with transform vs {:.1} default boxes ({gain:+.1} points, need >= +5); train+eval {minutes:.1} min",
            pts(m.transformed.top1_loc),
            pts(m.default.top1_loc)
        ),
    )
}

fn cstn_vs_plain_head(r: &AblationReport) -> Outcome {
    let (a, b) = (&r.main.transformed, &r.no_cstn.transformed);
    let loc_gap = pts(a.top1_loc - b.top1_loc);
    let cls_gap = pts((a.top1_class - b.top1_class).abs());
    outcome(
        loc_gap >= 10.0 && cls_gap <= 5.0,
        format!(
            "Top-1 Loc {:.1} vs {:.1} without CSTN ({loc_gap:+.1}, need >= +10); Top-1 Class {:.1} vs {:.1} (gap {cls_gap:.1}, need <= 5)",
            pts(a.top1_loc),
            pts(b.top1_loc),
            pts(a.top1_class),
            pts(b.top1_class)
        ),
    )
}

fn lambda_effect(r: &AblationReport, base_lambda: f64) -> Outcome {
    let find = |l: f64| r.lambda_sweep.iter().find(|v| v.config.train.lambda == l).map(|v| v.transformed);
    let (Some(zero), Some(base)) = (find(0.0), find(base_lambda)) else {
        return outcome(false, "sweep lacks lambda=0 or the base lambda".into());
    };
    let area_ratio = zero.mean_pred_area / base.mean_pred_area;
    let drop = pts(base.top1_loc - zero.top1_loc);
    let cls: Vec<f64> = r.lambda_sweep.iter().map(|v| v.transformed.top1_class).collect();
    let spread = pts(cls.iter().copied().fold(f64::MIN, f64::max) - cls.iter().copied().fold(f64::MAX, f64::min));
    let rows: Vec<String> = r
        .lambda_sweep
        .iter()
        .map(|v| format!("{:e}: loc {:.1} cls {:.1}", v.config.train.lambda, pts(v.transformed.top1_loc), pts(v.transformed.top1_class)))
        .collect();
    outcome(
        area_ratio < 0.4 && drop >= 20.0 && spread < 3.0,
        format!(
            "area ratio lambda=0 / base {area_ratio:.2} (need < 0.40); Top-1 Loc drop {drop:+.1} (need >= 20); class spread {spread:.1} (need < 3) [{}]",
            rows.join(", ")
        ),
    )
}

fn level_specialization(r: &AblationReport) -> Outcome {
    let h = &r.level_histogram;
    let bins = h.totals.len();
    let acc = |v: usize, b: usize| pts(h.accuracy(v, b));
    let small: Vec<bool> = (0..3).map(|b| acc(0, b) > acc(1, b)).collect();
    let large: Vec<bool> = (bins - 3..bins).map(|b| acc(1, b) > acc(0, b)).collect();
    let best_single = r.finer.transformed.top1_loc.max(r.coarser.transformed.top1_loc);
    let combined_ok = r.main.transformed.top1_loc >= best_single;
    let fmt = |range: std::ops::Range<usize>| {
        range.map(|b| format!("{:.0}/{:.0}", acc(0, b), acc(1, b))).collect::<Vec<_>>().join(" ")
    };
    outcome(
        small.iter().all(|&x| x) && large.iter().all(|&x| x) && combined_ok,
        format!(
            "finer/coarser accuracy, smallest bins {} largest bins {}; combined {:.1} vs best single {:.1}",
            fmt(0..3),
            fmt(bins - 3..bins),
            pts(r.main.transformed.top1_loc),
            pts(best_single)
        ),
    )
}

fn metric_ordering(r: &AblationReport) -> Outcome {
    let mut runs: Vec<(String, MetricsReport)> = Vec::new();
    let mut variants = vec![&r.main, &r.no_cstn, &r.finer, &r.coarser];
    variants.extend(r.lambda_sweep.iter());
    for v in variants {
        runs.push((format!("{} transformed", v.name), v.transformed));
        runs.push((format!("{} default", v.name), v.default));
    }
    let bad: Vec<&str> = runs
        .iter()
        .filter(|(_, m)| !(m.top5_box_loc >= m.gt_known_loc && m.gt_known_loc >= m.top1_loc))
        .map(|(n, _)| n.as_str())
        .collect();
    outcome(
        bad.is_empty(),
        format!("{} evaluation runs{}", runs.len(), if bad.is_empty() { String::new() } else { format!(", violated by {bad:?}") }),
    )
}

fn plain_baseline(r: &AblationReport) -> Outcome {
    match r.plain_top1_class {
        Some(acc) => outcome(acc > 0.95, format!("plain classifier Top-1 Class {:.1} (need > 95)", pts(acc))),
        None => outcome(false, "baseline not run".into()),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!(
            "criterion {:>2} {:<22} {} {}",
            results.len() + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };
    report("gradient suite", gradient_suite(), &mut results);
    report("reduction", reduction(), &mut results);
    report("joint distribution", joint_tables(), &mut results);
    report("loss recomposition", loss_recomposition(), &mut results);

    let cfg = TrainConfig::from_toml_str(CONFIG).expect("acceptance config");
    let data = generate(&cfg.data).expect("dataset");
    let start = Instant::now();
    let ablation = ablate::run(&cfg, &data.train, &data.val, &AblationOptions::default(), |line| {
        eprintln!("  [{:>6.0}s] {line}", start.elapsed().as_secs_f64())
    })
    .expect("ablation runs");
    eprintln!("{}", ablation.text());

    report("transform gain", transform_gain(&ablation), &mut results);
    report("cstn vs plain head", cstn_vs_plain_head(&ablation), &mut results);
    report("lambda effect", lambda_effect(&ablation, cfg.train.lambda), &mut results);
    report("level specialization", level_specialization(&ablation), &mut results);
    report("metric ordering", metric_ordering(&ablation), &mut results);
    report("plain baseline", plain_baseline(&ablation), &mut results);

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

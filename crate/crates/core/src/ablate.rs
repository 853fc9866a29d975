//! Fixed ablation grid: transform at evaluation, the spatial transformer
//! convolution itself, the transform regularizer weight, and single-level
//! models, plus a plain classifier baseline.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::WeakSample;
use crate::error::Result;
use crate::metrics::{size_histogram, HistogramReport, MetricsReport};
use crate::pyramid::LevelSelect;
use crate::train::{evaluate_paired, train_plain_classifier, PairedRecords, Trainer};

pub const DEFAULT_LAMBDAS: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 0.0];

/// One trained model scored with and without its transforms.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
    pub records: PairedRecords,
    pub transformed: MetricsReport,
    pub default: MetricsReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub lambda: f64,
    pub transformed: MetricsReport,
    pub default: MetricsReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl Variant {
    pub fn summary(&self) -> VariantSummary {
        VariantSummary {
            name: self.name.clone(),
            lambda: self.config.train.lambda,
            transformed: self.transformed,
            default: self.default,
            train_seconds: self.train_seconds,
            eval_seconds: self.eval_seconds,
        }
    }
}

/// Trains `config` on `train` and scores it on `val`.
pub fn run_variant(name: &str, config: TrainConfig, train: &[WeakSample], val: &[WeakSample]) -> Result<Variant> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    trainer.fit(train, &[], |_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let records = evaluate_paired(&mut trainer.model, val, config.eval.batch_size)?;
    let eval_seconds = start.elapsed().as_secs_f64();
    Ok(Variant {
        name: name.to_string(),
        transformed: MetricsReport::from_records(&records.transformed),
        default: MetricsReport::from_records(&records.default),
        config,
        records,
        train_seconds,
        eval_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub lambdas: Vec<f64>,
    pub plain_baseline: bool,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            plain_baseline: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    /// Both levels with the spatial transformer convolution at the base λ.
    pub main: Variant,
    pub no_cstn: Variant,
    /// In the order requested; an entry at the base λ is a copy of `main`.
    pub lambda_sweep: Vec<Variant>,
    pub finer: Variant,
    pub coarser: Variant,
    /// Transformed vs default boxes of `main`.
    pub transform_histogram: HistogramReport,
    /// Finer-only vs coarser-only models.
    pub level_histogram: HistogramReport,
    pub plain_top1_class: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    main: VariantSummary,
    no_cstn: VariantSummary,
    lambda_sweep: Vec<VariantSummary>,
    finer: VariantSummary,
    coarser: VariantSummary,
    transform_histogram: &'a HistogramReport,
    level_histogram: &'a HistogramReport,
    plain_top1_class: Option<f64>,
}

/// Runs every variant derived from `base`. `progress` gets one line per
/// finished model.
pub fn run(
    base: &TrainConfig,
    train: &[WeakSample],
    val: &[WeakSample],
    opts: &AblationOptions,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    let mut with = |name: &str, f: &dyn Fn(&mut TrainConfig)| -> Result<Variant> {
        let mut cfg = base.clone();
        f(&mut cfg);
        cfg.validate()?;
        let v = run_variant(name, cfg, train, val)?;
        progress(&format!(
            "{name}: top1_loc {:.3} (default boxes {:.3}) top1_class {:.3} in {:.0}s",
            v.transformed.top1_loc, v.default.top1_loc, v.transformed.top1_class, v.train_seconds
        ));
        Ok(v)
    };
    let main = with("cstn", &|c| c.model.levels = LevelSelect::Both)?;
    let no_cstn = with("no_cstn", &|c| {
        c.model.levels = LevelSelect::Both;
        c.model.use_cstn = false;
    })?;
    let mut lambda_sweep = Vec::new();
    for &lambda in &opts.lambdas {
        if lambda == base.train.lambda {
            lambda_sweep.push(main.clone());
        } else {
            lambda_sweep.push(with(&format!("lambda={lambda:e}"), &|c| {
                c.model.levels = LevelSelect::Both;
                c.train.lambda = lambda;
            })?);
        }
    }
    let finer = with("finer_only", &|c| c.model.levels = LevelSelect::FinerOnly)?;
    let coarser = with("coarser_only", &|c| c.model.levels = LevelSelect::CoarserOnly)?;
    let plain_top1_class = if opts.plain_baseline {
        let start = Instant::now();
        let (_, acc) = train_plain_classifier(base, train, val)?;
        progress(&format!("plain: top1_class {acc:.3} in {:.0}s", start.elapsed().as_secs_f64()));
        Some(acc)
    } else {
        None
    };
    let transform_histogram = size_histogram(
        &main.records.transformed,
        &main.records.default,
        ["transformed", "default"],
    )?;
    let level_histogram = size_histogram(
        &finer.records.transformed,
        &coarser.records.transformed,
        ["finer", "coarser"],
    )?;
    Ok(AblationReport {
        main,
        no_cstn,
        lambda_sweep,
        finer,
        coarser,
        transform_histogram,
        level_histogram,
        plain_top1_class,
    })
}

fn metrics_row(s: &mut String, label: &str, m: &MetricsReport) {
    let _ = writeln!(
        s,
        "{label:<24} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>10.1}",
        m.top1_class, m.top1_loc, m.gt_known_loc, m.top5_box_loc, m.mean_pred_area
    );
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(s, "\n## {title}");
    let _ = writeln!(
        s,
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "variant", "cls", "top1loc", "gtknown", "top5box", "mean_area"
    );
}

impl AblationReport {
    pub fn text(&self) -> String {
        let mut s = String::from("# Ablation report\n");
        header(&mut s, "Transform at evaluation (same checkpoint)");
        metrics_row(&mut s, "with transform", &self.main.transformed);
        metrics_row(&mut s, "default boxes", &self.main.default);

        header(&mut s, "Spatial transformer convolution");
        metrics_row(&mut s, "cstn", &self.main.transformed);
        metrics_row(&mut s, "plain conv head", &self.no_cstn.transformed);

        header(&mut s, "Transform regularizer weight");
        for v in &self.lambda_sweep {
            metrics_row(&mut s, &format!("lambda={:e}", v.config.train.lambda), &v.transformed);
        }

        header(&mut s, "Pyramid levels");
        metrics_row(&mut s, "finer only", &self.finer.transformed);
        metrics_row(&mut s, "coarser only", &self.coarser.transformed);
        metrics_row(&mut s, "both", &self.main.transformed);

        let _ = writeln!(s, "\n## Top-1 Loc by ground-truth area, transformed vs default boxes");
        s.push_str(&self.transform_histogram.table());
        let _ = writeln!(s, "\n## Top-1 Loc by ground-truth area, single-level models");
        s.push_str(&self.level_histogram.table());

        if let Some(acc) = self.plain_top1_class {
            let _ = writeln!(s, "\n## Plain classifier\ntop1_class {acc:.3}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let r = ReportJson {
            main: self.main.summary(),
            no_cstn: self.no_cstn.summary(),
            lambda_sweep: self.lambda_sweep.iter().map(Variant::summary).collect(),
            finer: self.finer.summary(),
            coarser: self.coarser.summary(),
            transform_histogram: &self.transform_histogram,
            level_histogram: &self.level_histogram,
            plain_top1_class: self.plain_top1_class,
        };
        serde_json::to_string_pretty(&r).expect("plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::pyramid::ModelConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                num_classes: 2,
                widths: [2, 2, 4, 4],
                fpn_channels: 4,
                loc_hidden: 2,
                ..ModelConfig::default()
            },
            data: DatasetSpec {
                num_classes: 2,
                train_count: 8,
                val_count: 6,
                image_size: 32,
                ..DatasetSpec::default()
            },
            train: crate::config::TrainSettings {
                epochs: 1,
                batch_size: 4,
                val_samples: 0,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn grid_covers_every_variant_and_reuses_the_base_lambda() {
        let cfg = tiny();
        let d = generate(&cfg.data).unwrap();
        let opts = AblationOptions {
            lambdas: vec![1e-2, cfg.train.lambda, 0.0],
            plain_baseline: true,
        };
        let mut lines = Vec::new();
        let r = run(&cfg, &d.train, &d.val, &opts, |l| lines.push(l.to_string())).unwrap();
        // main, no_cstn, two extra lambdas, two single levels, plain
        assert_eq!(lines.len(), 7);
        assert_eq!(r.lambda_sweep.len(), 3);
        assert_eq!(r.lambda_sweep[1].transformed, r.main.transformed);
        assert!(!r.no_cstn.config.model.use_cstn);
        assert_eq!(r.level_histogram.totals.iter().sum::<usize>(), 6);
        let text = r.text();
        assert!(text.contains("lambda=1e-2") && text.contains("coarser only"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["lambda_sweep"].as_array().unwrap().len(), 3);
    }
}

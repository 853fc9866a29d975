//! Training loop, evaluation and checkpoint conversion.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::TrainConfig;
use crate::data::{batch_images, WeakSample};
use crate::error::{Error, Result};
use crate::metrics::{iou, EvalRecord, MetricsReport};
use crate::optim::Optimizer;
use crate::pyramid::{Model, PlainClassifier};
use crate::stn::AffineTheta;
use crate::tensor::Tensor;
use crate::wsol::{map_inference, topk_boxes, total_loss, Decoder, JointDistribution, LossValues, LossWeights};

/// Metrics logged after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_theta: f64,
    pub loss_scale: f64,
    pub val_top1_class: Option<f64>,
    pub val_top1_loc: Option<f64>,
}

/// Model, optimizer and shuffling state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

/// Stream ids split one seed into independent generators.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let model = Model::new(config.model.clone(), &mut init)?;
        let optimizer = Optimizer::new(config.optim.clone(), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            rng,
        })
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.config.train.lambda,
            alpha: self.config.train.alpha,
        }
    }

    /// Loss of a batch without updating anything (batch norm in eval mode).
    pub fn batch_loss(&mut self, batch: &[&WeakSample]) -> Result<LossValues> {
        let mut g = Graph::new();
        let x = g.constant(batch_images(batch)?);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let (_, out) = self.model.forward(&mut g, x, BatchNormMode::Eval)?;
        let terms = total_loss(&mut g, &out, &labels, self.weights())?;
        Ok(terms.values(&g))
    }

    /// One optimizer step on `batch`. `batch_id` only labels diagnostics.
    pub fn step(&mut self, batch: &[&WeakSample], batch_id: usize) -> Result<LossValues> {
        let mut g = Graph::new();
        let x = g.constant(batch_images(batch)?);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        // forward on a copy of the buffers so a failed step leaves no trace
        let saved = self.model.buffers.clone();
        let (bound, out) = self.model.forward(&mut g, x, BatchNormMode::Train)?;
        let terms = total_loss(&mut g, &out, &labels, self.weights())?;
        let v = terms.values(&g);
        if ![v.total, v.cls, v.theta, v.scale].iter().all(|x| x.is_finite()) {
            self.model.buffers = saved;
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: batch_id,
                cls: v.cls,
                theta: v.theta,
                scale: v.scale,
                total: v.total,
            });
        }
        g.backward(terms.total)?;
        let grads = bound.grads(&g);
        self.optimizer.update(&mut self.model.params, &grads)?;
        Ok(v)
    }

    /// One pass over `train` in a freshly shuffled order. Trailing samples
    /// that would form a batch of one are dropped.
    pub fn train_epoch(&mut self, train: &[WeakSample]) -> Result<LossValues> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.train.batch_size;
        let mut sum = LossValues::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&WeakSample> = chunk.iter().map(|&i| &train[i]).collect();
            let v = self.step(&batch, b)?;
            sum.total += v.total;
            sum.cls += v.cls;
            sum.theta += v.theta;
            sum.scale += v.scale;
            batches += 1;
        }
        self.epoch += 1;
        let k = batches.max(1) as f64;
        Ok(LossValues {
            total: sum.total / k,
            cls: sum.cls / k,
            theta: sum.theta / k,
            scale: sum.scale / k,
        })
    }

    /// Trains until `config.train.epochs` epochs are complete, calling `log`
    /// after each one.
    pub fn fit(
        &mut self,
        train: &[WeakSample],
        val: &[WeakSample],
        mut log: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.train.epochs {
            let v = self.train_epoch(train)?;
            let n = self.config.train.val_samples.min(val.len());
            let (c, l) = if n > 0 {
                let recs = evaluate(&mut self.model, &val[..n], true, self.config.eval.batch_size)?;
                let m = MetricsReport::from_records(&recs);
                (Some(m.top1_class), Some(m.top1_loc))
            } else {
                (None, None)
            };
            let entry = EpochLog {
                epoch: self.epoch,
                loss: v.total,
                loss_cls: v.cls,
                loss_theta: v.theta,
                loss_scale: v.scale,
                val_top1_class: c,
                val_top1_loc: l,
            };
            log(&entry);
            logs.push(entry);
        }
        Ok(logs)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            tensors.push((format!("adam_m/{name}"), self.optimizer.m[i].clone()));
            tensors.push((format!("adam_v/{name}"), self.optimizer.v[i].clone()));
        }
        for (name, s) in self.model.buffers.iter() {
            tensors.push((format!("bn_mean/{name}"), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("1-d")));
            tensors.push((format!("bn_var/{name}"), Tensor::new(&[s.var.len()], s.var.clone()).expect("1-d")));
        }
        tensors.push(("optim/step".into(), Tensor::scalar(self.optimizer.step as f64)));
        Checkpoint {
            epoch: self.epoch as u64,
            config: self.config.to_toml(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml_str(&ck.config)?;
        let mut t = Self::new(config)?;
        let missing = |n: &str| Error::Format {
            path: "checkpoint".into(),
            msg: format!("missing tensor {n}"),
        };
        let fetch = |key: String, like: &Tensor| -> Result<Tensor> {
            let v = ck.tensor(&key).ok_or_else(|| missing(&key))?;
            if v.shape() != like.shape() {
                return Err(Error::Format {
                    path: "checkpoint".into(),
                    msg: format!("{key} has shape {:?}, model expects {:?}", v.shape(), like.shape()),
                });
            }
            Ok(v.clone())
        };
        let ids: Vec<_> = t.model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = t.model.params.name(id).to_string();
            let p = fetch(format!("param/{name}"), t.model.params.get(id))?;
            t.optimizer.m[i] = fetch(format!("adam_m/{name}"), &p)?;
            t.optimizer.v[i] = fetch(format!("adam_v/{name}"), &p)?;
            *t.model.params.get_mut(id) = p;
        }
        for (name, s) in t.model.buffers.iter_mut() {
            let like = Tensor::zeros(&[s.mean.len()]);
            s.mean = fetch(format!("bn_mean/{name}"), &like)?.into_data();
            s.var = fetch(format!("bn_var/{name}"), &like)?.into_data();
        }
        t.optimizer.step = ck.tensor("optim/step").ok_or_else(|| missing("optim/step"))?.item()? as u64;
        t.epoch = ck.epoch as usize;
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }
}

/// Records from transformed and default boxes of one forward pass.
#[derive(Clone, Debug)]
pub struct PairedRecords {
    pub transformed: Vec<EvalRecord>,
    pub default: Vec<EvalRecord>,
}

fn record_for(
    jd: &JointDistribution,
    n: usize,
    decoder: &Decoder,
    sample: &WeakSample,
) -> Result<EvalRecord> {
    let pred = map_inference(jd, n, decoder);
    let top5 = topk_boxes(jd, n, sample.label, 5, decoder);
    let top5_iou = top5
        .iter()
        .map(|b| iou(&b.bbox, &sample.gt_box))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRecord {
        id: sample.id,
        pred_class: pred.class,
        pred_box: crate::geometry::ScoredBox {
            bbox: pred.bbox,
            score: pred.score,
        },
        pred_iou: iou(&pred.bbox, &sample.gt_box)?,
        pred_scale: pred.scale,
        top5,
        top5_iou,
        gt_label: sample.label,
        gt_box: sample.gt_box,
    })
}

/// Scores `samples` in batch-norm eval mode, decoding both box variants.
pub fn evaluate_paired(model: &mut Model, samples: &[WeakSample], batch_size: usize) -> Result<PairedRecords> {
    let mut transformed = Vec::with_capacity(samples.len());
    let mut default = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WeakSample> = chunk.iter().collect();
        let images = batch_images(&refs)?;
        let [_, _, h, w] = images.dims4("evaluate")?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let (_, out) = model.forward(&mut g, x, BatchNormMode::Eval)?;
        let logits: Vec<&Tensor> = out.logits.iter().map(|&v| g.value(v)).collect();
        let jd = JointDistribution::from_logits(&logits)?;
        let thetas = out
            .thetas
            .iter()
            .map(|&v| AffineTheta::new(g.value(v).clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut dec = Decoder {
            thetas: &thetas,
            scales: &out.scales,
            image_w: w as f64,
            image_h: h as f64,
            use_transform: true,
        };
        for (n, s) in chunk.iter().enumerate() {
            dec.use_transform = true;
            transformed.push(record_for(&jd, n, &dec, s)?);
            dec.use_transform = false;
            default.push(record_for(&jd, n, &dec, s)?);
        }
    }
    Ok(PairedRecords { transformed, default })
}

pub fn evaluate(model: &mut Model, samples: &[WeakSample], use_transform: bool, batch_size: usize) -> Result<Vec<EvalRecord>> {
    let p = evaluate_paired(model, samples, batch_size)?;
    Ok(if use_transform { p.transformed } else { p.default })
}

/// Trains the plain classifier with the run's optimizer settings and returns
/// it with its validation Top-1 class accuracy.
pub fn train_plain_classifier(
    config: &TrainConfig,
    train: &[WeakSample],
    val: &[WeakSample],
) -> Result<(PlainClassifier, f64)> {
    config.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(config.seed);
    init.set_stream(INIT_STREAM);
    let mut model = PlainClassifier::new(config.model.clone(), &mut init)?;
    let mut opt = Optimizer::new(config.optim.clone(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let class_of = std::sync::Arc::new((0..config.model.num_classes).collect::<Vec<_>>());
    for epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.train.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&WeakSample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let x = g.constant(batch_images(&batch)?);
            let (bound, logits) = model.forward(&mut g, x, BatchNormMode::Train)?;
            let loss = g.grouped_nll(logits, class_of.clone(), &labels)?;
            let v = g.value(loss).item()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    cls: v,
                    theta: 0.0,
                    scale: 0.0,
                    total: v,
                });
            }
            g.backward(loss)?;
            opt.update(&mut model.params, &bound.grads(&g))?;
        }
    }
    let mut correct = 0;
    for chunk in val.chunks(config.eval.batch_size) {
        let refs: Vec<&WeakSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(batch_images(&refs)?);
        let (_, logits) = model.forward(&mut g, x, BatchNormMode::Eval)?;
        let c = config.model.num_classes;
        for (n, s) in chunk.iter().enumerate() {
            let row = &g.value(logits).data()[n * c..(n + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best == s.label);
        }
    }
    let acc = if val.is_empty() { 0.0 } else { correct as f64 / val.len() as f64 };
    Ok((model, acc))
}

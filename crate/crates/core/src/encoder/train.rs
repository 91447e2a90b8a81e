//! Mini-batch training over a dataset of (frames, label-words, class) items.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::forward::{encode_item, loss_cls, loss_mtl, register, total_loss};
use crate::encoder::params::ModelParams;
use crate::encoder::{make_masking_plan, EncoderConfig, LossMode, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimAlgorithm {
    GradientDescent,
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub algorithm: OptimAlgorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl OptimizerSettings {
    pub fn desk() -> Self {
        Self {
            algorithm: OptimAlgorithm::AdaptiveMoments,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be finite and positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean losses and training accuracy for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_mtl: f64,
    pub loss_total: f64,
    pub train_top1: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    settings: OptimizerSettings,
    step: u64,
    // First and second moment per tensor, in named order. Allocated on
    // first use so untouched tensors carry no state.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    fn new(settings: OptimizerSettings, num_tensors: usize) -> Self {
        Self {
            settings,
            step: 0,
            moments: (0..num_tensors).map(|_| None).collect(),
        }
    }

    /// Apply one batch of gradients; `grads` follows named-tensor order and
    /// `None` means the tensor did not participate in the loss.
    fn apply(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) {
        self.step += 1;
        let lr = self.settings.learning_rate;
        let wd = self.settings.weight_decay;
        for (i, (_, tensor)) in params.named_mut().into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let data = tensor.data_mut();
            match self.settings.algorithm {
                OptimAlgorithm::GradientDescent => {
                    for (p, &g) in data.iter_mut().zip(grad.data()) {
                        *p -= lr * (g + wd * *p);
                    }
                }
                OptimAlgorithm::AdaptiveMoments => {
                    let (m, v) = self.moments[i]
                        .get_or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                    for (j, (p, &g)) in data.iter_mut().zip(grad.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *p);
                    }
                }
            }
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Train in place; returns one record per epoch.
pub fn train(
    params: &mut ModelParams,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    settings: &OptimizerSettings,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    settings.validate()?;
    dataset.validate()?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, config expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    if dataset.feature_dim != config.input_feature_dim {
        return Err(Error::Config(format!(
            "dataset feature_dim {} differs from input_feature_dim {}",
            dataset.feature_dim, config.input_feature_dim
        )));
    }
    if dataset.labels.len() != config.num_seen_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            dataset.labels.len(),
            config.num_seen_classes
        )));
    }
    if dataset.max_frames() > config.max_visual_len {
        return Err(Error::Config("an instance exceeds max_visual_len".into()));
    }
    let class_words: Vec<Vec<usize>> = dataset
        .labels
        .iter()
        .map(|l| vocab.encode_label(l))
        .collect::<Result<_>>()?;
    if class_words.iter().any(|w| w.len() > config.max_word_len) {
        return Err(Error::Config("a label exceeds max_word_len".into()));
    }

    // Training randomness (shuffling, masking) is decoupled from the
    // initialization stream so both are reproducible from one seed.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut optimizer = Optimizer::new(settings.clone(), params.named().len());
    let need_mtl = config.loss_mode != LossMode::ClsOnly;
    let mut records = Vec::with_capacity(settings.epochs);
    let mut order: Vec<usize> = (0..dataset.instances.len()).collect();

    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut sum_cls = 0.0;
        let mut sum_mtl = 0.0;
        let mut sum_total = 0.0;
        let mut hits = 0usize;

        for batch in order.chunks(settings.batch_size) {
            let g = Graph::new();
            let pv = register(&g, params, true);
            let mut item_totals = Vec::with_capacity(batch.len());
            for &idx in batch {
                let inst = &dataset.instances[idx];
                let words = &class_words[inst.class_id];
                let plan = need_mtl
                    .then(|| make_masking_plan(words, config.mask_prob, &mut rng));
                let enc = encode_item(
                    &g,
                    &pv,
                    config,
                    vocab.mask_id(),
                    &inst.frames,
                    words,
                    plan.as_ref(),
                )?;
                let l_cls = loss_cls(&g, enc.cls_logits, inst.class_id)?;
                let l_mtl = match (&plan, enc.mtl_logits) {
                    (Some(plan), Some(logits)) => {
                        Some(loss_mtl(&g, logits, &plan.original_tokens)?)
                    }
                    _ => None,
                };
                let total = total_loss(&g, l_cls, l_mtl, config)?;
                sum_cls += g.scalar_value(l_cls);
                sum_mtl += l_mtl.map_or(0.0, |v| g.scalar_value(v));
                let t = g.scalar_value(total);
                if !t.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch} on instance {}",
                        inst.id
                    )));
                }
                sum_total += t;
                if argmax(g.value(enc.cls_logits).data()) == inst.class_id {
                    hits += 1;
                }
                item_totals.push(total);
            }
            let mut batch_loss = item_totals[0];
            for &t in &item_totals[1..] {
                batch_loss = g.add(batch_loss, t)?;
            }
            batch_loss = g.scale(batch_loss, 1.0 / batch.len() as f64)?;
            g.backward(batch_loss)?;
            let grads: Vec<Option<Tensor>> = pv.all().iter().map(|&v| g.grad(v)).collect();
            optimizer.apply(params, &grads);
        }

        if !params.all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite parameter after epoch {epoch}"
            )));
        }
        let n = dataset.instances.len() as f64;
        records.push(EpochRecord {
            epoch,
            loss_cls: sum_cls / n,
            loss_mtl: sum_mtl / n,
            loss_total: sum_total / n,
            train_top1: hits as f64 / n,
        });
    }
    Ok(records)
}

/// CSV log, one row per epoch.
pub fn write_log_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,loss_cls,loss_mtl,loss_total,train_top1")?;
    for r in records {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.loss_cls, r.loss_mtl, r.loss_total, r.train_top1
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use rand::Rng;

    fn tiny_config(seed: u64) -> (EncoderConfig, Vocabulary) {
        let labels: Vec<String> = (0..3).map(|i| format!("act{i}")).collect();
        let vocab = Vocabulary::build(&labels).unwrap();
        let mut c = EncoderConfig::desk(4, vocab.len(), 3, 2, 3, seed);
        c.num_layers = 1;
        c.hidden_dim = 8;
        c.num_heads = 2;
        c.mlp_dim = 16;
        (c, vocab)
    }

    /// Three well-separated classes: frames cluster at axis corners.
    fn toy_dataset(per_class: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut instances = Vec::new();
        for class in 0..3usize {
            for i in 0..per_class {
                let frames = (0..2)
                    .map(|_| {
                        (0..4)
                            .map(|d| {
                                let center = if d == class { 3.0 } else { 0.0 };
                                center + rng.gen::<f64>() * 0.1
                            })
                            .collect()
                    })
                    .collect();
                instances.push(Instance {
                    id: format!("c{class}i{i}"),
                    class_id: class,
                    frames,
                });
            }
        }
        Dataset {
            feature_dim: 4,
            labels: (0..3).map(|i| format!("act{i}")).collect(),
            instances,
        }
    }

    #[test]
    fn loss_falls_and_accuracy_rises_on_separable_data() {
        let (config, vocab) = tiny_config(11);
        let dataset = toy_dataset(4, 0);
        let mut params = ModelParams::init(&config).unwrap();
        let mut settings = OptimizerSettings::desk();
        settings.learning_rate = 5e-3;
        settings.epochs = 40;
        settings.batch_size = 4;
        let records = train(&mut params, &config, &vocab, &dataset, &settings).unwrap();
        assert_eq!(records.len(), 40);
        let first = &records[0];
        let last = &records[39];
        assert!(
            last.loss_total < 0.7 * first.loss_total,
            "loss {} -> {}",
            first.loss_total,
            last.loss_total
        );
        assert!(last.train_top1 > 0.9, "top1 stalled at {}", last.train_top1);
    }

    #[test]
    fn plain_gradient_descent_also_reduces_the_loss() {
        let (config, vocab) = tiny_config(12);
        let dataset = toy_dataset(2, 1);
        let mut params = ModelParams::init(&config).unwrap();
        let settings = OptimizerSettings {
            algorithm: OptimAlgorithm::GradientDescent,
            learning_rate: 0.1,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 6,
        };
        let records = train(&mut params, &config, &vocab, &dataset, &settings).unwrap();
        assert!(records[9].loss_total < records[0].loss_total);
    }

    #[test]
    fn identical_seeds_reproduce_the_run_bitwise() {
        let dataset = toy_dataset(2, 2);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let (config, vocab) = tiny_config(13);
            let mut params = ModelParams::init(&config).unwrap();
            let mut settings = OptimizerSettings::desk();
            settings.epochs = 3;
            settings.batch_size = 3;
            let records = train(&mut params, &config, &vocab, &dataset, &settings).unwrap();
            runs.push((records, params));
        }
        assert_eq!(runs[0].0, runs[1].0);
        let a: Vec<_> = runs[0].1.named().into_iter().map(|(_, t)| t.clone()).collect();
        let b: Vec<_> = runs[1].1.named().into_iter().map(|(_, t)| t.clone()).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn saturated_parameters_report_divergence() {
        let (config, vocab) = tiny_config(14);
        let dataset = toy_dataset(1, 3);
        let mut params = ModelParams::init(&config).unwrap();
        for v in params.visual_proj_w.data_mut() {
            *v = 1e300;
        }
        let mut settings = OptimizerSettings::desk();
        settings.epochs = 1;
        let err = train(&mut params, &config, &vocab, &dataset, &settings).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
    }

    #[test]
    fn settings_are_validated_before_any_work() {
        let (config, vocab) = tiny_config(15);
        let dataset = toy_dataset(1, 4);
        let mut params = ModelParams::init(&config).unwrap();
        for (patch, _) in [
            (OptimizerSettings { epochs: 0, ..OptimizerSettings::desk() }, "epochs"),
            (OptimizerSettings { batch_size: 0, ..OptimizerSettings::desk() }, "batch"),
            (OptimizerSettings { learning_rate: 0.0, ..OptimizerSettings::desk() }, "lr"),
            (OptimizerSettings { weight_decay: -0.1, ..OptimizerSettings::desk() }, "wd"),
        ] {
            let err = train(&mut params, &config, &vocab, &dataset, &patch).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let (config, vocab) = tiny_config(16);
        let mut params = ModelParams::init(&config).unwrap();
        let mut dataset = toy_dataset(1, 5);
        dataset.feature_dim = 5;
        for inst in &mut dataset.instances {
            for f in &mut inst.frames {
                f.push(0.0);
            }
        }
        let err = train(
            &mut params,
            &config,
            &vocab,
            &dataset,
            &OptimizerSettings::desk(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn log_csv_has_header_and_one_row_per_epoch() {
        let records = vec![
            EpochRecord { epoch: 1, loss_cls: 1.5, loss_mtl: 0.5, loss_total: 1.75, train_top1: 0.25 },
            EpochRecord { epoch: 2, loss_cls: 1.0, loss_mtl: 0.4, loss_total: 1.2, train_top1: 0.5 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,loss_cls,loss_mtl,loss_total,train_top1");
        assert!(lines[1].starts_with("1,1.500000,0.500000,1.750000,0.250000"));
    }
}

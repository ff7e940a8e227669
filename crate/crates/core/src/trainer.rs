//! Mini-batch SGD with momentum for the toy classifiers.

use crate::attack::{fmt_f64, parse, parse_number};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 32, learning_rate: 0.02, momentum: 0.9, weight_decay: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Set one field from its config key (without the `train.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse_number(key, value)?,
            "momentum" => self.momentum = parse_number(key, value)?,
            "weight_decay" => self.weight_decay = parse_number(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `train.{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("momentum", fmt_f64(self.momentum)),
            ("weight_decay", fmt_f64(self.weight_decay)),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Train `model` on `dataset`. The shuffling order comes from `cfg.seed`, so
/// identical inputs give identical weights.
pub fn train(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    if dataset.input_spec() != model.input_spec() {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: dataset.input_spec().dims().to_vec(),
            right: model.input_spec().dims().to_vec(),
        });
    }
    if dataset.classes() > model.classes() {
        return Err(Error::invalid("train", "dataset has more classes than the model"));
    }
    let mut model = model.clone();
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut rng = Rng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(dataset.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let (x, labels) = dataset.batch(batch_idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fv = model.forward_on_tape(&mut tape, xv, true)?;
            let loss = tape.cross_entropy(fv.logits, &labels)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss_value });
            }
            loss_sum += loss_value * labels.len() as f64;
            let preds = tape.value(fv.logits).argmax_rows();
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            tape.backward(loss)?;
            for ((param, vel), &pv) in model.params_mut().iter_mut().zip(&mut velocity).zip(&fv.params) {
                let grad = tape.grad(pv).expect("parameter on loss path");
                let decay = if param.name.ends_with(".weight") { cfg.weight_decay } else { 0.0 };
                for ((w, v), &g) in param.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                    *v = cfg.momentum * *v + g + decay * *w;
                    *w -= cfg.learning_rate * *v;
                }
                if !param.value.all_finite() {
                    return Err(Error::Diverged { epoch, loss: f64::INFINITY });
                }
            }
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / dataset.len().max(1) as f64,
            train_accuracy: correct as f64 / dataset.len().max(1) as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: stats.loss });
        }
        history.push(stats);
    }
    model.meta.epochs += cfg.epochs as u32;
    Ok((model, history))
}

/// Top-1 accuracy.
pub fn accuracy(model: &Model, split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let preds = model.predict(split.images())?;
    let correct = preds.iter().zip(split.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / split.len() as f64)
}

/// Warning text when train accuracy trails test accuracy by more than 5 points.
pub fn generalization_warning(train_accuracy: f64, test_accuracy: f64) -> Option<String> {
    (train_accuracy < test_accuracy - 0.05).then(|| {
        format!("train accuracy {train_accuracy:.4} is more than 0.05 below test accuracy {test_accuracy:.4}")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes;
    use crate::nn::{Arch, InputSpec};
    use crate::tensor::Tensor;

    const SMALL: InputSpec = InputSpec::new(1, 16, 16);

    #[test]
    fn config_entries_round_trip() {
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.1 / 3.0, seed: 9, ..Default::default() };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("lr", "0.1").is_err());
        assert!(back.set("epochs", "-1").is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = Model::build(Arch::TinyA, 4, SMALL, &mut Rng::new(1)).unwrap();
        let d = gen_shapes(8, 4, SMALL, &mut Rng::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, hist) = train(&m, &d, &cfg).unwrap();
        assert_eq!(out.params(), m.params());
        assert!(hist.is_empty());
    }

    #[test]
    fn deterministic_training() {
        let m = Model::build(Arch::TinyA, 4, SMALL, &mut Rng::new(1)).unwrap();
        let d = gen_shapes(40, 4, SMALL, &mut Rng::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..Default::default() };
        let (a, ha) = train(&m, &d, &cfg).unwrap();
        let (b, hb) = train(&m, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn memorizes_tiny_set() {
        let m = Model::build(Arch::TinyB, 4, SMALL, &mut Rng::new(4)).unwrap();
        let d = gen_shapes(24, 4, SMALL, &mut Rng::new(5)).unwrap();
        let cfg = TrainConfig { epochs: 60, batch_size: 8, learning_rate: 0.02, seed: 6, ..Default::default() };
        let (trained, hist) = train(&m, &d, &cfg).unwrap();
        assert!(hist.iter().all(|s| s.loss.is_finite()));
        assert!(accuracy(&trained, &d).unwrap() >= 0.99);
    }

    #[test]
    fn constant_predictor_accuracy() {
        // Zero weights everywhere and a bias favouring class 3 predict 3 always.
        let mut m = Model::build(Arch::TinyA, 10, SMALL, &mut Rng::new(1)).unwrap();
        let n_params = m.params().len();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            p.value.data_mut().fill(0.0);
            if i == n_params - 1 {
                p.value.data_mut()[3] = 1.0;
            }
        }
        let d = gen_shapes(100, 10, SMALL, &mut Rng::new(2)).unwrap();
        let acc = accuracy(&m, &d).unwrap();
        assert!((acc - 0.10).abs() <= 1.0 / 100.0);
    }

    #[test]
    fn empty_split_errors() {
        let m = Model::build(Arch::TinyA, 4, SMALL, &mut Rng::new(1)).unwrap();
        let empty = Dataset::new(Tensor::zeros(&[0, 1, 16, 16]), vec![], 4).unwrap();
        assert!(matches!(accuracy(&m, &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn divergence_reported_with_epoch() {
        let m = Model::build(Arch::TinyA, 4, SMALL, &mut Rng::new(1)).unwrap();
        let d = gen_shapes(16, 4, SMALL, &mut Rng::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e300, momentum: 0.0, ..Default::default() };
        assert!(matches!(train(&m, &d, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn warning_threshold() {
        assert!(generalization_warning(0.80, 0.90).is_some());
        assert!(generalization_warning(0.88, 0.90).is_none());
    }
}

//! Loss, metrics, the Adam optimizer and the toy training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::data::{collate, synth_dataset, SynthSample};
use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::model::Cfmd;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Clamp applied to predictions inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy, accumulated in `f64`.
pub fn bce_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("bce: prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    if pred.is_empty() {
        return Err(shape_err!("bce: empty input"));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = t.to_f64();
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let loss = acc / pred.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("bce: non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Fraction of pixels whose thresholded prediction matches the binary target.
pub fn pixel_accuracy<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<f64> {
    if pred.dims() != target.dims() || pred.is_empty() {
        return Err(shape_err!("pixel accuracy: {:?} vs {:?}", pred.dims(), target.dims()));
    }
    let hits = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&p, &t)| (p.to_f64() >= threshold) == (t.to_f64() >= 0.5))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean absolute error.
pub fn mae<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.dims() != target.dims() || pred.is_empty() {
        return Err(shape_err!("mae: {:?} vs {:?}", pred.dims(), target.dims()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.to_f64() - t.to_f64()).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter dtype.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get(id);
            let g = &grads[i];
            if g.dims() != p.dims() {
                return Err(shape_err!("adam: gradient {:?} for parameter {:?}", g.dims(), p.dims()));
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    step: self.step as usize,
                    msg: format!("non-finite gradient for parameter {:?}", params.name(id)),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut out = Vec::with_capacity(p.len());
            for (j, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
                let gv = gv.to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                out.push(T::from_f64(pv.to_f64() - upd));
            }
            params.set(id, Tensor::from_vec(p.dims(), out)?)?;
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Optimizer updates applied so far.
    pub step: usize,
    /// Held-out cross-entropy.
    pub loss: f64,
    pub pix_acc: f64,
    pub mae: f64,
    /// Wall-clock time since training started.
    pub seconds: f64,
}

/// Held-out metrics of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub pix_acc: f64,
    pub mae: f64,
}

const EVAL_BATCH: usize = 8;

pub fn evaluate<T: Element>(model: &Cfmd, store: &ParamStore<T>, samples: &[SynthSample<T>]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Eval("evaluation set is empty".into()));
    }
    let (mut loss, mut acc, mut err, mut pixels) = (0.0, 0.0, 0.0, 0usize);
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, y) = collate(chunk)?;
        let pred = model.predict(store, &x)?;
        let n = pred.len();
        loss += bce_value(&pred, &y)? * n as f64;
        acc += pixel_accuracy(&pred, &y, 0.5)? * n as f64;
        err += mae(&pred, &y)? * n as f64;
        pixels += n;
    }
    let n = pixels as f64;
    Ok(Evaluation {
        loss: loss / n,
        pix_acc: acc / n,
        mae: err / n,
    })
}

pub struct TrainOutcome<T> {
    pub model: Cfmd,
    pub params: ParamStore<T>,
    pub log: Vec<Metrics>,
}

/// RNG stream labels; fixed so runs are reproducible.
const TRAIN_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 11;

/// The held-out set used by [`train_toy`] for `config`.
pub fn eval_set<T: Element>(config: &ModelConfig) -> Result<Vec<SynthSample<T>>> {
    let mut rng = Rng::new(config.seed).fork(EVAL_STREAM);
    synth_dataset(config.eval_samples, config.input_size, config.input_size, &mut rng)
}

/// Trains on freshly drawn synthetic batches with BCE and Adam, evaluating
/// on a fixed held-out set at step 0, every `eval_every` steps and at the
/// end. `observe` sees each metrics record as it is produced.
pub fn train_toy<T: Element>(config: &ModelConfig, mut observe: impl FnMut(&Metrics)) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let start = Instant::now();
    let (model, mut params) = Cfmd::new::<T>(config)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..Default::default()
        },
        &params,
    );
    let held_out = eval_set::<T>(config)?;
    let mut data_rng = Rng::new(config.seed).fork(TRAIN_STREAM);
    let size = config.input_size;
    let mut log = Vec::new();
    let mut record = |step: usize, params: &ParamStore<T>, log: &mut Vec<Metrics>| -> Result<()> {
        let e = evaluate(&model, params, &held_out)?;
        if !e.loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("held-out loss is {}", e.loss),
            });
        }
        let m = Metrics {
            step,
            loss: e.loss,
            pix_acc: e.pix_acc,
            mae: e.mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        observe(&m);
        log.push(m);
        Ok(())
    };
    record(0, &params, &mut log)?;
    for step in 1..=config.steps {
        let batch = synth_dataset::<T>(config.batch_size, size, size, &mut data_rng)?;
        let (x, y) = collate(&batch)?;
        let grads = {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let pred = model.forward(tape.constant(x), &p).map_err(|e| Error::Training {
                step,
                msg: e.to_string(),
            })?;
            let loss = pred.bce_loss(&y).map_err(|e| Error::Training {
                step,
                msg: e.to_string(),
            })?;
            let g = tape.backward(loss)?;
            p.gradients(&g)?
        };
        adam.step(&mut params, &grads).map_err(|e| match e {
            Error::Training { msg, .. } => Error::Training { step, msg },
            other => other,
        })?;
        if step % config.eval_every == 0 || step == config.steps {
            record(step, &params, &mut log)?;
        }
    }
    Ok(TrainOutcome { model, params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_known_values() {
        let p = Tensor::<f64>::full([1, 1, 1, 4], 0.5).unwrap();
        let t = Tensor::from_vec([1, 1, 1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((bce_value(&p, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let want = -(BCE_EPS.ln());
        assert!((bce_value(&p, &t).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn metrics() {
        let p = Tensor::<f32>::from_vec([1, 1, 1, 4], vec![0.1, 0.6, 0.5, 0.4]).unwrap();
        let t = Tensor::from_vec([1, 1, 1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_accuracy(&p, &t, 0.5).unwrap(), 0.5);
        assert!((mae(&p, &t).unwrap() - 0.4).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 0.0]).unwrap();
        adam.step(&mut store, &[g]).unwrap();
        let w = store.iter().next().unwrap().1.to_vec();
        assert!((w[0] - 0.999).abs() < 1e-9);
        assert!((w[1] - 2.001).abs() < 1e-9);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut store = ParamStore::<f64>::new();
        store.add("layer.w", Tensor::zeros([1, 1, 1, 2]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        match adam.step(&mut store, &[g]) {
            Err(Error::Training { msg, .. }) => assert!(msg.contains("layer.w")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_scalar_recurrence() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::full([1, 1, 1, 1], 1.0).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        let (mut p, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let grad = store.get(id).map(|x| 2.0 * x);
            adam.step(&mut store, &[grad]).unwrap();
        }
        assert!((store.get(id).data()[0] - p).abs() < 1e-12);
        assert!(p.abs() < 0.1);
    }

    fn tiny_run() -> ModelConfig {
        ModelConfig {
            steps: 3,
            eval_every: 2,
            eval_samples: 2,
            batch_size: 2,
            offset_init_std: 0.0,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn training_is_reproducible_and_logs_schedule() {
        let a = train_toy::<f64>(&tiny_run(), |_| {}).unwrap();
        let b = train_toy::<f64>(&tiny_run(), |_| {}).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let steps: Vec<_> = a.log.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 2, 3]);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!((x.loss, x.pix_acc, x.mae), (y.loss, y.pix_acc, y.mae));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = ModelConfig {
            learning_rate: 0.0,
            ..tiny_run()
        };
        let out = train_toy::<f64>(&cfg, |_| {}).unwrap();
        let (_, init) = Cfmd::new::<f64>(&cfg).unwrap();
        assert!(out.params.bitwise_eq(&init));
    }

    #[test]
    fn initial_loss_is_near_ln2() {
        let cfg = ModelConfig {
            eval_samples: 8,
            ..ModelConfig::quick()
        };
        let (model, store) = Cfmd::new::<f32>(&cfg).unwrap();
        let e = evaluate(&model, &store, &eval_set(&cfg).unwrap()).unwrap();
        assert!((e.loss - std::f64::consts::LN_2).abs() < 0.15, "{}", e.loss);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full([1, 1, 1, 2], 5.0).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let g = store.get(id).map(|v| 2.0 * v);
            adam.step(&mut store, &[g]).unwrap();
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }
}

//! Adam training loop over per-sample graphs.
//!
//! Each sample in a batch builds and differentiates its own graph; the batch
//! runs those in parallel and then sums gradients in sample order, so the
//! result does not depend on thread scheduling. All randomness (shuffling,
//! augmentation) comes from streams keyed by `(seed, epoch, sample)`, which
//! makes a resumed run continue bit for bit where the original left off.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::Capture;
use crate::graph::Graph;
use crate::network::TransFusionModel;
use crate::objectives::{one_hot, predict_labels, segmentation_loss, DiceByClass};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synthdata::{augment_with, AugmentDraw, SampleBundle};
use crate::tensor::Tensor;

/// Adam moment decay and numerical guard.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are name-keyed like the parameters.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    /// Fresh optimizer with zero moments for every parameter.
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Adam<T> {
        let mut m = ParamStore::empty();
        let mut v = ParamStore::empty();
        for (name, tensor) in params.iter() {
            m.insert(name.to_string(), Tensor::zeros(tensor.shape()));
            v.insert(name.to_string(), Tensor::zeros(tensor.shape()));
        }
        Adam { cfg, step: 0, m, v }
    }

    pub fn from_state(cfg: AdamConfig, step: u64, m: ParamStore<T>, v: ParamStore<T>) -> Adam<T> {
        Adam { cfg, step, m, v }
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn apply(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let nb1 = T::from_f64(1.0 - self.cfg.beta1);
        let nb2 = T::from_f64(1.0 - self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let ibc1 = T::from_f64(1.0 / bc1);
        let ibc2 = T::from_f64(1.0 / bc2);
        let step_size = T::from_f64(lr);

        for (name, grad) in grads {
            let mut p = params.get(name)?.clone();
            let mut m = self.m.get(name)?.clone();
            let mut v = self.v.get(name)?.clone();
            if grad.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_apply",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            for ((pv, mv), (vv, &g)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(grad.data()))
            {
                *mv = b1 * *mv + nb1 * g;
                *vv = b2 * *vv + nb2 * g * g;
                let m_hat = *mv * ibc1;
                let v_hat = *vv * ibc2;
                *pv = *pv - step_size * m_hat / (v_hat.sqrt() + eps);
            }
            params.set(name, p)?;
            self.m.set(name, m)?;
            self.v.set(name, v)?;
        }
        Ok(())
    }
}

/// Learning-rate decay across epochs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 * decay^epoch`.
    Exponential { decay: f64 },
    /// Linear from `lr0` at epoch 0 to `lr0 * final_fraction` at the last.
    Linear { final_fraction: f64 },
}

impl LrSchedule {
    pub fn lr(&self, lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Exponential { decay } => lr0 * decay.powi(epoch as i32),
            LrSchedule::Linear { final_fraction } => {
                if total_epochs <= 1 {
                    lr0
                } else {
                    let frac = epoch as f64 / (total_epochs - 1) as f64;
                    lr0 * (1.0 - (1.0 - final_fraction) * frac)
                }
            }
        }
    }
}

/// Training run description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub augment: bool,
    /// Stream for shuffling and augmentation; the model has its own init seed.
    pub seed: u64,
}

/// What one epoch did.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Per-view mean Dice over a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalScores {
    pub view: String,
    pub dice: DiceByClass,
}

/// One `metrics.jsonl` row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub view: String,
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
    pub avg: f64,
}

impl MetricsRecord {
    pub fn new(epoch: usize, scores: &EvalScores) -> MetricsRecord {
        MetricsRecord {
            epoch,
            view: scores.view.clone(),
            lv: scores.dice.lv,
            myo: scores.dice.myo,
            rv: scores.dice.rv,
            avg: scores.dice.avg(),
        }
    }
}

pub struct Trainer<T: Scalar> {
    pub model: TransFusionModel,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
}

/// Loss and parameter gradients of a single sample.
fn sample_gradients<T: Scalar>(
    model: &TransFusionModel,
    params: &ParamStore<T>,
    bundle: &SampleBundle<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let classes = model.config.classes;
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, true);
    let mut images = Vec::with_capacity(bundle.views.len());
    let mut onehots = Vec::with_capacity(bundle.views.len());
    for view in &bundle.views {
        let mut with_channel = vec![1usize];
        with_channel.extend_from_slice(view.image.shape());
        let img = view.image.reshaped(&with_channel)?;
        images.push(g.constant(img));
        onehots.push(g.constant(one_hot(&view.labels, classes)?));
    }
    let logits = model.forward(&mut g, &bound, &images, &mut Capture::off())?;
    let loss = segmentation_loss(&mut g, &logits, &onehots)?;
    let loss_value = g.value(loss).item()?.to_f64();
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, id) in bound.iter() {
        let grad = match grads.take(id) {
            Some(t) => t,
            None => Tensor::zeros(params.get(name)?.shape()),
        };
        out.insert(name.to_string(), grad);
    }
    Ok((loss_value, out))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TransFusionModel, init_seed: u64, cfg: TrainConfig) -> Trainer<T> {
        let params = model.init_store::<T>(init_seed);
        let adam = Adam::new(&params, cfg.adam);
        Trainer { model, params, adam, cfg, epoch: 0 }
    }

    /// Restores a run saved mid-way; the checkpoint must describe exactly the
    /// parameters this model declares.
    pub fn from_checkpoint(
        model: TransFusionModel,
        cfg: TrainConfig,
        ck: Checkpoint<T>,
    ) -> Result<Trainer<T>> {
        let expected: Vec<&str> = model.param_set().names().collect();
        let got: Vec<&str> = ck.params.names().collect();
        if expected != got {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model declares {}",
                got.len(),
                expected.len()
            )));
        }
        let adam = match ck.moments {
            Some((m, v)) => Adam::from_state(cfg.adam, ck.step, m, v),
            None => {
                let mut adam = Adam::new(&ck.params, cfg.adam);
                adam.step = ck.step;
                adam
            }
        };
        Ok(Trainer { model, params: ck.params, adam, cfg, epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            step: self.adam.step,
            epoch: self.epoch,
            params: self.params.clone(),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    /// One pass over the dataset: shuffle, augment, batch, update.
    pub fn run_epoch(&mut self, data: &[SampleBundle<T>]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::config("empty training set"));
        }
        let epoch = self.epoch;
        let lr = self.cfg.schedule.lr(self.cfg.lr0, epoch, self.cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::for_name(self.cfg.seed, &format!("epoch-{epoch}-order")).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(self.cfg.batch.max(1)) {
            let results: Vec<(f64, BTreeMap<String, Tensor<T>>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let bundle;
                    let sample = if self.cfg.augment {
                        let mut rng =
                            Rng::for_name(self.cfg.seed, &format!("epoch-{epoch}-augment-{idx}"));
                        bundle = augment_with(&data[idx], &AugmentDraw::sample(&mut rng));
                        &bundle
                    } else {
                        &data[idx]
                    };
                    sample_gradients(&self.model, &self.params, sample)
                })
                .collect::<Result<_>>()?;

            let scale = T::from_f64(1.0 / chunk.len() as f64);
            let mut batch_grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for (loss, grads) in results {
                loss_sum += loss;
                loss_count += 1;
                for (name, grad) in grads {
                    match batch_grads.get_mut(&name) {
                        None => {
                            batch_grads.insert(name, grad);
                        }
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            for grad in batch_grads.values_mut() {
                for x in grad.data_mut() {
                    *x *= scale;
                }
            }
            self.adam.apply(&mut self.params, &batch_grads, lr)?;
        }

        self.epoch += 1;
        Ok(EpochStats { epoch, lr, mean_loss: loss_sum / loss_count as f64 })
    }
}

/// Mean per-view Dice of a model over a dataset; no gradients involved.
pub fn evaluate<T: Scalar>(
    model: &TransFusionModel,
    params: &ParamStore<T>,
    data: &[SampleBundle<T>],
) -> Result<Vec<EvalScores>> {
    if data.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    let per_sample: Vec<Vec<DiceByClass>> = data
        .par_iter()
        .map(|bundle| {
            let preds = predict_sample(model, params, bundle)?;
            Ok(bundle
                .views
                .iter()
                .zip(&preds)
                .map(|(view, pred)| DiceByClass::from_labels(pred, &view.labels))
                .collect())
        })
        .collect::<Result<_>>()?;

    let views = data[0].views.len();
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let n = per_sample.len() as f64;
        let mut acc = DiceByClass { lv: 0.0, myo: 0.0, rv: 0.0 };
        for scores in &per_sample {
            acc.lv += scores[v].lv;
            acc.myo += scores[v].myo;
            acc.rv += scores[v].rv;
        }
        out.push(EvalScores {
            view: data[0].views[v].name.clone(),
            dice: DiceByClass { lv: acc.lv / n, myo: acc.myo / n, rv: acc.rv / n },
        });
    }
    Ok(out)
}

/// Predicted label maps for every view of one sample.
pub fn predict_sample<T: Scalar>(
    model: &TransFusionModel,
    params: &ParamStore<T>,
    bundle: &SampleBundle<T>,
) -> Result<Vec<Vec<u8>>> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, false);
    let images: Vec<_> = bundle
        .views
        .iter()
        .map(|view| {
            let mut with_channel = vec![1usize];
            with_channel.extend_from_slice(view.image.shape());
            Ok(g.constant(view.image.reshaped(&with_channel)?))
        })
        .collect::<Result<_>>()?;
    let logits = model.forward(&mut g, &bound, &images, &mut Capture::off())?;
    Ok(logits.into_iter().map(|id| predict_labels(g.value(id))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FusionOrder, ModelConfig, ViewConfig, MODEL_SCHEMA};
    use crate::synthdata::{generate_sample, ViewData};

    fn small_config() -> ModelConfig {
        ModelConfig {
            schema: MODEL_SCHEMA,
            views: vec![
                ViewConfig { name: "sa".into(), shape: vec![8, 32, 32] },
                ViewConfig { name: "la".into(), shape: vec![32, 32] },
            ],
            classes: 4,
            base_channels: 2,
            max_channels: 8,
            levels: 3,
            heads: 2,
            difa_levels: vec![3],
            msa_levels: vec![3],
            fusion_order: FusionOrder::CrossViewFirst,
        }
    }

    /// Central 32x32 crop of both views, to keep test graphs small.
    fn cropped_sample(seed: u64, index: usize) -> SampleBundle<f32> {
        let (_, bundle) = generate_sample::<f32>(seed, index);
        let views = bundle
            .views
            .iter()
            .map(|view| {
                let shape = view.image.shape().to_vec();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let slices: usize = shape[..shape.len() - 2].iter().product();
                let mut img = Vec::new();
                let mut lab = Vec::new();
                for s in 0..slices {
                    for y in 16..48 {
                        for x in 16..48 {
                            let o = (s * h + y) * w + x;
                            img.push(view.image.data()[o]);
                            lab.push(view.labels[o]);
                        }
                    }
                }
                let mut new_shape = shape[..shape.len() - 2].to_vec();
                new_shape.extend_from_slice(&[32, 32]);
                ViewData {
                    name: view.name.clone(),
                    image: Tensor::new(new_shape, img).unwrap(),
                    labels: lab,
                }
            })
            .collect();
        SampleBundle { views }
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 2,
            lr0: 1e-2,
            schedule: LrSchedule::Exponential { decay: 0.99 },
            adam: AdamConfig::default(),
            augment: true,
            seed: 7,
        }
    }

    #[test]
    fn first_adam_step_moves_by_signed_lr() {
        let mut params = ParamStore::<f64>::empty();
        params.insert("p".into(), Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let mut adam = Adam::new(&params, AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::from_f64(&[3], &[0.5, -2.0, 1e-3]).unwrap());
        adam.apply(&mut params, &grads, 0.1).unwrap();
        let got = params.get("p").unwrap().data();
        for (g, (x0, x1)) in [0.5f64, -2.0, 1e-3].iter().zip([1.0, 2.0, 3.0].iter().zip(got)) {
            let step = x1 - x0;
            assert!((step + 0.1 * g.signum()).abs() < 1e-5, "step {step} for grad {g}");
        }
    }

    #[test]
    fn adam_matches_a_hand_unrolled_update() {
        let cfg = AdamConfig::default();
        let mut params = ParamStore::<f64>::empty();
        params.insert("p".into(), Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap());
        let mut adam = Adam::new(&params, cfg);
        let grad_seq = [[0.4, -0.1], [-0.2, 0.9], [0.05, 0.3]];
        let lr = 0.01;

        let mut x = [0.3, -0.7];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for (t, gs) in grad_seq.iter().enumerate() {
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::from_f64(&[2], gs).unwrap());
            adam.apply(&mut params, &grads, lr).unwrap();

            let bc1 = 1.0 - cfg.beta1.powi(t as i32 + 1);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32 + 1);
            for i in 0..2 {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gs[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gs[i] * gs[i];
                x[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        }
        let got = params.get("p").unwrap().data();
        for i in 0..2 {
            assert!((got[i] - x[i]).abs() < 1e-10, "coord {i}: {} vs {}", got[i], x[i]);
        }
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn schedules_hit_their_pinned_values() {
        let exp = LrSchedule::Exponential { decay: 0.99 };
        let lr = exp.lr(1e-3, 300, 400);
        assert!((lr - 4.904089407128572e-5).abs() < 1e-12 * lr.abs().max(1.0));

        let lin = LrSchedule::Linear { final_fraction: 0.01 };
        assert!((lin.lr(2.0, 0, 101) - 2.0).abs() < 1e-12);
        assert!((lin.lr(2.0, 100, 101) - 0.02).abs() < 1e-12);
        assert!((lin.lr(2.0, 50, 101) - 1.01).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_the_loss() {
        let model = TransFusionModel::new(small_config()).unwrap();
        let data: Vec<SampleBundle<f32>> = (0..2).map(|i| cropped_sample(31, i)).collect();
        let mut trainer = Trainer::<f32>::new(model, 5, tiny_train_config(4));
        let mut stats = Vec::new();
        for _ in 0..4 {
            stats.push(trainer.run_epoch(&data).unwrap());
        }
        assert!(
            stats[3].mean_loss < stats[0].mean_loss - 1e-3,
            "loss went {} -> {}",
            stats[0].mean_loss,
            stats[3].mean_loss
        );
        assert!(stats[1].lr < stats[0].lr || stats[0].lr == 0.0);
    }

    #[test]
    fn resumed_training_is_bit_exact() {
        let data: Vec<SampleBundle<f32>> = (0..2).map(|i| cropped_sample(77, i)).collect();

        let model_a = TransFusionModel::new(small_config()).unwrap();
        let mut straight = Trainer::<f32>::new(model_a, 5, tiny_train_config(2));
        straight.run_epoch(&data).unwrap();
        straight.run_epoch(&data).unwrap();

        let model_b = TransFusionModel::new(small_config()).unwrap();
        let mut first_leg = Trainer::<f32>::new(model_b, 5, tiny_train_config(2));
        first_leg.run_epoch(&data).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        crate::checkpoint::save(tmp.path(), &first_leg.checkpoint()).unwrap();

        let model_c = TransFusionModel::new(small_config()).unwrap();
        let restored = crate::checkpoint::load::<f32>(tmp.path()).unwrap();
        let mut second_leg =
            Trainer::from_checkpoint(model_c, tiny_train_config(2), restored).unwrap();
        assert_eq!(second_leg.epoch, 1);
        second_leg.run_epoch(&data).unwrap();

        for (name, tensor) in straight.params.iter() {
            assert_eq!(
                tensor.data(),
                second_leg.params.get(name).unwrap().data(),
                "parameter {name} diverged after resume"
            );
        }
        assert_eq!(straight.adam.step, second_leg.adam.step);
    }

    #[test]
    fn evaluation_reports_scores_per_view() {
        let model = TransFusionModel::new(small_config()).unwrap();
        let params = model.init_store::<f32>(5);
        let data: Vec<SampleBundle<f32>> = (0..2).map(|i| cropped_sample(31, i)).collect();
        let scores = evaluate(&model, &params, &data).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].view, "sa");
        assert_eq!(scores[1].view, "la");
        for s in &scores {
            for d in [s.dice.lv, s.dice.myo, s.dice.rv] {
                assert!((0.0..=1.0).contains(&d));
            }
        }
    }
}

//! Toy-scale N-way classification training of the stack, plus the
//! finite-difference gradient certificate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netdef::{
    backward, forward, forward_cached, init_weights, ExecMode, NetworkSpec, ParamSet, TapPoint,
    WeightStore,
};
use crate::patch::{augment, preprocess, PATCH_SIDE};
use crate::tensor::{softmax_xent, Scalar, Tensor};

/// One labeled source image: an aligned `(3, 120, 120)` face and its
/// identity class.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs without a validation-accuracy gain before one lr decay.
    pub plateau_patience: usize,
    pub max_decays: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.015,
            lr_decay_factor: 0.1,
            plateau_patience: 3,
            max_decays: 2,
            momentum: 0.9,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
            max_epochs: 30,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Argument(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.lr_decay_factor) {
            return Err(Error::Argument(format!(
                "lr_decay_factor must be in [0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Argument(
                "batch_size, max_epochs, and plateau_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Mean first-batch loss at the initial weights, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch numbers at which the learning rate was decayed.
    pub decay_events: Vec<usize>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

fn validate_samples(spec: &NetworkSpec, samples: &[Sample], classes: usize) -> Result<()> {
    for s in samples {
        if s.label >= classes {
            return Err(Error::Argument(format!(
                "label {} out of range for {classes} classes",
                s.label
            )));
        }
    }
    let _ = spec;
    Ok(())
}

fn accumulate<T: Scalar>(sum: &mut BTreeMap<String, ParamSet<T>>, grads: &BTreeMap<String, ParamSet<T>>) -> Result<()> {
    for (name, g) in grads {
        match sum.get_mut(name) {
            Some(acc) => {
                acc.kernel.add_scaled(&g.kernel, T::one())?;
                acc.bias.add_scaled(&g.bias, T::one())?;
                if let (Some(a), Some(b)) = (acc.slopes.as_mut(), g.slopes.as_ref()) {
                    a.add_scaled(b, T::one())?;
                }
            }
            None => {
                sum.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

fn predict_class<T: Scalar>(logits: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

fn val_accuracy(spec: &NetworkSpec, store: &WeightStore<f32>, val: &[Sample]) -> Result<f64> {
    let mut hit = 0usize;
    for s in val {
        let patch = preprocess(&s.image, false, 0)?;
        let acts = forward(spec, store, &patch.data, &[], ExecMode::Infer, None)?;
        let logits = acts.logits.as_ref().expect("classification head present");
        if predict_class(logits) == s.label {
            hit += 1;
        }
    }
    Ok(hit as f64 / val.len() as f64)
}

/// SGD with momentum on softmax cross-entropy over augmented patches.
///
/// The learning rate is multiplied by `lr_decay_factor` whenever the
/// validation accuracy fails to improve for `plateau_patience` epochs,
/// at most `max_decays` times. Returns the best-validation weights.
/// `clock` supplies wall-clock seconds for the log (the core crate has
/// no time source of its own).
pub fn train_cnn(
    spec: &NetworkSpec,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    mut clock: Option<&mut dyn FnMut() -> f64>,
) -> Result<(WeightStore<f32>, TrainLog)> {
    config.validate()?;
    let classes = spec
        .num_classes
        .ok_or_else(|| Error::Argument("training needs a classification head".into()))?;
    if spec.input_side != PATCH_SIDE {
        return Err(Error::Geometry(format!(
            "trainer feeds {PATCH_SIDE}-side patches; spec was built for {}",
            spec.input_side
        )));
    }
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    validate_samples(spec, train, classes)?;
    validate_samples(spec, val, classes)?;
    let first = train[0].label;
    if train.iter().all(|s| s.label == first) {
        return Err(Error::DegenerateData(
            "training requires at least two identity classes".into(),
        ));
    }

    let mut store = init_weights::<f32>(spec, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut velocity: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
    let mut log = TrainLog::default();
    let mut now = move || clock.as_mut().map(|c| c()).unwrap_or(0.0);

    // First-batch loss at the initial weights, for the ln(K) sanity check.
    {
        let mut probe_rng = rng.clone();
        let mut total = 0.0f64;
        let head = &train[..config.batch_size.min(train.len())];
        for s in head {
            let patch = augment(&s.image, &mut probe_rng)?;
            let acts = forward(spec, &store, &patch, &[], ExecMode::Infer, None)?;
            let logits = acts.logits.as_ref().expect("head present").cast::<f64>();
            let (loss, _) = softmax_xent(&logits, s.label)?;
            total += loss;
        }
        log.initial_loss = total / head.len() as f64;
    }

    let mut lr = config.base_lr;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut stall = 0usize;
    let mut decays = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let taps: [TapPoint; 0] = [];

    for epoch in 0..config.max_epochs {
        let t0 = now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut grad_sum: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
            for &i in batch {
                let patch = augment(&train[i].image, &mut rng)?;
                let (acts, cache) =
                    forward_cached(spec, &store, &patch, &taps, ExecMode::TrainCache, Some(&mut rng))?;
                let logits = acts.logits.as_ref().expect("head present");
                let (loss, upstream) = {
                    let (l, g64) = softmax_xent(&logits.cast::<f64>(), train[i].label)?;
                    (l, g64.cast::<f32>())
                };
                epoch_loss += loss;
                let (grads, _) = backward(spec, &store, &cache, &upstream)?;
                accumulate(&mut grad_sum, &grads)?;
            }
            let scale = 1.0 / batch.len() as f32;
            // Fixed reduction order: BTreeMap iteration is name-sorted.
            for (name, g) in &grad_sum {
                let params = store.entries.get_mut(name).expect("grads match store");
                let vel = velocity.entry(name.clone()).or_insert_with(|| ParamSet {
                    kernel: Tensor::zeros(g.kernel.shape()),
                    bias: Tensor::zeros(g.bias.shape()),
                    slopes: g.slopes.as_ref().map(|s| Tensor::zeros(s.shape())),
                });
                let mu = config.momentum as f32;
                let wd = config.weight_decay as f32;
                let step = |v: &mut Tensor<f32>, w: &mut Tensor<f32>, g: &Tensor<f32>| -> Result<()> {
                    let mut eff = g.scaled(scale);
                    if wd != 0.0 {
                        eff.add_scaled(w, wd)?;
                    }
                    *v = v.scaled(mu);
                    v.add_scaled(&eff, 1.0)?;
                    w.add_scaled(v, -(lr as f32))?;
                    Ok(())
                };
                step(&mut vel.kernel, &mut params.kernel, &g.kernel)?;
                step(&mut vel.bias, &mut params.bias, &g.bias)?;
                if let (Some(v), Some(w), Some(gs)) =
                    (vel.slopes.as_mut(), params.slopes.as_mut(), g.slopes.as_ref())
                {
                    step(v, w, gs)?;
                }
            }
        }

        let acc = val_accuracy(spec, &store, val)?;
        if acc > best_acc {
            best_acc = acc;
            best_store = store.clone();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.plateau_patience && decays < config.max_decays {
                lr *= config.lr_decay_factor;
                decays += 1;
                stall = 0;
                log.decay_events.push(epoch);
            }
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy: acc,
            lr,
            wall_secs: now() - t0,
        });
    }

    log.best_val_accuracy = best_acc;
    log.best_epoch = best_epoch;
    Ok((best_store, log))
}

/// End-to-end loss of the classification stack at one input.
fn loss_at(
    spec: &NetworkSpec,
    store: &WeightStore<f64>,
    input: &Tensor<f64>,
    label: usize,
) -> Result<f64> {
    let acts = forward(spec, store, input, &[], ExecMode::Infer, None)?;
    let logits = acts
        .logits
        .as_ref()
        .ok_or_else(|| Error::Argument("grad_check needs a classification head".into()))?;
    softmax_xent(logits, label).map(|(l, _)| l)
}

/// Compares analytic parameter gradients against central differences at
/// `probes` random coordinates; returns the maximum relative error.
///
/// Runs in 64-bit with dropout inactive (inference phase), so the
/// 1e-6 certificate is meaningful.
pub fn grad_check(
    spec: &NetworkSpec,
    store: &WeightStore<f64>,
    input: &Tensor<f64>,
    label: usize,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 || h <= 0.0 {
        return Err(Error::Argument("grad_check needs probes >= 1 and h > 0".into()));
    }
    // Analytic gradients from one cached forward/backward pass.
    let (acts, cache) = forward_cached(spec, store, input, &[], ExecMode::Infer, None)?;
    let logits = acts
        .logits
        .as_ref()
        .ok_or_else(|| Error::Argument("grad_check needs a classification head".into()))?;
    let (_, upstream) = softmax_xent(logits, label)?;
    let (grads, _) = backward(spec, store, &cache, &upstream)?;

    // Flat index space over every parameter coordinate, name-sorted.
    let mut spans: Vec<(&str, usize, usize)> = Vec::new(); // (name, tensor idx, len)
    let mut total = 0usize;
    for (name, set) in &store.entries {
        for (ti, t) in [Some(&set.kernel), Some(&set.bias), set.slopes.as_ref()]
            .into_iter()
            .enumerate()
        {
            if let Some(t) = t {
                spans.push((name, ti, t.len()));
                total += t.len();
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let (name, ti, idx) = {
            let mut found = None;
            for &(name, ti, len) in &spans {
                if flat < len {
                    found = Some((name, ti, flat));
                    break;
                }
                flat -= len;
            }
            found.expect("flat index within total")
        };

        let pick = |set: &ParamSet<f64>| -> f64 {
            match ti {
                0 => set.kernel.data()[idx],
                1 => set.bias.data()[idx],
                _ => set.slopes.as_ref().expect("span exists").data()[idx],
            }
        };
        let analytic = grads.get(name).map(pick).unwrap_or(0.0);

        let mut probe_store = store.clone();
        let poke = |s: &mut WeightStore<f64>, delta: f64| {
            let set = s.entries.get_mut(name).expect("span exists");
            let slot = match ti {
                0 => &mut set.kernel.data_mut()[idx],
                1 => &mut set.bias.data_mut()[idx],
                _ => &mut set.slopes.as_mut().expect("span exists").data_mut()[idx],
            };
            *slot += delta;
        };
        poke(&mut probe_store, h);
        let plus = loss_at(spec, &probe_store, input, label)?;
        poke(&mut probe_store, -2.0 * h);
        let minus = loss_at(spec, &probe_store, input, label)?;
        let numeric = (plus - minus) / (2.0 * h);

        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

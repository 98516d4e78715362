//! Minibatch training, validation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::network::Model;
use crate::imaging::{
    augment, mask_tensor, normalize, probability_image, threshold_mask, AugmentSpec, BinaryMask, ImageRGB,
    DEFAULT_THRESHOLD,
};
use crate::metrics::{confusion_counts, mean_scores, Scores};
use crate::tensor::{adam_step, AdamConfig, AdamState, GradTape, ParamId, Tensor};
use crate::{derive_seed, Error, Result};

/// One image with its ground-truth mask, both at the network input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageRGB,
    pub mask: BinaryMask,
}

/// Optimizer state plus the stream feeding shuffling, dropout and
/// augmentation seeds.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: AdamState,
    pub batch_size: usize,
    pub augment: Option<AugmentSpec>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Model, adam: AdamConfig, batch_size: usize, augment: Option<AugmentSpec>, seed: u64) -> Self {
        Trainer {
            adam: AdamState::new(adam, model.store().params().iter().map(|p| &p.value)),
            batch_size,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean over batches of the mean per-pixel cross-entropy.
    pub loss: f64,
    /// Mean per-image Dice of the training predictions at 0.5.
    pub dice: f64,
}

fn stack(tensors: &[Tensor]) -> Result<Tensor> {
    let mut shape = tensors[0].shape().to_vec();
    shape[0] = tensors.len();
    let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Mask a probability map yields at the default threshold.
fn predicted_mask(probs: &Tensor, n: usize) -> Result<BinaryMask> {
    Ok(threshold_mask(&probability_image(probs, n)?, DEFAULT_THRESHOLD))
}

/// One pass over `samples` in a freshly shuffled order, one Adam step per
/// batch. The last batch may be smaller.
pub fn train_epoch(model: &mut Model, samples: &[Sample], trainer: &mut Trainer) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if trainer.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut trainer.rng);
    let (mut loss_sum, mut dice) = (0.0, Vec::with_capacity(samples.len()));
    let batches = order.chunks(trainer.batch_size);
    let n_batches = batches.len();
    for batch in batches {
        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        let mut truths = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &samples[i];
            let (img, mask) = match &trainer.augment {
                Some(spec) => {
                    let spec = AugmentSpec {
                        seed: rand::Rng::random(&mut trainer.rng),
                        ..spec.clone()
                    };
                    augment(&s.image, &s.mask, &spec)?
                }
                None => (s.image.clone(), s.mask.clone()),
            };
            images.push(normalize(&img));
            masks.push(mask_tensor(&mask));
            truths.push(mask);
        }
        let x = stack(&images)?;
        let y = stack(&masks)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut trainer.rng));
        let mut tape = GradTape::new();
        let probs = model.forward_train(&mut tape, &x, &mut dropout_rng)?;
        let loss = tape.bce(probs, &y)?;
        loss_sum += tape.value(loss).data()[0] as f64;
        let p = tape.value(probs).clone();
        for (n, truth) in truths.iter().enumerate() {
            dice.push(confusion_counts(&predicted_mask(&p, n)?, truth)?.dice());
        }
        let grads = tape.backward(loss)?;
        let store = model.store_mut();
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .enumerate()
            .filter(|(i, _)| grads.get(ParamId(*i)).is_none())
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let mut spare = zeros.iter();
        let g: Vec<&Tensor> = (0..store.params().len())
            .map(|i| {
                grads
                    .get(ParamId(i))
                    .unwrap_or_else(|| spare.next().expect("one zero per missing"))
            })
            .collect();
        let mut params: Vec<&mut Tensor> = store.params_mut().iter_mut().map(|p| &mut p.value).collect();
        adam_step(&mut params, &g, &mut trainer.adam)?;
    }
    Ok(EpochStats {
        loss: loss_sum / n_batches as f64,
        dice: dice.iter().sum::<f64>() / dice.len() as f64,
    })
}

/// Mean per-image scores of the inference-mode predictions at the default
/// threshold, without post-processing.
pub fn validate(model: &Model, samples: &[Sample]) -> Result<Scores> {
    if samples.is_empty() {
        return Err(Error::arg("validation set is empty"));
    }
    let scores = samples
        .iter()
        .map(|s| {
            let p = model.predict(&normalize(&s.image))?;
            Ok(Scores::of(&confusion_counts(&predicted_mask(&p, 0)?, &s.mask)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_scores(&scores))
}

/// Outcome of feeding one metric value to an [`EarlyStopper`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once the metric has failed to strictly improve for more than
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub since: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            since: 0,
        })
    }

    pub fn observe(&mut self, metric: f64) -> Observation {
        if metric > self.best {
            self.best = metric;
            self.since = 0;
            return Observation::Improved;
        }
        self.since += 1;
        if self.since > self.patience {
            Observation::Stop
        } else {
            Observation::NoImprovement
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

/// Result of [`drive`]. Epochs count from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome<P> {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best: P,
    pub epochs_run: usize,
    pub reason: StopReason,
}

/// Runs `epoch(1), epoch(2), …` until the stopper fires or `max_epochs` is
/// reached. Each call returns the epoch's metric and a payload; the payload
/// of the best epoch is kept.
pub fn drive<P>(
    stopper: &mut EarlyStopper,
    max_epochs: usize,
    mut epoch: impl FnMut(usize) -> Result<(f64, P)>,
) -> Result<RunOutcome<P>> {
    if max_epochs == 0 {
        return Err(Error::Config("max_epochs must be positive".into()));
    }
    let mut best: Option<(usize, f64, P)> = None;
    let mut reason = StopReason::MaxEpochs;
    let mut run = 0;
    for e in 1..=max_epochs {
        let (metric, payload) = epoch(e)?;
        run = e;
        match stopper.observe(metric) {
            Observation::Improved => best = Some((e, metric, payload)),
            Observation::NoImprovement => {}
            Observation::Stop => {
                reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    let (best_epoch, best_metric, best) = best.ok_or_else(|| Error::Internal("metric never exceeded -inf".into()))?;
    Ok(RunOutcome {
        best_epoch,
        best_metric,
        best,
        epochs_run: run,
        reason,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: Option<AugmentSpec>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_epochs: 1000,
            patience: 100,
            batch_size: 2,
            adam: AdamConfig::default(),
            augment: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: EpochStats,
    pub val: Scores,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub reason: StopReason,
    pub history: Vec<EpochLog>,
}

/// Trains until early stopping on validation Dice or `max_epochs`. On
/// return `model` holds the best epoch's weights, which are also in the
/// returned checkpoint. `on_epoch` sees every epoch as it finishes.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    if val.is_empty() {
        return Err(Error::arg("validation set is empty"));
    }
    if let Some(spec) = &opts.augment {
        spec.validate()?;
    }
    let mut stopper = EarlyStopper::new(opts.patience)?;
    let mut trainer = Trainer::new(
        model,
        opts.adam,
        opts.batch_size,
        opts.augment.clone(),
        derive_seed(opts.seed, 1),
    );
    let mut history = Vec::new();
    let run = drive(&mut stopper, opts.max_epochs, |epoch| {
        let stats = train_epoch(model, train, &mut trainer)?;
        let scores = validate(model, val)?;
        let log = EpochLog {
            epoch,
            train: stats,
            val: scores,
        };
        on_epoch(&log);
        history.push(log);
        Ok((scores.dice, model.store().clone()))
    })?;
    *model.store_mut() = run.best;
    Ok(FitOutcome {
        checkpoint: Checkpoint::from_model(model, run.best_epoch as u64, run.best_metric),
        best_epoch: run.best_epoch,
        epochs_run: run.epochs_run,
        reason: run.reason,
        history,
    })
}

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::thread;

use log::{info, warn};
use rand::seq::SliceRandom;

use super::predict::clips_to_batch;
use super::sgd::{lr_schedule, SgdConfig, TrainState};
use super::{Result, TrainError};
use crate::dataset::{self, load_clip, Clip, ClipSpec};
use crate::movie_store::MovieStore;
use crate::tensor_nn::{
    crop_spatial, mse_loss, pad_to, unet_forward, unet_forward_cached, unet_param_grads, UNetConfig,
    UNetParams,
};

/// Indexed access to clips for training and validation.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;
    fn spec(&self, index: usize) -> &ClipSpec;
    fn load(&self, index: usize) -> dataset::Result<Clip>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for [Clip] {
    fn len(&self) -> usize {
        <[Clip]>::len(self)
    }

    fn spec(&self, index: usize) -> &ClipSpec {
        &self[index].spec
    }

    fn load(&self, index: usize) -> dataset::Result<Clip> {
        Ok(self[index].clone())
    }
}

impl ClipSource for Vec<Clip> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn spec(&self, index: usize) -> &ClipSpec {
        &self[index].spec
    }

    fn load(&self, index: usize) -> dataset::Result<Clip> {
        Ok(self[index].clone())
    }
}

/// Clips read lazily from a movie store.
pub struct StoreClips<'a> {
    store: &'a MovieStore,
    specs: Vec<ClipSpec>,
}

impl<'a> StoreClips<'a> {
    pub fn new(store: &'a MovieStore, specs: Vec<ClipSpec>) -> Self {
        Self { store, specs }
    }
}

impl ClipSource for StoreClips<'_> {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn spec(&self, index: usize) -> &ClipSpec {
        &self.specs[index]
    }

    fn load(&self, index: usize) -> dataset::Result<Clip> {
        load_clip(&self.specs[index], self.store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    /// NaN when no validation clip falls on a test slot.
    pub val_test_slots_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters of the epoch with the lowest validation loss.
    pub best_params: UNetParams<f32>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

/// Forward, loss on the unclamped cropped output, backward and one SGD step.
/// Returns the batch MSE on the 0..255 scale. With `normalize_output` the
/// gradient is that of the same MSE measured in [0, 1] units.
pub fn train_step(state: &mut TrainState, clips: &[&Clip], lr: f64, config: &SgdConfig) -> Result<f64> {
    let multiple = state.params.config.spatial_multiple();
    let batch = clips_to_batch::<f32>(clips, multiple)?;
    let (output, cache) = unet_forward_cached(&state.params, &batch.input)?;
    let cropped = crop_spatial(&output, batch.crop)?;
    let (loss, mut grad) = mse_loss(&cropped, &batch.target)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: state.epoch,
            step: state.step,
            loss,
        });
    }
    let scale = state.params.config.output_scale();
    if scale != 1.0 {
        grad.scale((1.0 / (scale * scale)) as f32);
    }
    let (_, _, hp, wp) = output.dims4()?;
    let grad = pad_to(&grad, hp, wp)?;
    let grads = unet_param_grads(&state.params, &cache, &grad)?;
    state.sgd_step(&grads, lr, config)?;
    Ok(loss)
}

/// Mean squared error of unclamped outputs over the selected clips; NaN if
/// none are selected.
fn validation_loss(
    params: &UNetParams<f32>,
    source: &dyn ClipSource,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size) {
        let clips = chunk
            .iter()
            .map(|&i| source.load(i))
            .collect::<dataset::Result<Vec<_>>>()?;
        let refs: Vec<&Clip> = clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs, params.config.spatial_multiple())?;
        let output = crop_spatial(&unet_forward(params, &batch.input)?, batch.crop)?;
        let (loss, _) = mse_loss(&output, &batch.target)?;
        total += loss * batch.target.len() as f64;
        count += batch.target.len();
    }
    Ok(total / count as f64)
}

/// Trains from a fresh seeded state.
pub fn train(
    model: UNetConfig,
    config: &SgdConfig,
    train_clips: &dyn ClipSource,
    val_clips: &dyn ClipSource,
    test_slots: &BTreeSet<usize>,
) -> Result<TrainOutcome> {
    let state = TrainState::new(model, config.seed)?;
    train_with_state(state, config, train_clips, val_clips, test_slots)
}

/// Runs epochs `state.epoch..config.epochs`. Each epoch shuffles the training
/// clips with the state's generator, trains on mini-batches, then measures
/// the full validation loss and the loss on validation clips whose first
/// predicted slot is a test slot.
pub fn train_with_state(
    mut state: TrainState,
    config: &SgdConfig,
    train_clips: &dyn ClipSource,
    val_clips: &dyn ClipSource,
    test_slots: &BTreeSet<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_clips.is_empty() {
        return Err(TrainError::EmptyClips("training"));
    }
    if val_clips.is_empty() {
        return Err(TrainError::EmptyClips("validation"));
    }
    let val_all: Vec<usize> = (0..val_clips.len()).collect();
    let val_test: Vec<usize> = val_all
        .iter()
        .copied()
        .filter(|&i| test_slots.contains(&val_clips.spec(i).prediction_slot()))
        .collect();
    if val_test.is_empty() {
        warn!("no validation clip predicts a test slot; logging NaN for that column");
    }

    let mut log = Vec::new();
    let mut best_params = state.params.clone();
    let mut best: Option<(usize, f64)> = None;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, config);
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut state.rng);

        let (sum, count) = run_epoch(&mut state, config, train_clips, &order, lr)?;
        let train_mse = sum / count as f64;
        let val_mse = validation_loss(&state.params, val_clips, &val_all, config.batch_size)?;
        let val_test_slots_mse = validation_loss(&state.params, val_clips, &val_test, config.batch_size)?;
        if !val_mse.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step: state.step,
                loss: val_mse,
            });
        }
        info!("epoch {epoch}: lr {lr} train {train_mse:.4} val {val_mse:.4} val@test {val_test_slots_mse:.4}");
        log.push(EpochRecord {
            epoch,
            lr,
            train_mse,
            val_mse,
            val_test_slots_mse,
        });
        if best.map_or(true, |(_, b)| val_mse < b) {
            best = Some((epoch, val_mse));
            best_params = state.params.clone();
        }
        state.epoch += 1;
    }
    Ok(TrainOutcome {
        state,
        best_params,
        best_epoch: best.map(|(e, _)| e),
        log,
    })
}

/// One pass over `order`. A loader thread reads batches ahead of the
/// optimizer through a bounded channel, so batches arrive in order.
fn run_epoch(
    state: &mut TrainState,
    config: &SgdConfig,
    source: &dyn ClipSource,
    order: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    thread::scope(|scope| {
        let (tx, rx) = sync_channel::<dataset::Result<Vec<Clip>>>(2);
        scope.spawn(move || {
            for chunk in order.chunks(config.batch_size) {
                let batch = chunk.iter().map(|&i| source.load(i)).collect();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        let mut sum = 0.0;
        let mut count = 0;
        for batch in rx {
            let clips = batch?;
            let refs: Vec<&Clip> = clips.iter().collect();
            let loss = train_step(state, &refs, lr, config)?;
            sum += loss * clips.len() as f64;
            count += clips.len();
        }
        Ok((sum, count))
    })
}

pub fn write_epoch_log(log: &[EpochRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,lr,train_mse,val_mse,val_test_slots_mse")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.train_mse, r.val_mse, r.val_test_slots_mse
        )?;
    }
    Ok(())
}

pub fn read_epoch_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,lr,train_mse,val_mse,val_test_slots_mse") {
        return Err(TrainError::State("unexpected epoch log header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || TrainError::State(format!("bad epoch log row {line:?}"));
            if fields.len() != 5 {
                return Err(bad());
            }
            let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad())?,
                lr: f(1)?,
                train_mse: f(2)?,
                val_mse: f(3)?,
                val_test_slots_mse: f(4)?,
            })
        })
        .collect()
}

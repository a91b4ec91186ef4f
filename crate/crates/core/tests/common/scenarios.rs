//! End-to-end training scenarios used by the acceptance harness and the
//! integration tests.

use std::collections::BTreeSet;
use std::path::Path;

use mapcast::baselines::{persistence, predict_slot_average, time_slot_average};
use mapcast::dataset::*;
use mapcast::movie_store::{ingest, Movie, MovieMeta, MovieStore};
use mapcast::tensor_nn::*;
use mapcast::trainer::*;
use ndarray::{s, Array4};

pub fn clip_at(frames: &Array4<u8>, city: &str, day: &str, t: usize) -> Clip {
    Clip {
        input: frames.slice(s![t..t + INPUT_FRAMES, .., .., ..]).to_owned(),
        target: frames.slice(s![t + INPUT_FRAMES..t + CLIP_FRAMES, .., .., ..]).to_owned(),
        spec: ClipSpec::new(city, day, t),
    }
}

pub fn day_name(d: usize) -> String {
    format!("2019-01-{:02}", d + 1)
}

/// Writes `days` slot-pattern days of a `size` x `size` city into `dir`.
pub fn write_slot_days(dir: &Path, days: usize, size: usize, noise: u8) -> Vec<Array4<u8>> {
    (0..days)
        .map(|d| {
            let frames = synth_movie(SynthKind::SlotPattern { noise }, d as u64, [SLOTS_PER_DAY, 3, size, size]);
            ingest(
                frames.view(),
                &MovieMeta::new("Synth", day_name(d)),
                &dir.join(format!("{}.tmm", day_name(d))),
            )
            .unwrap();
            frames
        })
        .collect()
}

/// Single-clip memorisation run. Returns (steps, final batch MSE).
pub fn overfit(max_steps: usize) -> (usize, f64) {
    let frames = synth_movie(SynthKind::SlotPattern { noise: 0 }, 11, [CLIP_FRAMES, 3, 16, 16]);
    let clip = clip_at(&frames, "Synth", "2019-01-01", 0);
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 16,
        ..UNetConfig::default()
    };
    let sgd = SgdConfig {
        lr_initial: 0.5,
        ..SgdConfig::default()
    };
    let mut state = TrainState::new(cfg, 1).unwrap();
    let mut mse = f64::INFINITY;
    for step in 1..=max_steps {
        mse = train_step(&mut state, &[&clip], sgd.lr_initial, &sgd).unwrap();
        if mse < 1.0 {
            return (step, mse);
        }
    }
    (max_steps, mse)
}

pub struct LearningReport {
    pub persistence: f64,
    pub slot_average: f64,
    pub unet: f64,
    pub log: Vec<EpochRecord>,
}

/// Trains the toy network on 7 slot-pattern days and validates on the 8th.
pub fn learning_property(dir: &Path, model: UNetConfig, sgd: &SgdConfig, stride: usize, noise: u8) -> LearningReport {
    let size = 32;
    let days = write_slot_days(dir, 8, size, noise);
    let last = SLOTS_PER_DAY - CLIP_FRAMES;
    let train_clips: Vec<Clip> = (0..7)
        .flat_map(|d| (0..=last).step_by(stride).map(move |t| (d, t)))
        .map(|(d, t)| clip_at(&days[d], "Synth", &day_name(d), t))
        .collect();
    let val: Vec<Clip> = (0..=last).map(|t| clip_at(&days[7], "Synth", &day_name(7), t)).collect();

    let store = MovieStore::open_dir(dir).unwrap();
    let train_movies: Vec<&Movie> = store.movies().filter(|m| m.header().date != day_name(7)).collect();
    let model_sa = time_slot_average(&train_movies, &(0..SLOTS_PER_DAY).collect()).unwrap();
    let score = |preds: Vec<Array4<u8>>| {
        let items: Vec<EvalItem> = preds
            .into_iter()
            .zip(&val)
            .map(|(prediction, c)| EvalItem {
                city: "Synth".into(),
                prediction,
                truth: c.target.clone(),
            })
            .collect();
        evaluate(&items).unwrap().overall
    };
    let persistence_mse = score(val.iter().map(persistence).collect());
    let slot_average = score(val.iter().map(|c| predict_slot_average(&model_sa, &c.spec).unwrap()).collect());

    let outcome = train(model, sgd, &train_clips, &val, &BTreeSet::new()).unwrap();
    let refs: Vec<&Clip> = val.iter().collect();
    let preds: Vec<Array4<u8>> = refs
        .chunks(16)
        .flat_map(|chunk| predict_batch(&outcome.best_params, chunk).unwrap())
        .collect();
    LearningReport {
        persistence: persistence_mse,
        slot_average,
        unet: score(preds),
        log: outcome.log,
    }
}

/// Artifacts of one synth -> train -> predict -> evaluate run.
#[derive(PartialEq)]
pub struct PipelineArtifacts {
    pub checkpoint: Vec<u8>,
    pub predictions: Vec<Vec<u8>>,
    pub report: String,
}

pub fn pipeline(dir: &Path) -> PipelineArtifacts {
    let days: Vec<Array4<u8>> = (0..3)
        .map(|d| synth_movie(SynthKind::SlotPattern { noise: 10 }, d, [60, 3, 16, 16]))
        .collect();
    for (d, frames) in days.iter().enumerate() {
        ingest(frames.view(), &MovieMeta::new("Synth", day_name(d)), &dir.join(format!("{d}.tmm"))).unwrap();
    }
    let store = MovieStore::open_dir(dir).unwrap();
    let headers = store.headers();
    let train_specs = enumerate_clips(&headers[..2], 3, None, None).unwrap();
    let val_specs = enumerate_clips(&headers[2..], 1, None, None).unwrap();
    let model = UNetConfig {
        depth: 2,
        base_channels: 4,
        ..UNetConfig::default()
    };
    let sgd = SgdConfig {
        epochs: 3,
        drop_epoch: 2,
        seed: 9,
        ..SgdConfig::default()
    };
    let outcome = train(
        model,
        &sgd,
        &StoreClips::new(&store, train_specs),
        &StoreClips::new(&store, val_specs.clone()),
        &BTreeSet::from([20, 30]),
    )
    .unwrap();
    let ckpt = dir.join("model.unp");
    save_checkpoint(&outcome.best_params, &ckpt).unwrap();
    let params = load_checkpoint(&ckpt).unwrap();
    let clips: Vec<Clip> = val_specs.iter().map(|s| load_clip(s, &store).unwrap()).collect();
    let refs: Vec<&Clip> = clips.iter().collect();
    let preds = predict_batch(&params, &refs).unwrap();
    let mut predictions = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let path = dir.join(format!("pred{i}.tmm"));
        ingest(p.view(), &MovieMeta::new("Synth", day_name(2)), &path).unwrap();
        predictions.push(std::fs::read(&path).unwrap());
    }
    let items: Vec<EvalItem> = preds
        .into_iter()
        .zip(&clips)
        .map(|(prediction, c)| EvalItem {
            city: "Synth".into(),
            prediction,
            truth: c.target.clone(),
        })
        .collect();
    PipelineArtifacts {
        checkpoint: std::fs::read(&ckpt).unwrap(),
        predictions,
        report: serde_json::to_string(&evaluate(&items).unwrap()).unwrap(),
    }
}

/// Model, optimizer, clip stride and noise for the learning-property run.
pub fn learning_setup() -> (UNetConfig, SgdConfig, usize, u8) {
    let model = UNetConfig {
        depth: 2,
        base_channels: 16,
        ..UNetConfig::default()
    };
    let sgd = SgdConfig {
        lr_initial: 0.05,
        epochs: 80,
        drop_epoch: 70,
        seed: 0,
        ..SgdConfig::default()
    };
    (model, sgd, 4, 40)
}

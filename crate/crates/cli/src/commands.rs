use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Days, NaiveDate};
use log::info;
use mapcast::baselines::{persistence, predict_slot_average, time_slot_average, zero_baseline};
use mapcast::dataset::{enumerate_clips, load_clip, read_slot_file, synth_movie, ClipSpec, SynthKind, TARGET_FRAMES};
use mapcast::masks::{apply_mask, build_mask, Mask};
use mapcast::movie_store::{ingest, ingest_bytes, list_movie_files, Movie, MovieHeader, MovieMeta, MovieStore};
use mapcast::tensor_nn::{load_checkpoint, save_checkpoint};
use mapcast::trainer::{evaluate, predict_batch, train, write_epoch_log, EvalItem, StoreClips};
use ndarray::Array4;
use serde_json::json;

use crate::config::TrainConfig;
use crate::{BaselineKind, Command, SynthArg};

/// Clips predicted per network call.
const PREDICT_BATCH: usize = 8;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            input,
            city,
            date,
            shape,
            out,
        } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let header = ingest_bytes(&bytes, shape, &MovieMeta::new(city, date), &out)?;
            println!("{}", header_json(&header));
            Ok(())
        }
        Command::Inspect { file, dump } => {
            let movie = Movie::open(&file)?;
            println!("{}", header_json(movie.header()));
            if let Some(dump) = dump {
                let frames = movie.read_all()?;
                fs::write(&dump, frames.as_slice().expect("fresh read is contiguous"))
                    .with_context(|| format!("writing {}", dump.display()))?;
            }
            Ok(())
        }
        Command::Synth {
            kind,
            seed,
            shape,
            city,
            date,
            days,
            noise,
            value,
            out,
        } => synth(kind, seed, shape, &city, &date, days, noise, value, &out),
        Command::Mask {
            data,
            threshold,
            city,
            out,
        } => {
            let store = open_store(&data)?;
            let city = pick_city(&store, city.as_deref())?;
            let movies: Vec<&Movie> = store.movies().filter(|m| m.header().city == city).collect();
            let mask = build_mask(&movies, threshold)?;
            mask.save(&out, &city)?;
            println!(
                "{}",
                json!({"city": city, "threshold": threshold, "active": mask.active_count(), "frames": mask.source_span})
            );
            Ok(())
        }
        Command::Train { config, data, out, log } => train_command(config.as_deref(), &data, &out, log),
        Command::Predict {
            ckpt,
            data,
            slots,
            out,
            city,
            mask,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let store = open_store(&data)?;
            let specs = test_clips(&store, &slots, city.as_deref())?;
            let mask = load_mask(mask.as_deref())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for chunk in specs.chunks(PREDICT_BATCH) {
                let clips = chunk
                    .iter()
                    .map(|s| load_clip(s, &store))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let refs: Vec<_> = clips.iter().collect();
                for (spec, pred) in chunk.iter().zip(predict_batch(&params, &refs)?) {
                    write_prediction(&out, spec, pred, mask.as_ref())?;
                }
            }
            println!("{}", json!({"predictions": specs.len()}));
            Ok(())
        }
        Command::Baseline {
            kind,
            data,
            slots,
            out,
            train,
            city,
            mask,
        } => baseline(kind, &data, &slots, &out, train.as_deref(), city.as_deref(), mask.as_deref()),
        Command::Evaluate { pred, truth, report } => evaluate_command(&pred, &truth, &report),
    }
}

fn header_json(h: &MovieHeader) -> serde_json::Value {
    json!({
        "city": h.city,
        "date": h.date,
        "shape": h.shape(),
        "payload_bytes": h.t * h.frame_len(),
        "file_bytes": h.file_len(),
    })
}

fn open_store(dir: &Path) -> Result<MovieStore> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let store = MovieStore::open_dir(dir)?;
    if store.is_empty() {
        bail!("no .tmm movies in {}", dir.display());
    }
    Ok(store)
}

/// The requested city, or the only city in the store.
fn pick_city(store: &MovieStore, city: Option<&str>) -> Result<String> {
    let cities = store.cities();
    match city {
        Some(c) if cities.iter().any(|x| x == c) => Ok(c.to_string()),
        Some(c) => bail!("no movies for city {c:?} (found {cities:?})"),
        None if cities.len() == 1 => Ok(cities[0].clone()),
        None => bail!("several cities in the data ({cities:?}); pick one with --city"),
    }
}

fn load_mask(path: Option<&Path>) -> Result<Option<Mask>> {
    path.map(|p| Mask::load(p).with_context(|| format!("loading mask {}", p.display())))
        .transpose()
}

/// Clips of every movie (optionally one city) whose first predicted slot is
/// listed in the slot file.
fn test_clips(store: &MovieStore, slots: &Path, city: Option<&str>) -> Result<Vec<ClipSpec>> {
    let slots = read_slot_file(slots)?;
    let headers: Vec<MovieHeader> = store
        .headers()
        .into_iter()
        .filter(|h| city.is_none_or(|c| h.city == c))
        .collect();
    if headers.is_empty() {
        bail!("no movies for city {city:?}");
    }
    Ok(enumerate_clips(&headers, 1, Some(&slots), None)?)
}

pub fn prediction_file_name(spec: &ClipSpec) -> String {
    format!("{}.{}.{:03}.tmm", spec.city, spec.day, spec.prediction_slot())
}

fn write_prediction(dir: &Path, spec: &ClipSpec, pred: Array4<u8>, mask: Option<&Mask>) -> Result<()> {
    let pred = match mask {
        Some(m) => apply_mask(pred.view(), m)?,
        None => pred,
    };
    ingest(pred.view(), &MovieMeta::new(&spec.city, &spec.day), &dir.join(prediction_file_name(spec)))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    kind: SynthArg,
    seed: u64,
    shape: [usize; 4],
    city: &str,
    date: &str,
    days: usize,
    noise: u8,
    value: u8,
    out: &Path,
) -> Result<()> {
    if shape.contains(&0) {
        bail!("zero dimension in shape {shape:?}");
    }
    if days == 0 {
        bail!("--days must be at least 1");
    }
    let kind = match kind {
        SynthArg::Constant => SynthKind::Constant(value),
        SynthArg::TimeRamp => SynthKind::TimeRamp,
        SynthArg::SlotPattern => SynthKind::SlotPattern { noise },
        SynthArg::Random => SynthKind::Random,
    };
    let first = NaiveDate::parse_from_str(date, "%Y-%m-%d").with_context(|| format!("bad date {date:?}"))?;
    let single_file = days == 1 && out.extension().is_some_and(|e| e == "tmm");
    if !single_file {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    for d in 0..days {
        let day = first
            .checked_add_days(Days::new(d as u64))
            .ok_or_else(|| anyhow!("date overflow"))?
            .format("%Y-%m-%d")
            .to_string();
        let frames = synth_movie(kind, seed + d as u64, shape);
        let path = if single_file {
            out.to_path_buf()
        } else {
            out.join(format!("{city}.{day}.tmm"))
        };
        ingest(frames.view(), &MovieMeta::new(city, &day), &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn train_command(config: Option<&Path>, data: &Path, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let store = open_store(data)?;
    let city = pick_city(&store, cfg.data.city.as_deref())?;
    let headers: Vec<MovieHeader> = store.headers().into_iter().filter(|h| h.city == city).collect();
    let dv = cfg.data.val_days;
    if dv == 0 || dv >= headers.len() {
        bail!(
            "val_days = {dv} needs between 1 and {} days for city {city} ({} found)",
            headers.len().saturating_sub(1),
            headers.len()
        );
    }
    // headers come in date order; the latest days validate
    let (train_h, val_h) = headers.split_at(headers.len() - dv);
    let train_specs = enumerate_clips(train_h, cfg.data.stride, None, cfg.data.region)?;
    let val_specs = enumerate_clips(val_h, 1, None, cfg.data.region)?;
    info!(
        "city {city}: {} training clips from {} days, {} validation clips",
        train_specs.len(),
        train_h.len(),
        val_specs.len()
    );
    let test_slots: BTreeSet<usize> = cfg.data.test_slots.iter().copied().collect();
    let outcome = train(
        cfg.model,
        &cfg.sgd,
        &StoreClips::new(&store, train_specs),
        &StoreClips::new(&store, val_specs),
        &test_slots,
    )?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&outcome.best_params, out)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = Vec::new();
    write_epoch_log(&outcome.log, &mut csv)?;
    fs::write(&log_path, csv).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "{}",
        json!({
            "city": city,
            "checkpoint": out,
            "log": log_path,
            "best_epoch": outcome.best_epoch,
            "final_train_mse": outcome.log.last().map(|r| r.train_mse),
            "best_val_mse": outcome.best_epoch.map(|e| outcome.log[e].val_mse),
        })
    );
    Ok(())
}

fn baseline(
    kind: BaselineKind,
    data: &Path,
    slots: &Path,
    out: &Path,
    train_dir: Option<&Path>,
    city: Option<&str>,
    mask: Option<&Path>,
) -> Result<()> {
    let store = open_store(data)?;
    let specs = test_clips(&store, slots, city)?;
    let mask = load_mask(mask)?;
    let train_store = match (kind, train_dir) {
        (BaselineKind::SlotAvg, Some(dir)) => Some(open_store(dir)?),
        (BaselineKind::SlotAvg, None) => bail!("the slot average needs --train <dir>"),
        _ => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cities: BTreeSet<&str> = specs.iter().map(|s| s.city.as_str()).collect();
    for city in cities {
        let city_specs: Vec<&ClipSpec> = specs.iter().filter(|s| s.city == city).collect();
        let model = match &train_store {
            Some(ts) => {
                let movies: Vec<&Movie> = ts.movies().filter(|m| m.header().city == city).collect();
                if movies.is_empty() {
                    bail!("no training days for city {city}");
                }
                let needed: BTreeSet<usize> = city_specs
                    .iter()
                    .flat_map(|s| (0..TARGET_FRAMES).map(move |j| s.prediction_slot() + j))
                    .collect();
                Some(time_slot_average(&movies, &needed)?)
            }
            None => None,
        };
        for spec in city_specs {
            let pred = match (kind, &model) {
                (BaselineKind::SlotAvg, Some(m)) => predict_slot_average(m, spec)?,
                (BaselineKind::Persistence, _) => persistence(&load_clip(spec, &store)?),
                _ => zero_baseline(&load_clip(spec, &store)?),
            };
            write_prediction(out, spec, pred, mask.as_ref())?;
        }
    }
    println!("{}", json!({"predictions": specs.len()}));
    Ok(())
}

/// Slot encoded in a prediction file name `{city}.{date}.{slot}.tmm`.
fn slot_from_name(path: &Path) -> Result<usize> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('.').next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow!("{}: file name does not end in .<slot>.tmm", path.display()))
}

fn evaluate_command(pred_dir: &Path, truth_dir: &Path, report: &Path) -> Result<()> {
    if !truth_dir.is_dir() {
        bail!("truth directory {} does not exist", truth_dir.display());
    }
    let files = list_movie_files(pred_dir)?;
    if files.is_empty() {
        bail!("no prediction files in {}", pred_dir.display());
    }
    let day_movies = MovieStore::open_dir(truth_dir)?;
    let mut items = Vec::with_capacity(files.len());
    for file in files {
        let pred = Movie::open(&file)?;
        let name = file.file_name().expect("listed file has a name");
        let same_name = truth_dir.join(name);
        let truth = if same_name.is_file() {
            Movie::open(&same_name)?.read_all()?
        } else {
            let h = pred.header();
            let day = day_movies
                .get(&h.city, &h.date)
                .ok_or_else(|| anyhow!("no ground truth for {} {} in {}", h.city, h.date, truth_dir.display()))?;
            day.read_frames(slot_from_name(&file)?, TARGET_FRAMES)?.frames
        };
        items.push(EvalItem {
            city: pred.header().city.clone(),
            prediction: pred.read_all()?,
            truth,
        });
    }
    let metrics = evaluate(&items)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    fs::write(report, text + "\n").with_context(|| format!("writing {}", report.display()))?;
    println!("{}", json!({"overall": metrics.overall, "clips": metrics.clips}));
    Ok(())
}

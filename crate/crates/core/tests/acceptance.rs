//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time budget.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::scenarios::*;
use common::*;
use mapcast::baselines::{quantize, time_slot_average};
use mapcast::dataset::*;
use mapcast::masks::{apply_mask, build_mask, build_mask_from_frames};
use mapcast::movie_store::{ingest, Movie, MovieMeta};
use mapcast::tensor_nn::*;
use mapcast::trainer::*;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_movie(r: &mut rand_chacha::ChaCha8Rng, max: [usize; 4]) -> Array4<u8> {
    let shape = max.map(|m| r.gen_range(1..=m));
    Array4::from_shape_simple_fn((shape[0], shape[1], shape[2], shape[3]), || r.gen())
}

fn storage_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(100);
    for i in 0..100 {
        let raw = random_movie(&mut r, [16, 3, 64, 64]);
        let path = dir.path().join(format!("{i}.tmm"));
        ingest(raw.view(), &MovieMeta::new("City", "2019-01-01"), &path).map_err(|e| e.to_string())?;
        let movie = Movie::open(&path).map_err(|e| e.to_string())?;
        ensure(movie.read_all().map_err(|e| e.to_string())? == raw, || format!("movie {i} differs"))?;
        let (t, c, h, w) = raw.dim();
        let start = r.gen_range(0..t);
        let count = r.gen_range(1..=t - start);
        let before = movie.payload_bytes_read();
        let block = movie.read_frames(start, count).map_err(|e| e.to_string())?;
        let read = movie.payload_bytes_read() - before;
        ensure(read == (count * c * h * w) as u64, || format!("movie {i}: read {read} payload bytes"))?;
        ensure(block.frames == raw.slice(ndarray::s![start..start + count, .., .., ..]), || {
            format!("movie {i}: frame block differs")
        })?;
    }
    Ok("100 movies byte-exact, payload accounting exact".into())
}

fn collapse_correctness() -> Outcome {
    let mut r = rng(50);
    for i in 0..50 {
        let (h, w) = (r.gen_range(1..20), r.gen_range(1..20));
        let frames = Array4::from_shape_simple_fn((12, 3, h, w), || r.gen::<u8>());
        let collapsed = collapse_time(frames.view());
        ensure(collapsed.data.dim() == (36, h, w), || format!("tensor {i}: shape {:?}", collapsed.data.dim()))?;
        let oracle = Array3::from_shape_fn((36, h, w), |(k, y, x)| frames[[k / 3, k % 3, y, x]]);
        ensure(collapsed.data == oracle, || format!("tensor {i}: differs from reshape oracle"))?;
        let back = expand_time(collapsed).map_err(|e| e.to_string())?;
        ensure(back == frames, || format!("tensor {i}: expand(collapse(x)) != x"))?;
    }
    Ok("50 tensors match oracle, round trip identity".into())
}

fn baseline_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let shape = [SLOTS_PER_DAY, 3, 16, 16];
    let days: Vec<Array4<u8>> = (0..5).map(|d| synth_movie(SynthKind::Random, 40 + d, shape)).collect();
    let mut movies = Vec::new();
    for (d, frames) in days.iter().enumerate() {
        let path = dir.path().join(format!("{d}.tmm"));
        ingest(frames.view(), &MovieMeta::new("City", day_name(d)), &path).map_err(|e| e.to_string())?;
        movies.push(Movie::open(&path).map_err(|e| e.to_string())?);
    }
    let slots: BTreeSet<usize> = (0..SLOTS_PER_DAY).collect();
    let refs: Vec<&Movie> = movies.iter().collect();
    let model = time_slot_average(&refs, &slots).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for slot in 0..SLOTS_PER_DAY {
        let mean = model.mean(slot).map_err(|e| e.to_string())?;
        for ((ch, y, x), &m) in mean.indexed_iter() {
            let brute: f64 = days.iter().map(|d| d[[slot, ch, y, x]] as f64).sum::<f64>() / days.len() as f64;
            worst = worst.max((m - brute).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let mut r = rng(5);
    for _ in 0..3 {
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut r);
        let other = time_slot_average(&shuffled, &slots).map_err(|e| e.to_string())?;
        ensure(other == model, || "model changed under day permutation".into())?;
    }
    Ok(format!("max deviation {worst:e}, permutation invariant"))
}

fn gradient_checks() -> Outcome {
    let seeds = 20;
    let mut worst_kernel = ("", 0.0f64);
    let mut worst_unet = (String::new(), 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..seeds {
        for (name, err) in kernel_checks(seed) {
            if err > worst_kernel.1 {
                worst_kernel = (name, err);
            }
        }
        let check = unet_check(seed);
        let (name, err) = check.worst();
        if err > worst_unet.1 {
            worst_unet = (name.to_string(), err);
        }
        ensure(check.checked * 5 >= (check.checked + check.skipped) * 4, || {
            format!("seed {seed}: {} of {} coordinates skipped", check.skipped, check.checked + check.skipped)
        })?;
        checked += check.checked;
        skipped += check.skipped;
    }
    ensure(worst_kernel.1 < 1e-5, || format!("kernel {} relative error {:e}", worst_kernel.0, worst_kernel.1))?;
    ensure(worst_unet.1 < 1e-4, || format!("U-Net {} relative error {:e}", worst_unet.0, worst_unet.1))?;
    Ok(format!(
        "{seeds} seeds, kernels <= {:.1e} ({}), U-Net <= {:.1e} ({}), {checked} coords checked, {skipped} kink-skipped",
        worst_kernel.1, worst_kernel.0, worst_unet.1, worst_unet.0
    ))
}

fn optimizer_hand_check() -> Outcome {
    let (mut p, mut v) = ([0.0f64], [0.0f64]);
    sgd_update(&mut p, &mut v, &[1.0], 0.02, 0.9, true);
    ensure((p[0] + 0.038).abs() < 1e-15, || format!("Nesterov step moved to {}", p[0]))?;
    ensure(v[0] == 1.0, || format!("velocity {}", v[0]))?;

    let mut r = rng(3);
    let g: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut p: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut v = vec![0.0; 64];
    for _ in 0..3 {
        let expected: Vec<f64> = p.iter().zip(&g).map(|(p, g)| p - 0.02 * g).collect();
        sgd_update(&mut p, &mut v, &g, 0.02, 0.0, false);
        ensure(p == expected, || "momentum 0 differs from vanilla SGD".into())?;
    }
    let cfg = SgdConfig::default();
    let (at4, at5) = (lr_schedule(4, &cfg), lr_schedule(5, &cfg));
    ensure(at4 == 0.02 && at5 == 0.001, || format!("schedule {at4} at epoch 4, {at5} at epoch 5"))?;
    Ok("step -0.038, momentum 0 = vanilla, lr 0.02 -> 0.001 at epoch 5".into())
}

fn overfit_sanity() -> Outcome {
    let (steps, mse) = overfit(500);
    ensure(mse < 1.0, || format!("train MSE {mse:.3} after {steps} steps"))?;
    Ok(format!("train MSE {mse:.3} after {steps} steps"))
}

fn learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (model, sgd, stride, noise) = learning_setup();
    let rep = learning_property(dir.path(), model, &sgd, stride, noise);
    let first = rep.log.first().map(|r| r.train_mse).unwrap_or(f64::NAN);
    let last = rep.log.last().map(|r| r.train_mse).unwrap_or(f64::NAN);
    let detail = format!(
        "U-Net {:.2}, persistence {:.2}, slot average {:.2} (ratio {:.3}), train {first:.2} -> {last:.2}",
        rep.unet,
        rep.persistence,
        rep.slot_average,
        rep.unet / rep.slot_average
    );
    ensure(
        rep.unet < rep.persistence && rep.unet <= 1.1 * rep.slot_average && last <= first,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn mask_correctness() -> Outcome {
    let mut r = rng(20);
    for i in 0..20 {
        let movie = random_movie(&mut r, [6, 3, 12, 12]);
        let threshold: u8 = r.gen();
        let mask = build_mask_from_frames(&[movie.view()], threshold).map_err(|e| e.to_string())?;
        let (t, c, h, w) = movie.dim();
        for y in 0..h {
            for x in 0..w {
                let mut peak = 0u8;
                for f in 0..t {
                    for ch in 0..c {
                        peak = peak.max(movie[[f, ch, y, x]]);
                    }
                }
                ensure(mask.active[[y, x]] == (peak > threshold), || format!("movie {i}: pixel ({y}, {x})"))?;
            }
        }
        let higher = build_mask_from_frames(&[movie.view()], threshold.saturating_add(r.gen_range(1..50)))
            .map_err(|e| e.to_string())?;
        ensure(higher.active.iter().zip(&mask.active).all(|(&hi, &lo)| !hi || lo), || {
            format!("movie {i}: not monotone in threshold")
        })?;
        let once = apply_mask(movie.view(), &mask).map_err(|e| e.to_string())?;
        let twice = apply_mask(once.view(), &mask).map_err(|e| e.to_string())?;
        ensure(once == twice, || format!("movie {i}: apply_mask not idempotent"))?;
    }
    // the file-backed path agrees with the in-memory one
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let movie = random_movie(&mut r, [6, 3, 12, 12]);
    let path = dir.path().join("m.tmm");
    ingest(movie.view(), &MovieMeta::new("City", "2019-01-01"), &path).map_err(|e| e.to_string())?;
    let opened = Movie::open(&path).map_err(|e| e.to_string())?;
    ensure(
        build_mask(&[&opened], 100).map_err(|e| e.to_string())?
            == build_mask_from_frames(&[movie.view()], 100).map_err(|e| e.to_string())?,
        || "file and in-memory masks differ".into(),
    )?;
    Ok("20 movies match brute force, monotone, idempotent".into())
}

fn clamp_round() -> Outcome {
    ensure(quantize(-10.0) == 0 && quantize(300.0) == 255 && quantize(f64::NAN) == 0, || {
        "quantize out of contract".into()
    })?;
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        normalize_output: false,
        ..UNetConfig::default()
    };
    let frames = synth_movie(SynthKind::Random, 2, [CLIP_FRAMES, 3, 8, 8]);
    let clip = clip_at(&frames, "City", "2019-01-01", 0);
    let mut params = UNetParams::<f32>::zeros(cfg).map_err(|e| e.to_string())?;
    params.head.bias = Tensor::full(&[9], -10.0);
    let low = predict(&params, &clip).map_err(|e| e.to_string())?;
    params.head.bias = Tensor::full(&[9], 300.0);
    let high = predict(&params, &clip).map_err(|e| e.to_string())?;
    ensure(low.iter().all(|&v| v == 0) && high.iter().all(|&v| v == 255), || {
        "injected -10/+300 outputs not clamped to 0/255".into()
    })?;
    Ok("-10 -> 0, +300 -> 255".into())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    ensure(first.checkpoint == second.checkpoint, || "checkpoints differ".into())?;
    ensure(first.predictions == second.predictions, || "predictions differ".into())?;
    ensure(first.report == second.report, || "reports differ".into())?;
    Ok(format!(
        "checkpoint {} bytes, {} prediction files, report identical",
        first.checkpoint.len(),
        first.predictions.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("storage round-trip", 10, storage_round_trip),
        ("collapse correctness", 5, collapse_correctness),
        ("baseline oracle equivalence", 10, baseline_oracle),
        ("gradient checks", 60, gradient_checks),
        ("optimizer hand-check", 5, optimizer_hand_check),
        ("overfit sanity", 120, overfit_sanity),
        ("learning property", 600, learning),
        ("mask correctness", 10, mask_correctness),
        ("clamp/round contract", 5, clamp_round),
        ("determinism", 120, determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let (status, detail) = match result {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {budget} s budget")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{status} {name}: {detail} [{:.2} s]", elapsed.as_secs_f64());
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}

//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]`/`[SKIP]` line
//! to stderr (uncaptured) and then asserts.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rockseg::commands::cmd_infer;
use rockseg::config::PipelineConfig;
use rockseg::imaging::{
    extract_patches, isodata_threshold, load_mask, pad_for_tiling, save_grayscale_png, stitch_grids, stitch_patches,
    BinaryMask, BlendWindow, GrayscaleImage, Grid, ProbabilityMap,
};
use rockseg::inference::{binarize, predict_patch};
use rockseg::metrics::{dice, evaluate_set, iou, mae};
use rockseg::model::{build_model, decoder_parameter_count, Backbone, ModelConfig, ParamGroup, WEIGHTS_ENV};
use rockseg::synthetic::{disk_dataset, disk_field};
use rockseg::training::{
    dice_ce_loss, dice_ce_loss_grad, early_stop, fine_tune_records, load_checkpoint, make_batches, plateau_step,
    run_epoch, save_checkpoint, Adam, CheckpointManifest, EpochRecord, FineTuneResult, RunMode, TrainConfig,
    TrainingState, WEIGHTS_FILE,
};

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

/// Runs `check`, prints its verdict and re-raises any failure.
fn criterion(id: u32, title: &str, check: impl FnOnce() -> Result<String, String>) {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    match outcome {
        Ok(detail) => line(&format!("[PASS] criterion {id:>2} {title}: {detail}")),
        Err(why) => {
            line(&format!("[FAIL] criterion {id:>2} {title}: {why}"));
            panic!("criterion {id} failed: {why}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

// --- 1 ---------------------------------------------------------------------

struct Counts {
    inter: u64,
    union: u64,
    pred: u64,
    truth: u64,
    diff: u64,
    total: u64,
}

fn oracle_counts(p: &BinaryMask, t: &BinaryMask) -> Counts {
    let mut c = Counts {
        inter: 0,
        union: 0,
        pred: 0,
        truth: 0,
        diff: 0,
        total: 0,
    };
    let (h, w) = p.shape();
    for r in 0..h {
        for col in 0..w {
            let (a, b) = (p.get(r, col) == 1, t.get(r, col) == 1);
            c.inter += u64::from(a && b);
            c.union += u64::from(a || b);
            c.pred += u64::from(a);
            c.truth += u64::from(b);
            c.diff += u64::from(a != b);
            c.total += 1;
        }
    }
    c
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> BinaryMask {
    let density = rng.random_range(0.0..1.0);
    let cells = (0..n * n).map(|_| u8::from(rng.random::<f64>() < density)).collect();
    BinaryMask::from_vec(n, n, cells).unwrap()
}

#[test]
fn criterion_01_metric_oracle() {
    criterion(1, "metric oracle equivalence", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        let mut pairs = Vec::new();
        for i in 0..1000 {
            let (p, t) = (random_mask(&mut rng, 16), random_mask(&mut rng, 16));
            let c = oracle_counts(&p, &t);
            let (o_iou, o_dice) = if c.union == 0 {
                (1.0, 1.0)
            } else {
                (
                    c.inter as f64 / c.union as f64,
                    2.0 * c.inter as f64 / (c.pred + c.truth) as f64,
                )
            };
            let o_mae = c.diff as f64 / c.total as f64;
            let got = (iou(&p, &t).unwrap(), dice(&p, &t).unwrap(), mae(&p, &t).unwrap());
            for (g, o) in [(got.0, o_iou), (got.1, o_dice), (got.2, o_mae)] {
                worst = worst.max((g - o).abs());
            }
            // dice = 2 iou / (1 + iou) as rationals: 2I/(P+T) against
            // (2I/U) / ((U+I)/U) = 2IU / (U(U+I)), compared by cross-multiplying.
            if c.union > 0 {
                let (lhs_n, lhs_d) = (2 * c.inter, c.pred + c.truth);
                let (rhs_n, rhs_d) = (2 * c.inter * c.union, c.union * (c.union + c.inter));
                ensure(lhs_n * rhs_d == rhs_n * lhs_d, || {
                    format!("pair {i}: identity fails on counts")
                })?;
            }
            let relation = 2.0 * got.0 / (1.0 + got.0);
            ensure((relation - got.1).abs() <= 4.0 * f64::EPSILON, || {
                format!("pair {i}: dice {} vs 2iou/(1+iou) {relation}", got.1)
            })?;
            pairs.push((p, t, format!("p{i}")));
        }
        ensure(worst <= 1e-12, || format!("max oracle deviation {worst:e}"))?;
        let report = evaluate_set(&pairs).unwrap();
        let mean_iou = report.per_image.iter().map(|m| m.iou).sum::<f64>() / 1000.0;
        ensure((report.iou - mean_iou).abs() <= 1e-12, || {
            "aggregate is not the per-image mean".into()
        })?;
        let elapsed = start.elapsed();
        within(elapsed, Duration::from_secs(5))?;
        Ok(format!(
            "1000 pairs, max deviation {worst:e}, identity exact on counts, {elapsed:?}"
        ))
    });
}

// --- 2 ---------------------------------------------------------------------

#[test]
fn criterion_02_tiling_round_trip() {
    criterion(2, "tiling round trip", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut shapes = vec![(17, 23), (1030, 999)];
        while shapes.len() < 50 {
            shapes.push((rng.random_range(17..=1030), rng.random_range(23..=999)));
        }
        for &(h, w) in &shapes {
            let img = Grid::from_fn(h, w, |_, _| f64::from(rng.random::<u8>()) / 255.0);
            let (padded, pad) = pad_for_tiling(&img, 256, 256).unwrap();
            let (patches, grid) = extract_patches(&padded, 256, 256).unwrap();
            let back = stitch_grids(&patches, &grid.with_padding(pad), BlendWindow::Unit).unwrap();
            ensure(back.shape() == (h, w), || {
                format!("{h}x{w} came back {:?}", back.shape())
            })?;
            let exact = back
                .data()
                .iter()
                .zip(img.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(exact, || format!("{h}x{w} not bit-exact"))?;
        }
        let elapsed = start.elapsed();
        within(elapsed, Duration::from_secs(30))?;
        Ok(format!("{} shapes bit-exact, {elapsed:?}", shapes.len()))
    });
}

// --- 3 ---------------------------------------------------------------------

#[test]
fn criterion_03_blend_sanity() {
    criterion(3, "blend sanity", || {
        let mut worst = 0.0f64;
        for (h, w) in [(1000, 1000), (300, 517), (256, 256)] {
            let (padded, pad) = pad_for_tiling(&Grid::filled(h, w, 0.0), 256, 128).unwrap();
            let (patches, grid) = extract_patches(&padded, 256, 128).unwrap();
            let maps = vec![ProbabilityMap::new(Grid::filled(256, 256, 0.7)).unwrap(); patches.len()];
            let out = stitch_patches(&maps, &grid.with_padding(pad), BlendWindow::HannSquared).unwrap();
            ensure(out.shape() == (h, w), || format!("shape {:?}", out.shape()))?;
            worst = out.values().iter().fold(worst, |m, v| m.max((v - 0.7).abs()));
        }
        ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
        Ok(format!("max |out - 0.7| = {worst:e}"))
    });
}

// --- 4 ---------------------------------------------------------------------

/// Class-mean midpoint at level `t`, from a pixel loop.
fn brute_midpoint(pixels: &[u8], t: u8) -> Option<f64> {
    let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
    for &p in pixels {
        if p <= t {
            n0 += 1;
            s0 += u64::from(p);
        } else {
            n1 += 1;
            s1 += u64::from(p);
        }
    }
    (n0 > 0 && n1 > 0).then(|| (s0 as f64 / n0 as f64 + s1 as f64 / n1 as f64) / 2.0)
}

/// Every level whose class-mean midpoint lies within half a level of it.
fn fixed_points(pixels: &[u8]) -> Vec<u8> {
    (0..=255u8)
        .filter(|&t| brute_midpoint(pixels, t).is_some_and(|m| (m - f64::from(t)).abs() <= 0.5))
        .collect()
}

/// The fixed point reached by iterating from the rounded image mean.
fn scan_oracle(pixels: &[u8]) -> Option<u8> {
    let fps = fixed_points(pixels);
    let (lo, hi) = (*pixels.iter().min()?, *pixels.iter().max()?);
    let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / pixels.len() as f64;
    let clamp = |v: f64| (v.round() as i64).clamp(i64::from(lo), i64::from(hi) - 1) as u8;
    let mut t = clamp(mean);
    for _ in 0..256 {
        if fps.contains(&t) {
            return Some(t);
        }
        t = clamp(brute_midpoint(pixels, t)?);
    }
    None
}

#[test]
fn criterion_04_isodata() {
    criterion(4, "IsoData", || {
        let two = GrayscaleImage::from_vec(10, 10, (0..100).map(|i| if i < 50 { 40 } else { 200 }).collect()).unwrap();
        let mid = isodata_threshold(&two).unwrap();
        ensure(mid == 120, || format!("two-delta midpoint {mid}, expected 120"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut multi = 0;
        for i in 0..100 {
            let (h, w) = (rng.random_range(8..64), rng.random_range(8..64));
            let (m0, m1) = (rng.random_range(20.0..120.0), rng.random_range(130.0..235.0));
            let (n0, n1) = (
                Normal::new(m0, rng.random_range(2.0..30.0)).unwrap(),
                Normal::new(m1, rng.random_range(2.0..30.0)).unwrap(),
            );
            let frac = rng.random_range(0.1..0.9);
            let pixels: Vec<u8> = (0..h * w)
                .map(|_| {
                    let v: f64 = if rng.random::<f64>() < frac {
                        n0.sample(&mut rng)
                    } else {
                        n1.sample(&mut rng)
                    };
                    v.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            let img = GrayscaleImage::from_vec(h, w, pixels.clone()).unwrap();
            let t = isodata_threshold(&img).unwrap();
            let m = brute_midpoint(&pixels, t).ok_or_else(|| format!("image {i}: level {t} empties a class"))?;
            ensure((m - f64::from(t)).abs() <= 0.5, || {
                format!("image {i}: t={t} but midpoint {m}")
            })?;
            let oracle = scan_oracle(&pixels).ok_or_else(|| format!("image {i}: oracle found no fixed point"))?;
            ensure(t == oracle, || format!("image {i}: returned {t}, oracle {oracle}"))?;
            multi += usize::from(fixed_points(&pixels).len() > 1);
        }
        Ok(format!(
            "midpoint 120 exact; 100 images match the scan oracle ({multi} with several fixed points)"
        ))
    });
}

// --- 5 ---------------------------------------------------------------------

#[test]
fn criterion_05_freezing() {
    criterion(5, "encoder freezing", || {
        let start = Instant::now();
        let mut model = build_model(&ModelConfig::toy()).unwrap();
        model.freeze_encoders();
        let before = model.params().snapshot();
        let records = disk_dataset(10, 256, 5).unwrap();
        let order: Vec<usize> = (0..10).collect();
        let batches = make_batches(&records, &order, 2, None, 0, 0).unwrap();
        ensure(batches.len() == 5, || format!("{} batches", batches.len()))?;
        let mut adam = Adam::new();
        run_epoch(&mut model, &batches, &mut adam, 1e-3, RunMode::Train, None).unwrap();
        let after = model.params().snapshot();
        let mut changed_decoder = 0;
        for (name, old) in &before {
            let new = &after[name];
            let same = old.iter().zip(new).all(|(a, b)| a.to_bits() == b.to_bits());
            match ParamGroup::of(name) {
                ParamGroup::MaskDecoder => changed_decoder += usize::from(!same),
                _ => ensure(same, || format!("{name} moved"))?,
            }
        }
        ensure(changed_decoder > 0, || "no decoder tensor changed".into())?;
        let elapsed = start.elapsed();
        within(elapsed, Duration::from_secs(60))?;
        Ok(format!(
            "encoders bit-identical, {changed_decoder} decoder tensors updated, {elapsed:?}"
        ))
    });
}

// --- 6 ---------------------------------------------------------------------

#[test]
fn criterion_06_loss_gradient() {
    criterion(6, "loss gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target = BinaryMask::from_vec(8, 8, (0..64).map(|_| u8::from(rng.random::<bool>())).collect()).unwrap();
            let (_, grad) = dice_ce_loss_grad(&logits, &target).unwrap();
            let h = 1e-5;
            for i in 0..64 {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (dice_ce_loss(&up, &target).unwrap() - dice_ce_loss(&dn, &target).unwrap()) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
                worst = worst.max(rel);
            }
        }
        ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
        Ok(format!("max relative error {worst:e} over 5 random 8x8 cases"))
    });
}

// --- 7 ---------------------------------------------------------------------

#[test]
fn criterion_07_scheduler_and_early_stop() {
    criterion(7, "scheduler and early stop", || {
        let cfg = TrainConfig {
            learning_rate: 1e-5,
            scheduler_patience: 3,
            scheduler_factor: 0.5,
            ..TrainConfig::default()
        };
        let mut state = TrainingState::new(&cfg);
        let mut drop_epoch = None;
        for epoch in 1..=4 {
            let out = plateau_step(&mut state, 0.5, &cfg);
            if out.lr_dropped && drop_epoch.is_none() {
                drop_epoch = Some(epoch);
            }
            let want = if epoch < 4 { 1e-5 } else { 5e-6 };
            ensure(state.current_lr == want, || {
                format!("epoch {epoch}: lr {}", state.current_lr)
            })?;
        }
        ensure(drop_epoch == Some(4), || format!("lr dropped at {drop_epoch:?}"))?;

        let cfg = TrainConfig {
            scheduler_patience: 100,
            early_stop_patience: 3,
            ..TrainConfig::default()
        };
        let mut state = TrainingState::new(&cfg);
        let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
        let mut stop_epoch = None;
        for (i, &v) in losses.iter().enumerate() {
            plateau_step(&mut state, v, &cfg);
            if early_stop(&state, cfg.early_stop_patience) {
                stop_epoch = Some(i + 1);
                break;
            }
        }
        ensure(stop_epoch == Some(5), || format!("stopped at {stop_epoch:?}"))?;
        Ok("lr 5e-6 from epoch 4; stop after epoch 5".into())
    });
}

// --- 8 and 10 share one toy run -------------------------------------------

struct ToyRun {
    result: FineTuneResult,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 20,
        workers: 1,
        ..TrainConfig::default()
    }
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let records = disk_dataset(64, 256, 8).unwrap();
        let result = fine_tune_records(records, &ModelConfig::toy(), &toy_config(), dir.path()).unwrap();
        ToyRun {
            result,
            elapsed: start.elapsed(),
            _dir: dir,
        }
    })
}

#[test]
fn criterion_08_toy_convergence() {
    criterion(8, "toy convergence", || {
        let run = toy_run();
        let res = &run.result;
        let mut total = 0.0;
        for r in &res.val {
            let prob = predict_patch(&res.best_model, &r.image, &r.bbox).unwrap();
            total += dice(&binarize(&prob, 0.5), &r.mask).unwrap();
        }
        let val_dice = total / res.val.len() as f64;
        let cfg = toy_config();
        let mut replay = TrainingState::new(&cfg);
        let mut bests = Vec::new();
        for rec in &res.state.history {
            plateau_step(&mut replay, rec.val_loss, &cfg);
            bests.push(replay.best_val_loss);
        }
        ensure(bests.windows(2).all(|w| w[1] <= w[0]), || {
            format!("best_val_loss rose: {bests:?}")
        })?;
        ensure(replay.best_val_loss == res.state.best_val_loss, || {
            "replayed best differs".into()
        })?;
        ensure(
            res.state
                .history
                .iter()
                .all(|r| r.train_loss >= 0.0 && r.val_loss >= 0.0),
            || "negative loss".into(),
        )?;
        ensure(val_dice >= 0.90, || format!("val Dice {val_dice:.4} < 0.90"))?;
        within(run.elapsed, Duration::from_secs(600))?;
        Ok(format!(
            "val Dice {val_dice:.4} over {} patches after {} epochs, best val loss {:.4}, {:?}",
            res.val.len(),
            res.state.history.len(),
            res.state.best_val_loss,
            run.elapsed
        ))
    });
}

// --- 9 ---------------------------------------------------------------------

fn infer_once(image: &Path, checkpoint: &Path, out: &Path) -> (Vec<u8>, Vec<u8>, BinaryMask) {
    let cfg = PipelineConfig {
        out: out.to_path_buf(),
        seed: Some(9),
        ..PipelineConfig::default()
    }
    .finalize()
    .unwrap();
    let report = cmd_infer(&cfg, image, Some(checkpoint)).unwrap();
    assert!(report.failed.is_empty());
    let dir = report.output_dir;
    (
        std::fs::read(dir.join("summary.csv")).unwrap(),
        std::fs::read(dir.join("probability").join("field.csv")).unwrap(),
        load_mask(dir.join("masks").join("field.png")).unwrap(),
    )
}

#[test]
fn criterion_09_end_to_end_inference() {
    criterion(9, "end-to-end shape and determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = disk_field(1000, 1000, 12, 20.0, 60.0, 9);
        let path = dir.path().join("field.png");
        save_grayscale_png(&path, &img).unwrap();
        let mut model = build_model(&ModelConfig {
            seed: 9,
            ..ModelConfig::toy()
        })
        .unwrap();
        model.freeze_encoders();
        let mut state = TrainingState::new(&TrainConfig::default());
        state.history.push(EpochRecord {
            epoch: 1,
            train_loss: 1.0,
            val_loss: 1.0,
            lr: 1e-5,
        });
        let ckpt = dir.path().join("ckpt");
        save_checkpoint(&model, &state, 1, &ckpt).unwrap();
        let start = Instant::now();
        let (sum_a, prob_a, mask_a) = infer_once(&path, &ckpt, &dir.path().join("a"));
        let (sum_b, prob_b, mask_b) = infer_once(&path, &ckpt, &dir.path().join("b"));
        ensure(mask_a.shape() == (1000, 1000), || {
            format!("mask shape {:?}", mask_a.shape())
        })?;
        let rows = prob_a.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        ensure(rows == 1000, || format!("{rows} probability rows"))?;
        ensure(sum_a == sum_b && prob_a == prob_b, || {
            "CSV outputs differ between runs".into()
        })?;
        ensure(mask_a == mask_b, || "masks differ between runs".into())?;
        Ok(format!(
            "1000x1000 in and out, CSVs byte-identical, two runs in {:?}",
            start.elapsed()
        ))
    });
}

// --- 10 --------------------------------------------------------------------

#[test]
fn criterion_10_checkpoint_integrity() {
    criterion(10, "checkpoint integrity", || {
        let run = toy_run();
        let res = &run.result;
        let manifest = CheckpointManifest::read(&res.best_checkpoint).unwrap();
        let history = &res.state.history;
        let argmin = history.iter().enumerate().fold(
            0,
            |best, (i, r)| if r.val_loss < history[best].val_loss { i } else { best },
        );
        let want = history[argmin].epoch;
        ensure(manifest.epoch == want, || {
            format!("manifest epoch {} vs argmin epoch {want}", manifest.epoch)
        })?;
        ensure(
            manifest.val_loss.to_bits() == history[argmin].val_loss.to_bits(),
            || "manifest val_loss differs from history".into(),
        )?;

        let dir = tempfile::tempdir().unwrap();
        let (loaded, state, _) = load_checkpoint(&res.best_checkpoint, Some(&ModelConfig::toy())).unwrap();
        save_checkpoint(&loaded, &state, manifest.epoch, dir.path()).unwrap();
        let (again, state2, manifest2) = load_checkpoint(dir.path(), None).unwrap();
        let a = std::fs::read(res.best_checkpoint.join(WEIGHTS_FILE)).unwrap();
        let b = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        ensure(a == b, || "re-saved weights differ".into())?;
        ensure(
            state == state2 && manifest2.weights_sha256 == manifest.weights_sha256,
            || "state or digest changed".into(),
        )?;
        for ((n, p), (_, q)) in loaded.params().iter().zip(again.params().iter()) {
            let same = p
                .tensor()
                .data()
                .iter()
                .zip(q.tensor().data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same && p.trainable() == q.trainable(), || format!("{n} changed"))?;
        }
        Ok(format!(
            "round trip bit-identical; best epoch {want} is the val-loss argmin"
        ))
    });
}

// --- 11 --------------------------------------------------------------------

#[test]
fn criterion_11_pretrained_trainable_count() {
    let config = ModelConfig::preset(Backbone::PretrainedBase);
    let layout_count = decoder_parameter_count(&config);
    let weights = std::env::var_os(WEIGHTS_ENV).filter(|p| Path::new(p).is_file());
    if weights.is_none() {
        line(&format!(
            "[SKIP] criterion 11 pretrained trainable count: {WEIGHTS_ENV} does not name a weight file; \
             layout-derived decoder count is {layout_count} ({:+.1}% from 6.32e6)",
            (layout_count as f64 / 6.32e6 - 1.0) * 100.0
        ));
        return;
    }
    criterion(11, "pretrained trainable count", || {
        let mut model = build_model(&config).map_err(|e| e.to_string())?;
        model.freeze_encoders();
        let n = model.count_trainable();
        let rel = n as f64 / 6.32e6 - 1.0;
        ensure(rel.abs() <= 0.05, || {
            format!("{n} trainable parameters, {:+.1}% from 6.32e6", rel * 100.0)
        })?;
        Ok(format!("{n} trainable parameters"))
    });
}

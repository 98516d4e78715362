//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 5`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use woundseg::imaging::{decode_gray, encode_gray, BinaryMask};
use woundseg::metrics::{confusion_counts, dice, precision, recall};
use woundseg::model::{drive, EarlyStopper, StopReason};
use woundseg::postprocess::{clean_mask, label_components, Connectivity, PostprocessConfig};
use woundseg::tensor::gradcheck::{Layer, Precision};
use woundseg::tensor::{
    conv2d_forward, conv_macs, depthwise_conv2d_forward, pointwise_conv2d_forward, ConvKind, ConvParams, Tensor,
};

const MIN_VAL_DICE: f64 = 0.90;
const POSTPROCESS_SLACK: f64 = 0.005;
const SAME_PATH_TOLERANCE: f64 = 1e-6;
const GRADCHECK_INSTANCES: u64 = 20;
const SEPARABLE_INSTANCES: u64 = 100;
const SEPARABLE_TOLERANCE: f32 = 1e-5;
const CCL_MASKS: u64 = 1000;
const METRIC_PAIRS: u64 = 500;
const HARMONIC_TOLERANCE: f64 = 1e-12;
const REFERENCE_PARAMS: f64 = 2_141_505.0;
const PARAM_TOLERANCE: f64 = 0.15;
const STOP_STREAMS: u64 = 100;
const STOP_PATIENCE: usize = 100;

type Outcome = Result<String, String>;

fn woundseg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_woundseg"))
        .args(args)
        .env_remove("WOUNDSEG_CONFIG")
        .output()
        .map_err(|e| format!("cannot run woundseg: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "woundseg {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).collect())
        .unwrap_or_default();
    v.sort();
    v.into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap_or_default();
            (p.file_name().map(PathBuf::from).unwrap_or_default(), bytes)
        })
        .collect()
}

struct Pipeline {
    raw_dice: f64,
    post_dice: f64,
    log_best_dice: f64,
    epochs: usize,
    reason: String,
    seconds: f64,
    checkpoint: Vec<u8>,
    log: Vec<u8>,
    outputs: Vec<Vec<(PathBuf, Vec<u8>)>>,
}

fn mean_dice(stdout: &str) -> Result<f64, String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("mean dice: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| "evaluate printed no mean dice".to_string())
}

/// synth, train, predict with and without cleaning, evaluate both.
fn pipeline(root: &Path) -> Result<Pipeline, String> {
    let t0 = Instant::now();
    let data = root.join("data");
    let run = root.join("run");
    woundseg(&[
        "synth",
        "--out",
        s(&data),
        "--count",
        "250",
        "--seed",
        "42",
        "--size",
        "64",
    ])?;
    woundseg(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "model.width_multiplier=0.25",
        "--set",
        "model.input_size=64",
        "--set",
        "train.batch_size=2",
        "--set",
        "train.lr=0.0001",
        "--set",
        "train.patience=30",
        "--set",
        "train.max_epochs=300",
        "--set",
        "train.seed=42",
    ])?;
    let ckpt = run.join("checkpoint.wseg");
    let mut dice = Vec::new();
    let mut outputs = Vec::new();
    for (name, flag) in [("raw", Some("--no-postprocess")), ("clean", None)] {
        let out = root.join(format!("pred_{name}"));
        let mut args = vec![
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ];
        args.extend(flag);
        woundseg(&args)?;
        let eval = woundseg(&[
            "evaluate",
            "--pred",
            s(&out.join("masks")),
            "--gt",
            s(&data.join("masks")),
            "--out",
            s(&root.join(format!("eval_{name}"))),
            "--pred-only",
        ])?;
        dice.push(mean_dice(&eval)?);
        outputs.push(dir_bytes(&out.join("raw")));
        outputs.push(dir_bytes(&out.join("masks")));
    }

    let log_path = run.join("train_log.csv");
    let mut reader = csv::Reader::from_path(&log_path).map_err(|e| format!("reading log: {e}"))?;
    let rows: Vec<csv::StringRecord> = reader.records().filter_map(|r| r.ok()).collect();
    let log_best_dice = rows
        .iter()
        .filter_map(|r| r.get(5)?.parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max);
    let reason = rows.last().and_then(|r| r.get(6)).unwrap_or("").to_string();
    Ok(Pipeline {
        raw_dice: dice[0],
        post_dice: dice[1],
        log_best_dice,
        epochs: rows.len(),
        reason,
        seconds: t0.elapsed().as_secs_f64(),
        checkpoint: std::fs::read(&ckpt).map_err(|e| e.to_string())?,
        log: std::fs::read(&log_path).map_err(|e| e.to_string())?,
        outputs,
    })
}

fn criterion_1(p: &Pipeline) -> Outcome {
    let gap = (p.raw_dice - p.log_best_dice).abs();
    let detail = format!(
        "val dice {:.4} (min {MIN_VAL_DICE}) after {} epochs ({}), {:.0}s; evaluate vs log gap {gap:.1e}",
        p.raw_dice, p.epochs, p.reason, p.seconds
    );
    if p.raw_dice >= MIN_VAL_DICE && gap <= SAME_PATH_TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2(p: &Pipeline) -> Outcome {
    let detail = format!(
        "post-processed dice {:.4} vs raw {:.4} (slack {POSTPROCESS_SLACK})",
        p.post_dice, p.raw_dice
    );
    if p.post_dice >= p.raw_dice - POSTPROCESS_SLACK {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let mut worst = [0.0f64; 2];
    for layer in Layer::ALL {
        for seed in 0..GRADCHECK_INSTANCES {
            for (i, precision) in [Precision::Single, Precision::Double].into_iter().enumerate() {
                let e = layer
                    .check(seed, precision)
                    .map_err(|e| format!("{} seed {seed} {precision:?}: {e}", layer.name()))?;
                worst[i] = worst[i].max(e);
            }
        }
    }
    Ok(format!(
        "{} layer types x {GRADCHECK_INSTANCES} instances; worst rel err f32 {:.2e} (< {:.0e}), f64 {:.2e} (< {:.0e})",
        Layer::ALL.len(),
        worst[0],
        Precision::Single.tolerance(),
        worst[1],
        Precision::Double.tolerance()
    ))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..SEPARABLE_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..3);
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..9);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let dilation = rng.random_range(1..3);
        let (h, w) = (rng.random_range(5..10), rng.random_range(5..10));
        let x = random_tensor(&[n, cin, h, w], &mut rng);
        let dw = random_tensor(&[cin, 1, k, k], &mut rng);
        let pw = random_tensor(&[cout, cin, 1, 1], &mut rng);
        let kk = k * k;
        let mut full = vec![0.0f32; cout * cin * kk];
        for o in 0..cout {
            for i in 0..cin {
                for t in 0..kk {
                    full[(o * cin + i) * kk + t] = pw.data()[o * cin + i] * dw.data()[i * kk + t];
                }
            }
        }
        let full = Tensor::new(&[cout, cin, k, k], full).expect("shape");
        let pad = dilation * (k - 1) / 2;
        let spatial = |p: ConvParams| p.with_stride(stride).with_padding(pad).with_dilation(dilation);
        let fail = |e: woundseg::Error| format!("instance {seed}: {e}");
        let dw_params = spatial(ConvParams::new(dw));
        let pw_params = ConvParams::new(pw);
        let full_params = spatial(ConvParams::new(full));
        let mid = depthwise_conv2d_forward(&x, &dw_params).map_err(fail)?;
        let sep = pointwise_conv2d_forward(&mid, &pw_params).map_err(fail)?;
        let direct = conv2d_forward(&x, &full_params).map_err(fail)?;
        if sep.shape() != direct.shape() {
            return Err(format!(
                "instance {seed}: shapes {:?} vs {:?}",
                sep.shape(),
                direct.shape()
            ));
        }
        let err = sep.max_abs_diff(&direct);
        worst = worst.max(err);
        if err.is_nan() || err >= SEPARABLE_TOLERANCE {
            return Err(format!("instance {seed}: max abs error {err:.2e}"));
        }

        let dw_macs = conv_macs(x.shape(), &dw_params, ConvKind::Depthwise).map_err(fail)? as u128;
        let pw_macs = conv_macs(mid.shape(), &pw_params, ConvKind::Pointwise).map_err(fail)? as u128;
        let full_macs = conv_macs(x.shape(), &full_params, ConvKind::Standard).map_err(fail)? as u128;
        // (dw + pw) / full == 1/out + 1/k², cross-multiplied to stay in integers.
        let (out, kk) = (cout as u128, kk as u128);
        if (dw_macs + pw_macs) * out * kk != full_macs * (kk + out) {
            return Err(format!(
                "instance {seed}: MACs dw {dw_macs} + pw {pw_macs} vs full {full_macs}, out {out}, k² {kk}"
            ));
        }
    }
    Ok(format!(
        "{SEPARABLE_INSTANCES} instances; max abs error {worst:.2e} (< {SEPARABLE_TOLERANCE:.0e}); MAC ratio exact"
    ))
}

/// Iterative flood fill, labels in raster order of each region's first pixel.
fn flood_labels(m: &BinaryMask, conn: Connectivity) -> Vec<u32> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let steps: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    };
    let mut labels = vec![0u32; (w * h) as usize];
    let mut next = 0;
    for start in 0..(w * h) {
        if labels[start as usize] != 0 || !m.get((start % w) as usize, (start / w) as usize) {
            continue;
        }
        next += 1;
        labels[start as usize] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            for &(dx, dy) in steps {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = ny * w + nx;
                if labels[j as usize] == 0 && m.get(nx as usize, ny as usize) {
                    labels[j as usize] = next;
                    stack.push(j);
                }
            }
        }
    }
    labels
}

fn random_mask(rng: &mut ChaCha8Rng, side: usize, density: f64) -> BinaryMask {
    let bits: Vec<u8> = (0..side * side).map(|_| rng.random_bool(density) as u8).collect();
    BinaryMask::new(side, side, bits).expect("size")
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut components = 0;
    for i in 0..CCL_MASKS {
        let density = rng.random_range(0.1..0.9);
        let m = random_mask(&mut rng, 32, density);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let got = label_components(&m, conn);
            let want = flood_labels(&m, conn);
            if got.labels != want {
                return Err(format!("mask {i} ({conn}-connected): partitions differ"));
            }
            components += got.count();
        }
    }
    Ok(format!(
        "{CCL_MASKS} random 32x32 masks, 4- and 8-connected, identical labels ({components} components)"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut harmonic_checked = 0;
    for i in 0..METRIC_PAIRS {
        let (dp, dg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let pred = random_mask(&mut rng, 16, dp);
        let gt = random_mask(&mut rng, 16, dg);
        let c = confusion_counts(&pred, &gt).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            return Err(format!("pair {i}: counts {c:?} vs oracle ({tp}, {fp}, {fn_}, {tn})"));
        }
        let empty = tp + fp + fn_ == 0;
        let ratio = |num: u64, den: u64| {
            if den > 0 {
                num as f64 / den as f64
            } else if empty {
                1.0
            } else {
                0.0
            }
        };
        let want = [
            ratio(tp, tp + fp),
            ratio(tp, tp + fn_),
            ratio(2 * tp, 2 * tp + fp + fn_),
        ];
        let got = [precision(&c), recall(&c), dice(&c)];
        if got != want {
            return Err(format!("pair {i}: scores {got:?} vs oracle {want:?}"));
        }
        let (p, r) = (got[0], got[1]);
        if p > 0.0 && r > 0.0 {
            harmonic_checked += 1;
            let hm = 2.0 * p * r / (p + r);
            if (got[2] - hm).abs() > HARMONIC_TOLERANCE {
                return Err(format!("pair {i}: dice {} vs harmonic mean {hm}", got[2]));
            }
        }
    }
    Ok(format!(
        "{METRIC_PAIRS} random 16x16 pairs match the pixel loop exactly; harmonic mean holds on {harmonic_checked}"
    ))
}

fn criterion_7() -> Outcome {
    let out = woundseg(&["train", "--describe"])?;
    let n: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or("--describe printed no parameter count")?;
    let rel = n / REFERENCE_PARAMS - 1.0;
    let detail = format!("{n} trainable parameters, {:+.2}% from {REFERENCE_PARAMS}", rel * 100.0);
    if rel.abs() <= PARAM_TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stopped = 0;
    for i in 0..STOP_STREAMS {
        let len = rng.random_range(1..600);
        let mut level: f64 = rng.random_range(0.0..1.0);
        let stream: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.3) {
                    level = (rng.random_range(0..50) as f64) / 50.0;
                }
                level
            })
            .collect();
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        let mut expected = None;
        for (j, &m) in stream.iter().enumerate() {
            if m > best {
                best = m;
                last = j + 1;
            } else if j + 1 - last > STOP_PATIENCE {
                expected = Some(j + 1);
                break;
            }
        }
        let mut stopper = EarlyStopper::new(STOP_PATIENCE).map_err(|e| e.to_string())?;
        let run = drive(&mut stopper, len, |e| Ok((stream[e - 1], ()))).map_err(|e| e.to_string())?;
        let got = (run.reason == StopReason::EarlyStop).then_some(run.epochs_run);
        if got != expected {
            return Err(format!("stream {i}: stopped at {got:?}, expected {expected:?}"));
        }
        if let Some(e) = got {
            stopped += 1;
            if e - run.best_epoch != STOP_PATIENCE + 1 {
                return Err(format!("stream {i}: best epoch {} but stop at {e}", run.best_epoch));
            }
        }
    }
    Ok(format!(
        "{STOP_STREAMS} random streams, patience {STOP_PATIENCE}: {stopped} stopped at best epoch + {}, the rest ran out; none early",
        STOP_PATIENCE + 1
    ))
}

fn criterion_9(a: &Pipeline, b: &Pipeline) -> Outcome {
    let mut differ = Vec::new();
    if a.checkpoint != b.checkpoint {
        differ.push("checkpoint");
    }
    if a.log != b.log {
        differ.push("training log");
    }
    if a.outputs != b.outputs {
        differ.push("predicted maps or masks");
    }
    let files: usize = a.outputs.iter().map(Vec::len).sum();
    if differ.is_empty() && files > 0 {
        Ok(format!(
            "checkpoint ({} bytes), log ({} rows) and {files} output files bitwise identical across two runs",
            a.checkpoint.len(),
            a.epochs
        ))
    } else {
        Err(format!("runs differ in: {}", differ.join(", ")))
    }
}

/// A 64x64 disc with a 3-pixel pocket inside and a 2x2 speck far away.
fn criterion_10(root: &Path) -> Outcome {
    let cfg = PostprocessConfig::default();
    let target = BinaryMask::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as f64 - 24.0, y as f64 - 24.0);
        dx * dx + dy * dy <= 14.0 * 14.0
    });
    let mut raw = target.clone();
    for (x, y) in [(24, 24), (25, 24), (24, 25)] {
        raw.set(x, y, false);
    }
    for (x, y) in [(56, 56), (57, 56), (56, 57), (57, 57)] {
        raw.set(x, y, true);
    }
    let lib = clean_mask(&raw, &cfg);
    if lib != target {
        return Err("library post-processing did not restore the target".into());
    }
    let dir = root.join("fig");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let input = dir.join("raw.png");
    encode_gray(&raw.to_gray(), &input).map_err(|e| e.to_string())?;
    let out = root.join("fig_out");
    woundseg(&["postprocess", "--input", s(&input), "--out", s(&out)])?;
    let cli = decode_gray(out.join("raw.png")).map_err(|e| e.to_string())?;
    if cli != target.to_gray() {
        return Err("`woundseg postprocess` output differs from the target".into());
    }
    Ok(format!(
        "raw mask with a 3-px pocket and a 4-px speck ({} fg px) maps to the target exactly",
        raw.count()
    ))
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let scratch = TempDir::new().expect("temp dir");
    let root = scratch.path();

    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, o: Outcome| {
        let (tag, text) = match &o {
            Ok(t) => ("PASS", t),
            Err(t) => ("FAIL", t),
        };
        println!("criterion {n:>2}: {tag}  {text}");
        results.push((n, o));
    };

    if wanted(1) || wanted(2) || wanted(9) {
        let first = pipeline(&root.join("run_a"));
        match &first {
            Ok(p) => {
                if wanted(1) {
                    record(1, criterion_1(p));
                }
                if wanted(2) {
                    record(2, criterion_2(p));
                }
            }
            Err(e) => {
                for n in [1, 2].into_iter().filter(|&n| wanted(n)) {
                    record(n, Err(e.clone()));
                }
            }
        }
        if wanted(9) {
            let second = pipeline(&root.join("run_b"));
            let o = match (&first, &second) {
                (Ok(a), Ok(b)) => criterion_9(a, b),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            };
            record(9, o);
        }
    }
    for (n, f) in [
        (3, criterion_3 as fn() -> Outcome),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ] {
        if wanted(n) {
            record(n, f());
        }
    }
    if wanted(10) {
        record(10, criterion_10(root));
    }

    results.sort_by_key(|(n, _)| *n);
    let failed: Vec<u32> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use woundseg::imaging::{
    crop_bbox, decode_gray, decode_image, encode_gray, encode_image, normalize, overlay_boundary, pad_to_square,
    probability_image, read_bbox_csv, resize, threshold_mask, BinaryMask, GrayImage, ImageRGB, Padded,
};
use woundseg::metrics::evaluate_dataset;
use woundseg::model::{fit, load_checkpoint, Model, ModelConfig, Sample};
use woundseg::postprocess::clean_mask;
use woundseg::synth::{generate_dataset, read_manifest, Split};
use woundseg::Error;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.wseg";
pub const LOG_FILE: &str = "train_log.csv";
const OVERLAY_RGB: [u8; 3] = [0, 255, 0];
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Argument(format!("{} has no usable file name", path.display())).into())
}

/// Files given directly plus image files inside given directories, sorted.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })? {
                let path = entry.with_context(|| format!("listing {}", p.display()))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                    found.push(path);
                }
            }
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Argument(format!("{} does not exist", p.display())).into());
        }
    }
    if out.is_empty() {
        return Err(Error::Argument("no input images found".into()).into());
    }
    Ok(out)
}

/// Images keyed by file stem. Two inputs with one stem are rejected.
fn by_stem(paths: Vec<PathBuf>) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for p in paths {
        let s = stem(&p)?;
        if let Some(prev) = map.insert(s.clone(), p.clone()) {
            return Err(Error::Argument(format!("{} and {} share the name '{s}'", prev.display(), p.display())).into());
        }
    }
    Ok(map)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let rows = generate_dataset(&cfg.synth, cfg.synth_count, out)?;
    let val = rows.iter().filter(|r| r.split == Split::Val.as_str()).count();
    println!(
        "wrote {} samples ({} train, {val} val) to {}",
        rows.len(),
        rows.len() - val,
        out.display()
    );
    Ok(())
}

pub fn prepare(cfg: &RunConfig, images: &Path, bboxes: &Path, masks: Option<&Path>, out: &Path) -> Result<()> {
    let records = read_bbox_csv(bboxes)?;
    if records.is_empty() {
        return Err(Error::Argument(format!("{} has no rows", bboxes.display())).into());
    }
    let size = cfg.prepare.size;
    if size == 0 {
        return Err(Error::Config("prepare.size must be positive".into()).into());
    }
    for r in &records {
        let p = images.join(&r.filename);
        if !p.is_file() {
            return Err(Error::Argument(format!("bbox CSV row {}: image {} not found", r.row, p.display())).into());
        }
    }
    create_dir(&out.join("images"))?;
    if masks.is_some() {
        create_dir(&out.join("masks"))?;
    }
    let mut seen = BTreeMap::<String, usize>::new();
    let manifest = out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).with_context(|| format!("creating {}", manifest.display()))?;
    w.write_record([
        "image", "mask", "split", "source", "row", "crop_x", "crop_y", "crop_w", "crop_h", "offset_x", "offset_y",
        "placed_w", "placed_h",
    ])?;
    for (i, r) in records.iter().enumerate() {
        let row_err = |e: Error| Error::Argument(format!("bbox CSV row {} ({}): {e}", r.row, r.filename));
        let image = decode_image(images.join(&r.filename))?;
        r.bbox.check_within(image.width(), image.height()).map_err(row_err)?;
        let crop = r.bbox.expand(cfg.prepare.margin, image.width(), image.height());
        let patch = crop_bbox(&image, &r.bbox, cfg.prepare.margin)?;
        let padded = pad_to_square(&patch, size);

        let base = stem(Path::new(&r.filename))?;
        let n = seen.entry(base.clone()).or_default();
        *n += 1;
        let name = if *n == 1 {
            format!("{base}.png")
        } else {
            format!("{base}_{}.png", r.row)
        };
        encode_image(&padded.image, out.join("images").join(&name))?;

        let mask_rel = match masks {
            Some(dir) => {
                let mp = dir.join(format!("{base}.png"));
                let mp = if mp.is_file() { mp } else { dir.join(&r.filename) };
                if !mp.is_file() {
                    return Err(
                        Error::Argument(format!("bbox CSV row {}: mask for {} not found", r.row, r.filename)).into(),
                    );
                }
                let mask = threshold_mask(&decode_gray(&mp)?, cfg.post.threshold);
                if (mask.width(), mask.height()) != (image.width(), image.height()) {
                    return Err(row_err(Error::Dimension(format!(
                        "mask is {}x{}, image is {}x{}",
                        mask.width(),
                        mask.height(),
                        image.width(),
                        image.height()
                    )))
                    .into());
                }
                let placed = pad_to_square(&crop_bbox(&mask, &r.bbox, cfg.prepare.margin)?, size);
                encode_gray(&placed.image.to_gray(), out.join("masks").join(&name))?;
                format!("masks/{name}")
            }
            None => String::new(),
        };
        w.write_record([
            format!("images/{name}"),
            mask_rel,
            Split::of(cfg.prepare.seed, i as u64).as_str().to_string(),
            r.filename.clone(),
            r.row.to_string(),
            crop.x_min.to_string(),
            crop.y_min.to_string(),
            crop.width().to_string(),
            crop.height().to_string(),
            padded.offset.0.to_string(),
            padded.offset.1.to_string(),
            padded.placed.0.to_string(),
            padded.placed.1.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "prepared {} patches at {size}x{size} in {}",
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn describe(config: &ModelConfig) -> Result<()> {
    let layout = config.layout()?;
    println!(
        "input {0}x{0}, width multiplier {1}",
        config.input_size, config.width_multiplier
    );
    println!("stem: 3 -> {} (stride 2)", layout.stem);
    println!(
        "{:>5} {:>6} {:>6} {:>6} {:>6} {:>8} {:>6}",
        "block", "in", "hidden", "out", "stride", "dilation", "os"
    );
    for (i, b) in layout.blocks.iter().enumerate() {
        println!(
            "{i:>5} {:>6} {:>6} {:>6} {:>6} {:>8} {:>6}",
            b.in_channels, b.hidden, b.out_channels, b.stride, b.dilation, b.output_stride
        );
    }
    println!(
        "context: {} branches of {} channels (rates {:?}), low-level {} from block {}, refine {}",
        config.spp_rates.len() + 1,
        layout.spp_branch,
        config.spp_rates,
        layout.low_level,
        layout.low_level_block,
        layout.refine
    );
    println!("parameters: {}", Model::build(config, 0)?.parameter_count());
    Ok(())
}

fn load_split(data: &Path, cfg: &ModelConfig, split: Split) -> Result<Vec<Sample>> {
    let manifest = data.join("manifest.csv");
    let rows = read_manifest(&manifest)?;
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.split == split.as_str()) {
        if r.mask.is_empty() {
            return Err(Error::Config(format!("{}: {} has no mask", manifest.display(), r.image)).into());
        }
        let image = decode_image(data.join(&r.image))?;
        let mask = threshold_mask(&decode_gray(data.join(&r.mask))?, woundseg::imaging::DEFAULT_THRESHOLD);
        let n = cfg.input_size;
        for (what, w, h) in [
            ("image", image.width(), image.height()),
            ("mask", mask.width(), mask.height()),
        ] {
            if (w, h) != (n, n) {
                return Err(Error::Dimension(format!("{what} {} is {w}x{h}, model input is {n}x{n}", r.image)).into());
            }
        }
        out.push(Sample {
            id: stem(Path::new(&r.image))?,
            image,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} has no '{}' rows", manifest.display(), split.as_str())).into());
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.model.validate()?;
    let train = load_split(data, &cfg.model, Split::Train)?;
    let val = load_split(data, &cfg.model, Split::Val)?;
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    println!("parameters: {}", model.parameter_count());
    println!("train {} / val {} samples", train.len(), val.len());
    create_dir(out)?;
    std::fs::write(out.join("run_config.txt"), cfg.to_text()).map_err(|e| Error::Io {
        path: out.join("run_config.txt"),
        source: e,
    })?;

    let result = fit(&mut model, &train, &val, &cfg.fit_options(), |l| {
        println!(
            "epoch {:>4}  loss {:.5}  train dice {:.4}  val P {:.4} R {:.4} dice {:.4}",
            l.epoch, l.train.loss, l.train.dice, l.val.precision, l.val.recall, l.val.dice
        );
    })?;

    result.checkpoint.save(out.join(CHECKPOINT_FILE))?;
    let log = out.join(LOG_FILE);
    let mut w = csv::Writer::from_path(&log).with_context(|| format!("creating {}", log.display()))?;
    w.write_record([
        "epoch",
        "loss",
        "train_dice",
        "val_precision",
        "val_recall",
        "val_dice",
        "stop",
    ])?;
    let last = result.history.len();
    for (i, l) in result.history.iter().enumerate() {
        w.write_record([
            l.epoch.to_string(),
            l.train.loss.to_string(),
            l.train.dice.to_string(),
            l.val.precision.to_string(),
            l.val.recall.to_string(),
            l.val.dice.to_string(),
            if i + 1 == last {
                result.reason.to_string()
            } else {
                String::new()
            },
        ])?;
    }
    w.flush()?;
    println!(
        "stopped after epoch {} ({}); best epoch {} with val dice {}",
        result.epochs_run, result.reason, result.best_epoch, result.checkpoint.best_val_dice
    );
    Ok(())
}

/// Probability rendering at the image's own size. Images that are not
/// model-sized are padded (and shrunk if larger), predicted, then mapped back.
fn predict_gray(model: &Model, image: &ImageRGB) -> Result<GrayImage> {
    let n = model.config().input_size;
    if (image.width(), image.height()) == (n, n) {
        return Ok(probability_image(&model.predict(&normalize(image))?, 0)?);
    }
    let padded = pad_to_square(image, n);
    let gray = probability_image(&model.predict(&normalize(&padded.image))?, 0)?;
    let placed = Padded {
        image: gray,
        offset: padded.offset,
        placed: padded.placed,
    }
    .unpad();
    Ok(resize(&placed, image.width(), image.height()))
}

pub struct PredictOptions<'a> {
    pub checkpoint: &'a Path,
    pub images: Vec<PathBuf>,
    pub out: &'a Path,
    pub postprocess: bool,
    pub overlays: bool,
}

pub fn predict(cfg: &RunConfig, opts: PredictOptions) -> Result<()> {
    cfg.post.validate()?;
    let (model, ckpt) = load_checkpoint(opts.checkpoint, cfg.model_overridden.then_some(&cfg.model))?;
    let inputs = by_stem(collect_images(&opts.images)?)?;
    let mut dirs = vec!["raw", "masks"];
    if opts.overlays {
        dirs.push("overlays");
    }
    for d in &dirs {
        create_dir(&opts.out.join(d))?;
    }
    for (name, path) in &inputs {
        let image = decode_image(path)?;
        let gray = predict_gray(&model, &image)?;
        let raw_mask = threshold_mask(&gray, cfg.post.threshold);
        let mask = if opts.postprocess {
            clean_mask(&raw_mask, &cfg.post)
        } else {
            raw_mask
        };
        let file = format!("{name}.png");
        encode_gray(&gray, opts.out.join("raw").join(&file))?;
        encode_gray(&mask.to_gray(), opts.out.join("masks").join(&file))?;
        if opts.overlays {
            encode_image(
                &overlay_boundary(&image, &mask, OVERLAY_RGB)?,
                opts.out.join("overlays").join(&file),
            )?;
        }
    }
    println!(
        "predicted {} images with checkpoint epoch {} into {}",
        inputs.len(),
        ckpt.epoch,
        opts.out.display()
    );
    Ok(())
}

/// Image paths of one manifest split, for `predict --data`.
pub fn split_images(data: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let manifest = data.join("manifest.csv");
    let paths: Vec<PathBuf> = read_manifest(&manifest)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| data.join(r.image))
        .collect();
    if paths.is_empty() {
        return Err(Error::Config(format!("{} has no '{split}' rows", manifest.display())).into());
    }
    Ok(paths)
}

pub fn postprocess(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    cfg.post.validate()?;
    let inputs = by_stem(collect_images(inputs)?)?;
    create_dir(out)?;
    for (name, path) in &inputs {
        let mask = woundseg::postprocess::postprocess_gray(&decode_gray(path)?, &cfg.post)?;
        encode_gray(&mask.to_gray(), out.join(format!("{name}.png")))?;
    }
    println!("cleaned {} masks into {}", inputs.len(), out.display());
    Ok(())
}

fn read_mask(path: &Path, threshold: u8) -> Result<BinaryMask> {
    Ok(threshold_mask(&decode_gray(path)?, threshold))
}

pub fn evaluate(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path, pred_only: bool) -> Result<()> {
    for d in [pred, gt] {
        if !d.is_dir() {
            return Err(Error::Argument(format!("{} is not a directory", d.display())).into());
        }
    }
    let preds = by_stem(collect_images(&[pred.to_path_buf()])?)?;
    let gts = by_stem(collect_images(&[gt.to_path_buf()])?)?;
    let no_gt: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(String::as_str)
        .collect();
    let no_pred: Vec<&str> = if pred_only {
        Vec::new()
    } else {
        gts.keys()
            .filter(|k| !preds.contains_key(*k))
            .map(String::as_str)
            .collect()
    };
    if !no_gt.is_empty() || !no_pred.is_empty() {
        let mut msg = String::from("unmatched files");
        if !no_gt.is_empty() {
            msg += &format!("; no ground truth for: {}", no_gt.join(", "));
        }
        if !no_pred.is_empty() {
            msg += &format!("; no prediction for: {}", no_pred.join(", "));
        }
        return Err(Error::Argument(msg).into());
    }
    let mut pairs = Vec::new();
    for (name, p) in &preds {
        pairs.push((
            name.clone(),
            read_mask(p, cfg.post.threshold)?,
            read_mask(&gts[name], cfg.post.threshold)?,
        ));
    }
    let report = evaluate_dataset(pairs)?;
    create_dir(out)?;
    let csv_path = out.join("report.csv");
    report.write_csv(File::create(&csv_path).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?)?;
    let table = report.text_table();
    let txt_path = out.join("report.txt");
    File::create(&txt_path)
        .and_then(|mut f| f.write_all(table.as_bytes()))
        .map_err(|e| Error::Io {
            path: txt_path,
            source: e,
        })?;
    print!("{table}");
    println!("mean dice: {}", report.mean.dice);
    Ok(())
}

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use log::{info, warn};
use protodiv::config::parse_override;
use protodiv::data_io::{generate_synthetic, load_dataset, write_dataset, Sample, SyntheticSpec};
use protodiv::evaluation::{evaluate, metrics, render_text, render_tsv, score_label_maps, ClassCounts, MetricsRow};
use protodiv::mask_refiner::{
    decode_request, encode_response, nearest_index, threshold, RegionEncoder, StubRegionEncoder,
};
use protodiv::trainer::{train as run_training, TrainOptions};
use protodiv::{Config, Model, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::manifest::RunManifest;
use crate::{
    CliError, CliResult, ConfigArgs, EvalArgs, HeatmapArgs, StubArgs, SweepArgs, Switch, SynthArgs, TrainArgs,
};

const TRAIN_ARTIFACTS: [&str; 5] = [
    "config.toml",
    "train_log.jsonl",
    "epochs.jsonl",
    "best.ckpt",
    "last.ckpt",
];

fn parse_overrides(set: &[String]) -> CliResult<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for s in set {
        match parse_override(s) {
            Ok(o) => out.push(o),
            Err(e) => errors.push(e.to_string()),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Usage(errors.join("\n")))
    }
}

/// Defaults or `--config`, then `--set`, `--seed` and `--crf`, validated.
fn resolve_config(a: &ConfigArgs) -> CliResult<Config> {
    let base = match &a.config {
        Some(p) if !p.is_file() => {
            return Err(CliError::Usage(format!("--config: `{}` does not exist", p.display())));
        }
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut overrides = parse_overrides(&a.set)?;
    if let Some(seed) = a.seed {
        overrides.push(("trainer.seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(crf) = a.crf {
        overrides.push(("crf.enabled".into(), toml::Value::Boolean(crf == Switch::On)));
    }
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(flag: &str, path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{flag}: dataset path `{}` does not exist",
            path.display()
        )))
    }
}

fn load_split(root: &Path, split: &str, required: bool) -> CliResult<Vec<Sample>> {
    let s = load_dataset(root, split)?;
    if required && s.is_empty() {
        return Err(CliError::Usage(format!(
            "--data: no `{split}` images under {}",
            root.join(split).join("img").display()
        )));
    }
    Ok(s)
}

fn class_names(cfg: &Config) -> Vec<String> {
    (0..cfg.bank.num_classes).map(|c| cfg.class_name(c)).collect()
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    require_dir("--data", &a.data)?;
    let train_set = load_split(&a.data, "train", true)?;
    let val = load_split(&a.data, "val", false)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    let manifest = RunManifest::begin("train", &cfg, &a.out);
    info!(
        "training on {} images ({} validation), config {}",
        train_set.len(),
        val.len(),
        &cfg.content_hash()[..12]
    );
    let outcome = run_training(
        Model::new(&cfg)?,
        &train_set,
        (!val.is_empty()).then_some(&val[..]),
        TrainOptions {
            out_dir: Some(a.out.clone()),
            region_encoder: None,
        },
    )?;
    let manifest = manifest.finish(&TRAIN_ARTIFACTS)?;
    let last = outcome.history.last().expect("at least one step");
    println!(
        "trained {} steps over {} epochs; final L_total {:.6}; best epoch {}",
        last.step + 1,
        outcome.epochs.len(),
        last.l_total,
        outcome.best_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    let ckpt = manifest
        .artifacts
        .iter()
        .find(|(f, _)| f == "last.ckpt")
        .expect("listed");
    println!("last.ckpt sha256 {}", ckpt.1);
    Ok(())
}

fn write_tables(out: &Path, stem: &str, rows: &[MetricsRow], names: &[String]) -> CliResult<String> {
    let text = render_text(rows, names);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("{stem}.tsv")), render_tsv(rows, names))?;
    std::fs::write(out.join(format!("{stem}.txt")), &text)?;
    Ok(text)
}

fn read_label_map(path: &Path, h: usize, w: usize) -> CliResult<Vec<usize>> {
    let img = image::open(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
        .to_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(CliError::Runtime(format!(
            "{}: size {}x{} does not match the mask {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.pixels().map(|p| p.0[0] as usize).collect())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    require_dir("--data", &a.data)?;
    let samples = load_split(&a.data, &a.split, true)?;
    if let Some(s) = samples.iter().find(|s| s.mask.is_none()) {
        return Err(CliError::Usage(format!(
            "sample `{}` in split `{}` has no mask",
            s.id, a.split
        )));
    }
    let (row, names, extra) = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            if !ckpt.is_file() {
                return Err(CliError::Usage(format!(
                    "--checkpoint: `{}` does not exist",
                    ckpt.display()
                )));
            }
            let (mut model, _) = Model::load(ckpt)?;
            let overrides = parse_overrides(&a.set)?;
            if let Some((k, _)) = overrides.iter().find(|(k, _)| !k.starts_with("crf.")) {
                return Err(CliError::Usage(format!(
                    "--set: only crf.* keys apply to eval, got `{k}`"
                )));
            }
            model.config = model.config.with_overrides(&overrides)?;
            model.config.validate()?;
            let use_crf = a.crf.map_or(model.config.crf.enabled, |s| s == Switch::On);
            let rep = evaluate(&model, &samples, use_crf, a.batch_size.max(1))?;
            let stem = ckpt
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let row = MetricsRow {
                labels: vec![
                    ("model".into(), stem),
                    ("crf".into(), if use_crf { "on" } else { "off" }.into()),
                ],
                metrics: Some(rep.metrics.clone()),
            };
            let extra = json!({
                "label_accuracy": rep.label_accuracy,
                "evaluated": rep.evaluated,
                "counts": counts_json(&rep.counts),
            });
            (row, class_names(&model.config), extra)
        }
        (None, Some(dir)) => {
            let c = samples[0].labels.len();
            let maps: Vec<Vec<usize>> = samples
                .iter()
                .map(|s| read_label_map(&dir.join(format!("{}.png", s.id)), s.height(), s.width()))
                .collect::<CliResult<_>>()?;
            let pairs: Vec<(&[usize], &[usize])> = maps
                .iter()
                .zip(&samples)
                .map(|(p, s)| (&p[..], &s.mask.as_ref().expect("checked")[..]))
                .collect();
            let (m, counts) = score_label_maps(&pairs, c)?;
            let defaults = Config::default();
            let names = if c == defaults.bank.num_classes {
                class_names(&defaults)
            } else {
                (0..c).map(|k| format!("class{k}")).collect()
            };
            let row = MetricsRow {
                labels: vec![("model".into(), "predictions".into()), ("crf".into(), "-".into())],
                metrics: Some(m),
            };
            (
                row,
                names,
                json!({ "evaluated": samples.len(), "counts": counts_json(&counts) }),
            )
        }
        (None, None) => unreachable!("clap requires one of --checkpoint and --predictions"),
    };
    let rows = [row];
    let text = render_text(&rows, &names);
    if let Some(out) = &a.out {
        write_tables(out, "metrics", &rows, &names)?;
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&extra)?)?;
    }
    print!("{text}");
    Ok(())
}

fn counts_json(counts: &[ClassCounts]) -> Vec<[u64; 3]> {
    counts.iter().map(|c| [c.tp, c.fp, c.fn_]).collect()
}

/// Cached outcome of one sweep cell.
#[derive(Debug, Serialize, Deserialize)]
struct CellResult {
    k: usize,
    lambda_div: f64,
    config_hash: String,
    /// Per class `[tp, fp, fn]` on the evaluation split.
    counts: Vec<[u64; 3]>,
    label_accuracy: f64,
}

enum CellStatus {
    Done(CellResult),
    Failed(String),
    Pending,
}

fn cell_key(cfg: &Config, data: &Path, split: &str) -> String {
    let root = data.canonicalize().unwrap_or_else(|_| data.to_path_buf());
    let mut h = Sha256::new();
    h.update(cfg.content_hash());
    h.update(b"\n");
    h.update(root.to_string_lossy().as_bytes());
    h.update(b"\n");
    h.update(split.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

fn run_cell(cfg: &Config, dir: &Path, train_set: &[Sample], val: &[Sample], test: &[Sample]) -> CliResult<CellResult> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let outcome = run_training(
        Model::new(cfg)?,
        train_set,
        (!val.is_empty()).then_some(val),
        TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            region_encoder: None,
        },
    )?;
    let rep = evaluate(&outcome.best, test, cfg.crf.enabled, cfg.trainer.batch_size)?;
    Ok(CellResult {
        k: cfg.bank.k,
        lambda_div: cfg.trainer.lambda_div,
        config_hash: cfg.content_hash(),
        counts: counts_json(&rep.counts),
        label_accuracy: rep.label_accuracy,
    })
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let base = resolve_config(&a.cfg)?;
    require_dir("--data", &a.data)?;
    let train_set = load_split(&a.data, "train", true)?;
    let val = load_split(&a.data, "val", false)?;
    let test = load_split(&a.data, &a.split, true)?;
    if let Some(s) = test.iter().find(|s| s.mask.is_none()) {
        return Err(CliError::Usage(format!(
            "sample `{}` in split `{}` has no mask",
            s.id, a.split
        )));
    }
    std::fs::create_dir_all(a.out.join("cells"))?;
    let manifest = RunManifest::begin("sweep", &base, &a.out);
    std::fs::write(a.out.join("config.toml"), base.to_toml_string())?;

    let mut fresh = 0;
    let mut rows = Vec::new();
    let mut failed = 0;
    let mut pending = 0;
    for &k in &a.k {
        for &lambda_div in &a.lambda_div {
            let overrides = [
                ("bank.k".to_string(), toml::Value::Integer(k as i64)),
                ("trainer.lambda_div".to_string(), toml::Value::Float(lambda_div)),
            ];
            let status = match base.with_overrides(&overrides).and_then(|c| c.validate().map(|()| c)) {
                Err(e) => CellStatus::Failed(e.to_string()),
                Ok(cfg) => {
                    let dir = a.out.join("cells").join(cell_key(&cfg, &a.data, &a.split));
                    let cached = std::fs::read(dir.join("result.json"))
                        .ok()
                        .and_then(|b| serde_json::from_slice::<CellResult>(&b).ok())
                        .filter(|r| r.config_hash == cfg.content_hash());
                    match cached {
                        Some(r) => {
                            info!("cell k={k} lambda_div={lambda_div}: cached");
                            CellStatus::Done(r)
                        }
                        None if a.max_new_cells.is_some_and(|m| fresh >= m) => CellStatus::Pending,
                        None => {
                            info!("cell k={k} lambda_div={lambda_div}: training");
                            fresh += 1;
                            match run_cell(&cfg, &dir, &train_set, &val, &test) {
                                Ok(r) => {
                                    let tmp = dir.join("result.json.tmp");
                                    std::fs::write(&tmp, serde_json::to_vec_pretty(&r)?)?;
                                    std::fs::rename(&tmp, dir.join("result.json"))?;
                                    CellStatus::Done(r)
                                }
                                Err(CliError::Usage(m) | CliError::Runtime(m)) => CellStatus::Failed(m),
                            }
                        }
                    }
                }
            };
            let (label, m) = match status {
                CellStatus::Done(r) => {
                    let counts: Vec<ClassCounts> = r
                        .counts
                        .iter()
                        .map(|&[tp, fp, fn_]| ClassCounts { tp, fp, fn_ })
                        .collect();
                    ("ok".to_string(), Some(metrics(&counts)))
                }
                CellStatus::Failed(msg) => {
                    warn!("cell k={k} lambda_div={lambda_div} failed: {msg}");
                    failed += 1;
                    ("failed".to_string(), None)
                }
                CellStatus::Pending => {
                    pending += 1;
                    ("pending".to_string(), None)
                }
            };
            rows.push(MetricsRow {
                labels: vec![
                    ("k".into(), k.to_string()),
                    ("lambda_div".into(), format!("{lambda_div:.2}")),
                    ("status".into(), label),
                ],
                metrics: m,
            });
        }
    }
    let text = write_tables(&a.out, "sweep", &rows, &class_names(&base))?;
    manifest.finish(&["config.toml", "sweep.tsv", "sweep.txt"])?;
    print!("{text}");
    if pending > 0 {
        println!("{pending} cells pending; rerun the same command to resume");
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} cells failed", rows.len())));
    }
    Ok(())
}

#[derive(Serialize)]
struct HeatmapEntry {
    file: String,
    sample: String,
    kind: &'static str,
    class: Option<String>,
    prototype: Option<usize>,
    /// Raw values mapped linearly from `range[0]` (black) to `range[1]` (white).
    range: [f64; 2],
}

fn save_heatmap(plane: &[f64], h: usize, w: usize, path: &Path) -> CliResult<[f64; 2]> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = plane[y as usize * w + x as usize];
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        Luma([(255.0 * t).round() as u8])
    });
    img.save(path)?;
    Ok([lo, hi])
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn export_heatmaps(a: &HeatmapArgs) -> CliResult<()> {
    if !a.checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "--checkpoint: `{}` does not exist",
            a.checkpoint.display()
        )));
    }
    require_dir("--data", &a.data)?;
    let (model, _) = Model::load(&a.checkpoint)?;
    let all = load_split(&a.data, &a.split, true)?;
    let selected: Vec<&Sample> = if a.ids.is_empty() {
        all.iter().collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                all.iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| CliError::Usage(format!("--ids: sample `{id}` not found in split `{}`", a.split)))
            })
            .collect::<CliResult<_>>()?
    };
    let cfg = &model.config;
    let bank = &model.bank;
    let alpha = cfg.refiner.alpha;
    let mut entries = Vec::new();
    for s in selected {
        let dir = a.out.join(&s.id);
        std::fs::create_dir_all(&dir)?;
        let images = s.image.clone().reshape(&[1, 3, s.height(), s.width()]);
        let pred = model.predict(&images)?;
        let (h, w) = (pred.fused_cam.dim(2), pred.fused_cam.dim(3));
        let mask = threshold(&pred.fused_cam, alpha)?;
        for c in 0..bank.num_classes {
            let name = cfg.class_name(c);
            let p = dir.join(format!("class_{name}.png"));
            let range = save_heatmap(pred.fused_cam.plane(0, c), h, w, &p)?;
            entries.push(HeatmapEntry {
                file: rel(&a.out, &p),
                sample: s.id.clone(),
                kind: "class_cam",
                class: Some(name.clone()),
                prototype: None,
                range,
            });
            for (u, row) in bank.class_rows(c).enumerate() {
                let p = dir.join(format!("proto_{name}_{u}.png"));
                let range = save_heatmap(pred.prototype_maps[0].plane(0, row), h, w, &p)?;
                entries.push(HeatmapEntry {
                    file: rel(&a.out, &p),
                    sample: s.id.clone(),
                    kind: "prototype",
                    class: Some(name.clone()),
                    prototype: Some(u),
                    range,
                });
            }
            write_mask_and_overlay(s, mask.plane(0, c), h, w, &dir, &name)?;
            for kind in ["mask", "overlay"] {
                entries.push(HeatmapEntry {
                    file: rel(&a.out, &dir.join(format!("{kind}_{name}.png"))),
                    sample: s.id.clone(),
                    kind: if kind == "mask" { "fg_mask" } else { "fg_overlay" },
                    class: Some(name.clone()),
                    prototype: None,
                    range: [0.0, 1.0],
                });
            }
        }
        if let Some(rows) = bank.background_rows() {
            for (u, row) in rows.enumerate() {
                let p = dir.join(format!("proto_background_{u}.png"));
                let range = save_heatmap(pred.prototype_maps[0].plane(0, row), h, w, &p)?;
                entries.push(HeatmapEntry {
                    file: rel(&a.out, &p),
                    sample: s.id.clone(),
                    kind: "prototype",
                    class: Some("background".into()),
                    prototype: Some(u),
                    range,
                });
            }
        }
    }
    let sidecar = json!({
        "checkpoint": a.checkpoint,
        "colormap": "gray-linear",
        "resolution": "stage 1 (a quarter of the input side)",
        "alpha": alpha,
        "entries": entries,
    });
    std::fs::write(a.out.join("heatmaps.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!("wrote {} images to {}", entries.len(), a.out.display());
    Ok(())
}

/// Binary foreground mask (255 = foreground) and a red-tinted overlay on the
/// image resampled to the CAM grid.
fn write_mask_and_overlay(s: &Sample, fg: &[bool], h: usize, w: usize, dir: &Path, name: &str) -> CliResult<()> {
    let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if fg[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    mask.save(dir.join(format!("mask_{name}.png")))?;
    let (ih, iw) = (s.height(), s.width());
    let overlay = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (sy, sx) = (nearest_index(y as usize, ih, h), nearest_index(x as usize, iw, w));
        let px = |c: usize| s.image.data()[(c * ih + sy) * iw + sx];
        let (mut r, mut g, mut b) = (px(0), px(1), px(2));
        if fg[y as usize * w + x as usize] {
            r = 0.5 * r + 0.5;
            g *= 0.5;
            b *= 0.5;
        }
        Rgb([r, g, b].map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8))
    });
    overlay.save(dir.join(format!("overlay_{name}.png")))?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.classes == 0 || a.size < 8 {
        return Err(CliError::Usage("--classes must be >= 1 and --size >= 8".into()));
    }
    let spec = |count: usize, seed: u64, prefix: &str| SyntheticSpec {
        num_classes: a.classes,
        size: a.size,
        count,
        seed,
        classes_per_image: (1, a.classes.min(3)),
        id_prefix: prefix.into(),
        ..SyntheticSpec::default()
    };
    let train_set = generate_synthetic(&spec(a.train, a.seed, "train"))?;
    let val = generate_synthetic(&spec(a.val, a.seed.wrapping_add(1), "val"))?;
    let test = generate_synthetic(&spec(a.test, a.seed.wrapping_add(2), "test"))?;
    write_dataset(&a.out, &[("train", &train_set), ("val", &val), ("test", &test)])?;
    println!(
        "wrote {} train, {} val and {} test images to {}",
        train_set.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn region_encoder_stub(a: &StubArgs) -> CliResult<()> {
    let mut buf = Vec::new();
    std::io::stdin().read_to_end(&mut buf)?;
    let patches = decode_request(&buf)?;
    if let Some(p) = patches.iter().find(|p| p.shape() != [3, a.size, a.size]) {
        return Err(CliError::Runtime(format!(
            "patch shape {:?} does not match --size {}",
            p.shape(),
            a.size
        )));
    }
    let emb = if patches.is_empty() {
        Tensor::zeros(&[0, a.dim])
    } else {
        StubRegionEncoder::new(a.seed, a.size, a.dim).encode_batch(&patches)?
    };
    let mut out = std::io::stdout().lock();
    out.write_all(&encode_response(&emb))?;
    out.flush()?;
    Ok(())
}

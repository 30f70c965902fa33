//! Loss composition, AdamW and the training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::data_io::{stack_batch, Sample};
use crate::diversity::{class_regions, diversity_loss, ClassRegion};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::mask_refiner::{
    contrastive_alignment, extract_regions, region_encode, threshold, ContrastiveSettings, RegionEmbeddings,
    RegionEncoder, StubRegionEncoder, SubprocessRegionEncoder,
};
use crate::model::Model;
use crate::prototype::{classification_loss, ClassificationTarget};
use crate::rng::derived;
use crate::tensor::Tensor;

/// `(lambda_sim, lambda_div, warming_up)` in effect at `step`.
pub fn effective_lambdas(lambda_sim: f64, lambda_div: f64, warmup_steps: usize, step: usize) -> (f64, f64, bool) {
    if step < warmup_steps {
        (0.0, 0.0, true)
    } else {
        (lambda_sim, lambda_div, false)
    }
}

/// `L_cls + lambda_sim * L_sim + lambda_div * L_div` with the warm-up applied.
pub fn total_loss(
    l_cls: f64,
    l_sim: f64,
    l_div: f64,
    lambda_sim: f64,
    lambda_div: f64,
    warmup_steps: usize,
    step: usize,
) -> Result<f64> {
    check_finite(l_cls, l_sim, l_div, step)?;
    let (ls, ld, _) = effective_lambdas(lambda_sim, lambda_div, warmup_steps, step);
    Ok(l_cls + ls * l_sim + ld * l_div)
}

fn check_finite(l_cls: f64, l_sim: f64, l_div: f64, step: usize) -> Result<()> {
    if [l_cls, l_sim, l_div].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "losses at step {step}: L_cls={l_cls}, L_sim={l_sim}, L_div={l_div}"
        )))
    }
}

/// Warm-up length in steps; a negative setting means one epoch.
pub fn resolve_warmup(cfg: &Config, steps_per_epoch: usize) -> usize {
    usize::try_from(cfg.trainer.warmup_steps).unwrap_or(steps_per_epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_sim: f64,
    pub l_div: f64,
    pub l_total: f64,
    pub lambda_sim: f64,
    pub lambda_div: f64,
    pub warmup: bool,
    /// Pre-clipping gradient norm per parameter group.
    pub grad_norms: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub div_classes: Vec<usize>,
    pub no_foreground: bool,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        let t = &cfg.trainer;
        Self::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps, t.weight_decay)
    }

    /// Decay is applied to the weights directly, independent of the gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Region encoder named by the config: the external command when set, else the stub.
pub fn region_encoder_from_config(cfg: &Config) -> Box<dyn RegionEncoder> {
    let r = &cfg.refiner;
    if r.region_encoder_command.is_empty() {
        Box::new(StubRegionEncoder::new(
            r.region_encoder_seed,
            r.region_size,
            r.region_embed_dim,
        ))
    } else {
        Box::new(SubprocessRegionEncoder {
            command: r.region_encoder_command.clone(),
            size: r.region_size,
            dim: r.region_embed_dim,
        })
    }
}

/// Graph handles of the three loss terms for one batch.
pub struct StepLosses {
    pub l_cls: Var,
    pub l_sim: Var,
    pub l_div: Var,
    pub div_classes: Vec<usize>,
    pub no_foreground: bool,
}

/// Build `L_cls`, `L_sim` and `L_div` for a batch.
///
/// Pseudo masks come from the detached fused CAM; `L_div` uses the features
/// of the configured stage over the class regions those masks define.
pub fn batch_losses(
    g: &mut Graph,
    model: &Model,
    vars: &crate::model::ModelVars,
    images: &Tensor,
    labels: &Tensor,
    encoder: &dyn RegionEncoder,
) -> Result<StepLosses> {
    let cfg = &model.config;
    let fw = model.forward(g, vars, images)?;
    let target = ClassificationTarget::new(labels.clone())?;
    let l_cls = classification_loss(g, &fw.activations.per_class, &target)?;
    let (b, c) = (labels.dim(0), labels.dim(1));
    let present: Vec<Vec<usize>> = (0..b)
        .map(|n| (0..c).filter(|&k| labels.data()[n * c + k] == 1.0).collect())
        .collect();
    let cam = g.value(fw.fused.cam).clone();
    let mask = threshold(&cam, cfg.refiner.alpha)?;

    let crops = extract_regions(
        images,
        &mask,
        &present,
        cfg.refiner.crop_mode,
        cfg.refiner.min_component_area,
    )?;
    let emb = RegionEmbeddings {
        fg: region_encode(encoder, &crops.fg)?,
        fg_classes: crops.fg.iter().map(|p| p.class.expect("foreground crop")).collect(),
        bg: region_encode(encoder, &crops.bg)?,
    };
    let settings = ContrastiveSettings {
        temperature: cfg.refiner.infonce_temperature,
        hard_negative_fraction: cfg.refiner.hard_negative_fraction,
    };
    let align = contrastive_alignment(g, &emb, &model.bank, &vars.bank, &vars.projector, &settings)?;

    let stage = cfg.diversity.stage - 1;
    let feats = fw.pyramid.stages[stage];
    let fs = g.shape(feats).to_vec();
    let regions = class_regions(&cam, &mask, &present, (fs[2], fs[3]))?;
    let div = diversity_loss(
        g,
        feats,
        &model.bank,
        &vars.bank,
        stage,
        &regions,
        cfg.diversity.clamp_floor,
    )?;
    Ok(StepLosses {
        l_cls,
        l_sim: align.loss,
        l_div: div.loss,
        div_classes: div.valid_classes,
        no_foreground: align.no_foreground,
    })
}

/// One optimizer step on a batch; returns its report.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &Tensor,
    encoder: &dyn RegionEncoder,
    step: usize,
    epoch: usize,
    warmup_steps: usize,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let losses = batch_losses(&mut g, model, &vars, images, labels, encoder)?;
    let (lc, ls, ld) = (
        g.value(losses.l_cls).item(),
        g.value(losses.l_sim).item(),
        g.value(losses.l_div).item(),
    );
    check_finite(lc, ls, ld, step)?;
    let t = &model.config.trainer;
    let (lambda_sim, lambda_div, warmup) = effective_lambdas(t.lambda_sim, t.lambda_div, warmup_steps, step);
    let sim = g.scale(losses.l_sim, lambda_sim);
    let div = g.scale(losses.l_div, lambda_div);
    let aux = g.add(sim, div);
    let total = g.add(losses.l_cls, aux);
    let l_total = g.value(total).item();

    let mut grads_all = g.backward(total);
    let mut grads: Vec<Tensor> = Vec::new();
    let mut group_sq: BTreeMap<String, f64> = BTreeMap::new();
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, v) in names.iter().zip(vars.all()) {
        let gr = grads_all.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
        if !gr.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}` at step {step}")));
        }
        *group_sq.entry(Model::group_of(name).to_string()).or_default() += gr.data().iter().map(|x| x * x).sum::<f64>();
        grads.push(gr);
    }
    let grad_norm = clip_global_norm(&mut grads, t.grad_clip);
    opt.step(&mut model.tensors_mut(), &grads);
    Ok(LossReport {
        step,
        epoch,
        l_cls: lc,
        l_sim: ls,
        l_div: ld,
        l_total,
        lambda_sim,
        lambda_div,
        warmup,
        grad_norms: group_sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
        grad_norm,
        div_classes: losses.div_classes,
        no_foreground: losses.no_foreground,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: usize,
    pub mean_l_cls: f64,
    pub val_miou: Option<f64>,
    pub val_l_cls: Option<f64>,
    pub best: bool,
}

#[derive(Default)]
pub struct TrainOptions {
    /// Directory for `train_log.jsonl`, `epochs.jsonl`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Overrides the encoder built from the config.
    pub region_encoder: Option<Box<dyn RegionEncoder>>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub history: Vec<LossReport>,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
}

/// Mean classification loss over `samples`.
pub fn mean_classification_loss(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) = stack_batch(&refs)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let fw = model.forward(&mut g, &vars, &images)?;
        let l = classification_loss(&mut g, &fw.activations.per_class, &ClassificationTarget::new(labels)?)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn open_log(out: Option<&PathBuf>, name: &str) -> Result<Option<BufWriter<File>>> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(Some(BufWriter::new(File::create(dir.join(name))?)))
        }
        None => Ok(None),
    }
}

fn log_line<T: Serialize>(w: &mut Option<BufWriter<File>>, rec: &T) -> Result<()> {
    if let Some(w) = w {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
        w.flush()?;
    }
    Ok(())
}

/// Train from `model`'s current weights.
///
/// Batches are drawn from a seed-determined shuffle per epoch. When `val` is
/// given the best epoch is chosen by mIoU if every validation sample has a
/// mask, otherwise by the lowest validation `L_cls`.
pub fn train(mut model: Model, data: &[Sample], val: Option<&[Sample]>, opts: TrainOptions) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let cfg = model.config.clone();
    let t = &cfg.trainer;
    for (index, s) in data.iter().enumerate() {
        if s.labels.len() != cfg.bank.num_classes {
            return Err(Error::Sample {
                index,
                id: s.id.clone(),
                message: format!("{} labels, model has {} classes", s.labels.len(), cfg.bank.num_classes),
            });
        }
        if !s.labels.iter().any(|&b| b) {
            return Err(Error::Sample {
                index,
                id: s.id.clone(),
                message: "training samples need at least one positive label".into(),
            });
        }
    }
    let encoder = opts.region_encoder.unwrap_or_else(|| region_encoder_from_config(&cfg));
    let bs = t.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs);
    let warmup = resolve_warmup(&cfg, steps_per_epoch);
    let mut opt = AdamW::from_config(&cfg);
    let mut step_log = open_log(opts.out_dir.as_ref(), "train_log.jsonl")?;
    let mut epoch_log = open_log(opts.out_dir.as_ref(), "epochs.jsonl")?;
    let val = val.filter(|v| !v.is_empty());
    let by_miou = val.is_some_and(|v| v.iter().all(|s| s.mask.is_some()));

    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0;
    'outer: for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived(t.seed, 100 + epoch as u64));
        let mut cls_sum = 0.0;
        let mut n_steps = 0;
        for idx in order.chunks(bs) {
            if t.max_steps > 0 && step >= t.max_steps {
                break;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let (images, labels) = stack_batch(&refs).map_err(|e| match e {
                Error::Sample { index, id, message } => Error::Sample {
                    index: idx[index],
                    id,
                    message,
                },
                other => other,
            })?;
            let rep = train_step(
                &mut model,
                &mut opt,
                &images,
                &labels,
                encoder.as_ref(),
                step,
                epoch,
                warmup,
            )?;
            log::debug!("step {step}: L_total {:.5}", rep.l_total);
            log_line(&mut step_log, &rep)?;
            cls_sum += rep.l_cls;
            n_steps += 1;
            history.push(rep);
            step += 1;
        }
        if n_steps == 0 {
            break 'outer;
        }
        let mut rec = EpochReport {
            epoch,
            step,
            mean_l_cls: cls_sum / n_steps as f64,
            val_miou: None,
            val_l_cls: None,
            best: false,
        };
        if let Some(v) = val {
            // higher is better for both keys
            let key = if by_miou {
                let EvalReport { metrics, .. } = evaluate(&model, v, false, bs)?;
                rec.val_miou = Some(metrics.miou);
                metrics.miou
            } else {
                let l = mean_classification_loss(&model, v, bs)?;
                rec.val_l_cls = Some(l);
                -l
            };
            if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                best = Some((key, epoch, model.clone()));
                rec.best = true;
            }
        }
        log::info!("epoch {epoch}: mean L_cls {:.5}", rec.mean_l_cls);
        log_line(&mut epoch_log, &rec)?;
        epochs.push(rec);
        if t.max_steps > 0 && step >= t.max_steps {
            break;
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    if let Some(dir) = &opts.out_dir {
        let extra = serde_json::json!({ "best_epoch": best_epoch, "steps": step });
        best_model.save(&dir.join("best.ckpt"), extra.clone())?;
        model.save(&dir.join("last.ckpt"), extra)?;
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        history,
        epochs,
        best_epoch,
    })
}

/// Mean intra-class pairwise `exp(-J)` of the prototype distributions over
/// ground-truth class regions on the diversity stage grid.
///
/// Regions with a single location carry no information and are skipped.
/// Returns `None` when no sample yields a region of two or more locations.
pub fn intra_class_similarity(model: &Model, samples: &[Sample]) -> Result<Option<f64>> {
    let stage = model.config.diversity.stage - 1;
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); model.bank.num_classes];
    for s in samples {
        let Some(mask) = &s.mask else { continue };
        let images = s.image.clone().reshape(&[1, 3, s.height(), s.width()]);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let x = g.constant(images);
        let pyr = crate::encoder::encode(&mut g, x, &model.spec, &vars.encoder)?;
        let feats = pyr.stages[stage];
        let fs = g.shape(feats).to_vec();
        let (gh, gw) = (fs[2], fs[3]);
        let mut cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); model.bank.num_classes];
        for i in 0..gh {
            for j in 0..gw {
                let y = crate::mask_refiner::nearest_index(i, s.height(), gh);
                let x = crate::mask_refiner::nearest_index(j, s.width(), gw);
                cells[mask[y * s.width() + x]].push((i, j));
            }
        }
        for (c, locations) in cells.into_iter().enumerate() {
            if locations.len() < 2 {
                continue;
            }
            let region = ClassRegion {
                class_id: c,
                image_index: 0,
                locations,
            };
            let out = diversity_loss(
                &mut g,
                feats,
                &model.bank,
                &vars.bank,
                stage,
                &[region],
                model.config.diversity.clamp_floor,
            )?;
            if !out.valid_classes.is_empty() {
                per_class[c].push(g.value(out.loss).item());
            }
        }
    }
    let means: Vec<f64> = per_class
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    Ok((!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticSpec};

    #[test]
    fn zero_lambdas_give_cls() {
        assert_eq!(total_loss(0.7, 3.0, 0.9, 0.0, 0.0, 0, 5).unwrap(), 0.7);
    }

    #[test]
    fn warmup_zeroes_auxiliary_terms() {
        assert_eq!(total_loss(0.7, 3.0, 0.9, 0.1, 0.5, 100, 0).unwrap(), 0.7);
        assert_eq!(total_loss(0.7, 3.0, 0.9, 0.1, 0.5, 100, 99).unwrap(), 0.7);
        assert!(total_loss(0.7, 3.0, 0.9, 0.1, 0.5, 100, 100).unwrap() > 0.7);
    }

    #[test]
    fn arithmetic_example() {
        let l = total_loss(1.0, 2.0, 0.5, 0.1, 0.5, 0, 0).unwrap();
        assert!((l - 1.45).abs() < 1e-15);
    }

    #[test]
    fn non_finite_component_aborts() {
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.1, 0.5, 0, 0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            total_loss(1.0, f64::INFINITY, 0.0, 0.1, 0.5, 0, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn adamw_single_parameter_closed_form() {
        // first step: m_hat = g, v_hat = g^2, so the Adam part moves by lr * g / (|g| + eps)
        let (lr, wd, eps) = (0.1, 0.5, 1e-8);
        let w0 = 2.0;
        let grad = 2.0 * w0; // d/dw of w^2
        let mut opt = AdamW::new(lr, 0.9, 0.999, eps, wd);
        let mut p = Tensor::scalar(w0);
        opt.step(&mut [&mut p], &[Tensor::scalar(grad)]);
        let expect = w0 - lr * wd * w0 - lr * grad / (grad.abs() + eps);
        assert!((p.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_independent_of_gradient_scale() {
        let run = |scale: f64| {
            let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0, 0.3);
            let mut p = Tensor::scalar(1.5);
            opt.step(&mut [&mut p], &[Tensor::scalar(scale)]);
            p.item()
        };
        // Adam's normalized step is sign(g) * lr, so only the decay remains after removing it
        assert!((run(1e-3) - run(1e3)).abs() < 1e-12);
        assert!((run(1.0) - (1.5 - 0.1 * 0.3 * 1.5 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 0.0]), Tensor::new(vec![1], vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after: f64 = g
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    fn toy() -> (Config, Vec<Sample>) {
        let mut cfg = Config::default();
        cfg.bank.k = 2;
        cfg.bank.d_proto = 16;
        cfg.refiner.region_embed_dim = 8;
        cfg.refiner.region_size = 8;
        cfg.trainer.learning_rate = 3e-3;
        cfg.trainer.batch_size = 4;
        cfg.trainer.epochs = 50;
        cfg.trainer.max_steps = 0;
        cfg.trainer.warmup_steps = 4;
        let data = generate_synthetic(&SyntheticSpec {
            size: 32,
            count: 8,
            seed: 11,
            ..SyntheticSpec::default()
        })
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn loss_decomposition_and_warmup_boundary() {
        let (mut cfg, data) = toy();
        cfg.trainer.epochs = 3;
        let out = train(Model::new(&cfg).unwrap(), &data, None, TrainOptions::default()).unwrap();
        assert_eq!(out.history.len(), 6);
        for r in &out.history {
            let expect = r.l_cls + r.lambda_sim * r.l_sim + r.lambda_div * r.l_div;
            assert!((r.l_total - expect).abs() < 1e-6);
            assert_eq!(r.warmup, r.step < 4);
        }
        assert_eq!(out.history.iter().position(|r| !r.warmup), Some(4));
    }

    #[test]
    fn classification_loss_decreases() {
        let (mut cfg, data) = toy();
        cfg.trainer.epochs = 100; // 200 steps
        let out = train(Model::new(&cfg).unwrap(), &data, None, TrainOptions::default()).unwrap();
        let first = out.history[0].l_cls;
        let last = out.history.last().unwrap().l_cls;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn same_seed_same_curve() {
        let (mut cfg, data) = toy();
        cfg.trainer.epochs = 3;
        let a = train(Model::new(&cfg).unwrap(), &data, None, TrainOptions::default()).unwrap();
        let b = train(Model::new(&cfg).unwrap(), &data, None, TrainOptions::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn empty_and_unlabeled_sets_rejected() {
        let (cfg, data) = toy();
        assert!(train(Model::new(&cfg).unwrap(), &[], None, TrainOptions::default()).is_err());
        let mut bad = data.clone();
        bad[3].labels = vec![false; 4];
        let err = train(Model::new(&cfg).unwrap(), &bad, None, TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Sample { index: 3, .. }));
    }

    #[test]
    fn intra_class_similarity_in_unit_interval() {
        let (cfg, data) = toy();
        let m = Model::new(&cfg).unwrap();
        // 32x32 gives a 1x1 stage-4 grid: no region has two locations
        assert_eq!(intra_class_similarity(&m, &data).unwrap(), None);
        let big = generate_synthetic(&SyntheticSpec {
            size: 128,
            count: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let v = intra_class_similarity(&m, &big).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

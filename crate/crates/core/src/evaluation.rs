//! Segmentation metrics, report tables and dense-CRF refinement.

use std::fmt::Write as _;

use crate::config::CrfConfig;
use crate::data_io::{stack_batch, Sample};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-class true positives, false positives and false negatives.
pub fn confusion_counts(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Vec<ClassCounts>> {
    if pred.len() != gt.len() {
        return shape_err(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        ));
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {num_classes} classes",
                p.max(g)
            )));
        }
        if p == g {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[g].fn_ += 1;
        }
    }
    Ok(counts)
}

pub fn accumulate(total: &mut [ClassCounts], add: &[ClassCounts]) {
    for (t, a) in total.iter_mut().zip(add) {
        t.tp += a.tp;
        t.fp += a.fp;
        t.fn_ += a.fn_;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_dice: Vec<Option<f64>>,
    pub miou: f64,
    pub mdice: f64,
}

impl SegMetrics {
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.per_class_iou.len())
            .filter(|&c| self.per_class_iou[c].is_none())
            .collect()
    }
}

/// IoU = TP / (TP + FP + FN), Dice = 2TP / (2TP + FP + FN); class means skip empty classes.
pub fn metrics(counts: &[ClassCounts]) -> SegMetrics {
    let mut iou = Vec::with_capacity(counts.len());
    let mut dice = Vec::with_capacity(counts.len());
    for c in counts {
        let union = c.tp + c.fp + c.fn_;
        if union == 0 {
            iou.push(None);
            dice.push(None);
        } else {
            iou.push(Some(c.tp as f64 / union as f64));
            dice.push(Some(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64));
        }
    }
    let mean = |v: &[Option<f64>]| {
        let vals: Vec<f64> = v.iter().flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    SegMetrics {
        miou: mean(&iou),
        mdice: mean(&dice),
        per_class_iou: iou,
        per_class_dice: dice,
    }
}

pub fn dice_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

/// One report line: leading label columns followed by the metrics.
/// Rows without metrics (a failed run, say) render as `n/a`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub labels: Vec<(String, String)>,
    pub metrics: Option<SegMetrics>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn row_cells(row: &MetricsRow, num_classes: usize) -> Vec<String> {
    let mut cells: Vec<String> = row.labels.iter().map(|(_, v)| v.clone()).collect();
    match &row.metrics {
        Some(m) => {
            cells.push(pct(Some(m.miou)));
            cells.push(pct(Some(m.mdice)));
            cells.extend(m.per_class_iou.iter().map(|&v| pct(v)));
            cells.extend(m.per_class_dice.iter().map(|&v| pct(v)));
        }
        None => cells.extend(std::iter::repeat_n(pct(None), 2 + 2 * num_classes)),
    }
    cells
}

fn header(rows: &[MetricsRow], class_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = rows
        .first()
        .map(|r| r.labels.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    h.push("mIoU".into());
    h.push("mDice".into());
    h.extend(class_names.iter().map(|c| format!("IoU_{c}")));
    h.extend(class_names.iter().map(|c| format!("Dice_{c}")));
    h
}

/// Tab-separated table, values in percent with two decimals.
pub fn render_tsv(rows: &[MetricsRow], class_names: &[String]) -> String {
    let mut out = header(rows, class_names).join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&row_cells(r, class_names.len()).join("\t"));
        out.push('\n');
    }
    out
}

/// Parse a table written by [`render_tsv`] back into header and cells.
pub fn parse_tsv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .map(|l| l.split('\t').map(String::from).collect())
        .unwrap_or_default();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    (header, rows)
}

/// Aligned plain-text table grouped as metrics | per-class IoU | per-class Dice.
pub fn render_text(rows: &[MetricsRow], class_names: &[String]) -> String {
    let n_labels = rows.first().map_or(0, |r| r.labels.len());
    let mut head = header(rows, class_names);
    for h in head.iter_mut().skip(n_labels + 2) {
        if let Some(rest) = h.strip_prefix("IoU_").or_else(|| h.strip_prefix("Dice_")) {
            *h = rest.to_string();
        }
    }
    let body: Vec<Vec<String>> = rows.iter().map(|r| row_cells(r, class_names.len())).collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([head[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let nc = class_names.len();
    let sep_after = [n_labels, n_labels + 2, n_labels + 2 + nc];
    let fmt = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if sep_after.contains(&i) && i > 0 {
                s.push_str(" |");
            }
            if i < n_labels {
                let _ = write!(s, "{:<w$} ", c, w = widths[i]);
            } else {
                let _ = write!(s, " {:>w$}", c, w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    let label_w: usize = widths[..n_labels].iter().map(|w| w + 1).sum();
    let metric_w: usize = widths[n_labels..n_labels + 2].iter().map(|w| w + 1).sum();
    let iou_w: usize = widths[n_labels + 2..n_labels + 2 + nc].iter().map(|w| w + 1).sum();
    let _ = writeln!(
        out,
        "{:<lw$} | {:<mw$}| {:<iw$}| Per-class Dice (%)",
        "",
        "Metrics (%)",
        "Per-class IoU (%)",
        lw = label_w,
        mw = metric_w,
        iw = iou_w
    );
    let header_line = fmt(&head);
    let _ = writeln!(out, "{header_line}");
    let _ = writeln!(out, "{}", "-".repeat(header_line.len()));
    for r in &body {
        let _ = writeln!(out, "{}", fmt(r));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: SegMetrics,
    pub counts: Vec<ClassCounts>,
    /// Fraction of `(image, class)` entries whose thresholded probability matches the label.
    pub label_accuracy: f64,
    /// Samples that had a mask and entered the segmentation metrics.
    pub evaluated: usize,
}

/// Segmentation metrics of predicted label maps against masks.
pub fn score_label_maps(pairs: &[(&[usize], &[usize])], num_classes: usize) -> Result<(SegMetrics, Vec<ClassCounts>)> {
    let mut total = vec![ClassCounts::default(); num_classes];
    for (pred, gt) in pairs {
        accumulate(&mut total, &confusion_counts(pred, gt, num_classes)?);
    }
    Ok((metrics(&total), total))
}

/// Segment every sample with `model` and score against the masks present.
pub fn evaluate(model: &Model, samples: &[Sample], use_crf: bool, batch_size: usize) -> Result<EvalReport> {
    let nc = model.bank.num_classes;
    for (index, s) in samples.iter().enumerate() {
        if s.labels.len() != nc {
            return Err(Error::Sample {
                index,
                id: s.id.clone(),
                message: format!("dataset has {} classes, checkpoint {nc}", s.labels.len()),
            });
        }
    }
    let mut total = vec![ClassCounts::default(); nc];
    let (mut hits, mut entries, mut evaluated) = (0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = stack_batch(&refs)?;
        let probs = model.predict(&images)?.class_probs;
        for (n, s) in chunk.iter().enumerate() {
            for (c, &l) in s.labels.iter().enumerate() {
                hits += usize::from((probs.data()[n * nc + c] > 0.5) == l);
                entries += 1;
            }
        }
        if chunk.iter().all(|s| s.mask.is_none()) {
            continue;
        }
        let seg = model.segment(&images, use_crf)?;
        for (s, pred) in chunk.iter().zip(&seg) {
            if let Some(gt) = &s.mask {
                accumulate(&mut total, &confusion_counts(pred, gt, nc)?);
                evaluated += 1;
            }
        }
    }
    Ok(EvalReport {
        metrics: metrics(&total),
        counts: total,
        label_accuracy: hits as f64 / entries.max(1) as f64,
        evaluated,
    })
}

fn check_crf_inputs(image: &Tensor, probs: &Tensor) -> Result<(usize, usize, usize)> {
    if image.ndim() != 3 || image.dim(0) != 3 {
        return shape_err(format!("CRF image must be (3, H, W), got {:?}", image.shape()));
    }
    if probs.ndim() != 3 || probs.dim(1) != image.dim(1) || probs.dim(2) != image.dim(2) {
        return shape_err(format!(
            "CRF probabilities {:?} do not match image {:?}",
            probs.shape(),
            image.shape()
        ));
    }
    let (c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2));
    for p in 0..h * w {
        let s: f64 = (0..c).map(|k| probs.data()[k * h * w + p]).sum();
        if (s - 1.0).abs() > 1e-6 || (0..c).any(|k| probs.data()[k * h * w + p] < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "CRF probabilities at pixel {p} sum to {s}, expected a distribution"
            )));
        }
    }
    Ok((c, h, w))
}

fn argmax_labels(q: &[f64], c: usize, hw: usize) -> Vec<usize> {
    (0..hw)
        .map(|p| (0..c).fold(0, |a, k| if q[k * hw + p] > q[a * hw + p] { k } else { a }))
        .collect()
}

/// Gaussian spatial + bilateral appearance kernel between pixels `i` and `j`.
struct Kernel<'a> {
    cfg: &'a CrfConfig,
    image: &'a Tensor,
    w: usize,
    hw: usize,
}

impl Kernel<'_> {
    fn eval(&self, i: usize, j: usize) -> f64 {
        let (yi, xi) = ((i / self.w) as f64, (i % self.w) as f64);
        let (yj, xj) = ((j / self.w) as f64, (j % self.w) as f64);
        let d2 = (yi - yj).powi(2) + (xi - xj).powi(2);
        let c2: f64 = (0..3)
            .map(|ch| (255.0 * (self.image.data()[ch * self.hw + i] - self.image.data()[ch * self.hw + j])).powi(2))
            .sum();
        let cfg = self.cfg;
        let mut k = 0.0;
        if cfg.spatial_weight != 0.0 {
            k += cfg.spatial_weight * (-d2 / (2.0 * cfg.sigma_spatial.powi(2))).exp();
        }
        if cfg.appearance_weight != 0.0 {
            k += cfg.appearance_weight
                * (-d2 / (2.0 * cfg.sigma_appearance_xy.powi(2)) - c2 / (2.0 * cfg.sigma_color.powi(2))).exp();
        }
        k
    }
}

/// Images up to this many pixels keep the full kernel matrix in memory.
const KERNEL_CACHE_PIXELS: usize = 4096;

/// Mean-field iterations of a fully connected Potts CRF with exact pairwise
/// sums. Returns the marginals after each iteration (the first entry is the
/// normalized unary).
pub fn crf_mean_field(image: &Tensor, probs: &Tensor, cfg: &CrfConfig) -> Result<Vec<Tensor>> {
    let (c, h, w) = check_crf_inputs(image, probs)?;
    let hw = h * w;
    let unary: Vec<f64> = probs.data().iter().map(|&p| p.max(1e-10).ln()).collect();
    let normalize = |logits: &[f64]| {
        let mut q = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|k| logits[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (logits[k * hw + p] - m).exp()).sum();
            for k in 0..c {
                q[k * hw + p] = (logits[k * hw + p] - m).exp() / z;
            }
        }
        q
    };
    let mut q = normalize(&unary);
    let mut history = vec![Tensor::new(vec![c, h, w], q.clone())];
    let kernel = Kernel { cfg, image, w, hw };
    let pairwise = cfg.spatial_weight != 0.0 || cfg.appearance_weight != 0.0;
    let cache: Option<Vec<f32>> = (pairwise && hw <= KERNEL_CACHE_PIXELS).then(|| {
        let mut m = vec![0f32; hw * hw];
        for i in 0..hw {
            for j in i + 1..hw {
                let v = kernel.eval(i, j) as f32;
                m[i * hw + j] = v;
                m[j * hw + i] = v;
            }
        }
        m
    });
    for _ in 0..cfg.iterations {
        let mut logits = unary.clone();
        if pairwise {
            for i in 0..hw {
                let mut msg = vec![0.0; c];
                for j in 0..hw {
                    if i == j {
                        continue;
                    }
                    let kv = match &cache {
                        Some(m) => m[i * hw + j] as f64,
                        None => kernel.eval(i, j),
                    };
                    for (k, mk) in msg.iter_mut().enumerate() {
                        *mk += kv * q[k * hw + j];
                    }
                }
                for (k, mk) in msg.iter().enumerate() {
                    logits[k * hw + i] += mk;
                }
            }
        }
        q = normalize(&logits);
        history.push(Tensor::new(vec![c, h, w], q.clone()));
    }
    Ok(history)
}

/// Refined label map; `iterations == 0` returns the argmax of the inputs.
pub fn crf_refine(image: &Tensor, probs: &Tensor, cfg: &CrfConfig) -> Result<Vec<usize>> {
    let (c, h, w) = check_crf_inputs(image, probs)?;
    if cfg.iterations == 0 {
        return Ok(argmax_labels(probs.data(), c, h * w));
    }
    let history = crf_mean_field(image, probs, cfg)?;
    Ok(argmax_labels(history.last().expect("history").data(), c, h * w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn perfect_prediction() {
        let gt = vec![0, 1, 2, 2, 1, 0];
        let c = confusion_counts(&gt, &gt, 3).unwrap();
        assert!(c.iter().all(|k| k.fp == 0 && k.fn_ == 0));
        let m = metrics(&c);
        assert!(m.per_class_iou.iter().all(|&v| v == Some(1.0)));
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.mdice, 1.0);
    }

    #[test]
    fn disjoint_maps_have_zero_iou() {
        let m = metrics(&confusion_counts(&[0, 0, 0, 0], &[1, 1, 1, 1], 2).unwrap());
        assert_eq!(m.per_class_iou, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn two_by_two_counts_match_pixel_enumeration() {
        let pred = [0, 1, 1, 2];
        let gt = [0, 0, 1, 1];
        let c = confusion_counts(&pred, &gt, 3).unwrap();
        // enumerate: p0 (0,0) TP0; p1 (1,0) FP1 FN0; p2 (1,1) TP1; p3 (2,1) FP2 FN1
        assert_eq!(c[0], ClassCounts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(c[1], ClassCounts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c[2], ClassCounts { tp: 0, fp: 1, fn_: 0 });
    }

    #[test]
    fn half_overlap_squares() {
        // two 4x4 squares on an 8x4 canvas shifted by 2 columns: overlap 8 of 16
        let w = 6;
        let h = 4;
        let mut pred = vec![0; w * h];
        let mut gt = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                pred[y * w + x] = usize::from(x < 4);
                gt[y * w + x] = usize::from(x >= 2);
            }
        }
        let c = confusion_counts(&pred, &gt, 2).unwrap();
        let m = metrics(&c);
        assert!((m.per_class_iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class_dice[1].unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(confusion_counts(&[0, 3], &[0, 1], 2).is_err());
        assert!(confusion_counts(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn empty_class_excluded_from_mean() {
        let m = metrics(&confusion_counts(&[0, 0, 1], &[0, 0, 1], 3).unwrap());
        assert_eq!(m.empty_classes(), vec![2]);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn dice_iou_identity_on_random_maps() {
        let mut r = seeded(3);
        for _ in 0..50 {
            let pred: Vec<usize> = (0..64).map(|_| r.random_range(0..4)).collect();
            let gt: Vec<usize> = (0..64).map(|_| r.random_range(0..4)).collect();
            let m = metrics(&confusion_counts(&pred, &gt, 4).unwrap());
            for (i, d) in m.per_class_iou.iter().zip(&m.per_class_dice) {
                if let (Some(i), Some(d)) = (i, d) {
                    assert!((dice_from_iou(*i) - d).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn published_tum_row_is_self_consistent() {
        let d = dice_from_iou(0.8225);
        assert!((100.0 * d - 90.26).abs() < 0.005 + 1e-9, "{d}");
    }

    #[test]
    fn metrics_are_order_invariant() {
        let mut r = seeded(8);
        let pred: Vec<usize> = (0..40).map(|_| r.random_range(0..3)).collect();
        let gt: Vec<usize> = (0..40).map(|_| r.random_range(0..3)).collect();
        let perm: Vec<usize> = (0..40).map(|i| (i * 17) % 40).collect();
        let p2: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let g2: Vec<usize> = perm.iter().map(|&i| gt[i]).collect();
        assert_eq!(
            metrics(&confusion_counts(&pred, &gt, 3).unwrap()),
            metrics(&confusion_counts(&p2, &g2, 3).unwrap())
        );
    }

    #[test]
    fn tables_render_percentages() {
        let gt = vec![0, 1, 1, 0];
        let m = metrics(&confusion_counts(&gt, &gt, 2).unwrap());
        let rows = vec![MetricsRow {
            labels: vec![("method".into(), "gt".into()), ("crf".into(), "off".into())],
            metrics: Some(m),
        }];
        let names = vec!["TUM".to_string(), "STR".to_string()];
        let tsv = render_tsv(&rows, &names);
        let (h, body) = parse_tsv(&tsv);
        assert_eq!(
            h,
            vec!["method", "crf", "mIoU", "mDice", "IoU_TUM", "IoU_STR", "Dice_TUM", "Dice_STR"]
        );
        assert_eq!(body[0][2], "100.00");
        let text = render_text(&rows, &names);
        assert!(text.contains("Per-class IoU (%)"));
        assert!(text.contains("100.00"));
    }

    #[test]
    fn rows_without_metrics_render_placeholders() {
        let rows = vec![MetricsRow {
            labels: vec![("status".into(), "failed".into())],
            metrics: None,
        }];
        let (h, body) = parse_tsv(&render_tsv(&rows, &["A".to_string()]));
        assert_eq!(h.len(), body[0].len());
        assert!(body[0][1..].iter().all(|c| c == "n/a"));
    }

    fn random_probs(r: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::from_fn(&[c, h, w], |_| r.random_range(0.01..1.0));
        for p in 0..h * w {
            let s: f64 = (0..c).map(|k| t.data()[k * h * w + p]).sum();
            for k in 0..c {
                t.data_mut()[k * h * w + p] /= s;
            }
        }
        t
    }

    #[test]
    fn zero_iterations_is_argmax() {
        let mut r = seeded(2);
        let img = Tensor::from_fn(&[3, 4, 4], |_| r.random_range(0.0..1.0));
        let p = random_probs(&mut r, 3, 4, 4);
        let cfg = CrfConfig {
            iterations: 0,
            ..CrfConfig::default()
        };
        assert_eq!(crf_refine(&img, &p, &cfg).unwrap(), argmax_labels(p.data(), 3, 16));
    }

    #[test]
    fn non_normalized_input_rejected() {
        let img = Tensor::zeros(&[3, 2, 2]);
        let p = Tensor::full(&[2, 2, 2], 0.7);
        assert!(crf_refine(&img, &p, &CrfConfig::default()).is_err());
    }

    #[test]
    fn mean_field_keeps_marginals_normalized() {
        let mut r = seeded(4);
        let img = Tensor::from_fn(&[3, 6, 6], |_| r.random_range(0.0..1.0));
        let p = random_probs(&mut r, 3, 6, 6);
        for q in crf_mean_field(&img, &p, &CrfConfig::default()).unwrap() {
            for px in 0..36 {
                let s: f64 = (0..3).map(|k| q.data()[k * 36 + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smoothing_flips_an_isolated_weak_pixel() {
        // uniform image; class 0 everywhere except one weakly class-1 pixel
        let img = Tensor::full(&[3, 5, 5], 0.5);
        let mut p = Tensor::zeros(&[2, 5, 5]);
        for px in 0..25 {
            p.data_mut()[px] = 0.8;
            p.data_mut()[25 + px] = 0.2;
        }
        p.data_mut()[12] = 0.45;
        p.data_mut()[25 + 12] = 0.55;
        let labels = crf_refine(&img, &p, &CrfConfig::default()).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }
}

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::prototype::{BankVars, PrototypeBank};
use crate::tensor::Tensor;

/// Frozen region embeddings with the class of each foreground crop.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEmbeddings {
    pub fg: Tensor,
    pub fg_classes: Vec<usize>,
    pub bg: Tensor,
}

/// Affine map from region-embedding space into prototype space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub weight: Var,
    pub bias: Var,
}

impl Projector {
    pub fn init<R: Rng + ?Sized>(d_emb: usize, d_proto: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform_fan_in(&[d_emb, d_proto], d_emb, rng),
            bias: Tensor::zeros(&[d_proto]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectorVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ProjectorVars {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("refiner.psi.weight".into(), &self.weight),
            ("refiner.psi.bias".into(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveSettings {
    pub temperature: f64,
    /// Fraction of candidate negatives kept per anchor, hardest first.
    pub hard_negative_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentLoss {
    pub loss: Var,
    pub fg_term: Var,
    pub bg_term: Var,
    /// Set when the batch had no foreground embeddings; the loss is then 0.
    pub no_foreground: bool,
}

/// Keep the `ceil(fraction * n)` largest-logit candidates of one row.
fn hard_negatives(row: &[f64], candidates: &[usize], fraction: f64) -> Vec<usize> {
    let keep = ((candidates.len() as f64 * fraction).ceil() as usize).min(candidates.len());
    let mut sorted = candidates.to_vec();
    // stable sort: ties keep prototype order
    sorted.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    sorted.truncate(keep);
    sorted
}

/// InfoNCE over temperature-scaled cosine logits between projected anchors
/// and every prototype, given each row's positive and candidate-negative columns.
#[allow(clippy::too_many_arguments)]
fn anchored_info_nce(
    g: &mut Graph,
    anchors: &Tensor,
    proj: &ProjectorVars,
    protos_hat: Var,
    settings: &ContrastiveSettings,
    positives: impl Fn(usize) -> Vec<usize>,
    negatives: impl Fn(usize) -> Vec<usize>,
    null_positive: bool,
) -> Var {
    let n = anchors.dim(0);
    if n == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let a = g.constant(anchors.clone());
    let z = g.matmul(a, proj.weight);
    let z = g.add_row_bias(z, proj.bias);
    let zh = g.normalize_rows(z);
    let pt = g.transpose(protos_hat);
    let cos = g.matmul(zh, pt);
    let logits = g.scale(cos, 1.0 / settings.temperature);
    let lv = g.value(logits).clone();
    let cols = lv.dim(1);
    let mut pos_mask = vec![false; n * cols];
    let mut sel_mask = vec![false; n * cols];
    for r in 0..n {
        for j in positives(r) {
            pos_mask[r * cols + j] = true;
            sel_mask[r * cols + j] = true;
        }
        for j in hard_negatives(lv.row(r), &negatives(r), settings.hard_negative_fraction) {
            sel_mask[r * cols + j] = true;
        }
    }
    g.info_nce(logits, pos_mask, sel_mask, null_positive)
}

/// `L_sim = l_fg + l_bg`.
///
/// Foreground anchors take their own class's prototypes as positives and all
/// other prototypes (other classes and background) as negative candidates.
/// Background anchors take the background prototypes as positives and the
/// foreground prototypes as negative candidates; without a background slot
/// they are only repelled (`log(1 + sum exp(negatives))`). Prototypes enter
/// in the shared `d_proto` space, unprojected.
pub fn contrastive_alignment(
    g: &mut Graph,
    emb: &RegionEmbeddings,
    bank: &PrototypeBank,
    bank_vars: &BankVars,
    proj: &ProjectorVars,
    settings: &ContrastiveSettings,
) -> Result<AlignmentLoss> {
    if emb.fg.dim(0) != emb.fg_classes.len() {
        return shape_err(format!(
            "{} foreground embeddings but {} class labels",
            emb.fg.dim(0),
            emb.fg_classes.len()
        ));
    }
    let d_emb = g.shape(proj.weight)[0];
    for t in [&emb.fg, &emb.bg] {
        if t.dim(0) > 0 && t.dim(1) != d_emb {
            return shape_err(format!(
                "embeddings of width {} but projector expects {d_emb}",
                t.dim(1)
            ));
        }
    }
    if let Some(&c) = emb.fg_classes.iter().find(|&&c| c >= bank.num_classes) {
        return shape_err(format!(
            "foreground class {c} outside bank with {} classes",
            bank.num_classes
        ));
    }
    if emb.fg.dim(0) == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(AlignmentLoss {
            loss: zero,
            fg_term: zero,
            bg_term: zero,
            no_foreground: true,
        });
    }
    let np = bank.num_prototypes();
    let nfg = bank.num_foreground();
    let protos_hat = g.normalize_rows(bank_vars.prototypes);

    let fg_term = anchored_info_nce(
        g,
        &emb.fg,
        proj,
        protos_hat,
        settings,
        |r| bank.class_rows(emb.fg_classes[r]).collect(),
        |r| {
            let own = bank.class_rows(emb.fg_classes[r]);
            (0..np).filter(|j| !own.contains(j)).collect()
        },
        false,
    );
    let bg_rows: Vec<usize> = bank.background_rows().map(|r| r.collect()).unwrap_or_default();
    let bg_term = anchored_info_nce(
        g,
        &emb.bg,
        proj,
        protos_hat,
        settings,
        |_| bg_rows.clone(),
        |_| (0..nfg).collect(),
        !bank.background,
    );
    let loss = g.add(fg_term, bg_term);
    Ok(AlignmentLoss {
        loss,
        fg_term,
        bg_term,
        no_foreground: false,
    })
}

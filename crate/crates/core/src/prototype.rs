//! Learnable prototype bank, prototype activation maps and class CAMs.
//!
//! Each of the `C * k` foreground prototypes (plus `k` background rows when
//! enabled) lives in a shared `d_proto` space. A per-stage affine head maps
//! the bank into that stage's feature width; activation maps are temperature
//! scaled cosine similarities between pixel features and projected prototypes.
//! Class CAMs combine a class's `k` maps with softmax attention over each
//! prototype's spatial peak.

use std::path::Path;

use rand::Rng;
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::container::Container;
use crate::encoder::{FeaturePyramid, NUM_STAGES};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub num_classes: usize,
    pub k: usize,
    pub d_proto: usize,
    pub background: bool,
    pub temperatures: [f64; NUM_STAGES],
    /// `(N_p, d_proto)`, rows grouped by class, background slot last.
    pub prototypes: Tensor,
    /// Per stage: weight `(d_proto, d_i)` and bias `(d_i)`.
    pub heads: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct BankVars {
    pub prototypes: Var,
    pub heads: Vec<(Var, Var)>,
}

impl BankVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.prototypes];
        for &(w, b) in &self.heads {
            v.push(w);
            v.push(b);
        }
        v
    }
}

impl PrototypeBank {
    /// Gaussian rows normalized to unit length; heads fan-in uniform with zero bias.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        k: usize,
        d_proto: usize,
        background: bool,
        stage_channels: &[usize; NUM_STAGES],
        temperatures: [f64; NUM_STAGES],
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || k == 0 || d_proto == 0 {
            return Err(Error::InvalidArgument("bank dimensions must be positive".into()));
        }
        if temperatures.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        let rows = (num_classes + usize::from(background)) * k;
        let mut prototypes = Tensor::randn(&[rows, d_proto], rng);
        for r in 0..rows {
            let row = &mut prototypes.data_mut()[r * d_proto..(r + 1) * d_proto];
            let mut n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                row[0] = 1.0;
                n = 1.0;
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let heads = stage_channels
            .iter()
            .map(|&d| (Tensor::uniform_fan_in(&[d_proto, d], d_proto, rng), Tensor::zeros(&[d])))
            .collect();
        Ok(Self {
            num_classes,
            k,
            d_proto,
            background,
            temperatures,
            prototypes,
            heads,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        (self.num_classes + usize::from(self.background)) * self.k
    }

    pub fn num_foreground(&self) -> usize {
        self.num_classes * self.k
    }

    /// Row range of class `c`; `c == num_classes` is the background slot.
    pub fn class_rows(&self, c: usize) -> std::ops::Range<usize> {
        c * self.k..(c + 1) * self.k
    }

    pub fn background_rows(&self) -> Option<std::ops::Range<usize>> {
        self.background.then(|| self.class_rows(self.num_classes))
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("bank.prototypes".to_string(), &self.prototypes)];
        for (i, (w, b)) in self.heads.iter().enumerate() {
            out.push((format!("bank.head{}.weight", i + 1), w));
            out.push((format!("bank.head{}.bias", i + 1), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.prototypes];
        for (w, b) in &mut self.heads {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BankVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BankVars {
            prototypes: leaf(&self.prototypes),
            heads: self.heads.iter().map(|(w, b)| (leaf(w), leaf(b))).collect(),
        }
    }

    /// Check the structural invariants: row count and non-zero rows.
    pub fn check(&self) -> Result<()> {
        if self.prototypes.shape() != [self.num_prototypes(), self.d_proto] {
            return shape_err(format!(
                "prototype matrix {:?} does not match (C + bg) * k = {} rows of width {}",
                self.prototypes.shape(),
                self.num_prototypes(),
                self.d_proto
            ));
        }
        for r in 0..self.num_prototypes() {
            if self.prototypes.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!("prototype row {r} is all zero")));
            }
        }
        Ok(())
    }

    fn metadata(&self) -> serde_json::Value {
        json!({
            "num_classes": self.num_classes,
            "k": self.k,
            "d_proto": self.d_proto,
            "background": self.background,
            "temperatures": self.temperatures,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("prototype-bank", self.metadata());
        for (name, t) in self.named() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.meta;
        let field = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Format(format!("bank metadata lacks `{k}`")))
        };
        let as_usize = |k: &str| -> Result<usize> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("bank metadata `{k}` is not an integer")))
        };
        let temps: Vec<f64> =
            serde_json::from_value(field("temperatures")?.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let heads = (1..=NUM_STAGES)
            .map(|i| {
                Ok((
                    c.get(&format!("bank.head{i}.weight"))?.clone(),
                    c.get(&format!("bank.head{i}.bias"))?.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = Self {
            num_classes: as_usize("num_classes")?,
            k: as_usize("k")?,
            d_proto: as_usize("d_proto")?,
            background: field("background")?
                .as_bool()
                .ok_or_else(|| Error::Format("bank metadata `background` is not a bool".into()))?,
            temperatures: temps
                .try_into()
                .map_err(|_| Error::Format("expected 4 temperatures".into()))?,
            prototypes: c.get("bank.prototypes")?.clone(),
            heads,
        };
        bank.check()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?.expect_kind("prototype-bank")?)
    }
}

/// Per-stage prototype maps, class CAMs and attention weights.
#[derive(Clone, Debug)]
pub struct ActivationSet {
    /// `M_i: (B, N_p, H_i, W_i)`.
    pub per_prototype: [Var; NUM_STAGES],
    /// `G_i: (B, C, H_i, W_i)`.
    pub per_class: [Var; NUM_STAGES],
    /// Per stage `(B, C * k)`: attention of each prototype within its class.
    pub attention: [Var; NUM_STAGES],
}

/// Image-level multi-hot targets `(B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationTarget(Tensor);

impl ClassificationTarget {
    pub fn new(y: Tensor) -> Result<Self> {
        if y.ndim() != 2 {
            return shape_err(format!("targets must be (B, C), got {:?}", y.shape()));
        }
        if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("target entry {v} is not binary")));
        }
        Ok(Self(y))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Project the bank through head `i`: `(N_p, d_i)`.
pub fn project_bank(g: &mut Graph, bank: &BankVars, stage: usize) -> Var {
    let (w, b) = bank.heads[stage];
    let p = g.matmul(bank.prototypes, w);
    g.add_row_bias(p, b)
}

/// `M_i(b, j, x) = cos(f_i(x), phi_i(p_j)) / tau_i` for every stage.
pub fn similarity_maps(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    bank: &PrototypeBank,
    vars: &BankVars,
) -> Result<[Var; NUM_STAGES]> {
    let mut out = Vec::with_capacity(NUM_STAGES);
    for i in 0..NUM_STAGES {
        let f = pyramid.stages[i];
        let d = g.shape(f)[1];
        let head_out = g.shape(vars.heads[i].0)[1];
        if d != head_out {
            return shape_err(format!(
                "stage {} has {d} channels but its prototype head produces {head_out}",
                i + 1
            ));
        }
        let projected = project_bank(g, vars, i);
        let fh = g.normalize_channels(f);
        let ph = g.normalize_rows(projected);
        let cos = g.channel_contract(fh, ph);
        out.push(g.scale(cos, 1.0 / bank.temperatures[i]));
    }
    Ok(out.try_into().expect("four stages"))
}

/// Attention-weighted combination of each class's `k` prototype maps.
///
/// Only the foreground rows take part; background prototypes have no class CAM.
pub fn aggregate_class_cams(
    g: &mut Graph,
    per_prototype: &[Var; NUM_STAGES],
    bank: &PrototypeBank,
) -> Result<ActivationSet> {
    let (c, k) = (bank.num_classes, bank.k);
    let mut per_class = Vec::with_capacity(NUM_STAGES);
    let mut attention = Vec::with_capacity(NUM_STAGES);
    for &m in per_prototype {
        let shape = g.shape(m).to_vec();
        if shape.len() != 4 || shape[1] != bank.num_prototypes() {
            return shape_err(format!(
                "prototype maps {shape:?} do not have {} channels",
                bank.num_prototypes()
            ));
        }
        let b = shape[0];
        let fg = if bank.background { g.slice_axis1(m, 0, c * k) } else { m };
        let peaks = g.spatial_max(fg);
        let grouped = g.reshape(peaks, &[b * c, k]);
        let weights = g.softmax_last(grouped);
        let weights = g.reshape(weights, &[b, c * k]);
        per_class.push(g.group_weighted_sum(fg, weights, k));
        attention.push(weights);
    }
    Ok(ActivationSet {
        per_prototype: *per_prototype,
        per_class: per_class.try_into().expect("four stages"),
        attention: attention.try_into().expect("four stages"),
    })
}

/// Image-level logits of every stage: GAP over each class CAM, `(B, C)`.
pub fn stage_logits(g: &mut Graph, per_class: &[Var; NUM_STAGES]) -> [Var; NUM_STAGES] {
    per_class.map(|gi| g.mean_spatial(gi))
}

/// Sum over stages of the mean BCE-with-logits between `GAP(G_i)` and the targets.
pub fn classification_loss(g: &mut Graph, per_class: &[Var; NUM_STAGES], target: &ClassificationTarget) -> Result<Var> {
    let mut terms = Vec::with_capacity(NUM_STAGES);
    for &gi in per_class {
        let shape = g.shape(gi);
        if shape[..2] != target.tensor().shape()[..] {
            return shape_err(format!(
                "targets {:?} do not match class maps {:?}",
                target.tensor().shape(),
                shape
            ));
        }
        let z = g.mean_spatial(gi);
        terms.push(g.bce_with_logits(z, target.tensor()));
    }
    Ok(g.add_scalars(&terms))
}

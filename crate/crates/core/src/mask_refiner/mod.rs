//! CAM fusion, dynamic-threshold pseudo masks and FG/BG contrastive alignment.

mod contrastive;
mod region_encoder;
mod regions;

pub use contrastive::{
    contrastive_alignment, AlignmentLoss, ContrastiveSettings, Projector, ProjectorVars, RegionEmbeddings,
};
pub use region_encoder::{
    decode_request, decode_response, encode_request, encode_response, region_encode, RegionEncoder, StubRegionEncoder,
    SubprocessRegionEncoder, PROTOCOL_MAGIC, PROTOCOL_VERSION,
};
pub use regions::{extract_regions, nearest as nearest_index, resize_patch, RegionBatch, RegionPatch};

use crate::autograd::{bilinear_forward, Graph, Var};
use crate::encoder::NUM_STAGES;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Fused class CAM `(B, C, H_f, W_f)` at stage-1 resolution.
#[derive(Clone, Copy, Debug)]
pub struct FusedCam {
    pub cam: Var,
    pub weights: [f64; NUM_STAGES],
}

/// Normalize fusion weights to sum to one; negative or all-zero weights are rejected.
pub fn normalize_weights(weights: &[f64; NUM_STAGES]) -> Result<[f64; NUM_STAGES]> {
    if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "fusion weight {w} is negative or non-finite"
        )));
    }
    let s: f64 = weights.iter().sum();
    if s <= 0.0 {
        return Err(Error::InvalidArgument("fusion weights sum to zero".into()));
    }
    Ok(weights.map(|w| w / s))
}

/// `cam = sum_i w_i * upsample(G_i)` with bilinear resampling to the first stage's grid.
pub fn fuse_cams(g: &mut Graph, per_class: &[Var; NUM_STAGES], weights: &[f64; NUM_STAGES]) -> Result<FusedCam> {
    let w = normalize_weights(weights)?;
    let target = g.shape(per_class[0]).to_vec();
    if target.len() != 4 {
        return shape_err(format!("class maps must be 4-d, got {target:?}"));
    }
    let mut terms = Vec::with_capacity(NUM_STAGES);
    for (i, &gi) in per_class.iter().enumerate() {
        let s = g.shape(gi);
        if s[..2] != target[..2] {
            return shape_err(format!("stage {} class maps {s:?} disagree with {target:?}", i + 1));
        }
        let up = if s[2] == target[2] && s[3] == target[3] {
            gi
        } else {
            g.upsample_bilinear(gi, target[2], target[3])
        };
        terms.push(g.scale(up, w[i]));
    }
    Ok(FusedCam {
        cam: g.add_scalars(&terms),
        weights: w,
    })
}

/// Value-only fusion of plain tensors, same rule as [`fuse_cams`].
pub fn fuse_cam_values(per_class: &[Tensor; NUM_STAGES], weights: &[f64; NUM_STAGES]) -> Result<Tensor> {
    let w = normalize_weights(weights)?;
    let (h, wd) = (per_class[0].dim(2), per_class[0].dim(3));
    let mut out = Tensor::zeros(&[per_class[0].dim(0), per_class[0].dim(1), h, wd]);
    for (i, gi) in per_class.iter().enumerate() {
        let up = bilinear_forward(gi, h, wd);
        for (o, v) in out.data_mut().iter_mut().zip(up.data()) {
            *o += w[i] * v;
        }
    }
    Ok(out)
}

/// Per image-class foreground indicators from dynamic thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    /// `(B, C, H, W)` flattened row-major.
    pub fg: Vec<bool>,
    pub shape: [usize; 4],
    /// One threshold per `(image, class)`.
    pub thresholds: Vec<f64>,
    pub alpha: f64,
}

impl PseudoMask {
    pub fn is_fg(&self, b: usize, c: usize, y: usize, x: usize) -> bool {
        let [_, cn, h, w] = self.shape;
        self.fg[((b * cn + c) * h + y) * w + x]
    }

    pub fn is_bg(&self, b: usize, c: usize, y: usize, x: usize) -> bool {
        !self.is_fg(b, c, y, x)
    }

    pub fn plane(&self, b: usize, c: usize) -> &[bool] {
        let [_, cn, h, w] = self.shape;
        let off = (b * cn + c) * h * w;
        &self.fg[off..off + h * w]
    }

    pub fn threshold(&self, b: usize, c: usize) -> f64 {
        self.thresholds[b * self.shape[1] + c]
    }

    pub fn fg_count(&self) -> usize {
        self.fg.iter().filter(|&&f| f).count()
    }
}

/// `t = alpha * max_x cam(x)` per image and class; `fg(x) = cam(x) >= t`.
///
/// The peak is taken over the positive part of the map, so a class whose
/// CAM is nowhere positive gets `t = 0` and an empty foreground.
pub fn threshold(cam: &Tensor, alpha: f64) -> Result<PseudoMask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if cam.ndim() != 4 {
        return shape_err(format!("cam must be (B, C, H, W), got {:?}", cam.shape()));
    }
    let shape = [cam.dim(0), cam.dim(1), cam.dim(2), cam.dim(3)];
    let hw = shape[2] * shape[3];
    let mut fg = Vec::with_capacity(cam.len());
    let mut thresholds = Vec::with_capacity(shape[0] * shape[1]);
    for plane in cam.data().chunks(hw) {
        let peak = plane.iter().copied().fold(0.0, f64::max);
        let t = alpha * peak;
        thresholds.push(t);
        fg.extend(plane.iter().map(|&v| peak > 0.0 && v >= t));
    }
    Ok(PseudoMask {
        fg,
        shape,
        thresholds,
        alpha,
    })
}

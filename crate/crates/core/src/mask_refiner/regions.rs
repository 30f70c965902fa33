use crate::autograd::bilinear_forward;
use crate::config::CropMode;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::PseudoMask;

/// A masked crop of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPatch {
    pub image_index: usize,
    /// Foreground class, `None` for background crops.
    pub class: Option<usize>,
    /// Inclusive-exclusive `(y0, x0, y1, x1)` in image pixels.
    pub bbox: (usize, usize, usize, usize),
    /// `(3, y1 - y0, x1 - x0)` with pixels outside the region zeroed.
    pub pixels: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionBatch {
    pub fg: Vec<RegionPatch>,
    pub bg: Vec<RegionPatch>,
}

impl RegionBatch {
    pub fn fg_empty(&self) -> bool {
        self.fg.is_empty()
    }

    pub fn bg_empty(&self) -> bool {
        self.bg.is_empty()
    }
}

/// Nearest-neighbour source index for resampling `in_len` cells to `out_len`.
pub fn nearest(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

fn crop(image: &Tensor, b: usize, region: &[bool], w: usize, bbox: (usize, usize, usize, usize)) -> Tensor {
    let (y0, x0, y1, x1) = bbox;
    let (ch, cw) = (y1 - y0, x1 - x0);
    let h = image.dim(2);
    let mut data = vec![0.0; 3 * ch * cw];
    for c in 0..3 {
        for y in y0..y1 {
            for x in x0..x1 {
                if region[y * w + x] {
                    data[(c * ch + y - y0) * cw + x - x0] = image.data()[((b * 3 + c) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![3, ch, cw], data)
}

fn bbox_of(region: &[bool], w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in region.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / w, i % w);
        bb = Some(match bb {
            None => (y, x, y + 1, x + 1),
            Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y + 1), d.max(x + 1)),
        });
    }
    bb
}

/// 4-connected components of `region`, in raster order of their first pixel.
fn components(region: &[bool], h: usize, w: usize) -> Vec<Vec<bool>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !region[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = vec![false; h * w];
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            comp[p] = true;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if region[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn push_crops(
    out: &mut Vec<RegionPatch>,
    image: &Tensor,
    b: usize,
    class: Option<usize>,
    region: &[bool],
    mode: CropMode,
    min_area: usize,
) {
    let (h, w) = (image.dim(2), image.dim(3));
    let parts = match mode {
        CropMode::Region => vec![region.to_vec()],
        CropMode::Components => components(region, h, w)
            .into_iter()
            .filter(|c| c.iter().filter(|&&m| m).count() >= min_area)
            .collect(),
    };
    for part in parts {
        if let Some(bbox) = bbox_of(&part, w) {
            out.push(RegionPatch {
                image_index: b,
                class,
                bbox,
                pixels: crop(image, b, &part, w, bbox),
            });
        }
    }
}

/// Crop foreground regions of each image's present classes, and each
/// image's background (pixels in no present class's foreground).
///
/// The mask is resampled to image resolution by nearest neighbour. Empty
/// regions yield no crop.
pub fn extract_regions(
    image: &Tensor,
    mask: &PseudoMask,
    present: &[Vec<usize>],
    mode: CropMode,
    min_area: usize,
) -> Result<RegionBatch> {
    if image.ndim() != 4 || image.dim(1) != 3 {
        return shape_err(format!("image must be (B, 3, H, W), got {:?}", image.shape()));
    }
    let (bs, h, w) = (image.dim(0), image.dim(2), image.dim(3));
    let [mb, mc, mh, mw] = mask.shape;
    if mb != bs || present.len() != bs {
        return shape_err(format!(
            "mask batch {mb} / labels {} differ from image batch {bs}",
            present.len()
        ));
    }
    let rows: Vec<usize> = (0..h).map(|y| nearest(y, mh, h)).collect();
    let cols: Vec<usize> = (0..w).map(|x| nearest(x, mw, w)).collect();
    let mut batch = RegionBatch::default();
    for (b, classes) in present.iter().enumerate() {
        let mut union = vec![false; h * w];
        for &c in classes {
            if c >= mc {
                return shape_err(format!("class {c} outside mask with {mc} classes"));
            }
            let plane = mask.plane(b, c);
            let region: Vec<bool> = (0..h * w).map(|i| plane[rows[i / w] * mw + cols[i % w]]).collect();
            for (u, &r) in union.iter_mut().zip(&region) {
                *u |= r;
            }
            push_crops(&mut batch.fg, image, b, Some(c), &region, mode, min_area);
        }
        let bg: Vec<bool> = union.iter().map(|&u| !u).collect();
        push_crops(&mut batch.bg, image, b, None, &bg, mode, min_area);
    }
    Ok(batch)
}

/// Bilinear resize of a `(3, h, w)` patch to `(3, size, size)`.
pub fn resize_patch(patch: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = (patch.dim(0), patch.dim(1), patch.dim(2));
    let t = patch.clone().reshape(&[1, c, h, w]);
    bilinear_forward(&t, size, size).reshape(&[c, size, size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mask_from(plane: Vec<bool>, h: usize, w: usize) -> PseudoMask {
        PseudoMask {
            fg: plane,
            shape: [1, 1, h, w],
            thresholds: vec![0.5],
            alpha: 0.5,
        }
    }

    #[test]
    fn full_foreground_takes_whole_image() {
        let img = Tensor::randn(&[1, 3, 8, 8], &mut seeded(1));
        let m = mask_from(vec![true; 16], 4, 4);
        let r = extract_regions(&img, &m, &[vec![0]], CropMode::Region, 1).unwrap();
        assert_eq!(r.fg.len(), 1);
        assert_eq!(r.fg[0].pixels, img.clone().reshape(&[3, 8, 8]));
        assert!(r.bg_empty());
    }

    #[test]
    fn empty_foreground_gives_no_fg_patch() {
        let img = Tensor::full(&[1, 3, 8, 8], 0.5);
        let m = mask_from(vec![false; 64], 8, 8);
        let r = extract_regions(&img, &m, &[vec![0]], CropMode::Region, 1).unwrap();
        assert!(r.fg_empty());
        assert_eq!(r.bg.len(), 1);
        assert_eq!(r.bg[0].bbox, (0, 0, 8, 8));
    }

    #[test]
    fn square_foreground_bbox_matches_pixel_scan() {
        let img = Tensor::full(&[1, 3, 16, 16], 1.0);
        let mut plane = vec![false; 256];
        for y in 5..9 {
            for x in 10..14 {
                plane[y * 16 + x] = true;
            }
        }
        // oracle: scan for extreme coordinates
        let ys: Vec<usize> = (0..256).filter(|&i| plane[i]).map(|i| i / 16).collect();
        let xs: Vec<usize> = (0..256).filter(|&i| plane[i]).map(|i| i % 16).collect();
        let expect = (
            *ys.iter().min().unwrap(),
            *xs.iter().min().unwrap(),
            ys.iter().max().unwrap() + 1,
            xs.iter().max().unwrap() + 1,
        );
        let m = mask_from(plane, 16, 16);
        let r = extract_regions(&img, &m, &[vec![0]], CropMode::Region, 1).unwrap();
        assert_eq!(r.fg[0].bbox, expect);
        assert_eq!(r.fg[0].pixels.shape(), &[3, 4, 4]);
        // background crop keeps the full extent with the square zeroed
        let bg = &r.bg[0];
        assert_eq!(bg.bbox, (0, 0, 16, 16));
        assert_eq!(bg.pixels.data()[5 * 16 + 10], 0.0);
        assert_eq!(bg.pixels.data()[0], 1.0);
    }

    #[test]
    fn components_mode_splits_disjoint_blobs() {
        let img = Tensor::full(&[1, 3, 8, 8], 1.0);
        let mut plane = vec![false; 64];
        for &(y, x) in &[(0, 0), (0, 1), (1, 0), (6, 6), (6, 7), (7, 7), (7, 6), (4, 3)] {
            plane[y * 8 + x] = true;
        }
        let m = mask_from(plane, 8, 8);
        let r = extract_regions(&img, &m, &[vec![0]], CropMode::Components, 2).unwrap();
        let boxes: Vec<_> = r.fg.iter().map(|p| p.bbox).collect();
        assert_eq!(boxes, vec![(0, 0, 2, 2), (6, 6, 8, 8)]);
    }

    #[test]
    fn mask_is_resampled_nearest_neighbour() {
        let img = Tensor::full(&[1, 3, 8, 8], 1.0);
        let m = mask_from(vec![true, false, false, false], 2, 2);
        let r = extract_regions(&img, &m, &[vec![0]], CropMode::Region, 1).unwrap();
        assert_eq!(r.fg[0].bbox, (0, 0, 4, 4));
    }

    #[test]
    fn resize_keeps_constant_patch_constant() {
        let p = Tensor::full(&[3, 5, 7], 0.25);
        let r = resize_patch(&p, 16);
        assert_eq!(r.shape(), &[3, 16, 16]);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}

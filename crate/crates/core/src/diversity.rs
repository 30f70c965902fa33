//! Prototype diversity regularizer.
//!
//! For every class region, each of the class's prototypes induces a softmax
//! distribution over the region's locations (cosine similarity between the
//! location's feature and the prototype projected into the same feature
//! space). Pairs of intra-class distributions are compared with Jeffrey's
//! divergence and penalized by `exp(-J)`; pairs that focus on different
//! locations cost little, collapsed pairs cost 1.

use crate::autograd::{jeffrey, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::mask_refiner::{nearest_index as near, PseudoMask};
use crate::prototype::{project_bank, BankVars, PrototypeBank};
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-8;

/// Locations of one image predicted as `class_id`, on the diversity stage grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegion {
    pub class_id: usize,
    pub image_index: usize,
    pub locations: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeDistribution {
    pub class_id: usize,
    pub prototype: usize,
    pub probs: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + crate::autograd::NORM_EPS) * (nb + crate::autograd::NORM_EPS))
}

/// Softmax over the region of the cosine similarity between each location's
/// feature and the (already projected) prototype. `None` for an empty region.
pub fn prototype_distribution(
    features: &[Vec<f64>],
    prototype: &[f64],
    class_id: usize,
    prototype_index: usize,
) -> Option<PrototypeDistribution> {
    if features.is_empty() {
        return None;
    }
    let sims: Vec<f64> = features.iter().map(|f| cosine(f, prototype)).collect();
    let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Some(PrototypeDistribution {
        class_id,
        prototype: prototype_index,
        probs: e.into_iter().map(|v| v / z).collect(),
    })
}

/// Clamp to `[floor, 1]` and renormalize.
pub fn clamp_distribution(p: &[f64], floor: f64) -> Vec<f64> {
    let c: Vec<f64> = p.iter().map(|v| v.clamp(floor, 1.0)).collect();
    let s: f64 = c.iter().sum();
    c.into_iter().map(|v| v / s).collect()
}

/// `KL(U||V) + KL(V||U)` after clamping both distributions.
pub fn jeffrey_divergence(u: &[f64], v: &[f64], floor: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "distributions have different supports ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    Ok(jeffrey(&clamp_distribution(u, floor), &clamp_distribution(v, floor)))
}

/// Mean of `exp(-J)` over unordered pairs; 0 when fewer than two distributions.
pub fn class_diversity(distributions: &[Vec<f64>], floor: f64) -> Result<f64> {
    let k = distributions.len();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for u in 0..k {
        for v in u + 1..k {
            total += (-jeffrey_divergence(&distributions[u], &distributions[v], floor)?).exp();
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Map fused-CAM decisions onto a `(grid_h, grid_w)` feature grid.
///
/// A cell belongs to class `c` of image `b` when, at its nearest fused-CAM
/// position, `c` has the highest score among the image's present classes
/// and that position is foreground for `c`.
pub fn class_regions(
    cam: &Tensor,
    mask: &PseudoMask,
    present: &[Vec<usize>],
    grid: (usize, usize),
) -> Result<Vec<ClassRegion>> {
    if cam.ndim() != 4 || mask.shape != [cam.dim(0), cam.dim(1), cam.dim(2), cam.dim(3)] {
        return shape_err(format!("cam {:?} and mask {:?} disagree", cam.shape(), mask.shape));
    }
    let (bs, nc, fh, fw) = (cam.dim(0), cam.dim(1), cam.dim(2), cam.dim(3));
    if present.len() != bs {
        return shape_err(format!("{} label rows for a batch of {bs}", present.len()));
    }
    let mut out = Vec::new();
    for (b, classes) in present.iter().enumerate() {
        let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nc];
        for i in 0..grid.0 {
            let ri = near(i, fh, grid.0);
            for j in 0..grid.1 {
                let rj = near(j, fw, grid.1);
                let winner = classes.iter().copied().fold(None, |best: Option<usize>, c| match best {
                    Some(bc) if cam.at4(b, bc, ri, rj) >= cam.at4(b, c, ri, rj) => Some(bc),
                    _ => Some(c),
                });
                if let Some(c) = winner {
                    if mask.is_fg(b, c, ri, rj) {
                        per_class[c].push((i, j));
                    }
                }
            }
        }
        for (c, locations) in per_class.into_iter().enumerate() {
            if !locations.is_empty() {
                out.push(ClassRegion {
                    class_id: c,
                    image_index: b,
                    locations,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DiversityOutput {
    pub loss: Var,
    /// Classes that contributed, ascending.
    pub valid_classes: Vec<usize>,
    /// `(class, L_div^(c))` for each valid class.
    pub per_class: Vec<(usize, Var)>,
}

/// `L_div`: per class, the mean over that class's regions of the mean pairwise
/// `exp(-J)`; then the mean over classes with at least one non-empty region.
/// Classes with `k < 2` have no pairs and never count as valid.
pub fn diversity_loss(
    g: &mut Graph,
    features: Var,
    bank: &PrototypeBank,
    bank_vars: &BankVars,
    stage: usize,
    regions: &[ClassRegion],
    floor: f64,
) -> Result<DiversityOutput> {
    let fshape = g.shape(features).to_vec();
    if fshape.len() != 4 {
        return shape_err(format!("features must be (B, D, H, W), got {fshape:?}"));
    }
    let head_dim = g.shape(bank_vars.heads[stage].0)[1];
    if head_dim != fshape[1] {
        return shape_err(format!(
            "diversity features have {} channels but head {} produces {head_dim}",
            fshape[1],
            stage + 1
        ));
    }
    let mut by_class: Vec<Vec<&ClassRegion>> = vec![Vec::new(); bank.num_classes];
    for r in regions {
        if r.class_id >= bank.num_classes || r.image_index >= fshape[0] {
            return shape_err(format!("region ({}, {}) out of range", r.image_index, r.class_id));
        }
        if let Some(&(i, j)) = r.locations.iter().find(|&&(i, j)| i >= fshape[2] || j >= fshape[3]) {
            return shape_err(format!(
                "location ({i}, {j}) outside a {}x{} grid",
                fshape[2], fshape[3]
            ));
        }
        if !r.locations.is_empty() {
            by_class[r.class_id].push(r);
        }
    }
    let zero = g.constant(Tensor::scalar(0.0));
    if bank.k < 2 || by_class.iter().all(Vec::is_empty) {
        return Ok(DiversityOutput {
            loss: zero,
            valid_classes: Vec::new(),
            per_class: Vec::new(),
        });
    }
    let projected = project_bank(g, bank_vars, stage);
    let mut per_class = Vec::new();
    for (c, class_regions) in by_class.iter().enumerate() {
        if class_regions.is_empty() {
            continue;
        }
        let rows: Vec<usize> = bank.class_rows(c).collect();
        let protos = g.select_rows(projected, &rows);
        let protos_hat = g.normalize_rows(protos);
        let mut terms = Vec::with_capacity(class_regions.len());
        for r in class_regions {
            let index: Vec<_> = r.locations.iter().map(|&(i, j)| (r.image_index, i, j)).collect();
            let f = g.gather_pixels(features, &index);
            let f_hat = g.normalize_rows(f);
            let ft = g.transpose(f_hat);
            let sims = g.matmul(protos_hat, ft);
            let dist = g.softmax_last(sims);
            let dist = g.clamp_renorm_rows(dist, floor);
            terms.push(g.pairwise_exp_neg_jeffrey(dist));
        }
        let s = g.add_scalars(&terms);
        per_class.push((c, g.scale(s, 1.0 / terms.len() as f64)));
    }
    let vals: Vec<Var> = per_class.iter().map(|&(_, v)| v).collect();
    let s = g.add_scalars(&vals);
    let loss = g.scale(s, 1.0 / vals.len() as f64);
    Ok(DiversityOutput {
        loss,
        valid_classes: per_class.iter().map(|&(c, _)| c).collect(),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    const EPS: f64 = DEFAULT_CLAMP_FLOOR;

    #[test]
    fn singleton_support_is_certain() {
        let d = prototype_distribution(&[vec![0.3, -1.0]], &[1.0, 2.0], 0, 0).unwrap();
        assert_eq!(d.probs, vec![1.0]);
        assert!(prototype_distribution(&[], &[1.0], 0, 0).is_none());
    }

    #[test]
    fn equal_similarities_are_uniform() {
        let f = vec![vec![1.0, 0.0]; 4];
        let d = prototype_distribution(&f, &[0.0, 1.0], 0, 0).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_location_softmax() {
        // cos = 1 at the first location, 0 at the second
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let d = prototype_distribution(&f, &[2.0, 0.0], 0, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs[0] - e / (e + 1.0)).abs() < 1e-7);
        assert!((d.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-7);
        assert!((d.probs[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn jeffrey_examples() {
        assert_eq!(jeffrey_divergence(&[0.3, 0.7], &[0.3, 0.7], EPS).unwrap(), 0.0);
        let j = jeffrey_divergence(&[0.75, 0.25], &[0.25, 0.75], EPS).unwrap();
        assert!((j - 3f64.ln()).abs() < 1e-12);
        assert!((j - 1.0986).abs() < 1e-4);
        let e = 1e-8;
        let j = jeffrey_divergence(&[1.0 - e, e], &[e, 1.0 - e], EPS).unwrap();
        let closed = 2.0 * (1.0 - 2.0 * e) * ((1.0 - e) / e).ln();
        assert!(j.is_finite() && (j - closed).abs() < 1e-9 * closed);
        assert!(jeffrey_divergence(&[1.0], &[0.5, 0.5], EPS).is_err());
    }

    #[test]
    fn zero_mass_is_clamped_to_finite() {
        let j = jeffrey_divergence(&[1.0, 0.0], &[0.0, 1.0], EPS).unwrap();
        assert!(j.is_finite() && j > 30.0);
    }

    #[test]
    fn class_diversity_examples() {
        let same = vec![vec![0.2, 0.8]; 3];
        assert!((class_diversity(&same, EPS).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(class_diversity(&[vec![1.0]], EPS).unwrap(), 0.0);
        let d = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]];
        let brute = {
            let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
            let pairs = [(0, 1), (0, 2), (1, 2)];
            pairs
                .iter()
                .map(|&(u, v)| (-(kl(&d[u], &d[v]) + kl(&d[v], &d[u]))).exp())
                .sum::<f64>()
                / 3.0
        };
        assert!((class_diversity(&d, EPS).unwrap() - brute).abs() < 1e-12);
    }

    fn one_stage_bank(c: usize, k: usize, d: usize, seed: u64) -> PrototypeBank {
        PrototypeBank::init(c, k, 4, false, &[d; 4], [0.1; 4], &mut seeded(seed)).unwrap()
    }

    fn eval(bank: &PrototypeBank, feats: &Tensor, regions: &[ClassRegion]) -> (f64, Vec<usize>) {
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let bv = bank.bind(&mut g, true);
        let out = diversity_loss(&mut g, f, bank, &bv, 3, regions, EPS).unwrap();
        (g.value(out.loss).item(), out.valid_classes)
    }

    #[test]
    fn no_valid_class_gives_zero() {
        let bank = one_stage_bank(2, 3, 3, 1);
        let feats = Tensor::randn(&[1, 3, 2, 2], &mut seeded(2));
        assert_eq!(eval(&bank, &feats, &[]), (0.0, vec![]));
        let k1 = one_stage_bank(2, 1, 3, 1);
        let r = ClassRegion {
            class_id: 0,
            image_index: 0,
            locations: vec![(0, 0), (1, 1)],
        };
        assert_eq!(eval(&k1, &feats, &[r]), (0.0, vec![]));
    }

    #[test]
    fn two_classes_average() {
        let bank = one_stage_bank(2, 2, 3, 4);
        let feats = Tensor::randn(&[1, 3, 2, 2], &mut seeded(5));
        let r0 = ClassRegion {
            class_id: 0,
            image_index: 0,
            locations: vec![(0, 0), (0, 1)],
        };
        let r1 = ClassRegion {
            class_id: 1,
            image_index: 0,
            locations: vec![(1, 0), (1, 1), (0, 0)],
        };
        let (a, _) = eval(&bank, &feats, std::slice::from_ref(&r0));
        let (b, _) = eval(&bank, &feats, std::slice::from_ref(&r1));
        let (both, valid) = eval(&bank, &feats, &[r0, r1]);
        assert_eq!(valid, vec![0, 1]);
        assert!((both - (a + b) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn class_regions_follow_argmax_and_threshold() {
        // 1 image, 2 classes, 2x2 fused cam, mapped to a 1x2 grid
        let cam = Tensor::new(vec![1, 2, 2, 2], vec![0.9, 0.1, 0.9, 0.1, 0.2, 0.8, 0.2, 0.05]);
        let mask = crate::mask_refiner::threshold(&cam, 0.5).unwrap();
        let regions = class_regions(&cam, &mask, &[vec![0, 1]], (2, 2)).unwrap();
        assert_eq!(
            regions,
            vec![
                ClassRegion {
                    class_id: 0,
                    image_index: 0,
                    locations: vec![(0, 0), (1, 0)]
                },
                ClassRegion {
                    class_id: 1,
                    image_index: 0,
                    locations: vec![(0, 1)]
                },
            ]
        );
        // absent class never wins
        let only0 = class_regions(&cam, &mask, &[vec![0]], (2, 2)).unwrap();
        assert_eq!(only0.len(), 1);
        assert_eq!(only0[0].locations, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let bank = one_stage_bank(2, 3, 3, 9);
        let feats = Tensor::randn(&[2, 3, 2, 2], &mut seeded(10));
        let regions = vec![
            ClassRegion {
                class_id: 0,
                image_index: 0,
                locations: vec![(0, 0), (0, 1), (1, 1)],
            },
            ClassRegion {
                class_id: 1,
                image_index: 1,
                locations: vec![(0, 0), (1, 0), (1, 1), (0, 1)],
            },
        ];
        let value = |b: &PrototypeBank| eval(b, &feats, &regions).0;
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let bv = bank.bind(&mut g, true);
        let out = diversity_loss(&mut g, f, &bank, &bv, 3, &regions, EPS).unwrap();
        let grads = g.backward(out.loss);
        let analytic = grads.get(bv.prototypes).unwrap().clone();
        let h = 1e-6;
        for i in 0..analytic.len() {
            let mut p = bank.clone();
            p.prototypes.data_mut()[i] += h;
            let mut m = bank.clone();
            m.prototypes.data_mut()[i] -= h;
            let num = (value(&p) - value(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {i}: {a} vs {num}");
        }
    }
}

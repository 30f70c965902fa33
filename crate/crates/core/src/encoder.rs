//! Multi-scale feature extractor.
//!
//! The reference encoder is four blocks of
//! `patch convolution -> channel layer norm -> GELU`, each block reducing
//! resolution by the ratio between consecutive stage strides.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::EncoderConfig;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_strides: [usize; NUM_STAGES],
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl EncoderSpec {
    pub fn new(stage_channels: [usize; 4], stage_strides: [usize; 4]) -> Result<Self> {
        let spec = Self {
            stage_channels,
            stage_strides,
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn from_config(cfg: &EncoderConfig) -> Result<Self> {
        let to4 = |v: &[usize], what: &str| -> Result<[usize; 4]> {
            v.try_into()
                .map_err(|_| Error::InvalidArgument(format!("{what} needs 4 entries, got {}", v.len())))
        };
        let spec = Self {
            stage_channels: to4(&cfg.stage_channels, "stage_channels")?,
            stage_strides: to4(&cfg.stage_strides, "stage_strides")?,
            pixel_mean: cfg.pixel_mean,
            pixel_std: cfg.pixel_std,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::InvalidArgument("stage channels must be >= 1".into()));
        }
        let mut prev = 1;
        for &s in &self.stage_strides {
            if s == 0 || s % prev != 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage strides {:?} must be positive and successively divisible",
                    self.stage_strides
                )));
            }
            prev = s;
        }
        Ok(())
    }

    /// Downsampling factor of block `i` relative to its input.
    pub fn block_stride(&self, i: usize) -> usize {
        if i == 0 {
            self.stage_strides[0]
        } else {
            self.stage_strides[i] / self.stage_strides[i - 1]
        }
    }

    pub fn stage_shape(&self, batch: usize, h: usize, w: usize, i: usize) -> [usize; 4] {
        let s = self.stage_strides[i];
        [batch, self.stage_channels[i], h / s, w / s]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return shape_err(format!("expected image of shape (B, 3, H, W), got {shape:?}"));
        }
        let s = self.stage_strides[NUM_STAGES - 1];
        if !shape[2].is_multiple_of(s) || !shape[3].is_multiple_of(s) || shape[2] == 0 || shape[3] == 0 {
            return shape_err(format!(
                "image size {}x{} is not divisible by the largest stride {s}",
                shape[2], shape[3]
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<StageParams>,
}

#[derive(Clone, Debug)]
pub struct StageVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub stages: Vec<StageVars>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let mut cin = 3;
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let s = spec.block_stride(i);
                let cout = spec.stage_channels[i];
                let fan_in = cin * s * s;
                let p = StageParams {
                    weight: Tensor::uniform_fan_in(&[cout, cin, s, s], fan_in, rng),
                    bias: Tensor::uniform_fan_in(&[cout], fan_in, rng),
                    gamma: Tensor::full(&[cout], 1.0),
                    beta: Tensor::zeros(&[cout]),
                };
                cin = cout;
                p
            })
            .collect();
        Self { stages }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("encoder.stage{}.weight", i + 1), &s.weight));
            out.push((format!("encoder.stage{}.bias", i + 1), &s.bias));
            out.push((format!("encoder.stage{}.gamma", i + 1), &s.gamma));
            out.push((format!("encoder.stage{}.beta", i + 1), &s.beta));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.weight, &mut s.bias, &mut s.gamma, &mut s.beta])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        EncoderVars {
            stages: self
                .stages
                .iter()
                .map(|s| StageVars {
                    weight: leaf(&s.weight),
                    bias: leaf(&s.bias),
                    gamma: leaf(&s.gamma),
                    beta: leaf(&s.beta),
                })
                .collect(),
        }
    }
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        self.stages
            .iter()
            .flat_map(|s| [s.weight, s.bias, s.gamma, s.beta])
            .collect()
    }
}

/// Per-stage feature maps `(B, d_i, H_i, W_i)`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; NUM_STAGES],
}

/// Run the encoder on `image: (B, 3, H, W)` inside `g`.
pub fn encode(g: &mut Graph, image: Var, spec: &EncoderSpec, params: &EncoderVars) -> Result<FeaturePyramid> {
    let shape = g.shape(image).to_vec();
    spec.check_input(&shape)?;
    if !g.value(image).all_finite() {
        return Err(Error::NonFinite("encoder input image".into()));
    }
    let hw = shape[2] * shape[3];
    let scale = Tensor::from_fn(&shape, |i| 1.0 / spec.pixel_std[(i / hw) % 3]);
    let offset = Tensor::from_fn(&shape, |i| {
        let c = (i / hw) % 3;
        -spec.pixel_mean[c] / spec.pixel_std[c]
    });
    let scale = g.constant(scale);
    let offset = g.constant(offset);
    let scaled = g.mul(image, scale);
    let mut x = g.add(scaled, offset);
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for (i, sv) in params.stages.iter().enumerate() {
        let y = g.patch_embed(x, sv.weight, sv.bias, spec.block_stride(i));
        let y = g.channel_layer_norm(y, sv.gamma, sv.beta);
        x = g.gelu(y);
        stages.push(x);
    }
    Ok(FeaturePyramid {
        stages: stages.try_into().expect("four stages"),
    })
}

/// Convenience forward pass returning plain tensors.
pub fn encode_values(image: &Tensor, spec: &EncoderSpec, params: &EncoderParams) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let vars = params.bind(&mut g, false);
    let pyr = encode(&mut g, x, spec, &vars)?;
    Ok(pyr.stages.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn spec() -> EncoderSpec {
        EncoderSpec::new([8, 16, 24, 32], [4, 8, 16, 32]).unwrap()
    }

    #[test]
    fn stage_shapes_follow_strides() {
        let s = spec();
        let p = EncoderParams::init(&s, &mut seeded(1));
        let img = Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 17) as f64 / 17.0);
        let out = encode_values(&img, &s, &p).unwrap();
        let shapes: Vec<_> = out.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 8, 16, 16],
                vec![2, 16, 8, 8],
                vec![2, 24, 4, 4],
                vec![2, 32, 2, 2]
            ]
        );
        assert!(out.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn zero_projections_give_zero_features() {
        let s = spec();
        let mut p = EncoderParams::init(&s, &mut seeded(1));
        for st in &mut p.stages {
            st.weight = Tensor::zeros(st.weight.shape());
            st.bias = Tensor::zeros(st.bias.shape());
        }
        let img = Tensor::zeros(&[1, 3, 32, 32]);
        for t in encode_values(&img, &s, &p).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_and_non_finite_input() {
        let s = spec();
        let p = EncoderParams::init(&s, &mut seeded(1));
        let bad = Tensor::zeros(&[1, 3, 48, 40]);
        assert!(matches!(encode_values(&bad, &s, &p), Err(Error::Shape(_))));
        let mut nan = Tensor::zeros(&[1, 3, 32, 32]);
        nan.data_mut()[5] = f64::NAN;
        assert!(matches!(encode_values(&nan, &s, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let s = spec();
        let img = Tensor::randn(&[1, 3, 32, 32], &mut seeded(3));
        let a = encode_values(&img, &s, &EncoderParams::init(&s, &mut seeded(9))).unwrap();
        let b = encode_values(&img, &s, &EncoderParams::init(&s, &mut seeded(9))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_gradient_matches_central_differences() {
        let s = EncoderSpec::new([3, 4, 4, 5], [2, 4, 8, 8]).unwrap();
        let p = EncoderParams::init(&s, &mut seeded(4));
        let img = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0);
        let objective = |p: &EncoderParams| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let x = g.param(img.clone());
            let v = p.bind(&mut g, true);
            let pyr = encode(&mut g, x, &s, &v).unwrap();
            let sums: Vec<_> = pyr.stages.iter().map(|&st| g.sum_all(st)).collect();
            let total = g.add_scalars(&sums);
            let grads = g.backward(total);
            let gs = v.all().iter().map(|&var| grads.get(var).cloned().unwrap()).collect();
            (g.value(total).item(), gs)
        };
        let (_, analytic) = objective(&p);
        let h = 1e-6;
        for (ti, grad) in analytic.iter().enumerate() {
            for e in (0..grad.len()).step_by(3) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[e] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[e] -= h;
                let num = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
                let a = grad.data()[e];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                assert!(rel < 1e-4, "tensor {ti} entry {e}: {a} vs {num}");
            }
        }
    }

    proptest! {
        #[test]
        fn shape_law_holds_for_valid_sizes(bh in 1usize..4, bw in 1usize..4, batch in 1usize..3) {
            let s = EncoderSpec::new([2, 3, 3, 4], [4, 8, 16, 32]).unwrap();
            let p = EncoderParams::init(&s, &mut seeded(0));
            let (h, w) = (bh * 32, bw * 32);
            let img = Tensor::full(&[batch, 3, h, w], 0.3);
            let out = encode_values(&img, &s, &p).unwrap();
            for (i, t) in out.iter().enumerate() {
                prop_assert_eq!(t.shape(), &s.stage_shape(batch, h, w, i)[..]);
            }
        }
    }
}

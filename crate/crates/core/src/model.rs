//! The full network: encoder, prototype bank and region projector.

use std::path::Path;

use serde_json::json;

use crate::autograd::{bilinear_forward, sigmoid, Graph, Var};
use crate::config::Config;
use crate::container::Container;
use crate::encoder::{encode, EncoderParams, EncoderSpec, EncoderVars, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::evaluation::crf_refine;
use crate::mask_refiner::{fuse_cams, FusedCam, Projector, ProjectorVars};
use crate::prototype::{aggregate_class_cams, similarity_maps, stage_logits, ActivationSet, BankVars, PrototypeBank};
use crate::rng::derived;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: Config,
    pub spec: EncoderSpec,
    pub encoder: EncoderParams,
    pub bank: PrototypeBank,
    pub projector: Projector,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub bank: BankVars,
    pub projector: ProjectorVars,
}

impl ModelVars {
    /// Same order as [`Model::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.all();
        v.extend(self.bank.all());
        v.push(self.projector.weight);
        v.push(self.projector.bias);
        v
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub pyramid: FeaturePyramid,
    pub activations: ActivationSet,
    pub fused: FusedCam,
    pub logits: [Var; NUM_STAGES],
}

/// Plain-value outputs for inference and visualisation.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `(B, C, H_1, W_1)`.
    pub fused_cam: Tensor,
    /// Per stage `(B, N_p, H_i, W_i)`.
    pub prototype_maps: Vec<Tensor>,
    /// Per stage `(B, C, H_i, W_i)`.
    pub class_cams: Vec<Tensor>,
    /// `(B, C)`, sigmoid of the stage-averaged GAP logits.
    pub class_probs: Tensor,
}

impl Model {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let spec = EncoderSpec::from_config(&config.encoder)?;
        let seed = config.trainer.seed;
        let encoder = EncoderParams::init(&spec, &mut derived(seed, 1));
        let b = &config.bank;
        let temps: [f64; NUM_STAGES] = b
            .temperatures
            .clone()
            .try_into()
            .map_err(|_| Error::InvalidArgument("need 4 temperatures".into()))?;
        let bank = PrototypeBank::init(
            b.num_classes,
            b.k,
            b.d_proto,
            b.background,
            &spec.stage_channels,
            temps,
            &mut derived(seed, 2),
        )?;
        let projector = Projector::init(config.refiner.region_embed_dim, b.d_proto, &mut derived(seed, 3));
        Ok(Self {
            config: config.clone(),
            spec,
            encoder,
            bank,
            projector,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named();
        v.extend(self.bank.named());
        v.extend(self.projector.named());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.bank.tensors_mut());
        v.extend(self.projector.tensors_mut());
        v
    }

    /// Parameter group of a named tensor, used for gradient-norm reporting.
    pub fn group_of(name: &str) -> &'static str {
        if name.starts_with("encoder.") {
            "encoder"
        } else if name == "bank.prototypes" {
            "prototypes"
        } else if name.starts_with("bank.head") {
            "heads"
        } else {
            "psi"
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, trainable),
            bank: self.bank.bind(g, trainable),
            projector: self.projector.bind(g, trainable),
        }
    }

    pub fn fusion_weights(&self) -> [f64; NUM_STAGES] {
        let w = &self.config.refiner.fusion_weights;
        [w[0], w[1], w[2], w[3]]
    }

    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, images: &Tensor) -> Result<Forward> {
        let x = g.constant(images.clone());
        let pyramid = encode(g, x, &self.spec, &vars.encoder)?;
        let maps = similarity_maps(g, &pyramid, &self.bank, &vars.bank)?;
        let activations = aggregate_class_cams(g, &maps, &self.bank)?;
        let fused = fuse_cams(g, &activations.per_class, &self.fusion_weights())?;
        let logits = stage_logits(g, &activations.per_class);
        Ok(Forward {
            pyramid,
            activations,
            fused,
            logits,
        })
    }

    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let fw = self.forward(&mut g, &vars, images)?;
        let (b, c) = (images.dim(0), self.bank.num_classes);
        let mut mean_logit = Tensor::zeros(&[b, c]);
        for &z in &fw.logits {
            for (m, v) in mean_logit.data_mut().iter_mut().zip(g.value(z).data()) {
                *m += v / NUM_STAGES as f64;
            }
        }
        Ok(Prediction {
            fused_cam: g.value(fw.fused.cam).clone(),
            prototype_maps: fw
                .activations
                .per_prototype
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
            class_cams: fw.activations.per_class.iter().map(|&v| g.value(v).clone()).collect(),
            class_probs: mean_logit.map(sigmoid),
        })
    }

    /// Per-pixel labels at image resolution, restricted to the classes the
    /// image-level head predicts present (the most probable one if none is).
    ///
    /// Each allowed class map is min-max normalized per image before the
    /// argmax, so classes compete on relative rather than raw activation.
    /// With the CRF the normalized scores, rescaled to sum to one, are the unary.
    pub fn segment(&self, images: &Tensor, use_crf: bool) -> Result<Vec<Vec<usize>>> {
        let pred = self.predict(images)?;
        let (b, c, h, w) = (images.dim(0), self.bank.num_classes, images.dim(2), images.dim(3));
        let cam = bilinear_forward(&pred.fused_cam, h, w);
        let hw = h * w;
        let mut out = Vec::with_capacity(b);
        for n in 0..b {
            let probs = &pred.class_probs.data()[n * c..(n + 1) * c];
            let mut allowed: Vec<usize> = (0..c).filter(|&k| probs[k] > 0.5).collect();
            if allowed.is_empty() {
                let best = (0..c).fold(0, |a, k| if probs[k] > probs[a] { k } else { a });
                allowed.push(best);
            }
            let mut score = Tensor::zeros(&[c, h, w]);
            for &k in &allowed {
                let plane = &cam.data()[(n * c + k) * hw..(n * c + k + 1) * hw];
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                for (d, &v) in score.data_mut()[k * hw..(k + 1) * hw].iter_mut().zip(plane) {
                    *d = (v - lo) / span;
                }
            }
            if use_crf && self.config.crf.iterations > 0 {
                let mut unary = Tensor::zeros(&[c, h, w]);
                for p in 0..hw {
                    let z: f64 = allowed.iter().map(|&k| score.data()[k * hw + p] + 1e-3).sum();
                    for &k in &allowed {
                        unary.data_mut()[k * hw + p] = (score.data()[k * hw + p] + 1e-3) / z;
                    }
                }
                let img = Tensor::new(vec![3, h, w], images.data()[n * 3 * hw..(n + 1) * 3 * hw].to_vec());
                out.push(crf_refine(&img, &unary, &self.config.crf)?);
            } else {
                let labels = (0..hw)
                    .map(|p| {
                        allowed.iter().copied().fold(allowed[0], |a, k| {
                            if score.data()[k * hw + p] > score.data()[a * hw + p] {
                                k
                            } else {
                                a
                            }
                        })
                    })
                    .collect();
                out.push(labels);
            }
        }
        Ok(out)
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let mut c = Container::new(
            "checkpoint",
            json!({ "config": self.config.to_toml_string(), "extra": extra }),
        );
        for (name, t) in self.named_tensors() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, serde_json::Value)> {
        let cfg_text = c
            .meta
            .get("config")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("checkpoint lacks a config snapshot".into()))?;
        let config = Config::from_toml_str(cfg_text)?;
        let mut model = Self::new(&config)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let t = c.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let extra = c.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_container(&Container::load(path)?.expect_kind("checkpoint")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.bank.k = 2;
        c.bank.d_proto = 8;
        c.refiner.region_embed_dim = 6;
        c
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(&tiny_config()).unwrap();
        let img = Tensor::full(&[2, 3, 64, 64], 0.4);
        let p = m.predict(&img).unwrap();
        assert_eq!(p.fused_cam.shape(), &[2, 4, 16, 16]);
        assert_eq!(p.prototype_maps[3].shape(), &[2, 10, 2, 2]);
        assert_eq!(p.class_cams[1].shape(), &[2, 4, 8, 8]);
        let seg = m.segment(&img, false).unwrap();
        assert_eq!(seg.len(), 2);
        assert!(seg[0].iter().all(|&l| l < 4));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let m = Model::new(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pdr");
        m.save(&path, json!({"step": 3})).unwrap();
        let (back, extra) = Model::load(&path).unwrap();
        assert_eq!(extra["step"], 3);
        assert_eq!(back, m);
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 13) as f64 / 13.0);
        assert_eq!(
            back.predict(&img).unwrap().fused_cam,
            m.predict(&img).unwrap().fused_cam
        );
    }
}

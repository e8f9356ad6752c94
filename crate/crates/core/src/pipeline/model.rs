use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Real};

/// Scale applied to the uniform init of the 1×1 prediction layers.
const PREDICTOR_INIT_SCALE: f64 = 0.1;

/// Per-stage head: adaptive conv → ReLU → 1×1 projections.
#[derive(Clone, Debug, PartialEq)]
pub struct StageHead<T> {
    /// 3×3 adaptive convolution producing the stage representation.
    pub ada: ConvParams<T>,
    /// 1×1 projection of the first-stage representation, added before the ReLU.
    pub bridge: Option<ConvParams<T>>,
    /// Normalized `(dx, dy, dw, dh)`.
    pub reg: ConvParams<T>,
    /// Objectness logit; present on the final stage only.
    pub cls: Option<ConvParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    /// 3×3 conv + ReLU blocks.
    pub backbone: Vec<ConvParams<T>>,
    /// Shared across pyramid levels, one per stage.
    pub heads: Vec<StageHead<T>>,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut backbone = Vec::new();
        let mut in_c = cfg.input_channels;
        for (&c, &s) in cfg.backbone_channels.iter().zip(&cfg.backbone_strides) {
            backbone.push(ConvParams::init_uniform(c, in_c, (3, 3), s, 1, &mut rng)?);
            in_c = c;
        }
        let feat_c = cfg.feature_channels()?;
        let h = cfg.head_channels;
        let predictor = |out: usize, rng: &mut ChaCha8Rng| -> Result<ConvParams<T>> {
            let mut p = ConvParams::init_uniform(out, h, (1, 1), 1, 1, rng)?;
            p.weight.scale(T::lit(PREDICTOR_INIT_SCALE));
            Ok(p)
        };
        let mut heads = Vec::new();
        for t in 0..cfg.num_stages {
            let ada = ConvParams::init_uniform(h, feat_c, (3, 3), 1, 1, &mut rng)?;
            let bridge = if t > 0 {
                Some(ConvParams::init_uniform(h, h, (1, 1), 1, 1, &mut rng)?)
            } else {
                None
            };
            let reg = predictor(4, &mut rng)?;
            let cls = if t + 1 == cfg.num_stages {
                Some(predictor(1, &mut rng)?)
            } else {
                None
            };
            heads.push(StageHead {
                ada,
                bridge,
                reg,
                cls,
            });
        }
        Ok(Self { backbone, heads })
    }

    pub fn num_stages(&self) -> usize {
        self.heads.len()
    }

    /// Every convolution with its checkpoint name prefix, in a fixed order.
    pub fn named_convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out: Vec<(String, &ConvParams<T>)> = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}"), c));
        }
        for (t, h) in self.heads.iter().enumerate() {
            out.push((format!("stage{}.ada", t + 1), &h.ada));
            if let Some(b) = &h.bridge {
                out.push((format!("stage{}.bridge", t + 1), b));
            }
            out.push((format!("stage{}.reg", t + 1), &h.reg));
            if let Some(c) = &h.cls {
                out.push((format!("stage{}.cls", t + 1), c));
            }
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out: Vec<&mut ConvParams<T>> = self.backbone.iter_mut().collect();
        for h in &mut self.heads {
            out.push(&mut h.ada);
            if let Some(b) = &mut h.bridge {
                out.push(b);
            }
            out.push(&mut h.reg);
            if let Some(c) = &mut h.cls {
                out.push(c);
            }
        }
        out
    }

    /// `(name, dims)` of every parameter tensor, weights before biases.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.named_convs()
            .into_iter()
            .flat_map(|(name, c)| {
                [
                    (format!("{name}.weight"), c.weight.dims().to_vec()),
                    (format!("{name}.bias"), vec![c.bias.len()]),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.named_convs()
            .into_iter()
            .flat_map(|(_, c)| [c.weight.data(), c.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| {
                let ConvParams { weight, bias, .. } = c;
                [weight.data_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.fill(T::zero());
        }
        m
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            backbone: self.backbone.iter().map(ConvParams::cast).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| StageHead {
                    ada: h.ada.cast(),
                    bridge: h.bridge.as_ref().map(ConvParams::cast),
                    reg: h.reg.cast(),
                    cls: h.cls.as_ref().map(ConvParams::cast),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Model<T>) -> Result<()> {
        let theirs = other.params();
        let mut mine = self.params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("Model::add_assign", mine.len(), theirs.len()));
        }
        for (a, b) in mine.iter_mut().zip(theirs) {
            if a.len() != b.len() {
                return Err(Error::shape("Model::add_assign", a.len(), b.len()));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over all parameters, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

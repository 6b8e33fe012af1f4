//! Tiny shared-weight CNN producing a spatial middle representation `m` and
//! a global view feature `v` for each rendered view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Zero-based index of the stage exported as `m`.
    pub middle_tap: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            pad: 1,
            middle_tap: 1,
            feature_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one conv stage".into()));
        }
        if self.middle_tap >= self.channels.len() {
            return Err(Error::Config(format!(
                "middle_tap {} must be below the stage count {}",
                self.middle_tap,
                self.channels.len()
            )));
        }
        if self.stride == 0 || self.kernel == 0 || self.feature_dim == 0 || self.image_size == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let mut size = self.image_size;
        for _ in &self.channels {
            if self.kernel > size + 2 * self.pad {
                return Err(Error::Config(format!(
                    "image size {} too small for {} conv stages",
                    self.image_size,
                    self.channels.len()
                )));
            }
            size = self.stage_out(size);
        }
        Ok(())
    }

    fn stage_out(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Side length of the feature map after each stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut size = self.image_size;
        self.channels
            .iter()
            .map(|_| {
                size = self.stage_out(size);
                size
            })
            .collect()
    }

    /// `(C_m, H_m, W_m)` of the middle representation.
    pub fn middle_dims(&self) -> (usize, usize, usize) {
        let side = self.stage_sizes()[self.middle_tap];
        (self.channels[self.middle_tap], side, side)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnEncoderParams {
    pub config: EncoderConfig,
    pub stages: Vec<ConvStage>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl CnnEncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut c_in = 1;
        let mut stages = Vec::with_capacity(config.channels.len());
        for &c_out in &config.channels {
            stages.push(ConvStage {
                kernels: Tensor::glorot(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        Ok(CnnEncoderParams {
            config: config.clone(),
            stages,
            head_w: Tensor::glorot(&[config.feature_dim, c_in], c_in, config.feature_dim, rng),
            head_b: Tensor::zeros(&[config.feature_dim]),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderVars {
        let vars = self.bind_all(g);
        self.vars_from(&vars)
    }

    /// Rebuilds the bound view from vars in [`Parameterized`] order.
    pub(crate) fn vars_from(&self, vars: &[Var]) -> EncoderVars {
        let stages = vars[..2 * self.stages.len()]
            .chunks_exact(2)
            .map(|kb| (kb[0], kb[1]))
            .collect();
        let n = vars.len();
        EncoderVars {
            config: self.config.clone(),
            stages,
            head_w: vars[n - 2],
            head_b: vars[n - 1],
        }
    }
}

impl Parameterized for CnnEncoderParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("conv{i}.kernels"), &s.kernels));
            out.push((format!("conv{i}.bias"), &s.bias));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernels"), &mut s.kernels));
            out.push((format!("conv{i}.bias"), &mut s.bias));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    config: EncoderConfig,
    stages: Vec<(Var, Var)>,
    head_w: Var,
    head_b: Var,
}

/// Graph nodes of one view's features: `m` is `C_m×N`, `v` is `C_v`.
#[derive(Clone, Copy, Debug)]
pub struct ViewFeatureVars {
    pub m: Var,
    pub v: Var,
}

impl EncoderVars {
    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<ViewFeatureVars> {
        let s = self.config.image_size;
        if g.shape(image) != [1, s, s] {
            return Err(shape_err!(
                "encoder expects a 1×{s}×{s} image, got {:?}",
                g.shape(image)
            ));
        }
        let mut x = image;
        let mut middle = None;
        for (i, &(k, b)) in self.stages.iter().enumerate() {
            let conv = g.conv2d(x, k, Some(b), self.config.stride, self.config.pad)?;
            x = g.relu(conv)?;
            if i == self.config.middle_tap {
                middle = Some(x);
            }
        }
        let middle = middle.expect("middle_tap validated against stage count");
        let (c_m, h_m, w_m) = self.config.middle_dims();
        let m = g.reshape(middle, &[c_m, h_m * w_m])?;
        let pooled = g.global_avg_pool(x)?;
        let proj = g.matvec(self.head_w, pooled)?;
        let v = g.add(proj, self.head_b)?;
        Ok(ViewFeatureVars { m, v })
    }
}

/// Middle representation and global feature of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub m: Tensor,
    pub v: Tensor,
}

pub fn cnn_encode(params: &CnnEncoderParams, image: &Tensor) -> Result<ViewFeatures> {
    let mut g = Graph::inference();
    let enc = params.bind(&mut g);
    let img = g.constant(image.clone());
    let f = enc.encode(&mut g, img)?;
    Ok(ViewFeatures {
        m: g.value(f.m).clone(),
        v: g.value(f.v).clone(),
    })
}

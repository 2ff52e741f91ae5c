//! Image encoder, GeM pooling and the fully connected descriptor head.

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::params::{he_normal, Bound, ParamSet};
use crate::protocol::{GEM_P_INIT, IMAGE_DOWNSAMPLE};
use crate::tensor::{ConvRules, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("image of {height}x{width} is smaller than 8x8")]
    TooSmall { width: usize, height: usize },
    #[error("GeM over an empty feature set")]
    EmptyInput,
    #[error("GeM exponent must be positive, got {0}")]
    NonPositiveP(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = HeadError> = std::result::Result<T, E>;

/// Row-major `height × width × channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// `[H·W, C]` view as a tensor, one row per pixel.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.width * self.height, self.channels, self.data.clone()).expect("consistent image")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Dense feature map produced by the image encoder; `feats` is
/// `[height · width, channels]` with pixel rows in row-major order.
#[derive(Clone, Debug)]
pub struct ImageFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub feats: Var,
}

/// Rules for a 3×3, stride-2, pad-1 convolution with floor output dims, so
/// three layers map `H` to exactly `H // 8`.
pub fn conv2d_rules(width: usize, height: usize) -> (Rc<ConvRules>, usize, usize) {
    let (ow, oh) = (width / 2, height / 2);
    let mut offsets = vec![Vec::new(); 9];
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                    if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                        continue;
                    }
                    let i = iy as usize * width + ix as usize;
                    offsets[ky * 3 + kx].push((i as u32, (oy * ow + ox) as u32));
                }
            }
        }
    }
    let rules = ConvRules {
        input_rows: width * height,
        output_rows: ow * oh,
        offsets,
    };
    (Rc::new(rules), ow, oh)
}

/// Precomputed convolution rules for one input resolution.
#[derive(Clone, Debug)]
pub struct ImagePlan {
    width: usize,
    height: usize,
    stages: Vec<(Rc<ConvRules>, usize, usize)>,
}

impl ImagePlan {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < IMAGE_DOWNSAMPLE || height < IMAGE_DOWNSAMPLE {
            return Err(HeadError::TooSmall { width, height });
        }
        let mut stages = Vec::with_capacity(3);
        let (mut w, mut h) = (width, height);
        for _ in 0..3 {
            let st = conv2d_rules(w, h);
            w = st.1;
            h = st.2;
            stages.push(st);
        }
        Ok(Self { width, height, stages })
    }

    pub fn output_dims(&self) -> (usize, usize) {
        let last = self.stages.last().expect("three stages");
        (last.1, last.2)
    }
}

pub const IMAGE_ENCODER_PREFIX: &str = "img.enc";
pub const IMAGE_HEAD_PREFIX: &str = "img.head";
pub const POINT_HEAD_PREFIX: &str = "pc.head";

/// Three stride-2 convolution blocks with ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub in_channels: usize,
    /// Output channels per block; the last one is the feature dimension `D`.
    pub channels: [usize; 3],
}

impl ImageEncoder {
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    fn names(i: usize) -> (String, String) {
        (
            format!("{IMAGE_ENCODER_PREFIX}.conv{i}.weight"),
            format!("{IMAGE_ENCODER_PREFIX}.conv{i}.bias"),
        )
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let (w, b) = Self::names(i);
            params.insert(w, he_normal(vec![9, cin, cout], 9 * cin, rng));
            params.insert(b, Tensor::zeros(vec![cout]));
            cin = cout;
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: &Image, plan: &ImagePlan) -> Result<ImageFeatureMap> {
        if image.width != plan.width || image.height != plan.height || image.channels != self.in_channels {
            return Err(HeadError::ShapeMismatch {
                expected: plan.width * plan.height * self.in_channels,
                got: image.width * image.height * image.channels,
            });
        }
        let mut x = tape.constant(image.to_tensor());
        for (i, (rules, _, _)) in plan.stages.iter().enumerate() {
            let (wn, bn) = Self::names(i);
            let y = tape.conv(x, bound.get(&wn)?, rules.clone())?;
            let y = tape.add_row_broadcast(y, bound.get(&bn)?)?;
            x = tape.relu(y)?;
        }
        let (width, height) = plan.output_dims();
        Ok(ImageFeatureMap {
            width,
            height,
            channels: self.feature_dim(),
            feats: x,
        })
    }

    /// Untracked encoding; returns the `[H*·W*, D]` features and `(W*, H*)`.
    pub fn encode(&self, image: &Image, params: &ParamSet) -> Result<(Tensor, usize, usize)> {
        let plan = ImagePlan::new(image.width, image.height)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let fm = self.forward(&mut tape, &bound, image, &plan)?;
        Ok((tape.value(fm.feats).clone(), fm.width, fm.height))
    }
}

/// Lower clamp applied before the GeM power so `x^p` and `ln x` stay finite.
pub const GEM_EPS: f64 = 1e-6;

/// Generalized-mean pooling of `[N, D]` features into `[1, D]`:
/// `((1/N) Σ x^p)^(1/p)`, with `p` a one-element tensor on the tape.
pub fn gem_pool(tape: &mut Tape, feats: Var, p: Var) -> Result<Var> {
    if tape.value(feats).rows() == 0 || tape.value(feats).numel() == 0 {
        return Err(HeadError::EmptyInput);
    }
    let pv = tape.value(p).item();
    if !(pv > 0.0) {
        return Err(HeadError::NonPositiveP(pv));
    }
    let x = tape.clamp_min(feats, GEM_EPS)?;
    let xp = tape.pow_var(x, p)?;
    let m = tape.mean_rows(xp)?;
    let inv = tape.recip(p)?;
    Ok(tape.pow_var(m, inv)?)
}

/// Untracked GeM over rows of `features`.
pub fn gem_pool_values(features: &Tensor, p: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let pv = tape.constant(Tensor::vector(vec![p]));
    let out = gem_pool(&mut tape, f, pv)?;
    Ok(tape.value(out).data().to_vec())
}

/// GeM pooling followed by an affine projection to the descriptor size.
#[derive(Clone, Debug, PartialEq)]
pub struct GemFcn {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GemFcn {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn p_name(&self) -> String {
        format!("{}.p", self.prefix)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.fc.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.fc.bias", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.p_name(), self.weight_name(), self.bias_name()]
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        params.insert(self.p_name(), Tensor::vector(vec![GEM_P_INIT]));
        params.insert(self.weight_name(), he_normal(vec![self.in_dim, self.out_dim], self.in_dim, rng));
        params.insert(self.bias_name(), Tensor::zeros(vec![self.out_dim]));
    }

    /// `[N, D]` features to a `[1, D_g]` descriptor.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, feats: Var) -> Result<Var> {
        let p = bound.get(&self.p_name())?;
        let pooled = gem_pool(tape, feats, p)?;
        fcn_project(tape, bound, self, pooled)
    }
}

/// Affine map `pooled · W + b`; no normalization.
pub fn fcn_project(tape: &mut Tape, bound: &Bound, head: &GemFcn, pooled: Var) -> Result<Var> {
    let got = tape.value(pooled).cols();
    if got != head.in_dim {
        return Err(HeadError::ShapeMismatch {
            expected: head.in_dim,
            got,
        });
    }
    let y = tape.matmul(pooled, bound.get(&head.weight_name())?)?;
    Ok(tape.add_row_broadcast(y, bound.get(&head.bias_name())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> ImageEncoder {
        ImageEncoder {
            in_channels: 1,
            channels: [2, 3, 4],
        }
    }

    #[test]
    fn encoder_output_is_h_div_8() {
        let enc = encoder();
        let mut params = ParamSet::new();
        enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        for (w, h, ew, eh) in [(224, 224, 28, 28), (64, 64, 8, 8), (30, 30, 3, 3), (40, 17, 5, 2)] {
            let (t, ow, oh) = enc.encode(&Image::zeros(w, h, 1), &params).unwrap();
            assert_eq!((ow, oh), (ew, eh));
            assert_eq!(t.shape(), &[ew * eh, 4]);
        }
        assert_eq!(
            enc.encode(&Image::zeros(7, 64, 1), &params).unwrap_err(),
            HeadError::TooSmall { width: 7, height: 64 }
        );
    }

    #[test]
    fn gem_examples() {
        let f = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        assert!((gem_pool_values(&f, 1.0).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((gem_pool_values(&f, 2.0).unwrap()[0] - 5f64.sqrt()).abs() < 1e-12);
        let hi = gem_pool_values(&f, 100.0).unwrap()[0];
        assert!((hi - 3.0).abs() / 3.0 < 0.03 && hi <= 3.0);
        assert_eq!(gem_pool_values(&f, 0.0), Err(HeadError::NonPositiveP(0.0)));
        let empty = Tensor::zeros(vec![0, 1]);
        assert_eq!(gem_pool_values(&empty, 3.0), Err(HeadError::EmptyInput));
    }

    fn head_with(weight: Vec<f64>, bias: Vec<f64>, d: usize, dg: usize) -> (GemFcn, ParamSet) {
        let head = GemFcn::new("h", d, dg);
        let mut params = ParamSet::new();
        params.insert(head.p_name(), Tensor::vector(vec![3.0]));
        params.insert(head.weight_name(), Tensor::matrix(d, dg, weight).unwrap());
        params.insert(head.bias_name(), Tensor::vector(bias));
        (head, params)
    }

    #[test]
    fn fcn_identity_and_bias_only() {
        let (head, params) = head_with(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.7, -1.5]).unwrap());
        let y = fcn_project(&mut tape, &b, &head, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -1.5]);

        let (head, params) = head_with(vec![0.0; 4], vec![0.25, -4.0], 2, 2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::matrix(1, 2, vec![9.0, 3.0]).unwrap());
        let y = fcn_project(&mut tape, &b, &head, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);

        let x = tape.constant(Tensor::matrix(1, 3, vec![9.0, 3.0, 1.0]).unwrap());
        assert_eq!(
            fcn_project(&mut tape, &b, &head, x).unwrap_err(),
            HeadError::ShapeMismatch { expected: 2, got: 3 }
        );
    }
}

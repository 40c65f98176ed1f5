//! Encoders: a pluggable backbone followed by a two-layer projector, and the
//! student/teacher/teacher triple trained by gradient descent and EMA.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Debug;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Conv2dGeometry, Scalar, Tape, Tensor, Var, Variable};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    fn new(name: &str, shape: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            fan_in,
        }
    }
}

/// Maps an N×C×H×W image tensor to N×feat_dim features.
pub trait Backbone<T: Scalar>: Debug + Send + Sync {
    fn param_specs(&self) -> Vec<ParamSpec>;
    fn feat_dim(&self) -> usize;
    /// `(channels, height, width)` the backbone accepts.
    fn input_dims(&self) -> (usize, usize, usize);
    fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var>;
}

/// Two conv(3×3) → ReLU → 2×2 average-pool blocks, then global average pooling.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    pub in_dims: (usize, usize, usize),
    pub channels: (usize, usize),
}

impl<T: Scalar> Backbone<T> for ConvBackbone {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.in_dims.0;
        let (c1, c2) = self.channels;
        vec![
            ParamSpec::new("backbone.conv1.weight", &[c1, c, 3, 3], c * 9),
            ParamSpec::new("backbone.conv1.bias", &[c1], c * 9),
            ParamSpec::new("backbone.conv2.weight", &[c2, c1, 3, 3], c1 * 9),
            ParamSpec::new("backbone.conv2.bias", &[c2], c1 * 9),
        ]
    }

    fn feat_dim(&self) -> usize {
        self.channels.1
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        self.in_dims
    }

    fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let geom = Conv2dGeometry { pad: 1 };
        let h = tape.conv2d(x, p[0], p[1], geom)?;
        let h = tape.relu(h);
        let h = tape.avg_pool2(h)?;
        let h = tape.conv2d(h, p[2], p[3], geom)?;
        let h = tape.relu(h);
        let h = tape.avg_pool2(h)?;
        tape.global_avg_pool(h)
    }
}

/// Flatten → affine → ReLU. Small enough for exhaustive gradient checks.
#[derive(Debug, Clone)]
pub struct MlpBackbone {
    pub in_dims: (usize, usize, usize),
    pub feat_dim: usize,
}

impl<T: Scalar> Backbone<T> for MlpBackbone {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, h, w) = self.in_dims;
        let d = c * h * w;
        vec![
            ParamSpec::new("backbone.fc.weight", &[d, self.feat_dim], d),
            ParamSpec::new("backbone.fc.bias", &[self.feat_dim], d),
        ]
    }

    fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        self.in_dims
    }

    fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let (c, h, w) = self.in_dims;
        let flat = tape.reshape(x, &[n, c * h * w])?;
        let z = tape.matmul(flat, p[0])?;
        let z = tape.add_bias(z, p[1])?;
        Ok(tape.relu(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        conv1: usize,
        conv2: usize,
    },
    Mlp {
        channels: usize,
        height: usize,
        width: usize,
        feat_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backbone: BackboneSpec,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Subtract the batch mean from projector outputs. Embeddings then
    /// depend on the batch they are computed in; a single row maps to zero.
    #[serde(default = "default_center")]
    pub center_embeddings: bool,
}

fn default_center() -> bool {
    true
}

impl EncoderSpec {
    /// Default desk-scale conv encoder (feature width 64).
    pub fn conv(channels: usize, height: usize, width: usize) -> Self {
        EncoderSpec {
            backbone: BackboneSpec::Conv {
                channels,
                height,
                width,
                conv1: 32,
                conv2: 64,
            },
            hidden: 128,
            embed_dim: 32,
            center_embeddings: true,
        }
    }

    pub fn mlp(channels: usize, height: usize, width: usize, feat_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        EncoderSpec {
            backbone: BackboneSpec::Mlp {
                channels,
                height,
                width,
                feat_dim,
            },
            hidden,
            embed_dim,
            center_embeddings: true,
        }
    }

    pub fn build_backbone<T: Scalar>(&self) -> Result<Arc<dyn Backbone<T>>> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("encoder.{name}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("hidden", self.hidden)?;
        positive("embed_dim", self.embed_dim)?;
        Ok(match self.backbone {
            BackboneSpec::Conv {
                channels,
                height,
                width,
                conv1,
                conv2,
            } => {
                for (n, v) in [("channels", channels), ("conv1", conv1), ("conv2", conv2)] {
                    positive(n, v)?;
                }
                if height < 4 || width < 4 {
                    return Err(Error::config("encoder.height", "conv backbone needs at least 4x4 inputs"));
                }
                Arc::new(ConvBackbone {
                    in_dims: (channels, height, width),
                    channels: (conv1, conv2),
                })
            }
            BackboneSpec::Mlp {
                channels,
                height,
                width,
                feat_dim,
            } => {
                for (n, v) in [("channels", channels), ("height", height), ("width", width), ("feat_dim", feat_dim)] {
                    positive(n, v)?;
                }
                Arc::new(MlpBackbone {
                    in_dims: (channels, height, width),
                    feat_dim,
                })
            }
        })
    }
}

/// Backbone + projector `feat → hidden → embed` with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    spec: EncoderSpec,
    backbone: Arc<dyn Backbone<T>>,
    names: Vec<String>,
    params: Vec<Variable<T>>,
    backbone_len: usize,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub params: Vec<Var>,
    pub features: Var,
    pub embedding: Var,
}

impl<T: Scalar> Network<T> {
    /// Fan-in uniform initialization `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(spec: &EncoderSpec, rng: &SeededRng, requires_grad: bool) -> Result<Self> {
        let backbone = spec.build_backbone::<T>()?;
        let mut specs = backbone.param_specs();
        let backbone_len = specs.len();
        let feat = backbone.feat_dim();
        specs.push(ParamSpec::new("projector.fc1.weight", &[feat, spec.hidden], feat));
        specs.push(ParamSpec::new("projector.fc1.bias", &[spec.hidden], feat));
        specs.push(ParamSpec::new("projector.fc2.weight", &[spec.hidden, spec.embed_dim], spec.hidden));
        specs.push(ParamSpec::new("projector.fc2.bias", &[spec.embed_dim], spec.hidden));

        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (k, ps) in specs.into_iter().enumerate() {
            let mut r = rng.substream(k as u64).rng();
            let bound = 1.0 / (ps.fan_in as f64).sqrt();
            let n: usize = ps.shape.iter().product();
            let data = (0..n).map(|_| T::of(r.random_range(-bound..bound))).collect();
            params.push(Variable::new(Tensor::new(&ps.shape, data)?, requires_grad));
            names.push(ps.name);
        }
        Ok(Network {
            spec: spec.clone(),
            backbone,
            names,
            params,
            backbone_len,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.backbone.input_dims()
    }

    pub fn feat_dim(&self) -> usize {
        self.backbone.feat_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Variable<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Variable<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.params.iter_mut().for_each(|p| p.requires_grad = flag);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Variable::zero_grad);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.input_dims();
        match x.shape() {
            [_, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w) => Ok(()),
            other => Err(Error::shape("network input", other, &[0, c, h, w])),
        }
    }

    /// Records backbone and projector on `tape`. Parameters enter as leaves
    /// that carry gradients only if the network requires them.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.watch(p)).collect();
        self.run(tape, x, params)
    }

    /// Forward pass with caller-supplied parameter handles, in
    /// [`Network::param_names`] order. Used by gradient checks.
    pub fn forward_with_params(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        if params.len() != self.params.len() {
            return Err(Error::shape("parameter handles", &[params.len()], &[self.params.len()]));
        }
        self.run(tape, x, params.to_vec())
    }

    fn run(&self, tape: &mut Tape<T>, x: Var, params: Vec<Var>) -> Result<ForwardPass> {
        let features = self.backbone.forward(tape, &params[..self.backbone_len], x)?;
        let proj = &params[self.backbone_len..];
        let h = tape.matmul(features, proj[0])?;
        let h = tape.add_bias(h, proj[1])?;
        let h = tape.relu(h);
        let z = tape.matmul(h, proj[2])?;
        let embedding = tape.add_bias(z, proj[3])?;
        let embedding = if self.spec.center_embeddings {
            tape.center_cols(embedding)?
        } else {
            embedding
        };
        Ok(ForwardPass {
            params,
            features,
            embedding,
        })
    }

    /// Projector output without gradient tracking.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_frozen(&mut tape, xv)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Backbone output without gradient tracking.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params: Vec<Var> = self.params[..self.backbone_len]
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let f = self.backbone.forward(&mut tape, &params, xv)?;
        Ok(tape.value(f).clone())
    }

    fn forward_frozen(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        self.run(tape, x, params)
    }

    /// Largest absolute parameter difference to another network of the same shape.
    pub fn max_param_diff(&self, other: &Self) -> Result<T> {
        self.check_compatible(other)?;
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(T::zero(), T::max))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape("network structure", &[self.params.len()], &[other.params.len()]));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape("network parameter", a.value.shape(), b.value.shape()));
            }
        }
        Ok(())
    }

    /// Hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Overwrites the parameter values (used by checkpoint loading).
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("load_values", &[self.params.len()], &[values.len()]));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("load_values", p.value.shape(), v.shape()));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// θ_teacher ← m·θ_teacher + (1 − m)·θ_student for every parameter.
pub fn ema_update<T: Scalar>(teacher: &mut Network<T>, student: &Network<T>, m: T) -> Result<()> {
    if !(m >= T::zero() && m <= T::one()) {
        return Err(Error::param("m", format!("momentum {m} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    let keep = T::one() - m;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = m * *tv + keep * sv;
        }
    }
    Ok(())
}

/// One gradient-trained student and two EMA teachers.
#[derive(Debug, Clone)]
pub struct TriNetwork<T: Scalar> {
    pub student: Network<T>,
    pub teacher1: Network<T>,
    pub teacher2: Network<T>,
    pub m1: T,
    pub m2: T,
}

impl<T: Scalar> TriNetwork<T> {
    pub fn new(spec: &EncoderSpec, rng: &SeededRng, m1: T, m2: T) -> Result<Self> {
        for (name, m) in [("m1", m1), ("m2", m2)] {
            if !(m >= T::zero() && m <= T::one()) {
                return Err(Error::param(name, format!("momentum {m} outside [0, 1]")));
            }
        }
        let student = Network::new(spec, rng, true)?;
        let mut tri = TriNetwork {
            teacher1: student.clone(),
            teacher2: student.clone(),
            student,
            m1,
            m2,
        };
        tri.init_teachers();
        Ok(tri)
    }

    /// Makes both teachers deep copies of the student that take no gradient.
    pub fn init_teachers(&mut self) {
        for teacher in [&mut self.teacher1, &mut self.teacher2] {
            *teacher = self.student.clone();
            teacher.set_requires_grad(false);
            teacher.zero_grad();
        }
    }

    pub fn update_teacher1(&mut self) -> Result<()> {
        ema_update(&mut self.teacher1, &self.student, self.m1)
    }

    pub fn update_teacher2(&mut self) -> Result<()> {
        ema_update(&mut self.teacher2, &self.student, self.m2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EncoderSpec {
        EncoderSpec::mlp(1, 3, 3, 6, 8, 4)
    }

    fn batch(n: usize) -> Tensor<f64> {
        Tensor::new(&[n, 1, 3, 3], (0..n * 9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_zero_embedding() {
        let mut net = Network::<f64>::new(&spec(), &SeededRng::new(1), true).unwrap();
        let k = net.params().len();
        net.params_mut()[k - 2].value.fill(0.0);
        net.params_mut()[k - 1].value.fill(0.0);
        let z = net.embed(&batch(3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_shape() {
        let spec = EncoderSpec {
            embed_dim: 16,
            ..EncoderSpec::conv(3, 8, 8)
        };
        let net = Network::<f32>::new(&spec, &SeededRng::new(2), true).unwrap();
        let x = Tensor::<f32>::full(&[4, 3, 8, 8], 0.5);
        assert_eq!(net.embed(&x).unwrap().shape(), &[4, 16]);
        assert_eq!(net.features(&x).unwrap().shape(), &[4, 64]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::<f64>::new(&spec(), &SeededRng::new(1), true).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
        assert!(matches!(net.embed(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn teachers_start_as_copies() {
        let mut tri = TriNetwork::<f64>::new(&spec(), &SeededRng::new(3), 0.99, 0.95).unwrap();
        assert_eq!(tri.teacher1.max_param_diff(&tri.student).unwrap(), 0.0);
        assert_eq!(tri.teacher2.max_param_diff(&tri.student).unwrap(), 0.0);
        assert_eq!(tri.student.param_count(), tri.teacher1.param_count());
        let x = batch(2);
        assert_eq!(tri.teacher1.embed(&x).unwrap(), tri.student.embed(&x).unwrap());

        let before = tri.teacher1.fingerprint();
        tri.student.params_mut()[0].value.fill(9.0);
        assert_eq!(tri.teacher1.fingerprint(), before);
        assert!(tri.teacher1.params().iter().all(|p| !p.requires_grad));
    }

    #[test]
    fn ema_edge_cases() {
        let student = Network::<f64>::new(&spec(), &SeededRng::new(4), true).unwrap();
        let orig = Network::<f64>::new(&spec(), &SeededRng::new(5), false).unwrap();

        let mut t = orig.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.max_param_diff(&orig).unwrap(), 0.0);

        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.max_param_diff(&student).unwrap(), 0.0);

        assert!(ema_update(&mut t, &student, 1.5).is_err());
    }

    #[test]
    fn ema_scalar_arithmetic() {
        let mut teacher = Network::<f64>::new(&spec(), &SeededRng::new(4), false).unwrap();
        let mut student = teacher.clone();
        teacher.params_mut().iter_mut().for_each(|p| p.value.fill(1.0));
        student.params_mut().iter_mut().for_each(|p| p.value.fill(0.0));
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert!(teacher.params().iter().all(|p| p.value.data().iter().all(|&v| v == 0.99)));
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut a = Network::<f64>::new(&spec(), &SeededRng::new(4), false).unwrap();
        let b = Network::<f64>::new(&EncoderSpec::mlp(1, 3, 3, 5, 8, 4), &SeededRng::new(4), true).unwrap();
        assert!(ema_update(&mut a, &b, 0.5).is_err());
    }
}

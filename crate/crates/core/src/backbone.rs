//! Toy shared-weight encoder, projection head, classifier and CAM head.
//!
//! Three stride-2 stem convolutions take the input to 1/8 resolution (`F4`),
//! two stride-1 blocks follow (`F5`, `F6`), and a 1×1 projection with ReLU
//! yields the pixel features `X` used by the classifier, the CAMs and the
//! contrastive branch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Channel widths of every learned layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Stem (three stages) then the two stride-1 blocks: c₁..c₅.
    pub channels: [usize; 5],
    /// Reduced widths for F4, F5, F6.
    pub reduce: [usize; 3],
    pub shallow_dim: usize,
    pub deep_dim: usize,
    pub proj_dim: usize,
    pub classes: usize,
}

impl ArchConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            channels: [16, 24, 32, 48, 48],
            reduce: [16, 32, 32],
            shallow_dim: 16,
            deep_dim: 32,
            proj_dim: 32,
            classes,
        }
    }

    /// Name and shape of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2, c3, c4, c5] = self.channels;
        let [r4, r5, r6] = self.reduce;
        let (d, c) = (self.proj_dim, self.classes);
        vec![
            ("stem1.w", vec![c1, 3, 3, 3]),
            ("stem1.b", vec![c1]),
            ("stem2.w", vec![c2, c1, 3, 3]),
            ("stem2.b", vec![c2]),
            ("stem3.w", vec![c3, c2, 3, 3]),
            ("stem3.b", vec![c3]),
            ("block5.w", vec![c4, c3, 3, 3]),
            ("block5.b", vec![c4]),
            ("block6.w", vec![c5, c4, 3, 3]),
            ("block6.b", vec![c5]),
            ("proj.w", vec![d, c5, 1, 1]),
            ("proj.b", vec![d]),
            ("classifier.w", vec![c, d]),
            ("reduce4.w", vec![r4, c3, 1, 1]),
            ("reduce4.b", vec![r4]),
            ("reduce5.w", vec![r5, c4, 1, 1]),
            ("reduce5.b", vec![r5]),
            ("reduce6.w", vec![r6, c5, 1, 1]),
            ("reduce6.b", vec![r6]),
            ("fuse_shallow.w", vec![self.shallow_dim, r4 + 3, 1, 1]),
            ("fuse_shallow.b", vec![self.shallow_dim]),
            ("fuse_deep.w", vec![self.deep_dim, r5 + r6, 1, 1]),
            ("fuse_deep.b", vec![self.deep_dim]),
            ("fuse_pcm.w", vec![self.deep_dim, r4 + r5 + 3, 1, 1]),
            ("fuse_pcm.b", vec![self.deep_dim]),
            ("seg.w", vec![c + 1, c5, 1, 1]),
            ("seg.b", vec![c + 1]),
        ]
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    /// He-normal weights (std = √(2 / fan_in)) from a seeded stream, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = arch.param_shapes();
        shapes.sort_by_key(|(name, _)| *name);
        let tensors = shapes
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![0.0; numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                (name.to_string(), Tensor::new(shape, data).expect("shape"))
            })
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks names and shapes against `arch`.
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let expected = arch.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter leaves registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Backbone outputs for one view, all at 1/8 input resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f4: Var,
    pub f5: Var,
    pub f6: Var,
    /// Projected features, post-ReLU.
    pub x: Var,
}

/// Convolution + per-channel bias.
pub(crate) fn conv_bias(
    g: &mut Graph,
    input: Var,
    params: &BoundParams,
    layer: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = g.conv2d(input, params.var(&format!("{layer}.w")), stride, pad)?;
    g.add_channel_bias(y, params.var(&format!("{layer}.b")))
}

fn conv_relu(g: &mut Graph, input: Var, params: &BoundParams, layer: &str, stride: usize) -> Result<Var> {
    let y = conv_bias(g, input, params, layer, stride, 1)?;
    g.relu(y)
}

/// Pixel values in `[0, 1]` are mapped to `(v - INPUT_MEAN) / INPUT_STD` before the stem.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Runs the encoder on a `[3, H, W]` image with `H`, `W` divisible by 8.
pub fn encode(g: &mut Graph, image: Var, params: &BoundParams) -> Result<FeaturePyramid> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
        return Err(invalid(format!(
            "encoder input must be [3, H, W] with H, W divisible by 8, got {s:?}"
        )));
    }
    let centred = g.add_scalar(image, -INPUT_MEAN)?;
    let input = g.mul_scalar(centred, 1.0 / INPUT_STD)?;
    let h = conv_relu(g, input, params, "stem1", 2)?;
    let h = conv_relu(g, h, params, "stem2", 2)?;
    let f4 = conv_relu(g, h, params, "stem3", 2)?;
    let f5 = conv_relu(g, f4, params, "block5", 1)?;
    let f6 = conv_relu(g, f5, params, "block6", 1)?;
    let x = conv_bias(g, f6, params, "proj", 1, 0)?;
    let x = g.relu(x)?;
    Ok(FeaturePyramid { f4, f5, f6, x })
}

/// `logits = w_θ · GAP(X)`.
pub fn classify(g: &mut Graph, x: Var, classifier: Var) -> Result<Var> {
    let d = g.shape(x)[0];
    if g.shape(classifier).len() != 2 || g.shape(classifier)[1] != d {
        return Err(invalid("classifier width does not match feature channels"));
    }
    let pooled = g.global_avg_pool(x)?;
    let pooled = g.reshape(pooled, &[d, 1])?;
    let logits = g.matmul(classifier, pooled)?;
    let c = g.shape(classifier)[0];
    g.reshape(logits, &[c])
}

/// Class maps before the ReLU: `w_θ X` per pixel.
pub fn cam_scores(g: &mut Graph, x: Var, classifier: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || g.shape(classifier).len() != 2 || g.shape(classifier)[1] != s[0] {
        return Err(invalid("CAM head shapes do not agree"));
    }
    let c = g.shape(classifier)[0];
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let scores = g.matmul(classifier, flat)?;
    g.reshape(scores, &[c, s[1], s[2]])
}

/// `M̃ = ReLU(w_θ X)`, shape `[C, h, w]`.
pub fn raw_cams(g: &mut Graph, x: Var, classifier: Var) -> Result<Var> {
    let scores = cam_scores(g, x, classifier)?;
    g.relu(scores)
}

/// 1×1 segmentation head over `F6`: `[C+1, h, w]` logits, channel 0 = background.
pub fn seg_branch(g: &mut Graph, f6: Var, params: &BoundParams) -> Result<Var> {
    conv_bias(g, f6, params, "seg", 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    fn zero_biases(p: &mut Params) {
        for (name, t) in p.iter_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn mean_grey_image_gives_zero_pyramid() {
        let arch = ArchConfig::desk(4);
        let mut p = Params::init(&arch, 3);
        zero_biases(&mut p);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 64, 64], INPUT_MEAN));
        let pyr = encode(&mut g, img, &b).unwrap();
        for v in [pyr.f4, pyr.f5, pyr.f6, pyr.x] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn stride_eight_everywhere() {
        let arch = ArchConfig::desk(4);
        let p = Params::init(&arch, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let img = g.constant(random(&[3, 64, 64], 9));
        let pyr = encode(&mut g, img, &b).unwrap();
        assert_eq!(g.shape(pyr.f4), &[32, 8, 8]);
        assert_eq!(g.shape(pyr.f5), &[48, 8, 8]);
        assert_eq!(g.shape(pyr.f6), &[48, 8, 8]);
        assert_eq!(g.shape(pyr.x), &[32, 8, 8]);
        assert!(g.value(pyr.x).data().iter().all(|&v| v >= 0.0));

        let small = g.constant(random(&[3, 32, 32], 10));
        let pyr2 = encode(&mut g, small, &b).unwrap();
        assert_eq!(g.shape(pyr2.x), &[32, 4, 4]);

        let odd = g.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(encode(&mut g, odd, &b).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let arch = ArchConfig::desk(4);
        assert_eq!(Params::init(&arch, 5), Params::init(&arch, 5));
        assert_ne!(Params::init(&arch, 5), Params::init(&arch, 6));
        let p = Params::init(&arch, 5);
        let run = || {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let img = g.constant(random(&[3, 64, 64], 2));
            let pyr = encode(&mut g, img, &b).unwrap();
            g.value(pyr.x).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn shared_weights_reach_both_views() {
        let arch = ArchConfig::desk(4);
        let mut p = Params::init(&arch, 5);
        let views = |p: &Params| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let a = g.constant(random(&[3, 64, 64], 2));
            let s = g.constant(random(&[3, 32, 32], 3));
            let x1 = encode(&mut g, a, &b).unwrap().x;
            let x2 = encode(&mut g, s, &b).unwrap().x;
            (g.value(x1).clone(), g.value(x2).clone())
        };
        let (a0, b0) = views(&p);
        p.get_mut("proj.b").unwrap().data_mut()[0] += 0.5;
        let (a1, b1) = views(&p);
        assert!(a0.max_abs_diff(&a1) > 0.0);
        assert!(b0.max_abs_diff(&b1) > 0.0);
    }

    #[test]
    fn classifier_examples() {
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 2, 2], 1));
        let w0 = g.constant(Tensor::zeros(&[4, 3]));
        let l = classify(&mut g, x, w0).unwrap();
        assert_eq!(g.value(l).data(), &[0.0; 4]);

        let mut data = vec![];
        for v in [1.0, -2.0, 0.5] {
            data.extend([v; 4]);
        }
        let xc = g.constant(Tensor::new(vec![3, 2, 2], data).unwrap());
        let w = random(&[2, 3], 4);
        let wv = g.constant(w.clone());
        let l = classify(&mut g, xc, wv).unwrap();
        for c in 0..2 {
            let expect = w.at(&[c, 0]) - 2.0 * w.at(&[c, 1]) + 0.5 * w.at(&[c, 2]);
            assert!((g.value(l).data()[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn cam_selector() {
        let mut g = Graph::new();
        let xt = random(&[3, 2, 2], 1);
        let x = g.constant(xt.clone());
        let mut w = Tensor::zeros(&[2, 3]);
        w.data_mut()[3 + 1] = 1.0; // class 1 selects channel 1
        let wv = g.constant(w);
        let m = raw_cams(&mut g, x, wv).unwrap();
        for i in 0..4 {
            assert_eq!(g.value(m).data()[4 + i], xt.data()[4 + i].max(0.0));
            assert_eq!(g.value(m).data()[i], 0.0);
        }
        let zx = g.constant(Tensor::zeros(&[3, 2, 2]));
        let m = raw_cams(&mut g, zx, wv).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }
}

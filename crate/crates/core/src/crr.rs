//! Cross-representation refinement of CAMs.
//!
//! Shallow features (reduced `F4` concatenated with the image) and deep
//! features (reduced `F5` and `F6`) each define a ReLU-cosine pixel affinity.
//! Row-normalising both and averaging them gives a random-walk operator that
//! propagates raw CAM scores between similar pixels.

use crate::backbone::{conv_bias, BoundParams, FeaturePyramid};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Norm guard used for every cosine in this module.
pub const COSINE_EPS: f64 = 1e-8;

/// Inter-pixel affinity before and after L1 row normalisation.
#[derive(Clone, Copy, Debug)]
pub struct Affinity {
    /// Symmetric, unit diagonal, entries in `[0, 1]`.
    pub raw: Var,
    /// Rows sum to one.
    pub normalized: Var,
}

/// `F_s = Conv1×1([Conv1×1(F4) ⊕ I↓])` with the image resized to the feature grid.
pub fn build_shallow(g: &mut Graph, f4: Var, image: Var, params: &BoundParams) -> Result<Var> {
    let (h, w) = (g.shape(f4)[1], g.shape(f4)[2]);
    let reduced = conv_bias(g, f4, params, "reduce4", 1, 0)?;
    let small = g.bilinear_resize(image, h, w)?;
    let cat = g.concat(&[reduced, small], 0)?;
    conv_bias(g, cat, params, "fuse_shallow", 1, 0)
}

/// `F_d = Conv1×1([Conv1×1(F5) ⊕ Conv1×1(F6)])`.
pub fn build_deep(g: &mut Graph, f5: Var, f6: Var, params: &BoundParams) -> Result<Var> {
    if g.shape(f5)[1..] != g.shape(f6)[1..] {
        return Err(invalid("F5 and F6 grids differ"));
    }
    let r5 = conv_bias(g, f5, params, "reduce5", 1, 0)?;
    let r6 = conv_bias(g, f6, params, "reduce6", 1, 0)?;
    let cat = g.concat(&[r5, r6], 0)?;
    conv_bias(g, cat, params, "fuse_deep", 1, 0)
}

/// Single fused feature over reduced `F4`, reduced `F5` and the image, used
/// by the PCM-style comparison mode.
pub fn build_pcm(g: &mut Graph, pyr: &FeaturePyramid, image: Var, params: &BoundParams) -> Result<Var> {
    let (h, w) = (g.shape(pyr.f4)[1], g.shape(pyr.f4)[2]);
    let r4 = conv_bias(g, pyr.f4, params, "reduce4", 1, 0)?;
    let r5 = conv_bias(g, pyr.f5, params, "reduce5", 1, 0)?;
    let small = g.bilinear_resize(image, h, w)?;
    let cat = g.concat(&[r4, r5, small], 0)?;
    conv_bias(g, cat, params, "fuse_pcm", 1, 0)
}

/// `A(i, j) = ReLU(cos(F(:, i), F(:, j)))` over the `h·w` pixels of `[d, h, w]` features.
pub fn pixel_affinity(g: &mut Graph, features: Var) -> Result<Affinity> {
    let s = g.shape(features).to_vec();
    if s.len() != 3 {
        return Err(invalid(format!("pixel_affinity expects [d,h,w], got {s:?}")));
    }
    let n = s[1] * s[2];
    let flat = g.reshape(features, &[s[0], n])?;
    let unit = g.l2_normalize(flat, 0, COSINE_EPS)?;
    let unit_t = g.transpose(unit)?;
    let gram = g.matmul(unit_t, unit)?;
    let gated = g.relu(gram)?;
    // Pin the diagonal to exactly 1 (also for zero-norm pixels).
    let mut off = Tensor::full(&[n, n], 1.0);
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        off.data_mut()[i * n + i] = 0.0;
        eye.data_mut()[i * n + i] = 1.0;
    }
    let off = g.constant(off);
    let eye = g.constant(eye);
    let masked = g.mul(gated, off)?;
    let raw = g.add(masked, eye)?;
    let normalized = row_normalize(g, raw)?;
    Ok(Affinity { raw, normalized })
}

/// Divides each row by its sum.
pub fn row_normalize(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let sums = g.sum_axis(a, 1)?;
    let sums = g.reshape(sums, &[s[0], 1])?;
    let sums = g.expand(sums, &s)?;
    g.div(a, sums)
}

/// `M(c, i) = Σ_j Ā(i, j) M̃(c, j)` with `Ā = (A_s + A_d) / 2`.
pub fn refine_cams(g: &mut Graph, cams: Var, a_s: Var, a_d: Var) -> Result<Var> {
    let mean = g.add(a_s, a_d)?;
    let mean = g.mul_scalar(mean, 0.5)?;
    propagate(g, cams, mean)
}

/// `M(c, i) = Σ_j A(i, j) M̃(c, j)` for a single row-stochastic operator.
pub fn propagate(g: &mut Graph, cams: Var, affinity: Var) -> Result<Var> {
    let s = g.shape(cams).to_vec();
    if s.len() != 3 {
        return Err(invalid(format!("CAMs must be [C,h,w], got {s:?}")));
    }
    let n = s[1] * s[2];
    if g.shape(affinity) != [n, n] {
        return Err(invalid(format!(
            "affinity {:?} does not match a {}x{} CAM grid",
            g.shape(affinity),
            s[1],
            s[2]
        )));
    }
    let flat = g.reshape(cams, &[s[0], n])?;
    let a_t = g.transpose(affinity)?;
    let out = g.matmul(flat, a_t)?;
    g.reshape(out, &s)
}

/// How CAMs are refined for one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    /// Refined CAMs equal raw CAMs.
    Off,
    /// Shallow + deep affinities.
    CrossRepresentation,
    /// One affinity over a single fused feature.
    Pcm,
}

/// Output of [`refine_view`].
#[derive(Clone, Debug)]
pub struct Refined {
    pub cams: Var,
    pub affinities: Vec<Affinity>,
}

/// Applies `mode` to one view's raw CAMs. With `detach_affinity` the
/// propagation operator is treated as a constant.
pub fn refine_view(
    g: &mut Graph,
    mode: RefineMode,
    raw: Var,
    pyr: &FeaturePyramid,
    image: Var,
    params: &BoundParams,
    detach_affinity: bool,
) -> Result<Refined> {
    let maybe_detach = |g: &mut Graph, v: Var| if detach_affinity { g.detach(v) } else { Ok(v) };
    match mode {
        RefineMode::Off => Ok(Refined {
            cams: raw,
            affinities: Vec::new(),
        }),
        RefineMode::CrossRepresentation => {
            let fs = build_shallow(g, pyr.f4, image, params)?;
            let fd = build_deep(g, pyr.f5, pyr.f6, params)?;
            let a_s = pixel_affinity(g, fs)?;
            let a_d = pixel_affinity(g, fd)?;
            let ns = maybe_detach(g, a_s.normalized)?;
            let nd = maybe_detach(g, a_d.normalized)?;
            let cams = refine_cams(g, raw, ns, nd)?;
            Ok(Refined {
                cams,
                affinities: vec![a_s, a_d],
            })
        }
        RefineMode::Pcm => {
            let f = build_pcm(g, pyr, image, params)?;
            let a = pixel_affinity(g, f)?;
            let n = maybe_detach(g, a.normalized)?;
            let cams = propagate(g, raw, n)?;
            Ok(Refined {
                cams,
                affinities: vec![a],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Two pixels laid out on a 1×2 grid.
    fn affinity_of(a: [f64; 2], b: [f64; 2]) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let f = g.constant(t(&[2, 1, 2], &[a[0], b[0], a[1], b[1]]));
        let aff = pixel_affinity(&mut g, f).unwrap();
        (g.value(aff.raw).clone(), g.value(aff.normalized).clone())
    }

    #[test]
    fn identical_pixels() {
        let (raw, norm) = affinity_of([1.0, 0.0], [1.0, 0.0]);
        assert_eq!(raw.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(norm.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn orthogonal_pixels() {
        let (raw, _) = affinity_of([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(raw.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn diagonal_vectors() {
        let (raw, _) = affinity_of([1.0, 1.0], [1.0, 0.0]);
        let c = 1.0 / 2f64.sqrt();
        assert!((raw.data()[1] - c).abs() < 1e-15);
        assert!((raw.data()[2] - c).abs() < 1e-15);
    }

    #[test]
    fn refine_examples() {
        let mut g = Graph::new();
        let cams = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let half = g.constant(t(&[2, 2], &[0.5; 4]));
        let m = refine_cams(&mut g, cams, half, half).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = refine_cams(&mut g, cams, eye, eye).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.0]);

        let uni = g.constant(Tensor::full(&[4, 4], 0.25));
        let cams = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 4.0, 0.0]));
        let m = refine_cams(&mut g, cams, uni, uni).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0]);

        let wrong = g.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        assert!(refine_cams(&mut g, cams, wrong, wrong).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_fusions() {
        use crate::backbone::{ArchConfig, Params};
        let arch = ArchConfig::desk(4);
        let mut p = Params::init(&arch, 1);
        for (name, v) in p.iter_mut() {
            if name.ends_with(".b") {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let f4 = g.constant(Tensor::zeros(&[32, 8, 8]));
        let f5 = g.constant(Tensor::zeros(&[48, 8, 8]));
        let img = g.constant(Tensor::zeros(&[3, 64, 64]));
        let fs = build_shallow(&mut g, f4, img, &b).unwrap();
        assert_eq!(g.shape(fs), &[16, 8, 8]);
        assert!(g.value(fs).data().iter().all(|&v| v == 0.0));
        let fd = build_deep(&mut g, f5, f5, &b).unwrap();
        assert_eq!(g.shape(fd), &[32, 8, 8]);
        assert!(g.value(fd).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_only_reaches_image_columns() {
        use crate::backbone::{ArchConfig, Params};
        let arch = ArchConfig::desk(4);
        let p = Params::init(&arch, 2);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let f4 = g.constant(Tensor::zeros(&[32, 8, 8]));
        let img = g.constant(Tensor::full(&[3, 64, 64], 0.3));
        let fs = build_shallow(&mut g, f4, img, &b).unwrap();
        // reduce4 has zero bias, so only the image columns of the fusion act.
        let w = p.get("fuse_shallow.w").unwrap();
        let r4 = arch.reduce[0];
        for o in 0..16 {
            let expect: f64 = (0..3).map(|c| w.at(&[o, r4 + c, 0, 0]) * 0.3).sum();
            for i in 0..64 {
                assert!((g.value(fs).data()[o * 64 + i] - expect).abs() < 1e-14);
            }
        }
    }
}

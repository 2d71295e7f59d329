//! Compensatory CAMs and the L1 feedback loss.
//!
//! For every present class the top-K refined-CAM pixels of an image select
//! anchor features from the other view's batch-wide feature bank. A softmax
//! over the whole bank spreads each anchor's CAM score to similar pixels
//! anywhere in the batch; the slice belonging to the image is added to the
//! refined CAM and used as a fixed target for the raw CAM.

use crate::ctr::CAM_MAX_EPS;
use crate::error::{invalid, Result};
use crate::tensor::{topk_indices, Graph, Var};

/// Unit pixel features of one view for the whole batch, `[n·h·w, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchFeatureBank {
    pub rows: Var,
    pub images: usize,
    pub pixels_per_image: usize,
}

impl BatchFeatureBank {
    /// Stacks per-image unit features `[D, h, w]` in batch order.
    pub fn build(g: &mut Graph, per_image: &[Var]) -> Result<Self> {
        let first = per_image.first().ok_or_else(|| invalid("empty feature bank"))?;
        let s = g.shape(*first).to_vec();
        let (d, hw) = (s[0], s[1..].iter().product::<usize>());
        let mut parts = Vec::with_capacity(per_image.len());
        for &x in per_image {
            if g.shape(x) != s.as_slice() {
                return Err(invalid("feature bank images differ in shape"));
            }
            let flat = g.reshape(x, &[d, hw])?;
            parts.push(g.transpose(flat)?);
        }
        let rows = g.concat(&parts, 0)?;
        Ok(Self {
            rows,
            images: per_image.len(),
            pixels_per_image: hw,
        })
    }

    pub fn len(&self) -> usize {
        self.images * self.pixels_per_image
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `softmax(anchors · bankᵀ)` over the bank axis: `[K, n·h·w]`.
pub fn global_affinity(g: &mut Graph, bank: &BatchFeatureBank, anchors: Var) -> Result<Var> {
    let bank_t = g.transpose(bank.rows)?;
    let logits = g.matmul(anchors, bank_t)?;
    g.softmax(logits, 1)
}

/// Compensatory CAMs of one image.
#[derive(Clone, Debug)]
pub struct CompensatoryCams {
    /// `[classes.len(), h·w]`.
    pub cams: Var,
    pub classes: Vec<usize>,
    pub anchors: Vec<Vec<usize>>,
}

/// `M̂_c(j) = (1/K) Σ_{i∈Φ_c} M_{c,i} A_g(i, j) + M_c(j)` for pixels `j` of image `image`.
pub fn compensatory_cams(
    g: &mut Graph,
    refined: Var,
    bank: &BatchFeatureBank,
    image: usize,
    classes: &[usize],
    k: usize,
) -> Result<CompensatoryCams> {
    let s = g.shape(refined).to_vec();
    let hw = s[1] * s[2];
    if hw != bank.pixels_per_image || image >= bank.images {
        return Err(invalid("refined CAMs do not match the feature bank"));
    }
    let k = k.min(hw);
    let flat = g.reshape(refined, &[s[0], hw])?;
    let mut rows = Vec::with_capacity(classes.len());
    let mut anchors = Vec::with_capacity(classes.len());
    for &c in classes {
        let values = &g.value(refined).data()[c * hw..(c + 1) * hw];
        let idx = topk_indices(values, k)?;
        g.note_discrete(&idx);
        let bank_idx: Vec<usize> = idx.iter().map(|&i| image * hw + i).collect();
        let feats = g.select_rows(bank.rows, &bank_idx)?;
        let aff = global_affinity(g, bank, feats)?;
        let weight_idx: Vec<usize> = idx.iter().map(|&i| c * hw + i).collect();
        let weights = g.gather(refined, &weight_idx, &[1, k])?;
        let spread = g.matmul(weights, aff)?;
        let own: Vec<usize> = (image * hw..(image + 1) * hw).collect();
        let spread = g.select_cols(spread, &own)?;
        let spread = g.mul_scalar(spread, 1.0 / k as f64)?;
        let base = g.select_rows(flat, &[c])?;
        rows.push(g.add(spread, base)?);
        anchors.push(idx);
    }
    let cams = g.concat(&rows, 0)?;
    Ok(CompensatoryCams {
        cams,
        classes: classes.to_vec(),
        anchors,
    })
}

fn row_max_normalize(g: &mut Graph, rows: Var) -> Result<Var> {
    let shape = g.shape(rows).to_vec();
    let m = g.max_axis(rows, 1)?;
    let m = g.add_scalar(m, CAM_MAX_EPS)?;
    let m = g.reshape(m, &[shape[0], 1])?;
    let m = g.expand(m, &shape)?;
    g.div(rows, m)
}

/// `mean |M̂ − M̃|` over present classes and pixels, `M̂` detached unless `detach_target` is false.
///
/// With `normalized`, each class row of both maps is first divided by its own maximum.
pub fn com_loss(
    g: &mut Graph,
    comp: &CompensatoryCams,
    raw: Var,
    detach_target: bool,
    normalized: bool,
) -> Result<Var> {
    let s = g.shape(raw).to_vec();
    let flat = g.reshape(raw, &[s[0], s[1] * s[2]])?;
    let mut raw_rows = g.select_rows(flat, &comp.classes)?;
    let mut target = if detach_target { g.detach(comp.cams)? } else { comp.cams };
    if normalized {
        target = row_max_normalize(g, target)?;
        raw_rows = row_max_normalize(g, raw_rows)?;
    }
    let diff = g.sub(target, raw_rows)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_bank_rows_give_uniform_affinity() {
        let mut g = Graph::new();
        let rows = g.constant(t(&[4, 2], &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]));
        let bank = BatchFeatureBank {
            rows,
            images: 2,
            pixels_per_image: 2,
        };
        let anchors = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = global_affinity(&mut g, &bank, anchors).unwrap();
        assert!(g.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn one_matching_row() {
        let mut g = Graph::new();
        let rows = g.constant(t(&[3, 2], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 3,
        };
        let anchors = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let a = global_affinity(&mut g, &bank, anchors).unwrap();
        let e = 1f64.exp();
        let z = e + 2.0;
        let expect = [1.0 / z, e / z, 1.0 / z];
        for (v, w) in g.value(a).data().iter().zip(expect) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_anchors_permutes_rows() {
        let mut g = Graph::new();
        let rows = g.constant(t(&[3, 2], &[0.0, 1.0, 0.6, 0.8, 1.0, 0.0]));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 3,
        };
        let ab = g.constant(t(&[2, 2], &[1.0, 0.0, 0.8, 0.6]));
        let ba = g.constant(t(&[2, 2], &[0.8, 0.6, 1.0, 0.0]));
        let x = global_affinity(&mut g, &bank, ab).unwrap();
        let y = global_affinity(&mut g, &bank, ba).unwrap();
        let (x, y) = (g.value(x).data(), g.value(y).data());
        assert_eq!(&x[..3], &y[3..]);
        assert_eq!(&x[3..], &y[..3]);
    }

    #[test]
    fn compensate_matches_hand_value() {
        let mut g = Graph::new();
        // anchor row [√ln3] against the bank gives softmax [0.75, 0.25]
        let a = (3f64.ln()).sqrt();
        let rows = g.constant(t(&[2, 1], &[a, 0.0]));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 2,
        };
        let refined = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let comp = compensatory_cams(&mut g, refined, &bank, 0, &[0], 1).unwrap();
        let hat = g.value(comp.cams).data().to_vec();
        assert!((hat[0] - 1.75).abs() < 1e-12 && (hat[1] - 0.25).abs() < 1e-12);
        let raw = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let l = com_loss(&mut g, &comp, raw, true, false).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
        // M̃ := M̂ gives zero loss.
        let same = g.constant(t(&[1, 1, 2], &hat));
        let l = com_loss(&mut g, &comp, same, true, false).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn zero_anchor_weights_leave_refined_cams() {
        let mut g = Graph::new();
        let rows = g.constant(Tensor::full(&[4, 2], 0.5f64.sqrt()));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 4,
        };
        let refined = g.constant(Tensor::zeros(&[2, 2, 2]));
        let comp = compensatory_cams(&mut g, refined, &bank, 0, &[1], 2).unwrap();
        assert!(g.value(comp.cams).data().iter().all(|&v| v == 0.0));
        let raw = g.constant(t(&[2, 2, 2], &[9.0, 9.0, 9.0, 9.0, 1.0, 0.0, 3.0, 0.0]));
        let l = com_loss(&mut g, &comp, raw, true, false).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn target_is_detached() {
        let mut g = Graph::new();
        let rows = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 2,
        };
        let refined = g.param(t(&[1, 1, 2], &[0.7, 0.2]));
        let raw = g.param(t(&[1, 1, 2], &[0.1, 0.9]));
        let comp = compensatory_cams(&mut g, refined, &bank, 0, &[0], 1).unwrap();
        let l = com_loss(&mut g, &comp, raw, true, false).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(rows).is_none());
        assert!(grads.get(refined).is_none());
        assert!(grads.get(raw).is_some());

        let l = com_loss(&mut g, &comp, raw, false, false).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(refined).is_some());
    }

    #[test]
    fn normalized_variant_compares_shapes() {
        let mut g = Graph::new();
        let a = (3f64.ln()).sqrt();
        let rows = g.constant(t(&[2, 1], &[a, 0.0]));
        let bank = BatchFeatureBank {
            rows,
            images: 1,
            pixels_per_image: 2,
        };
        let refined = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let comp = compensatory_cams(&mut g, refined, &bank, 0, &[0], 1).unwrap();
        let raw = g.constant(t(&[1, 1, 2], &[4.0, 0.0]));
        let l = com_loss(&mut g, &comp, raw, true, true).unwrap();
        let e = CAM_MAX_EPS;
        let want = ((1.75 / (1.75 + e) - 4.0 / (4.0 + e)).abs() + 0.25 / (1.75 + e)) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        // scaling the raw maps leaves the loss almost unchanged
        let raw10 = g.constant(t(&[1, 1, 2], &[40.0, 0.0]));
        let l10 = com_loss(&mut g, &comp, raw10, true, true).unwrap();
        assert!((g.value(l10).item() - want).abs() < 1e-5);
        let hat = g.value(comp.cams).clone();
        let same = g.constant(hat.reshape(&[1, 1, 2]).unwrap());
        let l = com_loss(&mut g, &comp, same, true, true).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}

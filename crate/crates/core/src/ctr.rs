//! Cross-transform regularisation: cross-view class prototypes and the
//! pixel-to-prototype contrastive loss.

use crate::error::{invalid, Result, RtcError};
use crate::tensor::{topk_indices, Graph, Tensor, Var};

pub const FEATURE_EPS: f64 = 1e-8;
/// Guard added to per-class maxima when max-normalising CAMs.
pub const CAM_MAX_EPS: f64 = 1e-5;

/// Class prototypes for the classes present in one image.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// `[classes.len(), D]`, unit rows.
    pub protos: Var,
    pub classes: Vec<usize>,
    /// Top-K pixel indices each prototype was pooled from.
    pub sources: Vec<Vec<usize>>,
    pub k: usize,
}

impl PrototypeBank {
    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Per-pixel pseudo label, confidence and participation flag.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAssignment {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub participate: Vec<bool>,
}

impl PixelAssignment {
    pub fn participating(&self) -> usize {
        self.participate.iter().filter(|&&p| p).count()
    }
}

/// Per-class max-normalised maps for `classes`, flattened to `[classes.len(), hw]`.
pub fn max_normalized(cams: &Tensor, classes: &[usize]) -> Vec<Vec<f64>> {
    let s = cams.shape();
    let hw = s[1] * s[2];
    classes
        .iter()
        .map(|&c| {
            let row = &cams.data()[c * hw..(c + 1) * hw];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|v| v / (m + CAM_MAX_EPS)).collect()
        })
        .collect()
}

/// `y = argmax` over present classes of max-normalised refined CAMs; pixels
/// whose normalised score is at least `threshold` participate.
pub fn assign_pixels(cams: &Tensor, classes: &[usize], threshold: f64) -> Result<PixelAssignment> {
    if classes.is_empty() {
        return Err(invalid("pixel assignment needs at least one class"));
    }
    let norm = max_normalized(cams, classes);
    let hw = norm[0].len();
    let mut out = PixelAssignment {
        labels: Vec::with_capacity(hw),
        confidence: Vec::with_capacity(hw),
        participate: Vec::with_capacity(hw),
    };
    for i in 0..hw {
        let mut best = 0;
        for r in 1..classes.len() {
            if norm[r][i] > norm[best][i] {
                best = r;
            }
        }
        out.labels.push(classes[best]);
        out.confidence.push(norm[best][i]);
        out.participate.push(norm[best][i] >= threshold);
    }
    Ok(out)
}

/// Resizes `x2` onto `x1`'s grid and L2-normalises both per pixel.
pub fn align_views(g: &mut Graph, x1: Var, x2: Var) -> Result<(Var, Var)> {
    let (h, w) = (g.shape(x1)[1], g.shape(x1)[2]);
    let up = g.bilinear_resize(x2, h, w)?;
    let n1 = g.l2_normalize(x1, 0, FEATURE_EPS)?;
    let n2 = g.l2_normalize(up, 0, FEATURE_EPS)?;
    Ok((n1, n2))
}

/// `P_c = normalize(Σ_{i∈Φ_c} M[c,i] X[:,i] / Σ_{i∈Φ_c} M[c,i])` with `Φ_c` the
/// top-`k` pixels of `cams[c]`. `features` come from the other view (or the same
/// view in the self-view comparison mode).
pub fn cross_prototypes(g: &mut Graph, cams: Var, features: Var, classes: &[usize], k: usize) -> Result<PrototypeBank> {
    let (sm, sf) = (g.shape(cams).to_vec(), g.shape(features).to_vec());
    if sm.len() != 3 || sf.len() != 3 || sm[1..] != sf[1..] {
        return Err(invalid(format!("CAMs {sm:?} and features {sf:?} are not on one grid")));
    }
    if classes.is_empty() || k == 0 {
        return Err(invalid("prototypes need at least one class and k >= 1"));
    }
    let (d, hw) = (sf[0], sf[1] * sf[2]);
    let k = k.min(hw);
    let feat = g.reshape(features, &[d, hw])?;
    let mut rows = Vec::with_capacity(classes.len());
    let mut sources = Vec::with_capacity(classes.len());
    for &c in classes {
        if c >= sm[0] {
            return Err(invalid(format!("class {c} outside {} CAM channels", sm[0])));
        }
        let values = &g.value(cams).data()[c * hw..(c + 1) * hw];
        let idx = topk_indices(values, k)?;
        let weight_sum: f64 = idx.iter().map(|&i| values[i]).sum();
        g.note_discrete(&idx);
        let gathered = g.select_cols(feat, &idx)?;
        let pooled = if weight_sum > 0.0 {
            let flat: Vec<usize> = idx.iter().map(|&i| c * hw + i).collect();
            let w = g.gather(cams, &flat, &[k, 1])?;
            let num = g.matmul(gathered, w)?;
            let den = g.sum(w)?;
            let den = g.reshape(den, &[1, 1])?;
            let den = g.expand(den, &[d, 1])?;
            g.div(num, den)?
        } else {
            let mean = g.mean_axis(gathered, 1)?;
            g.reshape(mean, &[d, 1])?
        };
        let unit = g.l2_normalize(pooled, 0, FEATURE_EPS)?;
        rows.push(g.reshape(unit, &[1, d])?);
        sources.push(idx);
    }
    let protos = g.concat(&rows, 0)?;
    Ok(PrototypeBank {
        protos,
        classes: classes.to_vec(),
        sources,
        k,
    })
}

/// Mean over participating pixels of `−log softmax_c(X_i·P_c / τ)[y_i]`.
///
/// `features` are unit pixel vectors, `[D, h, w]` or `[D, hw]`. Zero when no pixel participates.
pub fn contrast_loss(
    g: &mut Graph,
    features: Var,
    assignment: &PixelAssignment,
    bank: &PrototypeBank,
    temperature: f64,
) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let d = s[0];
    let hw: usize = s[1..].iter().product();
    if assignment.labels.len() != hw {
        return Err(invalid("assignment does not match the feature grid"));
    }
    if temperature <= 0.0 {
        return Err(invalid("temperature must be positive"));
    }
    g.note_discrete(&assignment.participate);
    g.note_discrete(&assignment.labels);
    let mut picks = Vec::new();
    for i in (0..hw).filter(|&i| assignment.participate[i]) {
        let row = bank
            .position(assignment.labels[i])
            .ok_or_else(|| RtcError::Internal(format!("pixel label {} has no prototype", assignment.labels[i])))?;
        picks.push(row * hw + i);
    }
    if picks.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let flat = g.reshape(features, &[d, hw])?;
    let sims = g.matmul(bank.protos, flat)?;
    let logits = g.mul_scalar(sims, 1.0 / temperature)?;
    let logp = g.log_softmax(logits, 0)?;
    let n = picks.len();
    let own = g.gather(logp, &picks, &[n])?;
    let mean = g.mean(own)?;
    g.neg(mean)
}

/// Which pseudo labels the cross-view contrast terms use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossLabels {
    /// The other view's labels with the other view's prototypes.
    #[default]
    Other,
    /// The current view's labels with the other view's prototypes.
    Current,
}

/// Inputs for [`ctr_total`], all on the view-1 grid.
#[derive(Clone, Debug)]
pub struct CtrViews<'a> {
    pub x1: Var,
    pub x2: Var,
    pub assign1: &'a PixelAssignment,
    pub assign2: &'a PixelAssignment,
    pub bank1: &'a PrototypeBank,
    pub bank2: &'a PrototypeBank,
}

/// The four contrast terms, in order: intra view 1, intra view 2, cross into
/// view 1, cross into view 2.
pub fn ctr_terms(g: &mut Graph, v: &CtrViews<'_>, temperature: f64, cross: CrossLabels) -> Result<[Var; 4]> {
    let intra1 = contrast_loss(g, v.x1, v.assign1, v.bank1, temperature)?;
    let intra2 = contrast_loss(g, v.x2, v.assign2, v.bank2, temperature)?;
    let (c1, c2) = match cross {
        CrossLabels::Other => (v.assign2, v.assign1),
        CrossLabels::Current => (v.assign1, v.assign2),
    };
    let cross1 = contrast_loss(g, v.x1, c1, v.bank2, temperature)?;
    let cross2 = contrast_loss(g, v.x2, c2, v.bank1, temperature)?;
    Ok([intra1, intra2, cross1, cross2])
}

pub fn ctr_total(g: &mut Graph, v: &CtrViews<'_>, temperature: f64, cross: CrossLabels) -> Result<Var> {
    let [a, b, c, d] = ctr_terms(g, v, temperature, cross)?;
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

//! Two-view training: views, losses, pseudo masks, SGD and the two-phase loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, ArchConfig, BoundParams, Params};
use crate::compensator::{com_loss, compensatory_cams, BatchFeatureBank};
use crate::config::{Switches, TrainConfig};
use crate::crr::refine_view;
use crate::ctr::{align_views, assign_pixels, cross_prototypes, ctr_total, max_normalized, CtrViews, CAM_MAX_EPS};
use crate::data::{Dataset, Sample};
use crate::error::{invalid, Result, RtcError};
use crate::mask::LabelMap;
use crate::metrics::{miou, EvalMode, EvalReport};
use crate::tensor::{Gradients, Graph, Tensor, Var};

// ---- views ---------------------------------------------------------------

/// How the two views relate to the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    /// `view2 side / view1 side`.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub transform: ViewTransform,
}

/// Bilinear resize of a `[c, h, w]` tensor outside any training graph.
pub fn resize(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.shape()[1..] == [h, w] {
        return Ok(t.clone());
    }
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let r = g.bilinear_resize(v, h, w)?;
    Ok(g.value(r).clone())
}

fn crop(t: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if top + size > h || left + size > w {
        return Err(invalid("crop window leaves the image"));
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&t.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

/// Random square crop resized to `view1_size`; view 2 is the same crop at `view2_size`.
pub fn make_views(image: &Tensor, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let side = cfg.crop_size.min(s[1]).min(s[2]);
    let top = rng.random_range(0..=s[1] - side);
    let left = rng.random_range(0..=s[2] - side);
    let patch = crop(image, top, left, side)?;
    Ok(ViewPair {
        view1: resize(&patch, cfg.view1_size, cfg.view1_size)?,
        view2: resize(&patch, cfg.view2_size, cfg.view2_size)?,
        transform: ViewTransform {
            top,
            left,
            crop: side,
            scale: cfg.view2_size as f64 / cfg.view1_size as f64,
        },
    })
}

// ---- losses --------------------------------------------------------------

/// Binary cross-entropy with logits, averaged over classes and then views.
pub fn cls_loss(g: &mut Graph, logits: &[Var], label: &[bool]) -> Result<Var> {
    if logits.is_empty() {
        return Err(invalid("no logits"));
    }
    let target = Tensor::from_vec(label.iter().map(|&b| b as u8 as f64).collect());
    let mut total: Option<Var> = None;
    for &x in logits {
        if g.shape(x) != [label.len()] {
            return Err(invalid("logits and label lengths differ"));
        }
        let y = g.constant(target.clone());
        let pos = g.relu(x)?;
        let xy = g.mul(x, y)?;
        let a = g.abs(x)?;
        let na = g.neg(a)?;
        let e = g.exp(na)?;
        let e1 = g.add_scalar(e, 1.0)?;
        let soft = g.log(e1)?;
        let l = g.sub(pos, xy)?;
        let l = g.add(l, soft)?;
        let m = g.mean(l)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    g.div_scalar(total.expect("at least one view"), logits.len() as f64)
}

/// Present-class maps divided by their own maximum, `[P, h, w]`.
pub fn max_normalize(g: &mut Graph, cams: Var, classes: &[usize]) -> Result<Var> {
    let s = g.shape(cams).to_vec();
    let hw = s[1] * s[2];
    let flat = g.reshape(cams, &[s[0], hw])?;
    let rows = g.select_rows(flat, classes)?;
    let p = classes.len();
    let m = g.max_axis(rows, 1)?;
    let m = g.add_scalar(m, CAM_MAX_EPS)?;
    let m = g.reshape(m, &[p, 1])?;
    let m = g.expand(m, &[p, hw])?;
    let n = g.div(rows, m)?;
    g.reshape(n, &[p, s[1], s[2]])
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `(L_er, L_ecr)` from max-normalised maps; view-1 maps are resized onto view 2's grid.
pub fn equivariance_losses(g: &mut Graph, raw1: Var, ref1: Var, raw2: Var, ref2: Var) -> Result<(Var, Var)> {
    let (h, w) = (g.shape(raw2)[1], g.shape(raw2)[2]);
    let d_raw1 = g.bilinear_resize(raw1, h, w)?;
    let d_ref1 = g.bilinear_resize(ref1, h, w)?;
    let er = mean_abs_diff(g, d_raw1, raw2)?;
    let a = mean_abs_diff(g, d_ref1, raw2)?;
    let b = mean_abs_diff(g, d_raw1, ref2)?;
    let ecr = g.add(a, b)?;
    Ok((er, ecr))
}

/// Segmentation targets: labels in `0..=C`, with an ignore band.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoMask {
    pub labels: LabelMap,
    pub ignore: Vec<bool>,
}

impl PseudoMask {
    pub fn scored(&self) -> usize {
        self.ignore.iter().filter(|&&i| !i).count()
    }
}

/// Dual-threshold rule on max-normalised refined CAMs of the present classes.
pub fn pseudo_mask(cams: &Tensor, classes: &[usize], theta_fg: f64, theta_bg: f64) -> Result<PseudoMask> {
    let s = cams.shape();
    if s.len() != 3 {
        return Err(invalid("pseudo masks need [C, h, w] maps"));
    }
    let (h, w) = (s[1], s[2]);
    let mut labels = LabelMap::filled(h, w, 0);
    let mut ignore = vec![false; h * w];
    if classes.is_empty() {
        return Ok(PseudoMask { labels, ignore });
    }
    let norm = max_normalized(cams, classes);
    for i in 0..h * w {
        let mut best = 0;
        for r in 1..classes.len() {
            if norm[r][i] > norm[best][i] {
                best = r;
            }
        }
        let score = norm[best][i];
        if score >= theta_fg {
            labels.data_mut()[i] = classes[best] as u8 + 1;
        } else if score >= theta_bg {
            ignore[i] = true;
        }
    }
    Ok(PseudoMask { labels, ignore })
}

/// Mean cross-entropy over scored pixels; zero when every pixel is ignored.
pub fn seg_loss(g: &mut Graph, logits: Var, mask: &PseudoMask) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let hw = s[1] * s[2];
    if mask.ignore.len() != hw || mask.labels.data().len() != hw {
        return Err(invalid("pseudo mask does not match the logit grid"));
    }
    let picks: Vec<usize> = (0..hw)
        .filter(|&i| !mask.ignore[i])
        .map(|i| mask.labels.data()[i] as usize * hw + i)
        .collect();
    if picks.iter().any(|&p| p >= s[0] * hw) {
        return Err(invalid("pseudo label exceeds the logit channels"));
    }
    if picks.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let flat = g.reshape(logits, &[s[0], hw])?;
    let logp = g.log_softmax(flat, 0)?;
    let n = picks.len();
    let own = g.gather(logp, &picks, &[n])?;
    let m = g.mean(own)?;
    g.neg(m)
}

pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return lr0;
    }
    let frac = iter.min(max_iter) as f64 / max_iter as f64;
    lr0 * (1.0 - frac).powf(power)
}

// ---- forward pass --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Full,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Full => "full",
        }
    }
}

pub const TERM_NAMES: [&str; 6] = ["cls", "er", "ecr", "contrast", "com", "seg"];

/// One training image: its views and multi-hot label.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub views: ViewPair,
    pub label: Vec<bool>,
}

impl BatchItem {
    pub fn classes(&self) -> Vec<usize> {
        (0..self.label.len()).filter(|&c| self.label[c]).collect()
    }
}

/// A batch forward pass kept alive for differentiation.
pub struct Forward {
    pub graph: Graph,
    pub params: BoundParams,
    /// In [`TERM_NAMES`] order, each averaged over the batch.
    pub terms: [Var; 6],
    pub total: Var,
    /// Smallest `M̂ − M` seen, when the compensator ran.
    pub min_compensation_gap: Option<f64>,
}

struct ImageState {
    classes: Vec<usize>,
    raw1: Var,
    ref1: Var,
    raw2_up: Var,
    ref2_up: Var,
    x1n: Var,
    x2n_up: Var,
}

fn scalar_zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Builds all loss terms for `batch` on `graph`.
pub fn forward_batch(
    mut graph: Graph,
    params: &Params,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    sw: &Switches,
    phase: Phase,
) -> Result<Forward> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let g = &mut graph;
    let bound = params.bind(g);
    let cls_w = bound.var("classifier.w");
    let need_features = sw.ctr || sw.comloss;
    let mut sums: [Vec<Var>; 6] = Default::default();
    let mut states = Vec::with_capacity(batch.len());

    for item in batch {
        let classes = item.classes();
        let v1 = g.constant(item.views.view1.clone());
        let v2 = g.constant(item.views.view2.clone());
        let pyr1 = backbone::encode(g, v1, &bound)?;
        let pyr2 = backbone::encode(g, v2, &bound)?;
        let logits1 = backbone::classify(g, pyr1.x, cls_w)?;
        let logits2 = backbone::classify(g, pyr2.x, cls_w)?;
        sums[0].push(cls_loss(g, &[logits1, logits2], &item.label)?);

        let raw1 = backbone::raw_cams(g, pyr1.x, cls_w)?;
        let raw2 = backbone::raw_cams(g, pyr2.x, cls_w)?;
        let ref1 = refine_view(g, sw.refine, raw1, &pyr1, v1, &bound, sw.detach_affinity)?.cams;
        let ref2 = refine_view(g, sw.refine, raw2, &pyr2, v2, &bound, sw.detach_affinity)?.cams;

        if classes.is_empty() {
            sums[1].push(scalar_zero(g));
            sums[2].push(scalar_zero(g));
        } else {
            let raw1n = max_normalize(g, raw1, &classes)?;
            let ref1n = max_normalize(g, ref1, &classes)?;
            let raw2n = max_normalize(g, raw2, &classes)?;
            let ref2n = max_normalize(g, ref2, &classes)?;
            let (er, ecr) = equivariance_losses(g, raw1n, ref1n, raw2n, ref2n)?;
            sums[1].push(er);
            sums[2].push(ecr);
        }

        if phase == Phase::Full {
            let logits = backbone::seg_branch(g, pyr1.f6, &bound)?;
            let mask = pseudo_mask(g.value(ref1), &classes, cfg.theta_fg, cfg.theta_bg)?;
            g.note_discrete(&mask.ignore);
            g.note_discrete(&mask.labels.data());
            sums[5].push(seg_loss(g, logits, &mask)?);
        }

        let (h1, w1) = (g.shape(raw1)[1], g.shape(raw1)[2]);
        let (x1n, x2n_up) = if need_features {
            align_views(g, pyr1.x, pyr2.x)?
        } else {
            (pyr1.x, pyr2.x)
        };
        let ref2_up = g.bilinear_resize(ref2, h1, w1)?;
        let raw2_up = g.bilinear_resize(raw2, h1, w1)?;
        states.push(ImageState {
            classes,
            raw1,
            ref1,
            raw2_up,
            ref2_up,
            x1n,
            x2n_up,
        });
    }

    for st in &states {
        if !sw.ctr || st.classes.is_empty() {
            sums[3].push(scalar_zero(g));
            continue;
        }
        let assign1 = assign_pixels(g.value(st.ref1), &st.classes, cfg.theta_conf)?;
        let assign2 = assign_pixels(g.value(st.ref2_up), &st.classes, cfg.theta_conf)?;
        let (f1, f2) = if sw.self_view_prototypes {
            (st.x1n, st.x2n_up)
        } else {
            (st.x2n_up, st.x1n)
        };
        let bank1 = cross_prototypes(g, st.ref1, f1, &st.classes, cfg.top_k)?;
        let bank2 = cross_prototypes(g, st.ref2_up, f2, &st.classes, cfg.top_k)?;
        let views = CtrViews {
            x1: st.x1n,
            x2: st.x2n_up,
            assign1: &assign1,
            assign2: &assign2,
            bank1: &bank1,
            bank2: &bank2,
        };
        sums[3].push(ctr_total(g, &views, cfg.temperature, sw.cross_labels)?);
    }

    let mut min_gap: Option<f64> = None;
    if sw.comloss {
        let x2: Vec<Var> = states.iter().map(|s| s.x2n_up).collect();
        let x1: Vec<Var> = states.iter().map(|s| s.x1n).collect();
        let bank_for_view1 = BatchFeatureBank::build(g, &x2)?;
        let bank_for_view2 = BatchFeatureBank::build(g, &x1)?;
        for (b, st) in states.iter().enumerate() {
            if st.classes.is_empty() {
                sums[4].push(scalar_zero(g));
                continue;
            }
            let mut view_terms = Vec::with_capacity(2);
            for (refined, raw, bank) in [
                (st.ref1, st.raw1, &bank_for_view1),
                (st.ref2_up, st.raw2_up, &bank_for_view2),
            ] {
                let comp = compensatory_cams(g, refined, bank, b, &st.classes, cfg.top_k)?;
                let hw = g.shape(refined)[1] * g.shape(refined)[2];
                let hat = g.value(comp.cams).data();
                let base = g.value(refined).data();
                for (r, &c) in st.classes.iter().enumerate() {
                    for j in 0..hw {
                        let gap = hat[r * hw + j] - base[c * hw + j];
                        min_gap = Some(min_gap.map_or(gap, |m: f64| m.min(gap)));
                    }
                }
                view_terms.push(com_loss(g, &comp, raw, sw.detach_com_target, sw.normalized_com)?);
            }
            sums[4].push(g.add(view_terms[0], view_terms[1])?);
        }
    }

    let n = batch.len() as f64;
    let mut reduced = Vec::with_capacity(6);
    for parts in &sums {
        let term = match parts.split_first() {
            None => scalar_zero(g),
            Some((first, rest)) => {
                let mut acc = *first;
                for &p in rest {
                    acc = g.add(acc, p)?;
                }
                g.div_scalar(acc, n)?
            }
        };
        reduced.push(term);
    }
    let terms: [Var; 6] = reduced
        .try_into()
        .map_err(|_| RtcError::Internal("term count".into()))?;
    let [cls, er, ecr, contrast, com, seg] = terms;
    let t = g.add(cls, er)?;
    let t = g.add(t, ecr)?;
    let wc = g.mul_scalar(contrast, cfg.alpha)?;
    let t = g.add(t, wc)?;
    let wm = g.mul_scalar(com, cfg.beta)?;
    let t = g.add(t, wm)?;
    let total = g.add(t, seg)?;
    Ok(Forward {
        graph,
        params: bound,
        terms,
        total,
        min_compensation_gap: min_gap,
    })
}

// ---- optimisation --------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub er: f64,
    pub ecr: f64,
    pub contrast: f64,
    pub com: f64,
    pub seg: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn terms(&self) -> [f64; 6] {
        [self.cls, self.er, self.ecr, self.contrast, self.com, self.seg]
    }

    /// The weighted sum in the same order the graph evaluates it.
    pub fn recomputed_total(&self, alpha: f64, beta: f64) -> f64 {
        self.cls + self.er + self.ecr + alpha * self.contrast + beta * self.com + self.seg
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (name, v) in TERM_NAMES.iter().zip(self.terms()) {
            write!(s, "L_{name}={v:e} ").expect("writing to a String cannot fail");
        }
        write!(s, "L_t={:e}", self.total).expect("writing to a String cannot fail");
        s
    }

    fn from_forward(f: &Forward) -> Self {
        let v = |x: Var| f.graph.value(x).item();
        Self {
            cls: v(f.terms[0]),
            er: v(f.terms[1]),
            ecr: v(f.terms[2]),
            contrast: v(f.terms[3]),
            com: v(f.terms[4]),
            seg: v(f.terms[5]),
            total: v(f.total),
        }
    }
}

/// SGD with momentum and coupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for (name, p) in params.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let grad = grads.get(name);
            for (i, (pi, vi)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let gi = grad.map_or(0.0, |g| g[i]) + weight_decay * *pi;
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// What one optimisation step saw.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub losses: StepLosses,
    pub min_compensation_gap: Option<f64>,
    /// Largest `|∂L_t/∂θ|` over segmentation-head parameters.
    pub seg_head_grad: f64,
}

/// Gradients keyed by parameter name, plus the largest magnitude seen on the segmentation head.
fn gradients_by_name(grads: &Gradients, params: &BoundParams) -> (BTreeMap<String, Vec<f64>>, f64) {
    let mut by_name = BTreeMap::new();
    let mut seg_head_grad: f64 = 0.0;
    for (name, var) in params.iter() {
        if let Some(gr) = grads.get(var) {
            if name.starts_with("seg.") {
                seg_head_grad = gr.iter().fold(seg_head_grad, |m, v| m.max(v.abs()));
            }
            by_name.insert(name.to_string(), gr.to_vec());
        }
    }
    (by_name, seg_head_grad)
}

/// One classification-only update on both views; returns the batch-mean `L_cls`.
pub fn pretrain_step(
    params: &mut Params,
    opt: &mut Sgd,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let cls_w = bound.var("classifier.w");
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let mut logits = Vec::with_capacity(2);
        for view in [&item.views.view1, &item.views.view2] {
            let v = g.constant(view.clone());
            let pyr = backbone::encode(&mut g, v, &bound)?;
            logits.push(backbone::classify(&mut g, pyr.x, cls_w)?);
        }
        terms.push(cls_loss(&mut g, &logits, &item.label)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    let loss = g.div_scalar(loss, terms.len() as f64)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(RtcError::NonFiniteLoss(format!("pretraining L_cls = {value}")));
    }
    let grads = g.backward(loss)?;
    let (by_name, _) = gradients_by_name(&grads, &bound);
    opt.step(params, &by_name, lr, cfg.momentum, cfg.weight_decay);
    Ok(value)
}

/// Fresh parameters followed by `cfg.pretrain_epochs` of classification-only training on the train split.
pub fn pretrain(cfg: &TrainConfig, ds: &Dataset) -> Result<Params> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(invalid("pretraining needs a non-empty train split"));
    }
    let mut params = Params::init(&ArchConfig::desk(ds.classes), cfg.seed);
    let mut opt = Sgd::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let max_iter = ds.train.len().div_ceil(cfg.batch_size) * cfg.pretrain_epochs;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut iter = 0;
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = sample_batch(ds, chunk, cfg, &mut rng)?;
            let lr = poly_lr(iter, max_iter, cfg.pretrain_lr, cfg.poly_power);
            pretrain_step(&mut params, &mut opt, &batch, cfg, lr).map_err(|e| match e {
                RtcError::NonFiniteLoss(msg) => RtcError::NonFiniteLoss(format!("pretraining epoch {epoch}: {msg}")),
                other => other,
            })?;
            iter += 1;
        }
    }
    Ok(params)
}

fn sample_batch(ds: &Dataset, chunk: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<BatchItem>> {
    chunk
        .iter()
        .map(|&i| {
            Ok(BatchItem {
                views: make_views(&ds.train[i].image, cfg, rng)?,
                label: ds.train[i].label.clone(),
            })
        })
        .collect()
}

/// Forward, invariant checks, backward and an SGD update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut Params,
    opt: &mut Sgd,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    sw: &Switches,
    phase: Phase,
    lr: f64,
) -> Result<(StepLosses, Option<f64>, f64)> {
    let fwd = forward_batch(Graph::new(), params, batch, cfg, sw, phase).map_err(|e| match e {
        RtcError::NonFinite { op } => RtcError::NonFiniteLoss(format!("{op} produced a non-finite value")),
        other => other,
    })?;
    let losses = StepLosses::from_forward(&fwd);
    if !losses.terms().iter().chain([&losses.total]).all(|v| v.is_finite()) {
        return Err(RtcError::NonFiniteLoss(losses.describe()));
    }
    let recomputed = losses.recomputed_total(cfg.alpha, cfg.beta);
    if (recomputed - losses.total).abs() > 1e-12 {
        return Err(RtcError::Internal(format!(
            "loss identity broken: {} vs {recomputed}",
            losses.total
        )));
    }
    if let Some((name, v)) = TERM_NAMES.iter().zip(losses.terms()).find(|(_, v)| *v < 0.0) {
        return Err(RtcError::Internal(format!("negative loss term L_{name} = {v}")));
    }
    let grads = fwd.graph.backward(fwd.total)?;
    let (by_name, seg_head_grad) = gradients_by_name(&grads, &fwd.params);
    if by_name.values().flatten().any(|v| !v.is_finite()) {
        return Err(RtcError::NonFiniteLoss(format!(
            "non-finite gradient; {}",
            losses.describe()
        )));
    }
    opt.step(params, &by_name, lr, cfg.momentum, cfg.weight_decay);
    Ok((losses, fwd.min_compensation_gap, seg_head_grad))
}

// ---- evaluation ----------------------------------------------------------

/// Background threshold applied to max-normalised CAMs at evaluation time.
pub fn cam_threshold(cfg: &TrainConfig) -> f64 {
    0.5 * (cfg.theta_fg + cfg.theta_bg)
}

/// Network outputs for one full image.
#[derive(Clone, Debug)]
pub struct ImageOutputs {
    pub logits: Vec<f64>,
    pub raw: Tensor,
    pub refined: Tensor,
    pub seg: Tensor,
}

pub fn infer(params: &Params, image: &Tensor, sw: &Switches) -> Result<ImageOutputs> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let v = g.constant(image.clone());
    let pyr = backbone::encode(&mut g, v, &bound)?;
    let cls_w = bound.var("classifier.w");
    let logits = backbone::classify(&mut g, pyr.x, cls_w)?;
    let raw = backbone::raw_cams(&mut g, pyr.x, cls_w)?;
    let refined = refine_view(&mut g, sw.refine, raw, &pyr, v, &bound, true)?.cams;
    let seg = backbone::seg_branch(&mut g, pyr.f6, &bound)?;
    Ok(ImageOutputs {
        logits: g.value(logits).data().to_vec(),
        raw: g.value(raw).clone(),
        refined: g.value(refined).clone(),
        seg: g.value(seg).clone(),
    })
}

/// Label map from CAMs: among `classes`, the largest max-normalised score wins if it reaches `threshold`.
pub fn cam_labels(cams: &Tensor, classes: &[usize], threshold: f64) -> LabelMap {
    let (h, w) = (cams.shape()[1], cams.shape()[2]);
    let mut out = LabelMap::filled(h, w, 0);
    if classes.is_empty() {
        return out;
    }
    let norm = max_normalized(cams, classes);
    for i in 0..h * w {
        let mut best = 0;
        for r in 1..classes.len() {
            if norm[r][i] > norm[best][i] {
                best = r;
            }
        }
        if norm[best][i] >= threshold {
            out.data_mut()[i] = classes[best] as u8 + 1;
        }
    }
    out
}

/// Per-pixel argmax over `[C+1, h, w]` logits.
pub fn argmax_labels(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = LabelMap::filled(h, w, 0);
    for i in 0..h * w {
        let mut best = 0;
        for k in 1..c {
            if logits.data()[k * h * w + i] > logits.data()[best * h * w + i] {
                best = k;
            }
        }
        out.data_mut()[i] = best as u8;
    }
    out
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub cam_filtered: EvalReport,
    pub cam_unfiltered: EvalReport,
    pub mask: EvalReport,
}

/// CAM and mask predictions for every sample, at image resolution.
pub fn predict_split(
    params: &Params,
    samples: &[Sample],
    sw: &Switches,
    threshold: f64,
) -> Result<(Vec<LabelMap>, Vec<LabelMap>)> {
    let mut cams = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let out = infer(params, &s.image, sw)?;
        let (h, w) = (s.mask.height(), s.mask.width());
        let predicted: Vec<usize> = (0..out.logits.len()).filter(|&c| out.logits[c] > 0.0).collect();
        let up = resize(&out.refined, h, w)?;
        cams.push(cam_labels(&up, &predicted, threshold));
        masks.push(argmax_labels(&resize(&out.seg, h, w)?));
    }
    Ok((cams, masks))
}

pub fn evaluate(
    params: &Params,
    samples: &[Sample],
    classes: usize,
    sw: &Switches,
    threshold: f64,
) -> Result<EvalSummary> {
    let (cams, masks) = predict_split(params, samples, sw, threshold)?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.label.clone()).collect();
    Ok(EvalSummary {
        cam_filtered: miou(&cams, &gts, classes, EvalMode::CamFiltered, Some(&labels))?,
        cam_unfiltered: miou(&cams, &gts, classes, EvalMode::CamUnfiltered, Some(&labels))?,
        mask: miou(&masks, &gts, classes, EvalMode::Mask, None)?,
    })
}

// ---- training loop -------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    /// Means over the epoch's steps.
    pub losses: StepLosses,
    pub cam_miou: f64,
    pub cam_miou_unfiltered: f64,
    pub mask_miou: f64,
}

pub const CSV_HEADER: &str =
    "epoch,phase,l_cls,l_er,l_ecr,l_contrast,l_com,l_seg,l_total,cam_miou,cam_miou_unfiltered,mask_miou";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6}",
            self.epoch,
            self.phase.as_str(),
            l.cls,
            l.er,
            l.ecr,
            l.contrast,
            l.com,
            l.seg,
            l.total,
            self.cam_miou,
            self.cam_miou_unfiltered,
            self.mask_miou
        )
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub enum Event<'a> {
    Step(&'a StepReport),
    Epoch(&'a EpochRecord),
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub params: Params,
    pub best_params: Params,
    pub best_epoch: usize,
}

fn mean_losses(all: &[StepLosses]) -> StepLosses {
    let n = all.len().max(1) as f64;
    let mut m = StepLosses::default();
    for l in all {
        m.cls += l.cls;
        m.er += l.er;
        m.ecr += l.ecr;
        m.contrast += l.contrast;
        m.com += l.com;
        m.seg += l.seg;
        m.total += l.total;
    }
    m.cls /= n;
    m.er /= n;
    m.ecr /= n;
    m.contrast /= n;
    m.com /= n;
    m.seg /= n;
    m.total /= n;
    m
}

/// Pretrains the encoder, then runs the two-phase schedule.
pub fn train(cfg: &TrainConfig, sw: &Switches, ds: &Dataset, on_event: impl FnMut(Event<'_>)) -> Result<TrainOutcome> {
    let init = pretrain(cfg, ds)?;
    train_from(cfg, sw, ds, init, on_event)
}

/// Runs the two-phase schedule starting from `init`.
pub fn train_from(
    cfg: &TrainConfig,
    sw: &Switches,
    ds: &Dataset,
    init: Params,
    mut on_event: impl FnMut(Event<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(invalid("training needs non-empty train and val splits"));
    }
    init.validate(&ArchConfig::desk(ds.classes))?;
    let mut params = init;
    let mut opt = Sgd::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.epochs_total;
    let threshold = cam_threshold(cfg);
    let mut iter = 0;
    let mut records = Vec::with_capacity(cfg.epochs_total);
    let mut best: Option<(f64, usize, Params)> = None;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 1..=cfg.epochs_total {
        let phase = if epoch <= cfg.epochs_warmup {
            Phase::Warmup
        } else {
            Phase::Full
        };
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(per_epoch);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = sample_batch(ds, chunk, cfg, &mut rng)?;
            let lr = poly_lr(iter, max_iter, cfg.lr, cfg.poly_power);
            let (losses, gap, seg_head_grad) =
                train_step(&mut params, &mut opt, &batch, cfg, sw, phase, lr).map_err(|e| match e {
                    RtcError::NonFiniteLoss(msg) => {
                        RtcError::NonFiniteLoss(format!("epoch {epoch} step {step}: {msg}"))
                    }
                    other => other,
                })?;
            on_event(Event::Step(&StepReport {
                epoch,
                step,
                phase,
                lr,
                losses,
                min_compensation_gap: gap,
                seg_head_grad,
            }));
            seen.push(losses);
            iter += 1;
        }
        let eval = evaluate(&params, &ds.val, ds.classes, sw, threshold)?;
        let record = EpochRecord {
            epoch,
            phase,
            losses: mean_losses(&seen),
            cam_miou: eval.cam_filtered.miou,
            cam_miou_unfiltered: eval.cam_unfiltered.miou,
            mask_miou: eval.mask.miou,
        };
        on_event(Event::Epoch(&record));
        if best.as_ref().is_none_or(|(m, _, _)| record.cam_miou > *m) {
            best = Some((record.cam_miou, epoch, params.clone()));
        }
        records.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        records,
        params,
        best_params,
        best_epoch,
    })
}

//! Confusion-matrix mIoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Predicted classes missing from the image label become background.
    CamFiltered,
    CamUnfiltered,
    Mask,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CamFiltered => "cam_filtered",
            Self::CamUnfiltered => "cam_unfiltered",
            Self::Mask => "mask",
        }
    }
}

/// `(C+1) × (C+1)` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(labels: usize) -> Self {
        Self {
            n: labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn labels(&self) -> usize {
        self.n
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Accumulates one image; `keep(label)` false remaps predictions to background.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, keep: impl Fn(usize) -> bool) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(invalid(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.n || t >= self.n {
                return Err(invalid(format!("label {} outside 0..{}", p.max(t), self.n)));
            }
            let p = if p > 0 && !keep(p) { 0 } else { p };
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    /// `None` for labels absent from both prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.count(c, c);
                let gt: u64 = (0..self.n).map(|p| self.count(c, p)).sum();
                let pred: u64 = (0..self.n).map(|t| self.count(t, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// Index 0 is background.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_confusion(conf: &Confusion, mode: EvalMode) -> Self {
        let per_class = conf.iou();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Self { mode, per_class, miou }
    }

    /// `class,iou` rows, background first, then a final `mIoU` row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,iou\n");
        for (i, v) in self.per_class.iter().enumerate() {
            let name = if i == 0 {
                "background"
            } else {
                class_names.get(i - 1).map_or("?", String::as_str)
            };
            match v {
                Some(v) => writeln!(out, "{name},{v:.6}"),
                None => writeln!(out, "{name},"),
            }
            .expect("writing to a String cannot fail");
        }
        writeln!(out, "mIoU,{:.6}", self.miou).expect("writing to a String cannot fail");
        out
    }
}

/// mIoU over a split. `classes` counts foreground classes; filtered mode needs `image_labels`.
pub fn miou(
    preds: &[LabelMap],
    gts: &[LabelMap],
    classes: usize,
    mode: EvalMode,
    image_labels: Option<&[Vec<bool>]>,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let labels = match (mode, image_labels) {
        (EvalMode::CamFiltered, None) => {
            return Err(invalid("filtered evaluation needs image labels"));
        }
        (_, Some(l)) if l.len() != preds.len() => {
            return Err(invalid("one image label per prediction is required"));
        }
        (_, l) => l,
    };
    let mut conf = Confusion::new(classes + 1);
    for (i, (p, t)) in preds.iter().zip(gts).enumerate() {
        match (mode, labels) {
            (EvalMode::CamFiltered, Some(l)) => {
                let l = &l[i];
                conf.add(p, t, |c| l.get(c - 1).copied().unwrap_or(false))?
            }
            _ => conf.add(p, t, |_| true)?,
        }
    }
    Ok(EvalReport::from_confusion(&conf, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(h: usize, w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = vec![m(2, 2, &[0, 1, 2, 2]), m(2, 2, &[0, 0, 3, 1])];
        let r = miou(&gt, &gt, 4, EvalMode::Mask, None).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class[4], None);
    }

    #[test]
    fn all_background_prediction() {
        let r = miou(&[m(1, 2, &[0, 0])], &[m(1, 2, &[1, 1])], 2, EvalMode::Mask, None).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
        assert_eq!(r.per_class[0], Some(0.0));
    }

    #[test]
    fn two_by_two() {
        let r = miou(
            &[m(2, 2, &[1, 1, 0, 0])],
            &[m(2, 2, &[1, 0, 1, 0])],
            1,
            EvalMode::Mask,
            None,
        )
        .unwrap();
        assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
    }

    #[test]
    fn filtering_removes_false_positives() {
        let pred = [m(1, 4, &[1, 2, 2, 0])];
        let gt = [m(1, 4, &[1, 0, 0, 0])];
        let labels = [vec![true, false]];
        let u = miou(&pred, &gt, 2, EvalMode::CamUnfiltered, Some(&labels)).unwrap();
        let f = miou(&pred, &gt, 2, EvalMode::CamFiltered, Some(&labels)).unwrap();
        assert_eq!(f.miou, 1.0);
        assert!(u.miou < f.miou);
        assert!(miou(&pred, &gt, 2, EvalMode::CamFiltered, None).is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(miou(&[m(1, 2, &[0, 0])], &[m(2, 1, &[0, 0])], 1, EvalMode::Mask, None).is_err());
        assert!(miou(&[m(1, 1, &[3])], &[m(1, 1, &[0])], 1, EvalMode::Mask, None).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = miou(
            &[m(2, 2, &[1, 1, 0, 0])],
            &[m(2, 2, &[1, 0, 1, 0])],
            2,
            EvalMode::Mask,
            None,
        )
        .unwrap();
        let csv = r.to_csv(&["a".into(), "b".into()]);
        assert_eq!(csv, "class,iou\nbackground,0.333333\na,0.333333\nb,\nmIoU,0.333333\n");
    }
}

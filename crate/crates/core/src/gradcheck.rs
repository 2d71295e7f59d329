//! Central finite-difference checks of every loss term against the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{ArchConfig, Params};
use crate::config::{Switches, TrainConfig};
use crate::data::generate_dataset;
use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{forward_batch, make_views, BatchItem, Phase, TERM_NAMES};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates whose branch pattern changes within this distance are skipped.
    pub kink_radius: f64,
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_radius: 1e-4,
            coords_per_tensor: 2,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Largest analytic magnitude seen, to tell a live term from an all-zero one.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub terms: Vec<TermCheck>,
    pub skipped_near_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.worst_rel_error < self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Two synthetic images with their views, drawn from `seed`.
pub fn micro_batch(cfg: &TrainConfig, classes: usize, seed: u64) -> Result<Vec<BatchItem>> {
    let ds = generate_dataset(2, 1, classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.train
        .iter()
        .map(|s| {
            Ok(BatchItem {
                views: make_views(&s.image, cfg, &mut rng)?,
                label: s.label.clone(),
            })
        })
        .collect()
}

struct Probe {
    values: [f64; 7],
    signature: u64,
}

fn probe(params: &Params, batch: &[BatchItem], cfg: &TrainConfig, sw: &Switches, saved: &[Tensor]) -> Result<Probe> {
    let g = Graph::with_kink_tracking().replaying(saved.to_vec());
    let fwd = forward_batch(g, params, batch, cfg, sw, Phase::Full)?;
    let mut values = [0.0; 7];
    for (slot, v) in values.iter_mut().zip(fwd.terms.iter().chain([&fwd.total])) {
        *slot = fwd.graph.value(*v).item();
    }
    Ok(Probe {
        values,
        signature: fwd.graph.kink_signature().expect("tracking graph"),
    })
}

/// Compares analytic and central-difference gradients of the six terms and the total
/// on sampled coordinates of every parameter tensor.
pub fn check_gradients(
    params: &Params,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    sw: &Switches,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(invalid("gradient check needs a non-empty batch"));
    }
    let fwd = forward_batch(Graph::with_kink_tracking(), params, batch, cfg, sw, Phase::Full)?;
    let base_signature = fwd.graph.kink_signature().expect("tracking graph");
    let saved = fwd.graph.detached_values().to_vec();
    let targets: Vec<_> = fwd.terms.iter().copied().chain([fwd.total]).collect();
    let analytic: Vec<_> = targets.iter().map(|&t| fwd.graph.backward(t)).collect::<Result<_>>()?;

    let names: Vec<String> = TERM_NAMES
        .iter()
        .map(|n| n.to_string())
        .chain(["total".into()])
        .collect();
    let mut terms: Vec<TermCheck> = names
        .into_iter()
        .map(|term| TermCheck {
            term,
            worst_rel_error: 0.0,
            worst_param: String::new(),
            checked: 0,
            max_abs_grad: 0.0,
        })
        .collect();
    let mut skipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();

    for (name, var) in fwd.params.iter() {
        let numel = params.get(name).expect("bound parameter").numel();
        for _ in 0..opts.coords_per_tensor.min(numel) {
            let idx = rng.random_range(0..numel);
            let original = params.get(name).expect("bound parameter").data()[idx];
            let mut at = |delta: f64| -> Result<Probe> {
                work.get_mut(name).expect("parameter").data_mut()[idx] = original + delta;
                let p = probe(&work, batch, cfg, sw, &saved);
                work.get_mut(name).expect("parameter").data_mut()[idx] = original;
                p
            };
            let far = [at(opts.kink_radius)?, at(-opts.kink_radius)?];
            let near = [at(opts.step)?, at(-opts.step)?];
            if far.iter().chain(&near).any(|p| p.signature != base_signature) {
                skipped += 1;
                continue;
            }
            for (k, check) in terms.iter_mut().enumerate() {
                let a = analytic[k].get(var).map_or(0.0, |g| g[idx]);
                let n = (near[0].values[k] - near[1].values[k]) / (2.0 * opts.step);
                let err = relative_error(a, n);
                check.checked += 1;
                check.max_abs_grad = check.max_abs_grad.max(a.abs());
                if err > check.worst_rel_error {
                    check.worst_rel_error = err;
                    check.worst_param = format!("{name}[{idx}]");
                }
            }
        }
    }
    Ok(GradCheckReport {
        terms,
        skipped_near_kinks: skipped,
        tolerance: opts.tolerance,
    })
}

/// Gradient check on a fresh two-image micro-batch with randomly initialised parameters.
pub fn run_default(
    cfg: &TrainConfig,
    sw: &Switches,
    classes: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let batch = micro_batch(cfg, classes, opts.seed)?;
    let params = Params::init(&ArchConfig::desk(classes), opts.seed);
    check_gradients(&params, &batch, cfg, sw, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SABOTAGE_RELU;

    fn small() -> GradCheckOptions {
        GradCheckOptions {
            coords_per_tensor: 1,
            ..GradCheckOptions::default()
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_terms_agree() {
        let report = run_default(&TrainConfig::default(), &Switches::full(), 4, &small()).unwrap();
        assert!(report.passed(), "{report:#?}");
        assert!(report.terms.iter().all(|t| t.checked > 0));
    }

    #[test]
    fn broken_relu_rule_is_caught() {
        SABOTAGE_RELU.with(|c| c.set(true));
        let report = run_default(&TrainConfig::default(), &Switches::full(), 4, &small());
        SABOTAGE_RELU.with(|c| c.set(false));
        let report = report.unwrap();
        assert!(!report.passed());
        let cls = &report.terms[0];
        assert!(cls.worst_rel_error > 0.1, "{cls:?}");
    }
}

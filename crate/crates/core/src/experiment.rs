//! Run orchestration: datasets, training runs with their artifacts, evaluation,
//! CAM export and the multi-seed ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::backbone::{self, Params};
use crate::checkpoint;
use crate::compensator::{compensatory_cams, BatchFeatureBank};
use crate::config::{Preset, RunConfig, Switches};
use crate::crr::refine_view;
use crate::data::{class_names, generate_dataset, load_dataset, Dataset, Sample};
use crate::error::{invalid, Result, RtcError};
use crate::mask::export_mask;
use crate::tensor::{io, Graph, Tensor};
use crate::trainer::{self, cam_threshold, metrics_csv, pseudo_mask, resize, EvalSummary, Event, TrainOutcome};

/// Loads `run.data` when set, otherwise generates the dataset in memory.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.run.data {
        Some(path) => load_dataset(path),
        None => generate_dataset(cfg.run.n_train, cfg.run.n_val, cfg.run.classes, cfg.run.data_seed),
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.rtc";
pub const BEST_CHECKPOINT: &str = "best.rtc";
pub const CONFIG_FILE: &str = "config.json";

/// Trains one configuration. With `out`, writes the metrics CSV, both checkpoints and
/// the resolved config there. `init` skips pretraining.
pub fn run_training(
    cfg: &RunConfig,
    ds: &Dataset,
    init: Option<Params>,
    out: Option<&Path>,
    on_event: impl FnMut(Event<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = match init {
        Some(p) => p,
        None => trainer::pretrain(&cfg.train, ds)?,
    };
    let outcome = trainer::train_from(&cfg.train, &cfg.switches(), ds, init, on_event)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics_csv(&outcome.records))?;
        checkpoint::save(&outcome.params, dir.join(FINAL_CHECKPOINT))?;
        checkpoint::save(&outcome.best_params, dir.join(BEST_CHECKPOINT))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    }
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            _ => None,
        }
    }

    pub fn samples(self, ds: &Dataset) -> &[Sample] {
        match self {
            Self::Train => &ds.train,
            Self::Val => &ds.val,
        }
    }
}

/// Evaluates `params` on a split and, with `out`, writes one CSV per mode.
pub fn run_eval(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    params: &Params,
    out: Option<&Path>,
) -> Result<EvalSummary> {
    let summary = trainer::evaluate(
        params,
        split.samples(ds),
        ds.classes,
        &cfg.switches(),
        cam_threshold(&cfg.train),
    )?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let names = class_names(ds.classes);
        for report in [&summary.cam_filtered, &summary.cam_unfiltered, &summary.mask] {
            let file = format!("eval_{}.csv", report.mode.as_str());
            fs::write(dir.join(file), report.to_csv(&names))?;
        }
    }
    Ok(summary)
}

/// CAMs of one image at feature resolution.
#[derive(Clone, Debug)]
pub struct ExportedCams {
    /// `M̃`, `[C, h, w]`.
    pub raw: Tensor,
    /// `M`, `[C, h, w]`.
    pub refined: Tensor,
    /// `M̂`, `[C, h, w]`; rows of classes absent from the label equal `M`.
    pub compensatory: Tensor,
}

/// Raw, refined and compensatory CAMs of a single image; the feature bank is the
/// image's own normalised features.
pub fn image_cams(params: &Params, sample: &Sample, sw: &Switches, top_k: usize) -> Result<ExportedCams> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let v = g.constant(sample.image.clone());
    let pyr = backbone::encode(&mut g, v, &bound)?;
    let raw = backbone::raw_cams(&mut g, pyr.x, bound.var("classifier.w"))?;
    let refined = refine_view(&mut g, sw.refine, raw, &pyr, v, &bound, true)?.cams;
    let xn = g.l2_normalize(pyr.x, 0, crate::ctr::FEATURE_EPS)?;
    let bank = BatchFeatureBank::build(&mut g, &[xn])?;
    let classes = sample.classes();
    let mut compensatory = g.value(refined).clone();
    if !classes.is_empty() {
        let comp = compensatory_cams(&mut g, refined, &bank, 0, &classes, top_k)?;
        let hw = compensatory.numel() / compensatory.shape()[0];
        let rows = g.value(comp.cams).data();
        for (r, &c) in classes.iter().enumerate() {
            compensatory.data_mut()[c * hw..(c + 1) * hw].copy_from_slice(&rows[r * hw..(r + 1) * hw]);
        }
    }
    Ok(ExportedCams {
        raw: g.value(raw).clone(),
        refined: g.value(refined).clone(),
        compensatory,
    })
}

/// Paths written for one exported image.
#[derive(Clone, Debug)]
pub struct ExportedFiles {
    pub raw: PathBuf,
    pub refined: PathBuf,
    pub compensatory: PathBuf,
    pub mask: PathBuf,
}

/// Writes `M̃`, `M`, `M̂` as RTT1 tensors and the pseudo-mask (image resolution) as PGM
/// for every sample of the split.
pub fn export_cams(cfg: &RunConfig, params: &Params, samples: &[Sample], out: &Path) -> Result<Vec<ExportedFiles>> {
    fs::create_dir_all(out)?;
    let sw = cfg.switches();
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let cams = image_cams(params, s, &sw, cfg.train.top_k)?;
        let f = ExportedFiles {
            raw: out.join(format!("{i:05}_raw.rtt")),
            refined: out.join(format!("{i:05}_refined.rtt")),
            compensatory: out.join(format!("{i:05}_compensatory.rtt")),
            mask: out.join(format!("{i:05}_mask.pgm")),
        };
        io::save(&f.raw, &cams.raw)?;
        io::save(&f.refined, &cams.refined)?;
        io::save(&f.compensatory, &cams.compensatory)?;
        let up = resize(&cams.refined, s.mask.height(), s.mask.width())?;
        let mask = pseudo_mask(&up, &s.classes(), cfg.train.theta_fg, cfg.train.theta_bg)?;
        export_mask(&mask.labels, &f.mask)?;
        files.push(f);
    }
    Ok(files)
}

// ---- ablation -------------------------------------------------------------

/// One trained configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    /// Final-epoch filtered CAM mIoU.
    pub cam_miou: f64,
    pub mask_miou: f64,
    /// Mask mIoU at the last warm-up epoch.
    pub warmup_mask_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MedianRow {
    pub variant: String,
    pub cam_miou: f64,
    pub mask_miou: f64,
    pub warmup_mask_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingVerdict {
    pub cam_monotone: bool,
    pub mask_monotone: bool,
    pub cam_gain: f64,
    pub mask_gain: f64,
    /// Full beats baseline by at least [`MIN_GAIN`] on one metric.
    pub gain_ok: bool,
    /// Full's final mask mIoU is within [`BOUNDARY_SLACK`] of its warm-up value or above.
    pub boundary_ok: bool,
}

impl OrderingVerdict {
    pub fn holds(&self) -> bool {
        self.cam_monotone && self.mask_monotone && self.gain_ok && self.boundary_ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeComparison {
    pub ours: String,
    pub other: String,
    pub ours_mask: f64,
    pub other_mask: f64,
}

impl ModeComparison {
    pub fn margin(&self) -> f64 {
        self.ours_mask - self.other_mask
    }

    pub fn holds(&self) -> bool {
        self.margin() >= -TIE_TOLERANCE
    }

    pub fn outcome(&self) -> &'static str {
        if self.margin().abs() <= TIE_TOLERANCE {
            "tie"
        } else if self.margin() > 0.0 {
            "better"
        } else {
            "worse"
        }
    }
}

pub const MIN_GAIN: f64 = 0.03;
pub const BOUNDARY_SLACK: f64 = 0.01;
pub const TIE_TOLERANCE: f64 = 0.005;

pub const PCM_VARIANT: &str = "pcm";
pub const STR_VARIANT: &str = "str";

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    /// Presets in ablation order, then comparison variants when run.
    pub medians: Vec<MedianRow>,
    pub ordering: OrderingVerdict,
    /// CRR against PCM, then CTR against STR.
    pub comparisons: Vec<ModeComparison>,
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The four presets, then the PCM and STR variants of the full preset when `comparisons`.
pub fn ablation_variants(base: &RunConfig, comparisons: bool) -> Vec<(String, RunConfig)> {
    let mut out: Vec<(String, RunConfig)> = Preset::ALL
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            c.run.str_mode = false;
            c.run.pcm_mode = false;
            c.apply_preset(p);
            (p.name().to_string(), c)
        })
        .collect();
    if comparisons {
        let mut full = base.clone();
        full.apply_preset(Preset::Full);
        let mut pcm = full.clone();
        pcm.run.pcm_mode = true;
        pcm.run.str_mode = false;
        let mut str_ = full;
        str_.run.str_mode = true;
        str_.run.pcm_mode = false;
        out.push((PCM_VARIANT.into(), pcm));
        out.push((STR_VARIANT.into(), str_));
    }
    out
}

fn result_of(variant: &str, seed: u64, cfg: &RunConfig, outcome: &TrainOutcome) -> RunResult {
    let last = outcome.records.last().expect("at least one epoch");
    let warm = cfg.train.epochs_warmup.max(1);
    let warmup = &outcome.records[warm - 1];
    RunResult {
        variant: variant.to_string(),
        seed,
        cam_miou: last.cam_miou,
        mask_miou: last.mask_miou,
        warmup_mask_miou: warmup.mask_miou,
    }
}

/// Runs `jobs` on up to `threads` workers; results come back in job order.
fn run_parallel<T: Send>(jobs: usize, threads: usize, work: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = work(i);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn summarize(runs: &[RunResult], variants: &[String]) -> Result<Vec<MedianRow>> {
    variants
        .iter()
        .map(|name| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| &r.variant == name).collect();
            if mine.is_empty() {
                return Err(invalid(format!("no runs for variant {name}")));
            }
            let pick = |f: fn(&RunResult) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(MedianRow {
                variant: name.clone(),
                cam_miou: pick(|r| r.cam_miou),
                mask_miou: pick(|r| r.mask_miou),
                warmup_mask_miou: pick(|r| r.warmup_mask_miou),
            })
        })
        .collect()
}

fn row<'a>(rows: &'a [MedianRow], name: &str) -> Result<&'a MedianRow> {
    rows.iter()
        .find(|r| r.variant == name)
        .ok_or_else(|| invalid(format!("missing variant {name}")))
}

pub fn ordering_verdict(rows: &[MedianRow]) -> Result<OrderingVerdict> {
    let chain: Vec<&MedianRow> = Preset::ALL.iter().map(|p| row(rows, p.name())).collect::<Result<_>>()?;
    let monotone = |f: fn(&MedianRow) -> f64| chain.windows(2).all(|w| f(w[0]) <= f(w[1]));
    let (base, full) = (chain[0], chain[3]);
    let cam_gain = full.cam_miou - base.cam_miou;
    let mask_gain = full.mask_miou - base.mask_miou;
    Ok(OrderingVerdict {
        cam_monotone: monotone(|r| r.cam_miou),
        mask_monotone: monotone(|r| r.mask_miou),
        cam_gain,
        mask_gain,
        gain_ok: cam_gain >= MIN_GAIN || mask_gain >= MIN_GAIN,
        boundary_ok: full.mask_miou >= full.warmup_mask_miou - BOUNDARY_SLACK,
    })
}

pub fn mode_comparisons(rows: &[MedianRow]) -> Result<Vec<ModeComparison>> {
    let full = row(rows, Preset::Full.name())?;
    [(PCM_VARIANT, "crr"), (STR_VARIANT, "ctr")]
        .into_iter()
        .map(|(other, ours)| {
            let o = row(rows, other)?;
            Ok(ModeComparison {
                ours: ours.into(),
                other: other.into(),
                ours_mask: full.mask_miou,
                other_mask: o.mask_miou,
            })
        })
        .collect()
}

/// Per-seed pretraining is shared by every variant of that seed, since it only depends
/// on the optimisation settings. With `out`, each run writes its artifacts to
/// `out/<variant>/seed<k>` and the summaries land in `out`.
pub fn run_ablation(
    base: &RunConfig,
    ds: &Dataset,
    comparisons: bool,
    threads: usize,
    out: Option<&Path>,
    log: impl Fn(&str) + Sync,
) -> Result<AblationReport> {
    base.validate()?;
    let seeds = base.run.ablation_seeds.clone();
    let variants = ablation_variants(base, comparisons);
    let seeded = |cfg: &RunConfig, seed: u64| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        c
    };

    let inits = run_parallel(seeds.len(), threads, |i| {
        log(&format!("pretraining seed {}", seeds[i]));
        trainer::pretrain(&seeded(base, seeds[i]).train, ds)
    })?;

    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..variants.len()).map(move |v| (s, v)))
        .collect();
    let runs = run_parallel(jobs.len(), threads, |j| {
        let (s, v) = jobs[j];
        let (name, cfg) = &variants[v];
        let cfg = seeded(cfg, seeds[s]);
        let dir = out.map(|d| d.join(name).join(format!("seed{}", seeds[s])));
        let outcome = run_training(&cfg, ds, Some(inits[s].clone()), dir.as_deref(), |_| {})?;
        let r = result_of(name, seeds[s], &cfg, &outcome);
        log(&format!(
            "{name} seed {}: cam {:.4} mask {:.4}",
            r.seed, r.cam_miou, r.mask_miou
        ));
        Ok(r)
    })?;

    let names: Vec<String> = variants.iter().map(|(n, _)| n.clone()).collect();
    let medians = summarize(&runs, &names)?;
    let ordering = ordering_verdict(&medians)?;
    let comparisons = if comparisons {
        mode_comparisons(&medians)?
    } else {
        Vec::new()
    };
    let report = AblationReport {
        runs,
        medians,
        ordering,
        comparisons,
    };
    if let Some(dir) = out {
        write_ablation(&report, dir)?;
    }
    Ok(report)
}

pub const RUNS_CSV_HEADER: &str = "variant,seed,cam_miou,mask_miou,warmup_mask_miou";
pub const MEDIANS_CSV_HEADER: &str = "variant,cam_miou,mask_miou,warmup_mask_miou";

pub fn runs_csv(runs: &[RunResult]) -> String {
    let mut s = format!("{RUNS_CSV_HEADER}\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            r.variant, r.seed, r.cam_miou, r.mask_miou, r.warmup_mask_miou
        )
        .expect("writing to a String cannot fail");
    }
    s
}

pub fn medians_csv(rows: &[MedianRow]) -> String {
    let mut s = format!("{MEDIANS_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            r.variant, r.cam_miou, r.mask_miou, r.warmup_mask_miou
        )
        .expect("writing to a String cannot fail");
    }
    s
}

fn verdict_word(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "violated"
    }
}

/// Human-readable summary of the medians and verdicts.
pub fn report_text(report: &AblationReport) -> String {
    let mut s = String::new();
    let o = &report.ordering;
    let w = |s: &mut String, line: String| writeln!(s, "{line}").expect("writing to a String cannot fail");
    w(
        &mut s,
        format!("{:<10} {:>10} {:>10}", "variant", "cam_miou", "mask_miou"),
    );
    for r in &report.medians {
        w(
            &mut s,
            format!("{:<10} {:>10.4} {:>10.4}", r.variant, r.cam_miou, r.mask_miou),
        );
    }
    w(&mut s, format!("cam ordering: {}", verdict_word(o.cam_monotone)));
    w(&mut s, format!("mask ordering: {}", verdict_word(o.mask_monotone)));
    w(
        &mut s,
        format!(
            "full - baseline: cam {:+.4}, mask {:+.4} ({})",
            o.cam_gain,
            o.mask_gain,
            verdict_word(o.gain_ok)
        ),
    );
    w(
        &mut s,
        format!("full mask vs warm-up boundary: {}", verdict_word(o.boundary_ok)),
    );
    for c in &report.comparisons {
        w(
            &mut s,
            format!(
                "{} vs {}: mask {:.4} vs {:.4} ({}, {})",
                c.ours,
                c.other,
                c.ours_mask,
                c.other_mask,
                c.outcome(),
                verdict_word(c.holds())
            ),
        );
    }
    s
}

pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation_runs.csv"), runs_csv(&report.runs))?;
    fs::write(dir.join("ablation.csv"), medians_csv(&report.medians))?;
    fs::write(dir.join("ablation.txt"), report_text(report))?;
    fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(report).map_err(RtcError::from)? + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchConfig;

    fn row(v: &str, cam: f64, mask: f64, warm: f64) -> MedianRow {
        MedianRow {
            variant: v.into(),
            cam_miou: cam,
            mask_miou: mask,
            warmup_mask_miou: warm,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn ordering_rules() {
        let rows = vec![
            row("baseline", 0.40, 0.50, 0.0),
            row("crr", 0.42, 0.50, 0.0),
            row("crr_ctr", 0.42, 0.51, 0.0),
            row("full", 0.42, 0.52, 0.52),
        ];
        let v = ordering_verdict(&rows).unwrap();
        assert!(v.cam_monotone && v.mask_monotone && v.boundary_ok);
        assert!(!v.gain_ok);
        let mut dip = rows.clone();
        dip[2].mask_miou = 0.49;
        dip[3].cam_miou = 0.45;
        dip[3].warmup_mask_miou = 0.54;
        let v = ordering_verdict(&dip).unwrap();
        assert!(!v.mask_monotone && v.cam_monotone && v.gain_ok && !v.boundary_ok);
        assert!(!v.holds());
    }

    #[test]
    fn comparison_ties() {
        let rows = vec![
            row("full", 0.5, 0.600, 0.0),
            row("pcm", 0.5, 0.604, 0.0),
            row("str", 0.5, 0.62, 0.0),
        ];
        let c = mode_comparisons(&rows).unwrap();
        assert_eq!((c[0].outcome(), c[0].holds()), ("tie", true));
        assert_eq!((c[1].outcome(), c[1].holds()), ("worse", false));
    }

    #[test]
    fn variant_switches() {
        let v = ablation_variants(&RunConfig::default(), true);
        let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["baseline", "crr", "crr_ctr", "full", "pcm", "str"]);
        assert!(!v[0].1.run.enable_crr && !v[0].1.run.enable_ctr && !v[0].1.run.enable_comloss);
        assert!(v[4].1.run.pcm_mode && !v[4].1.run.str_mode && v[4].1.run.enable_comloss);
        assert!(v[5].1.run.str_mode && !v[5].1.run.pcm_mode);
        for (_, c) in &v {
            c.validate().unwrap();
        }
    }

    #[test]
    fn parallel_keeps_order() {
        let r = run_parallel(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(r, vec![0, 1, 4, 9, 16, 25, 36]);
        assert!(run_parallel(3, 2, |i| if i == 1 { Err(invalid("x")) } else { Ok(i) }).is_err());
    }

    #[test]
    fn compensatory_export_dominates() {
        let ds = generate_dataset(2, 1, 4, 5).unwrap();
        let params = Params::init(&ArchConfig::desk(4), 2);
        let cfg = RunConfig::default();
        for s in &ds.train {
            let c = image_cams(&params, s, &cfg.switches(), cfg.train.top_k).unwrap();
            assert_eq!(c.raw.shape(), c.compensatory.shape());
            for (h, m) in c.compensatory.data().iter().zip(c.refined.data()) {
                assert!(h >= m);
            }
        }
    }
}

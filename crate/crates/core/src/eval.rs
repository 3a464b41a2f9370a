//! Metrics, evaluation, missing-data injection, robustness sweeps and the
//! spectral-index error histograms.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smag_tensor::{NormMode, Real};

use crate::data::{fractal_noise, NormStats, Scene, MSI_BANDS, NIR, RED};
use crate::error::{config, data, Result};
use crate::model::Model;
use crate::params::Ctx;
use crate::rng::child_seed;
use crate::train::make_inputs;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &[u8], label: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != label.len() {
        return Err(data(format!(
            "prediction has {} pixels, label {}",
            pred.len(),
            label.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.iter().zip(label) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(data("confusion inputs must be binary")),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
    pub threshold: Option<f64>,
}

/// Ratio with an empty denominator read as a perfect score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: ConfusionCounts) -> MetricReport {
    MetricReport {
        oa: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        counts: c,
        threshold: None,
    }
}

pub fn binarize(probs: &[f32], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p as f64 >= threshold)).collect()
}

/// Per-pixel water probabilities of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProbs {
    pub primary: Vec<f32>,
    pub sar: Option<Vec<f32>>,
}

fn sigmoid(z: f64) -> f32 {
    (1.0 / (1.0 + (-z).exp())) as f32
}

/// Inference with running normalization statistics.
pub fn predict<T: Real>(model: &Model<T>, scenes: &[&Scene], stats: &NormStats, batch_size: usize) -> Result<Vec<HeadProbs>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let (inputs, _) = make_inputs::<T>(chunk, stats)?;
        let mut ctx = Ctx::new(&model.store, NormMode::RunningStats, false);
        let pred = model.forward(&mut ctx, &inputs)?;
        let split = |v: smag_tensor::Var| -> Vec<Vec<f32>> {
            let t = ctx.g.value(v);
            let per = t.len() / chunk.len();
            t.data()
                .chunks(per)
                .map(|c| c.iter().map(|z| sigmoid(z.as_f64())).collect())
                .collect()
        };
        let primary = split(pred.primary);
        let sar = pred.sar.map(split);
        for (i, p) in primary.into_iter().enumerate() {
            out.push(HeadProbs {
                primary: p,
                sar: sar.as_ref().map(|s| s[i].clone()),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    pub report: MetricReport,
}

/// Errors at pixels whose MSI was missing, reported as their own category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingBreakdown {
    pub pixels: u64,
    pub false_negatives: u64,
    pub false_positives: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub scenes: usize,
    /// Pooled counts of the primary (fused) head.
    pub aggregate: MetricReport,
    /// SAR-path head at the same threshold (dual models only).
    pub sar_head: Option<MetricReport>,
    pub missing: MissingBreakdown,
    #[serde(skip)]
    pub per_scene: Vec<SceneMetrics>,
}

pub fn evaluate_probs(scenes: &[&Scene], probs: &[HeadProbs], threshold: f64) -> Result<EvalReport> {
    if scenes.len() != probs.len() {
        return Err(data("one prediction per scene required"));
    }
    let mut pooled = ConfusionCounts::default();
    let mut pooled_sar: Option<ConfusionCounts> = None;
    let mut missing = MissingBreakdown::default();
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (s, p) in scenes.iter().zip(probs) {
        let pred = binarize(&p.primary, threshold);
        let c = confusion(&pred, &s.label)?;
        pooled.add(&c);
        let mut report = metrics(c);
        report.threshold = Some(threshold);
        per_scene.push(SceneMetrics {
            id: s.id.clone(),
            report,
        });
        for ((&v, &y), &l) in s.validity.iter().zip(&pred).zip(&s.label) {
            if v == 0 {
                missing.pixels += 1;
                missing.false_negatives += u64::from(y == 0 && l == 1);
                missing.false_positives += u64::from(y == 1 && l == 0);
            }
        }
        if let Some(sp) = &p.sar {
            let c = confusion(&binarize(sp, threshold), &s.label)?;
            pooled_sar.get_or_insert_with(ConfusionCounts::default).add(&c);
        }
    }
    let with_t = |c: ConfusionCounts| MetricReport {
        threshold: Some(threshold),
        ..metrics(c)
    };
    Ok(EvalReport {
        threshold,
        scenes: scenes.len(),
        aggregate: with_t(pooled),
        sar_head: pooled_sar.map(with_t),
        missing,
        per_scene,
    })
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    scenes: &[&Scene],
    stats: &NormStats,
    threshold: f64,
    batch_size: usize,
) -> Result<(EvalReport, Vec<HeadProbs>)> {
    let probs = predict(model, scenes, stats, batch_size)?;
    Ok((evaluate_probs(scenes, &probs, threshold)?, probs))
}

pub fn per_scene_csv(rows: &[SceneMetrics]) -> String {
    let mut out = String::from("scene_id,tp,fp,fn,tn,oa,precision,recall,iou\n");
    for r in rows {
        let (m, c) = (&r.report, &r.report.counts);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id, c.tp, c.fp, c.fn_, c.tn, m.oa, m.precision, m.recall, m.iou
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPattern {
    /// Columns removed from the left edge, column-major.
    #[default]
    Band,
    /// Smooth noise blobs.
    Blobs,
}

impl std::str::FromStr for MissingPattern {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "band" => Ok(Self::Band),
            "blobs" => Ok(Self::Blobs),
            _ => Err(format!("unknown pattern {s:?} (expected band or blobs)")),
        }
    }
}

/// Number of pixels removed at `ratio`: everything beyond `⌊(1 − ratio)·n⌋`.
pub fn missing_count(ratio: f64, n: usize) -> usize {
    let keep = ((1.0 - ratio) * n as f64 + 1e-9).floor() as usize;
    n - keep.min(n)
}

/// Marks `ratio` of the pixels as missing (on top of any existing gaps) and
/// overwrites their MSI values with `fill`. SAR and label are untouched.
pub fn inject_missing(scene: &Scene, ratio: f64, pattern: MissingPattern, fill: f32, rng: &mut ChaCha8Rng) -> Result<Scene> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(config(format!("missing ratio {ratio} must lie in [0, 1]")));
    }
    let (h, w) = (scene.height(), scene.width());
    let n = h * w;
    let m = missing_count(ratio, n);
    let removed: Vec<usize> = match pattern {
        MissingPattern::Band => (0..m).map(|k| (k % h) * w + k / h).collect(),
        MissingPattern::Blobs => {
            let cell = (h.min(w) as f64 / 4.0).max(2.0);
            let field = fractal_noise(rng, h, w, cell, 3);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
            order.truncate(m);
            order
        }
    };
    let mut out = scene.clone();
    for &i in &removed {
        out.validity[i] = 0;
    }
    let plane = n;
    let msi = out.msi.data_mut();
    for b in 0..MSI_BANDS {
        for i in 0..n {
            if out.validity[i] == 0 {
                msi[b * plane + i] = fill;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Missingness in percent.
    pub ratio: u32,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Pooled IoU per injection seed.
    pub per_seed: Vec<f64>,
    /// Per injection seed, per-scene confusion counts (test-split order).
    pub counts: Vec<Vec<ConfusionCounts>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub pattern: MissingPattern,
    pub threshold: f64,
    pub scene_ids: Vec<String>,
    pub rows: Vec<SweepRow>,
    /// IoU at the lowest ratio minus IoU at the highest.
    pub delta: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    // Offsetting by the first value keeps identical samples exact.
    let mean = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates the same model and threshold with MSI progressively removed.
/// Injection seed `s` for scene `i` uses child stream `(s, i)`.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep<T: Real>(
    model: &Model<T>,
    threshold: Option<f64>,
    scenes: &[&Scene],
    stats: &NormStats,
    ratios: &[u32],
    pattern: MissingPattern,
    seeds: usize,
    fill: f32,
    batch_size: usize,
) -> Result<SweepResult> {
    let threshold = threshold.ok_or_else(|| data("checkpoint has no selected threshold; run training to completion first"))?;
    if ratios.is_empty() || seeds == 0 {
        return Err(config("sweep needs at least one ratio and one seed"));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) || ratios.iter().any(|&r| r > 100) {
        return Err(config(format!("ratios {ratios:?} must be strictly increasing percentages")));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let mut per_seed = Vec::with_capacity(seeds);
        let mut counts = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let injected = scenes
                .iter()
                .enumerate()
                .map(|(i, sc)| {
                    let mut rng = rand::SeedableRng::seed_from_u64(child_seed(s as u64, i as u64));
                    inject_missing(sc, r as f64 / 100.0, pattern, fill, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Scene> = injected.iter().collect();
            let (report, _) = evaluate(model, &refs, stats, threshold, batch_size)?;
            per_seed.push(report.aggregate.iou);
            counts.push(report.per_scene.iter().map(|m| m.report.counts).collect());
        }
        let (mean_iou, std_iou) = mean_std(&per_seed);
        rows.push(SweepRow {
            ratio: r,
            mean_iou,
            std_iou,
            per_seed,
            counts,
        });
    }
    let delta = rows[0].mean_iou - rows[rows.len() - 1].mean_iou;
    Ok(SweepResult {
        pattern,
        threshold,
        scene_ids: scenes.iter().map(|s| s.id.clone()).collect(),
        rows,
        delta,
    })
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("ratio,mean_iou,std_iou\n");
    for r in &result.rows {
        out.push_str(&format!("{},{},{}\n", r.ratio, r.mean_iou, r.std_iou));
    }
    out.push_str(&format!("delta,{},\n", result.delta));
    out
}

pub const NDVI_EPS: f64 = 1e-6;

/// `(nir − red) / (nir + red)`, or 0 where the sum is at most [`NDVI_EPS`].
pub fn ndvi(red: &[f32], nir: &[f32]) -> Vec<f64> {
    red.iter()
        .zip(nir)
        .map(|(&r, &n)| {
            let (r, n) = (r as f64, n as f64);
            if n + r <= NDVI_EPS {
                0.0
            } else {
                (n - r) / (n + r)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub fn_: u64,
    pub fp: u64,
}

/// `lo, lo + width, …, hi`.
pub fn uniform_edges(lo: f64, hi: f64, width: f64) -> Vec<f64> {
    let n = ((hi - lo) / width).round() as usize;
    (0..=n).map(|i| lo + i as f64 * width).collect()
}

/// False negatives and false positives per index bin, over valid pixels.
/// Bins are half-open except the last; out-of-range values join the
/// nearest end bin.
pub fn misclass_histogram(pred: &[u8], label: &[u8], valid: &[u8], index: &[f64], edges: &[f64]) -> Result<Vec<HistBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(config("histogram edges must be strictly increasing"));
    }
    let n = pred.len();
    if label.len() != n || valid.len() != n || index.len() != n {
        return Err(data("histogram inputs differ in length"));
    }
    let mut bins: Vec<HistBin> = edges
        .windows(2)
        .map(|w| HistBin {
            lo: w[0],
            hi: w[1],
            fn_: 0,
            fp: 0,
        })
        .collect();
    let last = bins.len() - 1;
    for i in 0..n {
        if valid[i] == 0 || pred[i] == label[i] {
            continue;
        }
        let b = edges.partition_point(|&e| e <= index[i]).saturating_sub(1).min(last);
        if label[i] == 1 {
            bins[b].fn_ += 1;
        } else {
            bins[b].fp += 1;
        }
    }
    Ok(bins)
}

pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,fn,fp\n");
    for b in bins {
        out.push_str(&format!("{:.1},{:.1},{},{}\n", b.lo, b.hi, b.fn_, b.fp));
    }
    out
}

/// NDVI and NIR error histograms of the primary head over the given scenes.
pub fn spectral_histograms(scenes: &[&Scene], probs: &[HeadProbs], threshold: f64) -> Result<(Vec<HistBin>, Vec<HistBin>)> {
    let ndvi_edges = uniform_edges(-1.0, 1.0, 0.1);
    let nir_edges = uniform_edges(0.0, 1.0, 0.1);
    let mut ndvi_bins: Option<Vec<HistBin>> = None;
    let mut nir_bins: Option<Vec<HistBin>> = None;
    for (s, p) in scenes.iter().zip(probs) {
        let plane = s.pixels();
        let red = &s.msi.data()[RED * plane..(RED + 1) * plane];
        let nir = &s.msi.data()[NIR * plane..(NIR + 1) * plane];
        let pred = binarize(&p.primary, threshold);
        let nd = misclass_histogram(&pred, &s.label, &s.validity, &ndvi(red, nir), &ndvi_edges)?;
        let nir_idx: Vec<f64> = nir.iter().map(|&v| v as f64).collect();
        let ni = misclass_histogram(&pred, &s.label, &s.validity, &nir_idx, &nir_edges)?;
        for (acc, new) in [(&mut ndvi_bins, nd), (&mut nir_bins, ni)] {
            match acc {
                Some(a) => a.iter_mut().zip(new).for_each(|(x, y)| {
                    x.fn_ += y.fn_;
                    x.fp += y.fp;
                }),
                None => *acc = Some(new),
            }
        }
    }
    let empty = |e: &[f64]| misclass_histogram(&[], &[], &[], &[], e);
    Ok((
        ndvi_bins.map_or_else(|| empty(&ndvi_edges), Ok)?,
        nir_bins.map_or_else(|| empty(&nir_edges), Ok)?,
    ))
}

//! Mask-based evaluation: top-p% masks, masked re-classification curves,
//! pointing game, average distance to object masks and cross-network comparison.
//!
//! Per-image work runs on a rayon pool. Results are collected in dataset order
//! and aggregated sequentially, so reports do not depend on the worker count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorClass, Result};
use crate::model::Network;
use crate::model_io::{load_image, load_object_mask};
use crate::relevance::{attribute, pixel_contributions, ContributionMap, MethodConfig};
use crate::tensor::{selection_count, top_fraction_indices, RankOrder, Tensor};

pub const DEFAULT_PERCENTAGES: [f64; 15] = [
    1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 40.0, 50.0, 60.0, 75.0, 80.0, 85.0, 90.0, 95.0, 99.0,
];

/// Binary selection over `[H, W]` pixels or `[H, W, C]` input entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    selected: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, selected: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Dimension(format!("mask shape {shape:?} must have rank 1 to 3")));
        }
        if shape.iter().product::<usize>() != selected.len() {
            return Err(Error::Dimension(format!(
                "mask shape {shape:?} does not match {} entries",
                selected.len()
            )));
        }
        Ok(Self { shape, selected })
    }

    pub fn from_indices(shape: Vec<usize>, indices: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        let mut selected = vec![false; n];
        for &i in indices {
            *selected
                .get_mut(i)
                .ok_or_else(|| Error::Dimension(format!("mask index {i} out of range for {n} entries")))? = true;
        }
        Self::new(shape, selected)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// `(row, col)` of every selected entry, one per entry, so a pixel selected in
    /// three channels appears three times.
    fn selected_positions(&self) -> Result<Vec<(usize, usize)>> {
        let (w, c) = match self.shape.as_slice() {
            &[_, w] => (w, 1),
            &[_, w, c] => (w, c),
            s => return Err(Error::Domain(format!("mask of shape {s:?} has no pixel grid"))),
        };
        Ok(self
            .selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| {
                let p = i / c;
                (p / w, p % w)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    InputSigned,
    InputAbs,
    PixelSigned,
    PixelAbs,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [Self::InputSigned, Self::InputAbs, Self::PixelSigned, Self::PixelAbs];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InputSigned => "input-signed",
            Self::InputAbs => "input-abs",
            Self::PixelSigned => "pixel-signed",
            Self::PixelAbs => "pixel-abs",
        }
    }

    pub fn is_pixel(&self) -> bool {
        matches!(self, Self::PixelSigned | Self::PixelAbs)
    }

    /// Shape of masks in this mode for an input of the given shape.
    pub fn mask_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        if !self.is_pixel() {
            return Ok(input_shape.to_vec());
        }
        match input_shape {
            &[h, w, _] => Ok(vec![h, w]),
            s => Err(Error::Domain(format!("pixel masks need an [H, W, C] input, got {s:?}"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown mask mode '{s}'")))
    }
}

/// Full ranking of the entries (or pixels) of a relevance map, best first.
pub fn rank_values(values: &Tensor, mode: MaskMode) -> Result<Vec<usize>> {
    match mode {
        MaskMode::InputSigned => top_fraction_indices(values.data(), 1.0, RankOrder::Signed),
        MaskMode::InputAbs => top_fraction_indices(values.data(), 1.0, RankOrder::Absolute),
        MaskMode::PixelSigned | MaskMode::PixelAbs => {
            let px = pixel_contributions(values, mode == MaskMode::PixelAbs)?;
            top_fraction_indices(px.data(), 1.0, RankOrder::Signed)
        }
    }
}

fn fraction(percent: f64) -> Result<f64> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Domain(format!("percentage {percent} is outside (0, 100]")));
    }
    Ok(percent / 100.0)
}

/// Mask made of the first `ceil(p% · n)` entries of a ranking.
pub fn mask_from_ranking(shape: Vec<usize>, ranking: &[usize], percent: f64) -> Result<Mask> {
    let count = selection_count(fraction(percent)?, ranking.len())?;
    Mask::from_indices(shape, &ranking[..count])
}

/// Top-`percent`% mask of a relevance map.
pub fn make_mask(map: &ContributionMap, percent: f64, mode: MaskMode) -> Result<Mask> {
    make_mask_from_values(&map.values, percent, mode)
}

pub fn make_mask_from_values(values: &Tensor, percent: f64, mode: MaskMode) -> Result<Mask> {
    let shape = mode.mask_shape(values.shape())?;
    let n = shape.iter().product();
    let f = fraction(percent)?;
    let idx = match mode {
        MaskMode::InputSigned => top_fraction_indices(values.data(), f, RankOrder::Signed)?,
        MaskMode::InputAbs => top_fraction_indices(values.data(), f, RankOrder::Absolute)?,
        MaskMode::PixelSigned | MaskMode::PixelAbs => {
            let px = pixel_contributions(values, mode == MaskMode::PixelAbs)?;
            top_fraction_indices(px.data(), f, RankOrder::Signed)?
        }
    };
    debug_assert!(idx.len() <= n);
    Mask::from_indices(shape, &idx)
}

/// A uniformly random ranking of `n` entries.
pub fn random_ranking(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Random mask with the same number of entries a top-`percent`% mask would select.
pub fn random_mask(shape: Vec<usize>, percent: f64, rng: &mut ChaCha8Rng) -> Result<Mask> {
    let ranking = random_ranking(shape.iter().product(), rng);
    mask_from_ranking(shape, &ranking, percent)
}

/// Sets unselected entries to 0. A `[H, W]` mask applies to every channel.
pub fn apply_mask(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    let per_entry = if mask.shape() == image.shape() {
        1
    } else {
        match (image.shape(), mask.shape()) {
            (&[h, w, c], &[mh, mw]) if h == mh && w == mw => c,
            (s, m) => {
                return Err(Error::Dimension(format!(
                    "mask of shape {m:?} does not fit an image of shape {s:?}"
                )))
            }
        }
    };
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.selected()[i / per_entry] { v } else { 0.0 })
        .collect();
    Tensor::from_vec(image.shape().to_vec(), data)
}

fn object_grid(object: &Mask) -> Result<(usize, usize)> {
    match object.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::Dimension(format!("object masks are [H, W], got {s:?}"))),
    }
}

fn check_grid(pred: &Mask, h: usize, w: usize) -> Result<()> {
    if pred.shape().len() < 2 || pred.shape()[..2] != [h, w] {
        return Err(Error::Dimension(format!(
            "mask of shape {:?} does not match a {h}x{w} object mask",
            pred.shape()
        )));
    }
    Ok(())
}

/// Share of selected entries that fall inside the object.
pub fn pointing_game(pred: &Mask, object: &Mask) -> Result<f64> {
    let (h, w) = object_grid(object)?;
    check_grid(pred, h, w)?;
    let positions = pred.selected_positions()?;
    if positions.is_empty() {
        return Err(Error::Domain("pointing game on an empty selection".into()));
    }
    let inside = positions.iter().filter(|&&(r, c)| object.selected()[r * w + c]).count();
    Ok(inside as f64 / positions.len() as f64)
}

fn envelope_pass(f: &[Option<u64>], out: &mut [Option<u64>]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_some()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let val = |q: usize| f[q].unwrap() as i128 + (q * q) as i128;
    // Parabola q overtakes p (p < q) at s = (val(q) - val(p)) / (2 (q - p)).
    // Breakpoints are compared as exact fractions.
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut starts: Vec<(i128, i128)> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            let Some(&p) = hull.last() else {
                hull.push(q);
                starts.push((i128::MIN, 1));
                break;
            };
            let num = val(q) - val(p);
            let den = 2 * (q - p) as i128;
            let (snum, sden) = *starts.last().unwrap();
            // drop p when q overtakes it no later than p itself starts
            if snum != i128::MIN && num * sden <= snum * den {
                hull.pop();
                starts.pop();
                continue;
            }
            hull.push(q);
            starts.push((num, den));
            break;
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() {
            let (num, den) = starts[k + 1];
            if num <= x as i128 * den {
                k += 1;
            } else {
                break;
            }
        }
        let p = hull[k];
        let d = x.abs_diff(p) as u64;
        *o = Some(d * d + f[p].unwrap());
    }
}

/// Exact squared Euclidean distance of every pixel to the nearest object pixel,
/// row-major. Uses separable lower-envelope passes over rows then columns.
pub fn squared_distance_transform(object: &Mask) -> Result<Vec<u64>> {
    let (h, w) = object_grid(object)?;
    if object.count() == 0 {
        return Err(Error::Domain("distance transform of an empty object mask".into()));
    }
    let mut rows = vec![None; h * w];
    for r in 0..h {
        let f: Vec<Option<u64>> = (0..w)
            .map(|c| object.selected()[r * w + c].then_some(0))
            .collect();
        envelope_pass(&f, &mut rows[r * w..(r + 1) * w]);
    }
    let mut out = vec![0u64; h * w];
    let mut col = vec![None; h];
    for c in 0..w {
        let f: Vec<Option<u64>> = (0..h).map(|r| rows[r * w + c]).collect();
        envelope_pass(&f, &mut col);
        for r in 0..h {
            out[r * w + c] = col[r].expect("every column sees the object");
        }
    }
    Ok(out)
}

pub fn distance_transform(object: &Mask) -> Result<Vec<f64>> {
    Ok(squared_distance_transform(object)?
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect())
}

/// Mean distance of selected entries to the object, divided by the image diagonal.
pub fn avg_distance(pred: &Mask, object: &Mask) -> Result<f64> {
    let (h, w) = object_grid(object)?;
    check_grid(pred, h, w)?;
    let dist = distance_transform(object)?;
    let positions = pred.selected_positions()?;
    if positions.is_empty() {
        return Err(Error::Domain("average distance of an empty selection".into()));
    }
    let total: f64 = positions.iter().map(|&(r, c)| dist[r * w + c]).sum();
    let diagonal = ((h * h + w * w) as f64).sqrt();
    Ok(total / positions.len() as f64 / diagonal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

/// JSON dataset description. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentages: Option<Vec<f64>>,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub percentages: Vec<f64>,
}

pub fn validate_percentages(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Domain("percentage list is empty".into()));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 100.0)) {
        return Err(Error::Domain(format!("percentage {bad} is outside (0, 100]")));
    }
    if p.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("percentages must be strictly increasing".into()));
    }
    Ok(())
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let records = manifest
            .records
            .into_iter()
            .map(|r| DatasetRecord {
                image: resolve(&r.image),
                mask: r.mask.as_deref().map(resolve),
                class: r.class,
            })
            .collect();
        Self::new(records, manifest.percentages.unwrap_or_else(|| DEFAULT_PERCENTAGES.to_vec()))
    }

    pub fn new(records: Vec<DatasetRecord>, percentages: Vec<f64>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Domain("dataset has no records".into()));
        }
        validate_percentages(&percentages)?;
        Ok(Self { records, percentages })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMethod {
    Attribution(MethodConfig),
    /// Uniformly random masks of the same size, seeded per image.
    Random,
}

impl EvalMethod {
    pub fn label(&self) -> String {
        match self {
            Self::Attribution(cfg) => cfg.rule.to_string(),
            Self::Random => "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Overrides the dataset's percentage list when set.
    pub percentages: Option<Vec<f64>>,
    pub mode: MaskMode,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            percentages: None,
            mode: MaskMode::PixelAbs,
            workers: 0,
            seed: 0,
        }
    }
}

impl EvalOptions {
    fn percentages<'a>(&'a self, dataset: &'a Dataset) -> Result<&'a [f64]> {
        let p = self.percentages.as_deref().unwrap_or(&dataset.percentages);
        validate_percentages(p)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub mode: MaskMode,
    /// `None` for rows that do not depend on the mask size.
    pub percentage: Option<f64>,
    pub metric: String,
    pub value: f64,
    pub n_images: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedImage {
    pub method: String,
    pub image: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkippedImage>,
}

pub const CSV_HEADER: &str = "method,mode,percentage,metric,value,n_images,n_skipped";

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.skipped.extend(other.skipped);
    }

    /// Value of `metric` for `method` at `percentage` (`None` for size-independent rows).
    pub fn value(&self, method: &str, metric: &str, percentage: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric && r.percentage == percentage)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let pct = r.percentage.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.mode, pct, r.metric, r.value, r.n_images, r.n_skipped
            ));
        }
        out
    }
}

fn run_pool<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

struct Prepared {
    raw: Tensor,
    predicted: usize,
    ranking: Vec<usize>,
    mask_shape: Vec<usize>,
}

/// Loads an image, predicts its class and ranks its entries for `method`.
/// The outer error aborts the run; the inner one skips the image.
fn prepare(
    net: &Network,
    record: &DatasetRecord,
    index: usize,
    method: &EvalMethod,
    opts: &EvalOptions,
) -> Result<std::result::Result<Prepared, String>> {
    let raw = load_image(&record.image)?;
    if raw.shape() != net.input_shape() {
        return Err(Error::Dimension(format!(
            "{}: image shape {:?} does not match the network input {:?}",
            record.image.display(),
            raw.shape(),
            net.input_shape()
        )));
    }
    let mask_shape = opts.mode.mask_shape(raw.shape())?;
    let x = net.preprocessing.apply(&raw)?;
    let (logits, trace) = match net.forward(&x) {
        Ok(v) => v,
        Err(e) if e.class() == ErrorClass::Numeric => return Ok(Err(e.to_string())),
        Err(e) => return Err(e),
    };
    let predicted = crate::model::argmax(logits.data());
    let ranking = match method {
        EvalMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(index as u64);
            random_ranking(mask_shape.iter().product(), &mut rng)
        }
        EvalMethod::Attribution(cfg) => {
            let ranked = attribute(net, &trace, predicted, cfg).and_then(|map| rank_values(&map.values, opts.mode));
            match ranked {
                Ok(r) => r,
                Err(e) if e.class() == ErrorClass::Numeric => return Ok(Err(e.to_string())),
                Err(e) => return Err(e),
            }
        }
    };
    Ok(Ok(Prepared {
        raw,
        predicted,
        ranking,
        mask_shape,
    }))
}

fn masked_prediction(net: &Network, p: &Prepared, percent: f64) -> Result<std::result::Result<usize, String>> {
    let mask = mask_from_ranking(p.mask_shape.clone(), &p.ranking, percent)?;
    let x = net.preprocessing.apply(&apply_mask(&p.raw, &mask)?)?;
    match net.predict_class(&x) {
        Ok(k) => Ok(Ok(k)),
        Err(e) if e.class() == ErrorClass::Numeric => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

enum Outcome<T> {
    Done(T),
    Skipped(String),
}

fn collect_outcomes<T>(
    results: Vec<Result<Outcome<T>>>,
    dataset: &Dataset,
    label: &str,
    report: &mut EvalReport,
) -> Result<Vec<T>> {
    let mut done = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Outcome::Done(v) => done.push(v),
            Outcome::Skipped(reason) => report.skipped.push(SkippedImage {
                method: label.to_string(),
                image: dataset.records[i].image.clone(),
                reason,
            }),
        }
    }
    Ok(done)
}

struct AccuracyItem {
    /// Masked prediction matched the unmasked one, per percentage.
    kept: Vec<bool>,
    /// Masked and unmasked predictions matched the reference class, if any.
    label: Option<(Vec<bool>, bool)>,
}

/// Masked re-classification accuracy per percentage: the share of images whose
/// prediction on the masked image equals the class predicted on the full image.
///
/// When every record carries a reference class the report also has
/// `label_accuracy` per percentage and a size-independent `unmasked_label_accuracy`.
pub fn accuracy_curve(net: &Network, dataset: &Dataset, method: &EvalMethod, opts: &EvalOptions) -> Result<EvalReport> {
    let percentages = opts.percentages(dataset)?;
    let label = method.label();
    let with_labels = dataset.records.iter().all(|r| r.class.is_some());
    let results = run_pool(opts.workers, dataset.records.len(), |i| -> Result<Outcome<AccuracyItem>> {
        let record = &dataset.records[i];
        let p = match prepare(net, record, i, method, opts)? {
            Ok(p) => p,
            Err(reason) => return Ok(Outcome::Skipped(reason)),
        };
        let mut preds = Vec::with_capacity(percentages.len());
        for &pct in percentages {
            match masked_prediction(net, &p, pct)? {
                Ok(k) => preds.push(k),
                Err(reason) => return Ok(Outcome::Skipped(reason)),
            }
        }
        let kept = preds.iter().map(|&k| k == p.predicted).collect();
        let label = record
            .class
            .filter(|_| with_labels)
            .map(|c| (preds.iter().map(|&k| k == c).collect(), p.predicted == c));
        Ok(Outcome::Done(AccuracyItem { kept, label }))
    })?;
    let mut report = EvalReport::default();
    let items = collect_outcomes(results, dataset, &label, &mut report)?;
    let n = items.len();
    let skipped = report.skipped.len();
    let rate = |count: usize| if n == 0 { f64::NAN } else { count as f64 / n as f64 };
    let row = |pct: Option<f64>, metric: &str, value: f64| ReportRow {
        method: label.clone(),
        mode: opts.mode,
        percentage: pct,
        metric: metric.into(),
        value,
        n_images: n,
        n_skipped: skipped,
    };
    for (j, &pct) in percentages.iter().enumerate() {
        let kept = items.iter().filter(|it| it.kept[j]).count();
        report.rows.push(row(Some(pct), "accuracy", rate(kept)));
    }
    if with_labels {
        for (j, &pct) in percentages.iter().enumerate() {
            let hits = items.iter().filter(|it| it.label.as_ref().is_some_and(|l| l.0[j])).count();
            report.rows.push(row(Some(pct), "label_accuracy", rate(hits)));
        }
        let hits = items.iter().filter(|it| it.label.as_ref().is_some_and(|l| l.1)).count();
        report.rows.push(row(None, "unmasked_label_accuracy", rate(hits)));
    }
    Ok(report)
}

/// Pointing game and normalized average distance per percentage, averaged over
/// images that have an object mask.
pub fn localization(net: &Network, dataset: &Dataset, method: &EvalMethod, opts: &EvalOptions) -> Result<EvalReport> {
    let percentages = opts.percentages(dataset)?;
    let label = method.label();
    let results = run_pool(opts.workers, dataset.records.len(), |i| -> Result<Outcome<Vec<(f64, f64)>>> {
        let record = &dataset.records[i];
        let Some(mask_path) = &record.mask else {
            return Ok(Outcome::Skipped("no object mask".into()));
        };
        let object = load_object_mask(mask_path)?;
        let p = match prepare(net, record, i, method, opts)? {
            Ok(p) => p,
            Err(reason) => return Ok(Outcome::Skipped(reason)),
        };
        if object.shape() != &p.raw.shape()[..2] {
            return Err(Error::Dimension(format!(
                "{}: object mask {:?} does not match image {:?}",
                mask_path.display(),
                object.shape(),
                p.raw.shape()
            )));
        }
        if object.count() == 0 {
            return Ok(Outcome::Skipped("empty object mask".into()));
        }
        let mut scores = Vec::with_capacity(percentages.len());
        for &pct in percentages {
            let mask = mask_from_ranking(p.mask_shape.clone(), &p.ranking, pct)?;
            scores.push((pointing_game(&mask, &object)?, avg_distance(&mask, &object)?));
        }
        Ok(Outcome::Done(scores))
    })?;
    let mut report = EvalReport::default();
    let items = collect_outcomes(results, dataset, &label, &mut report)?;
    let n = items.len();
    let skipped = report.skipped.len();
    for (metric, pick) in [
        ("pointing_game", (|s: &(f64, f64)| s.0) as fn(&(f64, f64)) -> f64),
        ("avg_distance", |s: &(f64, f64)| s.1),
    ] {
        for (j, &pct) in percentages.iter().enumerate() {
            let total: f64 = items.iter().map(|it| pick(&it[j])).sum();
            report.rows.push(ReportRow {
                method: label.clone(),
                mode: opts.mode,
                percentage: Some(pct),
                metric: metric.into(),
                value: if n == 0 { f64::NAN } else { total / n as f64 },
                n_images: n,
                n_skipped: skipped,
            });
        }
    }
    Ok(report)
}

/// Masks derived from `net_a`'s relevance, scored with `net_b` against its own
/// unmasked prediction. Also reports how often the two nets agree unmasked.
pub fn cross_compare(
    net_a: &Network,
    net_b: &Network,
    dataset: &Dataset,
    cfg: &MethodConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if net_a.input_shape() != net_b.input_shape() {
        return Err(Error::Dimension(format!(
            "networks take different inputs: {:?} vs {:?}",
            net_a.input_shape(),
            net_b.input_shape()
        )));
    }
    let percentages = opts.percentages(dataset)?;
    let method = EvalMethod::Attribution(*cfg);
    let label = method.label();
    let results = run_pool(opts.workers, dataset.records.len(), |i| -> Result<Outcome<(Vec<bool>, bool)>> {
        let p = match prepare(net_a, &dataset.records[i], i, &method, opts)? {
            Ok(p) => p,
            Err(reason) => return Ok(Outcome::Skipped(reason)),
        };
        let reference = match net_b.predict_class(&net_b.preprocessing.apply(&p.raw)?) {
            Ok(k) => k,
            Err(e) if e.class() == ErrorClass::Numeric => return Ok(Outcome::Skipped(e.to_string())),
            Err(e) => return Err(e),
        };
        let mut kept = Vec::with_capacity(percentages.len());
        for &pct in percentages {
            match masked_prediction(net_b, &p, pct)? {
                Ok(k) => kept.push(k == reference),
                Err(reason) => return Ok(Outcome::Skipped(reason)),
            }
        }
        Ok(Outcome::Done((kept, reference == p.predicted)))
    })?;
    let mut report = EvalReport::default();
    let items = collect_outcomes(results, dataset, &label, &mut report)?;
    let n = items.len();
    let skipped = report.skipped.len();
    let row = |pct: Option<f64>, metric: &str, value: f64| ReportRow {
        method: label.clone(),
        mode: opts.mode,
        percentage: pct,
        metric: metric.into(),
        value,
        n_images: n,
        n_skipped: skipped,
    };
    let rate = |count: usize| if n == 0 { f64::NAN } else { count as f64 / n as f64 };
    for (j, &pct) in percentages.iter().enumerate() {
        report.rows.push(row(Some(pct), "accuracy", rate(items.iter().filter(|it| it.0[j]).count())));
    }
    let agree = items.iter().filter(|it| it.1).count();
    report.rows.push(row(None, "agreement_count", agree as f64));
    report.rows.push(row(None, "agreement_rate", rate(agree)));
    Ok(report)
}

//! Overlap and surface-distance metrics over the three tumor regions.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::regions::labels_to_regions;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("masks hold {a} and {b} voxels")));
    }
    Ok(())
}

/// True positives, false positives, false negatives, true negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(pred: &[bool], reference: &[bool]) -> Result<Self> {
        check_len(pred.len(), reference.len())?;
        let mut c = Confusion::default();
        for (&p, &r) in pred.iter().zip(reference) {
            match (p, r) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Dice with both-empty scored as 1.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        1.0
    } else {
        num as f64 / denom as f64
    }
}

pub fn dice(pred: &[bool], reference: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, reference)?.dice())
}

pub fn sensitivity(pred: &[bool], reference: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, reference)?.sensitivity())
}

pub fn specificity(pred: &[bool], reference: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, reference)?.specificity())
}

/// Value reported when exactly one of the two masks is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum EmptySentinel {
    /// Length of the volume diagonal in millimetres.
    #[default]
    VolumeDiagonal,
    Fixed(f64),
}

impl EmptySentinel {
    pub fn value(&self, shape: [usize; 3], spacing: [f64; 3]) -> f64 {
        match *self {
            EmptySentinel::VolumeDiagonal => physical(shape, spacing)
                .iter()
                .map(|e| e * e)
                .sum::<f64>()
                .sqrt(),
            EmptySentinel::Fixed(v) => v,
        }
    }

    pub fn name(&self) -> String {
        match self {
            EmptySentinel::VolumeDiagonal => "volume_diagonal".into(),
            EmptySentinel::Fixed(v) => format!("{v:?}"),
        }
    }
}

/// Extent along (z, y, x) in mm; `spacing` is given as (x, y, z).
fn physical(shape: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [
        shape[0] as f64 * spacing[2],
        shape[1] as f64 * spacing[1],
        shape[2] as f64 * spacing[0],
    ]
}

/// Mask voxels with at least one face neighbour outside the mask; the space
/// beyond the volume border counts as outside.
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let at = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[((z as usize) * h + y as usize) * w + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                out[i] = !(at(zi - 1, yi, xi)
                    && at(zi + 1, yi, xi)
                    && at(zi, yi - 1, xi)
                    && at(zi, yi + 1, xi)
                    && at(zi, yi, xi - 1)
                    && at(zi, yi, xi + 1));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of sampled function `f` with
/// sample spacing `s` (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let pq = q as f64 * s;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pp = p as f64 * s;
                    let inter = ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2.0 * (pq - pp));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dx = x - v[k] as f64 * s;
        *o = dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest set
/// voxel of `sites`. Infinite everywhere when `sites` is empty.
pub fn squared_distance_map(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let step = [spacing[2], spacing[1], spacing[0]];
    let mut g: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let lens = [d, h, w];
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let n = lens[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..lens[others[0]] {
            for j in 0..lens[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    line[k] = g[base + k * strides[axis]];
                }
                edt_1d(&line, step[axis], &mut out, &mut v, &mut zs);
                for k in 0..n {
                    g[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    g
}

/// Linear-interpolation percentile at rank `q·(n−1)` of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Distances (mm) from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: &[bool], to_dist2: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_dist2)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// 95th-percentile symmetric surface distance in mm: the larger of the two
/// directed 95th percentiles.
pub fn hd95(
    pred: &[bool],
    reference: &[bool],
    shape: [usize; 3],
    spacing: [f64; 3],
    sentinel: EmptySentinel,
) -> Result<f64> {
    check_len(pred.len(), reference.len())?;
    check_len(pred.len(), shape.iter().product())?;
    let (pe, re) = (!pred.iter().any(|&b| b), !reference.iter().any(|&b| b));
    if pe && re {
        return Ok(0.0);
    }
    if pe || re {
        return Ok(sentinel.value(shape, spacing));
    }
    let (sp, sr) = (surface(pred, shape), surface(reference, shape));
    let (dp, dr) = (
        squared_distance_map(&sp, shape, spacing),
        squared_distance_map(&sr, shape, spacing),
    );
    let mut a = directed_surface_distances(&sp, &dr);
    let mut b = directed_surface_distances(&sr, &dp);
    Ok(percentile(&mut a, 0.95).max(percentile(&mut b, 0.95)))
}

/// Evaluation region order used in reports.
pub const REPORT_REGIONS: [&str; 3] = ["et", "wt", "tc"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub dice: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Metrics for one case, regions in [`REPORT_REGIONS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub id: String,
    pub regions: [RegionMetrics; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricConventions {
    pub sentinel: EmptySentinel,
}

impl MetricConventions {
    /// `key=value` description of every convention.
    pub fn describe(&self) -> String {
        format!(
            "hd95_combination=max_of_directed_p95 hd95_empty_sentinel={} percentile=linear_rank_q(n-1) surface=6-connected empty_dice=1 empty_ratio=1",
            self.sentinel.name()
        )
    }
}

pub fn evaluate_case(
    id: &str,
    pred: &LabelVolume,
    reference: &LabelVolume,
    conventions: &MetricConventions,
) -> Result<CaseMetrics> {
    if pred.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "case `{id}`: prediction shape {:?} differs from reference {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    let (p, r) = (labels_to_regions(pred), labels_to_regions(reference));
    let pick = |m: &crate::regions::RegionMaps, k: usize| -> Vec<bool> {
        match k {
            0 => m.et.clone(),
            1 => m.wt.clone(),
            _ => m.tc.clone(),
        }
    };
    let mut regions = [RegionMetrics {
        dice: 0.0,
        hd95: 0.0,
        sensitivity: 0.0,
        specificity: 0.0,
    }; 3];
    for (k, out) in regions.iter_mut().enumerate() {
        let (pm, rm) = (pick(&p, k), pick(&r, k));
        let c = Confusion::count(&pm, &rm)?;
        *out = RegionMetrics {
            dice: c.dice(),
            hd95: hd95(&pm, &rm, reference.shape(), reference.spacing(), conventions.sentinel)?,
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
        };
    }
    Ok(CaseMetrics {
        id: id.to_string(),
        regions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
        };
        Summary { mean, std, median }
    }
}

/// Report column names in order.
pub fn report_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for metric in ["dice", "hd95", "sensitivity", "specificity"] {
        for r in REPORT_REGIONS {
            cols.push(format!("{metric}_{r}"));
        }
    }
    cols
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortReport {
    pub conventions: MetricConventions,
    pub cases: Vec<CaseMetrics>,
    /// One summary per column of [`report_columns`].
    pub summaries: Vec<Summary>,
}

fn row(m: &CaseMetrics) -> Vec<f64> {
    let r = &m.regions;
    let mut v = Vec::with_capacity(12);
    v.extend(r.iter().map(|x| x.dice));
    v.extend(r.iter().map(|x| x.hd95));
    v.extend(r.iter().map(|x| x.sensitivity));
    v.extend(r.iter().map(|x| x.specificity));
    v
}

impl CohortReport {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = report_columns().iter().position(|c| c == name)?;
        Some(self.cases.iter().map(|c| row(c)[k]).collect())
    }

    pub fn summary(&self, name: &str) -> Option<Summary> {
        let k = report_columns().iter().position(|c| c == name)?;
        Some(self.summaries[k])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {}\n", self.conventions.describe());
        s.push_str("case");
        for c in report_columns() {
            s.push('\t');
            s.push_str(&c);
        }
        s.push('\n');
        for c in &self.cases {
            s.push_str(&c.id);
            for v in row(c) {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        type Pick = fn(&Summary) -> f64;
        let stats: [(&str, Pick); 3] = [
            ("Mean", |x| x.mean),
            ("StdDev", |x| x.std),
            ("Median", |x| x.median),
        ];
        for (name, f) in stats {
            s.push_str(name);
            for sm in &self.summaries {
                let _ = write!(s, "\t{:.6}", f(sm));
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-case metrics (computed in parallel) and per-column summaries.
pub fn evaluate_cohort(
    ids: &[String],
    predictions: &[LabelVolume],
    references: &[LabelVolume],
    conventions: &MetricConventions,
) -> Result<CohortReport> {
    if predictions.len() != references.len() || ids.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "misaligned cohort: {} ids, {} predictions, {} references",
            ids.len(),
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty cohort".into()));
    }
    let cases = (0..ids.len())
        .into_par_iter()
        .map(|i| evaluate_case(&ids[i], &predictions[i], &references[i], conventions))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = cases.iter().map(row).collect();
    let summaries = (0..report_columns().len())
        .map(|k| Summary::of(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    Ok(CohortReport {
        conventions: *conventions,
        cases,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_counts() {
        let p = [true, true, false, false];
        let r = [false, true, true, false];
        assert_eq!(dice(&p, &r).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn sensitivity_specificity_conventions() {
        let r = [true, true, false, false];
        let all = [true; 4];
        assert_eq!(sensitivity(&all, &r).unwrap(), 1.0);
        assert_eq!(specificity(&all, &r).unwrap(), 0.0);
        assert_eq!(sensitivity(&[false; 2], &[false; 2]).unwrap(), 1.0);
    }

    #[test]
    fn single_voxels_three_apart() {
        let shape = [1, 1, 8];
        let mut p = vec![false; 8];
        let mut r = vec![false; 8];
        p[1] = true;
        r[4] = true;
        let d = hd95(&p, &r, shape, [1.0; 3], EmptySentinel::default()).unwrap();
        assert_eq!(d, 3.0);
        // x spacing stretches the distance
        let d = hd95(&p, &r, shape, [2.0, 1.0, 1.0], EmptySentinel::default()).unwrap();
        assert_eq!(d, 6.0);
    }

    #[test]
    fn empty_conventions() {
        let shape = [2, 2, 2];
        let e = vec![false; 8];
        let mut one = e.clone();
        one[0] = true;
        assert_eq!(hd95(&e, &e, shape, [1.0; 3], EmptySentinel::default()).unwrap(), 0.0);
        let s = hd95(&one, &e, shape, [1.0; 3], EmptySentinel::default()).unwrap();
        assert!((s - 12f64.sqrt()).abs() < 1e-12);
        let s = hd95(&e, &one, shape, [1.0; 3], EmptySentinel::Fixed(99.0)).unwrap();
        assert_eq!(s, 99.0);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0];
        assert_eq!(percentile(&mut v, 0.5), 2.0);
        let mut v: Vec<f64> = (0..21).map(|i| i as f64).collect();
        assert!((percentile(&mut v, 0.95) - 19.0).abs() < 1e-12);
    }

    #[test]
    fn interior_is_not_surface() {
        let shape = [3, 3, 3];
        let s = surface(&[true; 27], shape);
        assert_eq!(s.iter().filter(|&&b| b).count(), 26);
        assert!(!s[13]);
    }

    #[test]
    fn summary_of_single_value() {
        let s = Summary::of(&[0.7]);
        assert_eq!((s.mean, s.std, s.median), (0.7, 0.0, 0.7));
        assert_eq!(Summary::of(&[1.0, 2.0, 3.0, 10.0]).median, 2.5);
    }
}

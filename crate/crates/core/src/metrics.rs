//! Feed-forward segmentation and overlap/surface-distance metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::augment::normalize_zscore;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::VNetModel;
use crate::tensor::Tensor5;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Foreground probability per voxel.
    pub probability: Volume,
    pub mask: LabelVolume,
    pub elapsed: Duration,
}

/// Foreground wherever the probability is strictly above one half.
pub fn threshold(probability: &Volume) -> LabelVolume {
    let data = probability
        .data()
        .iter()
        .map(|&p| (p > 0.5) as u8)
        .collect();
    LabelVolume::new(probability.dims(), probability.spacing(), data).expect("same geometry")
}

/// Z-scores `v`, runs the network and thresholds the foreground channel.
pub fn segment(model: &VNetModel, v: &Volume) -> Result<SegmentationResult> {
    let start = Instant::now();
    let [d, h, w] = v.dims();
    let x = Tensor5::from_vec([1, 1, d, h, w], normalize_zscore(v).into_data())?;
    model.check_input(x.shape())?;
    let probs = model.predict(&x)?;
    let probability = v.with_data(probs.channel(0, 1).to_vec())?;
    let mask = threshold(&probability);
    Ok(SegmentationResult {
        probability,
        mask,
        elapsed: start.elapsed(),
    })
}

fn check_pair(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_metric(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    check_pair(a, b)?;
    Ok(hard_dice(a.data(), b.data()))
}

/// Dice of two equally long binary masks.
pub fn hard_dice(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Foreground voxels with a background 6-neighbour or on the volume edge.
pub fn boundary_voxels(m: &LabelVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = m.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.at(z, y, x) == 0 {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || m.at(z - 1, y, x) == 0
                    || m.at(z + 1, y, x) == 0
                    || m.at(z, y - 1, x) == 0
                    || m.at(z, y + 1, x) == 0
                    || m.at(z, y, x - 1) == 0
                    || m.at(z, y, x + 1) == 0
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Squared physical distance between two voxel centres.
#[inline]
pub fn squared_distance_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * spacing[0];
    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
    let dx = (a[2] as f64 - b[2] as f64) * spacing[2];
    dz * dz + dy * dy + dx * dx
}

/// For each point of `from`, the squared distance to the nearest point of
/// `to`. `to` must be sorted by z; the scan walks outwards from the query's
/// slice and stops once the slice gap alone exceeds the best distance.
fn nearest_squared(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&p| {
            let start = to.partition_point(|q| q[0] < p[0]);
            let mut best = f64::INFINITY;
            for q in &to[start..] {
                let dz = (q[0] - p[0]) as f64 * spacing[0];
                if dz * dz >= best {
                    break;
                }
                best = best.min(squared_distance_mm(p, *q, spacing));
            }
            for q in to[..start].iter().rev() {
                let dz = (p[0] - q[0]) as f64 * spacing[0];
                if dz * dz >= best {
                    break;
                }
                best = best.min(squared_distance_mm(p, *q, spacing));
            }
            best
        })
        .collect()
}

fn surface_distances(a: &LabelVolume, b: &LabelVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::Shape(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() {
        return Err(Error::EmptyMask("first"));
    }
    if bb.is_empty() {
        return Err(Error::EmptyMask("second"));
    }
    // boundary_voxels emits in raster order, so both lists are z-sorted
    let s = a.spacing();
    Ok((nearest_squared(&ba, &bb, s), nearest_squared(&bb, &ba, s)))
}

/// Symmetric Hausdorff distance between the boundary voxel sets, in mm.
pub fn hausdorff_mm(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b)?;
    let worst = ab.iter().chain(&ba).fold(0.0f64, |m, &d| m.max(d));
    Ok(worst.sqrt())
}

/// Nearest-rank `q`-th percentile (0 < q <= 100) of the pooled directed
/// boundary distances, in mm.
pub fn hausdorff_percentile_mm(a: &LabelVolume, b: &LabelVolume, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in (0, 100], got {q}"
        )));
    }
    let (mut all, ba) = surface_distances(a, b)?;
    all.extend(ba);
    all.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * all.len() as f64).ceil() as usize;
    Ok(all[rank.clamp(1, all.len()) - 1].sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub volume: String,
    pub dice: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    /// `ok`, or the error kind that excluded the row from the aggregates.
    pub status: String,
}

impl MetricsRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: n,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    fn ok_values(&self, f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.is_ok())
            .filter_map(f)
            .collect()
    }

    pub fn dice(&self) -> Option<Summary> {
        Summary::of(&self.ok_values(|r| r.dice))
    }

    pub fn hausdorff(&self) -> Option<Summary> {
        Summary::of(&self.ok_values(|r| r.hausdorff_mm))
    }

    pub fn excluded(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    /// Per-volume rows, then `mean` and `stddev` rows over the `ok` rows.
    /// The aggregate rows carry `aggregate n=<used> excluded=<skipped>` as
    /// their status.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("volume,dice,hausdorff_mm,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.volume,
                opt(r.dice),
                opt(r.hausdorff_mm),
                r.status
            );
        }
        let (d, h) = (self.dice(), self.hausdorff());
        let tag = format!(
            "aggregate n={} excluded={}",
            self.rows.len() - self.excluded(),
            self.excluded()
        );
        let _ = writeln!(
            s,
            "mean,{},{},{tag}",
            opt(d.map(|x| x.mean)),
            opt(h.map(|x| x.mean))
        );
        let _ = writeln!(
            s,
            "stddev,{},{},{tag}",
            opt(d.map(|x| x.std)),
            opt(h.map(|x| x.std))
        );
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::volume::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Which boundary distance the report's `hausdorff_mm` column holds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SurfaceDistance {
    /// Plain (maximum) Hausdorff distance.
    #[default]
    Max,
    /// Nearest-rank percentile of the pooled boundary distances.
    Percentile(f64),
}

impl SurfaceDistance {
    pub fn measure(&self, a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
        match *self {
            SurfaceDistance::Max => hausdorff_mm(a, b),
            SurfaceDistance::Percentile(q) => hausdorff_percentile_mm(a, b, q),
        }
    }
}

/// Scores one predicted mask against ground truth.
pub fn score(name: &str, predicted: &LabelVolume, truth: &LabelVolume) -> MetricsRow {
    score_with(name, predicted, truth, SurfaceDistance::Max)
}

pub fn score_with(
    name: &str,
    predicted: &LabelVolume,
    truth: &LabelVolume,
    distance: SurfaceDistance,
) -> MetricsRow {
    let dice = dice_metric(predicted, truth);
    let hd = distance.measure(predicted, truth);
    let status = match (&dice, &hd) {
        (Ok(_), Ok(_)) => "ok".to_string(),
        (Err(e), _) | (_, Err(e)) => match e {
            Error::EmptyMask("first") => "missing_prediction".to_string(),
            Error::EmptyMask(_) => "empty_ground_truth".to_string(),
            other => other.kind().to_string(),
        },
    };
    MetricsRow {
        volume: name.to_string(),
        dice: dice.ok(),
        hausdorff_mm: hd.ok(),
        status,
    }
}

/// Segments every case and scores it; volumes are processed in parallel and
/// reported in dataset order.
pub fn evaluate(model: &VNetModel, data: &Dataset) -> Result<MetricsReport> {
    evaluate_with(model, data, SurfaceDistance::Max)
}

pub fn evaluate_with(
    model: &VNetModel,
    data: &Dataset,
    distance: SurfaceDistance,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one case".into(),
        ));
    }
    let rows = data
        .cases()
        .par_iter()
        .map(|c| match segment(model, &c.image) {
            Ok(seg) => score_with(&c.name, &seg.mask, &c.label, distance),
            Err(e) => MetricsRow {
                volume: c.name.clone(),
                dice: None,
                hausdorff_mm: None,
                status: e.kind().to_string(),
            },
        })
        .collect();
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> LabelVolume {
        let mut data = vec![0u8; dims.iter().product()];
        for p in on {
            data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = 1;
        }
        LabelVolume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([1, 1, 4], &[[0, 0, 1], [0, 0, 2]]);
        assert_eq!(dice_metric(&a, &b).unwrap(), 0.5);
        let e = mask([1, 1, 4], &[]);
        assert_eq!(dice_metric(&e, &e).unwrap(), 1.0);
        assert!(dice_metric(&a, &mask([1, 1, 5], &[])).is_err());
    }

    #[test]
    fn hausdorff_cases() {
        let a = mask([4, 5, 4], &[[1, 0, 1]]);
        let b = mask([4, 5, 4], &[[1, 3, 1]]);
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), 3.0);
        let sp = [1.5, 1.0, 1.0];
        let a = LabelVolume::new([2, 1, 1], sp, vec![1, 0]).unwrap();
        let b = LabelVolume::new([2, 1, 1], sp, vec![0, 1]).unwrap();
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), 1.5);
        let e = LabelVolume::new([2, 1, 1], sp, vec![0, 0]).unwrap();
        assert_eq!(hausdorff_mm(&e, &a).unwrap_err().kind(), "empty_mask");
    }

    #[test]
    fn strict_threshold() {
        let p = Volume::new([1, 1, 3], [1.0; 3], vec![0.5, 0.5000001, 0.2]).unwrap();
        assert_eq!(threshold(&p).data(), &[0, 1, 0]);
    }

    #[test]
    fn report_aggregates() {
        let report = MetricsReport {
            rows: vec![
                MetricsRow {
                    volume: "a".into(),
                    dice: Some(1.0),
                    hausdorff_mm: Some(0.0),
                    status: "ok".into(),
                },
                MetricsRow {
                    volume: "b".into(),
                    dice: Some(0.5),
                    hausdorff_mm: Some(2.0),
                    status: "ok".into(),
                },
                MetricsRow {
                    volume: "c".into(),
                    dice: Some(0.0),
                    hausdorff_mm: None,
                    status: "missing_prediction".into(),
                },
            ],
        };
        assert_eq!(report.dice().unwrap().mean, 0.75);
        assert_eq!(report.excluded(), 1);
        let csv = report.to_csv();
        assert!(csv.starts_with("volume,dice,hausdorff_mm,status\n"));
        assert!(csv.contains("mean,0.75,1,aggregate n=2 excluded=1"));
    }
}

//! Training-time augmentation and intensity/geometry preprocessing.
//!
//! Random elastic deformation: displacements drawn at a coarse lattice of
//! control points (by default the 8 corners of the volume) are spread into a
//! dense per-voxel field with a B-spline of order 1 (trilinear) or 3, and
//! the volume is resampled by pulling each output voxel from its displaced
//! position. Histogram matching remaps intensities so that their
//! distribution follows another scan's.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Number of intensity bins used by [`histogram_match`].
pub const HIST_BINS: usize = 256;

/// Displacements, in voxels along (z, y, x), at an `n x n x n` lattice of
/// control points spanning the volume from corner to corner.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    size: usize,
    displacements: Vec<[f64; 3]>,
}

impl ControlGrid {
    pub fn new(size: usize, displacements: Vec<[f64; 3]>) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "control grid needs at least 2 points per axis, got {size}"
            )));
        }
        if displacements.len() != size.pow(3) {
            return Err(Error::Shape(format!(
                "{size}^3 control grid needs {} displacements, got {}",
                size.pow(3),
                displacements.len()
            )));
        }
        if displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: "control displacement".into(),
                index: 0,
            });
        }
        Ok(Self {
            size,
            displacements,
        })
    }

    /// Same displacement at every control point.
    pub fn constant(size: usize, d: [f64; 3]) -> Result<Self> {
        Self::new(size, vec![d; size.pow(3)])
    }

    /// I.i.d. zero-mean Gaussian displacements with standard deviation `sigma`.
    pub fn sample<R: Rng + ?Sized>(size: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "deformation sigma must be non-negative, got {sigma}"
            )));
        }
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        let displacements = (0..size.pow(3))
            .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
            .collect();
        Self::new(size, displacements)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.displacements
    }

    /// Displacement of control point `(i, j, k)` along (z, y, x).
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.displacements[(i * self.size + j) * self.size + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, d: [f64; 3]) {
        let n = self.size;
        self.displacements[(i * n + j) * n + k] = d;
    }
}

/// Eight-point Gaussian control grid at the volume corners.
pub fn sample_control_grid<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<ControlGrid> {
    ControlGrid::sample(2, sigma, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplineOrder {
    /// Trilinear; interpolates the control displacements.
    #[default]
    Linear,
    /// Uniform cubic B-spline with clamped boundary control points;
    /// smoother but approximating.
    Cubic,
}

impl FromStr for SplineOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(SplineOrder::Linear),
            "3" => Ok(SplineOrder::Cubic),
            other => Err(Error::Config {
                key: "spline_order".into(),
                detail: format!("expected 1 or 3, got {other:?}"),
            }),
        }
    }
}

impl fmt::Display for SplineOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplineOrder::Linear => "1",
            SplineOrder::Cubic => "3",
        })
    }
}

/// Per-voxel displacement in voxels along (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    dims: [usize; 3],
    disp: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            disp: vec![[0.0; 3]; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        self.disp[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.disp
    }
}

/// Interpolation weights along one axis: `(control index, weight)` pairs per
/// voxel.
fn axis_weights(len: usize, n: usize, order: SplineOrder) -> Vec<Vec<(usize, f64)>> {
    (0..len)
        .map(|v| {
            let u = if len > 1 {
                v as f64 * (n - 1) as f64 / (len - 1) as f64
            } else {
                0.0
            };
            let i = (u.floor() as usize).min(n - 2);
            let t = u - i as f64;
            match order {
                SplineOrder::Linear => vec![(i, 1.0 - t), (i + 1, t)],
                SplineOrder::Cubic => {
                    let b = [
                        (1.0 - t).powi(3) / 6.0,
                        (3.0 * t.powi(3) - 6.0 * t * t + 4.0) / 6.0,
                        (-3.0 * t.powi(3) + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
                        t.powi(3) / 6.0,
                    ];
                    (0..4)
                        .map(|m| {
                            let idx = (i as isize + m as isize - 1).clamp(0, n as isize - 1);
                            (idx as usize, b[m])
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Trilinear densification of the control grid over a `dims` lattice.
pub fn densify(grid: &ControlGrid, dims: [usize; 3]) -> DeformationField {
    densify_with_order(grid, dims, SplineOrder::Linear)
}

pub fn densify_with_order(
    grid: &ControlGrid,
    dims: [usize; 3],
    order: SplineOrder,
) -> DeformationField {
    let n = grid.size;
    let wz = axis_weights(dims[0], n, order);
    let wy = axis_weights(dims[1], n, order);
    let wx = axis_weights(dims[2], n, order);
    let mut disp = Vec::with_capacity(dims.iter().product());
    for az in &wz {
        for ay in &wy {
            for ax in &wx {
                let mut d = [0.0; 3];
                for &(i, a) in az {
                    for &(j, b) in ay {
                        for &(k, c) in ax {
                            let w = a * b * c;
                            let p = grid.at(i, j, k);
                            d[0] += w * p[0];
                            d[1] += w * p[1];
                            d[2] += w * p[2];
                        }
                    }
                }
                disp.push(d);
            }
        }
    }
    DeformationField { dims, disp }
}

fn clamp_coord(c: f64, len: usize) -> f64 {
    c.clamp(0.0, (len - 1) as f64)
}

/// Trilinear sample at continuous voxel coordinates, clamped to the border.
pub fn sample_trilinear(v: &Volume, pos: [f64; 3]) -> f64 {
    let dims = v.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = clamp_coord(pos[a], dims[a]);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = c - f;
    }
    let mut acc = 0.0;
    for (iz, wz) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
        if wz == 0.0 {
            continue;
        }
        for (iy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            if wy == 0.0 {
                continue;
            }
            for (ix, wx) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * v.at(iz, iy, ix);
            }
        }
    }
    acc
}

fn check_field(dims: [usize; 3], f: &DeformationField) -> Result<()> {
    if f.dims != dims {
        return Err(Error::Shape(format!(
            "deformation field {:?} does not match volume {dims:?}",
            f.dims
        )));
    }
    Ok(())
}

/// Pull-back warp with trilinear interpolation: `out(p) = in(p + f(p))`.
pub fn warp(v: &Volume, f: &DeformationField) -> Result<Volume> {
    check_field(v.dims(), f)?;
    let [d, h, w] = v.dims();
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = f.at(z, y, x);
                out.push(sample_trilinear(
                    v,
                    [z as f64 + u[0], y as f64 + u[1], x as f64 + u[2]],
                ));
            }
        }
    }
    v.with_data(out)
}

/// Pull-back warp with nearest-neighbour lookup, so labels stay binary.
pub fn warp_label(v: &LabelVolume, f: &DeformationField) -> Result<LabelVolume> {
    check_field(v.dims(), f)?;
    let [d, h, w] = v.dims();
    let near = |c: f64, len: usize| clamp_coord(c, len).round() as usize;
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = f.at(z, y, x);
                out.push(v.at(
                    near(z as f64 + u[0], d),
                    near(y as f64 + u[1], h),
                    near(x as f64 + u[2], w),
                ));
            }
        }
    }
    v.with_data(out)
}

/// Cumulative histogram over `HIST_BINS` equal bins of `[lo, hi]`;
/// `c[b]` is the fraction of values below bin `b`'s lower edge.
fn cumulative(values: &[f64], lo: f64, width: f64) -> Vec<f64> {
    let mut counts = vec![0usize; HIST_BINS];
    for &v in values {
        counts[bin_of(v, lo, width)] += 1;
    }
    let n = values.len() as f64;
    let mut c = Vec::with_capacity(HIST_BINS + 1);
    let mut acc = 0usize;
    c.push(0.0);
    for k in counts {
        acc += k;
        c.push(acc as f64 / n);
    }
    c
}

fn bin_of(v: f64, lo: f64, width: f64) -> usize {
    (((v - lo) / width).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Monotone remapping of `src` intensities so their piecewise-linear CDF
/// (over 256 bins) follows `reference`'s. Output values lie inside the
/// reference's range; a constant reference maps everything to its value.
pub fn histogram_match(src: &Volume, reference: &Volume) -> Result<Volume> {
    if src.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram matching of an empty volume".into(),
        ));
    }
    let (rlo, rhi) = reference.min_max();
    if rhi == rlo {
        return src.with_data(vec![rlo; src.len()]);
    }
    let rw = (rhi - rlo) / HIST_BINS as f64;
    let rc = cumulative(reference.data(), rlo, rw);
    let (slo, shi) = src.min_max();
    let sw = (shi - slo) / HIST_BINS as f64;
    let sc = (shi > slo).then(|| cumulative(src.data(), slo, sw));

    let out = src
        .data()
        .iter()
        .map(|&x| {
            let q = match &sc {
                Some(c) => {
                    let b = bin_of(x, slo, sw);
                    let frac = ((x - slo) / sw - b as f64).clamp(0.0, 1.0);
                    c[b] + frac * (c[b + 1] - c[b])
                }
                None => 0.5,
            };
            // smallest bin whose upper cumulative value reaches q
            let b = rc[1..].partition_point(|&v| v < q).min(HIST_BINS - 1);
            let span = rc[b + 1] - rc[b];
            let frac = if span > 0.0 {
                ((q - rc[b]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (rlo + (b as f64 + frac) * rw).clamp(rlo, rhi)
        })
        .collect();
    src.with_data(out)
}

/// Trilinear resampling onto a lattice with the given (z, y, x) spacing,
/// keeping the physical extent within one voxel.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let src = v.spacing();
    let dims = v.dims();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((dims[a] as f64 * src[a] / target[a]).round() as usize).max(1);
    }
    let coord = |a: usize, i: usize| (i as f64 + 0.5) * target[a] / src[a] - 0.5;
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                out.push(sample_trilinear(v, [coord(0, z), coord(1, y), coord(2, x)]));
            }
        }
    }
    Volume::new(out_dims, target, out)
}

/// Zero mean, unit (population) standard deviation. A constant volume maps
/// to all zeros with a warning.
pub fn normalize_zscore(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_normal() {
        log::warn!("z-score normalization of a constant volume; output is all zeros");
        return v.with_data(vec![0.0; v.len()]).expect("same geometry");
    }
    v.with_data(v.data().iter().map(|x| (x - mean) / std).collect())
        .expect("finite output")
}

/// Which augmentations run for each training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub deform: bool,
    /// Standard deviation of control-point displacements, voxels.
    pub sigma: f64,
    /// Control points per axis.
    pub grid: usize,
    pub order: SplineOrder,
    pub hist_match: bool,
    /// Base of the augmentation random streams.
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            deform: true,
            sigma: 15.0,
            grid: 2,
            order: SplineOrder::Linear,
            hist_match: true,
            seed: 0,
        }
    }
}

pub const AUGMENT_KEYS: &[&str] = &[
    "deform",
    "deform_sigma",
    "deform_grid",
    "spline_order",
    "hist_match",
    "augment_seed",
];

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            deform: false,
            hist_match: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config {
                key: "deform_sigma".into(),
                detail: format!("must be non-negative, got {}", self.sigma),
            });
        }
        if self.grid < 2 {
            return Err(Error::Config {
                key: "deform_grid".into(),
                detail: format!("must be at least 2, got {}", self.grid),
            });
        }
        Ok(())
    }

    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        if let Some(v) = kv.get("deform")? {
            self.deform = v;
        }
        if let Some(v) = kv.get("deform_sigma")? {
            self.sigma = v;
        }
        if let Some(v) = kv.get("deform_grid")? {
            self.grid = v;
        }
        if let Some(v) = kv.get("spline_order")? {
            self.order = v;
        }
        if let Some(v) = kv.get("hist_match")? {
            self.hist_match = v;
        }
        if let Some(v) = kv.get("augment_seed")? {
            self.seed = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn write_to(&self, kv: &mut KvConfig) {
        kv.set("deform", self.deform);
        kv.set("deform_sigma", self.sigma);
        kv.set("deform_grid", self.grid);
        kv.set("spline_order", self.order);
        kv.set("hist_match", self.hist_match);
        kv.set("augment_seed", self.seed);
    }

    /// Applies histogram matching (to the image, against `reference`) and
    /// then one random deformation shared by image and label.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        image: &Volume,
        label: &LabelVolume,
        reference: Option<&Volume>,
        rng: &mut R,
    ) -> Result<(Volume, LabelVolume)> {
        let mut image = match (self.hist_match, reference) {
            (true, Some(r)) => histogram_match(image, r)?,
            _ => image.clone(),
        };
        let mut label = label.clone();
        if self.deform {
            let grid = ControlGrid::sample(self.grid, self.sigma, rng)?;
            let field = densify_with_order(&grid, image.dims(), self.order);
            image = warp(&image, &field)?;
            label = warp_label(&label, &field)?;
        }
        Ok((image, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_grids() {
        let f = densify(&ControlGrid::constant(2, [0.0; 3]).unwrap(), [4, 5, 6]);
        assert!(f.values().iter().all(|d| *d == [0.0; 3]));
        let f = densify(
            &ControlGrid::constant(2, [0.0, 0.0, 3.0]).unwrap(),
            [4, 5, 6],
        );
        for d in f.values() {
            assert!(d[0] == 0.0 && d[1] == 0.0 && (d[2] - 3.0).abs() < 1e-12);
        }
        let f = densify_with_order(
            &ControlGrid::constant(3, [1.0, -2.0, 0.5]).unwrap(),
            [5, 5, 5],
            SplineOrder::Cubic,
        );
        for d in f.values() {
            assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_corner_weight_at_centre() {
        let mut grid = ControlGrid::constant(2, [0.0; 3]).unwrap();
        grid.set(1, 0, 1, [8.0, -16.0, 4.0]);
        let f = densify(&grid, [9, 9, 9]);
        let c = f.at(4, 4, 4);
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!((c[1] + 2.0).abs() < 1e-12);
        assert!((c[2] - 0.5).abs() < 1e-12);
        assert_eq!(f.at(8, 0, 8), [8.0, -16.0, 4.0]);
        assert_eq!(f.at(0, 0, 0), [0.0; 3]);
    }

    #[test]
    fn dims_mismatch_is_an_error() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        assert!(warp(&v, &DeformationField::zeros([2, 2, 3])).is_err());
    }

    #[test]
    fn constant_reference_maps_to_constant() {
        let src = Volume::new([1, 1, 4], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = Volume::filled([1, 1, 3], [1.0; 3], 7.5).unwrap();
        assert!(histogram_match(&src, &r)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 7.5));
    }

    #[test]
    fn resample_errors_and_identity() {
        let v = Volume::new([2, 2, 3], [1.5, 1.0, 1.0], (0..12).map(f64::from).collect()).unwrap();
        assert!(resample(&v, [1.0, 0.0, 1.0]).is_err());
        let same = resample(&v, [1.5, 1.0, 1.0]).unwrap();
        assert_eq!(same.dims(), v.dims());
        for (a, b) in same.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 3.0).unwrap();
        assert!(normalize_zscore(&v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn policy_keys() {
        let kv = KvConfig::parse("deform_sigma=-1").unwrap();
        assert!(AugmentPolicy::default().overlay(&kv).is_err());
        let kv = KvConfig::parse("hist_match=false\nspline_order=3").unwrap();
        let p = AugmentPolicy::default().overlay(&kv).unwrap();
        assert!(!p.hist_match);
        assert_eq!(p.order, SplineOrder::Cubic);
    }
}

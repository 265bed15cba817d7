//! Scalar volumes, binary label volumes, the `VVOL1` file format and the
//! synthetic phantom generator.
//!
//! `VVOL1` layout: five newline-terminated ASCII header lines
//!
//! ```text
//! VVOL1
//! dims D H W
//! spacing Z Y X
//! kind image|label
//! data
//! ```
//!
//! followed by exactly `D*H*W` little-endian `f32` values, x fastest, then y,
//! then z. Intensities are held in `f64` in memory and rounded to `f32` on
//! save, so a volume whose values are `f32`-representable round-trips
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &str = "VVOL1";

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Single-channel scalar field. `dims` is (d, h, w) voxels and `spacing` is
/// millimetres per voxel along (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let n = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        crate::error::ensure_finite("volume data", &data)?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Binary mask: 0 = background, 1 = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let n = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryLabel {
                field: "label data".into(),
                index: i,
                value: data[i] as f64,
            });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Label,
}

impl VolumeKind {
    fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Image => "image",
            VolumeKind::Label => "label",
        }
    }
}

/// Contents of a `VVOL1` file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Label(LabelVolume),
}

fn encode(
    kind: VolumeKind,
    dims: [usize; 3],
    spacing: [f64; 3],
    values: impl Iterator<Item = f64>,
) -> Vec<u8> {
    let mut buf = format!(
        "{VOLUME_MAGIC}\ndims {} {} {}\nspacing {} {} {}\nkind {}\ndata\n",
        dims[0],
        dims[1],
        dims[2],
        spacing[0],
        spacing[1],
        spacing[2],
        kind.as_str()
    )
    .into_bytes();
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial volume at `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp: PathBuf = path.with_file_name(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(VolumeKind::Image, v.dims, v.spacing, v.data.iter().copied());
    write_atomic(path.as_ref(), &bytes)
}

pub fn save_label(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(
        VolumeKind::Label,
        v.dims,
        v.spacing,
        v.data.iter().map(|&b| b as f64),
    );
    write_atomic(path.as_ref(), &bytes)
}

/// Splits off one `\n`-terminated header line.
fn next_line<'a>(path: &Path, rest: &mut &'a [u8], field: &'static str) -> Result<&'a str> {
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header {
            path: path.into(),
            field,
            detail: "missing line".into(),
        })?;
    let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Header {
        path: path.into(),
        field,
        detail: "not ASCII".into(),
    })?;
    *rest = &rest[end + 1..];
    Ok(line)
}

fn header_values<'a>(path: &Path, line: &'a str, field: &'static str) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(field) {
        return Err(Error::Header {
            path: path.into(),
            field,
            detail: format!("expected `{field} ...`, found {line:?}"),
        });
    }
    Ok(parts.collect())
}

fn parse_triple<T: std::str::FromStr>(
    path: &Path,
    line: &str,
    field: &'static str,
) -> Result<[T; 3]> {
    let vals = header_values(path, line, field)?;
    let bad = || Error::Header {
        path: path.into(),
        field,
        detail: format!("expected three numbers, found {line:?}"),
    };
    if vals.len() != 3 {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(3);
    for v in vals {
        out.push(v.parse::<T>().map_err(|_| bad())?);
    }
    out.try_into().map_err(|_| bad())
}

/// Reads a `VVOL1` file of either kind.
pub fn load_any(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rest: &[u8] = &bytes;
    let magic_end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
    if &rest[..magic_end] != VOLUME_MAGIC.as_bytes() {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: VOLUME_MAGIC,
            found: String::from_utf8_lossy(&rest[..magic_end.min(16)]).into_owned(),
        });
    }
    next_line(path, &mut rest, "magic")?;
    let dims: [usize; 3] = parse_triple(path, next_line(path, &mut rest, "dims")?, "dims")?;
    let spacing: [f64; 3] = parse_triple(path, next_line(path, &mut rest, "spacing")?, "spacing")?;
    let kind_line = next_line(path, &mut rest, "kind")?;
    let kind = match header_values(path, kind_line, "kind")?.as_slice() {
        ["image"] => VolumeKind::Image,
        ["label"] => VolumeKind::Label,
        _ => {
            return Err(Error::Header {
                path: path.into(),
                field: "kind",
                detail: format!("expected `kind image|label`, found {kind_line:?}"),
            })
        }
    };
    if next_line(path, &mut rest, "data")? != "data" {
        return Err(Error::Header {
            path: path.into(),
            field: "data",
            detail: "expected `data` marker".into(),
        });
    }
    if dims.contains(&0) {
        return Err(Error::Header {
            path: path.into(),
            field: "dims",
            detail: format!("dims must be positive, got {dims:?}"),
        });
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Header {
            path: path.into(),
            field: "spacing",
            detail: format!("spacing must be positive, got {spacing:?}"),
        });
    }
    let expected: usize = dims.iter().product();
    if !rest.len().is_multiple_of(4) || rest.len() / 4 != expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            field: "data".into(),
            expected,
            found: rest.len() / 4,
        });
    }
    let values: Vec<f64> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    crate::error::ensure_finite("data", &values)?;
    match kind {
        VolumeKind::Image => Ok(VolumeFile::Image(Volume::new(dims, spacing, values)?)),
        VolumeKind::Label => {
            let mut labels = Vec::with_capacity(values.len());
            for (i, v) in values.into_iter().enumerate() {
                if v == 0.0 || v == 1.0 {
                    labels.push(v as u8);
                } else {
                    return Err(Error::NonBinaryLabel {
                        field: "data".into(),
                        index: i,
                        value: v,
                    });
                }
            }
            Ok(VolumeFile::Label(LabelVolume::new(dims, spacing, labels)?))
        }
    }
}

/// Loads a volume; label files load as 0/1 intensities.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Ok(match load_any(path)? {
        VolumeFile::Image(v) => v,
        VolumeFile::Label(l) => l.to_volume(),
    })
}

/// Loads a file written with `kind label`.
pub fn load_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match load_any(path)? {
        VolumeFile::Label(l) => Ok(l),
        VolumeFile::Image(_) => Err(Error::Header {
            path: path.into(),
            field: "kind",
            detail: "expected a label volume, found an image".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "ellipsoid" => Ok(ShapeKind::Ellipsoid),
            other => Err(Error::InvalidArgument(format!(
                "shape must be sphere|ellipsoid, got {other:?}"
            ))),
        }
    }
}

/// Parameters of a bright blob on a darker background with Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// (d, h, w) voxels.
    pub dims: [usize; 3],
    /// mm per voxel along (z, y, x).
    pub spacing: [f64; 3],
    pub shape: ShapeKind,
    /// Blob centre in voxel coordinates (z, y, x).
    pub center: [f64; 3],
    /// Semi-axes in voxels along (z, y, x); all equal for a sphere.
    pub radii: [f64; 3],
    pub foreground_mean: f64,
    pub foreground_std: f64,
    pub background_mean: f64,
    pub background_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Sphere of `radius` voxels centred in a `dims` grid with unit spacing.
    pub fn sphere(dims: [usize; 3], radius: f64, seed: u64) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            shape: ShapeKind::Sphere,
            center: dims.map(|d| (d as f64 - 1.0) / 2.0),
            radii: [radius; 3],
            foreground_mean: 1.0,
            foreground_std: 0.1,
            background_mean: 0.0,
            background_std: 0.1,
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_geometry(self.dims, self.spacing)?;
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "radii must be positive, got {:?}",
                self.radii
            )));
        }
        if self.shape == ShapeKind::Sphere
            && (self.radii[0] != self.radii[1] || self.radii[1] != self.radii[2])
        {
            return Err(Error::InvalidArgument(format!(
                "a sphere needs equal radii, got {:?}",
                self.radii
            )));
        }
        let stds = [self.foreground_std, self.background_std, self.noise_std];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || !self.foreground_mean.is_finite()
            || !self.background_mean.is_finite()
            || self.center.iter().any(|c| !c.is_finite())
        {
            return Err(Error::InvalidArgument(
                "intensity parameters must be finite with non-negative deviations".into(),
            ));
        }
        Ok(())
    }

    /// Whether the voxel centre `(z, y, x)` lies inside the blob.
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            s += t * t;
        }
        s <= 1.0
    }
}

/// Renders the image and its ground-truth mask; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = Vec::with_capacity(d * h * w);
    let mut label = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let inside = spec.contains(z, y, x);
                let (mean, std) = if inside {
                    (spec.foreground_mean, spec.foreground_std)
                } else {
                    (spec.background_mean, spec.background_std)
                };
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let v = mean + std * a + spec.noise_std * b;
                image.push(v as f32 as f64);
                label.push(inside as u8);
            }
        }
    }
    if !label.contains(&1) {
        return Err(Error::EmptyForeground);
    }
    Ok((
        Volume::new(spec.dims, spec.spacing, image)?,
        LabelVolume::new(spec.dims, spec.spacing, label)?,
    ))
}

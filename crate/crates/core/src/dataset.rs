//! Directories of paired image/label volumes.
//!
//! A dataset directory holds `<name>_image.vvol` and `<name>_label.vvol` for
//! each case; cases are ordered by name.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::volume::{self, LabelVolume, SyntheticSpec, Volume};

pub const IMAGE_SUFFIX: &str = "_image.vvol";
pub const LABEL_SUFFIX: &str = "_label.vvol";

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub label: LabelVolume,
}

impl Case {
    pub fn new(name: impl Into<String>, image: Volume, label: LabelVolume) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(Error::Shape(format!(
                "image {:?} and label {:?} dims differ",
                image.dims(),
                label.dims()
            )));
        }
        Ok(Self {
            name: name.into(),
            image,
            label,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    cases: Vec<Case>,
}

impl Dataset {
    pub fn new(cases: Vec<Case>) -> Self {
        Self { cases }
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn push(&mut self, case: Case) {
        self.cases.push(case);
    }

    /// Dims shared by every case; errors when empty or mixed.
    pub fn common_dims(&self) -> Result<[usize; 3]> {
        let first = self
            .cases
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no cases".into()))?;
        let dims = first.image.dims();
        for c in &self.cases[1..] {
            if c.image.dims() != dims {
                return Err(Error::Shape(format!(
                    "case {} has dims {:?}, expected {dims:?}",
                    c.name,
                    c.image.dims()
                )));
            }
        }
        Ok(dims)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let file = entry.file_name();
            if let Some(stem) = file.to_str().and_then(|s| s.strip_suffix(IMAGE_SUFFIX)) {
                names.push(stem.to_string());
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no *{IMAGE_SUFFIX} files in {}",
                dir.display()
            )));
        }
        names.sort();
        let cases = names
            .into_iter()
            .map(|name| {
                let image = volume::load_volume(dir.join(format!("{name}{IMAGE_SUFFIX}")))?;
                let label = volume::load_label(dir.join(format!("{name}{LABEL_SUFFIX}")))?;
                Case::new(name, image, label)
            })
            .collect::<Result<_>>()?;
        Ok(Self { cases })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &self.cases {
            volume::save_volume(&c.image, dir.join(format!("{}{IMAGE_SUFFIX}", c.name)))?;
            volume::save_label(&c.label, dir.join(format!("{}{LABEL_SUFFIX}", c.name)))?;
        }
        Ok(())
    }
}

/// A family of synthetic cases around one template: each case moves the
/// blob centre by up to `center_jitter` voxels per axis and scales its radii
/// by a factor in `1 ± radius_jitter`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub template: SyntheticSpec,
    pub count: usize,
    pub center_jitter: f64,
    pub radius_jitter: f64,
    pub seed: u64,
}

impl SyntheticSet {
    pub fn new(template: SyntheticSpec, count: usize, seed: u64) -> Self {
        Self {
            template,
            count,
            center_jitter: 0.0,
            radius_jitter: 0.0,
            seed,
        }
    }

    /// Spec of case `i`; a pure function of `(self, i)`.
    pub fn case_spec(&self, i: usize) -> SyntheticSpec {
        let mut r = rng::stream(self.seed, &[tag::SYNTH_CASE, i as u64]);
        let mut spec = self.template.clone();
        if self.center_jitter > 0.0 {
            for c in &mut spec.center {
                *c += r.random_range(-self.center_jitter..=self.center_jitter);
            }
        }
        if self.radius_jitter > 0.0 {
            let s = 1.0 + r.random_range(-self.radius_jitter..=self.radius_jitter);
            spec.radii = spec.radii.map(|x| x * s);
        }
        spec.seed = rng::derive(self.seed, &[tag::SYNTH_CASE, i as u64, 1]);
        spec
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.count == 0 {
            return Err(Error::InvalidArgument(
                "case count must be at least 1".into(),
            ));
        }
        if !(self.center_jitter >= 0.0 && (0.0..1.0).contains(&self.radius_jitter)) {
            return Err(Error::InvalidArgument(format!(
                "jitter out of range: centre {}, radius {}",
                self.center_jitter, self.radius_jitter
            )));
        }
        let cases = (0..self.count)
            .map(|i| {
                let (image, label) = volume::generate_synthetic(&self.case_spec(i))?;
                Case::new(format!("case{i:03}"), image, label)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { cases })
    }
}

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dsc::{generate_series, minmax_normalize, select_timepoint, DscSeries};
use super::phantom::{check_size, PhantomParams};
use super::split::{subject_split, Split, DEFAULT_RATIOS};
use super::tensor_io::{load_tensor, save_tensor};
use crate::tensor::{AnyTensor, Tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One 2-D slice: image `[1, H, W]` in [0, 1] and mask `[H, W]` in {0, 1}.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<u8>,
    pub subject: String,
    pub slice: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.id) {
                return Err(Error::Data(format!("subject {:?} is listed twice", s.id)));
            }
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    PerSlice,
    PerVolume,
}

/// Normalized `[1, H, W]` slices of an image tensor: a `[T, Z, H, W]` series
/// (the 4th time-point is used), a `[Z, H, W]` stack or one `[H, W]` slice.
pub fn prepare_image(id: &str, image: Tensor<f32>, norm: Normalization) -> Result<Vec<Tensor<f32>>> {
    let stack = match image.ndim() {
        4 => select_timepoint(&DscSeries::new(id, image)?)?,
        3 => image,
        2 => image.reshape(&[1, image.shape()[0], image.shape()[1]])?,
        _ => return Err(Error::Data(format!("{id}: unsupported image shape {:?}", image.shape()))),
    };
    let [z, h, w]: [usize; 3] = stack.shape().try_into().unwrap();
    if z * h * w == 0 {
        return Err(Error::Data(format!("{id}: empty image {:?}", stack.shape())));
    }
    let plane = h * w;
    let volume = match norm {
        Normalization::PerVolume => Some(minmax_normalize(stack.data(), z, plane)?),
        Normalization::PerSlice => None,
    };
    (0..z)
        .map(|k| {
            Ok(match &volume {
                Some(v) => Tensor::new(&[1, h, w], v.data()[k * plane..(k + 1) * plane].to_vec())?,
                None => minmax_normalize(&stack.data()[k * plane..(k + 1) * plane], h, w)?.reshape(&[1, h, w])?,
            })
        })
        .collect()
}

/// Loads a subject's slices; see [`prepare_image`] for the accepted layouts.
pub fn load_subject(entry: &SubjectEntry, base: &Path, norm: Normalization) -> Result<Vec<Sample>> {
    let image = load_tensor(base.join(&entry.image))?.to_float::<f32>()?;
    let slices = prepare_image(&entry.id, image, norm)?;
    let (z, h, w) = (slices.len(), slices[0].shape()[1], slices[0].shape()[2]);
    let mask = match load_tensor(base.join(&entry.mask))? {
        AnyTensor::U8(m) => m,
        other => return Err(Error::Data(format!("subject {}: mask must be u8, found {}", entry.id, other.dtype()))),
    };
    let mask = if mask.ndim() == 2 { mask.reshape(&[1, h, w]).ok() } else { Some(mask) }
        .filter(|m| m.shape() == [z, h, w])
        .ok_or_else(|| Error::Data(format!("subject {}: mask does not match image slices {z}x{h}x{w}", entry.id)))?;
    if mask.data().iter().any(|&v| v > 1) {
        return Err(Error::Data(format!("subject {}: mask is not binary", entry.id)));
    }
    let plane = h * w;
    slices
        .into_iter()
        .enumerate()
        .map(|(k, image)| {
            let m = Tensor::new(&[h, w], mask.data()[k * plane..(k + 1) * plane].to_vec())?;
            Ok(Sample { image, mask: m, subject: entry.id.clone(), slice: k })
        })
        .collect()
}

/// Slices of all subjects, grouped by split in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(manifest_path: impl AsRef<Path>, norm: Normalization) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset::default();
        for entry in &manifest.subjects {
            let samples = load_subject(entry, base, norm)?;
            match entry.split {
                Split::Train => ds.train.extend(samples),
                Split::Val => ds.val.extend(samples),
                Split::Test => ds.test.extend(samples),
            }
        }
        Ok(ds)
    }
}

/// Stacks images into `[N, 1, H, W]` and masks into `[N, H, W]`.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.mask.shape()[0], first.mask.shape()[1]);
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.mask.shape() != [h, w] || s.image.shape() != [1, h, w] {
            return Err(Error::Data("batch mixes slice sizes".into()));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::new(&[n, 1, h, w], images)?, Tensor::new(&[n, h, w], masks)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub subjects: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub timepoints: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub phantom: PhantomParams,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            subjects: 32,
            height: 64,
            width: 64,
            slices: 8,
            timepoints: 8,
            ratios: DEFAULT_RATIOS,
            seed: 0,
            phantom: PhantomParams::default(),
        }
    }
}

fn subject_seed(seed: u64, subject: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (subject as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes a phantom cohort (one series and one mask file per subject) and its
/// manifest into `out_dir`.
pub fn generate_dataset(out_dir: impl AsRef<Path>, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    let dir = out_dir.as_ref();
    check_size(cfg.height, cfg.width)?;
    let split = subject_split(cfg.subjects, cfg.ratios, cfg.seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(cfg.subjects);
    for i in 0..cfg.subjects {
        let id = format!("subject-{i:03}");
        let (series, masks) = generate_series(
            &id,
            subject_seed(cfg.seed, i),
            cfg.timepoints,
            cfg.slices,
            cfg.height,
            cfg.width,
            &cfg.phantom,
        )?;
        let image = PathBuf::from(format!("{id}_dsc.sstn"));
        let mask = PathBuf::from(format!("{id}_mask.sstn"));
        save_tensor(dir.join(&image), series.data)?;
        save_tensor(dir.join(&mask), masks)?;
        let which = Split::ALL.into_iter().find(|&s| split.get(s).contains(&i)).expect("split covers all subjects");
        subjects.push(SubjectEntry { id, image, mask, split: which });
    }
    let manifest = DatasetManifest { subjects };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig { subjects: 5, slices: 2, timepoints: 5, height: 32, width: 32, ..Default::default() };
        let m = generate_dataset(dir.path(), &cfg).unwrap();
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| m.subjects_in(s).count()).collect();
        assert_eq!(counts.iter().sum::<usize>(), 5);
        let ds = Dataset::load(dir.path().join(MANIFEST_FILE), Normalization::PerSlice).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 10);
        let s = &ds.train[0];
        assert_eq!(s.image.shape(), &[1, 32, 32]);
        assert_eq!(s.mask.shape(), &[32, 32]);
        let (x, y) = stack_batch(&[&ds.train[0], &ds.train[1]]).unwrap();
        assert_eq!((x.shape(), y.shape()), (&[2, 1, 32, 32][..], &[2, 32, 32][..]));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = SubjectEntry { id: "a".into(), image: "i".into(), mask: "m".into(), split: Split::Train };
        let m = DatasetManifest { subjects: vec![e.clone(), e] };
        assert!(m.validate().is_err());
    }
}

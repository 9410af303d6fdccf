//! Synthetic subspace-clustered datasets, manifests and skeleton preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UktlError};
use crate::linalg::Matrix;
use crate::subspace::Subspace;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Each class owns one orthonormal basis per mode. A sample is a Gaussian core
/// `G` taken through `G ×_1 U_c1 ×_2 U_c2 ...`, rescaled to unit RMS entry,
/// plus `noise · N(0, 1)` per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dims: Vec<usize>,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            per_class: 100,
            dims: vec![8, 10, 12],
            rank: 4,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(UktlError::InvalidArgument("need at least one class".into()));
        }
        if self.per_class < 2 {
            return Err(UktlError::InvalidArgument(
                "need at least two samples per class for a train/test split".into(),
            ));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(UktlError::InvalidArgument(format!("invalid dims {:?}", self.dims)));
        }
        let min_dim = *self.dims.iter().min().expect("nonempty");
        if self.rank == 0 || self.rank > min_dim {
            return Err(UktlError::InvalidArgument(format!(
                "rank {} must be in 1..={min_dim} for dims {:?}",
                self.rank, self.dims
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(UktlError::InvalidArgument(format!(
                "noise must be nonnegative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Training samples per class; the rest go to the test split.
    pub fn train_per_class(&self) -> usize {
        ((self.per_class as f64 * 0.8).round() as usize).clamp(1, self.per_class - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub tensors: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dims: self.dims.clone(),
            num_classes: self.num_classes,
            tensors: idx.iter().map(|&i| self.tensors[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Mode-`m` product `t ×_m u`.
fn mode_product(t: &Tensor, u: &Matrix, mode: usize) -> Result<Tensor> {
    let mut dims = t.dims().to_vec();
    dims[mode] = u.rows();
    Tensor::refold(&u.matmul(&t.matricize(mode)?)?, mode, &dims)
}

/// Draws the full dataset and splits it into `(train, test)`.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let core_dims = vec![spec.rank; spec.dims.len()];
    let mut classes = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let bases = spec
            .dims
            .iter()
            .map(|&d| Ok(Subspace::random(d, spec.rank, &mut rng)?.basis().clone()))
            .collect::<Result<Vec<_>>>()?;
        classes.push(bases);
    }

    let mut all = Dataset {
        dims: spec.dims.clone(),
        num_classes: spec.num_classes,
        tensors: Vec::new(),
        labels: Vec::new(),
    };
    for (label, bases) in classes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut x = Tensor::from_fn(core_dims.clone(), |_| rng.sample::<f64, _>(StandardNormal))?;
            for (m, u) in bases.iter().enumerate() {
                x = mode_product(&x, u, m)?;
            }
            let rms = (x.frobenius_norm_sq() / x.len() as f64).sqrt();
            if rms > 0.0 {
                x = x.scale(1.0 / rms)?;
            }
            let noise = Tensor::from_fn(spec.dims.clone(), |_| rng.sample::<f64, _>(StandardNormal))?;
            all.tensors.push(x.add(&noise.scale(spec.noise)?)?);
            all.labels.push(label);
        }
    }

    let n_train = spec.train_per_class();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..spec.num_classes {
        let mut idx: Vec<usize> = (c * spec.per_class..(c + 1) * spec.per_class).collect();
        idx.shuffle(&mut rng);
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    Ok((all.subset(&train_idx), all.subset(&test_idx)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UktlError::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if let Some(bad) = manifest.entries.iter().find(|e| e.label >= manifest.num_classes) {
            return Err(UktlError::InvalidArgument(format!(
                "{}: label {} outside 0..{}",
                bad.path, bad.label, manifest.num_classes
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| UktlError::io(path, e))
    }
}

/// Reads a manifest and every tensor it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = base.join(&e.path);
        let t = read_tensor(&path)?;
        if t.dims() != manifest.dims.as_slice() {
            return Err(UktlError::DimensionMismatch(format!(
                "{}: dims {:?}, manifest declares {:?}",
                path.display(),
                t.dims(),
                manifest.dims
            )));
        }
        tensors.push(t);
    }
    Ok(Dataset {
        dims: manifest.dims,
        num_classes: manifest.num_classes,
        labels: manifest.entries.iter().map(|e| e.label).collect(),
        tensors,
    })
}

/// Writes tensors under `dir/split/NNNNNN.tns` and the manifest at `dir/split.json`.
pub fn write_split(data: &Dataset, dir: &Path, split: &str) -> Result<PathBuf> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| UktlError::io(&sub, e))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, (t, &label)) in data.tensors.iter().zip(&data.labels).enumerate() {
        let name = format!("{i:06}.tns");
        write_tensor(&sub.join(&name), t)?;
        entries.push(ManifestEntry {
            path: format!("{split}/{name}"),
            label,
        });
    }
    let manifest = DatasetManifest {
        dims: data.dims.clone(),
        num_classes: data.num_classes,
        entries,
    };
    let path = dir.join(format!("{split}.json"));
    manifest.write(&path)?;
    Ok(path)
}

/// Generates a dataset and writes both splits; returns the manifest paths.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = generate(spec)?;
    Ok((write_split(&train, dir, "train")?, write_split(&test, dir, "test")?))
}

fn check_sequence(seq: &Tensor) -> Result<(usize, usize, usize)> {
    match seq.dims() {
        &[axes, joints, frames] => Ok((axes, joints, frames)),
        dims => Err(UktlError::DimensionMismatch(format!(
            "expected an axes x joints x frames sequence, got dims {dims:?}"
        ))),
    }
}

/// Centres every frame on `ref_joint`, then scales each coordinate axis by its
/// largest absolute value. Axes that are identically zero after centring stay zero.
pub fn normalize_skeleton(seq: &Tensor, ref_joint: usize) -> Result<Tensor> {
    let (axes, joints, frames) = check_sequence(seq)?;
    if ref_joint >= joints {
        return Err(UktlError::InvalidArgument(format!(
            "reference joint {ref_joint} out of range for {joints} joints"
        )));
    }
    let v = seq.values();
    let idx = |a: usize, j: usize, f: usize| (a * joints + j) * frames + f;
    let mut out = vec![0.0; v.len()];
    for a in 0..axes {
        for j in 0..joints {
            for f in 0..frames {
                out[idx(a, j, f)] = v[idx(a, j, f)] - v[idx(a, ref_joint, f)];
            }
        }
        let block = &mut out[a * joints * frames..(a + 1) * joints * frames];
        let max = block.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if max > 0.0 {
            block.iter_mut().for_each(|x| *x /= max);
        }
    }
    Tensor::new(seq.dims().to_vec(), out)
}

/// Frame indices used by [`temporal_resample`].
pub fn resample_indices(frames: usize, target: usize) -> Vec<usize> {
    if frames < target {
        (0..target).map(|i| i % frames).collect()
    } else if target == 1 {
        vec![0]
    } else {
        // round(i·(F-1)/(T-1)), half up, in integers.
        let (num, den) = (frames - 1, target - 1);
        (0..target).map(|i| (2 * i * num + den) / (2 * den)).collect()
    }
}

/// Resamples the last (time) axis to exactly `target` frames.
pub fn temporal_resample(seq: &Tensor, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(UktlError::InvalidArgument("target length must be at least 1".into()));
    }
    let frames = *seq.dims().last().expect("tensors have order >= 1");
    seq.gather_last(&resample_indices(frames, target))
}

/// Overlapping windows of `block` frames along the last axis, `stride` apart.
pub fn temporal_blocks(seq: &Tensor, block: usize, stride: usize) -> Result<Vec<Tensor>> {
    let frames = *seq.dims().last().expect("tensors have order >= 1");
    if block == 0 || stride == 0 {
        return Err(UktlError::InvalidArgument("block length and stride must be at least 1".into()));
    }
    if block > frames {
        return Err(UktlError::InvalidArgument(format!(
            "block of {block} frames exceeds sequence length {frames}"
        )));
    }
    (0..=(frames - block) / stride)
        .map(|b| seq.slice_last(b * stride, block))
        .collect()
}

//! Volume files, manifests, factor pre-pooling and the synthetic dataset
//! generator.
//!
//! Generated subjects share one smooth template (every volume is aligned) and
//! differ by a few Gaussian blobs. A subject's label sums its blob amplitudes
//! weighted by the grid cell each blob centre falls in, so the same local
//! pattern pushes the label up in one cell and down in another.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, format_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{ravel, strides_of, unravel, DType, Scalar, Tensor};

pub const VOLUME_MAGIC: &[u8; 4] = b"BVOL";
pub const VOLUME_VERSION: u16 = 1;
pub const RAW_SHAPE: [usize; 3] = [121, 145, 121];

pub fn volume_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_volume<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, volume_bytes(t))?;
    Ok(())
}

/// Decode a volume; values stored in the other precision are converted.
pub fn volume_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 8 {
        return Err(format_err!("volume header truncated ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(format_err!("bad volume magic {:?}", &bytes[..4]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(format_err!("unsupported volume version {}", version));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| format_err!("unknown dtype code {}", bytes[6]))?;
    let rank = bytes[7] as usize;
    if !(1..=5).contains(&rank) {
        return Err(format_err!("unsupported volume rank {}", rank));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err!("volume header truncated ({} bytes)", bytes.len()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| format_err!("volume extents {:?} overflow", shape))?;
    if shape.contains(&0) {
        return Err(format_err!("volume has a zero extent: {:?}", shape));
    }
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(format_err!("payload is {} bytes, extents {:?} need {}", payload.len(), shape, count));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn read_volume<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    volume_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format_err!("unknown split {:?}", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: f64,
    pub split: Split,
}

/// `path,label,split` rows; paths are relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(format_err!("duplicate manifest path {:?}", e.path));
            }
            if !e.label.is_finite() {
                return Err(format_err!("label of {:?} is not finite", e.path));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(format_err!("manifest header must be path,label,split, got {:?}", headers));
        }
        let entries = r
            .deserialize()
            .map(|row| row.map_err(|e| format_err!("manifest row: {}", e)))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let m = Manifest { entries };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolStrategy {
    Average,
    Max,
    Naive,
}

impl FromStr for PoolStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(PoolStrategy::Average),
            "max" => Ok(PoolStrategy::Max),
            "naive" => Ok(PoolStrategy::Naive),
            _ => Err(arg_err!("unknown pooling strategy {:?}", s)),
        }
    }
}

/// Downsample every axis by `factor`. Blocks start at multiples of `factor`;
/// the last block along an axis may be partial, and average and max then use
/// only the voxels present.
pub fn prepool<T: Scalar>(volume: &Tensor<T>, factor: usize, strategy: PoolStrategy) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(arg_err!("pooling factor must be at least 1"));
    }
    let shape = volume.shape();
    let out_shape: Vec<usize> = shape.iter().map(|&e| e.div_ceil(factor)).collect();
    let strides = strides_of(shape);
    let rank = shape.len();
    let out_len: usize = out_shape.iter().product();
    let data = volume.data();
    let mut out = Vec::with_capacity(out_len);
    let mut offs = vec![0usize; rank];
    for flat in 0..out_len {
        let cell = unravel(&out_shape, flat);
        let start: Vec<usize> = cell.iter().map(|&c| c * factor).collect();
        let extent: Vec<usize> = (0..rank).map(|a| factor.min(shape[a] - start[a])).collect();
        let base = ravel(shape, &start);
        let v = match strategy {
            PoolStrategy::Naive => data[base],
            PoolStrategy::Average | PoolStrategy::Max => {
                let count: usize = extent.iter().product();
                let mut sum = 0.0f64;
                let mut max = T::neg_infinity();
                offs.iter_mut().for_each(|o| *o = 0);
                for _ in 0..count {
                    let at = base + offs.iter().zip(&strides).map(|(o, s)| o * s).sum::<usize>();
                    sum += data[at].to_f64_lossy();
                    max = max.max(data[at]);
                    for a in (0..rank).rev() {
                        offs[a] += 1;
                        if offs[a] < extent[a] {
                            break;
                        }
                        offs[a] = 0;
                    }
                }
                if strategy == PoolStrategy::Max {
                    max
                } else {
                    T::of(sum / count as f64)
                }
            }
        };
        out.push(v);
    }
    Tensor::new(&out_shape, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub volume_shape: [usize; 3],
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub blobs_per_volume: usize,
    pub sigma_range: [f64; 2],
    pub amplitude_range: [f64; 2],
    /// Blob centres keep this many voxels away from every face.
    pub margin: usize,
    /// Cells per axis of the label weight grid.
    pub grid: usize,
    /// `grid^3` cell weights in row-major cell order; `None` alternates +1/-1
    /// like a checkerboard.
    pub weights: Option<Vec<f64>>,
    pub sigma_label: f64,
    pub sigma_voxel: f64,
    pub label_range: [f64; 2],
    pub seed: u64,
    pub template_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            volume_shape: [41, 49, 41],
            n_train: 524,
            n_val: 100,
            n_test: 100,
            blobs_per_volume: 12,
            sigma_range: [1.0, 2.5],
            amplitude_range: [0.5, 1.5],
            margin: 0,
            grid: 2,
            weights: None,
            sigma_label: 0.05,
            sigma_voxel: 0.02,
            label_range: [8.0, 21.0],
            seed: 0,
            template_seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(arg_err!("weight grid must have at least one cell per axis"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.grid.pow(3) {
                return Err(arg_err!("{} cell weights for a {}^3 grid", w.len(), self.grid));
            }
        }
        if self.volume_shape.iter().any(|&e| e < self.grid || e <= 2 * self.margin) {
            return Err(arg_err!("volume {:?} too small for grid {} and margin {}", self.volume_shape, self.grid, self.margin));
        }
        for (name, [lo, hi]) in [("sigma_range", self.sigma_range), ("amplitude_range", self.amplitude_range)] {
            if !(lo <= hi) {
                return Err(arg_err!("{} must be ordered, got [{}, {}]", name, lo, hi));
            }
        }
        if !(self.sigma_range[0] > 0.0) || !(self.sigma_label >= 0.0) || !(self.sigma_voxel >= 0.0) {
            return Err(arg_err!("blob sigma must be positive and noise levels non-negative"));
        }
        if !(self.label_range[0] < self.label_range[1]) {
            return Err(arg_err!("label range must be increasing"));
        }
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(arg_err!("no subjects requested"));
        }
        Ok(())
    }

    pub fn cell_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| {
            (0..self.grid.pow(3))
                .map(|i| {
                    let (x, y, z) = (i / (self.grid * self.grid), (i / self.grid) % self.grid, i % self.grid);
                    if (x + y + z) % 2 == 0 { 1.0 } else { -1.0 }
                })
                .collect()
        })
    }

    /// Row-major weight-grid cell of a voxel position.
    pub fn cell_of(&self, pos: [f64; 3]) -> usize {
        let r = self.grid;
        let idx: Vec<usize> = (0..3)
            .map(|a| (((pos[a] / self.volume_shape[a] as f64) * r as f64).floor().max(0.0) as usize).min(r - 1))
            .collect();
        (idx[0] * r + idx[1]) * r + idx[2]
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.n_train {
            Split::Train
        } else if i < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Smooth subject-independent background: a few low-frequency cosines.
pub fn template(shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let terms: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let freq = [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)];
            (freq, rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(0.05, 0.15))
        })
        .collect();
    Tensor::from_fn(&shape, |i| {
        let mut v = 0.5;
        for (freq, phase, amp) in &terms {
            let arg: f64 = (0..3).map(|a| freq[a] * i[a] as f64 / shape[a] as f64).sum::<f64>();
            v += amp * (std::f64::consts::TAU * arg + phase).cos();
        }
        v
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub index: usize,
    pub split: Split,
    pub blobs: Vec<Blob>,
    pub label_noise: f64,
    /// Label before rescaling.
    pub raw_label: f64,
    pub label: f64,
}

/// Affine map applied to raw labels: `label = scale * raw + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub config: GeneratorConfig,
    pub volumes: Vec<Tensor<f32>>,
    pub subjects: Vec<SubjectMeta>,
    pub label_map: LabelMap,
}

/// Label of a subject from its blobs, before rescaling.
pub fn raw_label(blobs: &[Blob], weights: &[f64], noise: f64) -> f64 {
    blobs.iter().map(|b| weights[b.cell] * b.amplitude).sum::<f64>() + noise
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Generated> {
    cfg.validate()?;
    let tpl = template(cfg.volume_shape, cfg.template_seed);
    let weights = cfg.cell_weights();
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    let made: Vec<(Tensor<f32>, SubjectMeta)> = (0..n)
        .into_par_iter()
        .map(|i| subject(cfg, &tpl, &weights, i))
        .collect();
    let (volumes, mut subjects): (Vec<_>, Vec<_>) = made.into_iter().unzip();

    let (lo, hi) = subjects
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.raw_label), hi.max(s.raw_label)));
    let [a, b] = cfg.label_range;
    let label_map = if hi > lo {
        LabelMap { scale: (b - a) / (hi - lo), offset: a - lo * (b - a) / (hi - lo) }
    } else {
        LabelMap { scale: 1.0, offset: (a + b) / 2.0 - lo }
    };
    for s in &mut subjects {
        s.label = label_map.scale * s.raw_label + label_map.offset;
    }
    Ok(Generated { config: cfg.clone(), volumes, subjects, label_map })
}

fn subject(cfg: &GeneratorConfig, tpl: &Tensor<f64>, weights: &[f64], index: usize) -> (Tensor<f32>, SubjectMeta) {
    let mut rng = Rng::with_stream(cfg.seed, index as u64);
    let shape = cfg.volume_shape;
    let blobs: Vec<Blob> = (0..cfg.blobs_per_volume)
        .map(|_| {
            let center: [f64; 3] = std::array::from_fn(|a| rng.uniform(cfg.margin as f64, (shape[a] - cfg.margin) as f64));
            let sigma = rng.uniform(cfg.sigma_range[0], cfg.sigma_range[1]);
            let amplitude = rng.uniform(cfg.amplitude_range[0], cfg.amplitude_range[1]);
            Blob { center, sigma, amplitude, cell: cfg.cell_of(center) }
        })
        .collect();
    let mut vol = tpl.clone();
    for b in &blobs {
        // Contributions beyond 4 sigma are dropped.
        let reach = (4.0 * b.sigma).ceil();
        let lo: [usize; 3] = std::array::from_fn(|a| (b.center[a] - reach).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| ((b.center[a] + reach).ceil() as usize).min(shape[a] - 1));
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let d2 = (x as f64 + 0.5 - b.center[0]).powi(2)
                        + (y as f64 + 0.5 - b.center[1]).powi(2)
                        + (z as f64 + 0.5 - b.center[2]).powi(2);
                    vol.data_mut()[(x * shape[1] + y) * shape[2] + z] += b.amplitude * (-d2 * inv).exp();
                }
            }
        }
    }
    if cfg.sigma_voxel > 0.0 {
        for v in vol.data_mut() {
            *v += rng.normal(0.0, cfg.sigma_voxel);
        }
    }
    let label_noise = if cfg.sigma_label > 0.0 { rng.normal(0.0, cfg.sigma_label) } else { 0.0 };
    let raw = raw_label(&blobs, weights, label_noise);
    let meta = SubjectMeta { index, split: cfg.split_of(index), blobs, label_noise, raw_label: raw, label: raw };
    (vol.cast(), meta)
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorRecord {
    config: GeneratorConfig,
    label_map: LabelMap,
    subjects: Vec<SubjectMeta>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GENERATOR_FILE: &str = "generator.json";

/// Write volumes under `dir/volumes/`, the manifest and a JSON record of
/// every blob and label.
pub fn write_dataset(dir: &Path, generated: &Generated) -> Result<Manifest> {
    fs::create_dir_all(dir.join("volumes"))?;
    let entries: Vec<ManifestEntry> = generated
        .volumes
        .par_iter()
        .zip(&generated.subjects)
        .map(|(v, s)| {
            let rel = format!("volumes/subject_{:04}.bvol", s.index);
            write_volume(&dir.join(&rel), v)?;
            Ok(ManifestEntry { path: rel, label: s.label, split: s.split })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { entries };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let record = GeneratorRecord {
        config: generated.config.clone(),
        label_map: generated.label_map,
        subjects: generated.subjects.clone(),
    };
    fs::write(dir.join(GENERATOR_FILE), serde_json::to_vec_pretty(&record)?)?;
    Ok(manifest)
}

pub fn generate_dataset(cfg: &GeneratorConfig, dir: &Path) -> Result<Manifest> {
    write_dataset(dir, &generate(cfg)?)
}

/// Volumes stacked as `(N, X, Y, Z, 1)` with one label per volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub volumes: Tensor<f32>,
    pub labels: Vec<f32>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_volumes(volumes: &[&Tensor<f32>], labels: Vec<f32>) -> Result<Self> {
        if volumes.len() != labels.len() {
            return Err(arg_err!("{} volumes, {} labels", volumes.len(), labels.len()));
        }
        if volumes.is_empty() {
            return Err(arg_err!("empty split"));
        }
        let s = volumes[0].shape();
        if s.len() != 3 {
            return Err(shape_err!("expected (X, Y, Z) volumes, got {:?}", s));
        }
        let stacked = Tensor::stack(volumes)?.reshape(&[volumes.len(), s[0], s[1], s[2], 1])?;
        Ok(SplitData { volumes: stacked, labels })
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let per = self.volumes.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(arg_err!("sample {} out of range {}", i, self.len()));
            }
            data.extend_from_slice(&self.volumes.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.volumes.shape().to_vec();
        shape[0] = indices.len();
        Ok(SplitData { volumes: Tensor::new(&shape, data)?, labels })
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        let s = self.volumes.shape();
        [s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn volume_shape(&self) -> [usize; 3] {
        self.train.volume_shape()
    }

    pub fn from_generated(g: &Generated) -> Result<Self> {
        let part = |split: Split| -> Result<SplitData> {
            let (vols, labels): (Vec<&Tensor<f32>>, Vec<f32>) = g
                .volumes
                .iter()
                .zip(&g.subjects)
                .filter(|(_, s)| s.split == split)
                .map(|(v, s)| (v, s.label as f32))
                .unzip();
            SplitData::from_volumes(&vols, labels)
        };
        Ok(Dataset { train: part(Split::Train)?, val: part(Split::Val)?, test: part(Split::Test)? })
    }
}

/// Load every volume named by a manifest. All volumes must share one
/// `(X, Y, Z)` shape and every split must be non-empty.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let volumes: Vec<Tensor<f32>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let v = read_volume::<f32>(&root.join(&e.path))?;
            if v.rank() != 3 {
                return Err(format_err!("{}: expected an (X, Y, Z) volume, got {:?}", e.path, v.shape()));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    if let Some(first) = volumes.first() {
        if let Some((e, v)) = manifest.entries.iter().zip(&volumes).find(|(_, v)| v.shape() != first.shape()) {
            return Err(format_err!("{}: shape {:?} differs from {:?}", e.path, v.shape(), first.shape()));
        }
    }
    let part = |split: Split| -> Result<SplitData> {
        let (vols, labels): (Vec<&Tensor<f32>>, Vec<f32>) = manifest
            .entries
            .iter()
            .zip(&volumes)
            .filter(|(e, _)| e.split == split)
            .map(|(e, v)| (v, e.label as f32))
            .unzip();
        if vols.is_empty() {
            return Err(format_err!("manifest has no {:?} subjects", split));
        }
        SplitData::from_volumes(&vols, labels)
    };
    Ok(Dataset { train: part(Split::Train)?, val: part(Split::Val)?, test: part(Split::Test)? })
}

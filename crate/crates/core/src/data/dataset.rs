//! Image datasets in the MedMNIST layout: six arrays
//! `{train,val,test}_{images,labels}`, either inside an NPZ archive or as
//! loose `.npy` files in a directory.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::npy::{NpyArray, NpyData};
use crate::data::zip::{ZipArchive, ZipWriter};
use crate::error::{Error, FormatError, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
}

impl TaskKind {
    pub fn for_classes(n_classes: usize) -> Self {
        if n_classes == 2 {
            TaskKind::Binary
        } else {
            TaskKind::Multiclass
        }
    }
}

/// One split. `images` is channels-first: `[N, C, H, W]` or `[N, C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, `[C, H, W]` or `[C, D, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n: usize = self.sample_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Stacks the selected samples into one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub n_classes: usize,
    pub task: TaskKind,
}

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Number of spatial axes (2 or 3).
    pub fn spatial_dims(&self) -> usize {
        self.train.images.ndim() - 2
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }

    /// Builds a bundle from the six raw arrays, applying the layout rules:
    /// `(N,H,W)` → `[N,1,H,W]`; `(N,H,W,3)` → `[N,3,H,W]`; any other rank-4
    /// array is a volume `(N,D,H,W)` → `[N,1,D,H,W]`. `uint8` images are
    /// scaled by 1/255; labels are flattened.
    pub fn from_arrays(arrays: &IndexMap<String, NpyArray>, n_classes: Option<usize>) -> Result<Self> {
        let mut splits = Vec::with_capacity(3);
        for split in SPLITS {
            let img_key = format!("{split}_images");
            let lab_key = format!("{split}_labels");
            let images = arrays
                .get(&img_key)
                .ok_or_else(|| FormatError::MissingMember(img_key.clone()))?;
            let labels = arrays
                .get(&lab_key)
                .ok_or_else(|| FormatError::MissingMember(lab_key.clone()))?;
            splits.push((split, convert_images(&img_key, images)?, convert_labels(&lab_key, labels)?));
        }
        for (split, images, labels) in &splits {
            if images.shape()[0] != labels.len() {
                return Err(Error::invalid(format!(
                    "{split}: {} images but {} labels",
                    images.shape()[0],
                    labels.len()
                )));
            }
            if images.shape()[1..] != splits[0].1.shape()[1..] {
                return Err(Error::shape(format!(
                    "{split}: image dims {:?} differ from train {:?}",
                    &images.shape()[1..],
                    &splits[0].1.shape()[1..]
                )));
            }
        }
        for required in ["train", "test"] {
            if splits.iter().any(|(s, _, l)| *s == required && l.is_empty()) {
                return Err(Error::invalid(format!("{required} split is empty")));
            }
        }
        let max_label = splits
            .iter()
            .flat_map(|(_, _, l)| l.iter().copied())
            .max()
            .unwrap_or(0);
        let n_classes = n_classes.unwrap_or((max_label + 1).max(2));
        if n_classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if max_label >= n_classes {
            return Err(Error::invalid(format!(
                "label {max_label} is out of range for {n_classes} classes"
            )));
        }
        let mut it = splits.into_iter().map(|(_, images, labels)| Split { images, labels });
        Ok(DatasetBundle {
            train: it.next().unwrap(),
            val: it.next().unwrap(),
            test: it.next().unwrap(),
            n_classes,
            task: TaskKind::for_classes(n_classes),
        })
    }

    /// The six arrays with `uint8` images (values re-quantized from [0,1])
    /// and `(N, 1)` `uint8` labels, as MedMNIST distributes them.
    pub fn to_arrays(&self) -> IndexMap<String, NpyArray> {
        let mut out = IndexMap::new();
        for split in SPLITS {
            let s = self.split(split).unwrap();
            let shape = s.images.shape();
            let layout: Vec<usize> = match (shape.len(), shape[1]) {
                (4, 1) => vec![shape[0], shape[2], shape[3]],
                (5, 1) => vec![shape[0], shape[2], shape[3], shape[4]],
                _ => shape.to_vec(),
            };
            let data = if shape.len() == 4 && shape[1] == 3 {
                // back to channels-last
                let (n, h, w) = (shape[0], shape[2], shape[3]);
                let src = s.images.data();
                let mut v = Vec::with_capacity(src.len());
                for i in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            for c in 0..3 {
                                v.push(quantize(src[((i * 3 + c) * h + y) * w + x]));
                            }
                        }
                    }
                }
                v
            } else {
                s.images.data().iter().map(|&x| quantize(x)).collect()
            };
            let layout = if shape.len() == 4 && shape[1] == 3 {
                vec![shape[0], shape[2], shape[3], 3]
            } else {
                layout
            };
            out.insert(format!("{split}_images"), NpyArray::new(layout, NpyData::U8(data)));
            out.insert(
                format!("{split}_labels"),
                NpyArray::new(
                    vec![s.len(), 1],
                    NpyData::U8(s.labels.iter().map(|&l| l as u8).collect()),
                ),
            );
        }
        out
    }
}

fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn convert_images(key: &str, a: &NpyArray) -> Result<Tensor<f32>> {
    let values: Vec<f32> = match &a.data {
        NpyData::U8(v) => v.iter().map(|&x| x as f32 / 255.0).collect(),
        NpyData::F32(v) => v.clone(),
        NpyData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        NpyData::I64(_) => {
            return Err(FormatError::UnsupportedDtype(format!("int64 images in `{key}`")).into())
        }
    };
    if let Some(bad) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("`{key}` holds value {bad} outside [0, 1]")));
    }
    let s = &a.shape;
    let (shape, data) = match s.len() {
        3 => (vec![s[0], 1, s[1], s[2]], values),
        4 if s[3] == 3 => {
            let (n, h, w) = (s[0], s[1], s[2]);
            let mut v = vec![0f32; values.len()];
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            v[((i * 3 + c) * h + y) * w + x] = values[((i * h + y) * w + x) * 3 + c];
                        }
                    }
                }
            }
            (vec![n, 3, h, w], v)
        }
        4 => (vec![s[0], 1, s[1], s[2], s[3]], values),
        _ => {
            return Err(Error::shape(format!(
                "`{key}` has shape {s:?}; expected (N,H,W), (N,H,W,3) or (N,D,H,W)"
            )))
        }
    };
    Tensor::new(shape, data)
}

fn convert_labels(key: &str, a: &NpyArray) -> Result<Vec<usize>> {
    let ok_shape = match a.shape.len() {
        1 => true,
        2 => a.shape[1] == 1,
        _ => false,
    };
    if !ok_shape {
        return Err(Error::shape(format!("`{key}` has shape {:?}; expected (N,) or (N,1)", a.shape)));
    }
    match &a.data {
        NpyData::U8(v) => Ok(v.iter().map(|&x| x as usize).collect()),
        NpyData::I64(v) => v
            .iter()
            .map(|&x| {
                usize::try_from(x).map_err(|_| Error::invalid(format!("`{key}` holds negative label {x}")))
            })
            .collect(),
        other => Err(FormatError::UnsupportedDtype(format!("{} labels in `{key}`", other.dtype_name())).into()),
    }
}

/// Decodes every `.npy` member of an NPZ archive held in memory.
pub fn read_npz_arrays(bytes: &[u8]) -> Result<IndexMap<String, NpyArray>> {
    let zip = ZipArchive::parse(bytes)?;
    let mut out = IndexMap::new();
    for e in zip.entries() {
        let data = zip.read(e)?;
        let key = e.name.strip_suffix(".npy").unwrap_or(&e.name).to_string();
        out.insert(key, NpyArray::parse(&data)?);
    }
    Ok(out)
}

pub fn parse_npz(bytes: &[u8], n_classes: Option<usize>) -> Result<DatasetBundle> {
    DatasetBundle::from_arrays(&read_npz_arrays(bytes)?, n_classes)
}

pub fn load_npz(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<DatasetBundle> {
    parse_npz(&std::fs::read(path)?, n_classes)
}

/// Loads `<dir>/{split}_{images,labels}.npy`.
pub fn load_array_dir(dir: impl AsRef<Path>, n_classes: Option<usize>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let mut arrays = IndexMap::new();
    for split in SPLITS {
        for what in ["images", "labels"] {
            let key = format!("{split}_{what}");
            let path = dir.join(format!("{key}.npy"));
            let bytes = std::fs::read(&path).map_err(|e| {
                Error::invalid(format!("cannot read `{}`: {e}", path.display()))
            })?;
            arrays.insert(key, NpyArray::parse(&bytes)?);
        }
    }
    DatasetBundle::from_arrays(&arrays, n_classes)
}

/// Stored-mode NPZ bytes for a set of arrays.
pub fn npz_bytes(arrays: &IndexMap<String, NpyArray>) -> Vec<u8> {
    let mut w = ZipWriter::new();
    for (k, a) in arrays {
        w.add_stored(&format!("{k}.npy"), &a.to_bytes());
    }
    w.finish()
}

/// Writes `<dir>/<name>.npz` and the equivalent array directory `<dir>/<name>/`.
pub fn write_fixture(bundle: &DatasetBundle, dir: impl AsRef<Path>, name: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(name))?;
    let arrays = bundle.to_arrays();
    std::fs::write(dir.join(format!("{name}.npz")), npz_bytes(&arrays))?;
    for (k, a) in &arrays {
        std::fs::write(dir.join(name).join(format!("{k}.npy")), a.to_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Blobs2d,
    Blobs3d,
}

pub const SYNTH_SIZE: usize = 28;
const BLOB_SIGMA: f64 = 3.0;
const NOISE_SIGMA: f64 = 0.1;

/// Blob centre of class `k` of `n`, in pixel coordinates.
pub fn class_center(kind: SyntheticKind, k: usize, n: usize) -> Vec<f64> {
    let c = (SYNTH_SIZE as f64 - 1.0) / 2.0;
    let th = std::f64::consts::TAU * k as f64 / n as f64;
    match kind {
        SyntheticKind::Blobs2d => vec![c + 7.0 * th.sin(), c + 7.0 * th.cos()],
        SyntheticKind::Blobs3d => vec![c + 6.0 * th.cos(), c + 6.0 * th.sin(), c + 6.0 * (2.0 * th).cos()],
    }
}

/// Gaussian-blob classification data: class `k` has a blob at a
/// class-specific centre, plus N(0, 0.1) pixel noise, clipped to [0,1] and
/// quantized to multiples of 1/255. Each class is split 70/10/20 and each
/// split is shuffled.
pub fn gen_synthetic(kind: SyntheticKind, n_per_class: usize, n_classes: usize, seed: u64) -> Result<DatasetBundle> {
    if !(2..=8).contains(&n_classes) {
        return Err(Error::invalid(format!("n_classes must be in 2..=8, got {n_classes}")));
    }
    let n_train = n_per_class * 7 / 10;
    let n_val = n_per_class / 10;
    if n_train == 0 || n_per_class - n_train - n_val == 0 {
        return Err(Error::invalid(format!("n_per_class {n_per_class} leaves an empty split")));
    }
    let dims = match kind {
        SyntheticKind::Blobs2d => 2,
        SyntheticKind::Blobs3d => 3,
    };
    let vox = SYNTH_SIZE.pow(dims as u32);
    let mut rng = Pcg32::for_label(seed, "synthetic");
    let mut per_split: [Vec<(Vec<f32>, usize)>; 3] = Default::default();
    for k in 0..n_classes {
        let centre = class_center(kind, k, n_classes);
        for i in 0..n_per_class {
            let c = &centre;
            let mut img = Vec::with_capacity(vox);
            for idx in 0..vox {
                let mut r2 = 0.0;
                let mut rem = idx;
                for ax in (0..dims).rev() {
                    let p = (rem % SYNTH_SIZE) as f64;
                    rem /= SYNTH_SIZE;
                    r2 += (p - c[ax]).powi(2);
                }
                let v = (-r2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp() + NOISE_SIGMA * rng.normal();
                img.push(quantize(v as f32) as f32 / 255.0);
            }
            let split = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            per_split[split].push((img, k));
        }
    }
    let mut splits = Vec::with_capacity(3);
    for mut items in per_split {
        rng.shuffle(&mut items);
        let n = items.len();
        let mut shape = vec![n, 1];
        shape.extend(std::iter::repeat(SYNTH_SIZE).take(dims));
        let mut data = Vec::with_capacity(n * vox);
        let mut labels = Vec::with_capacity(n);
        for (img, k) in items {
            data.extend_from_slice(&img);
            labels.push(k);
        }
        splits.push(Split {
            images: Tensor::new(shape, data)?,
            labels,
        });
    }
    let mut it = splits.into_iter();
    Ok(DatasetBundle {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        n_classes,
        task: TaskKind::for_classes(n_classes),
    })
}

/// Separable bilinear resize of `[N, C, H, W]` with half-pixel sampling
/// (`src = (dst + 0.5) * in / out - 0.5`, clamped to the border).
pub fn resize_bilinear_2d(images: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("resize expects [N, C, H, W], got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(images.clone());
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut row = vec![0f32; out_w];
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        let hr = |y: usize, row: &mut [f32]| {
            for (o, &(lo, hi, f)) in tx.iter().enumerate() {
                row[o] = p[y * w + lo] * (1.0 - f) + p[y * w + hi] * f;
            }
        };
        let mut r0 = vec![0f32; out_w];
        let mut r1 = vec![0f32; out_w];
        for &(lo, hi, f) in &ty {
            hr(lo, &mut r0);
            hr(hi, &mut r1);
            for o in 0..out_w {
                row[o] = r0[o] * (1.0 - f) + r1[o] * f;
            }
            out.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

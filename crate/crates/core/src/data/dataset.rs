use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::image::{decode_ppm, decode_wten, resize_nearest, write_ppm, RgbImage};
use crate::model::HAM10000_CLASSES;
use crate::{seeded_rng, Error, Real, Result, Tensor};

/// One step of an augmentation chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentOp::HFlip => "hflip",
            AugmentOp::VFlip => "vflip",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
        })
    }
}

impl AugmentOp {
    /// Applies the op to `[H, W, C]`. Quarter turns are clockwise.
    pub fn apply<T: Real>(self, img: &Tensor<T>) -> Tensor<T> {
        let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let (oh, ow) = match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (w, h),
            _ => (h, w),
        };
        let mut out = Vec::with_capacity(img.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match self {
                    AugmentOp::HFlip => (y, w - 1 - x),
                    AugmentOp::VFlip => (h - 1 - y, x),
                    AugmentOp::Rot180 => (h - 1 - y, w - 1 - x),
                    AugmentOp::Rot90 => (h - 1 - x, y),
                    AugmentOp::Rot270 => (x, w - 1 - y),
                };
                let o = (sy * w + sx) * c;
                out.extend_from_slice(&img.data()[o..o + c]);
            }
        }
        Tensor::new(&[oh, ow, c], out).expect("augment shape")
    }
}

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub augmentation: Vec<AugmentOp>,
}

impl Provenance {
    pub fn original(id: impl Into<String>) -> Self {
        Self {
            source_id: id.into(),
            augmentation: Vec::new(),
        }
    }

    /// Stable sample identifier, e.g. `img_0003+hflip+rot90`.
    pub fn sample_id(&self) -> String {
        let mut s = self.source_id.clone();
        for op in &self.augmentation {
            s.push('+');
            s.push_str(&op.to_string());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T: Real = f32> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl<T: Real> LabeledDataset<T> {
    pub fn empty(class_names: Vec<String>) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            class_names,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn push(&mut self, image: Tensor<T>, label: usize, provenance: Provenance) {
        self.images.push(image);
        self.labels.push(label);
        self.provenance.push(provenance);
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.class_names.clone());
        for &i in indices {
            out.push(self.images[i].clone(), self.labels[i], self.provenance[i].clone());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Checks label range and that all images share one shape.
    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::OutOfRange {
                op: "dataset",
                detail: format!("label {bad} with {} classes", self.num_classes()),
            });
        }
        if let Some(first) = self.images.first() {
            if let Some(odd) = self.images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::shape(
                    "dataset",
                    format!("images {:?} and {:?}", first.shape(), odd.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub class_names: Vec<String>,
    /// Target `(height, width)`; images are resized by nearest neighbour.
    pub size: Option<(usize, usize)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            class_names: HAM10000_CLASSES.iter().map(|s| s.to_string()).collect(),
            size: None,
        }
    }
}

#[derive(Deserialize)]
struct LabelRow {
    image_id: String,
    label: String,
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["ppm", "wten"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(format!("{id}.ppm")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no .ppm or .wten image for this id"),
    ))
}

/// Reads one `.ppm` or `.wten` image as `[H, W, 3]` in `[0, 1]`.
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "wten") {
        let t: Tensor<T> = decode_wten(&buf, path)?;
        if t.rank() != 3 || t.shape()[2] != 3 {
            return Err(Error::format(path, format!("expected [H, W, 3], got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::format(path, "values outside [0, 1]"));
        }
        Ok(t)
    } else {
        Ok(decode_ppm(&buf, path)?.to_tensor())
    }
}

/// Reads `labels_csv` (`image_id,label`) and the matching `<id>.ppm` or
/// `<id>.wten` files from `image_dir`. Samples are ordered by image id.
pub fn load_dataset<T: Real>(image_dir: &Path, labels_csv: &Path, opts: &LoadOptions) -> Result<LabeledDataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(labels_csv)
        .map_err(|e| Error::format(labels_csv, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(labels_csv, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "label"] {
        return Err(Error::format(labels_csv, "header must be image_id,label"));
    }
    let lookup: BTreeMap<&str, usize> = opts
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<LabelRow>().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::format(labels_csv, format!("row {row}: {e}")))?;
        let Some(&label) = lookup.get(rec.label.as_str()) else {
            return Err(Error::UnknownLabel {
                path: labels_csv.to_path_buf(),
                row,
                label: rec.label,
            });
        };
        rows.push((rec.image_id, label));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::format(labels_csv, format!("duplicate image id {}", w[0].0)));
    }

    let mut ds = LabeledDataset::empty(opts.class_names.clone());
    for (id, label) in rows {
        let mut img = read_image::<T>(&find_image(image_dir, &id)?)?;
        if let Some((h, w)) = opts.size {
            img = resize_nearest(&img, h, w);
        }
        ds.push(img, label, Provenance::original(id));
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes `<sample id>.ppm` per sample (quantized to 8 bits) and a
/// `labels.csv` listing them.
pub fn write_dataset<T: Real>(ds: &LabeledDataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(&csv_path, e.to_string());
    w.write_record(["image_id", "label"]).map_err(csv_err)?;
    for i in 0..ds.len() {
        let id = ds.provenance[i].sample_id();
        let img = &ds.images[i];
        let pixels = img
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let rgb = RgbImage {
            width: img.shape()[1],
            height: img.shape()[0],
            pixels,
        };
        write_ppm(&dir.join(format!("{id}.ppm")), &rgb)?;
        w.write_record([id.as_str(), ds.class_names[ds.labels[i]].as_str()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// Stratified seeded split: each class is shuffled and cut at
/// `round(count · train_fraction)`, keeping at least one sample on each side
/// when the class has two or more.
pub fn split_dataset<T: Real>(
    ds: &LabeledDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in per_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        idx.shuffle(&mut seeded_rng(seed, &[0x5917, class as u64]));
        let n = idx.len();
        let mut cut = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            cut = cut.clamp(1, n - 1);
        } else {
            cut = n;
        }
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// The seven non-identity symmetries of the square, as op chains.
const DIHEDRAL: [&[AugmentOp]; 7] = [
    &[AugmentOp::HFlip],
    &[AugmentOp::VFlip],
    &[AugmentOp::Rot90],
    &[AugmentOp::Rot180],
    &[AugmentOp::Rot270],
    &[AugmentOp::HFlip, AugmentOp::Rot90],
    &[AugmentOp::HFlip, AugmentOp::Rot270],
];

const RECT: [&[AugmentOp]; 3] = [&[AugmentOp::HFlip], &[AugmentOp::VFlip], &[AugmentOp::Rot180]];

/// Keeps every source image and adds `factor - 1` transformed copies of
/// each, drawn without repetition while distinct transforms remain.
/// Non-square images only get flips and half turns.
pub fn augment<T: Real>(ds: &LabeledDataset<T>, factor: usize, seed: u64) -> Result<LabeledDataset<T>> {
    if factor == 0 {
        return Err(Error::Config("augmentation factor must be at least 1".into()));
    }
    let mut out = ds.clone();
    if factor == 1 {
        return Ok(out);
    }
    for i in 0..ds.len() {
        let img = &ds.images[i];
        let pool: &[&[AugmentOp]] = if img.shape()[0] == img.shape()[1] {
            &DIHEDRAL
        } else {
            &RECT
        };
        let mut rng = seeded_rng(seed, &[0xa9, i as u64]);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for k in 0..factor - 1 {
            let chain = if k < order.len() {
                pool[order[k]]
            } else {
                *pool.choose(&mut rng).expect("non-empty pool")
            };
            let mut t = img.clone();
            for op in chain {
                t = op.apply(&t);
            }
            let mut prov = ds.provenance[i].clone();
            prov.augmentation.extend_from_slice(chain);
            out.push(t, ds.labels[i], prov);
        }
    }
    Ok(out)
}

//! Dataset ingestion: the IDX binary container, a plain CSV fallback, and
//! seeded subsampling.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{sample_indices, seeded_rng};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Image stack with integer labels. Pixels live in [0,1]; loaders reject
/// out-of-range values instead of clamping.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Shape [n, channels, height, width].
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Free-form split tag such as "train" or "test".
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidSpec("pixel outside [0,1]".into()));
        }
        Ok(Self {
            images,
            labels,
            split: String::new(),
        })
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.to_string();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape [channels, height, width].
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Single image as its own tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_raw(self.image_shape().to_vec(), self.images.row(i).to_vec())
    }

    /// Labels as a one-hot [n, num_classes] tensor.
    pub fn one_hot_labels(&self, num_classes: usize) -> Result<Tensor> {
        let mut data = vec![0.0; self.len() * num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::UnknownClass(label));
            }
            data[i * num_classes + label] = 1.0;
        }
        Tensor::new(vec![self.len(), num_classes], data)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedFile(path.display().to_string()));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an images/labels IDX pair. Pixel bytes are scaled by 1/255 so byte
/// 255 maps to exactly 1.0.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = read_be_u32(&img_bytes, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let h = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let w = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() < expected {
        return Err(Error::TruncatedFile(images_path.display().to_string()));
    }
    if img_bytes.len() > expected {
        return Err(Error::Parse(format!(
            "{} has {} trailing bytes",
            images_path.display(),
            img_bytes.len() - expected
        )));
    }

    let magic = read_be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if lbl_bytes.len() < 8 + n_labels {
        return Err(Error::TruncatedFile(labels_path.display().to_string()));
    }
    if lbl_bytes.len() > 8 + n_labels {
        return Err(Error::Parse(format!(
            "{} has {} trailing bytes",
            labels_path.display(),
            lbl_bytes.len() - 8 - n_labels
        )));
    }

    let pixels: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    Dataset::new(images, labels)
}

/// Loads rows of `label,pixel0,...,pixelK` where the pixels are already in
/// [0,1] and K+1 is the volume of `image_shape`.
pub fn load_csv(path: &Path, image_shape: &[usize]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let volume: usize = image_shape.iter().product();
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut n = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != volume + 1 {
            return Err(Error::RaggedRows(line_no));
        }
        let label: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("line {line_no}: {e}")))?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::Parse(format!(
                "line {line_no}: label {label} is not a class index"
            )));
        }
        labels.push(label as usize);
        for field in &fields[1..] {
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {line_no}: {e}")))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRangePixel {
                    value,
                    line: line_no,
                });
            }
            pixels.push(value);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::RaggedRows(1));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(image_shape);
    let images = Tensor::new(shape, pixels)?;
    Dataset::new(images, labels)
}

/// Seeded sample of `n` items without replacement. Stratified mode keeps
/// per-class proportions within rounding (largest-remainder quotas) and then
/// shuffles so classes are interleaved.
pub fn subset(dataset: &Dataset, n: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    let total = dataset.len();
    if n > total {
        return Err(Error::TooLarge {
            requested: n,
            available: total,
        });
    }
    let mut rng = seeded_rng(seed, &[]);
    let picked: Vec<usize> = if stratified {
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &label) in dataset.labels.iter().enumerate() {
            by_class.entry(label).or_default().push(i);
        }
        let mut quotas: Vec<(usize, usize, f64)> = by_class
            .iter()
            .map(|(&class, members)| {
                let exact = n as f64 * members.len() as f64 / total as f64;
                (class, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut remainder = n - quotas.iter().map(|q| q.1).sum::<usize>();
        // hand leftover slots to the largest fractional parts, low class first
        quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        for q in quotas.iter_mut() {
            if remainder == 0 {
                break;
            }
            q.1 += 1;
            remainder -= 1;
        }
        quotas.sort_by_key(|q| q.0);
        let mut picked = Vec::with_capacity(n);
        for (class, quota, _) in quotas {
            let members = &by_class[&class];
            for j in sample_indices(&mut rng, members.len(), quota) {
                picked.push(members[j]);
            }
        }
        picked.shuffle(&mut rng);
        picked
    } else {
        sample_indices(&mut rng, total, n)
    };

    let width: usize = dataset.image_shape().iter().product();
    let mut pixels = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for &i in &picked {
        pixels.extend_from_slice(dataset.images.row(i));
        labels.push(dataset.labels[i]);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(dataset.image_shape());
    let subset = Dataset::new(Tensor::new(shape, pixels)?, labels)?;
    Ok(subset.with_split(&dataset.split))
}

//! Dataset ingestion (IDX and raw tensor files) and PNG grid output.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor4};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const RAW_MAGIC: &[u8; 4] = b"DCT0";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != images.n() {
            return Err(Error::DimensionMismatch {
                expected: images.n(),
                actual: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    /// A dataset whose samples all carry label 0.
    pub fn unlabeled(images: Tensor4) -> Self {
        let labels = vec![0; images.n()];
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.images.shape()
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&idx)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (unsigned bytes, dims N, H, W) scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Tensor4> {
    let bytes = read_file(path)?;
    let header = |at| read_u32(&bytes, at).ok_or_else(|| Error::data(path, "truncated header"));
    let magic = header(0)?;
    if magic != IDX_IMAGES {
        return Err(Error::data(path, format!("bad image magic {magic:#010x}")));
    }
    let (n, h, w) = (
        header(4)? as usize,
        header(8)? as usize,
        header(12)? as usize,
    );
    let payload = &bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::data(
            path,
            format!(
                "expected {} pixel bytes, found {}",
                n * h * w,
                payload.len()
            ),
        ));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor4::from_vec(n, Shape3::new(h, w, 1), data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let header = |at| read_u32(&bytes, at).ok_or_else(|| Error::data(path, "truncated header"));
    let magic = header(0)?;
    if magic != IDX_LABELS {
        return Err(Error::data(path, format!("bad label magic {magic:#010x}")));
    }
    let n = header(4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::data(
            path,
            format!("expected {n} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != images.n() {
        return Err(Error::data(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.n()),
        ));
    }
    Ok(Dataset { images, labels })
}

/// Writes single-channel images as IDX bytes (values rounded from [0, 1]).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.shape();
    if shape.c != 1 {
        return Err(Error::Unsupported(format!(
            "IDX output needs one channel, got {}",
            shape.c
        )));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.data().len());
    for v in [
        IDX_IMAGES,
        dataset.len() as u32,
        shape.h as u32,
        shape.w as u32,
    ] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|&v| quantize(v)));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend_from_slice(&dataset.labels);
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Reads a raw tensor file: `DCT0`, big-endian u32 N, H, W, C, then
/// little-endian f32 values.
pub fn load_raw(path: &Path) -> Result<Tensor4> {
    let bytes = read_file(path)?;
    if bytes.get(..4) != Some(RAW_MAGIC.as_slice()) {
        return Err(Error::data(path, "missing DCT0 magic"));
    }
    let dim = |i: usize| {
        read_u32(&bytes, 4 + 4 * i)
            .map(|v| v as usize)
            .ok_or_else(|| Error::data(path, "truncated header"))
    };
    let (n, h, w, c) = (dim(0)?, dim(1)?, dim(2)?, dim(3)?);
    let payload = &bytes[20..];
    let count = n * h * w * c;
    if payload.len() != 4 * count {
        return Err(Error::data(
            path,
            format!(
                "expected {} payload bytes, found {}",
                4 * count,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor4::from_vec(n, Shape3::new(h, w, c), data)
}

pub fn write_raw(path: &Path, tensor: &Tensor4) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * tensor.data().len());
    out.extend_from_slice(RAW_MAGIC);
    for d in tensor.dims() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an image tensor from either an IDX image file or a raw tensor
/// file, chosen by the leading magic bytes.
pub fn load_images(path: &Path) -> Result<Tensor4> {
    let mut head = [0u8; 4];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::Read::read_exact(&mut file, &mut head)
        .map_err(|_| Error::data(path, "file too short"))?;
    if &head == RAW_MAGIC {
        load_raw(path)
    } else {
        load_idx_images(path)
    }
}

/// Keeps samples of the given classes in their original order, at most
/// `per_class_cap` of each.
pub fn filter_classes(ds: &Dataset, keep: &[u8], per_class_cap: Option<usize>) -> Result<Dataset> {
    let present = ds.classes();
    if let Some(c) = keep.iter().find(|c| !present.contains(c)) {
        return Err(Error::InvalidArgument(format!(
            "class {c} does not occur in the dataset"
        )));
    }
    let mut taken = [0usize; 256];
    let indices: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let y = ds.labels[i];
            if !keep.contains(&y) || per_class_cap.is_some_and(|cap| taken[y as usize] >= cap) {
                return false;
            }
            taken[y as usize] += 1;
            true
        })
        .collect();
    if indices.is_empty() {
        return Err(Error::InvalidArgument(
            "class filter selected no samples".into(),
        ));
    }
    Ok(ds.select(&indices))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders images into a row-major grid with 1-pixel separators. Returns
/// the PNG bytes and the number of values that had to be clamped to [0, 1].
pub fn encode_png_grid(images: &Tensor4, cols: usize) -> Result<(Vec<u8>, usize)> {
    let shape = images.shape();
    let color = match shape.c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::Unsupported(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    if images.n() == 0 || cols == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let cols = cols.min(images.n());
    let rows = images.n().div_ceil(cols);
    let width = cols * shape.w + cols + 1;
    let height = rows * shape.h + rows + 1;
    let c = shape.c;
    let mut pixels = vec![128u8; width * height * c];
    let mut clamped = 0;
    for n in 0..images.n() {
        let (r, col) = (n / cols, n % cols);
        let (y0, x0) = (1 + r * (shape.h + 1), 1 + col * (shape.w + 1));
        for h in 0..shape.h {
            for w in 0..shape.w {
                let src = images.channel_vector(n, h, w)?;
                let dst = ((y0 + h) * width + x0 + w) * c;
                for (d, &v) in pixels[dst..dst + c].iter_mut().zip(src) {
                    clamped += !(0.0..=1.0).contains(&v) as usize;
                    *d = quantize(v);
                }
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} pixel values outside [0, 1] were clamped");
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::InvalidArgument(format!("png: {e}")))?;
    }
    Ok((out, clamped))
}

pub fn write_png_grid(images: &Tensor4, cols: usize, path: &Path) -> Result<usize> {
    let (bytes, clamped) = encode_png_grid(images, cols)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(clamped)
}

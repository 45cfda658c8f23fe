use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use super::{Dataset, Sample};
use crate::error::{load_err, FcddError, Result};
use crate::numerics::Tensor;

pub const INDEX_FILE: &str = "index.csv";

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PGM (1 channel) or PPM (3 channels) into `[c,h,w]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| FcddError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| load_err!("{}: {e}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(load_err!(
                "{}: unsupported pixel format {:?} (8-bit gray or RGB expected)",
                path.display(),
                other.color()
            ))
        }
    };
    let mut data = vec![0.0f32; c * h * w];
    for (i, px) in raw.chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = f32::from(v) / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Writes `[c,h,w]` (c = 1 or 3) as binary PGM/PPM, rounding to 8 bits.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let sh = image.shape();
    if sh.len() != 3 || !(sh[0] == 1 || sh[0] == 3) {
        return Err(load_err!("{}: cannot encode image of shape {sh:?}", path.display()));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut raw = vec![0u8; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            raw[i * c + ch] = quantize(image.data()[ch * h * w + i]);
        }
    }
    encode(path, &raw, w, h, c == 3)
}

/// Writes interleaved 8-bit RGB bytes as binary PPM.
pub fn save_rgb8(path: &Path, raw: &[u8], h: usize, w: usize) -> Result<()> {
    if raw.len() != 3 * h * w {
        return Err(load_err!("{}: expected {} bytes, got {}", path.display(), 3 * h * w, raw.len()));
    }
    encode(path, raw, w, h, true)
}

fn encode(path: &Path, raw: &[u8], w: usize, h: usize, rgb: bool) -> Result<()> {
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| load_err!("{}: {e}", path.display()))?;
    fs::write(path, buf).map_err(|e| FcddError::io(path, e))
}

fn load_mask(path: &Path, h: usize, w: usize) -> Result<Tensor<f32>> {
    let m = load_image(path)?;
    if m.shape() != [1, h, w] {
        return Err(load_err!(
            "{}: mask shape {:?} does not match image {h}x{w}",
            path.display(),
            m.shape()
        ));
    }
    Ok(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Reads `root/index.csv` (`file,label,mask_file`) and the referenced images.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let index = root.join(INDEX_FILE);
    let text = fs::read_to_string(&index).map_err(|e| FcddError::io(&index, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| load_err!("{}: {e}", index.display()))?
        .clone();
    if headers.get(0) != Some("file") || headers.get(1) != Some("label") {
        return Err(load_err!("{}: header must start with 'file,label'", index.display()));
    }
    let mut samples = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| load_err!("{} line {line}: {e}", index.display()))?;
        let file = record.get(0).unwrap_or("");
        if file.is_empty() {
            return Err(load_err!("{} line {line}: empty file name", index.display()));
        }
        let label = match record.get(1) {
            Some("0") => false,
            Some("1") => true,
            other => {
                return Err(load_err!(
                    "{} line {line} ({file}): label must be 0 or 1, got {other:?}",
                    index.display()
                ))
            }
        };
        let image = load_image(&root.join(file))?;
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s != image.shape() => {
                return Err(load_err!(
                    "{file}: image shape {:?} differs from {s:?}",
                    image.shape()
                ))
            }
            _ => {}
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mask = match record.get(2) {
            Some(m) if !m.is_empty() => Some(load_mask(&root.join(m), h, w)?),
            _ => None,
        };
        let sample = Sample {
            id: file.to_string(),
            image,
            label,
            mask,
        };
        sample.validate().map_err(|e| load_err!("{file}: {e}"))?;
        samples.push(sample);
    }
    Ok(Dataset::new(samples))
}

/// Writes images, masks and `index.csv` under `root` (created if missing).
pub fn save_dataset(root: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| FcddError::io(root, e))?;
    let mut index = String::from("file,label,mask_file\n");
    for (i, s) in data.samples.iter().enumerate() {
        let ext = if s.channels() == 1 { "pgm" } else { "ppm" };
        let file = format!("{i:05}.{ext}");
        save_image(&root.join(&file), &s.image)?;
        let mask_file = match &s.mask {
            Some(m) => {
                let name = format!("{i:05}_mask.pgm");
                save_image(&root.join(&name), m)?;
                name
            }
            None => String::new(),
        };
        index.push_str(&format!("{file},{},{mask_file}\n", u8::from(s.label)));
    }
    let path = root.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| FcddError::io(&path, e))
}

/// Every `.pgm`/`.ppm`/`.pnm` file in `dir` (sorted by name) as an anomalous,
/// mask-free sample; used as an outlier-exposure corpus.
pub fn load_image_dir(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| FcddError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    files.sort();
    let mut samples = Vec::with_capacity(files.len());
    for p in files {
        samples.push(Sample {
            id: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            image: load_image(&p)?,
            label: true,
            mask: None,
        });
    }
    Ok(Dataset::new(samples))
}

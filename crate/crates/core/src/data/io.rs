//! Dataset directory layout:
//!
//! ```text
//! <root>/slides/<slide_id>.png                 RGB
//! <root>/masks/<slide_id>/<annotator_id>.png   8-bit labels
//! <root>/patients.tsv                          slide_id <TAB> patient_id
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};
use ndarray::{Array2, Array3};

use super::{RgbImage, SegmentationMask, SlideRecord};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

fn missing(path: &Path) -> Error {
    Error::Layout(format!("missing {}", path.display()))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("rgb8 buffer"))
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w, _) = img.dim();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, img.iter().copied().collect())
        .ok_or_else(|| Error::shape("image buffer does not match its dims"))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<SegmentationMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    SegmentationMask::new(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma8 buffer"))
}

pub fn encode_mask(mask: &SegmentationMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let buf = GrayImage::from_raw(w as u32, h as u32, mask.labels().iter().copied().collect())
        .expect("mask buffer matches dims");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&fs::read(path).map_err(|_| missing(path))?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_rgb(img)?)
}

pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    decode_mask(&fs::read(path).map_err(|_| missing(path))?)
}

pub fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    write_atomic(path, &encode_mask(mask)?)
}

/// `slide_id -> patient_id`. Blank lines, `#` comments and a
/// `slide_id<TAB>patient_id` header are skipped.
pub fn read_patients(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|_| missing(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t').map(str::trim);
        let (Some(slide), Some(patient), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Layout(format!(
                "{} line {}: expected two tab-separated columns",
                path.display(),
                i + 1
            )));
        };
        if i == 0 && slide == "slide_id" {
            continue;
        }
        if out.insert(slide.to_string(), patient.to_string()).is_some() {
            return Err(Error::Layout(format!("{}: duplicate slide {slide}", path.display())));
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|_| missing(dir))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Loads every slide listed in `patients.tsv`, ordered by slide id.
pub fn load_dataset(root: &Path) -> Result<Vec<SlideRecord>> {
    if !root.is_dir() {
        return Err(missing(root));
    }
    let patients = read_patients(&root.join("patients.tsv"))?;
    if patients.is_empty() {
        return Err(Error::Layout(format!("{} lists no slides", root.join("patients.tsv").display())));
    }
    let mut slides = Vec::with_capacity(patients.len());
    for (slide_id, patient_id) in &patients {
        let image = read_rgb(&root.join("slides").join(format!("{slide_id}.png")))?;
        let mut annotations = BTreeMap::new();
        for p in sorted_entries(&root.join("masks").join(slide_id))? {
            annotations.insert(stem(&p), read_mask(&p)?);
        }
        if annotations.is_empty() {
            return Err(missing(&root.join("masks").join(slide_id).join("<annotator>.png")));
        }
        slides.push(SlideRecord::new(slide_id.clone(), patient_id.clone(), image, annotations)?);
    }
    Ok(slides)
}

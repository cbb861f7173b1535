//! 8-bit image files and the dataset manifest.
//!
//! PNG covers the common case; binary PPM/PGM exist for toolchains that
//! want headerless-simple formats. All pixel values convert as v*255
//! rounded on write and v/255 on read.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainTag, SyntheticSample};
use crate::mattemath::Matte;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.into_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

fn extension(path: &Path) -> Result<String, DataError> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .ok_or_else(|| DataError::UnsupportedExtension(path.display().to_string()))
}

/// Writes a (1,3,h,w) tensor as PNG or binary PPM, by extension.
pub fn write_rgb<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let s = image.shape();
    let expected = Shape { n: 1, c: 3, ..s };
    if s != expected {
        return Err(DataError::ShapeMismatch { what: "rgb image", expected, got: s });
    }
    let mut bytes = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push(to_byte(image.at(0, c, y, x)));
            }
        }
    }
    match extension(path)?.as_str() {
        "png" => {
            let img: image::RgbImage =
                image::ImageBuffer::from_raw(s.w as u32, s.h as u32, bytes)
                    .expect("buffer sized to dimensions");
            img.save(path)?;
        }
        "ppm" => {
            let file = BufWriter::new(File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(&bytes, s.w as u32, s.h as u32, ExtendedColorType::Rgb8)?;
        }
        other => return Err(DataError::UnsupportedExtension(other.to_string())),
    }
    Ok(())
}

/// Writes a (1,1,h,w) tensor as PNG or binary PGM, by extension.
pub fn write_gray<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let s = image.shape();
    let expected = Shape { n: 1, c: 1, ..s };
    if s != expected {
        return Err(DataError::ShapeMismatch { what: "gray image", expected, got: s });
    }
    let mut bytes = Vec::with_capacity(s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            bytes.push(to_byte(image.at(0, 0, y, x)));
        }
    }
    match extension(path)?.as_str() {
        "png" => {
            let img: image::GrayImage =
                image::ImageBuffer::from_raw(s.w as u32, s.h as u32, bytes)
                    .expect("buffer sized to dimensions");
            img.save(path)?;
        }
        "pgm" => {
            let file = BufWriter::new(File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&bytes, s.w as u32, s.h as u32, ExtendedColorType::L8)?;
        }
        other => return Err(DataError::UnsupportedExtension(other.to_string())),
    }
    Ok(())
}

pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        T::of_f64(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    }))
}

pub fn read_gray<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(Shape::new(1, 1, h as usize, w as usize), |_, _, y, x| {
        T::of_f64(img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
    }))
}

/// Loads every PNG/PPM in a directory as RGB, sorted by file name. The
/// ingestion path for a user-supplied background corpus.
pub fn read_image_dir<T: Scalar>(dir: &Path) -> Result<Vec<Tensor<T>>, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_rgb(p)).collect()
}

/// Index of a dataset directory: file paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub domain_tag: DomainTag,
    pub image: String,
    pub alpha: String,
    pub fg: String,
    pub bg: String,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, manifest)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// Writes samples as numbered PNGs plus `manifest.json`, returning the
/// manifest. Values are quantized to 8 bit; the compositing equation
/// holds only to that resolution after a round trip.
pub fn write_dataset<T: Scalar>(
    dir: &Path,
    samples: &[SyntheticSample<T>],
) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("sample_{i:04}");
        let entry = ManifestEntry {
            id: id.clone(),
            domain_tag: sample.domain_tag,
            image: format!("{id}_image.png"),
            alpha: format!("{id}_alpha.png"),
            fg: format!("{id}_fg.png"),
            bg: format!("{id}_bg.png"),
        };
        write_rgb(&dir.join(&entry.image), &sample.image)?;
        write_gray(&dir.join(&entry.alpha), sample.alpha_g.tensor())?;
        write_rgb(&dir.join(&entry.fg), &sample.fg)?;
        write_rgb(&dir.join(&entry.bg), &sample.bg)?;
        entries.push(entry);
    }
    let manifest = Manifest { samples: entries };
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Vec<SyntheticSample<T>>, DataError> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    manifest
        .samples
        .iter()
        .map(|entry| {
            SyntheticSample::from_parts(
                read_rgb(&dir.join(&entry.image))?,
                Matte::new(read_gray(&dir.join(&entry.alpha))?)?,
                read_rgb(&dir.join(&entry.fg))?,
                read_rgb(&dir.join(&entry.bg))?,
                entry.domain_tag,
            )
        })
        .collect()
}

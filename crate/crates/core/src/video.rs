//! Temporal flicker removal for matte sequences.
//!
//! A pixel flickers at frame t when its two temporal neighbors agree with
//! each other but both disagree with the current value. Such pixels are
//! replaced by the neighbor average. All decisions read the original
//! frames, never already-smoothed ones, so the filter is a pure one-pass
//! operator: the batch result equals what a streaming one-frame-delay
//! deployment produces, and frames could be processed in any order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::mattemath::{Matte, MatteMathError};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("a sequence needs at least one frame")]
    EmptySequence,

    #[error("frame {frame} has shape {got:?}, expected {expected:?}")]
    DimsMismatch { frame: usize, expected: Shape, got: Shape },

    #[error("xi must be strictly between 0 and 1, got {xi}")]
    BadXi { xi: f64 },

    #[error("frame {frame} is a batch of {n} mattes; image I/O needs single frames")]
    BatchedFrame { frame: usize, n: usize },

    #[error("missing {0} in frame directory")]
    MissingFrame(String),

    #[error(transparent)]
    Matte(#[from] MatteMathError),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flicker detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfdConfig {
    pub xi: f64,
}

impl Default for OfdConfig {
    fn default() -> Self {
        OfdConfig { xi: 0.1 }
    }
}

impl OfdConfig {
    pub fn new(xi: f64) -> Result<Self, VideoError> {
        let config = OfdConfig { xi };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(VideoError::BadXi { xi: self.xi });
        }
        Ok(())
    }
}

/// An ordered run of equally-sized mattes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatteSequence<T> {
    frames: Vec<Matte<T>>,
    fps: Option<f64>,
}

impl<T: Scalar> MatteSequence<T> {
    pub fn new(frames: Vec<Matte<T>>, fps: Option<f64>) -> Result<Self, VideoError> {
        let first = frames.first().ok_or(VideoError::EmptySequence)?;
        let expected = first.shape();
        for (frame, m) in frames.iter().enumerate() {
            if m.shape() != expected {
                return Err(VideoError::DimsMismatch { frame, expected, got: m.shape() });
            }
        }
        Ok(MatteSequence { frames, fps })
    }

    pub fn frames(&self) -> &[Matte<T>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Matte<T>> {
        self.frames
    }

    pub fn fps(&self) -> Option<f64> {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    /// Always false; kept for interface completeness.
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// The flicker condition: neighbors agree within `xi`, the current value
/// deviates from both by more than `xi`. Neighbor agreement is inclusive,
/// deviations are strict.
pub fn is_flicker<T: Scalar>(a_prev: T, a_cur: T, a_next: T, xi: T) -> bool {
    (a_prev - a_next).abs() <= xi && (a_cur - a_prev).abs() > xi && (a_cur - a_next).abs() > xi
}

/// Replaces flickering pixels of interior frames by their neighbor
/// average. Boundary frames lack a neighbor pair and pass through
/// unchanged, as do sequences shorter than three frames.
pub fn ofd_smooth<T: Scalar>(seq: &MatteSequence<T>, config: &OfdConfig) -> MatteSequence<T> {
    config.validate().expect("validated at construction");
    let xi = T::of_f64(config.xi);
    let half = T::of_f64(0.5);
    let frames = &seq.frames;
    let mut out = Vec::with_capacity(frames.len());
    for (t, cur) in frames.iter().enumerate() {
        if t == 0 || t + 1 == frames.len() {
            out.push(cur.clone());
            continue;
        }
        let prev = frames[t - 1].tensor().data();
        let next = frames[t + 1].tensor().data();
        let mut data = cur.tensor().data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            if is_flicker(prev[i], *v, next[i], xi) {
                *v = (prev[i] + next[i]) * half;
            }
        }
        let tensor = Tensor::from_vec(cur.shape(), data).expect("length preserved");
        out.push(Matte::new(tensor).expect("neighbor averages stay in [0,1]"));
    }
    MatteSequence { frames: out, fps: seq.fps }
}

fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes each frame as an 8-bit grayscale PNG named `frame_%05d.png`.
pub fn write_frames<T: Scalar>(seq: &MatteSequence<T>, dir: &Path) -> Result<(), VideoError> {
    fs::create_dir_all(dir)?;
    for (t, m) in seq.frames.iter().enumerate() {
        let s = m.shape();
        if s.n != 1 {
            return Err(VideoError::BatchedFrame { frame: t, n: s.n });
        }
        let mut img = image::GrayImage::new(s.w as u32, s.h as u32);
        for y in 0..s.h {
            for x in 0..s.w {
                let v = (m.at(0, y, x).into_f64() * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(dir.join(frame_file_name(t)))?;
    }
    Ok(())
}

/// Reads `frame_00000.png ..` back into a sequence; numbering must be
/// contiguous from zero. Pixels convert as v/255.
pub fn read_frames<T: Scalar>(dir: &Path) -> Result<MatteSequence<T>, VideoError> {
    let mut count = 0;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        if name.to_string_lossy().ends_with(".png") {
            count += 1;
        }
    }
    if count == 0 {
        return Err(VideoError::EmptySequence);
    }
    let mut frames = Vec::with_capacity(count);
    for t in 0..count {
        let path: PathBuf = dir.join(frame_file_name(t));
        if !path.exists() {
            return Err(VideoError::MissingFrame(frame_file_name(t)));
        }
        let img = image::open(&path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| T::of_f64(p.0[0] as f64 / 255.0)).collect();
        let tensor = Tensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data)
            .expect("pixel count matches dimensions");
        frames.push(Matte::new(tensor)?);
    }
    MatteSequence::new(frames, None)
}

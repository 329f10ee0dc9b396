//! Images, modalities and dense detector/descriptor maps.
//!
//! A [`DenseFeatureMap`] is the contract between whatever produces features
//! (the [`reference`] extractor here, or an external network through the
//! [`io`] interchange file) and the keypoint/matching pipeline.

pub mod io;
pub mod reference;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub use io::{load_feature_map, read_feature_map, save_feature_map, write_feature_map};
pub use reference::{reference_extract, ReferenceExtractorConfig};

/// Imaging modality of a retinal image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CF")]
    Cf,
    #[serde(rename = "FA")]
    Fa,
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "OCT")]
    Oct,
    #[serde(rename = "OCTA")]
    Octa,
    #[serde(rename = "SYNTH_A")]
    SynthA,
    #[serde(rename = "SYNTH_B")]
    SynthB,
}

impl Modality {
    pub const ALL: [Modality; 7] = [
        Modality::Cf,
        Modality::Fa,
        Modality::Ir,
        Modality::Oct,
        Modality::Octa,
        Modality::SynthA,
        Modality::SynthB,
    ];

    /// Modalities that show vessels bright and get inverted before feature
    /// extraction.
    pub fn is_inverted(self) -> bool {
        matches!(self, Modality::Fa | Modality::Oct | Modality::Octa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Cf => "CF",
            Modality::Fa => "FA",
            Modality::Ir => "IR",
            Modality::Oct => "OCT",
            Modality::Octa => "OCTA",
            Modality::SynthA => "SYNTH_A",
            Modality::SynthB => "SYNTH_B",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

/// Row-major interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    /// Single-channel image from a grid, clamping values into `[0, 1]`.
    pub fn from_grid(g: &Grid2) -> Self {
        Self {
            width: g.width,
            height: g.height,
            channels: 1,
            data: g.data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean as a grid.
    pub fn to_gray(&self) -> Grid2 {
        let c = self.channels;
        let data = self
            .data
            .chunks_exact(c)
            .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64)
            .collect();
        Grid2::from_vec(self.width, self.height, data)
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Reads an 8- or 16-bit grayscale or RGB(A) PNG; alpha is dropped.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
            |source| Error::Image {
                path: path.to_path_buf(),
                source,
            },
        )?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let out = if img.color().has_color() {
            let rgb = img.to_rgb32f();
            Self::new(w, h, 3, rgb.into_raw())
        } else {
            let gray = img.to_luma32f();
            Self::new(w, h, 1, gray.into_raw())
        };
        out.map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))
    }

    /// Writes an 8-bit PNG (gray or RGB, matching the channel count).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Inverts bright-vessel modalities so vessels are dark everywhere, and
/// replicates grayscale input to three channels.
pub fn preprocess_image(img: &ImageBuffer, modality: Modality) -> ImageBuffer {
    let rgb = img.to_rgb();
    if modality.is_inverted() {
        ImageBuffer {
            data: rgb.data.iter().map(|&v| 1.0 - v).collect(),
            ..rgb
        }
    } else {
        rgb
    }
}

/// Per-cell two-class detector logits plus a descriptor, on a grid with a
/// fixed stride relative to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    source_w: usize,
    source_h: usize,
    stride: usize,
    grid_w: usize,
    grid_h: usize,
    descriptor_dim: usize,
    /// Cell-major, channel-minor: vessel then background.
    detector_logits: Vec<f32>,
    /// Cell-major, dimension-minor.
    descriptors: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        source_w: usize,
        source_h: usize,
        stride: usize,
        descriptor_dim: usize,
        detector_logits: Vec<f32>,
        descriptors: Vec<f32>,
    ) -> Result<Self> {
        if stride == 0 || source_w == 0 || source_h == 0 {
            return Err(Error::DimensionMismatch(format!(
                "source {source_w}x{source_h}, stride {stride}"
            )));
        }
        if descriptor_dim < 2 {
            return Err(Error::DimensionMismatch(format!(
                "descriptor_dim {descriptor_dim} < 2"
            )));
        }
        let grid_w = source_w.div_ceil(stride);
        let grid_h = source_h.div_ceil(stride);
        let cells = grid_w * grid_h;
        if detector_logits.len() != cells * 2 {
            return Err(Error::DimensionMismatch(format!(
                "{} detector logits for {grid_w}x{grid_h}x2 grid",
                detector_logits.len()
            )));
        }
        if descriptors.len() != cells * descriptor_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} descriptor values for {grid_w}x{grid_h}x{descriptor_dim} grid",
                descriptors.len()
            )));
        }
        if detector_logits
            .iter()
            .chain(descriptors.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::DimensionMismatch(
                "feature map holds non-finite values".into(),
            ));
        }
        Ok(Self {
            source_w,
            source_h,
            stride,
            grid_w,
            grid_h,
            descriptor_dim,
            detector_logits,
            descriptors,
        })
    }

    pub fn source_w(&self) -> usize {
        self.source_w
    }
    pub fn source_h(&self) -> usize {
        self.source_h
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }
    pub fn detector_logits(&self) -> &[f32] {
        &self.detector_logits
    }
    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn vessel_logit(&self, gx: usize, gy: usize) -> f32 {
        self.detector_logits[(gy * self.grid_w + gx) * 2]
    }

    pub fn background_logit(&self, gx: usize, gy: usize) -> f32 {
        self.detector_logits[(gy * self.grid_w + gx) * 2 + 1]
    }

    pub fn descriptor(&self, gx: usize, gy: usize) -> &[f32] {
        let start = (gy * self.grid_w + gx) * self.descriptor_dim;
        &self.descriptors[start..start + self.descriptor_dim]
    }

    /// One detector channel (0 = vessel, 1 = background) as a grid.
    pub fn logit_channel(&self, channel: usize) -> Grid2 {
        assert!(channel < 2);
        let data = self
            .detector_logits
            .chunks_exact(2)
            .map(|c| f64::from(c[channel]))
            .collect();
        Grid2::from_vec(self.grid_w, self.grid_h, data)
    }

    /// Per-cell `vessel - background`.
    pub fn logit_difference(&self) -> Grid2 {
        let data = self
            .detector_logits
            .chunks_exact(2)
            .map(|c| f64::from(c[0]) - f64::from(c[1]))
            .collect();
        Grid2::from_vec(self.grid_w, self.grid_h, data)
    }
}

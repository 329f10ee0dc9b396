use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Class;
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::geometry::{Point2, CONTROL_POINT_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedKeypoint {
    pub x: f64,
    pub y: f64,
    pub class: Class,
}

impl AnnotatedKeypoint {
    pub fn pos(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// Keypoint correspondences with another image: `[i, j]` pairs keypoint `i`
/// here with keypoint `j` of `other`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub other: String,
    pub index_map: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-image annotation document. `image` is the image path relative to the
/// annotation file and doubles as the image id used by links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub image: String,
    pub modality: Modality,
    #[serde(default)]
    pub acquisition: String,
    #[serde(default)]
    pub keypoints: Vec<AnnotatedKeypoint>,
    #[serde(default)]
    pub control_points: Vec<Point2>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl AnnotationSet {
    /// Checks everything that does not need the image itself.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let schema = |msg: String| Error::Schema {
            path: path.display().to_string(),
            msg,
        };
        let bounds = |msg: String| Error::Bounds {
            path: path.display().to_string(),
            msg,
        };
        if self.image.is_empty() {
            return Err(schema("empty image path".into()));
        }
        let n_cp = self.control_points.len();
        if self.split == Some(Split::Test) && n_cp != CONTROL_POINT_COUNT {
            return Err(schema(format!(
                "test image needs {CONTROL_POINT_COUNT} control points, found {n_cp}"
            )));
        }
        if n_cp != 0 && n_cp != CONTROL_POINT_COUNT {
            return Err(schema(format!(
                "expected 0 or {CONTROL_POINT_COUNT} control points, found {n_cp}"
            )));
        }
        let points = self
            .keypoints
            .iter()
            .map(|k| k.pos())
            .chain(self.control_points.iter().copied());
        for p in points {
            if !p.is_finite() || p.x < 0.0 || p.y < 0.0 {
                return Err(bounds(format!(
                    "point ({}, {}) outside the image",
                    p.x, p.y
                )));
            }
        }
        for link in &self.links {
            if let Some([i, _]) = link
                .index_map
                .iter()
                .find(|[i, _]| *i >= self.keypoints.len())
            {
                return Err(schema(format!(
                    "link to {} references keypoint {i} of {}",
                    link.other,
                    self.keypoints.len()
                )));
            }
        }
        Ok(())
    }

    /// Checks that every point lies on the `width x height` pixel grid.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        let (xmax, ymax) = ((width as f64) - 1.0, (height as f64) - 1.0);
        let points = self
            .keypoints
            .iter()
            .map(|k| k.pos())
            .chain(self.control_points.iter().copied());
        for p in points {
            if p.x > xmax || p.y > ymax {
                return Err(Error::Bounds {
                    path: self.image.clone(),
                    msg: format!("point ({}, {}) outside {width}x{height}", p.x, p.y),
                });
            }
        }
        Ok(())
    }

    /// The image path resolved against the annotation file's directory.
    pub fn image_path(&self, annotation_path: &Path) -> PathBuf {
        annotation_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(&self.image)
    }

    pub fn link_to(&self, other: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.other == other)
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    set.validate(path)?;
    Ok(set)
}

pub fn save_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(set).expect("annotations serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

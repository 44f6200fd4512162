use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel coordinate with origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// The user's point supervision for one reference image.
///
/// Serialized as the annotation file schema:
/// `{ image, width, height, positive: {x, y}, negative: {x, y} | null, identifier }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub width: usize,
    pub height: usize,
    pub positive: Point,
    pub negative: Option<Point>,
    #[serde(default = "default_identifier")]
    pub identifier: String,
}

fn default_identifier() -> String {
    "[V]".to_string()
}

impl PointAnnotation {
    pub fn new(image_ref: impl Into<String>, dims: (usize, usize), positive: Point, negative: Option<Point>) -> Self {
        Self {
            image_ref: image_ref.into(),
            height: dims.0,
            width: dims.1,
            positive,
            negative,
            identifier: default_identifier(),
        }
    }

    /// `(H, W)`.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Annotation {
                code: "invalid_dimensions",
                message: format!("image dimensions {}x{} must be positive", self.height, self.width),
            });
        }
        for (label, p) in std::iter::once(("positive", self.positive)).chain(self.negative.map(|n| ("negative", n))) {
            if p.x >= self.width || p.y >= self.height {
                return Err(Error::Annotation {
                    code: "point_out_of_bounds",
                    message: format!(
                        "{label} point ({}, {}) outside {}x{} image",
                        p.x, p.y, self.width, self.height
                    ),
                });
            }
        }
        if self.negative == Some(self.positive) {
            return Err(Error::Annotation {
                code: "coincident_points",
                message: "positive and negative points must differ".into(),
            });
        }
        Ok(())
    }

    /// Stable id derived from the annotation contents.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("annotation serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ann: Self = serde_json::from_str(&text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_file_schema_with_null_negative() {
        let json = r#"{"image":"dog.png","width":64,"height":48,"positive":{"x":3,"y":4},"negative":null,"identifier":"sks"}"#;
        let ann: PointAnnotation = serde_json::from_str(json).unwrap();
        assert_eq!(ann.image_dims(), (48, 64));
        assert!(ann.negative.is_none());
        ann.validate().unwrap();
        let back = serde_json::to_string(&ann).unwrap();
        assert_eq!(back, json);
    }

    #[test]
    fn out_of_bounds_points_have_a_stable_code() {
        let ann = PointAnnotation::new("x", (10, 10), Point::new(10, 2), None);
        let err = ann.validate().unwrap_err();
        assert_eq!(err.code(), "point_out_of_bounds");
    }

    #[test]
    fn coincident_points_are_rejected() {
        let ann = PointAnnotation::new("x", (10, 10), Point::new(1, 2), Some(Point::new(1, 2)));
        assert_eq!(ann.validate().unwrap_err().code(), "coincident_points");
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::StoreError;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = StoreError;

            fn from_str(s: &str) -> Result<Self, StoreError> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(StoreError::Validation(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Expert,
    Annotator,
}
text_enum!(Role { Expert => "expert", Annotator => "annotator" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub name: String,
    pub role: Role,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub name: String,
    /// Working-resolution extent.
    pub width: u32,
    pub height: u32,
    /// Working → native multiplier.
    pub scale_factor: f64,
    /// Directory holding `<name>.dzi` and `<name>_files/`.
    pub pyramid_dir: String,
    pub tile_size: u32,
    pub overlap: u32,
    pub tile_format: String,
    /// JSON-encoded patch grid of the working-resolution raster.
    pub patch_grid: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub name: String,
    pub slide_names: Vec<String>,
    pub assigned_users: Vec<String>,
    pub dense: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Polygon,
    Point,
}
text_enum!(Kind { Polygon => "polygon", Point => "point" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Manual,
    Model,
}
text_enum!(Source { Manual => "manual", Model => "model" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validation {
    Pending,
    Accepted,
    Rejected,
}
text_enum!(Validation { Pending => "pending", Accepted => "accepted", Rejected => "rejected" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub line_color: String,
    pub line_thickness: f64,
    pub fill_color: String,
    pub fill_opacity: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            line_color: "#00ff00".into(),
            line_thickness: 1.0,
            fill_color: "#00ff00".into(),
            fill_opacity: 0.0,
        }
    }
}

fn is_hex_color(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].chars().all(|c| c.is_ascii_hexdigit())
}

impl Style {
    pub fn validate(&self) -> Result<(), StoreError> {
        if !is_hex_color(&self.line_color) || !is_hex_color(&self.fill_color) {
            return Err(StoreError::Validation("colors must be #rrggbb".into()));
        }
        if !(self.line_thickness > 0.0 && self.line_thickness.is_finite()) {
            return Err(StoreError::Validation("line_thickness must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fill_opacity) {
            return Err(StoreError::Validation("fill_opacity must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Client-supplied fields of a manual annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAnnotation {
    pub batch_name: String,
    pub slide_name: String,
    pub kind: Kind,
    /// Working-resolution coordinates; closed polygons repeat no vertex.
    pub geometry: Vec<(f64, f64)>,
    pub label: String,
    #[serde(default)]
    pub style: Option<Style>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: i64,
    pub batch_name: String,
    pub user_name: String,
    pub slide_name: String,
    pub kind: Kind,
    pub geometry: Vec<(f64, f64)>,
    pub label: String,
    pub source: Source,
    /// `None` for manual annotations, which need no review.
    pub validation: Option<Validation>,
    pub style: Style,
    /// Milliseconds since the Unix epoch.
    pub created_at: i64,
}

/// Checks vertex count and bounds against a `width × height` slide.
pub fn validate_geometry(kind: Kind, geometry: &[(f64, f64)], width: u32, height: u32) -> Result<(), StoreError> {
    match kind {
        Kind::Polygon if geometry.len() < 3 => {
            return Err(StoreError::Validation(format!(
                "a polygon needs at least 3 vertices, got {}",
                geometry.len()
            )))
        }
        Kind::Point if geometry.len() != 1 => {
            return Err(StoreError::Validation(format!(
                "a point has exactly 1 vertex, got {}",
                geometry.len()
            )))
        }
        _ => {}
    }
    let (w, h) = (width as f64, height as f64);
    if let Some((x, y)) = geometry
        .iter()
        .find(|(x, y)| !(x.is_finite() && y.is_finite() && (0.0..=w).contains(x) && (0.0..=h).contains(y)))
    {
        return Err(StoreError::Validation(format!(
            "vertex ({x}, {y}) outside the {width}x{height} slide"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsiLabel {
    pub slide_name: String,
    pub user_name: String,
    pub class_label: String,
    /// Percentage, 0–100.
    pub certainty: u8,
    pub observations: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSession {
    pub id: i64,
    pub user: String,
    pub slide: String,
    pub batch: String,
    pub opened_at: i64,
    pub closed_at: i64,
}

impl TimingSession {
    pub fn duration_ms(&self) -> i64 {
        self.closed_at - self.opened_at
    }
}

/// Everything needed to rebuild the annotation tables elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationExport {
    pub annotations: Vec<Annotation>,
    pub wsi_labels: Vec<WsiLabel>,
}

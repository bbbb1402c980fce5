//! Class palettes: id ↔ (name, color) mappings used for rendering and
//! decoding label maps. Ships with a 19-class urban-scene palette and a
//! 5-class synthetic palette.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SegMap, IGNORE_LABEL};

pub const CITYSCAPES19_JSON: &str = include_str!("../assets/cityscapes19.json");
pub const SYNTHETIC5_JSON: &str = include_str!("../assets/synthetic5.json");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Bijective mapping between class ids and RGB colors, plus a reserved
/// color for the ignore sentinel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassPalette {
    pub schema_version: u32,
    pub name: String,
    pub ignore_color: [u8; 3],
    pub classes: Vec<ClassDef>,
}

impl ClassPalette {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: ClassPalette = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    /// One of the palettes bundled with the crate: `cityscapes19` or
    /// `synthetic5`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cityscapes19" => Self::from_json_str(CITYSCAPES19_JSON),
            "synthetic5" => Self::from_json_str(SYNTHETIC5_JSON),
            other => Err(Error::Config(format!(
                "unknown builtin palette '{other}' (expected cityscapes19 or synthetic5)"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("palette has no classes".into()));
        }
        let mut seen = HashMap::new();
        for (i, c) in self.classes.iter().enumerate() {
            if usize::from(c.id) != i {
                return Err(Error::Config(format!(
                    "palette class ids must be 0..{} in order, got id {} at position {i}",
                    self.classes.len(),
                    c.id
                )));
            }
            if c.color == self.ignore_color {
                return Err(Error::Config(format!(
                    "class '{}' uses the reserved ignore color {:?}",
                    c.name, c.color
                )));
            }
            if let Some(prev) = seen.insert(c.color, c.id) {
                return Err(Error::Config(format!(
                    "classes {prev} and {} share color {:?}",
                    c.id, c.color
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn color_of(&self, label: u8) -> Result<[u8; 3]> {
        if label == IGNORE_LABEL {
            return Ok(self.ignore_color);
        }
        self.classes
            .get(usize::from(label))
            .map(|c| c.color)
            .ok_or_else(|| Error::Data(format!("label {label} missing from palette {}", self.name)))
    }

    pub fn class_name(&self, label: u8) -> &str {
        self.classes
            .get(usize::from(label))
            .map(|c| c.name.as_str())
            .unwrap_or("?")
    }
}

/// Render a label map as an RGB image using the palette colors; ignored
/// pixels get the reserved ignore color.
pub fn colorize(seg: &SegMap, palette: &ClassPalette) -> Result<image::RgbImage> {
    let (h, w) = (seg.height(), seg.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &l) in seg.labels().indexed_iter() {
        let c = palette.color_of(l)?;
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
    Ok(img)
}

/// Invert [`colorize`]: recover the label map from a palette-colored image.
pub fn decolorize(img: &image::RgbImage, palette: &ClassPalette) -> Result<SegMap> {
    let mut by_color: HashMap<[u8; 3], u8> = palette
        .classes
        .iter()
        .map(|c| (c.color, c.id))
        .collect();
    by_color.insert(palette.ignore_color, IGNORE_LABEL);
    let (w, h) = img.dimensions();
    let mut labels = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        let l = by_color.get(&px.0).ok_or_else(|| {
            Error::Data(format!(
                "color {:?} at pixel ({y}, {x}) is not in palette {}",
                px.0, palette.name
            ))
        })?;
        labels[[y as usize, x as usize]] = *l;
    }
    SegMap::new(labels, palette.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtins_parse() {
        let c = ClassPalette::builtin("cityscapes19").unwrap();
        assert_eq!(c.num_classes(), 19);
        let s = ClassPalette::builtin("synthetic5").unwrap();
        assert_eq!(s.num_classes(), 5);
        assert!(ClassPalette::builtin("nope").is_err());
    }

    #[test]
    fn constant_map_colorizes_uniformly() {
        let p = ClassPalette::builtin("cityscapes19").unwrap();
        let seg = SegMap::new(Array2::zeros((2, 2)), 19).unwrap();
        let img = colorize(&seg, &p).unwrap();
        for px in img.pixels() {
            assert_eq!(px.0, [128, 64, 128]);
        }
    }

    #[test]
    fn ignore_gets_reserved_color() {
        let p = ClassPalette::builtin("synthetic5").unwrap();
        let mut labels = Array2::zeros((2, 2));
        labels[[0, 1]] = IGNORE_LABEL;
        let seg = SegMap::new(labels, 5).unwrap();
        let img = colorize(&seg, &p).unwrap();
        assert_eq!(img.get_pixel(1, 0).0, p.ignore_color);
        assert_eq!(img.get_pixel(0, 0).0, [32, 32, 32]);
    }

    #[test]
    fn rejects_duplicate_colors() {
        let bad = r#"{
            "schema_version": 1, "name": "bad", "ignore_color": [0,0,0],
            "classes": [
                {"id": 0, "name": "a", "color": [1,2,3]},
                {"id": 1, "name": "b", "color": [1,2,3]}
            ]
        }"#;
        assert!(ClassPalette::from_json_str(bad).is_err());
    }

    proptest! {
        #[test]
        fn colorize_decolorize_roundtrip(seed in any::<[u8; 16]>()) {
            let p = ClassPalette::builtin("synthetic5").unwrap();
            let mut labels = Array2::zeros((6, 5));
            let mut k = 0usize;
            for v in labels.iter_mut() {
                let b = seed[k % 16].wrapping_add(k as u8);
                *v = if b % 7 == 6 { IGNORE_LABEL } else { b % 5 };
                k += 1;
            }
            let seg = SegMap::new(labels, 5).unwrap();
            let back = decolorize(&colorize(&seg, &p).unwrap(), &p).unwrap();
            prop_assert_eq!(back, seg);
        }
    }
}

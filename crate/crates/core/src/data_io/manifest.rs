use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::EmbeddingStore;
use crate::error::{Error, Result};

/// Square tile footprint in level-0 pixels. `x`/`y` may be negative for a
/// tile centred on a slide smaller than the tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoord {
    pub x: i64,
    pub y: i64,
    pub side: u32,
}

impl TileCoord {
    pub fn new(x: i64, y: i64, side: u32) -> Self {
        TileCoord { x, y, side }
    }

    pub fn intersects(&self, width: u64, height: u64) -> bool {
        let s = self.side as i64;
        self.side > 0
            && self.x < width as i64
            && self.y < height as i64
            && self.x + s > 0
            && self.y + s > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    #[serde(default)]
    pub label: Option<usize>,
    pub width_px: u64,
    pub height_px: u64,
    #[serde(default = "default_magnification")]
    pub magnification: f64,
    pub tile_coords: Vec<TileCoord>,
    pub store_path: String,
}

fn default_magnification() -> f64 {
    20.0
}

impl SlideManifest {
    /// Every tile footprint must overlap the slide rectangle.
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config(format!(
                "slide {} has zero extent",
                self.slide_id
            )));
        }
        for (i, t) in self.tile_coords.iter().enumerate() {
            if !t.intersects(self.width_px, self.height_px) {
                return Err(Error::Config(format!(
                    "slide {}: tile {i} at ({}, {}) side {} lies outside {}x{}",
                    self.slide_id, t.x, t.y, t.side, self.width_px, self.height_px
                )));
            }
        }
        Ok(())
    }

    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        if store.len() != self.tile_coords.len() {
            return Err(Error::Consistency(format!(
                "slide {}: {} tiles but {} embeddings in {}",
                self.slide_id,
                self.tile_coords.len(),
                store.len(),
                self.store_path
            )));
        }
        Ok(())
    }

    /// Resolves `store_path` relative to the directory holding the manifest.
    pub fn resolve_store(&self, manifest_path: &Path) -> std::path::PathBuf {
        let p = Path::new(&self.store_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SlideManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SlideManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(manifest: &SlideManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SlideManifest {
        SlideManifest {
            slide_id: "s1".into(),
            label: Some(2),
            width_px: 1000,
            height_px: 600,
            magnification: 20.0,
            tile_coords: vec![TileCoord::new(0, 0, 256), TileCoord::new(744, 344, 256)],
            store_path: "s1.cemb".into(),
        }
    }

    #[test]
    fn unknown_fields_ignored() {
        let json = r#"{"slide_id":"a","width_px":10,"height_px":10,"tile_coords":[{"x":0,"y":0,"side":4}],
                       "store_path":"a.cemb","scanner":"x"}"#;
        let m: SlideManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.label, None);
        m.validate().unwrap();
    }

    #[test]
    fn outside_tile_rejected() {
        let mut m = sample();
        m.tile_coords.push(TileCoord::new(1000, 0, 256));
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        m.tile_coords.pop();
        m.tile_coords.push(TileCoord::new(-300, -300, 256));
        assert!(m.validate().is_err());
        m.tile_coords.pop();
        m.tile_coords.push(TileCoord::new(-100, -100, 256));
        assert!(m.validate().is_ok());
    }

    #[test]
    fn store_count_mismatch() {
        let m = sample();
        let store = EmbeddingStore::new(4, false);
        assert!(matches!(m.check_store(&store), Err(Error::Consistency(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&sample(), &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), sample());
        assert_eq!(sample().resolve_store(&p), dir.path().join("s1.cemb"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn json_round_trip(
            id in "[a-z0-9_-]{1,12}",
            label in proptest::option::of(0usize..10),
            w in 1u64..100_000,
            h in 1u64..100_000,
            mag in 1.0f64..40.0,
            coords in prop::collection::vec((-500i64..500, -500i64..500, 1u32..600), 0..20),
        ) {
            let m = SlideManifest {
                slide_id: id,
                label,
                width_px: w,
                height_px: h,
                magnification: mag,
                tile_coords: coords.into_iter().map(|(x, y, s)| TileCoord::new(x, y, s)).collect(),
                store_path: "x.cemb".into(),
            };
            let text = serde_json::to_string(&m).unwrap();
            let back: SlideManifest = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}

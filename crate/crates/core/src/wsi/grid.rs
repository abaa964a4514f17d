use serde::{Deserialize, Serialize};

use super::tissue::TissueMask;
use crate::data_io::TileCoord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileInclusion {
    /// Keep a tile when its center pixel is tissue.
    #[default]
    Center,
    /// Keep a tile when at least half of its area is tissue.
    Area,
}

/// Non-overlapping `side`-pixel grid centered on the tissue bounding box,
/// filtered by `inclusion`. Tiles are listed row-major.
pub fn classification_tile_grid(
    mask: &TissueMask,
    side: usize,
    inclusion: TileInclusion,
) -> Result<Vec<TileCoord>> {
    if side == 0 {
        return Err(Error::InvalidArgument("tile side must be positive".into()));
    }
    let Some((x0, y0, x1, y1)) = mask.bbox() else {
        return Ok(Vec::new());
    };
    let axis = |lo: usize, hi: usize| {
        let n = (hi - lo).div_ceil(side);
        let start = lo as i64 - ((n * side) as i64 - (hi - lo) as i64) / 2;
        (0..n).map(move |i| start + (i * side) as i64)
    };
    let half = (side / 2) as i64;
    let mut tiles = Vec::new();
    for y in axis(y0, y1) {
        for x in axis(x0, x1) {
            let keep = match inclusion {
                TileInclusion::Center => mask.at_pixel(x + half, y + half),
                TileInclusion::Area => 2 * mask.tissue_pixels_in(x, y, side) >= side * side,
            };
            if keep {
                tiles.push(TileCoord::new(x, y, side as u32));
            }
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_tissue_four_tiles() {
        let m = TissueMask::from_fn(512, 512, 8, |_, _| true).unwrap();
        let t = classification_tile_grid(&m, 256, TileInclusion::Center).unwrap();
        let xy: Vec<(i64, i64)> = t.iter().map(|c| (c.x, c.y)).collect();
        assert_eq!(xy, vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
        assert_eq!(
            classification_tile_grid(&m, 256, TileInclusion::Area)
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn small_centered_tissue_one_tile() {
        // 64x64 px of tissue centered in a 512 slide
        let m = TissueMask::from_fn(512, 512, 8, |x, y| {
            (28..36).contains(&x) && (28..36).contains(&y)
        })
        .unwrap();
        let t = classification_tile_grid(&m, 256, TileInclusion::Center).unwrap();
        assert_eq!(t, vec![TileCoord::new(128, 128, 256)]);
        assert!(classification_tile_grid(&m, 256, TileInclusion::Area)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn empty_mask_no_tiles() {
        let m = TissueMask::empty(300, 300, 8).unwrap();
        assert!(classification_tile_grid(&m, 256, TileInclusion::Center)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn inclusion_rules_differ() {
        // left half plus two isolated cells; one sits under a tile center
        let m = TissueMask::from_fn(256, 256, 32, |x, y| {
            x < 4 || (x, y) == (6, 2) || (x, y) == (7, 7)
        })
        .unwrap();
        let center = classification_tile_grid(&m, 128, TileInclusion::Center).unwrap();
        let area = classification_tile_grid(&m, 128, TileInclusion::Area).unwrap();
        assert_eq!(center.len(), 3);
        assert_eq!(area.len(), 2);
        assert!(center.iter().all(|t| t.intersects(256, 256)));
    }
}

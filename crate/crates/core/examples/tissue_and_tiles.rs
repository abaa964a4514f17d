//! Render a synthetic slide, find its tissue and lay out tile grids. Writes
//! the slide, tissue mask and tile overlay to a directory (default: a fresh
//! temporary one).

use std::path::PathBuf;

use pathvl::data_io::{write_pgm, write_ppm};
use pathvl::segmentation::overlap_tile_grid;
use pathvl::wsi::{
    classification_slide, classification_tile_grid, segment_slide, TileInclusion, TissueClass,
    TissueParams,
};
use pathvl::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pathvl_tiles"));
    std::fs::create_dir_all(&out).map_err(|e| pathvl::Error::io(&out, e))?;

    let spec = classification_slide("demo", TissueClass::Tum, TissueClass::Str, 1024, 8, 11);
    let slide = spec.render()?;
    let params = TissueParams::default();
    let mask = segment_slide(&slide, &params)?;
    println!(
        "slide {}x{}, tissue mask {}x{} at downsample {}: {} tissue cells, bbox {:?}",
        slide.width(),
        slide.height(),
        mask.width,
        mask.height,
        mask.downsample,
        mask.count(),
        mask.bbox()
    );

    for inclusion in [TileInclusion::Center, TileInclusion::Area] {
        let grid = classification_tile_grid(&mask, 256, inclusion)?;
        println!("256 px grid, {inclusion:?}: {} tiles", grid.len());
    }
    for overlap in [0.0, 0.5, 0.75] {
        let grid = overlap_tile_grid(&mask, 224, overlap)?;
        println!("224 px grid, overlap {overlap}: {} tiles", grid.len());
    }

    let mut overlay = slide.clone();
    for t in classification_tile_grid(&mask, 256, TileInclusion::Center)? {
        let (x0, y0) = (t.x.max(0) as usize, t.y.max(0) as usize);
        let x1 = ((t.x + t.side as i64) as usize).min(slide.width()) - 1;
        let y1 = ((t.y + t.side as i64) as usize).min(slide.height()) - 1;
        for x in x0..=x1 {
            overlay.set_pixel(x, y0, [0, 0, 0]);
            overlay.set_pixel(x, y1, [0, 0, 0]);
        }
        for y in y0..=y1 {
            overlay.set_pixel(x0, y, [0, 0, 0]);
            overlay.set_pixel(x1, y, [0, 0, 0]);
        }
    }
    write_ppm(&slide, out.join("slide.ppm"))?;
    write_pgm(&mask.to_gray(), out.join("tissue.pgm"))?;
    write_ppm(&overlay, out.join("tiles.ppm"))?;
    println!(
        "wrote slide.ppm, tissue.pgm and tiles.ppm to {}",
        out.display()
    );
    Ok(())
}

//! Tile planning and the tile-pixel ↔ stage-µm transforms.

use flakescan_core::{BBox, Point, Polygon};
use serde::{Deserialize, Serialize};

use crate::error::ScanError;

pub const DEFAULT_OVERLAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedTile {
    /// Position in scan order.
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub id: String,
    /// Stage position: top-left corner of the field of view, µm.
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub region: BBox,
    pub fov_um: [f64; 2],
    pub overlap: f64,
    pub step_um: [f64; 2],
    /// Columns, rows.
    pub grid: [usize; 2],
    pub tiles: Vec<PlannedTile>,
}

fn tiles_along(extent: f64, fov: f64, step: f64) -> usize {
    // Guard against 4.000000001 becoming 5 through float noise.
    let span = (extent - fov) / step;
    (span - 1e-9).ceil().max(0.0) as usize + 1
}

/// Plan a snake-order scan of `region` with square or rectangular fields of
/// view. The last row and column may extend past the region.
pub fn plan_tiles(region: BBox, fov_um: [f64; 2], overlap: f64) -> Result<TilePlan, ScanError> {
    if !region.is_valid() || region.w <= 0.0 || region.h <= 0.0 {
        return Err(ScanError::Plan(format!("degenerate region {region:?}")));
    }
    if !(fov_um[0] > 0.0 && fov_um[1] > 0.0) {
        return Err(ScanError::Plan("field of view must be positive".into()));
    }
    if fov_um[0] > region.w || fov_um[1] > region.h {
        return Err(ScanError::Plan(format!(
            "field of view {}×{} µm exceeds region {}×{} µm",
            fov_um[0], fov_um[1], region.w, region.h
        )));
    }
    if !(0.0..=0.5).contains(&overlap) {
        return Err(ScanError::Plan(format!("overlap {overlap} outside [0, 0.5]")));
    }
    let step = [fov_um[0] * (1.0 - overlap), fov_um[1] * (1.0 - overlap)];
    let cols = tiles_along(region.w, fov_um[0], step[0]);
    let rows = tiles_along(region.h, fov_um[1], step[1]);
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for k in 0..cols {
            let col = if row % 2 == 0 { k } else { cols - 1 - k };
            tiles.push(PlannedTile {
                index: tiles.len(),
                row,
                col,
                id: flakescan_protocol::tile_id(row, col),
                position: Point::new(region.x + col as f64 * step[0], region.y + row as f64 * step[1]),
            });
        }
    }
    Ok(TilePlan {
        region,
        fov_um,
        overlap,
        step_um: step,
        grid: [cols, rows],
        tiles,
    })
}

impl TilePlan {
    /// Union of all fields of view.
    pub fn extent(&self) -> BBox {
        let [cols, rows] = self.grid;
        BBox::new(
            self.region.x,
            self.region.y,
            (cols - 1) as f64 * self.step_um[0] + self.fov_um[0],
            (rows - 1) as f64 * self.step_um[1] + self.fov_um[1],
        )
    }

    /// Stage positions the plan visits.
    pub fn stage_limits(&self) -> BBox {
        let [cols, rows] = self.grid;
        BBox::new(
            self.region.x,
            self.region.y,
            (cols - 1) as f64 * self.step_um[0],
            (rows - 1) as f64 * self.step_um[1],
        )
    }

    pub fn tile_rect(&self, tile: &PlannedTile) -> BBox {
        BBox::new(tile.position.x, tile.position.y, self.fov_um[0], self.fov_um[1])
    }

    /// Which sides of `tile` border another tile: left, top, right, bottom.
    pub fn interior_sides(&self, tile: &PlannedTile) -> [bool; 4] {
        let [cols, rows] = self.grid;
        [tile.col > 0, tile.row > 0, tile.col + 1 < cols, tile.row + 1 < rows]
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

pub fn pixel_to_stage(px: Point, tile_origin: Point, um_per_px: f64) -> Point {
    Point::new(tile_origin.x + px.x * um_per_px, tile_origin.y + px.y * um_per_px)
}

pub fn stage_to_pixel(um: Point, tile_origin: Point, um_per_px: f64) -> Point {
    Point::new((um.x - tile_origin.x) / um_per_px, (um.y - tile_origin.y) / um_per_px)
}

pub fn polygon_to_stage(poly: &Polygon, tile_origin: Point, um_per_px: f64) -> Polygon {
    poly.map_points(|p| pixel_to_stage(p, tile_origin, um_per_px))
}

pub fn bbox_to_stage(b: &BBox, tile_origin: Point, um_per_px: f64) -> BBox {
    let p = pixel_to_stage(Point::new(b.x, b.y), tile_origin, um_per_px);
    BBox::new(p.x, p.y, b.w * um_per_px, b.h * um_per_px)
}

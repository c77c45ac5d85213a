//! Grid and pixel geometry shared by the prompting, reward and simulator
//! modules, plus the waypoint file format.
//!
//! The top-down image is divided into `cols x rows` tiles; the side view is
//! divided into `height_levels` evenly spaced horizontal bands with level 0
//! nearest the table. Indices are zero based.

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("block ({x}, {y}, {z}) is outside a {cols}x{rows}x{levels} grid")]
    OutOfBounds {
        x: i64,
        y: i64,
        z: i64,
        cols: usize,
        rows: usize,
        levels: usize,
    },
    #[error("block sequence needs at least 2 blocks, got {0}")]
    TooShort(usize),
    #[error("blocks {0} and {1} are identical")]
    RepeatedBlock(usize, usize),
    #[error("parse error at {position}: {message}")]
    Parse { position: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_width: u32,
    pub image_height: u32,
    pub cols: usize,
    pub rows: usize,
    pub height_levels: usize,
}

impl GridSpec {
    pub fn new(
        image_width: u32,
        image_height: u32,
        cols: usize,
        rows: usize,
        height_levels: usize,
    ) -> Result<Self, GeometryError> {
        if image_width == 0 || image_height == 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "image dimensions must be positive, got {image_width}x{image_height}"
            )));
        }
        if cols < 2 || rows < 2 || height_levels < 2 {
            return Err(GeometryError::InvalidGrid(format!(
                "need at least 2 columns, rows and height levels, got {cols}x{rows}x{height_levels}"
            )));
        }
        Ok(Self {
            image_width,
            image_height,
            cols,
            rows,
            height_levels,
        })
    }

    /// 6x6 tiles and 6 height levels over an image of the given size.
    pub fn with_image(image_width: u32, image_height: u32) -> Result<Self, GeometryError> {
        Self::new(image_width, image_height, 6, 6, 6)
    }

    pub fn contains(&self, b: WaypointBlock) -> bool {
        b.x < self.cols && b.y < self.rows && b.z < self.height_levels
    }

    fn check(&self, x: i64, y: i64, z: i64) -> Result<WaypointBlock, GeometryError> {
        let inside = |v: i64, n: usize| v >= 0 && (v as u64) < n as u64;
        if inside(x, self.cols) && inside(y, self.rows) && inside(z, self.height_levels) {
            Ok(WaypointBlock::new(x as usize, y as usize, z as usize))
        } else {
            Err(GeometryError::OutOfBounds {
                x,
                y,
                z,
                cols: self.cols,
                rows: self.rows,
                levels: self.height_levels,
            })
        }
    }

    pub fn tile_width(&self) -> f64 {
        self.image_width as f64 / self.cols as f64
    }

    pub fn tile_height(&self) -> f64 {
        self.image_height as f64 / self.rows as f64
    }

    pub fn level_spacing(&self) -> f64 {
        self.image_height as f64 / self.height_levels as f64
    }

    /// Tile containing a top-down pixel, clamped to the grid.
    pub fn cell_of(&self, u: f64, v: f64) -> (usize, usize) {
        let clamp = |p: f64, size: f64, n: usize| ((p / size).floor().max(0.0) as usize).min(n - 1);
        (
            clamp(u, self.tile_width(), self.cols),
            clamp(v, self.tile_height(), self.rows),
        )
    }

    /// Height band containing a side-view pixel row, clamped to the grid.
    pub fn level_of(&self, w: f64) -> usize {
        ((w / self.level_spacing()).floor().max(0.0) as usize).min(self.height_levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WaypointBlock {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl WaypointBlock {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }
}

/// Ordered coarse trajectory of grid blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSequence {
    blocks: Vec<WaypointBlock>,
}

impl BlockSequence {
    pub fn new(blocks: Vec<WaypointBlock>) -> Result<Self, GeometryError> {
        if blocks.len() < 2 {
            return Err(GeometryError::TooShort(blocks.len()));
        }
        if let Some(i) = blocks.windows(2).position(|w| w[0] == w[1]) {
            return Err(GeometryError::RepeatedBlock(i, i + 1));
        }
        Ok(Self { blocks })
    }

    /// Like [`BlockSequence::new`] but also checks every block against `grid`.
    pub fn new_in(blocks: Vec<WaypointBlock>, grid: &GridSpec) -> Result<Self, GeometryError> {
        let seq = Self::new(blocks)?;
        seq.validate(grid)?;
        Ok(seq)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), GeometryError> {
        for b in &self.blocks {
            grid.check(b.x as i64, b.y as i64, b.z as i64)?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[WaypointBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn first(&self) -> WaypointBlock {
        self.blocks[0]
    }

    pub fn last(&self) -> WaypointBlock {
        self.blocks[self.blocks.len() - 1]
    }
}

/// A point in the combined image space: `u, v` from the top-down view and `w`
/// (height) from the side view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint3 {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl PixelPoint3 {
    pub const fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }

    pub fn distance(&self, other: &PixelPoint3) -> f64 {
        let (du, dv, dw) = (self.u - other.u, self.v - other.v, self.w - other.w);
        (du * du + dv * dv + dw * dw).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.w.is_finite()
    }
}

pub fn cell_centroid(grid: &GridSpec, x: usize, y: usize) -> Result<(f64, f64), GeometryError> {
    grid.check(x as i64, y as i64, 0)?;
    Ok((
        (x as f64 + 0.5) * grid.tile_width(),
        (y as f64 + 0.5) * grid.tile_height(),
    ))
}

pub fn height_to_pixel(grid: &GridSpec, z: usize) -> Result<f64, GeometryError> {
    grid.check(0, 0, z as i64)?;
    Ok((z as f64 + 0.5) * grid.level_spacing())
}

pub fn block_to_pixel3(grid: &GridSpec, b: WaypointBlock) -> Result<PixelPoint3, GeometryError> {
    let (u, v) = cell_centroid(grid, b.x, b.y)?;
    let w = height_to_pixel(grid, b.z)?;
    Ok(PixelPoint3 { u, v, w })
}

/// Pixel centroids of every block in `seq`. The sequence must be valid for `grid`.
pub fn sequence_pixels(grid: &GridSpec, seq: &BlockSequence) -> Result<Vec<PixelPoint3>, GeometryError> {
    seq.blocks().iter().map(|&b| block_to_pixel3(grid, b)).collect()
}

pub fn serialize_sequence(seq: &BlockSequence) -> String {
    let triples: Vec<[usize; 3]> = seq.blocks.iter().map(|b| [b.x, b.y, b.z]).collect();
    serde_json::to_string(&triples).expect("integer triples always serialize")
}

/// Parses a waypoint file: a JSON array of `[x, y, z]` integer triples,
/// optionally wrapped as `{"block_sequence": [...]}`.
pub fn parse_sequence(text: &str, grid: &GridSpec) -> Result<BlockSequence, GeometryError> {
    let value: Value = serde_json::from_str(text).map_err(|e| GeometryError::Parse {
        position: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    sequence_from_value(&value, grid)
}

pub(crate) fn sequence_from_value(value: &Value, grid: &GridSpec) -> Result<BlockSequence, GeometryError> {
    let array = match value {
        Value::Array(a) => a,
        Value::Object(map) => match map.get("block_sequence") {
            Some(Value::Array(a)) => a,
            _ => {
                return Err(GeometryError::Parse {
                    position: "top level".into(),
                    message: "expected an array or an object with a \"block_sequence\" array".into(),
                })
            }
        },
        _ => {
            return Err(GeometryError::Parse {
                position: "top level".into(),
                message: "expected a JSON array of [x, y, z] triples".into(),
            })
        }
    };
    let mut blocks = Vec::with_capacity(array.len());
    for (i, item) in array.iter().enumerate() {
        let triple = item
            .as_array()
            .filter(|t| t.len() == 3)
            .and_then(|t| t.iter().map(Value::as_i64).collect::<Option<Vec<i64>>>())
            .ok_or_else(|| GeometryError::Parse {
                position: format!("element {i}"),
                message: format!("expected an [x, y, z] integer triple, got {item}"),
            })?;
        blocks.push(grid.check(triple[0], triple[1], triple[2])?);
    }
    BlockSequence::new(blocks)
}

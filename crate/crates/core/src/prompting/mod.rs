//! Visual prompts and waypoint providers.
//!
//! An annotation overlays a labeled grid and sampled grasp (`P1..P5`) and
//! target (`Q1..Q5`) keypoints on a top-down raster, and labeled height lines
//! on a side-view raster. A [`WaypointProvider`] turns an annotation and an
//! instruction into a [`BlockSequence`].

pub mod raster;
mod remote;

pub use remote::{extract_first_array, EndpointConfig, RemoteProvider, METAPROMPT_TEMPLATE, METAPROMPT_VERSION};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    height_to_pixel, parse_sequence, serialize_sequence, BlockSequence, GeometryError, GridSpec, WaypointBlock,
};
use crate::seed::mix;
use crate::sim::{Point3, Projection, TaskSpec, WorldState};
use raster::{disk_pixels, Raster};

/// Radius of the synthesized object masks, pixels.
pub const MASK_RADIUS: f64 = 8.0;
/// Candidates sampled per mask.
pub const CANDIDATES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("keypoint mask is empty")]
    EmptyMask,
    #[error("object {0} is not in the scene")]
    MissingObject(u32),
    #[error("annotation has no {0} candidates")]
    NoCandidates(&'static str),
    #[error("invalid waypoint sequence: {0}")]
    Invalid(#[from] GeometryError),
    #[error("waypoint file {path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("endpoint request failed: {0}")]
    Network(String),
    #[error("endpoint response malformed: {0}")]
    Response(String),
    #[error("no valid waypoint sequence after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("image encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    Object(u32),
    TargetRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointCandidate {
    pub label: String,
    pub pixel: (f64, f64),
    pub source: KeypointSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideLine {
    pub level: usize,
    pub label: String,
    /// Image row of the line (height increases upward).
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub center: (f64, f64),
    pub radius: f64,
    pub pixels: Vec<(usize, usize)>,
}

impl Mask {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (x, y) = (p.0.floor() as usize, p.1.floor() as usize);
        self.pixels.binary_search_by(|&(px, py)| (py, px).cmp(&(y, x))).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObservation {
    pub grid: GridSpec,
    pub grasp_mask: Mask,
    pub target_mask: Mask,
    pub candidates: Vec<KeypointCandidate>,
    /// Pixel columns of interior vertical grid lines.
    pub vertical_lines: Vec<usize>,
    /// Pixel rows of interior horizontal grid lines.
    pub horizontal_lines: Vec<usize>,
    pub side_lines: Vec<SideLine>,
    pub rendered_top: Raster,
    pub rendered_side: Raster,
}

impl AnnotatedObservation {
    pub fn grasp_candidates(&self) -> impl Iterator<Item = &KeypointCandidate> {
        self.candidates
            .iter()
            .filter(|c| matches!(c.source, KeypointSource::Object(_)))
    }

    pub fn target_candidates(&self) -> impl Iterator<Item = &KeypointCandidate> {
        self.candidates
            .iter()
            .filter(|c| c.source == KeypointSource::TargetRegion)
    }
}

/// Column label as drawn on the overlay: `A`, `B`, ...
pub fn column_label(x: usize) -> String {
    if x < 26 {
        ((b'A' + x as u8) as char).to_string()
    } else {
        format!("C{x}")
    }
}

/// Row label as drawn on the overlay: `1`, `2`, ...
pub fn row_label(y: usize) -> String {
    (y + 1).to_string()
}

/// `n` mask pixels (as pixel centers) drawn without replacement, or with
/// replacement when the mask is smaller than `n`.
pub fn sample_keypoints(mask: &[(usize, usize)], n: usize, seed: u64) -> Result<Vec<(f64, f64)>, PromptError> {
    if mask.is_empty() {
        return Err(PromptError::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |&(x, y): &(usize, usize)| (x as f64 + 0.5, y as f64 + 0.5);
    Ok(if mask.len() >= n {
        sample(&mut rng, mask.len(), n)
            .into_iter()
            .map(|i| center(&mask[i]))
            .collect()
    } else {
        (0..n).map(|_| center(&mask[rng.random_range(0..mask.len())])).collect()
    })
}

/// Builds the two annotated views for `task` from `state`.
pub fn build_annotation(
    state: &WorldState,
    task: &TaskSpec,
    proj: &Projection,
    grid: &GridSpec,
    seed: u64,
) -> Result<AnnotatedObservation, PromptError> {
    let (w, h) = (grid.image_width as usize, grid.image_height as usize);
    let obj = state
        .object(task.object_id)
        .ok_or(PromptError::MissingObject(task.object_id))?;
    let obj_px = proj.point(&obj.position);
    let [tx, ty] = task.target.center;
    let target_px = proj.point(&Point3::new(tx, ty, 0.0));
    let target_radius = proj.top[0][0].abs() * task.target.radius;

    let mask = |u: f64, v: f64| Mask {
        center: (u, v),
        radius: MASK_RADIUS,
        pixels: disk_pixels(u, v, MASK_RADIUS, w, h),
    };
    let grasp_mask = mask(obj_px.u, obj_px.v);
    let target_mask = mask(target_px.u, target_px.v);

    let mut candidates = Vec::with_capacity(2 * CANDIDATES);
    for (i, p) in sample_keypoints(&grasp_mask.pixels, CANDIDATES, mix(seed, 0))?
        .into_iter()
        .enumerate()
    {
        candidates.push(KeypointCandidate {
            label: format!("P{}", i + 1),
            pixel: p,
            source: KeypointSource::Object(obj.id),
        });
    }
    for (i, p) in sample_keypoints(&target_mask.pixels, CANDIDATES, mix(seed, 1))?
        .into_iter()
        .enumerate()
    {
        candidates.push(KeypointCandidate {
            label: format!("Q{}", i + 1),
            pixel: p,
            source: KeypointSource::TargetRegion,
        });
    }

    let vertical_lines: Vec<usize> = (1..grid.cols)
        .map(|i| (i as f64 * grid.tile_width()).round() as usize)
        .collect();
    let horizontal_lines: Vec<usize> = (1..grid.rows)
        .map(|j| (j as f64 * grid.tile_height()).round() as usize)
        .collect();

    // Top-down view.
    let mut top = Raster::new(w, h, raster::TABLE);
    top.circle(target_px.u, target_px.v, target_radius, raster::BIN);
    for (x, y) in &grasp_mask.pixels {
        top.set(*x as i64, *y as i64, raster::OBJECT);
    }
    let robot = proj.point(&state.effector);
    top.fill_disk(robot.u, robot.v, 2.0, raster::ROBOT);
    for &x in &vertical_lines {
        top.vline(x as i64, raster::GRID);
    }
    for &y in &horizontal_lines {
        top.hline(y as i64, raster::GRID);
    }
    for x in 0..grid.cols {
        top.text(
            (x as f64 * grid.tile_width()) as i64 + 1,
            1,
            &column_label(x),
            raster::BLACK,
        );
    }
    for y in 0..grid.rows {
        top.text(
            1,
            (y as f64 * grid.tile_height()) as i64 + 7,
            &row_label(y),
            raster::BLACK,
        );
    }
    for c in &candidates {
        let color = match c.source {
            KeypointSource::Object(_) => raster::GRASP_MARK,
            KeypointSource::TargetRegion => raster::TARGET_MARK,
        };
        let (x, y) = (c.pixel.0.floor() as i64, c.pixel.1.floor() as i64);
        top.set(x, y, color);
        top.text(x + 1, y + 1, &c.label, color);
    }

    // Side view: horizontal axis from the side map, height upward.
    let mut side = Raster::new(w, h, raster::WHITE);
    let row_of = |wpx: f64| ((h as f64 - wpx).round().max(0.0) as usize).min(h.saturating_sub(1));
    let side_lines = (0..grid.height_levels)
        .map(|z| {
            let row = row_of(height_to_pixel(grid, z)?);
            Ok(SideLine {
                level: z,
                label: z.to_string(),
                row,
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    for l in &side_lines {
        side.hline(l.row as i64, raster::GRID);
        side.text(1, l.row as i64 - 6, &l.label, raster::BLACK);
    }
    let obj_s = proj.side_horizontal(&obj.position);
    side.fill_disk(obj_s, h as f64 - obj_px.w, MASK_RADIUS / 2.0, raster::OBJECT);
    side.fill_disk(
        proj.side_horizontal(&state.effector),
        h as f64 - robot.w,
        2.0,
        raster::ROBOT,
    );

    Ok(AnnotatedObservation {
        grid: *grid,
        grasp_mask,
        target_mask,
        candidates,
        vertical_lines,
        horizontal_lines,
        side_lines,
        rendered_top: top,
        rendered_side: side,
    })
}

/// 4-connected cell path from `a` to `b`. Each step moves one cell along x
/// or y, whichever lands closer to the ideal straight line (x on ties).
pub fn cell_line(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let (x0, y0) = (a.0 as f64, a.1 as f64);
    let (dx, dy) = (b.0 as f64 - x0, b.1 as f64 - y0);
    let norm = (dx * dx + dy * dy).sqrt();
    let off_line = |x: usize, y: usize| {
        if norm == 0.0 {
            0.0
        } else {
            (dx * (y as f64 - y0) - dy * (x as f64 - x0)).abs() / norm
        }
    };
    let step = |from: usize, to: usize| if to > from { from + 1 } else { from - 1 };
    let mut cur = a;
    let mut path = vec![cur];
    while cur != b {
        let by_x = (cur.0 != b.0).then(|| (step(cur.0, b.0), cur.1));
        let by_y = (cur.1 != b.1).then(|| (cur.0, step(cur.1, b.1)));
        cur = match (by_x, by_y) {
            (Some(px), Some(py)) => {
                if off_line(px.0, px.1) <= off_line(py.0, py.1) {
                    px
                } else {
                    py
                }
            }
            (Some(p), None) | (None, Some(p)) => p,
            (None, None) => unreachable!("loop exits when cur == b"),
        };
        path.push(cur);
    }
    path
}

/// Pick-transport-place sequence: grasp cell low, grasp cell lifted, cell
/// line at lift height, target cell low.
pub fn pick_place_sequence(
    grasp: (usize, usize),
    target: (usize, usize),
    z_low: usize,
    z_lift: usize,
    grid: &GridSpec,
) -> Result<BlockSequence, GeometryError> {
    let mut blocks = vec![WaypointBlock::new(grasp.0, grasp.1, z_low)];
    blocks.extend(
        cell_line(grasp, target)
            .into_iter()
            .map(|(x, y)| WaypointBlock::new(x, y, z_lift)),
    );
    blocks.push(WaypointBlock::new(target.0, target.1, z_low));
    blocks.dedup();
    BlockSequence::new_in(blocks, grid)
}

pub trait WaypointProvider {
    fn name(&self) -> &str;
    fn query(&mut self, annotation: &AnnotatedObservation, instruction: &str) -> Result<BlockSequence, PromptError>;
}

/// Network-free provider: grasp and target cells of the candidate means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleProvider {
    pub z_low: usize,
    pub z_lift: usize,
}

impl Default for OracleProvider {
    fn default() -> Self {
        Self { z_low: 0, z_lift: 1 }
    }
}

fn mean_pixel<'a>(c: impl Iterator<Item = &'a KeypointCandidate>) -> Option<(f64, f64)> {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for k in c {
        su += k.pixel.0;
        sv += k.pixel.1;
        n += 1;
    }
    (n > 0).then(|| (su / n as f64, sv / n as f64))
}

pub fn oracle_waypoints(
    annotation: &AnnotatedObservation,
    grid: &GridSpec,
    z_low: usize,
    z_lift: usize,
) -> Result<BlockSequence, PromptError> {
    let g = mean_pixel(annotation.grasp_candidates()).ok_or(PromptError::NoCandidates("grasp"))?;
    let t = mean_pixel(annotation.target_candidates()).ok_or(PromptError::NoCandidates("target"))?;
    Ok(pick_place_sequence(
        grid.cell_of(g.0, g.1),
        grid.cell_of(t.0, t.1),
        z_low,
        z_lift,
        grid,
    )?)
}

impl WaypointProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn query(&mut self, annotation: &AnnotatedObservation, _instruction: &str) -> Result<BlockSequence, PromptError> {
        oracle_waypoints(annotation, &annotation.grid, self.z_low, self.z_lift)
    }
}

/// Reads a waypoint file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileProvider {
    pub path: PathBuf,
}

impl WaypointProvider for FileProvider {
    fn name(&self) -> &str {
        "file"
    }

    fn query(&mut self, annotation: &AnnotatedObservation, _instruction: &str) -> Result<BlockSequence, PromptError> {
        let text = fs::read_to_string(&self.path).map_err(|e| PromptError::File {
            path: self.path.clone(),
            source: e,
        })?;
        Ok(parse_sequence(&text, &annotation.grid)?)
    }
}

fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

/// Returns the cached sequence at `cache_path` when it parses against the
/// annotation's grid; otherwise queries `provider` and writes the cache.
pub fn cached_query(
    provider: &mut dyn WaypointProvider,
    cache_path: &Path,
    annotation: &AnnotatedObservation,
    instruction: &str,
) -> Result<BlockSequence, PromptError> {
    if let Ok(text) = fs::read_to_string(cache_path) {
        if let Ok(seq) = parse_sequence(&text, &annotation.grid) {
            return Ok(seq);
        }
    }
    let seq = provider.query(annotation, instruction)?;
    write_atomic(cache_path, &serialize_sequence(&seq)).map_err(|e| PromptError::File {
        path: cache_path.to_path_buf(),
        source: e,
    })?;
    Ok(seq)
}

//! Python bindings: the reward kernel, waypoint parsing and the experiment
//! runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use waypoint_rl::geometry::{parse_sequence, serialize_sequence, BlockSequence, GridSpec, PixelPoint3, WaypointBlock};
use waypoint_rl::harness::{run_experiment as run, ExperimentConfig};
use waypoint_rl::reward::{combine, dense_reward as dense, shaped_reward, RewardParams};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid(width: u32, height: u32) -> PyResult<GridSpec> {
    GridSpec::with_image(width, height).map_err(value_err)
}

fn sequence(blocks: Vec<(usize, usize, usize)>, grid: &GridSpec) -> PyResult<BlockSequence> {
    BlockSequence::new_in(
        blocks
            .into_iter()
            .map(|(x, y, z)| WaypointBlock::new(x, y, z))
            .collect(),
        grid,
    )
    .map_err(value_err)
}

/// `0.5 * (1 - tanh(lambda * (distance - phi)))`.
#[pyfunction]
#[pyo3(signature = (distance, lam = 0.1, phi = 15.0))]
fn kernel(distance: f64, lam: f64, phi: f64) -> f64 {
    shaped_reward(distance, lam, phi)
}

/// 1 when the sparse reward fires, otherwise the dense reward.
#[pyfunction]
fn combined_reward(r_sparse: u8, r_dense: f64) -> PyResult<f64> {
    if r_sparse > 1 {
        return Err(PyValueError::new_err("r_sparse must be 0 or 1"));
    }
    Ok(combine(r_sparse, r_dense))
}

/// Parses waypoint-file JSON into `(x, y, z)` blocks on the default grid
/// over an image of the given size.
#[pyfunction]
#[pyo3(signature = (text, width = 100, height = 100))]
fn parse_waypoints(text: &str, width: u32, height: u32) -> PyResult<Vec<(usize, usize, usize)>> {
    let seq = parse_sequence(text, &grid(width, height)?).map_err(value_err)?;
    Ok(seq.blocks().iter().map(|b| (b.x, b.y, b.z)).collect())
}

#[pyfunction]
#[pyo3(signature = (blocks, width = 100, height = 100))]
fn serialize_waypoints(blocks: Vec<(usize, usize, usize)>, width: u32, height: u32) -> PyResult<String> {
    Ok(serialize_sequence(&sequence(blocks, &grid(width, height)?)?))
}

/// `(r_dense, nearest_index, target_index, distance)` for a pixel point.
#[pyfunction]
#[pyo3(signature = (point, blocks, width = 100, height = 100, lam = 0.1, phi = 15.0))]
fn dense_reward(
    point: (f64, f64, f64),
    blocks: Vec<(usize, usize, usize)>,
    width: u32,
    height: u32,
    lam: f64,
    phi: f64,
) -> PyResult<(f64, usize, usize, f64)> {
    let grid = grid(width, height)?;
    let seq = sequence(blocks, &grid)?;
    let params = RewardParams::new(lam, phi, grid).map_err(value_err)?;
    let r = dense(&PixelPoint3::new(point.0, point.1, point.2), &seq, &params).map_err(value_err)?;
    Ok((r.r_dense, r.nearest_index, r.target_index, r.distance))
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Raises `ValueError` listing every invalid field.
#[pyfunction]
fn validate_config(toml: &str) -> PyResult<()> {
    ExperimentConfig::from_toml(toml).map(|_| ()).map_err(value_err)
}

/// Trains every configured seed and writes artifacts under `out_dir`.
/// Returns `(seed, formulation, pretrained_success, final_success)` rows.
#[pyfunction]
fn run_experiment(py: Python<'_>, toml: &str, out_dir: PathBuf) -> PyResult<Vec<(u64, String, f64, f64)>> {
    let cfg = ExperimentConfig::from_toml(toml).map_err(value_err)?;
    let runs = py
        .detach(|| run(&cfg, &out_dir))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(runs
        .into_iter()
        .map(|r| {
            (
                r.seed,
                r.formulation.as_str().to_string(),
                r.pretrained_success,
                r.final_success,
            )
        })
        .collect())
}

#[pymodule]
fn waypoint_rl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add_function(wrap_pyfunction!(combined_reward, m)?)?;
    m.add_function(wrap_pyfunction!(parse_waypoints, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_waypoints, m)?)?;
    m.add_function(wrap_pyfunction!(dense_reward, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

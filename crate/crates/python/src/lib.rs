use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use neufmt_core::kv::KvConfig;
use neufmt_core::metrics::{dice as dice_core, ThresholdPolicy};
use neufmt_core::phantoms::{read_bundle, simulate_scene, SceneOptions, ScenePreset, DEFAULT_EDGE_LEN};
use neufmt_core::pipeline::{desk_config, grid_dice as grid_dice_core, metrics_grid, run_method, BaselineConfig, Method, BASELINE_KEYS};
use neufmt_core::recon::CONFIG_KEYS;

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Names accepted by `simulate`.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    ScenePreset::names()
}

/// Names accepted by `reconstruct`.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

/// Simulates a preset scene; writes the bundle to `out` when given.
#[pyfunction]
#[pyo3(signature = (preset, out=None, edge=DEFAULT_EDGE_LEN, noise=0.0, seed=0, source_grid=8, detector_grid=16))]
fn simulate<'py>(
    py: Python<'py>,
    preset: &str,
    out: Option<PathBuf>,
    edge: f64,
    noise: f64,
    seed: u64,
    source_grid: usize,
    detector_grid: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let preset = ScenePreset::parse(preset).map_err(value)?;
    let scene = simulate_scene(preset, &SceneOptions { edge_len: edge, noise, seed, source_grid, detector_grid }).map_err(runtime)?;
    if let Some(dir) = out {
        scene.write_bundle(&dir).map_err(runtime)?;
    }
    let d = PyDict::new(py);
    d.set_item("preset", preset.name())?;
    d.set_item("nodes", scene.mesh.nodes().to_vec())?;
    d.set_item("truth", scene.truth.clone())?;
    let rows: Vec<Vec<f64>> = scene.measurements.m.rows().into_iter().map(|r| r.to_vec()).collect();
    d.set_item("measurements", rows)?;
    Ok(d)
}

/// Reconstructs a scene bundle. `config` maps setting names to values, as
/// in the command-line `--set` overrides.
#[pyfunction]
#[pyo3(signature = (scene, method, config=None))]
fn reconstruct<'py>(py: Python<'py>, scene: PathBuf, method: &str, config: Option<HashMap<String, Bound<'py, PyAny>>>) -> PyResult<Bound<'py, PyDict>> {
    let method = Method::parse(method).ok_or_else(|| value(format!("unknown method `{method}`")))?;
    let mut recon_kv = KvConfig::new();
    let mut base_kv = KvConfig::new();
    for (k, v) in config.unwrap_or_default() {
        let v = v.str()?.to_string();
        if CONFIG_KEYS.contains(&k.as_str()) {
            recon_kv.set(&k, v);
        } else if BASELINE_KEYS.contains(&k.as_str()) {
            base_kv.set(&k, v);
        } else {
            return Err(value(format!("unknown config key `{k}`")));
        }
    }
    let bundle = read_bundle(&scene).map_err(runtime)?;
    let mut cfg = desk_config();
    if let Ok(t) = bundle.true_params() {
        cfg.initial.zeta = t.zeta;
        cfg.initial.c = t.c;
    }
    cfg.apply_kv(&recon_kv).map_err(value)?;
    let mut base = BaselineConfig::default();
    base.apply_kv(&base_kv).map_err(value)?;
    let r = run_method(&bundle.mesh, &bundle.layout, &bundle.measurements.m, method, &cfg, &base).map_err(runtime)?;
    let d = PyDict::new(py);
    d.set_item("method", method.name())?;
    d.set_item("c", r.c.clone())?;
    d.set_item("mu_a", r.params.mu_a)?;
    d.set_item("mu_s_prime", r.params.mu_s_prime)?;
    if let Some(t) = &r.trace {
        d.set_item("loss", t.records.iter().map(|x| x.loss).collect::<Vec<_>>())?;
        d.set_item("mu_a_history", t.mu_a_history())?;
        d.set_item("mu_s_history", t.mu_s_history())?;
    }
    if let Some(s) = &r.solve {
        d.set_item("history", s.history.clone())?;
    }
    Ok(d)
}

/// Dice of a nodal field against the bundle's ground truth on the scoring grid.
#[pyfunction]
fn grid_dice(scene: PathBuf, c: Vec<f64>) -> PyResult<f64> {
    let bundle = read_bundle(&scene).map_err(runtime)?;
    let truth = bundle.truth.as_ref().ok_or_else(|| runtime("scene has no ground truth"))?;
    let edge = bundle.manifest.get_or("edge_len", DEFAULT_EDGE_LEN).map_err(runtime)?;
    let grid = metrics_grid(&bundle.mesh, edge);
    grid_dice_core(&bundle.mesh, &c, truth, &grid, ThresholdPolicy::default()).map(|d| d.dice).map_err(value)
}

/// Dice after binarizing each field at `relative` of its own maximum.
#[pyfunction]
#[pyo3(signature = (a, b, relative=0.5))]
fn dice(a: Vec<f64>, b: Vec<f64>, relative: f64) -> PyResult<f64> {
    dice_core(&a, &b, ThresholdPolicy::RelativeToMax(relative), None).map(|d| d.dice).map_err(value)
}

#[pymodule]
fn neufmt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(grid_dice, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    Ok(())
}

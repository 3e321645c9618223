//! Three operations for the browser page: preview a synthetic frame through
//! the preprocessing pipeline, size a model variant, and score a confusion
//! matrix. Each returns JSON; the `demo` functions are plain Rust so they can
//! be tested natively.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Synthetic frame of one mode: raw accelerometer magnitude plus every
/// default model channel after smoothing and downsampling.
#[wasm_bindgen(js_name = previewFrame)]
pub fn preview_frame(mode_id: u8, seed: u64, window_s: f64, target_hz: f64) -> Result<String, JsValue> {
    js(demo::preview_frame(mode_id, seed, window_s, target_hz))
}

/// Parameter count and tap geometry for a depth / tap / width variant.
#[wasm_bindgen(js_name = modelSummary)]
pub fn model_summary(depth: usize, taps: &str, units: usize, input_len: usize) -> Result<String, JsValue> {
    js(demo::model_summary(depth, taps, units, input_len))
}

/// Scores of an 8x8 count matrix given as JSON (rows = ground truth).
#[wasm_bindgen(js_name = scoreConfusion)]
pub fn score_confusion(counts_json: &str) -> Result<String, JsValue> {
    js(demo::score_confusion(counts_json))
}

#[wasm_bindgen(js_name = modeNames)]
pub fn mode_names() -> String {
    demo::mode_names()
}

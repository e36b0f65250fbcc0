//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function returning
//! `Result<String, String>`, so the logic is testable natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use comae::corpus::{conditional_distribution, generate_synthetic_corpus, render_heatmap_svg, SyntheticSpec};
use comae::decoding::{apply_temperature, top_p_filter};
use comae::evaluation::{bleu2, rouge_l};
use comae::numerics::softmax;
use comae::taxonomy::Axis;
use comae::text::tokenize;

/// Largest corpus the page may request.
pub const MAX_CONVERSATIONS: usize = 20_000;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// SVG heat map of `P(y | x)` over a corpus sampled from the bundled spec.
pub fn heatmap(n: usize, seed: u64, x: &str, y: &str) -> Result<String, String> {
    if n == 0 || n > MAX_CONVERSATIONS {
        return Err(format!("conversations must be between 1 and {MAX_CONVERSATIONS}"));
    }
    let (x, y): (Axis, Axis) = (x.parse().map_err(err)?, y.parse().map_err(err)?);
    if x == y {
        return Err("pick two different axes".into());
    }
    let corpus = generate_synthetic_corpus(&SyntheticSpec::builtin(), n, seed).map_err(err)?;
    let table = conditional_distribution(&corpus, x, y).map_err(err)?;
    Ok(render_heatmap_svg(&table))
}

#[derive(Serialize)]
struct Explored {
    softmax: Vec<f64>,
    tempered: Vec<f64>,
    filtered: Vec<f64>,
    kept: usize,
}

/// Logits as a comma or whitespace separated list.
fn parse_logits(text: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("enter at least one logit".into());
    }
    Ok(v)
}

/// JSON with the plain softmax, the tempered softmax and the nucleus.
pub fn explore(logits: &str, temperature: f64, top_p: f64) -> Result<String, String> {
    let logits = parse_logits(logits)?;
    let plain = softmax(&logits).map_err(err)?;
    let tempered = softmax(&apply_temperature(&logits, temperature).map_err(err)?).map_err(err)?;
    let filtered = top_p_filter(&tempered, top_p).map_err(err)?;
    let kept = filtered.iter().filter(|&&p| p > 0.0).count();
    serde_json::to_string(&Explored {
        softmax: plain,
        tempered,
        filtered,
        kept,
    })
    .map_err(err)
}

#[derive(Serialize)]
struct Scores {
    bleu2: f64,
    rouge_l: f64,
    hypothesis_tokens: Vec<String>,
    reference_tokens: Vec<String>,
}

/// JSON with BLEU-2 and ROUGE-L of one hypothesis against one reference.
pub fn score(hypothesis: &str, reference: &str, beta: f64) -> Result<String, String> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err("beta must be positive".into());
    }
    let (h, r) = (tokenize(hypothesis), tokenize(reference));
    serde_json::to_string(&Scores {
        bleu2: bleu2(&h, &r),
        rouge_l: rouge_l(&h, &r, beta),
        hypothesis_tokens: h,
        reference_tokens: r,
    })
    .map_err(err)
}

#[wasm_bindgen(js_name = heatmap)]
pub fn heatmap_js(n: usize, seed: u32, x: &str, y: &str) -> Result<String, JsError> {
    heatmap(n, u64::from(seed), x, y).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = explore)]
pub fn explore_js(logits: &str, temperature: f64, top_p: f64) -> Result<String, JsError> {
    explore(logits, temperature, top_p).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = score)]
pub fn score_js(hypothesis: &str, reference: &str, beta: f64) -> Result<String, JsError> {
    score(hypothesis, reference, beta).map_err(|e| JsError::new(&e))
}

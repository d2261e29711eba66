//! Browser bindings for the caption polisher.
//!
//! Every export takes plain values and returns a JSON string, so the same
//! functions run natively in tests and under `wasm-bindgen` in the page.
//! All runs use the built-in `scenes` fixture.

use gibbscap::fusion::{fuse, select_argmax, softmax, FusionWeights};
use gibbscap::metrics::{div_n, CaptionSet, ShortCaption};
use gibbscap::synthetic::fixtures::SCENES;
use gibbscap::synthetic::SyntheticBackend;
use gibbscap::{run, ControlTask, OrderMode, RunConfig, RunResult, ScorerBackend};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn backend_for(image: &str) -> Result<SyntheticBackend, String> {
    let mut b = SyntheticBackend::builtin(&SCENES);
    let bag = SyntheticBackend::builtin_image(&SCENES, image).ok_or_else(|| format!("unknown image {image:?}"))?;
    let h = b.register_image(bag.as_bytes()).map_err(|e| e.to_string())?;
    b.select_image(&h).map_err(|e| e.to_string())?;
    Ok(b)
}

fn parse_order(order: &str) -> Result<OrderMode, String> {
    match order {
        "sequential" => Ok(OrderMode::Sequential),
        "shuffle" => Ok(OrderMode::Shuffle),
        o => Err(format!("unknown order {o:?}")),
    }
}

fn demo_config(length: usize, k: usize, iterations: usize, seed: u64, order: OrderMode) -> RunConfig {
    RunConfig {
        n: length,
        k,
        iterations,
        seed,
        order_mode: order,
        prompt_text: "image of".into(),
        ..RunConfig::default()
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Names of the built-in scene images.
#[wasm_bindgen]
pub fn scene_images() -> String {
    let names: Vec<&str> = SCENES.images.iter().map(|(n, _)| *n).collect();
    serde_json::to_string(&names).expect("strings serialize")
}

#[derive(Serialize)]
struct Candidate {
    word: String,
    p_bert: f64,
    p_clip: f64,
    p_cls: f64,
    fused: f64,
}

#[derive(Serialize)]
struct Step {
    position: usize,
    chosen: String,
    candidates: Vec<Candidate>,
}

#[derive(Serialize)]
struct Iteration {
    text: String,
    score: f64,
    steps: Vec<Step>,
}

#[derive(Serialize)]
struct CaptionView {
    caption: String,
    best_iteration: usize,
    iterations: Vec<Iteration>,
}

fn caption_view(result: &RunResult, backend: &SyntheticBackend) -> CaptionView {
    let vocab = backend.vocabulary();
    let word = |t| vocab.detokenize(&[t]);
    CaptionView {
        caption: result.best_text.clone(),
        best_iteration: result.best_iteration,
        iterations: result
            .per_iteration
            .iter()
            .map(|snap| Iteration {
                text: snap.text.clone(),
                score: snap.sentence_match_score,
                steps: snap
                    .candidate_records
                    .iter()
                    .map(|set| Step {
                        position: set.position,
                        chosen: word(set.chosen_token()),
                        candidates: (0..set.len())
                            .map(|i| Candidate {
                                word: word(set.token_ids[i]),
                                p_bert: set.p_bert[i],
                                p_clip: set.p_clip[i],
                                p_cls: set.p_cls[i],
                                fused: set.fused[i],
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Captions a scene image and returns every candidate set of the run.
/// `control` is `none` or a flag such as `style:positive`; a classifier
/// control runs with gamma 5.
#[wasm_bindgen]
pub fn caption_scene(
    image: &str,
    length: usize,
    k: usize,
    iterations: usize,
    seed: u64,
    order: &str,
    control: &str,
) -> Result<String, String> {
    let mut backend = backend_for(image)?;
    let mut config = demo_config(length, k, iterations, seed, parse_order(order)?);
    config.options.clamp_k = true;
    match ControlTask::parse_flag(control).map_err(|e| e.to_string())? {
        ControlTask::None => {}
        task => {
            config.weights.gamma = 5.0;
            config.control_task = Some(task);
        }
    }
    let result = run(&config, &mut backend).map_err(|f| f.error.to_string())?;
    to_json(&caption_view(&result, &backend))
}

#[derive(Serialize)]
struct FusionView {
    p_clip: Vec<f64>,
    fused: Vec<f64>,
    chosen: usize,
}

/// Fuses fluency probabilities with softmaxed match scores. Both lists are
/// comma separated and must have equal length.
#[wasm_bindgen]
pub fn explore_fusion(
    p_bert: &str,
    match_scores: &str,
    alpha: f64,
    beta: f64,
    match_temperature: f64,
) -> Result<String, String> {
    let parse = |s: &str| -> Result<Vec<f64>, String> {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
            .collect()
    };
    let p_bert = parse(p_bert)?;
    let scores = parse(match_scores)?;
    if p_bert.len() != scores.len() {
        return Err(format!("{} fluency values but {} match scores", p_bert.len(), scores.len()));
    }
    let weights = FusionWeights {
        match_temperature,
        ..FusionWeights::new(alpha, beta, 0.0)
    };
    let p_clip = softmax(&scores, match_temperature).map_err(|e| e.to_string())?;
    let zeros = vec![0.0; p_bert.len()];
    let fused = fuse(&p_bert, &p_clip, &zeros, &weights).map_err(|e| e.to_string())?;
    let chosen = select_argmax(&fused).map_err(|e| e.to_string())?;
    to_json(&FusionView { p_clip, fused, chosen })
}

#[derive(Serialize)]
struct DiversityView {
    sequential: String,
    shuffled: Vec<String>,
    div_1: f64,
    div_2: f64,
}

/// Captions one image once in left-to-right order and with `orders`
/// shuffled orders (seeds 0..orders), reporting Div-1 and Div-2 of the
/// shuffled captions.
#[wasm_bindgen]
pub fn order_diversity(image: &str, length: usize, k: usize, iterations: usize, orders: u64) -> Result<String, String> {
    if orders == 0 {
        return Err("orders must be at least 1".into());
    }
    let caption = |seed, order| -> Result<String, String> {
        let mut backend = backend_for(image)?;
        let mut config = demo_config(length, k, iterations, seed, order);
        config.options.clamp_k = true;
        Ok(run(&config, &mut backend).map_err(|f| f.error.to_string())?.best_text)
    };
    let sequential = caption(0, OrderMode::Sequential)?;
    let shuffled = (0..orders)
        .map(|s| caption(s, OrderMode::Shuffle))
        .collect::<Result<Vec<_>, _>>()?;
    let set = CaptionSet::from_texts(&shuffled);
    let div = |n| div_n(&set, n, ShortCaption::Skip).map_err(|e| e.to_string());
    to_json(&DiversityView {
        div_1: div(1)?,
        div_2: div(2)?,
        sequential,
        shuffled,
    })
}

#![allow(dead_code)]

use std::path::PathBuf;

use gibbscap::control::{ControlTask, InfillSpec, PosTemplate, StyleTarget};
use gibbscap::engine::{run, RunResult};
use gibbscap::fusion::FusionWeights;
use gibbscap::protocol::{LoopbackTransport, RecordingTransport, RemoteBackend, SyntheticServer};
use gibbscap::synthetic::fixtures::{self, Fixture};
use gibbscap::synthetic::SyntheticBackend;
use gibbscap::{EngineOptions, OrderMode, RunConfig, ScorerBackend, TokenId};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn blessing() -> bool {
    std::env::var_os("GIBBSCAP_BLESS").is_some()
}

pub fn backend_with_image(fixture: &Fixture, image: &str) -> SyntheticBackend {
    let mut b = SyntheticBackend::builtin(fixture);
    let bag = SyntheticBackend::builtin_image(fixture, image).expect("known image");
    let h = b.register_image(bag.as_bytes()).unwrap();
    b.select_image(&h).unwrap();
    b
}

/// A pinned run whose trace and wire transcript are checked in.
pub struct Scenario {
    pub name: &'static str,
    pub fixture: &'static Fixture,
    pub image: &'static str,
    pub config: RunConfig,
}

impl Scenario {
    pub fn backend(&self) -> SyntheticBackend {
        backend_with_image(self.fixture, self.image)
    }

    pub fn run_local(&self) -> RunResult {
        run(&self.config, &mut self.backend()).expect("scenario runs")
    }

    /// Runs through the protocol against the in-process reference server,
    /// returning the result and the wire transcript.
    pub fn run_recorded(&self) -> (RunResult, String) {
        let server = SyntheticServer::new(SyntheticBackend::builtin(self.fixture));
        let mut remote = RemoteBackend::connect(RecordingTransport::new(LoopbackTransport::new(server))).unwrap();
        let bag = SyntheticBackend::builtin_image(self.fixture, self.image).unwrap();
        remote.register_image(bag.as_bytes()).unwrap();
        let result = run(&self.config, &mut remote).expect("scenario runs");
        (result, remote.into_transport().transcript())
    }

    pub fn trace_path(&self) -> PathBuf {
        golden_dir().join(format!("{}.trace.jsonl", self.name))
    }

    pub fn transcript_path(&self) -> PathBuf {
        golden_dir().join(format!("{}.transcript", self.name))
    }
}

pub fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "toy7_cat",
            fixture: &fixtures::TOY7,
            image: "cat",
            config: RunConfig {
                n: 4,
                k: 5,
                iterations: 4,
                seed: 3,
                prompt_text: String::new(),
                ..RunConfig::default()
            },
        },
        Scenario {
            name: "scenes_style",
            fixture: &fixtures::SCENES,
            image: "cat_on_bed",
            config: RunConfig {
                n: 7,
                k: 12,
                iterations: 4,
                seed: 5,
                prompt_text: "image of".into(),
                weights: FusionWeights::new(0.02, 2.0, 5.0),
                control_task: Some(ControlTask::Style {
                    target: StyleTarget::Positive,
                }),
                ..RunConfig::default()
            },
        },
        Scenario {
            name: "scenes_pos_hard",
            fixture: &fixtures::SCENES,
            image: "dog_in_grass",
            config: RunConfig {
                n: 7,
                k: 10,
                iterations: 3,
                seed: 2,
                prompt_text: "image of".into(),
                weights: FusionWeights::new(0.02, 2.0, 5.0),
                control_task: Some(ControlTask::Pos {
                    template: "DET NOUN VERB ADP DET NOUN PUNCT".parse().unwrap(),
                    hard: true,
                }),
                ..RunConfig::default()
            },
        },
    ]
}

pub fn random_weights<R: Rng>(rng: &mut R, allow_gamma: bool) -> FusionWeights {
    loop {
        let pick = |rng: &mut R, hi: f64| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..hi) };
        let alpha = pick(rng, 1.0);
        let beta = pick(rng, 5.0);
        let gamma = if allow_gamma { pick(rng, 8.0) } else { 0.0 };
        if alpha + beta + gamma > 0.0 {
            return FusionWeights {
                alpha,
                beta,
                gamma,
                match_temperature: rng.gen_range(0.2..3.0),
                control_temperature: rng.gen_range(0.2..3.0),
            };
        }
    }
}

pub fn random_options<R: Rng>(rng: &mut R) -> EngineOptions {
    EngineOptions {
        clamp_k: rng.gen_bool(0.5),
        keep_incumbent: rng.gen_bool(0.3),
        renormalize_bert: rng.gen_bool(0.3),
    }
}

const TOY_TAGS: [&str; 4] = ["DET", "NOUN", "VERB", "PUNCT"];

/// Random control task for a toy7 caption of `n` slots.
pub fn random_toy_control<R: Rng>(rng: &mut R, n: usize) -> ControlTask {
    match rng.gen_range(0..4) {
        0 => ControlTask::Style {
            target: StyleTarget::Positive,
        },
        1 => ControlTask::Style {
            target: StyleTarget::Negative,
        },
        _ => {
            let slots: Vec<String> = (0..n)
                .map(|_| {
                    let count = rng.gen_range(1..=2);
                    let tags: Vec<&str> = TOY_TAGS.choose_multiple(rng, count).copied().collect();
                    tags.join("/")
                })
                .collect();
            let template: PosTemplate = slots.join(" ").parse().unwrap();
            ControlTask::Pos {
                template,
                hard: rng.gen_bool(0.5),
            }
        }
    }
}

pub fn random_toy_prompt<R: Rng>(rng: &mut R) -> String {
    let words = ["a", "cat", "dog", "sits", "runs"];
    let len = rng.gen_range(0..=2);
    (0..len).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Random reference of `n` real (non-mask) tokens.
pub fn random_reference<R: Rng>(rng: &mut R, backend: &SyntheticBackend, n: usize) -> Vec<TokenId> {
    let v = backend.vocabulary();
    let content: Vec<TokenId> = (0..v.size() as TokenId).filter(|&t| t != v.mask_id()).collect();
    (0..n).map(|_| *content.choose(rng).unwrap()).collect()
}

/// Random toy7 run config, sometimes infilling, sometimes controlled.
pub fn random_toy_config<R: Rng>(rng: &mut R, backend: &SyntheticBackend) -> RunConfig {
    let n = rng.gen_range(1..=5);
    let vocab = backend.vocabulary().size();
    let mut config = RunConfig {
        n,
        k: rng.gen_range(1..=vocab),
        iterations: rng.gen_range(1..=4),
        weights: random_weights(rng, true),
        order_mode: if rng.gen_bool(0.5) { OrderMode::Shuffle } else { OrderMode::Sequential },
        reshuffle_each_iter: rng.gen_bool(0.3),
        seed: rng.gen(),
        prompt_text: random_toy_prompt(rng),
        include_prompt_in_match_text: rng.gen_bool(0.7),
        options: random_options(rng),
        ..RunConfig::default()
    };
    if config.options.clamp_k {
        config.k = rng.gen_range(1..=vocab + 3);
    }
    match rng.gen_range(0..3) {
        0 => {
            let reference = random_reference(rng, backend, n);
            let count = rng.gen_range(1..=n);
            let editable = rand::seq::index::sample(rng, n, count).into_vec();
            config.control_task = Some(ControlTask::Infill(InfillSpec::new(reference, editable).unwrap()));
            config.weights.gamma = 0.0;
            if config.weights.alpha + config.weights.beta == 0.0 {
                config.weights.beta = 1.0;
            }
        }
        1 if config.weights.gamma > 0.0 => config.control_task = Some(random_toy_control(rng, n)),
        _ => config.weights.gamma = 0.0,
    }
    if config.weights.alpha + config.weights.beta + config.weights.gamma == 0.0 {
        config.weights.alpha = 1.0;
    }
    config
}

/// Number of editable slots `config` will polish.
pub fn editable_count(config: &RunConfig) -> usize {
    match &config.control_task {
        Some(ControlTask::Infill(spec)) => spec.editable_positions.len(),
        _ => config.n,
    }
}

type Mutation = fn(&mut serde_json::Value);

/// Malformed-reply fixtures derived from a good transcript: everything up
/// to the first request of `op`, then a corrupted version of its reply.
pub fn malformed_variants(transcript: &str) -> Vec<(&'static str, String)> {
    use serde_json::{json, Value};

    let variants: [(&str, &str, Mutation); 10] = [
        ("topk_unsorted", "mlm_topk", |v| {
            let p = v["ok"]["probs"].as_array_mut().unwrap();
            p.reverse();
        }),
        ("topk_short", "mlm_topk", |v| {
            v["ok"]["probs"].as_array_mut().unwrap().pop();
            v["ok"]["token_ids"].as_array_mut().unwrap().pop();
        }),
        ("topk_probability_above_one", "mlm_topk", |v| v["ok"]["probs"][0] = json!(1.5)),
        ("topk_token_outside_vocab", "mlm_topk", |v| v["ok"]["token_ids"][0] = json!(4096)),
        ("topk_wrong_id", "mlm_topk", |v| v["id"] = json!(v["id"].as_u64().unwrap() + 100)),
        ("topk_ok_and_error", "mlm_topk", |v| {
            v["error"] = json!({"code": "internal", "message": "both"})
        }),
        ("topk_payload_wrong_type", "mlm_topk", |v| v["ok"]["token_ids"] = json!("many")),
        ("match_missing_score", "match", |v| {
            v["ok"]["scores"].as_array_mut().unwrap().pop();
        }),
        ("match_null_score", "match", |v| v["ok"]["scores"][0] = Value::Null),
        ("match_no_payload", "match", |v| {
            v.as_object_mut().unwrap().remove("ok");
        }),
    ];

    let lines: Vec<&str> = transcript.lines().collect();
    let mut out = Vec::new();
    for (name, op, mutate) in variants {
        let marker = format!("\"op\":\"{op}\"");
        let at = lines
            .iter()
            .position(|l| l.starts_with("> ") && l.contains(&marker))
            .expect("transcript contains the op");
        let mut reply: Value = serde_json::from_str(&lines[at + 1][2..]).unwrap();
        mutate(&mut reply);
        let mut text = format!("# {name}: corrupted {op} reply\n");
        for l in &lines[..=at] {
            text.push_str(l);
            text.push('\n');
        }
        text.push_str("< ");
        text.push_str(&gibbscap::json::value_to_line(&reply));
        text.push('\n');
        out.push((name, text));
    }
    out.push((
        "garbage_line",
        {
            let at = lines.iter().position(|l| l.contains("\"op\":\"mlm_topk\"")).unwrap();
            let mut text = String::from("# garbage_line: reply is not JSON\n");
            for l in &lines[..=at] {
                text.push_str(l);
                text.push('\n');
            }
            text.push_str("< this is not json\n");
            text
        },
    ));
    out
}

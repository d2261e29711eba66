//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p gibbscap --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use gibbscap::control::{build_infill_task, ControlTask, InfillSpec, StyleTarget};
use gibbscap::engine::{engine_rng, gibbs_lm_sample, polish_position, run, LmSampleMode, RunResult};
use gibbscap::fusion::FusionWeights;
use gibbscap::metrics::{bleu_n, bsim, div_n, normalize_words, CaptionSet, ShortCaption};
use gibbscap::oracle::{oracle_enumerate, oracle_select, ENUMERATION_BUDGET};
use gibbscap::protocol::{RemoteBackend, ReplayTransport};
use gibbscap::synthetic::{fixtures, SyntheticBackend};
use gibbscap::trace::{read_trace, run_from_trace, trace_string};
use gibbscap::{CallCounts, CandidateText, CaptionState, CountingBackend, Error, OrderMode, RunConfig, ScorerBackend, ScorerError, TokenId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 + tag)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// All built-in images of `fixture` registered on `backend`, by handle.
fn image_handles(backend: &mut SyntheticBackend, fixture: &fixtures::Fixture) -> Vec<String> {
    fixture
        .images
        .iter()
        .map(|(_, bag)| backend.register_image(bag.as_bytes()).unwrap())
        .collect()
}

fn step_oracle() -> Outcome {
    const TRIALS: usize = 10_000;
    let mut r = rng(1);
    let mut backend = SyntheticBackend::builtin(&fixtures::TOY7);
    let handles = image_handles(&mut backend, &fixtures::TOY7);
    let v = backend.vocabulary().size();
    let mask = backend.vocabulary().mask_id();
    let content = ["a", "cat", "dog", "sits", "runs", "."];

    let start = Instant::now();
    let mut mismatches = Vec::new();
    for trial in 0..TRIALS {
        backend.select_image(handles.choose(&mut r).unwrap()).unwrap();
        let n = r.gen_range(1..=5);
        let prompt_len = r.gen_range(0..=2);
        let prompt: Vec<TokenId> = (0..prompt_len)
            .map(|_| backend.vocabulary().id_of(content.choose(&mut r).unwrap()).unwrap())
            .collect();
        let slots: Vec<TokenId> = (0..n).map(|_| r.gen_range(0..v as TokenId)).collect();
        let i = r.gen_range(0..n);
        let frozen: Vec<bool> = (0..n).map(|j| j != i && r.gen_bool(0.3)).collect();
        let state = CaptionState::new(prompt, slots, frozen, mask).unwrap();

        let mut config = RunConfig {
            n,
            k: r.gen_range(1..=v),
            weights: random_weights(&mut r, true),
            include_prompt_in_match_text: r.gen_bool(0.7),
            options: random_options(&mut r),
            ..RunConfig::default()
        };
        if config.options.clamp_k {
            config.k = r.gen_range(1..=v + 3);
        }
        if config.weights.gamma > 0.0 {
            config.control_task = Some(random_toy_control(&mut r, n));
        }

        let (_, set) = polish_position(&state, i, &mut backend, &config).map_err(|e| format!("trial {trial}: {e}"))?;
        set.check(&config.weights).map_err(|e| format!("trial {trial}: {e}"))?;
        let engine_choice = set.token_ids[set.chosen];
        let oracle_choice = oracle_select(&state, i, &mut backend, &config).map_err(|e| format!("trial {trial}: {e}"))?;
        if engine_choice != oracle_choice {
            mismatches.push(trial);
        }
    }
    let elapsed = start.elapsed();
    ensure(mismatches.is_empty(), || format!("{} mismatches, first at trial {}", mismatches.len(), mismatches[0]))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:.2?}, limit 10 s"))?;
    Ok(format!("{TRIALS} trials, 0 mismatches, {elapsed:.2?}"))
}

fn naive_softmax(scores: &[f64], t: f64) -> Vec<f64> {
    let top = scores.iter().cloned().filter(|s| s.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_finite() { ((s - top) / t).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Fused score and fluency probability of every vocabulary token at the
/// single editable slot.
fn fused_landscape(
    backend: &mut SyntheticBackend,
    config: &RunConfig,
    prompt: &[TokenId],
    slots: &[TokenId],
    at: usize,
) -> (Vec<f64>, Vec<f64>) {
    let v = backend.vocabulary().size();
    let vocab = backend.vocabulary().clone();
    let mut masked: Vec<TokenId> = prompt.iter().chain(slots).copied().collect();
    masked[prompt.len() + at] = vocab.mask_id();
    let p_bert = backend.table().predict(&masked, prompt.len() + at).to_vec();

    let bag = backend.active_image().unwrap().clone();
    let mut match_scores = Vec::new();
    let mut texts = Vec::new();
    for t in 0..v as TokenId {
        let mut s = slots.to_vec();
        s[at] = t;
        let full: Vec<TokenId> = prompt.iter().chain(&s).copied().collect();
        match_scores.push(bag.score(if config.include_prompt_in_match_text { &full } else { &s }));
        texts.push(CandidateText::new(s, &vocab));
    }
    let p_clip = naive_softmax(&match_scores, config.weights.match_temperature);
    let p_cls = if config.weights.gamma > 0.0 {
        let scores = backend.control_scores(config.control_task.as_ref().unwrap(), at, &texts).unwrap();
        naive_softmax(&scores, config.weights.control_temperature)
    } else {
        vec![0.0; v]
    };
    let w = &config.weights;
    let fused = (0..v).map(|t| w.alpha * p_bert[t] + w.beta * p_clip[t] + w.gamma * p_cls[t]).collect();
    (fused, p_bert)
}

fn global_n1() -> Outcome {
    const CONFIGS: usize = 100;
    let mut r = rng(2);
    let mut backend = SyntheticBackend::builtin(&fixtures::TOY7);
    let handles = image_handles(&mut backend, &fixtures::TOY7);
    let v = backend.vocabulary().size();
    let mut infill_cases = 0;
    for case in 0..CONFIGS {
        backend.select_image(handles.choose(&mut r).unwrap()).unwrap();
        let mut config = RunConfig {
            n: 1,
            k: v,
            iterations: r.gen_range(1..=3),
            weights: random_weights(&mut r, true),
            order_mode: OrderMode::Shuffle,
            seed: r.gen(),
            prompt_text: random_toy_prompt(&mut r),
            include_prompt_in_match_text: r.gen_bool(0.7),
            ..RunConfig::default()
        };
        let (slots, at) = if r.gen_bool(0.4) {
            infill_cases += 1;
            let n = r.gen_range(2..=5);
            let reference = random_reference(&mut r, &backend, n);
            let at = r.gen_range(0..n);
            config = build_infill_task(InfillSpec::new(reference.clone(), [at]).unwrap(), &config).unwrap();
            if config.weights.alpha + config.weights.beta == 0.0 {
                config.weights.alpha = 0.5;
            }
            (reference, at)
        } else {
            if config.weights.gamma > 0.0 {
                config.control_task = Some(random_toy_control(&mut r, 1));
            }
            (vec![backend.vocabulary().mask_id()], 0)
        };
        let prompt = backend.vocabulary().encode_words(&config.prompt_text).unwrap();
        let (fused, p_bert) = fused_landscape(&mut backend, &config, &prompt, &slots, at);
        let vocab = backend.vocabulary().clone();
        let ranked = oracle_enumerate(1, &vocab, ENUMERATION_BUDGET, |s| Ok(fused[s[0] as usize])).unwrap();
        // exact ties go to the candidate ranked first by fluency, then id
        let expected = ranked
            .iter()
            .take_while(|(_, score)| *score == ranked[0].1)
            .map(|(seq, _)| seq[0])
            .min_by(|&a, &b| p_bert[b as usize].total_cmp(&p_bert[a as usize]).then(a.cmp(&b)))
            .unwrap();
        let result = run(&config, &mut backend).map_err(|e| format!("config {case}: {e}"))?;
        ensure(result.best_caption[at] == expected, || {
            format!(
                "config {case}: run chose {:?}, enumeration top-1 is {:?}",
                vocab.piece(result.best_caption[at]),
                vocab.piece(expected)
            )
        })?;
    }
    Ok(format!("{CONFIGS} configs ({infill_cases} infill), all equal enumeration top-1"))
}

fn fingerprint(r: &RunResult) -> String {
    let snaps: Vec<_> = r
        .per_iteration
        .iter()
        .map(|s| serde_json::json!([s.slots_after, s.text, s.sentence_match_score]))
        .collect();
    gibbscap::json::value_to_line(&serde_json::json!({
        "best_iteration": r.best_iteration,
        "best_caption": r.best_caption,
        "snapshots": snaps,
    }))
}

fn weight_collapse() -> Outcome {
    let mut r = rng(3);
    let mut toy = SyntheticBackend::builtin(&fixtures::TOY7);
    let mut steps = 0;
    for case in 0..150 {
        let mut config = random_toy_config(&mut r, &toy);
        config.weights.beta = 0.0;
        config.weights.gamma = 0.0;
        config.weights.alpha = r.gen_range(0.01..1.0);
        if !matches!(config.control_task, Some(ControlTask::Infill(_))) {
            config.control_task = None;
        }
        let result = run(&config, &mut toy).map_err(|e| format!("case {case}: {e}"))?;
        let mut slots = result.initial_slots.clone();
        for snap in &result.per_iteration {
            for set in &snap.candidate_records {
                let i = set.position;
                let mut masked: Vec<TokenId> = result.prompt.iter().chain(&slots).copied().collect();
                masked[result.prompt.len() + i] = toy.vocabulary().mask_id();
                let top1 = toy.table().top_k(&masked, result.prompt.len() + i, 1)[0].0;
                let chosen = set.token_ids[set.chosen];
                ensure(chosen == top1, || format!("case {case}: chose {chosen} at slot {i}, fluency top-1 is {top1}"))?;
                slots[i] = chosen;
                steps += 1;
            }
            ensure(slots == snap.slots_after, || format!("case {case}: replayed slots diverge"))?;
        }
    }

    let mut scenes = backend_with_image(&fixtures::SCENES, "man_on_street");
    let mut k1_runs = 0;
    for case in 0..60 {
        let (backend, base): (&mut SyntheticBackend, RunConfig) = if case % 2 == 0 {
            let mut c = random_toy_config(&mut r, &toy);
            c.weights.gamma = 0.0;
            if !matches!(c.control_task, Some(ControlTask::Infill(_))) {
                c.control_task = None;
            }
            (&mut toy, c)
        } else {
            let c = RunConfig {
                n: r.gen_range(3..=8),
                iterations: r.gen_range(1..=4),
                seed: r.gen(),
                prompt_text: "image of".into(),
                ..RunConfig::default()
            };
            (&mut scenes, c)
        };
        let infill = matches!(base.control_task, Some(ControlTask::Infill(_)));
        let mut variants: Vec<(f64, f64, f64)> = vec![(0.02, 0.0, 0.0), (0.02, 2.0, 0.0), (0.0, 7.0, 0.0)];
        if !infill {
            variants.extend([(0.02, 2.0, 5.0), (0.5, 10.0, 5.0)]);
        }
        let mut prints = BTreeSet::new();
        for (a, b, g) in variants {
            let mut c = base.clone();
            c.k = 1;
            c.options.clamp_k = false;
            // an appended incumbent would make this a two-candidate step
            c.options.keep_incumbent = false;
            c.weights = FusionWeights {
                alpha: a,
                beta: b,
                gamma: g,
                ..c.weights
            };
            if g > 0.0 {
                c.control_task = Some(ControlTask::Style {
                    target: if r.gen_bool(0.5) { StyleTarget::Positive } else { StyleTarget::Negative },
                });
            }
            let result = run(&c, backend).map_err(|e| format!("K=1 case {case}: {e}"))?;
            prints.insert(fingerprint(&result));
            k1_runs += 1;
        }
        ensure(prints.len() == 1, || format!("K=1 case {case}: {} distinct outputs across weights", prints.len()))?;
    }
    Ok(format!("{steps} beta=gamma=0 steps all fluency top-1; {k1_runs} K=1 runs identical across beta/gamma"))
}

fn freeze_invariant() -> Outcome {
    const SPECS: usize = 1000;
    let mut r = rng(4);
    let mut toy = backend_with_image(&fixtures::TOY7, "dog");
    let mut scenes = backend_with_image(&fixtures::SCENES, "bird_in_sky");
    let mut frozen_checked = 0usize;
    for case in 0..SPECS {
        let on_scenes = case % 3 == 0;
        let backend = if on_scenes { &mut scenes } else { &mut toy };
        let n = r.gen_range(1..=if on_scenes { 8 } else { 6 });
        let reference = random_reference(&mut r, backend, n);
        let spec = if r.gen_bool(0.5) {
            InfillSpec::with_corruption(reference.clone(), r.gen_range(0.05..=1.0), &mut r).unwrap()
        } else {
            let count = r.gen_range(1..=n);
            InfillSpec::new(reference.clone(), rand::seq::index::sample(&mut r, n, count).into_vec()).unwrap()
        };
        let frozen = spec.frozen_mask();
        let v = backend.vocabulary().size();
        let base = RunConfig {
            k: r.gen_range(1..=v.min(12)),
            iterations: r.gen_range(1..=3),
            weights: random_weights(&mut r, false),
            order_mode: if r.gen_bool(0.5) { OrderMode::Shuffle } else { OrderMode::Sequential },
            reshuffle_each_iter: r.gen_bool(0.3),
            seed: r.gen(),
            prompt_text: if on_scenes { "image of".into() } else { String::new() },
            options: random_options(&mut r),
            ..RunConfig::default()
        };
        let config = build_infill_task(spec, &base).unwrap();
        let result = run(&config, backend).map_err(|e| format!("spec {case}: {e}"))?;
        ensure(result.frozen == frozen, || format!("spec {case}: frozen flags differ"))?;
        let outputs = std::iter::once(&result.best_caption).chain(result.per_iteration.iter().map(|s| &s.slots_after));
        for slots in outputs {
            for (i, f) in frozen.iter().enumerate() {
                if *f {
                    ensure(slots[i] == reference[i], || format!("spec {case}: frozen slot {i} changed"))?;
                    frozen_checked += 1;
                }
            }
        }
    }
    Ok(format!("{SPECS} infill specs, {frozen_checked} frozen slot observations unchanged"))
}

/// Random toy7 and scenes configs with their backends, shared by the
/// ledger and best-of criteria.
fn ledger_corpus() -> Vec<(SyntheticBackend, RunConfig)> {
    let mut r = rng(5);
    let mut out = Vec::new();
    for _ in 0..300 {
        let mut b = SyntheticBackend::builtin(&fixtures::TOY7);
        let handles = image_handles(&mut b, &fixtures::TOY7);
        b.select_image(handles.choose(&mut r).unwrap()).unwrap();
        let c = random_toy_config(&mut r, &b);
        out.push((b, c));
    }
    let images = ["cat_on_bed", "dog_in_grass", "bird_in_sky", "man_on_street"];
    for _ in 0..40 {
        let b = backend_with_image(&fixtures::SCENES, images.choose(&mut r).unwrap());
        let n = r.gen_range(3..=9);
        let mut c = RunConfig {
            n,
            k: r.gen_range(1..=20),
            iterations: r.gen_range(1..=5),
            seed: r.gen(),
            prompt_text: "image of".into(),
            reshuffle_each_iter: r.gen_bool(0.3),
            ..RunConfig::default()
        };
        if r.gen_bool(0.5) {
            c.weights.gamma = 5.0;
            c.control_task = Some(ControlTask::Style {
                target: StyleTarget::Positive,
            });
        }
        out.push((b, c));
    }
    out
}

fn call_ledger(corpus: &mut [(SyntheticBackend, RunConfig)]) -> Outcome {
    let mut with_control = 0;
    for (case, (backend, config)) in corpus.iter_mut().enumerate() {
        let mut counting = CountingBackend::new(&mut *backend);
        let result = run(config, &mut counting).map_err(|e| format!("case {case}: {e}"))?;
        let t = config.iterations as u64;
        let m = editable_count(config) as u64;
        let control = config.weights.gamma > 0.0;
        with_control += usize::from(control);
        let expected = CallCounts {
            mlm_calls: t * m,
            match_calls: t * m + t,
            control_calls: if control { t * m } else { 0 },
        };
        ensure(counting.counts() == expected, || {
            format!("case {case}: counted {:?}, expected {expected:?}", counting.counts())
        })?;
        ensure(result.scorer_call_counts == expected, || {
            format!("case {case}: run reported {:?}", result.scorer_call_counts)
        })?;
    }
    Ok(format!("{} runs ({with_control} with control) match T*m / T*m+T / T*m-or-0", corpus.len()))
}

fn best_of(corpus: &mut [(SyntheticBackend, RunConfig)]) -> Outcome {
    for (case, (backend, config)) in corpus.iter_mut().enumerate() {
        let result = run(config, backend).map_err(|e| format!("case {case}: {e}"))?;
        let bag = backend.active_image().unwrap().clone();
        let mut best = 0;
        for (t, snap) in result.per_iteration.iter().enumerate() {
            let full: Vec<TokenId> = result.prompt.iter().chain(&snap.slots_after).copied().collect();
            let rescored = bag.score(if config.include_prompt_in_match_text { &full } else { &snap.slots_after });
            ensure(rescored.to_bits() == snap.sentence_match_score.to_bits(), || {
                format!("case {case}: snapshot {t} score {} but rescoring gives {rescored}", snap.sentence_match_score)
            })?;
            if rescored > result.per_iteration[best].sentence_match_score {
                best = t;
            }
        }
        let top = result.per_iteration[best].sentence_match_score;
        ensure(result.best().sentence_match_score == top, || format!("case {case}: best score is not the maximum"))?;
        ensure(result.best_iteration == best, || format!("case {case}: best_iteration {} but first maximum at {best}", result.best_iteration))?;
        ensure(result.best_caption == result.per_iteration[best].slots_after, || format!("case {case}: best caption mismatch"))?;
    }
    Ok(format!("{} runs, returned caption is the first maximum of the rescanned snapshot scores", corpus.len()))
}

fn determinism() -> Outcome {
    let mut checked = 0;
    for s in scenarios() {
        let a = trace_string(&s.run_local()).map_err(|e| e.to_string())?;
        let cfg = s.config.clone();
        let fixture = s.fixture;
        let image = s.image;
        let b = std::thread::spawn(move || trace_string(&run(&cfg, &mut backend_with_image(fixture, image)).unwrap()).unwrap())
            .join()
            .map_err(|_| "second run panicked".to_string())?;
        ensure(a == b, || format!("{}: two runs produced different traces", s.name))?;
        let stored = fs::read_to_string(s.trace_path()).map_err(|e| format!("{}: {e}", s.trace_path().display()))?;
        ensure(a == stored, || format!("{}: trace differs from the checked-in golden file", s.name))?;
        let parsed = read_trace(stored.as_bytes()).map_err(|e| e.to_string())?;
        let rebuilt = run_from_trace(&parsed).map_err(|e| e.to_string())?;
        ensure(trace_string(&rebuilt).unwrap() == stored, || format!("{}: trace does not round-trip", s.name))?;
        checked += 1;
    }
    let mut r = rng(7);
    let mut toy = backend_with_image(&fixtures::TOY7, "cat");
    for case in 0..100 {
        let c = random_toy_config(&mut r, &toy);
        let a = trace_string(&run(&c, &mut toy).map_err(|e| e.to_string())?).unwrap();
        let b = trace_string(&run(&c, &mut toy).map_err(|e| e.to_string())?).unwrap();
        ensure(a == b, || format!("random case {case}: traces differ"))?;
    }
    Ok(format!("{checked} golden traces byte-identical and round-tripping; 100 random configs rerun identically"))
}

fn order_diversity() -> Outcome {
    let mut backend = SyntheticBackend::builtin(&fixtures::TWO_MODE);
    let base = RunConfig {
        n: 3,
        k: 2,
        iterations: 3,
        prompt_text: String::new(),
        ..RunConfig::default()
    };
    let mut orders = BTreeSet::new();
    let mut shuffle_captions = BTreeSet::new();
    let mut seed = 0;
    while orders.len() < 5 {
        let c = RunConfig {
            seed,
            order_mode: OrderMode::Shuffle,
            ..base.clone()
        };
        seed += 1;
        let result = run(&c, &mut backend).map_err(|e| e.to_string())?;
        if orders.insert(result.orders[0].clone()) {
            shuffle_captions.insert(result.last().text.clone());
        }
    }
    let mut sequential = BTreeSet::new();
    for _ in 0..5 {
        let c = RunConfig {
            seed: 0,
            order_mode: OrderMode::Sequential,
            ..base.clone()
        };
        sequential.insert(run(&c, &mut backend).map_err(|e| e.to_string())?.last().text.clone());
    }
    ensure(shuffle_captions.len() >= 2, || format!("5 shuffle orders reached only {shuffle_captions:?}"))?;
    ensure(sequential.len() == 1, || format!("sequential runs reached {sequential:?}"))?;
    Ok(format!(
        "5 shuffle orders -> {} captions {:?}; 5 sequential runs -> {:?}",
        shuffle_captions.len(),
        shuffle_captions,
        sequential
    ))
}

fn metrics() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let div1 = |texts: &[&str]| div_n(&CaptionSet::from_texts(texts), 1, ShortCaption::Error).unwrap();
    let words = |t: &str| normalize_words(t);
    let checks: Vec<(&str, f64, f64)> = vec![
        ("Div-1 [\" a cat\", \"a dog\"]", div1(&[" a cat", "a dog"]), 0.75),
        ("Div-1 [\"a cat\", \"a cat\"]", div1(&["a cat", "a cat"]), 0.5),
        ("BLEU-1 identity", bleu_n(&words("a cat sits on the bed"), &[words("a cat sits on the bed")], 1).unwrap(), 1.0),
        ("BLEU-1 mismatch", bleu_n(&words("a cat"), &[words("the dog")], 1).unwrap(), 0.0),
        ("bsim identical", bsim(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0]).unwrap(), 1.0),
        ("bsim orthogonal", bsim(&[1.0, 0.0, 2.0], &[0.0, 5.0, 0.0]).unwrap(), 0.0),
        ("bsim anti-parallel", bsim(&[1.0, -2.0, 0.5], &[-2.0, 4.0, -1.0]).unwrap(), -1.0),
    ];
    for (name, got, want) in &checks {
        ensure(close(*got, *want), || format!("{name}: got {got}, want {want}"))?;
    }
    Ok(format!("{} metric identities within 1e-12", checks.len()))
}

fn replay_config(name: &str) -> common::Scenario {
    scenarios().into_iter().find(|s| s.name == name).unwrap()
}

fn protocol_golden() -> Outcome {
    for s in scenarios() {
        let transport = ReplayTransport::open(&s.transcript_path()).map_err(|e| format!("{}: {e}", s.name))?;
        let mut remote = RemoteBackend::connect(transport).map_err(|e| format!("{}: {e}", s.name))?;
        let bag = SyntheticBackend::builtin_image(s.fixture, s.image).unwrap();
        remote.register_image(bag.as_bytes()).map_err(|e| format!("{}: {e}", s.name))?;
        let result = run(&s.config, &mut remote).map_err(|e| format!("{}: {e}", s.name))?;
        ensure(remote.transport().is_exhausted(), || format!("{}: recording not fully consumed", s.name))?;
        let stored = fs::read_to_string(s.trace_path()).unwrap();
        ensure(trace_string(&result).unwrap() == stored, || format!("{}: replayed trace differs from golden trace", s.name))?;
    }

    let base = replay_config("toy7_cat");
    let dir = golden_dir().join("malformed");
    let mut names: Vec<_> = fs::read_dir(&dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    names.sort();
    ensure(!names.is_empty(), || "no malformed fixtures found".into())?;
    for path in &names {
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| -> Result<(), Error> {
            let mut remote = RemoteBackend::connect(ReplayTransport::open(path)?)?;
            remote.register_image(SyntheticBackend::builtin_image(base.fixture, base.image).unwrap().as_bytes())?;
            run(&base.config, &mut remote).map(|_| ()).map_err(|f| f.error)
        }));
        let name = path.file_name().unwrap().to_string_lossy();
        match outcome {
            Err(_) => return Err(format!("{name}: client panicked")),
            Ok(Ok(())) => return Err(format!("{name}: malformed reply was accepted")),
            Ok(Err(Error::Scorer {
                source: ScorerError::Protocol(_),
                ..
            })) => {}
            Ok(Err(other)) => return Err(format!("{name}: expected a protocol error, got {other}")),
        }
    }
    Ok(format!(
        "{} recordings replay to identical traces; {} malformed fixtures raise protocol errors",
        scenarios().len(),
        names.len()
    ))
}

fn greedy_equivalence() -> Outcome {
    let mut backend = backend_with_image(&fixtures::SCENES, "cat_on_bed");
    for seed in 0..20u64 {
        for mode in [OrderMode::Sequential, OrderMode::Shuffle] {
            let config = RunConfig {
                n: 6,
                k: 1,
                iterations: 3,
                seed,
                order_mode: mode,
                weights: FusionWeights::new(1.0, 0.0, 0.0),
                ..RunConfig::default()
            };
            let engine = run(&config, &mut backend).map_err(|e| e.to_string())?;
            let prompt = backend.vocabulary().encode_words(&config.prompt_text).unwrap();
            let sampled = gibbs_lm_sample(&prompt, 6, 3, mode, &mut backend, &mut engine_rng(seed), LmSampleMode::Greedy)
                .map_err(|e| e.to_string())?;
            ensure(engine.last().slots_after == sampled, || format!("seed {seed}: greedy sampler and engine differ"))?;
        }
    }
    Ok("40 greedy Gibbs samples equal K=1 fluency-only engine runs".into())
}

fn main() -> ExitCode {
    let mut corpus_a = ledger_corpus();
    let mut corpus_b = ledger_corpus();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("1 step-oracle equivalence", Box::new(step_oracle)),
        ("2 global exactness at n=1", Box::new(global_n1)),
        ("3 weight-collapse identities", Box::new(weight_collapse)),
        ("4 freeze invariant", Box::new(freeze_invariant)),
        ("5 call-count ledger", Box::new(|| call_ledger(&mut corpus_a))),
        ("6 best-of re-ranking", Box::new(|| best_of(&mut corpus_b))),
        ("7 determinism", Box::new(determinism)),
        ("8 order diversity", Box::new(order_diversity)),
        ("9 metrics", Box::new(metrics)),
        ("10 protocol golden files", Box::new(protocol_golden)),
        ("extra greedy sampler equivalence", Box::new(greedy_equivalence)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p near2-cli --test acceptance`.

// NaN must fail the gate comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::process::{Command, ExitCode};
use std::time::Instant;

use near2_core::encoder::header_len;
use near2_core::eval::{normalize_against_corpus, normalize_scores, score_histogram};
use near2_core::losses::{
    grad_check_report, mnrl_hinge, mrl_compose, multitask_step_loss, ocl, LossOutput, MnrlHinge, MrlConfig,
    OnlineContrastive, PairBatch, Probe, TripletBatch,
};
use near2_core::metrics::{mrr_at_k, ndcg_at_k, precision_recall_at_k};
use near2_core::trainer::AblationData;
use near2_core::{
    cosine_prefix, gen_synthetic, run_ablation, sequential_evaluate, train, DimSet, Document, EncoderConfig,
    EncoderModel, EvalConfig, Gain, NestedEmbedding, PrefixIndex, Schedule, SynthSpec, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and sizes fixed by the acceptance criteria.
const DECOMPOSITION_TOL: f64 = 1e-9;
const DECOMPOSITION_BATCHES: usize = 1000;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUCKETS: usize = 64;
const GRAD_HIDDEN: usize = 8;
const GRAD_DIM: usize = 16;
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 1000;
const METRIC_MAX_DOCS: usize = 20;
const RETRIEVAL_INSTANCES: usize = 1000;
const RETRIEVAL_MAX_CORPUS: usize = 200;
const RETRIEVAL_MAX_DIM: usize = 64;
const NESTED_DIMS: [usize; 5] = [768, 512, 256, 128, 64];
const SIZE_RATIO: u64 = 12;
const GATE_SEED: u64 = 42;
const GATE_QUERIES: usize = 500;
const GATE_TITLES: usize = 5000;
const GATE_EPOCHS: usize = 2;
const GATE_SMALL_VS_FULL: f64 = 0.90;
const GATE_TRAINED_VS_UNTRAINED: f64 = 1.5;
const TIME_LIMIT_SECS: f64 = 300.0;

// Gate data and optimizer settings not fixed by the criteria.
const GATE_CATEGORIES: usize = 50;
const GATE_ALPHANUM: f64 = 0.0;
const GATE_SHARED_SUBSTRING: f64 = 1.0;
const GATE_LR: f64 = 1e-3;

type Outcome = Result<String, String>;

fn report(n: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS [{n:>2}] {name}: {detail} ({secs:.1}s)");
            true
        }
        Err(detail) => {
            println!("FAIL [{n:>2}] {name}: {detail} ({secs:.1}s)");
            false
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_dims(rng: &mut ChaCha8Rng, full: usize) -> DimSet {
    let mut dims = vec![full];
    let mut m = full / 2;
    while m >= 1 {
        if rng.gen_bool(0.6) {
            dims.push(m);
        }
        m /= 2;
    }
    DimSet::new(dims).unwrap()
}

fn random_embedding(rng: &mut ChaCha8Rng, dims: &DimSet) -> NestedEmbedding {
    let values = (0..dims.full()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    NestedEmbedding::new(values, dims.clone()).unwrap()
}

fn random_triplets(rng: &mut ChaCha8Rng, dims: &DimSet) -> TripletBatch {
    let n = rng.gen_range(1..=4);
    let q = (0..n).map(|_| random_embedding(rng, dims)).collect();
    let p = (0..n)
        .map(|_| (0..rng.gen_range(1..=3)).map(|_| random_embedding(rng, dims)).collect())
        .collect();
    let neg = (0..n)
        .map(|_| (0..rng.gen_range(1..=4)).map(|_| random_embedding(rng, dims)).collect())
        .collect();
    TripletBatch::new(q, p, neg).unwrap()
}

fn random_pairs(rng: &mut ChaCha8Rng, dims: &DimSet) -> PairBatch {
    let n = rng.gen_range(2..=8);
    let l = (0..n).map(|_| random_embedding(rng, dims)).collect();
    let r = (0..n).map(|_| random_embedding(rng, dims)).collect();
    let labels = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    PairBatch::new(l, r, labels).unwrap()
}

fn weighted_sum(out: &LossOutput, config: &MrlConfig) -> f64 {
    config.iter().map(|(m, c)| c * out.per_dim[&m]).sum()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..DECOMPOSITION_BATCHES {
        let full = *[8, 16, 32, 64].choose(&mut rng).unwrap();
        let dims = random_dims(&mut rng, full);
        let weights = (0..dims.len()).map(|_| rng.gen_range(0.1..2.0)).collect();
        let config = MrlConfig::new(dims.clone(), weights).map_err(err)?;
        let margin = rng.gen_range(0.0..2.0);
        let margin_c = rng.gen_range(0.05..1.95);
        let triplets = random_triplets(&mut rng, &dims);
        let pairs = random_pairs(&mut rng, &dims);

        let a = mrl_compose(&MnrlHinge { margin }, &triplets, &config).map_err(err)?;
        let b = mrl_compose(&OnlineContrastive { margin: margin_c }, &pairs, &config).map_err(err)?;
        for (out, task) in [(&a, "mnrl"), (&b, "ocl")] {
            ensure(out.per_dim.len() == dims.len(), || format!("batch {i} {task}: per-dim entries missing"))?;
            worst = worst.max((out.value - weighted_sum(out, &config)).abs());
        }
        // per-dimension values are the task evaluated alone at that dimension
        for m in dims.iter() {
            worst = worst.max((a.per_dim[&m] - mnrl_hinge(&triplets, margin, m).map_err(err)?.value).abs());
            worst = worst.max((b.per_dim[&m] - ocl(&pairs, margin_c, m).map_err(err)?.value).abs());
        }
        let lambda = rng.gen_range(0.0..2.0);
        let mt = multitask_step_loss(&triplets, &pairs, &config, margin, margin_c, lambda).map_err(err)?;
        worst = worst.max((mt.value - (weighted_sum(&a, &config) + lambda * weighted_sum(&b, &config))).abs());
    }
    ensure(worst <= DECOMPOSITION_TOL, || format!("max |value - sum c_m L_m| = {worst:e} > {DECOMPOSITION_TOL:e}"))?;
    Ok(format!("{DECOMPOSITION_BATCHES} batches, max deviation {worst:e} <= {DECOMPOSITION_TOL:e}"))
}

struct GradCase {
    shape: Vec<(usize, usize)>,
    labels: Vec<bool>,
    texts: Vec<String>,
}

const GRAD_VOCAB: &[&str] = &[
    "lamp", "desk", "oak", "red", "s2716dg", "cable", "usb", "blue", "chair", "mesh", "steel", "glass", "x100",
];

impl GradCase {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let shape: Vec<(usize, usize)> = (0..3).map(|_| (rng.gen_range(1..=2), rng.gen_range(1..=3))).collect();
        let mut labels: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let n = shape.iter().map(|(p, q)| 1 + p + q).sum::<usize>() + 2 * labels.len();
        let texts = (0..n)
            .map(|_| {
                let w = rng.gen_range(1..=4);
                (0..w).map(|_| *GRAD_VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        GradCase { shape, labels, texts }
    }

    fn batches(&self, embs: Vec<NestedEmbedding>) -> (TripletBatch, PairBatch) {
        let mut it = embs.into_iter();
        let (mut q, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
        for &(np, nn) in &self.shape {
            q.push(it.next().unwrap());
            p.push(it.by_ref().take(np).collect());
            n.push(it.by_ref().take(nn).collect());
        }
        let (mut l, mut r) = (Vec::new(), Vec::new());
        for _ in &self.labels {
            l.push(it.next().unwrap());
            r.push(it.next().unwrap());
        }
        (
            TripletBatch::new(q, p, n).unwrap(),
            PairBatch::new(l, r, self.labels.clone()).unwrap(),
        )
    }
}

#[derive(Clone, Copy)]
enum GradTarget {
    Mnrl,
    Ocl,
    Mrl,
    Multitask,
}

fn grad_probe(case: &GradCase, params: &[f64], dims: &DimSet, target: GradTarget) -> near2_core::Result<Probe> {
    let model = EncoderModel::from_params(GRAD_BUCKETS, GRAD_HIDDEN, dims.clone(), 0, params.to_vec())?;
    let encoded = model.encode_for_backward(&case.texts)?;
    let (triplets, pairs) = case.batches(encoded.embeddings.clone());
    let t_slots = triplets.slot_count();
    let mut upstream = vec![vec![0.0; GRAD_DIM]; case.texts.len()];
    let out = match target {
        GradTarget::Mnrl => {
            let o = mnrl_hinge(&triplets, 0.75, GRAD_DIM)?;
            upstream[..t_slots].clone_from_slice(&o.gradients);
            o
        }
        GradTarget::Ocl => {
            let o = ocl(&pairs, 0.5, GRAD_DIM / 2)?;
            upstream[t_slots..].clone_from_slice(&o.gradients);
            o
        }
        GradTarget::Mrl => {
            let config = MrlConfig::new(dims.clone(), vec![1.0, 0.5, 2.0]).unwrap();
            let o = mrl_compose(&MnrlHinge { margin: 0.75 }, &triplets, &config)?;
            upstream[..t_slots].clone_from_slice(&o.gradients);
            o
        }
        GradTarget::Multitask => {
            let o = multitask_step_loss(&triplets, &pairs, &MrlConfig::uniform(dims.clone()), 0.75, 0.5, 0.7)?;
            upstream.clone_from_slice(&o.gradients);
            o
        }
    };
    let grads = model.backward_encoded(&encoded, &upstream)?;
    Ok(Probe {
        value: out.value,
        gradient: grads.values,
        breakpoint_gap: out.breakpoint_gap,
        activity: out.activity,
    })
}

fn criterion_2() -> Outcome {
    let dims = DimSet::new(vec![GRAD_DIM, GRAD_DIM / 2, GRAD_DIM / 4]).unwrap();
    let mut lines = Vec::new();
    for (name, target) in [
        ("mnrl_hinge", GradTarget::Mnrl),
        ("ocl", GradTarget::Ocl),
        ("mrl_compose", GradTarget::Mrl),
        ("multitask_step_loss", GradTarget::Multitask),
    ] {
        let (mut worst, mut checked, mut skipped): (f64, usize, usize) = (0.0, 0, 0);
        for seed in 0..GRAD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let case = GradCase::new(&mut rng);
            let model = EncoderModel::new(&EncoderConfig {
                buckets: GRAD_BUCKETS,
                feature_dim: GRAD_HIDDEN,
                dims: dims.clone(),
                seed,
            })
            .map_err(err)?;
            let r = grad_check_report(|p| grad_probe(&case, p, &dims, target), model.params(), GRAD_STEP).map_err(err)?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
        ensure(checked > 0, || format!("{name}: no coordinate checked"))?;
        ensure(worst <= GRAD_TOL, || format!("{name}: max relative error {worst:e} > {GRAD_TOL:e}"))?;
        lines.push(format!("{name} {worst:.1e} ({checked} checked, {skipped} skipped)"));
    }
    Ok(format!(
        "{GRAD_SEEDS} seeds, B={GRAD_BUCKETS} H={GRAD_HIDDEN} D={GRAD_DIM}, max rel error <= {GRAD_TOL:e}: {}",
        lines.join("; ")
    ))
}

/// Brute-force metrics written independently of the library.
fn oracle_metrics(ranked: &[String], relevant: &[String], grades: &BTreeMap<String, u8>, k: usize, graded: bool) -> [f64; 4] {
    let top: Vec<&String> = ranked.iter().take(k).collect();
    let is_rel = |id: &String| relevant.iter().any(|r| r == id);
    let hits = top.iter().filter(|id| is_rel(id)).count() as f64;
    let gain = |id: &String| {
        if !is_rel(id) {
            0.0
        } else if graded {
            2f64.powi(i32::from(grades[id])) - 1.0
        } else {
            1.0
        }
    };
    let mut dcg = 0.0;
    for (i, id) in top.iter().enumerate() {
        dcg += gain(id) / ((i + 2) as f64).log2();
    }
    let mut ideal: Vec<f64> = relevant.iter().map(gain).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idcg = 0.0;
    for (i, g) in ideal.iter().take(k).enumerate() {
        idcg += g / ((i + 2) as f64).log2();
    }
    let mut rr = 0.0;
    for (i, id) in top.iter().enumerate() {
        if is_rel(id) {
            rr = 1.0 / (i + 1) as f64;
            break;
        }
    }
    [hits / k as f64, hits / relevant.len() as f64, dcg / idcg, rr]
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..METRIC_INSTANCES {
        let n = rng.gen_range(1..=METRIC_MAX_DOCS);
        let mut docs: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        docs.shuffle(&mut rng);
        let mut relevant: Vec<String> = docs.iter().filter(|_| rng.gen_bool(0.35)).cloned().collect();
        if relevant.is_empty() {
            relevant.push(docs[rng.gen_range(0..n)].clone());
        }
        let grades: BTreeMap<String, u8> = docs.iter().map(|d| (d.clone(), rng.gen_range(4..=5))).collect();
        let ranked: Vec<String> = docs[..rng.gen_range(0..=n)].to_vec();
        let k = rng.gen_range(1..=n + 2);
        let graded = rng.gen_bool(0.3);
        let rel_set: BTreeSet<String> = relevant.iter().cloned().collect();
        let (p, r) = precision_recall_at_k(&ranked, &rel_set, k).map_err(err)?;
        let gain = if graded { Gain::Graded } else { Gain::Binary };
        let nd = ndcg_at_k(&ranked, &rel_set, &grades, k, gain).map_err(err)?;
        let mr = mrr_at_k(&ranked, &rel_set, k).map_err(err)?;
        let want = oracle_metrics(&ranked, &relevant, &grades, k, graded);
        for (got, want) in [p, r, nd, mr].into_iter().zip(want) {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= METRIC_TOL, || format!("max deviation from brute force {worst:e} > {METRIC_TOL:e}"))?;
    let rel: BTreeSet<String> = ["a".to_string()].into();
    let ranked = ["x", "a", "c"];
    let anchor_ndcg = ndcg_at_k(&ranked, &rel, &BTreeMap::new(), 5, Gain::Binary).map_err(err)?;
    let anchor_mrr = mrr_at_k(&ranked, &rel, 10).map_err(err)?;
    ensure((anchor_ndcg - 0.6309).abs() < 5e-5, || format!("NDCG anchor {anchor_ndcg} != 0.6309"))?;
    ensure(anchor_mrr == 0.5, || format!("MRR anchor {anchor_mrr} != 0.5"))?;
    Ok(format!(
        "{METRIC_INSTANCES} instances (n <= {METRIC_MAX_DOCS}), max deviation {worst:e}; anchors NDCG {anchor_ndcg:.4}, MRR {anchor_mrr}"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tie_instances = 0;
    for inst in 0..RETRIEVAL_INSTANCES {
        let full = *[4, 8, 16, 32, RETRIEVAL_MAX_DIM].choose(&mut rng).unwrap();
        let dims = random_dims(&mut rng, full);
        let n = rng.gen_range(1..=RETRIEVAL_MAX_CORPUS);
        // Values on a coarse grid so exact duplicates and equal scores occur.
        let grid = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(-4i8..=4)) / 4.0;
        let mut embs: Vec<NestedEmbedding> = Vec::with_capacity(n);
        for i in 0..n {
            let e = if i > 0 && rng.gen_bool(0.15) {
                embs[rng.gen_range(0..i)].clone()
            } else if rng.gen_bool(0.05) {
                NestedEmbedding::degenerate(dims.clone())
            } else {
                NestedEmbedding::new((0..full).map(|_| grid(&mut rng)).collect(), dims.clone()).unwrap()
            };
            embs.push(e);
        }
        let docs = (0..n).map(|i| Document::new(format!("doc{i}"), format!("title {i}"))).collect();
        let index = PrefixIndex::from_embeddings(docs, &embs).map_err(err)?;
        let mut qv: Vec<f64> = (0..full).map(|_| grid(&mut rng)).collect();
        qv[0] = 1.0;
        let query = NestedEmbedding::new(qv, dims.clone()).unwrap();
        let m = dims.as_slice()[rng.gen_range(0..dims.len())];
        let k = rng.gen_range(1..=n + 3);

        // brute force: score every usable row, full sort by score desc then row asc
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for (row, e) in embs.iter().enumerate() {
            if e.is_degenerate() {
                continue;
            }
            let prefix = e.truncate(m).unwrap();
            if prefix.iter().map(|x| x * x).sum::<f64>().sqrt() <= near2_core::nested::ZERO_NORM_EPS {
                continue;
            }
            let s = cosine_prefix(&query, e, m).map_err(err)?;
            let q = query.truncate(m).unwrap();
            let direct = q.iter().zip(prefix).map(|(a, b)| a * b).sum::<f64>()
                / (q.iter().map(|x| x * x).sum::<f64>().sqrt() * prefix.iter().map(|x| x * x).sum::<f64>().sqrt());
            ensure((s - direct.clamp(-1.0, 1.0)).abs() <= 1e-12, || format!("instance {inst}: cosine {s} vs {direct}"))?;
            scored.push((row, s));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if scored.windows(2).any(|w| w[0].1 == w[1].1) {
            tie_instances += 1;
        }
        scored.truncate(k);
        let hits = index.search_exact(&query, m, k).map_err(err)?;
        let got: Vec<(usize, u64)> = hits.iter().map(|h| (h.row, h.score.to_bits())).collect();
        let want: Vec<(usize, u64)> = scored.iter().map(|(r, s)| (*r, s.to_bits())).collect();
        ensure(got == want, || format!("instance {inst}: search_exact differs from brute force"))?;
        ensure(hits.iter().enumerate().all(|(i, h)| h.rank == i + 1), || format!("instance {inst}: ranks"))?;

        let kf = k.min(n);
        let exact = index.search_exact(&query, m, kf).map_err(err)?;
        let funnel = index.search_funnel(&query, dims.smallest(), m, n, kf).map_err(err)?;
        ensure(exact == funnel && exact.iter().zip(&funnel).all(|(a, b)| a.score.to_bits() == b.score.to_bits()), || {
            format!("instance {inst}: funnel with full shortlist differs from exact search")
        })?;
    }
    ensure(tie_instances > 0, || "no instance exercised ties".into())?;
    Ok(format!(
        "{RETRIEVAL_INSTANCES} instances (corpus <= {RETRIEVAL_MAX_CORPUS}, D <= {RETRIEVAL_MAX_DIM}), {tie_instances} with tied scores; funnel(s = corpus) bitwise equal"
    ))
}

fn full_model() -> EncoderModel {
    EncoderModel::new(&EncoderConfig::default()).unwrap()
}

fn criterion_5() -> Outcome {
    let ds = gen_synthetic(&SynthSpec {
        query_count: 40,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let model = full_model();
    let records: Vec<_> = ds.all_records().cloned().collect();
    let docs = near2_core::split_judgments(&records).corpus;
    let titles: Vec<&str> = docs.iter().map(|d| d.title.as_str()).collect();
    let embs = model.encode_batch(&titles).map_err(err)?;
    let full = PrefixIndex::from_embeddings(docs.clone(), &embs).map_err(err)?;
    let queries: Vec<String> = ds.test.iter().map(|r| r.query.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut compared = 0;
    for m in NESTED_DIMS {
        let truncated: Vec<NestedEmbedding> = embs.iter().map(|e| e.truncate_as_embedding(m)).collect::<Result<_, _>>().map_err(err)?;
        let small = PrefixIndex::from_embeddings(docs.clone(), &truncated).map_err(err)?;
        ensure(small.full_dim() == m, || format!("truncated index at {m} has D = {}", small.full_dim()))?;
        for q in &queries {
            let qe = model.encode(q).map_err(err)?;
            let a = full.search_exact(&qe, m, 10).map_err(err)?;
            let b = small.search_exact(&qe.truncate_as_embedding(m).map_err(err)?, m, 10).map_err(err)?;
            let same = a == b && a.iter().zip(&b).all(|(x, y)| x.score.to_bits() == y.score.to_bits());
            ensure(same, || format!("m = {m}, query {q:?}: hits differ"))?;
            compared += 1;
        }
    }
    Ok(format!(
        "{} titles, {compared} query/dimension pairs over m in {NESTED_DIMS:?}: identical hits",
        docs.len()
    ))
}

fn criterion_6() -> Outcome {
    let model = full_model();
    let docs: Vec<Document> = (0..37).map(|i| Document::new(format!("id-{i}"), format!("title number {i} é"))).collect();
    let titles: Vec<&str> = docs.iter().map(|d| d.title.as_str()).collect();
    let embs = model.encode_batch(&titles).map_err(err)?;
    let index = PrefixIndex::from_embeddings(docs.clone(), &embs).map_err(err)?;
    let small = index.memory_footprint(64).map_err(err)?.vector_bytes;
    let large = index.memory_footprint(768).map_err(err)?.vector_bytes;
    ensure(large == SIZE_RATIO * small, || format!("vector bytes 768:{large} vs 64:{small} is not 12:1"))?;
    ensure(small == 37 * 64 * 4, || format!("vector bytes at 64 = {small}"))?;

    // Model file: header fields, dims list, seed, then f32 parameters.
    let b = model.buckets() as u64;
    let h = model.feature_dim() as u64;
    let d = model.full_dim() as u64;
    let n_dims = model.dims().len() as u64;
    let model_expected = 8 + 4 + 4 + 4 + 4 + 2 + 4 * n_dims + 8 + 4 * (b * h + h * d);
    let model_bytes = model.to_bytes().len() as u64;
    ensure(model_bytes == model_expected, || format!("model file {model_bytes} bytes, format says {model_expected}"))?;
    ensure(header_len(model.dims().len()) as u64 + 4 * (b * h + h * d) == model_expected, || "header_len disagrees".into())?;

    // Index file: header, dims, degenerate bitmap, vectors, doc table.
    let count = docs.len() as u64;
    let doc_table: u64 = docs.iter().map(|x| 2 + x.id.len() as u64 + 4 + x.title.len() as u64).sum();
    let index_expected = 8 + 4 + 4 + 8 + 2 + 4 * n_dims + count.div_ceil(8) + 4 * count * d + doc_table;
    let index_bytes = index.to_bytes().map_err(err)?.len() as u64;
    ensure(index_bytes == index_expected, || format!("index file {index_bytes} bytes, format says {index_expected}"))?;
    ensure(index.file_size() as u64 == index_expected, || "file_size disagrees".into())?;
    Ok(format!(
        "vector bytes {large}:{small} = {SIZE_RATIO}:1; model {model_bytes} B and index {index_bytes} B match the format arithmetic"
    ))
}

fn gate_spec() -> SynthSpec {
    SynthSpec {
        seed: GATE_SEED,
        query_count: GATE_QUERIES,
        titles_per_query: GATE_TITLES / GATE_QUERIES,
        category_count: GATE_CATEGORIES,
        alphanum_fraction: GATE_ALPHANUM,
        shared_substring_fraction: GATE_SHARED_SUBSTRING,
    }
}

fn gate_config() -> TrainConfig {
    TrainConfig {
        epochs: GATE_EPOCHS,
        learning_rate: GATE_LR,
        dims: DimSet::new(NESTED_DIMS.to_vec()).unwrap(),
        seed: GATE_SEED,
        schedule: Schedule::MnrlOclNear2,
        ..TrainConfig::default()
    }
}

fn gate_model_config() -> EncoderConfig {
    EncoderConfig {
        seed: GATE_SEED,
        ..EncoderConfig::default()
    }
}

struct GateRun {
    model_bytes: Vec<u8>,
    report_json: String,
    ndcg5: BTreeMap<usize, f64>,
    untrained768: f64,
    losses: Vec<(String, f64, f64)>,
}

fn gate_run() -> Result<GateRun, String> {
    let ds = gen_synthetic(&gate_spec()).map_err(err)?;
    let titles = ds.all_records().count();
    ensure(titles == GATE_TITLES, || format!("dataset has {titles} titles"))?;
    let config = gate_config();
    let untrained = EncoderModel::new(&gate_model_config()).map_err(err)?;
    let eval = EvalConfig::new(config.dims.clone());
    let base = sequential_evaluate(&untrained, &ds.test, &eval).map_err(err)?;
    let (model, history) = train(untrained, &ds.train, None, &config).map_err(err)?;
    let after = sequential_evaluate(&model, &ds.test, &eval).map_err(err)?;
    let ndcg5 = NESTED_DIMS.iter().map(|&m| (m, after.get(m, 5).unwrap().ndcg)).collect();
    let losses = config
        .schedule
        .phases()
        .iter()
        .map(|p| {
            (
                p.name.to_string(),
                history.epoch_mean_loss(p.name, 1).unwrap_or(f64::NAN),
                history.epoch_mean_loss(p.name, 2).unwrap_or(f64::NAN),
            )
        })
        .collect();
    Ok(GateRun {
        model_bytes: model.to_bytes(),
        report_json: after.to_json().map_err(err)?,
        ndcg5,
        untrained768: base.get(768, 5).unwrap().ndcg,
        losses,
    })
}

fn criterion_7(run: &GateRun) -> Outcome {
    let full = run.ndcg5[&768];
    let small = run.ndcg5[&64];
    let mut failures = Vec::new();
    if !(small >= GATE_SMALL_VS_FULL * full) {
        failures.push(format!("(a) NDCG@5 m=64 {small:.4} < {GATE_SMALL_VS_FULL} x m=768 {full:.4}"));
    }
    if !(full >= GATE_TRAINED_VS_UNTRAINED * run.untrained768) {
        failures.push(format!(
            "(b) trained NDCG@5 {full:.4} < {GATE_TRAINED_VS_UNTRAINED} x untrained {:.4}",
            run.untrained768
        ));
    }
    for (phase, e1, e2) in &run.losses {
        if !(e2 < e1) {
            failures.push(format!("(c) phase {phase}: epoch-2 loss {e2:.4} >= epoch-1 {e1:.4}"));
        }
    }
    let losses: Vec<String> = run.losses.iter().map(|(p, a, b)| format!("{p} {a:.3}->{b:.3}")).collect();
    let detail = format!(
        "NDCG@5 768 {full:.4}, 64 {small:.4} (ratio {:.3}); untrained 768 {:.4} (gain {:.2}x); epoch loss {}",
        small / full,
        run.untrained768,
        full / run.untrained768,
        losses.join(", ")
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

fn ablation_run() -> Result<(String, String, near2_core::AblationReport), String> {
    let ds = gen_synthetic(&gate_spec()).map_err(err)?;
    let data = AblationData {
        train: &ds.train,
        valid: None,
        test: &ds.test,
    };
    let r = run_ablation(data, &gate_model_config(), &gate_config(), &Schedule::ALL).map_err(err)?;
    Ok((r.to_csv(), serde_json::to_string(&r).map_err(err)?, r))
}

fn criterion_8(first: &(String, String, near2_core::AblationReport), second: &(String, String, near2_core::AblationReport)) -> Outcome {
    let (csv, json, r) = first;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    ensure(rows.len() == 4, || format!("{} rows", rows.len()))?;
    let labels: Vec<&str> = rows.iter().map(|l| l.split(',').next().unwrap()).collect();
    ensure(labels == ["MNRL", "OCL", "MNRL + OCL", "MRL: MNRL + OCL"], || format!("labels {labels:?}"))?;
    for row in &r.rows {
        for c in &row.cells {
            let b5 = r.baseline.get(c.dim, 5).unwrap().ndcg;
            let b10 = r.baseline.get(c.dim, 10).unwrap().mrr;
            let want5 = (c.ndcg_at_5 - b5) / b5;
            let want10 = (c.mrr_at_10 - b10) / b10;
            ensure(c.delta_ndcg_at_5 == Some(want5) && c.delta_mrr_at_10 == Some(want10), || {
                format!("{} m={}: delta is not (schedule - baseline) / baseline", row.label, c.dim)
            })?;
        }
    }
    ensure(*csv == second.0 && *json == second.1, || "repeated ablation differs".into())?;
    let row = |i: usize| {
        let c = &r.rows[i].cells[0];
        format!("{} {:+.1}%", r.rows[i].label, c.delta_ndcg_at_5.unwrap() * 100.0)
    };
    Ok(format!(
        "4 rows x {} dims, deltas (x - base)/base, byte-identical on repeat; NDCG@5 delta at 768: {}",
        r.rows[0].cells.len(),
        (0..4).map(row).collect::<Vec<_>>().join(", ")
    ))
}

fn criterion_9(a: &GateRun, b: &GateRun, ab1: &(String, String, near2_core::AblationReport), ab2: &(String, String, near2_core::AblationReport)) -> Outcome {
    ensure(a.model_bytes == b.model_bytes, || "gate model files differ between runs".into())?;
    ensure(a.report_json == b.report_json, || "gate reports differ between runs".into())?;
    ensure(ab1.0 == ab2.0 && ab1.1 == ab2.1, || "ablation reports differ between runs".into())?;
    Ok(format!(
        "model file ({} bytes), gate report and ablation report bitwise identical across runs",
        a.model_bytes.len()
    ))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Dyadic scores and shifts: every sum and difference is exact.
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-1024i32..=1024)) / 1024.0).collect();
        let shift = f64::from(rng.gen_range(-512i32..=512)) / 256.0;
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        ensure(normalize_against_corpus(&scores) == normalize_against_corpus(&shifted), || {
            format!("shift {shift} changed normalized scores")
        })?;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(normalize_scores(&scores, min) == normalize_scores(&shifted, min + shift), || "top-k shift".into())?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift = rng.gen_range(-1.0..1.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        for (a, b) in normalize_against_corpus(&scores).iter().zip(normalize_against_corpus(&shifted)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("arbitrary shifts deviate by {worst:e}"))?;

    for _ in 0..200 {
        let n = rng.gen_range(0..500);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let bins = rng.gen_range(1..64);
        let h = score_histogram(&scores, bins).map_err(err)?;
        ensure(h.total() == n as u64 && h.bins.len() == bins, || format!("histogram lost counts ({} of {n})", h.total()))?;
    }

    search_columns()?;
    Ok("shift invariance exact on dyadic grid (<= 1e-12 otherwise); histograms conserve counts; search prints rank/id/title/score/normalized_score".into())
}

fn search_columns() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let p = dir.path();
    let run = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_near2"))
            .args(args)
            .current_dir(p)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(err)?;
        ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    run(&["synth", "--queries", "40", "--out", "data"])?;
    run(&["train", "--data", "data/train.jsonl", "--epochs", "0", "--buckets", "1024", "--feature-dim", "16", "--dims", "64,32", "--out", "m.bin"])?;
    run(&["index", "--model", "m.bin", "--titles", "data/test.jsonl", "--out", "t.idx"])?;
    let text = run(&["search", "--index", "t.idx", "--model", "m.bin", "--query", "plants", "--dim", "32", "--k", "10"])?;
    let mut lines = text.lines();
    ensure(lines.next() == Some("rank\tid\ttitle\tscore\tnormalized_score"), || "search header".into())?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    ensure(rows.len() == 10, || format!("{} result rows", rows.len()))?;
    for (i, r) in rows.iter().enumerate() {
        ensure(r.len() == 5 && r[0] == (i + 1).to_string() && !r[2].is_empty(), || format!("row {i}: {r:?}"))?;
        let norm: f64 = r[4].parse().map_err(err)?;
        ensure(norm >= 0.0, || format!("row {i}: negative normalized score"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let total = Instant::now();
    let run = |n: usize, name: &str, f: &dyn Fn() -> Outcome| report(n, name, Instant::now(), f());
    let mut all = true;
    all &= run(1, "loss decomposition", &criterion_1);
    all &= run(2, "gradient correctness", &criterion_2);
    all &= run(3, "metric oracles", &criterion_3);
    all &= run(4, "retrieval oracle", &criterion_4);
    all &= run(5, "prefix-index equivalence", &criterion_5);
    all &= run(6, "size ratios", &criterion_6);

    let t = Instant::now();
    let gate = (gate_run(), gate_run());
    let gate_ok = match &gate.0 {
        Ok(g) => report(7, "desk-scale gate", t, criterion_7(g)),
        Err(e) => report(7, "desk-scale gate", t, Err(e.clone())),
    };
    all &= gate_ok;

    let t = Instant::now();
    let ablation = (ablation_run(), ablation_run());
    all &= match (&ablation.0, &ablation.1) {
        (Ok(a), Ok(b)) => report(8, "ablation harness", t, criterion_8(a, b)),
        (Err(e), _) | (_, Err(e)) => report(8, "ablation harness", t, Err(e.clone())),
    };

    let t = Instant::now();
    all &= match (&gate, &ablation) {
        ((Ok(a), Ok(b)), (Ok(x), Ok(y))) => report(9, "determinism", t, criterion_9(a, b, x, y)),
        _ => report(9, "determinism", t, Err("an earlier run failed".into())),
    };
    all &= run(10, "score tooling and search output", &criterion_10);

    let secs = total.elapsed().as_secs_f64();
    all &= report(
        11,
        "suite time",
        Instant::now(),
        if secs < TIME_LIMIT_SECS {
            Ok(format!("{secs:.1}s < {TIME_LIMIT_SECS}s"))
        } else {
            Err(format!("{secs:.1}s >= {TIME_LIMIT_SECS}s"))
        },
    );
    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}

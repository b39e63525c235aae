use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use near2_core::data::split_judgments;
use near2_core::eval::{delta_report, normalize_scores, score_histogram, DeltaReport};
use near2_core::trainer::AblationData;
use near2_core::{
    cosine_prefix, gen_synthetic, parse_records, run_ablation, sequential_evaluate, train, write_records, DimSet,
    EncoderConfig, EncoderModel, Error, EvalConfig, Gain, MetricsReport, PrefixIndex, RecordFormat,
    RelevanceRecord, Schedule, SynthSpec, TrainConfig,
};
use serde::Serialize;

use crate::args::{AblateArgs, EvalArgs, HistArgs, IndexArgs, SearchArgs, SynthArgs, TrainArgs, TrainFlags};
use crate::settings::{need, pick, pick_opt, write_report, CliError, CliResult, FileConfig};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_BINS: usize = 40;

fn read_records(path: &Path) -> CliResult<Vec<RelevanceRecord>> {
    let file = File::open(path).map_err(|e| {
        CliError::Core(Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    })?;
    let outcome = parse_records(BufReader::new(file), RecordFormat::from_path(path))?;
    for issue in &outcome.issues {
        log::warn!("{}: {issue}", path.display());
    }
    Ok(outcome.records)
}

fn dimset(dims: Vec<usize>) -> CliResult<DimSet> {
    DimSet::new(dims).map_err(|e| CliError::Usage(e.to_string()))
}

fn schedule(name: &str) -> CliResult<Schedule> {
    name.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

/// Training and fresh-model settings after precedence is applied.
fn resolve_training(flags: TrainFlags, file: &FileConfig, schedule_name: Option<String>) -> CliResult<(TrainConfig, EncoderConfig)> {
    let d = TrainConfig::default();
    let dims = match pick_opt(flags.dims, &file.dims) {
        Some(v) => dimset(v)?,
        None => d.dims.clone(),
    };
    let seed = pick(flags.seed, &file.seed, d.seed);
    let schedule = match schedule_name {
        Some(s) => self::schedule(&s)?,
        None => d.schedule,
    };
    let config = TrainConfig {
        epochs: pick(flags.epochs, &file.epochs, d.epochs),
        batch_size: pick(flags.batch, &file.batch, d.batch_size),
        learning_rate: pick(flags.lr, &file.lr, d.learning_rate),
        margin: pick(flags.margin, &file.margin, d.margin),
        margin_c: pick(flags.margin_c, &file.margin_c, d.margin_c),
        lambda_ocl: pick(flags.lambda_ocl, &file.lambda_ocl, d.lambda_ocl),
        dim_weights: pick_opt(flags.dim_weights, &file.dim_weights),
        max_negatives: pick(flags.max_negatives, &file.max_negatives, d.max_negatives),
        dims: dims.clone(),
        seed,
        schedule,
        ..d
    };
    let e = EncoderConfig::default();
    let model = EncoderConfig {
        buckets: pick(flags.buckets, &file.buckets, e.buckets),
        feature_dim: pick(flags.feature_dim, &file.feature_dim, e.feature_dim),
        dims,
        seed,
    };
    Ok((config, model))
}

#[derive(Serialize)]
struct TrainRun<'a> {
    data: &'a Path,
    valid: Option<&'a Path>,
    init: Option<&'a Path>,
    out: &'a Path,
    model: Option<&'a EncoderConfig>,
    train: &'a TrainConfig,
}

pub fn train_cmd(args: TrainArgs, file: &FileConfig) -> CliResult<()> {
    let data = need(args.data, &file.data, "data")?;
    let out = need(args.out, &file.out, "out")?;
    let valid = pick_opt(args.valid, &file.valid);
    let init = pick_opt(args.init, &file.init);
    let history_path = pick_opt(args.history, &file.history);
    let (config, model_config) = resolve_training(args.train, file, pick_opt(args.schedule, &file.schedule))?;

    let records = read_records(&data)?;
    let valid_records = valid.as_deref().map(read_records).transpose()?;
    let model = match &init {
        Some(p) => EncoderModel::load(p)?,
        None => EncoderModel::new(&model_config)?,
    };
    let run = TrainRun {
        data: &data,
        valid: valid.as_deref(),
        init: init.as_deref(),
        out: &out,
        model: init.is_none().then_some(&model_config),
        train: &config,
    };
    let (model, history) = train(model, &records, valid_records.as_deref(), &config)?;
    model.save(&out)?;
    log::info!("wrote {} ({} bytes)", out.display(), model.file_size());
    if let Some(path) = history_path {
        let mut w = BufWriter::new(File::create(&path)?);
        #[derive(Serialize)]
        struct ConfigLine<'a> {
            #[serde(rename = "type")]
            kind: &'static str,
            config: &'a TrainRun<'a>,
        }
        serde_json::to_writer(&mut w, &ConfigLine { kind: "config", config: &run })?;
        writeln!(w)?;
        history.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn index_cmd(args: IndexArgs, file: &FileConfig) -> CliResult<()> {
    let model_path = need(args.model, &file.model, "model")?;
    let titles = need(args.titles, &file.titles, "titles")?;
    let out = need(args.out, &file.out, "out")?;
    let model = EncoderModel::load(&model_path)?;
    let records = read_records(&titles)?;
    let corpus = split_judgments(&records).corpus;
    let index = PrefixIndex::build(&model, corpus)?;
    index.save(&out)?;
    log::info!("indexed {} titles into {}", index.len(), out.display());
    Ok(())
}

fn parse_funnel(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--funnel expects LOW:HIGH, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn check_dim(index: &PrefixIndex, m: usize) -> CliResult<()> {
    if index.dims().contains(m) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "dimension {m} is not valid for this index; valid dimensions are {}",
            index.dims()
        )))
    }
}

/// Tab-separated: rank, id, title, score, score minus the corpus minimum.
pub fn search_cmd(args: SearchArgs, file: &FileConfig, out: &mut impl Write) -> CliResult<()> {
    let index_path = need(args.index, &file.index, "index")?;
    let query = need(args.query, &file.query, "query")?;
    let k = pick(args.k, &file.k, DEFAULT_K);
    if k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let funnel = pick_opt(args.funnel, &file.funnel).map(|s| parse_funnel(&s)).transpose()?;
    let index = PrefixIndex::load(&index_path)?;
    let dim = pick(args.dim, &file.dim, index.full_dim());
    check_dim(&index, dim)?;
    if let Some((low, high)) = funnel {
        check_dim(&index, low)?;
        check_dim(&index, high)?;
    }
    let model = EncoderModel::load(need(args.model, &file.model, "model")?)?;
    if model.dims() != index.dims() {
        return Err(CliError::Usage(format!(
            "model dims {} differ from index dims {}",
            model.dims(),
            index.dims()
        )));
    }
    let q = model.encode(&query)?;
    if q.is_degenerate() {
        return Err(CliError::Usage(format!("query {query:?} has no indexable tokens")));
    }
    let (hits, score_dim) = match funnel {
        Some((low, high)) => {
            let shortlist = pick(args.shortlist, &file.shortlist, (4 * k).min(index.len().max(k)));
            (index.search_funnel(&q, low, high, shortlist, k)?, high)
        }
        None => (index.search_exact(&q, dim, k)?, dim),
    };
    let corpus_min = index
        .search_exact_detailed(&q, score_dim, 1)?
        .min_score
        .unwrap_or(0.0);
    let scores: Vec<f64> = hits.iter().map(|h| h.score).collect();
    let normalized = normalize_scores(&scores, corpus_min);
    writeln!(out, "rank\tid\ttitle\tscore\tnormalized_score")?;
    for (h, n) in hits.iter().zip(normalized) {
        let title = &index.docs()[h.row].title;
        writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.6}", h.rank, h.id, title, h.score, n)?;
    }
    Ok(())
}

fn gain(s: &str) -> CliResult<Gain> {
    match s {
        "binary" => Ok(Gain::Binary),
        "graded" => Ok(Gain::Graded),
        _ => Err(CliError::Usage(format!("--gain must be binary or graded, got {s:?}"))),
    }
}

#[derive(Serialize)]
struct EvalRun<'a> {
    model: &'a Path,
    test: &'a Path,
    baseline: Option<&'a Path>,
    eval: &'a EvalConfig,
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<DeltaReport>,
}

pub fn eval_cmd(args: EvalArgs, file: &FileConfig, stdout: &mut impl Write) -> CliResult<()> {
    let model_path = need(args.model, &file.model, "model")?;
    let test = need(args.test, &file.test, "test")?;
    let baseline_path = pick_opt(args.baseline, &file.baseline);
    let report_path = pick_opt(args.report, &file.report);
    let model = EncoderModel::load(&model_path)?;
    let dims = match pick_opt(args.dims, &file.dims) {
        Some(v) => dimset(v)?,
        None => model.dims().clone(),
    };
    let d = EvalConfig::new(dims);
    let config = EvalConfig {
        ks: pick(args.ks, &file.ks, d.ks.clone()),
        corpus_cap: pick(args.corpus_cap, &file.corpus_cap, d.corpus_cap),
        seed: pick(args.seed, &file.seed, d.seed),
        gain: match pick_opt(args.gain, &file.gain) {
            Some(g) => gain(&g)?,
            None => d.gain,
        },
        ..d
    };
    let records = read_records(&test)?;
    let metrics = sequential_evaluate(&model, &records, &config)?;
    let (baseline, delta) = match &baseline_path {
        Some(p) => {
            let b = sequential_evaluate(&EncoderModel::load(p)?, &records, &config)?;
            let delta = delta_report(&metrics, &b)?;
            (Some(b), Some(delta))
        }
        None => (None, None),
    };
    let run = EvalRun {
        model: &model_path,
        test: &test,
        baseline: baseline_path.as_deref(),
        eval: &config,
    };
    let output = EvalOutput { metrics, baseline, delta };
    let csv = || match &output.delta {
        Some(d) => d.to_csv(),
        None => output.metrics.to_csv(),
    };
    match report_path {
        Some(p) => write_report(&p, &run, &output, csv)?,
        None => stdout.write_all(csv().as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct AblateRun<'a> {
    data: &'a Path,
    schedules: Vec<&'static str>,
    model: &'a EncoderConfig,
    train: &'a TrainConfig,
}

pub fn ablate_cmd(args: AblateArgs, file: &FileConfig, stdout: &mut impl Write) -> CliResult<()> {
    let data = need(args.data, &file.data, "data")?;
    let report_path = pick_opt(args.report, &file.report);
    let schedules: Vec<Schedule> = match pick_opt(args.schedules, &file.schedules) {
        Some(names) => names.iter().map(|n| schedule(n)).collect::<CliResult<_>>()?,
        None => Schedule::ALL.to_vec(),
    };
    let (config, model_config) = resolve_training(args.train, file, None)?;
    let train_records = read_records(&data.join("train.jsonl"))?;
    let test_records = read_records(&data.join("test.jsonl"))?;
    let valid_path = data.join("valid.jsonl");
    let valid_records = if valid_path.exists() {
        Some(read_records(&valid_path)?)
    } else {
        None
    };
    let report = run_ablation(
        AblationData {
            train: &train_records,
            valid: valid_records.as_deref(),
            test: &test_records,
        },
        &model_config,
        &config,
        &schedules,
    )?;
    let run = AblateRun {
        data: &data,
        schedules: schedules.iter().map(|s| s.name()).collect(),
        model: &model_config,
        train: &config,
    };
    match report_path {
        Some(p) => write_report(&p, &run, &report, || report.to_csv())?,
        None => stdout.write_all(report.to_csv().as_bytes())?,
    }
    Ok(())
}

pub fn synth_cmd(args: SynthArgs, file: &FileConfig) -> CliResult<()> {
    let out: PathBuf = need(args.out, &file.out, "out")?;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        seed: pick(args.seed, &file.seed, d.seed),
        query_count: pick(args.queries, &file.queries, d.query_count),
        titles_per_query: pick(args.titles_per_query, &file.titles_per_query, d.titles_per_query),
        category_count: pick(args.categories, &file.categories, d.category_count),
        alphanum_fraction: pick(args.alphanum, &file.alphanum, d.alphanum_fraction),
        shared_substring_fraction: pick(args.shared_substring, &file.shared_substring, d.shared_substring_fraction),
    };
    let ds = gen_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&out)?;
    for (name, records) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        let path = out.join(format!("{name}.jsonl"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_records(&mut w, records, RecordFormat::Jsonl)?;
        w.flush()?;
        log::info!("wrote {} records to {}", records.len(), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct HistRun<'a> {
    model: &'a Path,
    test: &'a Path,
    dim: usize,
    bins: usize,
    pairs: usize,
    skipped: usize,
}

/// Histogram of cosine scores over every judged query-title pair.
pub fn hist_cmd(args: HistArgs, file: &FileConfig, stdout: &mut impl Write) -> CliResult<()> {
    let model_path = need(args.model, &file.model, "model")?;
    let test = need(args.test, &file.test, "test")?;
    let bins = pick(args.bins, &file.bins, DEFAULT_BINS);
    let out = pick_opt(args.out, &file.out);
    let model = EncoderModel::load(&model_path)?;
    let dim = pick(args.dim, &file.dim, model.full_dim());
    model.dims().check(dim)?;
    let records = read_records(&test)?;
    let queries = model.encode_batch(&records.iter().map(|r| r.query.as_str()).collect::<Vec<_>>())?;
    let titles = model.encode_batch(&records.iter().map(|r| r.title.as_str()).collect::<Vec<_>>())?;
    let mut scores = Vec::with_capacity(records.len());
    for (q, t) in queries.iter().zip(&titles) {
        match cosine_prefix(q, t, dim) {
            Ok(s) => scores.push(s),
            Err(Error::ZeroVector) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let histogram = score_histogram(&scores, bins)?;
    let run = HistRun {
        model: &model_path,
        test: &test,
        dim,
        bins,
        pairs: records.len(),
        skipped: records.len() - scores.len(),
    };
    match out {
        Some(p) => write_report(&p, &run, &histogram, || histogram.to_csv())?,
        None => stdout.write_all(histogram.to_csv().as_bytes())?,
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use eaft_core::forgebench::{
    cells_table, classify_conflicts, pareto_report, pareto_table, resolve_objective, run_bench, seeds_table,
    BenchProtocol,
};
use eaft_core::landscape::export::{
    dynamics_table, fidelity_table, histogram_table, quadrants_table, ranking_table, CsvTable,
};
use eaft_core::landscape::{
    default_k_grid, dynamics_track, export_records_jsonl, histogram2d, ingest_records, quadrant_stats,
    quadrant_token_ranking, score_corpus_with, synthetic_fidelity_study, topk_fidelity_study, Axis, CostModel,
    DynamicsConfig, EntropyAxis, FidelityAccumulator, HistogramSpec, Quadrant, SyntheticSpec, Thresholds, TokenRecord,
    MIN_TOKENS,
};
use eaft_core::toylm::{checkpoint, init_model, train, CaptureSource, Corpus, ToyModelParams, TrainRun};
use eaft_core::{NormMode, ObjectiveSpec};

use crate::args::{AnalyzeArgs, BenchArgs, DynamicsArgs, EntropyAxisArg, TopkArgs, TrainArgs};
use crate::config::{check_version, read_json, require_file, CorpusSource, ObjectiveChoice, TrainConfig};
use crate::CliError;

fn config_err(e: eaft_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: eaft_core::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn at(path: &Path) -> impl Fn(eaft_core::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

fn make_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn save(table: &CsvTable, path: PathBuf) -> Result<(), CliError> {
    table.save(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: PathBuf) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<ToyModelParams, CliError> {
    require_file(path)?;
    checkpoint::load(path).map_err(at(path))
}

fn load_corpus(path: &Path, params: &ToyModelParams) -> Result<Corpus, CliError> {
    require_file(path)?;
    let corpus = Corpus::read_jsonl(path).map_err(at(path))?;
    corpus.check_vocab(params.config.vocab_size).map_err(at(path))?;
    if corpus.num_positions(params.config.context_len) == 0 {
        return Err(CliError::Config(format!("{}: no position has a full context", path.display())));
    }
    Ok(corpus)
}

fn read_records(path: &Path) -> Result<Vec<TokenRecord>, CliError> {
    require_file(path)?;
    ingest_records(path).map_err(at(path))
}

/// Thresholds only matter for the mask objectives.
fn named_objective(
    name: &str,
    init: &ToyModelParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<ObjectiveSpec, CliError> {
    let unset = Thresholds { tau_entropy: 0.0, tau_prob: 0.0 };
    resolve_objective(name, &unset, cfg.k).map_err(config_err)?;
    let thresholds = if matches!(name, "hard-mask" | "conflict-mask") {
        classify_conflicts(init, corpus, cfg.mask_quantile, cfg.k).map_err(runtime_err)?.thresholds
    } else {
        unset
    };
    resolve_objective(name, &thresholds, cfg.k).map_err(config_err)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = TrainConfig::load(&args.config)?;
    let init = match (&cfg.init, cfg.model) {
        (Some(p), model) => {
            let m = load_checkpoint(p)?;
            if model.is_some_and(|c| !c.same_shape(&m.config)) {
                return Err(CliError::Config(format!("{}: checkpoint shape differs from 'model'", p.display())));
            }
            m
        }
        (None, Some(model)) => init_model(model).map_err(config_err)?,
        (None, None) => unreachable!("validated"),
    };
    let corpus = match &cfg.corpus {
        CorpusSource::Path(p) => load_corpus(p, &init)?,
        CorpusSource::Chain(c) => {
            let corpus = c.sample()?;
            corpus.check_vocab(init.config.vocab_size).map_err(config_err)?;
            corpus
        }
    };
    let reference = cfg.reference.as_deref().map(load_checkpoint).transpose()?;
    if reference.as_ref().is_some_and(|r| !r.same_shape(&init)) {
        return Err(CliError::Config("reference checkpoint shape differs from the model".into()));
    }
    let objective = match &cfg.objective {
        ObjectiveChoice::Named(n) => named_objective(n, &init, &corpus, &cfg)?,
        ObjectiveChoice::Spec(s) => *s,
    };
    // without an explicit reference the KL term anchors to the initial weights
    let frozen = init.clone();
    let reference = objective.needs_reference().then(|| reference.as_ref().unwrap_or(&frozen));

    let run = TrainRun {
        reference,
        optimizer: cfg.optimizer,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        capture_every: cfg.capture_every,
        capture: CaptureSource::Batch,
        sample_seed: cfg.sample_seed,
        ..TrainRun::new(init.clone(), &corpus, objective)
    };
    let out = train(&run).map_err(runtime_err)?;

    make_out_dir(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    checkpoint::save(&out.params, &ckpt).map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt.display())))?;
    save(&out.log.to_table(), args.out.join("trainlog.csv"))?;
    let rec = args.out.join("records.jsonl");
    export_records_jsonl(&out.captures, &rec).map_err(|e| CliError::Runtime(format!("{}: {e}", rec.display())))
}

pub fn cell_stem(objective: &str, seed: u64) -> String {
    format!("{objective}_seed{seed}")
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let protocol: BenchProtocol = read_json(&args.protocol)?;
    check_version(&protocol.version)?;
    protocol.validate().map_err(at(&args.protocol))?;
    if args.parallel == 0 {
        return Err(CliError::Config("--parallel must be at least 1".into()));
    }
    let run = run_bench(&protocol, args.parallel).map_err(runtime_err)?;

    let dirs = ["cells", "trainlogs", "captures"].map(|d| args.out.join(d));
    for d in &dirs {
        make_out_dir(d)?;
    }
    for c in &run.cells {
        let stem = cell_stem(&c.cell.objective, c.cell.seed);
        write_json(&c.cell, dirs[0].join(format!("cell_{stem}.json")))?;
        save(&c.log.to_table(), dirs[1].join(format!("trainlog_{stem}.csv")))?;
        let cap = dirs[2].join(format!("{stem}.jsonl"));
        export_records_jsonl(&c.captures, &cap).map_err(|e| CliError::Runtime(format!("{}: {e}", cap.display())))?;
    }
    let cells: Vec<_> = run.cells.iter().map(|c| c.cell.clone()).collect();
    save(&cells_table(&cells), args.out.join("cells.csv"))?;
    save(&pareto_table(&pareto_report(&cells).map_err(runtime_err)?), args.out.join("pareto.csv"))?;
    save(&seeds_table(&run.seeds), args.out.join("gap.csv"))
}

/// Records from exactly one of `--records` or `--checkpoint` with `--corpus`.
fn analysis_records(
    checkpoint: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
    records: &Option<PathBuf>,
    k: usize,
) -> Result<Vec<TokenRecord>, CliError> {
    match (checkpoint, corpus, records) {
        (None, None, Some(r)) => read_records(r),
        (Some(c), Some(x), None) => {
            let params = load_checkpoint(c)?;
            let corpus = load_corpus(x, &params)?;
            score_corpus_with(&params, &corpus, k, NormMode::ExactLn).map_err(runtime_err)
        }
        (_, _, Some(_)) => {
            Err(CliError::Config("give either --records or --checkpoint with --corpus, not both".into()))
        }
        (None, None, None) => Err(CliError::Config("no input: give --records or --checkpoint with --corpus".into())),
        _ => Err(CliError::Config("--checkpoint and --corpus go together".into())),
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    if !(args.q > 0.0 && args.q < 1.0) {
        return Err(CliError::Config(format!("--q {} must lie in (0, 1)", args.q)));
    }
    if args.bins == 0 || args.k == 0 {
        return Err(CliError::Config("--bins and --k must be positive".into()));
    }
    let quadrant: Quadrant = args.quadrant.parse().map_err(config_err)?;
    let records = analysis_records(&args.checkpoint, &args.corpus, &args.records, args.k)?;
    if records.is_empty() {
        return Err(CliError::Config("no token records to analyze".into()));
    }
    let (axis, x) = match args.entropy_axis {
        EntropyAxisArg::Full => (EntropyAxis::Full, Axis::Entropy),
        EntropyAxisArg::Gate => (EntropyAxis::Gate, Axis::Gate),
    };
    let mut spec = HistogramSpec::new(x, Axis::PTarget, args.bins);
    if records.iter().any(|r| r.grad_norm.is_some()) {
        spec = spec.with_overlay(Axis::GradNorm);
    }
    let hist = histogram2d(&records, &spec).map_err(config_err)?;
    let stats = quadrant_stats(&records, args.q, axis).map_err(config_err)?;
    let ranking = quadrant_token_ranking(&records, &stats.labels, quadrant, args.top).map_err(runtime_err)?;

    make_out_dir(&args.out)?;
    save(&histogram_table(&hist), args.out.join("landscape.csv"))?;
    save(&quadrants_table(&stats), args.out.join("quadrants.csv"))?;
    save(&ranking_table(quadrant, &ranking), args.out.join("ranking.csv"))
}

pub fn cmd_topk_study(args: &TopkArgs) -> Result<(), CliError> {
    let source = match (args.synthetic, &args.checkpoint, &args.corpus) {
        (true, None, None) => None,
        (false, Some(c), Some(x)) => {
            let params = load_checkpoint(c)?;
            let corpus = load_corpus(x, &params)?;
            let n = corpus.num_positions(params.config.context_len);
            if n < MIN_TOKENS {
                return Err(CliError::Config(format!("{}: {n} positions, the study needs {MIN_TOKENS}", x.display())));
            }
            Some((params, corpus))
        }
        (true, _, _) => return Err(CliError::Config("--synthetic takes no --checkpoint or --corpus".into())),
        (false, None, None) => {
            return Err(CliError::Config("no input: give --synthetic or --checkpoint with --corpus".into()))
        }
        _ => return Err(CliError::Config("--checkpoint and --corpus go together".into())),
    };
    let synthetic = SyntheticSpec::default();
    let v = source.as_ref().map_or(synthetic.vocab_size, |(p, _)| p.config.vocab_size);
    let grid = args.k_grid.clone().unwrap_or_else(|| default_k_grid(v));
    FidelityAccumulator::new(&grid, v).map_err(config_err)?;
    let rows = match &source {
        None => synthetic_fidelity_study(&synthetic, &grid, CostModel::default()),
        Some((p, c)) => topk_fidelity_study(p, c, &grid, CostModel::default()),
    }
    .map_err(runtime_err)?;
    make_out_dir(&args.out)?;
    save(&fidelity_table(&rows), args.out.join("fidelity.csv"))
}

/// The JSONL files under `path`, sorted, or `path` itself.
fn record_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Config(format!("no such file or directory: {}", path.display())));
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no captured records (*.jsonl) in {}", path.display())));
    }
    Ok(files)
}

pub fn cmd_dynamics(args: &DynamicsArgs) -> Result<(), CliError> {
    let cfg = DynamicsConfig::new(args.hi, args.lo).map_err(config_err)?;
    let mut tables = Vec::new();
    for f in record_files(&args.records)? {
        let records = read_records(&f)?;
        if records.is_empty() {
            return Err(CliError::Config(format!("{}: no captured records", f.display())));
        }
        let rows = dynamics_track(&records, &cfg).map_err(at(&f))?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        tables.push((stem, dynamics_table(&rows)));
    }
    make_out_dir(&args.out)?;
    for (stem, t) in tables {
        save(&t, args.out.join(format!("dynamics_{stem}.csv")))?;
    }
    Ok(())
}

mod args;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use fqb_core::analysis::{default_reject_grid, DEFAULT_BINS, DEFAULT_PROPORTION_POINTS};
use fqb_core::bestrowden::{self, label_features, label_subject_groups, DEFAULT_FOLDS, DEFAULT_LAMBDA_GRID};
use fqb_core::pairs::{read_pairs_csv, write_pairs_csv, DEFAULT_IMPOSTOR_CAP};
use fqb_core::serfiq::{self, DEFAULT_DROPOUT_RATE, DEFAULT_PASSES};
use fqb_core::verification::DEFAULT_FMR_TARGETS;
use fqb_core::{
    bias_report, error_vs_reject, generate, generate_pairs, load_quality_csv, predict_quality,
    proportion_vs_threshold, quality_distributions, quality_labels, score_pairs, serfiq_dataset,
    subgroup_fnmr_table, train_regressor, write_quality_csv, DataDir, Dataset, LastLayer,
    QualityScores, RegressorModel, ReportConfig, RidgeCv, ScoredComparisons, SerfiqConfig,
    SynthConfig,
};

use args::*;
use config::{pick, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<fqb_core::Error> for CliError {
    fn from(e: fqb_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("FQB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("FQB_THREADS must be a non-negative integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    let rc = match &cli.run_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a, &rc),
        Command::Pairs(a) => pairs(a, &rc),
        Command::Quality(QualityCommand::Serfiq(a)) => quality_serfiq(a, &rc),
        Command::Quality(QualityCommand::Bestrowden(a)) => quality_bestrowden(a),
        Command::Quality(QualityCommand::External(a)) => quality_external(a),
        Command::TrainQuality(a) => train_quality(a, &rc),
        Command::FnmrTable(a) => fnmr_table(a, &rc),
        Command::Erc(a) => erc(a, &rc),
        Command::Proportions(a) => proportions(a, &rc),
        Command::Distributions(a) => distributions(a, &rc),
        Command::Report(a) => report(a, &rc),
    }
}

fn load_data(arg: &DataArg) -> CliResult<(DataDir, Dataset)> {
    let dir = DataDir::new(&arg.data);
    let ds = dir.load()?;
    Ok((dir, ds))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_unit_interval(name: &str, values: &[f64]) -> CliResult<()> {
    if values.is_empty() {
        return Err(CliError::Usage(format!("{name} must not be empty")));
    }
    for &v in values {
        if !(v > 0.0 && v < 1.0) {
            return Err(CliError::Usage(format!("{name} values must lie in (0, 1), got {v}")));
        }
    }
    Ok(())
}

fn single_attribute(flag: Option<String>, rc: &RunConfig, ds: &Dataset) -> CliResult<String> {
    if let Some(a) = flag.or_else(|| rc.attribute.clone()) {
        return Ok(a);
    }
    match ds.attribute_names() {
        [only] => Ok(only.clone()),
        [] => Err(CliError::Data("metadata has no attribute columns".into())),
        names => Err(CliError::Usage(format!(
            "--attribute is required; metadata has {}",
            names.join(", ")
        ))),
    }
}

fn scored_pairs(
    ds: &Dataset,
    path: Option<&Path>,
    cap: Option<usize>,
    rc: &RunConfig,
    seed: u64,
) -> CliResult<ScoredComparisons> {
    match path {
        Some(p) => Ok(read_pairs_csv(p, ds)?),
        None => {
            let cap = pick(cap, rc.impostor_cap, || DEFAULT_IMPOSTOR_CAP);
            let set = generate_pairs(ds, cap, seed)?;
            Ok(score_pairs(ds, &set)?)
        }
    }
}

fn quality_input(q: &QualityInput, ds: &Dataset) -> CliResult<QualityScores> {
    let name = q.name.clone().unwrap_or_else(|| {
        q.quality
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "quality".into())
    });
    Ok(load_quality_csv(&q.quality, ds, &name)?)
}

fn synth(a: SynthArgs, rc: &RunConfig) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed.or(rc.seed) {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate(&cfg)?;
    data.write(&DataDir::new(&a.out))?;
    eprintln!("wrote {} images to {}", data.dataset.len(), a.out.display());
    Ok(())
}

fn pairs(a: PairsArgs, rc: &RunConfig) -> CliResult<()> {
    let (_, ds) = load_data(&a.data)?;
    let scored = scored_pairs(&ds, None, a.cap, rc, rc.seed(a.seed.seed))?;
    ensure_parent(&a.out)?;
    write_pairs_csv(&a.out, &ds, &scored)?;
    eprintln!(
        "{} genuine, {} impostor comparisons",
        scored.genuine.len(),
        scored.impostor.len()
    );
    Ok(())
}

fn serfiq_config(p: &SerfiqParams, rc: &RunConfig) -> CliResult<SerfiqConfig> {
    let cfg = SerfiqConfig {
        m: pick(p.m, rc.m, || DEFAULT_PASSES),
        dropout_rate: pick(p.dropout_rate, rc.dropout_rate, || DEFAULT_DROPOUT_RATE),
        normalize: p.normalize || rc.normalize.unwrap_or(false),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_layer(dir: &DataDir, weights: Option<&Path>, sidecar: Option<&Path>) -> CliResult<LastLayer> {
    let weights = weights.map(Path::to_path_buf).unwrap_or_else(|| dir.path(DataDir::LAYER));
    let sidecar = sidecar
        .map(Path::to_path_buf)
        .unwrap_or_else(|| weights.with_file_name(DataDir::LAYER_SIDECAR));
    Ok(LastLayer::load(&weights, &sidecar)?)
}

fn run_serfiq(dir: &DataDir, ds: &Dataset, layer: &LastLayer, cfg: &SerfiqConfig, seed: u64) -> CliResult<QualityScores> {
    if ds.activations().is_none() {
        return Err(CliError::Data(format!(
            "dataset has no activation matrix: {} not found",
            dir.path(DataDir::ACTIVATIONS).display()
        )));
    }
    Ok(serfiq_dataset(ds, layer, cfg, seed)?)
}

fn quality_serfiq(a: SerfiqArgs, rc: &RunConfig) -> CliResult<()> {
    let cfg = serfiq_config(&a.params, rc)?;
    let (dir, ds) = load_data(&a.data)?;
    let layer = load_layer(&dir, a.layer.as_deref(), a.layer_sidecar.as_deref())?;
    let q = run_serfiq(&dir, &ds, &layer, &cfg, rc.seed(a.seed.seed))?;
    ensure_parent(&a.out)?;
    Ok(write_quality_csv(&a.out, &ds, &q)?)
}

fn quality_bestrowden(a: BestRowdenArgs) -> CliResult<()> {
    let (_, ds) = load_data(&a.data)?;
    let model = RegressorModel::load(&a.model)?;
    let q = predict_quality(&model, &ds)?;
    ensure_parent(&a.out)?;
    Ok(write_quality_csv(&a.out, &ds, &q)?)
}

fn quality_external(a: ExternalArgs) -> CliResult<()> {
    let (_, ds) = load_data(&a.data)?;
    let name = a.name.unwrap_or_else(|| "external".into());
    let q = load_quality_csv(&a.scores, &ds, &name)?;
    ensure_parent(&a.out)?;
    Ok(write_quality_csv(&a.out, &ds, &q)?)
}

fn ridge_cv(p: &RegressorParams, rc: &RunConfig, seed: u64) -> CliResult<RidgeCv> {
    let cv = RidgeCv {
        lambda_grid: pick(p.lambda_grid.clone(), rc.lambda_grid.clone(), || DEFAULT_LAMBDA_GRID.to_vec()),
        folds: pick(p.folds, rc.folds, || DEFAULT_FOLDS),
        seed,
    };
    if cv.lambda_grid.is_empty() || cv.lambda_grid.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(CliError::Usage("--lambda-grid needs positive finite values".into()));
    }
    if cv.folds < 2 {
        return Err(CliError::Usage("--folds must be at least 2".into()));
    }
    Ok(cv)
}

fn fit_model(ds: &Dataset, scored: &ScoredComparisons, p: &RegressorParams, rc: &RunConfig, seed: u64) -> CliResult<RegressorModel> {
    let cv = ridge_cv(p, rc, seed)?;
    let aggregate = p.aggregate.map(Into::into).or(rc.aggregate).unwrap_or_default();
    let labels = quality_labels(ds, scored, aggregate)?;
    let rows = label_features(ds, &labels);
    let groups = label_subject_groups(ds, &labels);
    Ok(train_regressor(&rows, &labels.z(), &cv, Some(&groups))?)
}

fn train_quality(a: TrainArgs, rc: &RunConfig) -> CliResult<()> {
    let seed = rc.seed(a.seed.seed);
    let (_, ds) = load_data(&a.data)?;
    let scored = scored_pairs(&ds, a.pairs.as_deref(), None, rc, seed)?;
    let model = fit_model(&ds, &scored, &a.params, rc, seed)?;
    ensure_parent(&a.out)?;
    model.save(&a.out)?;
    eprintln!("selected lambda {}", model.lambda);
    Ok(())
}

fn fmr_targets(flag: Option<Vec<f64>>, rc: &RunConfig) -> CliResult<Vec<f64>> {
    let t = pick(flag, rc.fmr_targets.clone(), || DEFAULT_FMR_TARGETS.to_vec());
    check_unit_interval("--fmr", &t)?;
    Ok(t)
}

fn fnmr_table(a: FnmrTableArgs, rc: &RunConfig) -> CliResult<()> {
    let targets = fmr_targets(a.fmr, rc)?;
    let (_, ds) = load_data(&a.data)?;
    let attribute = single_attribute(a.attribute, rc, &ds)?;
    let scored = read_pairs_csv(&a.pairs, &ds)?;
    let scope = a.scope.map(Into::into).or(rc.threshold_scope).unwrap_or_default();
    let report = subgroup_fnmr_table(&ds, &scored, &attribute, &targets, scope)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    report.write_csv(a.out.join("fnmr_table.csv"))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&a.out.join("fnmr_table.json"), &(json + "\n"))?;
    print!("{}", report.render_table());
    Ok(())
}

fn erc(a: ErcArgs, rc: &RunConfig) -> CliResult<()> {
    let target = a.fmr.or_else(|| rc.fmr_targets.as_ref().and_then(|t| t.first().copied())).unwrap_or(DEFAULT_FMR_TARGETS[0]);
    check_unit_interval("--fmr", &[target])?;
    let grid = pick(a.grid, rc.reject_grid.clone(), default_reject_grid);
    if grid.is_empty() || grid.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(CliError::Usage("--grid values must lie in [0, 1)".into()));
    }
    let mode = a.threshold.map(Into::into).or(rc.erc_threshold).unwrap_or_default();
    let (_, ds) = load_data(&a.data)?;
    let scored = read_pairs_csv(&a.pairs, &ds)?;
    let quality = quality_input(&a.quality, &ds)?;
    let curve = error_vs_reject(&scored, &quality, target, &grid, mode)?;
    ensure_parent(&a.out)?;
    Ok(curve.write_csv(&a.out)?)
}

fn proportions(a: ProportionsArgs, rc: &RunConfig) -> CliResult<()> {
    let points = pick(a.points, rc.proportion_points, || DEFAULT_PROPORTION_POINTS);
    if points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let (_, ds) = load_data(&a.data)?;
    let attribute = single_attribute(a.attribute, rc, &ds)?;
    let quality = quality_input(&a.quality, &ds)?;
    let curve = proportion_vs_threshold(&ds, &quality, &attribute, points)?;
    ensure_parent(&a.out)?;
    Ok(curve.write_csv(&a.out)?)
}

fn distributions(a: DistributionsArgs, rc: &RunConfig) -> CliResult<()> {
    let bins = pick(a.bins, rc.bins, || DEFAULT_BINS);
    if bins == 0 {
        return Err(CliError::Usage("--bins must be positive".into()));
    }
    let (_, ds) = load_data(&a.data)?;
    let attribute = single_attribute(a.attribute, rc, &ds)?;
    let quality = quality_input(&a.quality, &ds)?;
    let summary = quality_distributions(&ds, &quality, &attribute, bins)?;
    ensure_parent(&a.out)?;
    summary.write_csv(&a.out)?;
    for o in &summary.overlaps {
        println!("overlap {} / {}: {:.6}", o.a, o.b, o.coefficient);
    }
    Ok(())
}

fn parse_external(spec: &str) -> CliResult<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(CliError::Usage(format!("--quality expects NAME=FILE, got `{spec}`"))),
    }
}

fn report(a: ReportArgs, rc: &RunConfig) -> CliResult<()> {
    let seed = rc.seed(a.seed.seed);
    let targets = fmr_targets(a.fmr, rc)?;
    let externals = a.external.iter().map(|s| parse_external(s)).collect::<CliResult<Vec<_>>>()?;
    let (dir, ds) = load_data(&a.data)?;

    let estimators = match a.estimators.or_else(|| rc.estimators.clone()) {
        Some(e) => e,
        None => {
            let mut e = Vec::new();
            if ds.activations().is_some() && dir.path(DataDir::LAYER).exists() {
                e.push(serfiq::ESTIMATOR_NAME.to_string());
            }
            e.push(bestrowden::ESTIMATOR_NAME.to_string());
            e
        }
    };
    let attributes = pick(a.attributes, rc.attributes.clone(), || ds.attribute_names().to_vec());
    if attributes.is_empty() {
        return Err(CliError::Data("metadata has no attribute columns".into()));
    }

    let scored = scored_pairs(&ds, a.pairs.as_deref(), a.cap, rc, seed)?;
    let mut quality_sets = Vec::new();
    for name in &estimators {
        let q = match name.as_str() {
            serfiq::ESTIMATOR_NAME => {
                let cfg = serfiq_config(&a.serfiq, rc)?;
                let layer = load_layer(&dir, None, None)?;
                run_serfiq(&dir, &ds, &layer, &cfg, seed)?
            }
            bestrowden::ESTIMATOR_NAME => {
                let model = match &a.bestrowden_model {
                    Some(p) => RegressorModel::load(p)?,
                    None => fit_model(&ds, &scored, &a.regressor, rc, seed)?,
                };
                predict_quality(&model, &ds)?
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown estimator `{other}` (built-ins: serfiq, bestrowden; use --quality NAME=FILE for others)"
                )))
            }
        };
        quality_sets.push(q);
    }
    for (name, path) in &externals {
        quality_sets.push(load_quality_csv(path, &ds, name)?);
    }
    if quality_sets.is_empty() {
        return Err(CliError::Usage("no quality estimator selected".into()));
    }

    let mut cfg = ReportConfig::new(attributes);
    cfg.fmr_targets = targets;
    if let Some(g) = &rc.reject_grid {
        cfg.reject_grid = g.clone();
    }
    if let Some(p) = rc.proportion_points {
        cfg.proportion_points = p;
    }
    if let Some(b) = rc.bins {
        cfg.bins = b;
    }
    cfg.threshold_scope = a.scope.map(Into::into).or(rc.threshold_scope).unwrap_or_default();
    cfg.erc_threshold = a.erc_threshold.map(Into::into).or(rc.erc_threshold).unwrap_or_default();

    let bundle = bias_report(&ds, &scored, &quality_sets, &cfg)?;
    let files = bundle.write(&a.out)?;
    for r in &bundle.reports {
        println!("== {} / {}", r.estimator, r.attribute);
        print!("{}", r.verification.render_table());
    }
    eprintln!("wrote {} files under {}", files.len(), a.out.display());
    Ok(())
}

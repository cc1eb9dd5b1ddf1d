use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use cf_ensemble::archive::{decode, write_archive, ModelArchive, Record, RecordKind};
use cf_ensemble::dataset::{parse_canonical_csv, random_split, read_ratings_file, RatingFormat, RatingsDataset};
use cf_ensemble::ensemble::Family;
use cf_ensemble::eval::{
    run_protocol_on, run_protocol_with, time_scaling_probe, ExperimentConfig, ExperimentReport, LearnerConfig,
};
use cf_ensemble::fsutil::write_atomic;
use cf_ensemble::knn::Metric;
use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{self, Flags, ReportFormat, Resolved, RunFile};
use crate::{runtime, usage, Failure, GlobalArgs};

type Outcome = std::result::Result<(), Failure>;

fn init_workers(workers: usize) -> Outcome {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

pub fn ingest(input: &Path, g: &GlobalArgs) -> Outcome {
    let format: RatingFormat = g.format.as_deref().unwrap_or("ml100k").parse().map_err(usage)?;
    let read = || -> cf_ensemble::Result<_> {
        if format == RatingFormat::Csv {
            let file = std::fs::File::open(input)?;
            parse_canonical_csv(file).map(|(ds, w)| (ds, Some(w)))
        } else {
            read_ratings_file(input, format).map(|ds| (ds, None))
        }
    };
    let (ds, weights) = read().with_context(|| format!("cannot ingest {}", input.display())).map_err(runtime)?;
    let out = g.out.clone().unwrap_or_else(|| input.with_extension("canonical.csv"));
    write_atomic(&out, |w| ds.write_canonical_csv(w, weights.as_ref()))
        .with_context(|| format!("cannot write {}", out.display()))
        .map_err(runtime)?;
    let summary = json!({
        "users": ds.num_users(),
        "items": ds.num_items(),
        "ratings": ds.len(),
        "density": ds.density(),
    });
    let summary_path = out.with_extension("summary.json");
    write_text(&summary_path, &serde_json::to_string_pretty(&summary).map_err(runtime)?)?;
    log::info!(
        "{} ratings, {} users, {} items -> {}",
        ds.len(),
        ds.num_users(),
        ds.num_items(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ModelSeeds {
    name: String,
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct ExperimentEntry {
    label: String,
    config: ExperimentConfig,
    split_seeds: Vec<u64>,
    model_seeds: Vec<ModelSeeds>,
    failed_cells: usize,
}

/// Everything needed to repeat a run.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    config_path: PathBuf,
    data_dir: PathBuf,
    options: Resolved,
    experiments: Vec<ExperimentEntry>,
    outputs: Vec<PathBuf>,
}

fn file_stem_for(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn save_report(report: &ExperimentReport, dir: &Path, format: ReportFormat, outputs: &mut Vec<PathBuf>) -> Outcome {
    if format.csv() {
        let path = dir.join("report.csv");
        write_atomic(&path, |w| report.write_csv(w)).map_err(runtime)?;
        outputs.push(path);
    }
    if format.json() {
        let path = dir.join("report.json");
        write_text(&path, &report.to_json().map_err(runtime)?)?;
        outputs.push(path);
    }
    Ok(())
}

fn load_dataset(config: &ExperimentConfig) -> std::result::Result<RatingsDataset, Failure> {
    read_ratings_file(&config.dataset.path, config.dataset.format)
        .with_context(|| format!("cannot load {}", config.dataset.path.display()))
        .map_err(runtime)
}

pub fn run(config_path: &Path, save_models: bool, g: &GlobalArgs) -> Outcome {
    let file = RunFile::load(config_path).map_err(usage)?;
    let flags = Flags {
        seed: g.seed,
        workers: g.workers,
        format: g.format.clone(),
        extended: g.extended,
        save_models,
    };
    let opts = Resolved::merge(&flags, &file.options).map_err(usage)?;
    let out = g.out.clone().or_else(|| file.experiment.output.clone()).unwrap_or_else(|| PathBuf::from("out"));

    let mut experiments = vec![(String::new(), file.experiment)];
    if opts.extended {
        let ext = file
            .extended
            .ok_or_else(|| usage(anyhow!("--extended given but the run file has no [extended] experiment")))?;
        experiments.push(("extended".to_string(), ext));
    }
    for (label, config) in &mut experiments {
        settings::apply(config, opts.seed);
        config
            .validate()
            .with_context(|| if label.is_empty() { "invalid experiment".to_string() } else { format!("invalid {label} experiment") })
            .map_err(usage)?;
    }
    init_workers(opts.workers)?;
    // Load every dataset first so a missing extended dataset fails before hours of work.
    let datasets = experiments.iter().map(|(_, c)| load_dataset(c)).collect::<Result<Vec<_>, _>>()?;

    let mut entries = Vec::new();
    let mut outputs = Vec::new();
    for ((label, config), ds) in experiments.into_iter().zip(datasets) {
        let dir = if label.is_empty() { out.clone() } else { out.join(&label) };
        let models_dir = dir.join("models");
        let report = if opts.save_models {
            run_protocol_with(&ds, &config, |name, split, model| {
                if split != 0 {
                    return Ok(());
                }
                let path = models_dir.join(format!("{}.cfens", file_stem_for(name)));
                let archive = ModelArchive {
                    model: model.clone(),
                    user_ids: ds.users().ids().to_vec(),
                    item_ids: ds.items().ids().to_vec(),
                };
                write_archive(&path, &archive)?;
                outputs.push(path);
                Ok(())
            })
        } else {
            run_protocol_on(&ds, &config)
        }
        .map_err(runtime)?;
        save_report(&report, &dir, opts.format, &mut outputs)?;
        let failed_cells = report.cells.iter().filter(|c| c.error.is_some()).count();
        entries.push(ExperimentEntry {
            label,
            split_seeds: config.split_seeds.clone(),
            model_seeds: config.models.iter().map(|m| ModelSeeds { name: m.name.clone(), seeds: m.seeds() }).collect(),
            config,
            failed_cells,
        });
    }

    let failed: usize = entries.iter().map(|e| e.failed_cells).sum();
    let manifest_path = out.join("manifest.json");
    outputs.push(manifest_path.clone());
    let manifest = RunManifest {
        tool: "cfens",
        version: env!("CARGO_PKG_VERSION"),
        config_path: config_path.to_path_buf(),
        data_dir: settings::data_dir(),
        options: opts,
        experiments: entries,
        outputs,
    };
    write_text(&manifest_path, &serde_json::to_string_pretty(&manifest).map_err(runtime)?)?;
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} cell(s) failed; partial report written to {}", out.display())));
    }
    log::info!("report written to {}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct BenchArgs {
    /// Run file whose models form the cost/accuracy frontier; also supplies the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rating file when no run file is given (relative to the data directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Format of --data.
    #[arg(long, default_value = "ml100k")]
    data_format: RatingFormat,
    /// Ensemble sizes: `A..B` (inclusive) or a comma list.
    #[arg(long, default_value = "1..10")]
    ks: String,
    /// Base learner family of the scaling probe.
    #[arg(long, default_value = "fnm", value_parser = parse_family)]
    family: Family,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
        let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "pearson" => Ok(Metric::Pearson),
        "cosine" => Ok(Metric::Cosine),
        _ => Err("expected pearson or cosine".into()),
    }
}

/// Parses `A..B` (inclusive) or `a,b,c`.
pub fn parse_ks(s: &str) -> anyhow::Result<Vec<usize>> {
    let ks: Vec<usize> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
            (a..=b).collect()
        }
        None => s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?,
    };
    if ks.len() < 3 {
        return Err(anyhow!("a K range needs at least three sizes, got {}", ks.len()));
    }
    if ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(anyhow!("K values must be positive and strictly ascending"));
    }
    Ok(ks)
}

pub fn bench(args: &BenchArgs, g: &GlobalArgs) -> Outcome {
    let format: ReportFormat = g.format.as_deref().map(str::parse).transpose().map_err(usage)?.unwrap_or_default();
    let ks = parse_ks(&args.ks).with_context(|| format!("invalid --ks `{}`", args.ks)).map_err(usage)?;
    let seed = g.seed.unwrap_or(1);
    let learner = LearnerConfig {
        k: args.k,
        metric: args.metric,
        factors: args.factors.or(match args.family {
            Family::KnnUser | Family::KnnItem => None,
            _ => Some(10),
        }),
        epochs: args.epochs,
        seed: Some(seed),
        ..LearnerConfig::new(args.family)
    };
    let spec = learner.to_spec().map_err(usage)?;
    let run_file = args.config.as_deref().map(RunFile::load).transpose().map_err(usage)?;
    let mut frontier_config = run_file.map(|f| f.experiment);
    if let Some(c) = &mut frontier_config {
        settings::apply(c, g.seed);
        c.validate().map_err(usage)?;
    }
    init_workers(Resolved::merge(&Flags { workers: g.workers, ..Flags::default() }, &Default::default()).map_err(usage)?.workers)?;

    let ds = match (&frontier_config, &args.data) {
        (_, Some(path)) => read_ratings_file(settings::resolve_data_path(path), args.data_format)
            .with_context(|| format!("cannot load {}", path.display()))
            .map_err(runtime)?,
        (Some(c), None) => load_dataset(c)?,
        (None, None) => {
            let path = settings::resolve_data_path(Path::new("ml-100k/u.data"));
            read_ratings_file(&path, RatingFormat::Ml100k)
                .with_context(|| format!("cannot load {}", path.display()))
                .map_err(runtime)?
        }
    };
    let split = random_split(&ds, 0.8, seed).map_err(runtime)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("bench-out"));

    log::info!("timing {} ensembles for K in {:?}", args.family.name(), ks);
    let probe = time_scaling_probe(&spec, &split.train, &ks, seed).map_err(runtime)?;
    let mut csv = String::from("k,train_s\n");
    for (k, s) in &probe.points {
        csv.push_str(&format!("{k},{s}\n"));
    }
    if format.csv() {
        write_text(&out.join("scaling.csv"), &csv)?;
    }
    if format.json() {
        let doc = json!({ "family": args.family.name(), "split_seed": seed, "points": probe.points, "fit": probe.fit });
        write_text(&out.join("scaling.json"), &serde_json::to_string_pretty(&doc).map_err(runtime)?)?;
    }
    log::info!(
        "slope {:.4} s/member, intercept {:.4} s, R^2 {:.4}",
        probe.fit.slope,
        probe.fit.intercept,
        probe.fit.r_squared
    );

    if let Some(config) = frontier_config {
        let ds = if args.data.is_some() { load_dataset(&config)? } else { ds };
        let report = run_protocol_on(&ds, &config).map_err(runtime)?;
        let mut csv = String::from("model,train_s,rmse\n");
        let mut rows = Vec::new();
        for s in &report.summaries {
            let rmse = s.rmse_mean.map_or(String::new(), |r| r.to_string());
            csv.push_str(&format!("{},{},{}\n", s.model, s.train_s_mean, rmse));
            rows.push(json!({ "model": s.model, "train_s": s.train_s_mean, "rmse": s.rmse_mean }));
        }
        if format.csv() {
            write_text(&out.join("frontier.csv"), &csv)?;
        }
        if format.json() {
            write_text(&out.join("frontier.json"), &serde_json::to_string_pretty(&rows).map_err(runtime)?)?;
        }
    }
    Ok(())
}

fn kind_name(kind: RecordKind) -> &'static str {
    match kind {
        RecordKind::Knn => "knn",
        RecordKind::Mf => "mf",
        RecordKind::Fnm => "fnm",
        RecordKind::Ensemble => "ensemble",
    }
}

fn describe(record: &Record) -> anyhow::Result<Value> {
    let sections: Vec<Value> = record
        .sections()
        .into_iter()
        .map(|(name, ty, len)| json!({ "name": name, "type": ty, "bytes": len }))
        .collect();
    let mut doc = json!({
        "version": record.version,
        "kind": kind_name(record.kind),
        "sections": sections,
        "meta": record.meta()?,
    });
    if record.kind == RecordKind::Ensemble {
        let mut members = Vec::new();
        let mut t = 0;
        while let Some(bytes) = record.payload(&format!("member.{t}")) {
            members.push(describe(&Record::parse(bytes)?)?);
            t += 1;
        }
        doc["members"] = Value::Array(members);
    }
    Ok(doc)
}

pub fn inspect(path: &Path, g: &GlobalArgs) -> Outcome {
    let format = match g.format.as_deref() {
        None | Some("text") => None,
        Some("json") => Some(()),
        Some(other) => return Err(usage(anyhow!("unknown inspect format `{other}` (expected text or json)"))),
    };
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(runtime)?;
    let archive = decode(&bytes).with_context(|| format!("invalid archive {}", path.display())).map_err(runtime)?;
    let record = Record::parse(&bytes).map_err(runtime)?;
    let mut doc = describe(&record).map_err(runtime)?;
    doc["users"] = json!(archive.user_ids.len());
    doc["items"] = json!(archive.item_ids.len());
    let text = if format.is_some() {
        serde_json::to_string_pretty(&doc).map_err(runtime)?
    } else {
        let mut s = format!(
            "archive v{} ({} bytes)\nkind: {}\nusers: {}, items: {}\nmeta: {}\nsections:\n",
            record.version,
            bytes.len(),
            doc["kind"].as_str().unwrap_or("?"),
            archive.user_ids.len(),
            archive.item_ids.len(),
            doc["meta"],
        );
        for (name, ty, len) in record.sections() {
            s.push_str(&format!("  {name:<22} {:<6} {len} bytes\n", format!("{ty:?}").to_lowercase()));
        }
        if let Some(members) = doc["members"].as_array() {
            let kinds: Vec<&str> = members.iter().filter_map(|m| m["kind"].as_str()).collect();
            s.push_str(&format!("members: {} ({})\n", members.len(), kinds.join(", ")));
        }
        s
    };
    print!("{text}");
    std::io::stdout().flush().map_err(runtime)?;
    Ok(())
}

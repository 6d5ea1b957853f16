use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use linkage_core::config::{gen_canonical_lines, gen_config_hash, GenFile, RunConfig};
use linkage_core::dataset::{load_cases, load_schema, save_cases, save_schema, CaseTable};
use linkage_core::evaluation::{cross_validate, rank_query, Method};
use linkage_core::mapping::{apply_mapping, parse_mapping, reduction_rate};
use linkage_core::network::{load_params, save_params, Activation, Fusion};
use linkage_core::synthgen::{calibrate_imbalance, generate, summarize};
use linkage_core::Error;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "linkage", version, about = "Crime linkage with a Siamese autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// False-positive rate at which the true-positive rate is reported.
    #[arg(long)]
    fixed_fp_rate: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Case table CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Feature schema CSV (`feature,kind`).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Consolidation map CSV (`source_feature,target_feature`).
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic case table.
    Gen {
        /// Generator config (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Apply a consolidation map to a case table.
    Map {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        shared: Shared,
    },
    /// Cross-validate one method.
    Experiment {
        #[command(flatten)]
        data: DataArgs,
        /// Run config (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// ours, naive_siamese or logreg.
        #[arg(long, default_value = "ours")]
        method: Method,
        #[command(flatten)]
        shared: Shared,
    },
    /// Cross-validate every cell of an architecture grid.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid file with `axis = v1, v2, ...` lines.
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Print the Top-K most similar cases to a query case.
    Rank {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Parameter file written by `experiment`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Margin used for the similarity decay.
        #[arg(long, default_value_t = 5.0)]
        margin: f64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 3,
        Error::Leakage(_) => 4,
        _ => 2,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn out_dir(shared: &Shared) -> Result<PathBuf, Error> {
    let dir = shared.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn lines_to_object(lines: &[String]) -> Value {
    let map: Map<String, Value> = lines
        .iter()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
        .collect();
    Value::Object(map)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

struct Manifest<'a> {
    command: &'a str,
    config: Value,
    config_hash: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn write_manifest(dir: &Path, m: Manifest) -> Result<(), Error> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let value = json!({
        "command": m.command,
        "config": m.config,
        "config_hash": m.config_hash,
        "seed": m.seed,
        "inputs": m.inputs,
        "outputs": m.outputs,
        "timestamp_unix": timestamp,
    });
    let mut text = serde_json::to_string_pretty(&value).expect("plain JSON value");
    text.push('\n');
    write_file(&dir.join("manifest.json"), text)
}

fn load_data(data: &DataArgs) -> Result<(CaseTable, Vec<String>), Error> {
    let mut inputs = vec![path_str(&data.dataset)];
    let mut table = load_cases(&data.dataset, None)?;
    if let Some(schema) = &data.schema {
        table = table.with_schema(load_schema(schema)?)?;
        inputs.push(path_str(schema));
    }
    if let Some(mapping) = &data.mapping {
        let spec = parse_mapping(mapping)?;
        let (remaining, rate) = reduction_rate(&spec, table.dims());
        table = apply_mapping(&table, &spec)?;
        log::info!("mapping {} leaves {remaining} features ({:.1}% reduction)", spec.name, rate * 100.0);
        inputs.push(path_str(mapping));
    }
    Ok((table, inputs))
}

fn run_config(path: Option<&Path>, shared: &Shared) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.train.seed = seed;
    }
    if let Some(rate) = shared.fixed_fp_rate {
        cfg.fixed_fp_rate = rate;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(config: Option<PathBuf>, shared: Shared) -> Result<(), Error> {
    let mut file = match &config {
        Some(p) => GenFile::load(p)?,
        None => GenFile {
            config: Default::default(),
            target_positive_fraction: None,
        },
    };
    if let Some(seed) = shared.seed {
        file.config.seed = seed;
    }
    let gen_cfg = match file.target_positive_fraction {
        Some(target) => calibrate_imbalance(&file.config, target)?,
        None => file.config,
    };
    let table = generate(&gen_cfg)?;
    let stats = summarize(&table);
    log::info!(
        "generated {} cases, sparsity {:.4}, linked-pair fraction {:.5}",
        table.len(),
        stats.sparsity,
        stats.positive_pair_fraction
    );

    let dir = out_dir(&shared)?;
    let (data, schema, stats_path) = (dir.join("dataset.csv"), dir.join("schema.csv"), dir.join("stats.json"));
    save_cases(&table, &data)?;
    save_schema(table.schema(), &schema)?;
    let mut text = serde_json::to_string_pretty(&stats).expect("plain JSON value");
    text.push('\n');
    write_file(&stats_path, text)?;
    write_manifest(
        &dir,
        Manifest {
            command: "gen",
            config: lines_to_object(&gen_canonical_lines(&gen_cfg)),
            config_hash: gen_config_hash(&gen_cfg),
            seed: gen_cfg.seed,
            inputs: config.iter().map(|p| path_str(p)).collect(),
            outputs: [data, schema, stats_path].iter().map(|p| path_str(p)).collect(),
        },
    )
}

fn cmd_map(data: DataArgs, shared: Shared) -> Result<(), Error> {
    if data.mapping.is_none() {
        return Err(Error::config("mapping", "`map` needs --mapping"));
    }
    let (table, inputs) = load_data(&data)?;
    let dir = out_dir(&shared)?;
    let (out, schema) = (dir.join("dataset.csv"), dir.join("schema.csv"));
    save_cases(&table, &out)?;
    save_schema(table.schema(), &schema)?;
    write_manifest(
        &dir,
        Manifest {
            command: "map",
            config: json!({ "dims": table.dims().to_string() }),
            config_hash: String::new(),
            seed: shared.seed.unwrap_or(0),
            inputs,
            outputs: vec![path_str(&out), path_str(&schema)],
        },
    )
}

fn cmd_experiment(data: DataArgs, config: Option<PathBuf>, method: Method, shared: Shared) -> Result<(), Error> {
    let (table, mut inputs) = load_data(&data)?;
    let cfg = run_config(config.as_deref(), &shared)?;
    inputs.extend(config.iter().map(|p| path_str(p)));
    let outcome = cross_validate(&table, &cfg, method, shared.jobs)?;
    let r = &outcome.report;
    log::info!(
        "{}: AUC {:.2} ± {:.2}, TP@FP {:.2} ± {:.2}, AUPRC {:.2} ± {:.2}",
        method.as_str(),
        r.auc.mean,
        r.auc.std,
        r.tp_at_fixed_fp.mean,
        r.tp_at_fixed_fp.std,
        r.auprc.mean,
        r.auprc.std
    );

    let dir = out_dir(&shared)?;
    let metrics = dir.join("metrics.json");
    write_file(&metrics, r.to_json_string())?;
    let mut outputs = vec![path_str(&metrics)];
    for fold in &outcome.folds {
        if let Some(history) = &fold.history {
            let p = dir.join(format!("history_fold{}.csv", fold.fold));
            write_file(&p, history.to_csv())?;
            outputs.push(path_str(&p));
        }
        if let Some(params) = &fold.params {
            let p = dir.join(format!("params_fold{}.lfnp", fold.fold));
            save_params(params, &p)?;
            outputs.push(path_str(&p));
        }
        if let Some(model) = &fold.logreg {
            let p = dir.join(format!("logreg_fold{}.json", fold.fold));
            write_file(&p, serde_json::to_string_pretty(model).expect("plain JSON value") + "\n")?;
            outputs.push(path_str(&p));
        }
    }
    let mut snapshot = lines_to_object(&outcome.config.canonical_lines());
    snapshot["method"] = Value::String(method.as_str().to_string());
    write_manifest(
        &dir,
        Manifest {
            command: "experiment",
            config: snapshot,
            config_hash: r.config_hash.clone(),
            seed: r.seed,
            inputs,
            outputs,
        },
    )
}

/// Grid axes in output column order.
const AXES: [&str; 4] = ["fusion", "skip_connections", "depth", "activation"];

fn parse_grid(path: &Path, base: &RunConfig) -> Result<Vec<RunConfig>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut values: Vec<Option<Vec<String>>> = vec![None; AXES.len()];
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (key, list) = raw.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `axis = v1, v2`, found `{raw}`"),
        })?;
        let key = key.trim();
        let axis = AXES
            .iter()
            .position(|a| *a == key || (key == "skip" && *a == "skip_connections"))
            .ok_or_else(|| Error::config(key, format!("line {}: unknown grid axis", i + 1)))?;
        let items: Vec<String> = list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(Error::config(key, format!("line {}: no values", i + 1)));
        }
        values[axis] = Some(items);
    }
    if values.iter().all(Option::is_none) {
        return Err(Error::config("grid", "grid file names no axes"));
    }

    let mut cells = vec![*base];
    for (axis, items) in values.iter().enumerate() {
        let Some(items) = items else { continue };
        let mut next = Vec::with_capacity(cells.len() * items.len());
        for cell in &cells {
            for item in items {
                let mut c = *cell;
                let bad = |e: String| Error::config(AXES[axis], e);
                match axis {
                    0 => c.net.fusion = item.parse::<Fusion>().map_err(|e| bad(e.to_string()))?,
                    1 => {
                        c.net.skip_connections = match item.as_str() {
                            "true" | "on" | "1" | "yes" => true,
                            "false" | "off" | "0" | "no" => false,
                            other => return Err(bad(format!("expected a boolean, found `{other}`"))),
                        }
                    }
                    2 => c.net.depth = item.parse().map_err(|e| bad(format!("`{item}`: {e}")))?,
                    _ => c.net.activation = item.parse::<Activation>().map_err(|e| bad(e.to_string()))?,
                }
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

fn cmd_ablate(data: DataArgs, config: Option<PathBuf>, grid: PathBuf, shared: Shared) -> Result<(), Error> {
    let base = run_config(config.as_deref(), &shared)?;
    let cells = parse_grid(&grid, &base)?;
    let (table, mut inputs) = load_data(&data)?;
    inputs.extend(config.iter().map(|p| path_str(p)));
    inputs.push(path_str(&grid));

    let mut csv = String::from("fusion,skip,depth,activation,auc_mean,auc_std,tp_mean,tp_std,auprc_mean,auprc_std\n");
    for cell in &cells {
        let r = cross_validate(&table, cell, Method::AsConfigured, shared.jobs)?.report;
        log::info!(
            "{} skip={} depth={} {}: AUC {:.2}",
            cell.net.fusion,
            cell.net.skip_connections,
            cell.net.depth,
            cell.net.activation,
            r.auc.mean
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            cell.net.fusion,
            cell.net.skip_connections,
            cell.net.depth,
            cell.net.activation,
            r.auc.mean,
            r.auc.std,
            r.tp_at_fixed_fp.mean,
            r.tp_at_fixed_fp.std,
            r.auprc.mean,
            r.auprc.std
        ));
    }
    let dir = out_dir(&shared)?;
    let path = dir.join("ablation.csv");
    write_file(&path, csv)?;
    write_manifest(
        &dir,
        Manifest {
            command: "ablate",
            config: lines_to_object(&base.canonical_lines()),
            config_hash: base.hash(),
            seed: base.train.seed,
            inputs,
            outputs: vec![path_str(&path)],
        },
    )
}

fn cmd_rank(
    dataset: PathBuf,
    schema: Option<PathBuf>,
    params: PathBuf,
    query: String,
    k: usize,
    margin: f64,
) -> Result<(), Error> {
    let data = DataArgs {
        dataset,
        schema,
        mapping: None,
    };
    let (table, _) = load_data(&data)?;
    let params = load_params(&params)?;
    let ranked = rank_query(&params, &table, &query, k, margin)?;
    println!("rank,case_id,similarity,distance");
    for r in ranked {
        println!("{},{},{},{}", r.rank, r.case_id, r.similarity, r.distance);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, shared } => cmd_gen(config, shared),
        Command::Map { data, shared } => cmd_map(data, shared),
        Command::Experiment {
            data,
            config,
            method,
            shared,
        } => cmd_experiment(data, config, method, shared),
        Command::Ablate {
            data,
            config,
            grid,
            shared,
        } => cmd_ablate(data, config, grid, shared),
        Command::Rank {
            dataset,
            schema,
            params,
            query,
            k,
            margin,
        } => cmd_rank(dataset, schema, params, query, k, margin),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

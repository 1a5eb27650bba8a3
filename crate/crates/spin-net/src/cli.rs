//! Command-line plumbing: config resolution with dotted-key overrides,
//! the run manifest, and the subcommand implementations behind the `spin`
//! binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::data::{
    generate_mosaic, make_imputation_task, ImputationLayout, MosaicGenConfig, Split,
    TabularDataset,
};
use crate::evalbench::{
    bench_scaling, impute_r2, run_ablation, write_ablation_csv, write_scaling_csv,
    write_scaling_json, AblationSpec, BenchConfig,
};
use crate::model::{AttrKind, EmbeddedBatch, ModelConfig, SpinModel, Value};
use crate::numerics::Scalar;
use crate::training::{
    load_checkpoint, train, tune, write_history_csv, write_tune_csv, OptimizerKind, RunConfig,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config: exit code 1.
    Usage(String),
    /// The run itself failed: exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Parser)]
#[command(name = "spin", version, about = "semi-parametric inducing point networks")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
    /// JSON config document; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Overrides both the training seed and the data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-key config override, e.g. model.e=32. Repeatable.
    #[arg(long = "override", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, value_enum, default_value = "double")]
    pub precision: Precision,
    /// Drop the latent self-attention sublayers.
    #[arg(long, global = true)]
    pub no_abla: bool,
    #[arg(long, global = true, value_enum)]
    pub optimizer: Option<OptimizerFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerFlag {
    Adamw,
    LambLookahead,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write the synthetic mosaic panels.
    Datagen,
    /// Train on the mosaic imputation task and checkpoint the best model.
    Train,
    /// Impute the test split; optionally from an exported encoding.
    Predict {
        #[arg(long)]
        encoding: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the trained encoder's dataset encoding.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scaling benchmark: SPIN vs the quadratic baseline.
    Bench {
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
    /// Sublayer ablation over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Grid search over the `tune` patches in the config document.
    Tune,
}

/// Mosaic-task generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub founders: usize,
    pub sites: usize,
    pub rho: f64,
    pub mu: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub k: usize,
    pub n_input_sites: usize,
    pub n_target_sites: usize,
    pub layout: String,
    pub val_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            founders: 16,
            sites: 250,
            rho: 0.02,
            mu: 0.001,
            n_train: 2000,
            n_test: 200,
            seed: 7,
            k: 5,
            n_input_sites: 150,
            n_target_sites: 100,
            layout: "interleaved".into(),
            val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSection {
    pub grid: Vec<usize>,
    pub d: usize,
    pub warmup: usize,
    pub timed: usize,
    pub query_rows: usize,
    pub mem_cap_bytes: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            grid: b.grid,
            d: b.d,
            warmup: b.warmup,
            timed: b.timed,
            query_rows: b.query_rows,
            mem_cap_bytes: b.mem_cap_bytes,
        }
    }
}

/// The resolved config document: training run settings at the top level
/// plus data/bench sections and optional tune patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub bench: BenchSection,
    /// Partial documents merged onto this config, one grid point each.
    #[serde(default)]
    pub tune: Vec<Json>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            run: RunConfig::new(ModelConfig::default()),
            data: DataSection::default(),
            bench: BenchSection::default(),
            tune: Vec::new(),
        }
    }
}

fn deep_merge(base: &mut Json, patch: &Json) {
    match (base, patch) {
        (Json::Object(b), Json::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Set `doc[path]` for a dotted path. Every segment but the last must
/// already exist: overrides may not invent keys.
fn apply_override(doc: &mut Json, key: &str, value: Json) -> std::result::Result<(), String> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut cursor = doc;
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| format!("{key}: {} is not an object", segments[..i].join(".")))?;
        if i + 1 == segments.len() {
            if !map.contains_key(*seg) {
                return Err(format!("{key}: unknown config key"));
            }
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = map
            .get_mut(*seg)
            .ok_or_else(|| format!("{key}: unknown config section {seg:?}"))?;
    }
    unreachable!("empty override key is rejected by the parser")
}

fn parse_override(raw: &str) -> std::result::Result<(String, Json), String> {
    let (key, val) = raw
        .split_once('=')
        .ok_or_else(|| format!("{raw:?}: expected K=V"))?;
    if key.is_empty() {
        return Err(format!("{raw:?}: empty key"));
    }
    // bare words become strings, everything else parses as JSON
    let value = serde_json::from_str(val).unwrap_or(Json::String(val.to_string()));
    Ok((key.to_string(), value))
}

/// Resolve a config document plus overrides into a validated [`AppConfig`].
/// All violations are reported together.
pub fn validate_config(
    document: &str,
    overrides: &[String],
) -> std::result::Result<AppConfig, Vec<String>> {
    let mut errors = Vec::new();
    let mut doc = serde_json::to_value(AppConfig::default()).expect("default serializes");
    match serde_json::from_str::<Json>(document) {
        Ok(patch) if patch.is_object() => deep_merge(&mut doc, &patch),
        Ok(_) => errors.push("config document must be a JSON object".into()),
        Err(e) => errors.push(format!("config parse: {e}")),
    }
    let mut seen = std::collections::HashSet::new();
    for raw in overrides {
        match parse_override(raw) {
            Ok((key, value)) => {
                if !seen.insert(key.clone()) {
                    errors.push(format!("{key}: conflicting overrides"));
                } else if let Err(e) = apply_override(&mut doc, &key, value) {
                    errors.push(e);
                }
            }
            Err(e) => errors.push(e),
        }
    }
    let cfg: AppConfig = match serde_json::from_value(doc) {
        Ok(c) => c,
        Err(e) => {
            errors.push(format!("config: {e}"));
            return Err(errors);
        }
    };

    let m = &cfg.run.model;
    if m.e == 0 || m.h == 0 || m.f == 0 || m.depth == 0 {
        errors.push(format!(
            "model dimensions must be positive: e={}, h={}, f={}, depth={}",
            m.e, m.h, m.f, m.depth
        ));
    }
    if m.heads == 0 || m.e % m.heads.max(1) != 0 {
        errors.push(format!(
            "embedding width e={} must be divisible by heads={}",
            m.e, m.heads
        ));
    }
    if !(0.0..=1.0).contains(&m.dropout) {
        errors.push(format!("dropout {} outside [0, 1]", m.dropout));
    }
    let prob = |name: &str, p: f64, errors: &mut Vec<String>| {
        if !(0.0..=1.0).contains(&p) {
            errors.push(format!("{name} {p} outside [0, 1]"));
        }
    };
    prob("mask_rates.p_attr", cfg.run.mask_rates.p_attr, &mut errors);
    prob("mask_rates.p_label", cfg.run.mask_rates.p_label, &mut errors);
    prob("data.rho", cfg.data.rho, &mut errors);
    prob("data.mu", cfg.data.mu, &mut errors);
    prob("data.val_frac", cfg.data.val_frac, &mut errors);
    if !(0.0..=0.5).contains(&cfg.run.lambda_floor) {
        errors.push(format!(
            "lambda_floor {} outside [0, 0.5]",
            cfg.run.lambda_floor
        ));
    }
    if cfg.run.epochs == 0 {
        errors.push("epochs must be >= 1".into());
    }
    if cfg.run.slice_size < 2 {
        errors.push(format!("slice_size {} < 2", cfg.run.slice_size));
    }
    if cfg.run.optimizer.lr <= 0.0 {
        errors.push(format!("optimizer.lr {} must be positive", cfg.run.optimizer.lr));
    }
    if cfg.data.founders < 2 {
        errors.push(format!("data.founders {} < 2", cfg.data.founders));
    }
    if cfg.data.k == 0
        || cfg.data.n_input_sites % cfg.data.k != 0
        || cfg.data.n_target_sites % cfg.data.k != 0
    {
        errors.push(format!(
            "site windows {}/{} must be multiples of k={}",
            cfg.data.n_input_sites, cfg.data.n_target_sites, cfg.data.k
        ));
    }
    if cfg.data.n_input_sites + cfg.data.n_target_sites > cfg.data.sites {
        errors.push(format!(
            "windows need {} sites, panel has {}",
            cfg.data.n_input_sites + cfg.data.n_target_sites,
            cfg.data.sites
        ));
    }
    if !matches!(cfg.data.layout.as_str(), "interleaved" | "flanking") {
        errors.push(format!(
            "data.layout {:?} is not interleaved or flanking",
            cfg.data.layout
        ));
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn layout_of(cfg: &DataSection) -> ImputationLayout {
    match cfg.layout.as_str() {
        "flanking" => ImputationLayout::Flanking,
        _ => ImputationLayout::Interleaved,
    }
}

fn mosaic_of(d: &DataSection) -> MosaicGenConfig {
    MosaicGenConfig {
        founders: d.founders,
        sites: d.sites,
        freqs: vec![0.5; d.sites],
        rho: d.rho,
        mu: d.mu,
        n: d.n_train + d.n_test,
        seed: d.seed,
    }
}

/// Generate the mosaic panel and assemble the imputation dataset:
/// train/val over the first n_train rows, test over the rest.
pub fn build_dataset(d: &DataSection) -> Result<TabularDataset> {
    let out = generate_mosaic(&mosaic_of(d)).map_err(runtime)?;
    let mut ds = make_imputation_task(
        &out.panel,
        d.k,
        d.n_input_sites,
        d.n_target_sites,
        layout_of(d),
    )
    .map_err(runtime)?;
    let n_val = ((d.n_train as f64) * d.val_frac).round() as usize;
    for i in (d.n_train - n_val)..d.n_train {
        ds.split[i] = Split::Val;
    }
    for i in d.n_train..(d.n_train + d.n_test) {
        ds.split[i] = Split::Test;
    }
    Ok(ds)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: String,
    seed: u64,
    version: &'a str,
    precision: Precision,
    config: &'a AppConfig,
    artifacts: Vec<String>,
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &AppConfig,
    precision: Precision,
    artifacts: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        seed: cfg.run.seed,
        version: env!("CARGO_PKG_VERSION"),
        precision,
        config: cfg,
        artifacts: artifacts
            .iter()
            .map(|p| {
                p.strip_prefix(out)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    std::fs::write(out.join("manifest.json"), json).map_err(runtime)?;
    Ok(())
}

fn cmd_datagen(cfg: &AppConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    let panel = generate_mosaic(&mosaic_of(d)).map_err(runtime)?.panel;
    let write_panel = |path: &Path, rows: &[Vec<u8>]| -> Result<()> {
        let mut text = String::with_capacity(rows.len() * (d.sites + 1));
        for row in rows {
            for &site in row {
                text.push(if site == 0 { '0' } else { '1' });
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(runtime)
    };
    let train_path = out.join("panel_train.txt");
    let test_path = out.join("panel_test.txt");
    write_panel(&train_path, &panel.haplotypes[..d.n_train])?;
    write_panel(&test_path, &panel.haplotypes[d.n_train..])?;
    Ok(vec![train_path, test_path])
}

fn cmd_train<T: Scalar>(cfg: &AppConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = build_dataset(&cfg.data)?;
    let ckpt = out.join("model.ckpt");
    let (model, run) = train::<T>(&ds, &cfg.run, Some(&ckpt)).map_err(runtime)?;
    let history = out.join("history.csv");
    write_history_csv(&run, &history).map_err(runtime)?;
    let report = impute_r2(
        &model,
        &ds,
        &ds.indices_of(Split::Train),
        &ds.indices_of(Split::Test),
        cfg.data.k,
    )
    .map_err(runtime)?;
    let metrics = out.join("metrics.json");
    std::fs::write(
        &metrics,
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    log::info!("test r2 {:.2}, best epoch {}", report.value, run.best_epoch);
    Ok(vec![ckpt, history, metrics])
}

fn load_model<T: Scalar>(cfg: &AppConfig, path: &Path) -> Result<SpinModel<T>> {
    let ds_schema = build_dataset(&cfg.data)?.schema;
    let (params, _, _) = load_checkpoint::<T>(path, &ds_schema, &cfg.run.model).map_err(runtime)?;
    Ok(SpinModel {
        schema: ds_schema,
        config: cfg.run.model.clone(),
        params,
    })
}

fn context_batch<T: Scalar>(ds: &TabularDataset) -> Result<EmbeddedBatch<T>> {
    let mut ctx_idx = ds.indices_of(Split::Train);
    ctx_idx.extend(ds.indices_of(Split::Val));
    let (rows, missing) = ds.gather(&ctx_idx);
    EmbeddedBatch::new(&ds.schema, &rows, &missing).map_err(runtime)
}

fn cmd_encode<T: Scalar>(cfg: &AppConfig, out: &Path, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let ds = build_dataset(&cfg.data)?;
    let model = load_model::<T>(cfg, ckpt)?;
    let ctx = context_batch::<T>(&ds)?;
    let enc = model.encode_dataset(&ctx).map_err(runtime)?;
    let path = out.join("encoding.bin");
    model.export_encoding(&enc, &path).map_err(runtime)?;
    Ok(vec![path])
}

fn cmd_predict<T: Scalar>(
    cfg: &AppConfig,
    out: &Path,
    ckpt: &Path,
    encoding: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let ds = build_dataset(&cfg.data)?;
    let model = load_model::<T>(cfg, ckpt)?;
    let test_idx = ds.indices_of(Split::Test);
    let d = ds.schema.d();
    let targets = ds.schema.target_indices();
    let (rows, mut mask) = ds.gather(&test_idx);
    for r in 0..test_idx.len() {
        for &a in &targets {
            mask[r * d + a] = true;
        }
    }
    let query = EmbeddedBatch::<T>::new(&ds.schema, &rows, &mask).map_err(runtime)?;

    let outs = match encoding {
        Some(path) => {
            let enc = SpinModel::<T>::import_encoding(path).map_err(runtime)?;
            model.predict_from_encoding(&enc, &query).map_err(runtime)?
        }
        None => {
            let ctx = context_batch::<T>(&ds)?;
            let enc = model.encode_dataset(&ctx).map_err(runtime)?;
            model.predict_with(&enc.h_d, &query).map_err(runtime)?
        }
    };

    let path = out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(runtime)?;
    w.write_record(["row", "attribute", "predicted"]).map_err(runtime)?;
    for (local, &row) in test_idx.iter().enumerate() {
        for &a in &targets {
            let vocab = match ds.schema.attributes[a].kind {
                AttrKind::Categorical { vocab } => vocab,
                AttrKind::Continuous => 1,
            };
            let pred = match ds.schema.attributes[a].kind {
                AttrKind::Categorical { .. } => (0..vocab)
                    .max_by(|&i, &j| {
                        outs[a]
                            .at2(local, i)
                            .partial_cmp(&outs[a].at2(local, j))
                            .unwrap()
                    })
                    .unwrap()
                    .to_string(),
                AttrKind::Continuous => outs[a].at2(local, 0).to_f64().to_string(),
            };
            w.write_record([
                row.to_string(),
                ds.schema.attributes[a].name.clone(),
                pred,
            ])
            .map_err(runtime)?;
        }
    }
    w.flush().map_err(runtime)?;

    // score against gold when every target is categorical (the K-mer task)
    let mut artifacts = vec![path];
    if targets
        .iter()
        .all(|&a| matches!(ds.schema.attributes[a].kind, AttrKind::Categorical { .. }))
    {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (local, row) in rows.iter().enumerate() {
            for &a in &targets {
                let vocab = match ds.schema.attributes[a].kind {
                    AttrKind::Categorical { vocab } => vocab,
                    AttrKind::Continuous => unreachable!(),
                };
                let argmax = (0..vocab)
                    .max_by(|&i, &j| {
                        outs[a]
                            .at2(local, i)
                            .partial_cmp(&outs[a].at2(local, j))
                            .unwrap()
                    })
                    .unwrap();
                if let Value::Cat(t) = row[a] {
                    correct += usize::from(argmax == t);
                    total += 1;
                }
            }
        }
        let metrics = out.join("predict_metrics.json");
        let json = serde_json::json!({
            "token_accuracy_pct": 100.0 * correct as f64 / total as f64,
            "positions": total,
        });
        std::fs::write(&metrics, serde_json::to_string_pretty(&json).map_err(runtime)?)
            .map_err(runtime)?;
        artifacts.push(metrics);
    }
    Ok(artifacts)
}

fn cmd_bench<T: Scalar>(
    cfg: &AppConfig,
    out: &Path,
    grid: Option<Vec<usize>>,
) -> Result<Vec<PathBuf>> {
    let bc = BenchConfig {
        grid: grid.unwrap_or_else(|| cfg.bench.grid.clone()),
        d: cfg.bench.d,
        model: cfg.run.model.clone(),
        warmup: cfg.bench.warmup,
        timed: cfg.bench.timed,
        query_rows: cfg.bench.query_rows,
        mem_cap_bytes: cfg.bench.mem_cap_bytes,
        seed: cfg.run.seed,
    };
    let report = bench_scaling::<T>(&bc).map_err(runtime)?;
    let csv_path = out.join("bench.csv");
    let json_path = out.join("bench.json");
    write_scaling_csv(&report, &csv_path).map_err(runtime)?;
    write_scaling_json(&report, &json_path).map_err(runtime)?;
    Ok(vec![csv_path, json_path])
}

fn cmd_ablate<T: Scalar>(
    cfg: &AppConfig,
    out: &Path,
    seeds: Option<Vec<u64>>,
) -> Result<Vec<PathBuf>> {
    let ds = build_dataset(&cfg.data)?;
    let seeds = seeds.unwrap_or_else(|| vec![1, 2, 3]);
    let (rows, aggs) = run_ablation::<T>(
        &ds,
        &cfg.run,
        &AblationSpec::all(),
        &seeds,
        cfg.data.k,
    )
    .map_err(runtime)?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&rows, &aggs, &path).map_err(runtime)?;
    Ok(vec![path])
}

fn cmd_tune<T: Scalar>(cfg: &AppConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let base = serde_json::to_value(&cfg.run).map_err(runtime)?;
    let patches: Vec<Json> = if cfg.tune.is_empty() {
        vec![
            serde_json::json!({"optimizer": {"lr": 1e-3}}),
            serde_json::json!({"optimizer": {"lr": 3e-3}}),
        ]
    } else {
        cfg.tune.clone()
    };
    let mut grid = Vec::with_capacity(patches.len());
    for p in &patches {
        let mut doc = base.clone();
        deep_merge(&mut doc, p);
        let run: RunConfig = serde_json::from_value(doc)
            .map_err(|e| CliError::Usage(format!("tune patch {p}: {e}")))?;
        grid.push(run);
    }
    let ds = build_dataset(&cfg.data)?;
    let (best, table) = tune::<T>(&ds, &grid).map_err(runtime)?;
    let table_path = out.join("tune.csv");
    write_tune_csv(&table, &table_path).map_err(runtime)?;
    let best_path = out.join("best_config.json");
    std::fs::write(
        &best_path,
        serde_json::to_string_pretty(&grid[best]).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(vec![table_path, best_path])
}

/// Resolve the config for an invocation, folding in the global flags.
pub fn resolve(cli: &Cli) -> Result<AppConfig> {
    let document = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?,
        None => "{}".into(),
    };
    let mut cfg = validate_config(&document, &cli.overrides).map_err(|errors| {
        let mut msg = String::from("invalid config:");
        for e in &errors {
            let _ = write!(msg, "\n  - {e}");
        }
        CliError::Usage(msg)
    })?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.data.seed = seed;
    }
    if cli.no_abla {
        cfg.run.model.use_abla = false;
    }
    if let Some(opt) = cli.optimizer {
        cfg.run.optimizer.kind = match opt {
            OptimizerFlag::Adamw => OptimizerKind::AdamW,
            OptimizerFlag::LambLookahead => OptimizerKind::LambLookahead,
        };
    }
    Ok(cfg)
}

/// Run one invocation end to end; the binary maps the error to an exit
/// code.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    std::fs::create_dir_all(&cli.out).map_err(runtime)?;
    let default_ckpt = cli.out.join("model.ckpt");
    macro_rules! dispatch {
        ($f:ident($($arg:expr),*)) => {
            match cli.precision {
                Precision::Single => $f::<f32>($($arg),*),
                Precision::Double => $f::<f64>($($arg),*),
            }
        };
    }
    let (name, artifacts) = match &cli.cmd {
        Cmd::Datagen => ("datagen", cmd_datagen(&cfg, &cli.out)?),
        Cmd::Train => ("train", dispatch!(cmd_train(&cfg, &cli.out))?),
        Cmd::Encode { checkpoint } => (
            "encode",
            dispatch!(cmd_encode(
                &cfg,
                &cli.out,
                checkpoint.as_deref().unwrap_or(&default_ckpt)
            ))?,
        ),
        Cmd::Predict {
            encoding,
            checkpoint,
        } => (
            "predict",
            dispatch!(cmd_predict(
                &cfg,
                &cli.out,
                checkpoint.as_deref().unwrap_or(&default_ckpt),
                encoding.as_deref()
            ))?,
        ),
        Cmd::Bench { grid } => ("bench", dispatch!(cmd_bench(&cfg, &cli.out, grid.clone()))?),
        Cmd::Ablate { seeds } => (
            "ablate",
            dispatch!(cmd_ablate(&cfg, &cli.out, seeds.clone()))?,
        ),
        Cmd::Tune => ("tune", dispatch!(cmd_tune(&cfg, &cli.out))?),
    };
    write_manifest(&cli.out, name, &cfg, cli.precision, &artifacts)?;
    for a in &artifacts {
        if !a.exists() {
            return Err(CliError::Runtime(format!(
                "manifest lists missing artifact {}",
                a.display()
            )));
        }
    }
    Ok(())
}

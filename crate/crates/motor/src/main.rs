//! Pipeline orchestrator: quantize -> train -> evaluate -> retrieve,
//! driven by a JSON run config with flag overrides.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 state/shape error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use motor::backbones::{BackboneKind, Mode, Model};
use motor::checkpoint::{apply_to_model, read_checkpoint, write_checkpoint};
use motor::config::RunConfig;
use motor::dataset::{
    build_dataset, load_feature_matrix, load_interactions, FeatureMatrix, InteractionDataset,
    Modality,
};
use motor::error::MotorError;
use motor::eval::{
    bucket_analysis, evaluate, parameter_audit, retrieve_similar_by_tokens, EvalSplit,
};
use motor::quantizer::{
    assign_tokens, fit_opq, fit_pq, quantization_error, read_tokens, write_codebook,
    write_histogram, write_tokens, TokenAssignment,
};
use motor::trainer::fit;

#[derive(Parser)]
#[command(name = "motor", about = "Token-based ID-free recommender toolkit", version)]
struct Cli {
    /// Run configuration JSON.
    #[arg(short, long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Rayon thread count (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit codebooks and emit token files per modality.
    Quantize,
    /// Train a model and write the best checkpoint plus a JSON-lines log.
    Train,
    /// Evaluate a checkpoint on the test split and write report.json.
    Evaluate {
        /// Checkpoint path (default: <output_dir>/checkpoint.motr).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// List items with the most similar token ids.
    Retrieve {
        /// Original item id string.
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
    /// Chain quantize -> train -> evaluate.
    RunAll,
}

fn exit_code_for(err: &MotorError) -> u8 {
    match err {
        MotorError::Shape { .. }
        | MotorError::TokenCorruption { .. }
        | MotorError::Format { .. }
        | MotorError::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOTOR_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: &Cli) -> motor::Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    match &cli.command {
        Command::Quantize => cmd_quantize(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, checkpoint.as_deref()),
        Command::Retrieve { item, top_n } => cmd_retrieve(&cfg, item, *top_n),
        Command::RunAll => {
            if cfg.model.mode == Mode::IdFree {
                cmd_quantize(&cfg)?;
            } else {
                log::info!("ID-based mode: skipping quantize stage");
            }
            cmd_train(&cfg)?;
            cmd_evaluate(&cfg, None)
        }
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Vision => "vision",
        Modality::Text => "text",
    }
}

fn tokens_path(cfg: &RunConfig, m: Modality) -> PathBuf {
    cfg.output_dir.join(format!("tokens_{}.tsv", modality_name(m)))
}

fn load_dataset(cfg: &RunConfig) -> motor::Result<InteractionDataset> {
    let edges = load_interactions(&cfg.interactions)?;
    build_dataset(&edges, cfg.seed)
}

fn load_features(
    cfg: &RunConfig,
    m: Modality,
    expected_rows: usize,
) -> motor::Result<FeatureMatrix> {
    let path = cfg
        .features_path(m)
        .ok_or_else(|| MotorError::Config(format!("no {} feature path configured", modality_name(m))))?;
    load_feature_matrix(path, m, expected_rows)
}

fn cmd_quantize(cfg: &RunConfig) -> motor::Result<()> {
    let ds = load_dataset(cfg)?;
    ds.write_id_maps(&cfg.output_dir.join("users.tsv"), &cfg.output_dir.join("items.tsv"))?;
    for &m in &cfg.model.modalities {
        let f = load_features(cfg, m, ds.num_items)?;
        let slots = cfg.quantizer.slots_for(m);
        let k = cfg.quantizer.codebook_size;
        let seed = cfg.seed.wrapping_add(m.tag() as u64 + 1);
        let cb = if cfg.quantizer.opq {
            fit_opq(&f, slots, k, cfg.quantizer.opq_outer_iters, cfg.quantizer.kmeans_iters, seed)?
        } else {
            fit_pq(&f, slots, k, cfg.quantizer.kmeans_iters, seed)?
        };
        let ta = assign_tokens(&f, &cb)?;
        let name = modality_name(m);
        write_codebook(&cfg.output_dir.join(format!("codebook_{name}.mcbk")), &cb)?;
        write_tokens(&tokens_path(cfg, m), &ta)?;
        write_histogram(&cfg.output_dir.join(format!("histogram_{name}.tsv")), &ta)?;
        log::info!(
            "{name}: D={slots} K={k} opq={} mean squared reconstruction error {:.6}",
            cfg.quantizer.opq,
            quantization_error(&f, &cb, &ta)
        );
    }
    Ok(())
}

fn load_assignments(
    cfg: &RunConfig,
    ds: &InteractionDataset,
) -> motor::Result<Vec<TokenAssignment>> {
    let mut out = Vec::new();
    // Canonical modality order regardless of config listing order.
    for m in Modality::ALL {
        if !cfg.model.modalities.contains(&m) {
            continue;
        }
        let ta = read_tokens(&tokens_path(cfg, m), m, cfg.quantizer.codebook_size)?;
        if ta.num_items != ds.num_items {
            return Err(MotorError::Shape {
                msg: format!(
                    "{} token file covers {} items, dataset has {}",
                    modality_name(m),
                    ta.num_items,
                    ds.num_items
                ),
            });
        }
        out.push(ta);
    }
    Ok(out)
}

fn build_model(cfg: &RunConfig, ds: &InteractionDataset) -> motor::Result<Model> {
    let features = if cfg.model.backbone == BackboneKind::Vbpr {
        Some((
            load_features(cfg, Modality::Vision, ds.num_items)?,
            load_features(cfg, Modality::Text, ds.num_items)?,
        ))
    } else {
        None
    };
    let feature_refs = features.as_ref().map(|(v, t)| (v, t));
    match cfg.model.mode {
        Mode::IdBased => Model::new_id_based(
            ds.num_users,
            ds.num_items,
            cfg.model.dim,
            cfg.model.backbone,
            cfg.model.lightgcn_layers,
            feature_refs,
            cfg.seed,
        ),
        Mode::IdFree => Model::new_id_free(
            ds.num_users,
            ds.num_items,
            cfg.model.dim,
            cfg.model.backbone,
            cfg.model.lightgcn_layers,
            cfg.model.tcn_variant,
            load_assignments(cfg, ds)?,
            cfg.quantizer.codebook_size,
            feature_refs,
            cfg.seed,
        ),
    }
}

fn cmd_train(cfg: &RunConfig) -> motor::Result<()> {
    let ds = load_dataset(cfg)?;
    let model = build_model(cfg, &ds)?;
    let outcome = fit(model, &ds, &cfg.train, cfg.seed)?;
    let mut log_file = std::fs::File::create(cfg.output_dir.join("train_log.jsonl"))?;
    for entry in &outcome.log {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
    }
    write_checkpoint(
        &cfg.output_dir.join("checkpoint.motr"),
        &cfg.to_json(),
        &outcome.model,
        None,
    )?;
    let summary = json!({
        "run_id": cfg.run_id(),
        "best_epoch": outcome.best_epoch,
        "best_val_recall@20": outcome.best_val_recall_at_20,
        "epochs_run": outcome.log.len(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> motor::Result<()> {
    let ds = load_dataset(cfg)?;
    let default_path = cfg.output_dir.join("checkpoint.motr");
    let data = read_checkpoint(checkpoint.unwrap_or(&default_path))?;
    let mut model = build_model(cfg, &ds)?;
    apply_to_model(&data, &mut model)?;
    let test = evaluate(&model, &ds, EvalSplit::Test, &[10, 20]);
    let buckets = bucket_analysis(&model, &ds);
    let audit = parameter_audit(&model);
    let report = json!({
        "run_id": cfg.run_id(),
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json())?,
        "test": test,
        "buckets": buckets,
        "parameter_audit": audit,
    });
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(cfg.output_dir.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_retrieve(cfg: &RunConfig, item: &str, top_n: usize) -> motor::Result<()> {
    let ds = load_dataset(cfg)?;
    let query = ds
        .item_ids
        .iter()
        .position(|id| id == item)
        .ok_or_else(|| MotorError::UnknownItem(item.to_string()))?;
    let assignments = load_assignments(cfg, &ds)?;
    let refs: Vec<&TokenAssignment> = assignments.iter().collect();
    for (i, overlap) in retrieve_similar_by_tokens(&refs, query, top_n) {
        println!("{}\t{overlap}", ds.item_ids[i]);
    }
    Ok(())
}

//! Experiment driver. Every command reads one JSON config, writes its
//! artifacts under the output directory and is deterministic given both.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use specalign::config::ExperimentConfig;
use specalign::dataset::{self, Dataset};
use specalign::error::{Error, Result};
use specalign::graph::build_graph;
use specalign::metrics::{self, MetricsReport, ProbeConfig};
use specalign::net::{self, MlpParams};
use specalign::spectral::{dump_embedding, embed, Embedding};
use specalign::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "specalign",
    version,
    about = "Batch-aligned spectral embeddings: generate data, train, evaluate"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured toy dataset and its train/test split.
    Generate,
    /// Train the embedding network on aligned batch embeddings.
    Train,
    /// Analytic embedding of the train split: dump + clustering metrics.
    Analytic,
    /// Evaluate a trained checkpoint on the test split.
    Eval,
    /// Joint feature/embedding training under iterative feature change.
    FeatureChange {
        /// Also run the alignment-disabled ablation.
        #[arg(long)]
        ablate: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for usage/config problems, 2 for runtime/numeric failures.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Size(_) | Error::Io(_) | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cli.cmd {
        Cmd::Generate => cmd_generate(&cfg),
        Cmd::Train => cmd_train(&cfg),
        Cmd::Analytic => cmd_analytic(&cfg),
        Cmd::Eval => cmd_eval(&cfg),
        Cmd::FeatureChange { ablate } => cmd_feature_change(&cfg, ablate),
    }
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let full = cfg.dataset.generate()?;
    let (train, test) = full.split(cfg.dataset.train_fraction, cfg.dataset.seed)?;
    let out = &cfg.output_dir;
    dataset::save_csv(&full, &out.join("dataset.csv"))?;
    dataset::save_csv(&train, &out.join("train.csv"))?;
    dataset::save_csv(&test, &out.join("test.csv"))?;

    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        dataset: &'a specalign::config::DatasetConfig,
        rows: usize,
        train_rows: usize,
        test_rows: usize,
    }
    let manifest = Manifest {
        dataset: &cfg.dataset,
        rows: full.len(),
        train_rows: train.len(),
        test_rows: test.len(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "generated {} rows ({} train, {} test) under {}",
        full.len(),
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

/// Loads the split written by `generate`, or realizes it from the config
/// when the files are absent (the generator is seeded, so both routes
/// agree).
fn load_split(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train_path = cfg.output_dir.join("train.csv");
    let test_path = cfg.output_dir.join("test.csv");
    if train_path.exists() && test_path.exists() {
        Ok((dataset::load_csv(&train_path)?, dataset::load_csv(&test_path)?))
    } else {
        cfg.dataset.realize()
    }
}

fn analytic_embedding(ds: &Dataset, cfg: &TrainConfig) -> Result<Embedding> {
    let g = build_graph(&ds.features, &ds.ids, &cfg.graph)?;
    embed(
        &g,
        cfg.k,
        cfg.graph.laplacian_kind,
        cfg.skip_trivial,
        cfg.diffusion_time,
    )
}

/// Full metrics of the model on the test split: d_G against the analytic
/// test-graph embedding, orthogonality defect, K-means NMI/ACC and a
/// linear probe trained on the train-split output.
fn evaluate_model(
    model: &MlpParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let out_test = model.infer(&test.features)?;
    let analytic = analytic_embedding(test, &cfg.train)?;
    let grassmann = metrics::grassmann_distance(&out_test, &analytic.coords)?;
    let orth_defect = metrics::orthogonality_defect(&out_test)?;
    let seed = cfg.train.seed;

    let (nmi, acc, probe_accuracy) = match (test.labels.as_ref(), train.labels.as_ref()) {
        (Some(test_labels), train_labels) => {
            let classes = test.class_count().unwrap();
            let pred = metrics::kmeans(&metrics::row_normalize(&out_test), classes, 10, seed)?;
            let nmi = metrics::nmi(test_labels, &pred)?;
            let acc = metrics::acc(test_labels, &pred)?;
            let probe = match train_labels {
                Some(train_labels) => {
                    let out_train = model.infer(&train.features)?;
                    let pc = cfg.probe.clone().unwrap_or(ProbeConfig {
                        iterations: 500,
                        lr: 0.1,
                        seed,
                    });
                    Some(metrics::linear_probe_accuracy(
                        &out_train,
                        train_labels,
                        &out_test,
                        test_labels,
                        &pc,
                    )?)
                }
                None => None,
            };
            (nmi, acc, probe)
        }
        _ => (f64::NAN, f64::NAN, None),
    };

    Ok(MetricsReport {
        grassmann,
        orth_defect,
        nmi,
        acc,
        probe_accuracy,
        k: cfg.train.k,
        n: test.len(),
        seed,
    })
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let (train_ds, test_ds) = load_split(cfg)?;
    let state = trainer::train(&train_ds, &cfg.train, Some(&test_ds))?;
    let out = &cfg.output_dir;
    net::save_checkpoint(&state.model, &out.join("checkpoint.json"))?;
    write_jsonl(&out.join("history.jsonl"), &state.history)?;
    #[derive(serde::Serialize)]
    struct FrameDump<'a> {
        anchor_ids: &'a [usize],
        ref_coords: Vec<Vec<f64>>,
    }
    let frame = FrameDump {
        anchor_ids: &state.frame.anchor_ids,
        ref_coords: state
            .frame
            .ref_coords
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
    };
    write_json(&out.join("frame.json"), &frame)?;
    let report = evaluate_model(&state.model, &train_ds, &test_ds, cfg)?;
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_analytic(cfg: &ExperimentConfig) -> Result<()> {
    let (train_ds, _) = load_split(cfg)?;
    let emb = analytic_embedding(&train_ds, &cfg.train)?;
    let out = &cfg.output_dir;
    dump_embedding(&emb, &out.join("embedding.csv"), &out.join("embedding.json"))?;
    let orth_defect = metrics::orthogonality_defect(&emb.coords)?;
    let (nmi, acc) = match train_ds.labels.as_ref() {
        Some(labels) => {
            let classes = train_ds.class_count().unwrap();
            let pred = metrics::kmeans(
                &metrics::row_normalize(&emb.coords),
                classes,
                10,
                cfg.train.seed,
            )?;
            (metrics::nmi(labels, &pred)?, metrics::acc(labels, &pred)?)
        }
        None => (f64::NAN, f64::NAN),
    };
    let report = MetricsReport {
        grassmann: 0.0,
        orth_defect,
        nmi,
        acc,
        probe_accuracy: None,
        k: cfg.train.k,
        n: train_ds.len(),
        seed: cfg.train.seed,
    };
    write_json(&out.join("analytic_report.json"), &report)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let (train_ds, test_ds) = load_split(cfg)?;
    let ckpt_path = cfg.output_dir.join("checkpoint.json");
    if !ckpt_path.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {}; run `train` first",
            ckpt_path.display()
        )));
    }
    let model = net::load_checkpoint(&ckpt_path)?;
    if model.spec().input_dim() != test_ds.dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, dataset has {}",
            model.spec().input_dim(),
            test_ds.dim()
        )));
    }
    if model.spec().output_dim() != cfg.train.k {
        return Err(Error::Shape(format!(
            "checkpoint K = {}, config K = {}",
            model.spec().output_dim(),
            cfg.train.k
        )));
    }
    let report = evaluate_model(&model, &train_ds, &test_ds, cfg)?;
    write_json(&cfg.output_dir.join("eval_report.json"), &report)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_feature_change(cfg: &ExperimentConfig, ablate: bool) -> Result<()> {
    let joint = cfg
        .joint
        .as_ref()
        .ok_or_else(|| Error::Config("feature-change needs a `joint` config block".into()))?;
    let (train_ds, val_ds) = load_split(cfg)?;
    let out = &cfg.output_dir;

    let state = trainer::train_joint(&train_ds, Some(&val_ds), joint)?;
    write_jsonl(&out.join("joint_history.jsonl"), &state.history)?;
    write_curves(&out.join("joint_curves.csv"), &state.history)?;
    println!("final spectral mse {:.6}", state.final_spectral_loss);

    if ablate {
        let mut ablated = joint.clone();
        ablated.disable_alignment = true;
        let ab = trainer::train_joint(&train_ds, Some(&val_ds), &ablated)?;
        write_jsonl(&out.join("joint_history_ablation.jsonl"), &ab.history)?;
        write_curves(&out.join("joint_curves_ablation.csv"), &ab.history)?;
        println!(
            "ablation (alignment disabled) final spectral mse {:.6} ({:.1}x)",
            ab.final_spectral_loss,
            ab.final_spectral_loss / state.final_spectral_loss
        );
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Tidy CSV of the joint-training curves, one row per iteration; spectral
/// columns are empty between spectral steps.
fn write_curves(path: &Path, history: &[trainer::JointHistoryRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "iter",
        "feature_loss",
        "spectral_loss",
        "align_rmse",
        "analytic_nmi",
        "analytic_acc",
        "train_nmi",
        "train_acc",
        "val_nmi",
        "val_acc",
    ])
    .map_err(|e| Error::Numeric(e.to_string()))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for h in history {
        wtr.write_record([
            h.iter.to_string(),
            h.feature_loss.to_string(),
            fmt(h.spectral_loss),
            fmt(h.align_rmse),
            fmt(h.analytic.map(|m| m.nmi)),
            fmt(h.analytic.map(|m| m.acc)),
            fmt(h.model_train.map(|m| m.nmi)),
            fmt(h.model_train.map(|m| m.acc)),
            fmt(h.validation.map(|m| m.nmi)),
            fmt(h.validation.map(|m| m.acc)),
        ])
        .map_err(|e| Error::Numeric(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

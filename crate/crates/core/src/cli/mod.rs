//! Command-line front end. [`run`] maps every failure to an exit code:
//! 1 usage/config, 2 data, 3 numeric.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::RunConfig;

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::experiment::{
    self, method_of, run_model, run_rules, split_samples, InvoiceOutput, Sample,
};
use crate::oracle::{desk_grad_check, model_grad_check, run_crf_oracle};
use crate::posteval::{emit_report, ReportFormat};
use crate::synth::{generate, write_corpus, SynthConfig};
use crate::tagger::{load_checkpoint, save_checkpoint, Decoder, TaggerModel};
use crate::text_features::FrequencyTable;

#[derive(Parser, Debug)]
#[command(
    name = "boxtag",
    version,
    about = "Box-level key field extraction for receipts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct ConfigArgs {
    /// JSON run configuration; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set hidden=32`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and check a corpus directory
    Validate {
        dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic corpus
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_images: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on the training split of a corpus
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        decoder: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tag every receipt of a corpus with a trained model
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a model (or the rule baseline) against gold annotations
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// `rule` needs no model
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "json")]
        format: String,
        /// all, train or val (same split as `train`)
        #[arg(long, default_value = "all")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the full model on a toy receipt
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare the CRF against brute-force enumeration
    OracleTest {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 5)]
        grad_seeds: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump fused per-box features as CSV
    Features {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// defaults < config file < BOXTAG_SEED < flags
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("BOXTAG_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("BOXTAG_SEED must be an integer, got {v:?}")))?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| {
        Error::Config(format!(
            "unknown method {s:?} (rule, boxclf, wordlstm, boxtagger)"
        ))
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Validate { dir, cfg } => {
            resolve(&cfg)?.validate()?;
            let (samples, coverage) = experiment::load_samples(&dir)?;
            for s in &samples {
                s.labeled.invoice.validate()?;
            }
            let boxes: usize = samples.iter().map(|s| s.labeled.invoice.boxes.len()).sum();
            println!(
                "{}: {} receipts, {boxes} boxes",
                dir.display(),
                samples.len()
            );
            for (field, c) in &coverage.fields {
                println!("  {field}: {} boxes aligned", c.matched_boxes);
            }
            for w in &coverage.warnings {
                println!("  warning: {w}");
            }
            Ok(())
        }
        Command::Synth {
            n,
            out,
            no_images,
            cfg,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(n) = n {
                rc.synth_n = n;
            }
            if no_images {
                rc.synth_render = false;
            }
            rc.validate()?;
            let data = generate(&SynthConfig {
                n_invoices: rc.synth_n,
                seed: rc.seed,
                render: rc.synth_render,
                ..SynthConfig::default()
            });
            create_dir(&out)?;
            write_corpus(&out, &data)?;
            echo_config(&out, &rc)?;
            println!("wrote {} receipts to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train {
            corpus,
            out,
            method,
            epochs,
            lr,
            decoder,
            cfg,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(m) = method {
                rc.method = parse_method(&m)?;
            }
            if let Some(e) = epochs {
                rc.epochs = e;
            }
            if let Some(l) = lr {
                rc.lr = l;
            }
            if let Some(d) = decoder {
                rc.decoder = match d.as_str() {
                    "crf" => Decoder::Crf,
                    "softmax" => Decoder::Softmax,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown decoder {other:?} (crf, softmax)"
                        )))
                    }
                };
            }
            rc.validate()?;
            let tagger = rc.tagger().ok_or_else(|| {
                Error::Config(
                    "the rule baseline has nothing to train; use `eval --method rule`".into(),
                )
            })?;
            let (samples, _) = experiment::load_samples(&corpus)?;
            let (tr, va) = split_samples(samples, rc.split_ratio, rc.seed)?;
            let tr: Vec<_> = tr.into_iter().map(|s| s.labeled).collect();
            let va: Vec<_> = va.into_iter().map(|s| s.labeled).collect();
            let outcome = crate::tagger::train(&tr, &va, &tagger)?;
            echo_config(&out, &rc)?;
            save_checkpoint(&outcome.model, &out.join("model.bin"))?;
            let history = serde_json::to_vec_pretty(&outcome.history).expect("history serializes");
            write_file(&out.join("history.json"), &history)?;
            let last = outcome.history.last().expect("one epoch");
            println!(
                "trained {} for {} epochs (best epoch {}, val macro-F1 {:.4}); model in {}",
                rc.method,
                last.epoch,
                outcome.best_epoch,
                outcome.history[outcome.best_epoch - 1].val_macro_f1,
                out.display()
            );
            Ok(())
        }
        Command::Predict {
            model,
            corpus,
            out,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            let model = load_checkpoint(&model)?;
            let entries = crate::corpus::load_corpus_dir(&corpus)?;
            let samples: Vec<Sample> = entries
                .into_iter()
                .map(|e| Sample {
                    labeled: crate::corpus::LabeledInvoice {
                        labels: vec![crate::corpus::FieldLabel::None; e.invoice.boxes.len()],
                        invoice: e.invoice,
                    },
                    gold: Default::default(),
                })
                .collect();
            let outputs = run_model(&model, &samples)?;
            echo_config(&out, &rc)?;
            write_file(
                &out.join("predictions.json"),
                &predictions_json(&outputs, &samples),
            )?;
            println!("tagged {} receipts into {}", outputs.len(), out.display());
            Ok(())
        }
        Command::Eval {
            corpus,
            out,
            model,
            method,
            format,
            split,
            cfg,
        } => {
            let mut rc = resolve(&cfg)?;
            let format: ReportFormat = format.parse()?;
            let loaded = match &model {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            match (&loaded, method) {
                (Some(m), None) => rc.method = method_of(&m.config),
                (Some(m), Some(name)) => {
                    let want = parse_method(&name)?;
                    if want != method_of(&m.config) {
                        return Err(Error::Config(format!(
                            "--method {name} does not match the checkpoint ({})",
                            method_of(&m.config)
                        )));
                    }
                    rc.method = want;
                }
                (None, Some(name)) => rc.method = parse_method(&name)?,
                (None, None) => rc.method = Method::Rule,
            }
            if rc.method != Method::Rule && loaded.is_none() {
                return Err(Error::Config(format!("method {} needs --model", rc.method)));
            }
            rc.validate()?;
            let (samples, _) = experiment::load_samples(&corpus)?;
            let samples = match split.as_str() {
                "all" => samples,
                "train" | "val" => {
                    let (tr, va) = split_samples(samples, rc.split_ratio, rc.seed)?;
                    if split == "train" {
                        tr
                    } else {
                        va
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown split {other:?} (all, train, val)"
                    )))
                }
            };
            let outputs = match &loaded {
                Some(m) => run_model(m, &samples)?,
                None => run_rules(&rc.rules(), &samples),
            };
            let rep = experiment::report(rc.method.name(), &outputs, &samples)?;
            echo_config(&out, &rc)?;
            let name = match format {
                ReportFormat::Json => "report.json",
                ReportFormat::Table => "report.txt",
            };
            write_file(
                &out.join(name),
                &emit_report(std::slice::from_ref(&rep), format),
            )?;
            let table = emit_report(std::slice::from_ref(&rep), ReportFormat::Table);
            std::io::stdout()
                .write_all(&table)
                .map_err(|e| Error::io("stdout", e))?;
            Ok(())
        }
        Command::Gradcheck { seeds, cfg } => {
            let rc = resolve(&cfg)?;
            grad_suite(rc.seed, seeds)
        }
        Command::OracleTest {
            instances,
            grad_seeds,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            let rep = run_crf_oracle(instances, rc.seed)?;
            println!("crf oracle over {} instances", rep.instances);
            println!("  max logZ error      {:.3e}", rep.max_log_z_error);
            println!("  max marginal error  {:.3e}", rep.max_marginal_error);
            println!("  max marginal sum    {:.3e}", rep.max_marginal_sum_error);
            println!("  viterbi mismatches  {}", rep.viterbi_mismatches);
            if !rep.passed() {
                return Err(Error::Oracle("CRF disagrees with enumeration".into()));
            }
            grad_suite(rc.seed, grad_seeds)
        }
        Command::Features {
            corpus,
            out,
            model,
            cfg,
        } => {
            let rc = resolve(&cfg)?;
            rc.validate()?;
            let model = match model {
                Some(p) => load_checkpoint(&p)?,
                None => {
                    let tagger = rc.tagger().unwrap_or_else(|| rc.tagger_base());
                    TaggerModel::new(tagger, FrequencyTable::default())?
                }
            };
            let entries = crate::corpus::load_corpus_dir(&corpus)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["invoice_id".to_string(), "box_index".to_string()];
            header.extend((0..model.fused_dim()).map(|i| format!("f{i}")));
            w.write_record(&header)
                .map_err(|e| Error::data(out.display().to_string(), e.to_string()))?;
            for e in &entries {
                let enc = model.encode(&e.invoice, None)?;
                let rows = model.fused_features(&enc)?;
                let mut by_box: Vec<(usize, &Vec<f64>)> = enc
                    .units
                    .iter()
                    .zip(&rows)
                    .map(|(u, r)| (enc.order[u.box_pos], r))
                    .collect();
                by_box.sort_by_key(|(i, _)| *i);
                for (i, r) in by_box {
                    let mut rec = vec![e.invoice.id.clone(), i.to_string()];
                    rec.extend(r.iter().map(|v| format!("{v}")));
                    w.write_record(&rec)
                        .map_err(|e| Error::data(out.display().to_string(), e.to_string()))?;
                }
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::data(out.display().to_string(), e.to_string()))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                echo_config(parent, &rc)?;
            }
            write_file(&out, &bytes)?;
            println!(
                "wrote features for {} receipts to {}",
                entries.len(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Toy model on every coordinate, default sizes on a sample.
fn grad_suite(seed: u64, seeds: u64) -> Result<()> {
    let mut worst: f64 = 0.0;
    for s in seed..seed + seeds {
        for (kind, rep) in [
            ("toy", model_grad_check(s)?),
            ("default", desk_grad_check(s, 24)?),
        ] {
            println!(
                "gradcheck seed {s} ({kind} sizes): max rel error {:.3e} over {} coordinates",
                rep.max_rel_error, rep.coordinates
            );
            worst = worst.max(rep.max_rel_error);
            if !(rep.max_rel_error < 1e-4) {
                let (name, idx) = rep.worst.unwrap_or_default();
                return Err(Error::Oracle(format!(
                    "gradient check failed for seed {s} at {name}[{idx}]: {:.3e}",
                    rep.max_rel_error
                )));
            }
        }
    }
    println!("gradcheck max rel error {worst:.3e}");
    Ok(())
}

#[derive(Serialize)]
struct BoxOut<'a> {
    index: usize,
    text: &'a str,
    label: &'static str,
    confidence: f64,
}

#[derive(Serialize)]
struct InvoiceOut<'a> {
    id: &'a str,
    fields: &'a crate::posteval::FieldPrediction,
    boxes: Vec<BoxOut<'a>>,
}

fn predictions_json(outputs: &[InvoiceOutput], samples: &[Sample]) -> Vec<u8> {
    let docs: Vec<InvoiceOut> = outputs
        .iter()
        .zip(samples)
        .map(|(o, s)| InvoiceOut {
            id: &o.id,
            fields: &o.fields,
            boxes: o
                .labels
                .iter()
                .zip(&o.confidences)
                .zip(&s.labeled.invoice.boxes)
                .enumerate()
                .map(|(index, ((l, c), b))| BoxOut {
                    index,
                    text: &b.text,
                    label: l.name(),
                    confidence: *c,
                })
                .collect(),
        })
        .collect();
    let mut v = serde_json::to_vec_pretty(&docs).expect("predictions serialize");
    v.push(b'\n');
    v
}

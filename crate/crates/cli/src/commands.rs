use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use sentinel_core::decision::{aggregate, DecisionPolicy, StackerModel};
use sentinel_core::ingest::{load_dataset, load_trace_file_with, LoadOptions, Strictness};
use sentinel_core::metrics::render_tpr_table;
use sentinel_core::model::{load_checkpoint, write_checkpoint, ClassifierModel, ModelConfig};
use sentinel_core::synthgen::{generate_dataset, GeneratorSpec, SpecTemplate};
use sentinel_core::tokenizer::{window_sequences, Vocabulary};
use sentinel_core::trainer::{evaluate, train_with_clock, AdamWConfig, TrainConfig};
use sentinel_core::NUM_CLASSES;

use crate::error::{CliError, CliResult, Kind};
use crate::outputs::{io_error, Outputs, RunManifest, RUN_MANIFEST};
use crate::{parse_args, run, DataArgs, EvalArgs, GenArgs, InferArgs, InitConfigArgs, ModelArgs, ReplayArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.txt";
pub const SPEC_FILE: &str = "spec.json";

fn read_text(path: &Path, kind: Kind) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::new(kind, e).context(path.display().to_string()))
}

fn load_options(filter: &[String], strict: bool) -> LoadOptions {
    LoadOptions {
        filter_set: filter.iter().filter(|s| !s.is_empty()).cloned().collect::<BTreeSet<_>>(),
        strictness: if strict { Strictness::Abort } else { Strictness::Skip },
    }
}

pub fn init_config(a: InitConfigArgs, _args: &[String]) -> CliResult<()> {
    let spec = GeneratorSpec::from_template(&SpecTemplate {
        local_signal: a.local_signal,
        mean_gap: a.mean_gap,
        gap_jitter: a.gap_jitter,
        nanosleep_rate: a.nanosleep_rate,
        rate: a.rate,
        seed: a.seed,
    });
    spec.validate()?;
    let mut out = Outputs::default();
    out.write_json(&a.out, &spec)?;
    out.commit();
    Ok(())
}

pub fn gen(a: GenArgs, args: &[String]) -> CliResult<()> {
    let text = read_text(&a.config, Kind::Usage)?;
    let mut spec: GeneratorSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::new(Kind::Usage, e).context(a.config.display().to_string()))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(CliError::usage(format!("duration {} must be positive", a.duration)));
    }
    spec.validate()?;

    let mut out = Outputs::default();
    out.claim_dir(&a.out)?;
    let manifest = generate_dataset(&spec, &a.out, a.files_per_class, a.duration)?;
    out.write_json(&a.out.join(SPEC_FILE), &spec)?;

    let mut run = RunManifest::new(
        "gen",
        args,
        json!({ "files_per_class": a.files_per_class, "duration": a.duration, "spec": spec }),
    );
    run.seeds.insert("spec".into(), spec.seed);
    run.inputs.push(a.config.clone());
    run.outputs = manifest.iter().map(|e| e.path.clone()).collect();
    run.outputs.push(a.out.join("manifest.tsv"));
    run.outputs.push(a.out.join(SPEC_FILE));
    out.write_json(&a.out.join(RUN_MANIFEST), &run)?;
    out.commit();
    log::info!("wrote {} files to {}", manifest.len(), a.out.display());
    Ok(())
}

fn load_windows(
    data: &DataArgs,
    vocab: Option<&Vocabulary>,
    context: usize,
) -> CliResult<(Vec<sentinel_core::tokenizer::TokenWindow>, Vocabulary)> {
    let (sequences, stats) = load_dataset(&data.data, &load_options(&data.filter, data.strict))?;
    if sequences.is_empty() {
        return Err(CliError::data(format!("no trace files under {}", data.data.display())));
    }
    log::info!(
        "loaded {} files: {} records, {} filtered, {} malformed skipped",
        sequences.len(),
        stats.parsed,
        stats.filtered,
        stats.skipped_malformed
    );
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(&sequences)?,
    };
    let windows = window_sequences(&sequences, &vocab, context, data.full_windows);
    if windows.is_empty() {
        return Err(CliError::data("no windows left after tokenization"));
    }
    Ok((windows, vocab))
}

pub fn train(a: TrainArgs, args: &[String]) -> CliResult<()> {
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: AdamWConfig { lr: a.lr, weight_decay: a.weight_decay, ..Default::default() },
        seed: a.seed,
        val_fraction: a.val_fraction,
    };
    config.validate()?;
    let probe = ModelConfig {
        context: a.context,
        vocab_size: 3,
        d_model: a.d_model,
        layers: a.layers,
        heads: a.heads,
        ffn_mult: a.ffn_mult,
        classes: NUM_CLASSES,
        pattern: a.pattern.clone(),
        dropout: a.dropout,
        seed: a.seed,
    };
    probe.validate()?;

    let (windows, vocab) = load_windows(&a.data, None, a.context)?;
    let model_config = ModelConfig { vocab_size: vocab.len(), ..probe };
    let mut model = ClassifierModel::<f32>::new(model_config.clone())?;
    log::info!("{} windows, vocabulary {}, {} parameters", windows.len(), vocab.len(), model.num_params());

    let clock: Option<fn() -> Instant> = if a.no_timing { None } else { Some(Instant::now) };
    let report = train_with_clock(&mut model, &windows, &config, clock, |_| {})?;

    let mut out = Outputs::default();
    out.ensure_dir(&a.out)?;
    let vocab_path = a.out.join(VOCAB_FILE);
    out.write(&vocab_path, vocab.to_tsv())?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    out.write(&ckpt, write_checkpoint(&model, &vocab.hash()))?;
    out.write_json(&a.out.join(TRAIN_REPORT), &report)?;

    let mut run = RunManifest::new(
        "train",
        args,
        json!({
            "model": model_config,
            "train": config,
            "filter": a.data.filter,
            "strict": a.data.strict,
            "full_windows": a.data.full_windows,
            "timing": !a.no_timing,
        }),
    );
    run.seeds.insert("train".into(), a.seed);
    run.seeds.insert("model_init".into(), model_config.seed);
    run.inputs.push(a.data.data.clone());
    run.outputs = out.written().to_vec();
    out.write_json(&a.out.join(RUN_MANIFEST), &run)?;
    out.commit();
    if let Some(last) = report.epochs.last() {
        let acc = last.val_metrics.as_ref().map_or(f64::NAN, |m| m.accuracy);
        println!("trained {} epochs: final loss {:.4}, validation accuracy {:.4}", last.epoch, last.train_loss, acc);
    }
    Ok(())
}

fn load_model(m: &ModelArgs) -> CliResult<(ClassifierModel<f32>, Vocabulary, PathBuf, PathBuf)> {
    let vocab_path = m.vocab.clone().unwrap_or_else(|| m.model.join(VOCAB_FILE));
    let vocab = Vocabulary::from_tsv(&read_text(&vocab_path, Kind::Data)?)?;
    let ckpt = m.model.join(CHECKPOINT_FILE);
    let model = load_checkpoint::<f32>(&ckpt, &vocab.hash(), None)
        .map_err(|e| CliError::from(e).context(ckpt.display().to_string()))?;
    Ok((model, vocab, ckpt, vocab_path))
}

pub fn eval(a: EvalArgs, args: &[String]) -> CliResult<()> {
    let (model, vocab, ckpt, vocab_path) = load_model(&a.model)?;
    let (windows, _) = load_windows(&a.data, Some(&vocab), model.config().context)?;
    let report = evaluate(&model, &windows)?;
    let table = render_tpr_table(&report);

    let mut out = Outputs::default();
    out.ensure_dir(&a.out)?;
    out.write_json(&a.out.join(EVAL_REPORT), &report)?;
    out.write(&a.out.join(CONFUSION_FILE), &table)?;
    let mut run = RunManifest::new(
        "eval",
        args,
        json!({ "filter": a.data.filter, "strict": a.data.strict, "full_windows": a.data.full_windows }),
    );
    run.inputs = vec![ckpt, vocab_path, a.data.data.clone()];
    run.outputs = out.written().to_vec();
    out.write_json(&a.out.join(RUN_MANIFEST), &run)?;
    out.commit();

    println!(
        "windows {}  accuracy {:.4}  precision {:.4}  recall {:.4}  f1_score {:.4}  kappa {:.4}  mcc {:.4}",
        windows.len(),
        report.accuracy,
        report.precision,
        report.recall,
        report.f1_score,
        report.kappa,
        report.mcc
    );
    print!("{table}");
    Ok(())
}

pub fn infer(a: InferArgs, args: &[String]) -> CliResult<()> {
    let policy = DecisionPolicy { threshold: a.threshold, aggregation: a.agg.clone(), window_span: a.span };
    policy.validate()?;
    let stacker: Option<StackerModel> = match &a.stacker {
        Some(p) => Some(
            serde_json::from_str(&read_text(p, Kind::Usage)?)
                .map_err(|e| CliError::new(Kind::Usage, e).context(p.display().to_string()))?,
        ),
        None => None,
    };
    let (model, vocab, ckpt, vocab_path) = load_model(&a.model)?;
    let (seq, _) = load_trace_file_with(&a.trace, None, &load_options(&a.filter, false))?;
    let windows = window_sequences(std::slice::from_ref(&seq), &vocab, model.config().context, false);

    let mut out = Outputs::default();
    let mut lines = String::new();
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    for (i, chunk) in windows.chunks(policy.window_span).enumerate() {
        let mut probs = model.forward_batch(chunk)?;
        if let Some(s) = &stacker {
            for p in &mut probs {
                *p = s.predict_proba(p);
            }
        }
        let start = i * policy.window_span;
        for mut v in aggregate(&probs, &policy)? {
            v.window_range = start + v.window_range.start..start + v.window_range.end;
            let line = serde_json::to_string(&json!({ "source": seq.source, "verdict": v })).expect("serializable");
            writeln!(stdout, "{line}").and_then(|_| stdout.flush()).map_err(|e| CliError::new(Kind::Data, e))?;
            lines.push_str(&line);
            lines.push('\n');
        }
    }

    if let Some(path) = &a.out {
        out.write(path, &lines)?;
        let mut run = RunManifest::new("infer", args, json!({ "policy": policy, "filter": a.filter }));
        run.inputs = vec![ckpt, vocab_path, a.trace.clone()];
        run.inputs.extend(a.stacker.clone());
        run.outputs = vec![path.clone()];
        let name = format!("{}.{RUN_MANIFEST}", path.file_name().map_or("verdicts".into(), |n| n.to_string_lossy()));
        out.write_json(&path.with_file_name(name), &run)?;
    }
    out.commit();
    Ok(())
}

pub fn replay(a: ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::read(&a.manifest)?;
    if manifest.subcommand == "replay" {
        return Err(CliError::usage("a replay manifest cannot be replayed"));
    }
    std::env::set_current_dir(&manifest.working_dir).map_err(|e| io_error(&manifest.working_dir, e))?;
    let cli = parse_args(&manifest.args).map_err(|e| CliError::usage(format!("recorded arguments: {e}")))?;
    run(cli, &manifest.args)
}

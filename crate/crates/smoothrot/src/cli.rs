//! Command-line front end. Exit codes: 0 success, 1 configuration error,
//! 2 runtime error, 3 failed self-check.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use smoothrot_core::experiment::{logit_metrics, quantize_weights, quantized_logits, Pipeline};
use smoothrot_core::model::{Mode, NoObserver, QuantConfig, TinyModel, TransformState};
use smoothrot_core::smoothing::collect_act_stats;

use crate::archive::Archive;
use crate::config::{CalibSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::harness::{self, apply_pipeline, rotate_options};
use crate::persist::{
    factors_to_archive, model_from_archive, model_to_archive, rotation_from_archive, stats_to_archive, ModelManifest,
};
use crate::report::RunReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "smoothrot", version, about = "Smoothing + rotation 4-bit quantization experiments on tiny synthetic transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, e.g. --set alpha=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend_from_slice(extra);
        ExperimentConfig::parse_with_overrides(&text, &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random model with its outlier circuit and save it as an archive.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect down-projection activation maxima into a statistics archive.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// synthetic or random-tokens; defaults to the config's calib_source.
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a pipeline's float-equivalent surgery to a saved model.
    Transform {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// baseline | smooth | rotate | smoothrot
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        alpha: Option<f32>,
        /// Statistics archive from `calibrate`, needed by smoothing pipelines.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Archive with an explicit orthogonal matrix in entry "Q".
        #[arg(long)]
        rotation: Option<PathBuf>,
        /// Also save the smoothing factors here.
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize the weights of a saved model.
    Quantize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// rtn | gptq
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        bits: Option<u8>,
        /// Per-layer weight error report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Logit error of a (quantized) model against a float reference.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// End-to-end experiment from a config file.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with code 3 when a self-check fails.
        #[arg(long)]
        check: bool,
    },
    /// Test-split metric across migration strengths with the rotate-only reference.
    SweepAlpha {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated alphas; defaults to the config's alpha_grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f32>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare calibration sources.
    AblateCalib {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated: synthetic, random-tokens, archive.
        #[arg(long, value_delimiter = ',', default_value = "synthetic,random-tokens")]
        sources: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with code 3 unless every source beats rotate-only.
        #[arg(long)]
        check: bool,
    },
    /// Merge run reports into a comparison table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_pipeline(s: &str) -> Result<Pipeline> {
    Pipeline::parse(s).ok_or_else(|| Error::config(format!("unknown pipeline '{s}'")))
}

fn parse_source(s: &str) -> Result<CalibSource> {
    match s {
        "synthetic" => Ok(CalibSource::Synthetic),
        "random-tokens" => Ok(CalibSource::RandomTokens),
        "archive" => Ok(CalibSource::Archive),
        _ => Err(Error::config(format!("unknown calibration source '{s}'"))),
    }
}

fn load_model(path: &Path) -> Result<(TinyModel, ModelManifest)> {
    model_from_archive(Archive::load(path)?)
}

fn write_json(path: Option<&Path>, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match path {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen { cfg, out } => {
            let cfg = cfg.load(&[])?;
            let (model, circuit) = harness::generate_model(&cfg)?;
            model_to_archive(&model, None, circuit.as_ref()).save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Calibrate { cfg, model, source, out } => {
            let cfg = cfg.load(&[])?;
            let source = match source {
                Some(s) => parse_source(&s)?,
                None => cfg.calib_source,
            };
            if source == CalibSource::Archive {
                return Err(Error::config("calibrate produces archives; pick synthetic or random-tokens"));
            }
            let (model, manifest) = load_model(&model)?;
            let corpus = harness::corpus_spec(&cfg, manifest.outliers.as_ref());
            let tokens = harness::calibration_tokens(&cfg, &corpus, source)?;
            let stats = collect_act_stats(&model, &tokens, source.as_str())?;
            stats_to_archive(&stats).save(&out)?;
            eprintln!("wrote {} ({} tokens)", out.display(), stats.first().map_or(0, |s| s.token_count));
        }
        Command::Transform {
            cfg,
            model,
            pipeline,
            alpha,
            stats,
            rotation,
            factors,
            out,
        } => {
            let cfg = cfg.load(&[])?;
            let pipeline = parse_pipeline(&pipeline)?;
            let (base, manifest) = load_model(&model)?;
            if base.state != TransformState::None {
                return Err(Error::config(format!(
                    "model is already transformed (state {})",
                    base.state.as_str()
                )));
            }
            let stats = match (&stats, pipeline.smooths()) {
                (Some(p), true) => Some(harness::load_stats(p, &base)?),
                (None, true) => return Err(Error::config("smoothing pipelines need --stats")),
                _ => None,
            };
            let alpha = match (alpha.or(cfg.alpha), pipeline.smooths()) {
                (Some(a), true) if (0.0..=1.0).contains(&a) => a,
                (Some(a), true) => return Err(Error::config(format!("alpha {a} outside [0, 1]"))),
                (None, true) => return Err(Error::config("smoothing pipelines need --alpha")),
                _ => 0.0,
            };
            let q = if !pipeline.rotates() {
                None
            } else if let Some(p) = &rotation {
                Some(rotation_from_archive(&Archive::load(p)?)?)
            } else {
                let mut c = cfg.clone();
                c.hidden = base.config.hidden;
                Some(harness::seeded_rotation(&c)?)
            };
            let v = apply_pipeline(&base, stats.as_deref(), pipeline, alpha, q.as_ref(), rotate_options(&cfg))?;
            model_to_archive(&v.model, None, manifest.outliers.as_ref()).save(&out)?;
            if let (Some(path), Some(f), Some(st)) = (&factors, &v.factors, &stats) {
                let first = st.first().expect("one entry per layer");
                factors_to_archive(f, &first.source, first.token_count)?.save(path)?;
            }
            eprintln!("wrote {} (state {})", out.display(), v.model.state.as_str());
        }
        Command::Quantize {
            cfg,
            model,
            weights,
            bits,
            report,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(w) = weights {
                extra.push(format!("weights=\"{w}\""));
            }
            if let Some(b) = bits {
                extra.push(format!("bits={b}"));
            }
            let cfg = cfg.load(&extra)?;
            let (m, manifest) = load_model(&model)?;
            let quant = cfg.quant_config()?;
            let corpus = harness::corpus_spec(&cfg, manifest.outliers.as_ref());
            let mut tokens = harness::calibration_tokens(&cfg, &corpus, CalibSource::Synthetic)?;
            tokens.truncate(cfg.gptq_seqs);
            let (q, reports) = quantize_weights(&m, &quant, &tokens)?;
            model_to_archive(&q, Some(&quant), manifest.outliers.as_ref()).save(&out)?;
            if let Some(p) = report {
                write_json(Some(&p), &serde_json::to_value(&reports)?)?;
            }
            eprintln!("wrote {} ({} weight matrices quantized)", out.display(), reports.len());
        }
        Command::Eval {
            cfg,
            model,
            reference,
            out,
        } => {
            let cfg = cfg.load(&[])?;
            let (m, manifest) = load_model(&model)?;
            let (r, rmanifest) = load_model(&reference)?;
            if m.config != r.config {
                return Err(Error::config("model and reference have different dimensions"));
            }
            let quant = manifest.quant.clone().unwrap_or_else(QuantConfig::disabled);
            let corpus = harness::corpus_spec(&cfg, rmanifest.outliers.as_ref());
            let mut c = cfg.clone();
            c.vocab = r.config.vocab;
            let tokens = harness::eval_tokens(&c, &corpus)?;
            let reference = r.forward_batch(&tokens, Mode::Float, &mut NoObserver)?;
            let (logits, act) = quantized_logits(&m, &quant, &tokens)?;
            let metrics = logit_metrics(&reference, &logits)?;
            let act: std::collections::BTreeMap<String, f64> = act
                .into_iter()
                .map(|(s, v)| (format!("layers.{}.{}", s.layer, s.proj.name()), v))
                .collect();
            write_json(
                out.as_deref(),
                &json!({
                    "tokens": tokens.iter().map(Vec::len).sum::<usize>(),
                    "transform_state": m.state,
                    "quant": quant,
                    "logit_mse": metrics.mse,
                    "logit_rel_error": metrics.rel_error,
                    "logit_kl": metrics.kl,
                    "act_quant_mse": act,
                }),
            )?;
        }
        Command::Run { cfg, out, check } => {
            let cfg = cfg.load(&[])?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (report, surfaces) = harness::run_experiment_with_surfaces(&cfg);
            harness::write_run_outputs(&dir, &report, &surfaces)?;
            print_run_summary(&report);
            eprintln!("wrote {}", dir.join("report.json").display());
            if let Some(e) = &report.error {
                eprintln!("error: {}: {}", e.stage, e.message);
                return Ok(EXIT_RUNTIME);
            }
            if check && !report.checks_passed() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::SweepAlpha { cfg, grid, out } => {
            let cfg = cfg.load(&[])?;
            let grid = grid.unwrap_or_else(|| cfg.grid());
            if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::config(format!("alpha {a} outside [0, 1]")));
            }
            let table = harness::sweep_alpha(&cfg, &grid)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            fs::create_dir_all(&dir)?;
            table.write_csv(dir.join("alpha_sweep.csv"))?;
            fs::write(dir.join("alpha_sweep.json"), serde_json::to_string_pretty(&table)?)?;
            println!("{:>6} {:>12} {:>12}", "alpha", &table.metric, "rotate_only");
            for r in &table.rows {
                println!("{:>6.2} {:>12.6} {:>12.6}", r.alpha, r.metric, r.rotate_reference);
            }
        }
        Command::AblateCalib {
            cfg,
            sources,
            out,
            check,
        } => {
            let cfg = cfg.load(&[])?;
            let sources = sources.iter().map(|s| parse_source(s)).collect::<Result<Vec<_>>>()?;
            let table = harness::calib_source_ablation(&cfg, &sources)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            fs::create_dir_all(&dir)?;
            table.write_csv(dir.join("calib_ablation.csv"))?;
            fs::write(dir.join("calib_ablation.json"), serde_json::to_string_pretty(&table)?)?;
            for r in &table.rows {
                println!(
                    "{:<14} alpha {:.2} {} {:.6} rotate-only {:.6}{}",
                    r.source,
                    r.alpha,
                    table.metric,
                    r.metric,
                    r.rotate_reference,
                    if r.beats_rotate { "" } else { "  (does not beat rotate-only)" }
                );
            }
            if check && !table.all_beat_rotate() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Report { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| RunReport::load(p).map_err(|e| Error::config(format!("{}: {e}", p.display()))))
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare_variants(&loaded).map_err(|e| match e {
                Error::Mismatch(_) => Error::config(e.to_string()),
                other => other,
            })?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                table.write_csv(dir.join("comparison.csv"))?;
                fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table)?)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn print_run_summary(report: &RunReport) {
    println!(
        "{:<10} {:>6} {:>8} {:>12} {:>10} {:>12}",
        "variant", "alpha", "status", "logit_mse", "rel_err", "down_max"
    );
    for v in &report.variants {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.6}"));
        println!(
            "{:<10} {:>6} {:>8} {:>12} {:>10} {:>12}",
            v.pipeline.as_str(),
            v.alpha.map_or("-".to_string(), |a| format!("{a:.2}")),
            format!("{:?}", v.status).to_lowercase(),
            f(v.logit_mse),
            f(v.logit_rel_error),
            v.down_proj_max().map_or("-".to_string(), |x| format!("{x:.3}")),
        );
    }
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
}

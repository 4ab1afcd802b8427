//! `arpa-lab`: dataset generation, training, evaluation, ablation,
//! augmentation preview, gradient self-check and SVG charts.

pub mod chart;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use arpa_core::augment::{self, AugmentConfig};
use arpa_core::autodiff::{primitive_suite, CheckReport};
use arpa_core::data::{
    generate_dataset, load_dataset, perturb_split, write_dataset, Dataset, DatasetManifest, Sample,
};
use arpa_core::fusion::FusionStrategy;
use arpa_core::head::MetricsReport;
use arpa_core::model::{end_to_end_grad_check, Model};
use arpa_core::rng::{derive, StreamKind};
use arpa_core::train::{
    self, config_hash, dataset_vocabulary, run_ablation, write_ablation_csv, Checkpoint, RunHistory,
};
use arpa_core::vision::Image;
use arpa_core::{Error, Result};
use clap::{Parser, Subcommand};
use rand::Rng as _;

use chart::ChartMetric;
use config::{EvalSplit, RunConfigFile};

#[derive(Debug, Parser)]
#[command(
    name = "arpa-lab",
    version,
    about = "Visual word sense disambiguation lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Master seed for every random stream.
    #[arg(long, global = true, env = "ARPA_LAB_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Worker threads for evaluation and ablation runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin, metrics.csv, history.csv and config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for metrics.csv; the report is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score the noise-perturbed variant of the split.
        #[arg(long)]
        perturbed: bool,
    },
    /// Train every configured arm for every seed and tabulate the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show each augmentation technique applied to one sample.
    AugmentPreview {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and of the full loss.
    GradCheck {
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Number of input seeds, starting at the master seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Bar chart of metrics, ablation or history CSVs.
    Chart {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ChartMetric::Accuracy)]
        metric: ChartMetric,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Exit status for a failed command: 1 for bad input or configuration,
/// 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Input(_)
        | Error::Line { .. }
        | Error::Sample { .. }
        | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Parses `args` and runs the command, writing its report to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let seed = cli.seed;
    match &cli.command {
        Command::GenerateData { config, out: dir } => {
            let cfg = RunConfigFile::load(config.as_deref(), seed)?;
            let ds = generate_dataset(&cfg.generator, seed)?;
            write_dataset(&ds, dir)?;
            say(
                out,
                format!(
                    "wrote {} train and {} test samples to {}",
                    ds.train.samples.len(),
                    ds.test.samples.len(),
                    dir.display()
                ),
            )
        }
        Command::Train {
            config,
            data,
            out: dir,
        } => {
            let cfg = RunConfigFile::load(config.as_deref(), seed)?;
            let ds = load_dataset(data)?;
            let summary = in_pool(cli.jobs, || train_command(&cfg, &ds, dir))?;
            say(out, summary)
        }
        Command::Evaluate {
            config,
            data,
            checkpoint,
            out: dir,
            split,
            perturbed,
        } => {
            let cfg = RunConfigFile::load(config.as_deref(), seed)?;
            let ds = load_dataset(data)?;
            let ck = Checkpoint::load(checkpoint)?;
            let base = match split.as_str() {
                "test" => &ds.test,
                "train" => &ds.train,
                other => {
                    return Err(Error::Input(format!(
                        "unknown split {other:?}; expected test or train"
                    )))
                }
            };
            let manifest = if *perturbed {
                perturb_split(base, &ds.synsets, &cfg.perturb, seed)?
            } else {
                base.clone()
            };
            let report = in_pool(cli.jobs, || {
                train::evaluate(
                    &ck.model,
                    &manifest,
                    &run_id(&ck.config_hash),
                    seed,
                    &ck.config_hash,
                )
            })?;
            if let Some(dir) = dir {
                create_dir(dir)?;
                write_metrics(&dir.join("metrics.csv"), &[report.clone()])?;
            }
            say(
                out,
                format!(
                    "{} ({} samples): accuracy {:.4}, mrr {:.4}",
                    report.split, report.n_samples, report.accuracy, report.mrr
                ),
            )
        }
        Command::Ablate {
            config,
            data,
            out: dir,
        } => {
            let cfg = RunConfigFile::load(config.as_deref(), seed)?;
            let ds = load_dataset(data)?;
            ablate_command(&cfg, &ds, seed, cli.jobs, dir, out)
        }
        Command::AugmentPreview {
            config,
            data,
            sample,
            out: dir,
        } => {
            let cfg = RunConfigFile::load(config.as_deref(), seed)?;
            let ds = load_dataset(data)?;
            let s = ds
                .train
                .samples
                .iter()
                .chain(&ds.test.samples)
                .find(|s| &s.id == sample)
                .ok_or_else(|| Error::Input(format!("no sample with id {sample:?}")))?;
            augment_preview(
                s,
                &ds,
                &cfg.train.augment,
                cfg.train.model.text.max_len,
                seed,
                dir,
                out,
            )
        }
        Command::GradCheck { h, tol, seeds } => grad_check_command(seed, *seeds, *h, *tol, out),
        Command::Chart {
            out: path,
            metric,
            inputs,
        } => {
            let mut bars = Vec::new();
            for input in inputs {
                bars.extend(chart::load_bars(input, *metric)?);
            }
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_file(path, chart::render_svg(&bars, *metric).as_bytes())?;
            say(
                out,
                format!("wrote {} bars to {}", bars.len(), path.display()),
            )
        }
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(f)
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut buf = Vec::new();
    MetricsReport::write_csv(reports, &mut buf)?;
    write_file(path, &buf)
}

fn write_history(dir: &Path, history: &RunHistory) -> Result<()> {
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    write_file(&dir.join("history.csv"), &buf)?;
    let last = &history.epochs.last().expect("at least one epoch").test;
    write_metrics(&dir.join("metrics.csv"), &[last.clone()])
}

fn run_id(hash: &str) -> String {
    format!("run-{}", &hash[..hash.len().min(12)])
}

fn train_command(cfg: &RunConfigFile, ds: &Dataset, dir: &Path) -> Result<String> {
    let tc = &cfg.train;
    let hash = config_hash(tc)?;
    let mut model = Model::init(tc.model.clone(), dataset_vocabulary(&ds.synsets), tc.seed)?;
    let history = train::train(&mut model, ds, &ds.test, tc, &run_id(&hash))?;
    create_dir(dir)?;
    write_history(dir, &history)?;
    Checkpoint {
        config_hash: hash,
        model,
    }
    .save(&dir.join("checkpoint.bin"))?;
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;
    let last = &history.epochs.last().expect("at least one epoch").test;
    Ok(format!(
        "trained {} epochs: test accuracy {:.4}, mrr {:.4}; outputs in {}",
        history.epochs.len(),
        last.accuracy,
        last.mrr,
        dir.display()
    ))
}

fn eval_manifest(cfg: &RunConfigFile, ds: &Dataset, seed: u64) -> Result<DatasetManifest> {
    match cfg.ablation.eval {
        EvalSplit::Test => Ok(ds.test.clone()),
        EvalSplit::Perturbed => perturb_split(&ds.test, &ds.synsets, &cfg.perturb, seed),
    }
}

/// Directory name for an arm: its deltas with separators replaced.
pub fn arm_dir(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn ablate_command(
    cfg: &RunConfigFile,
    ds: &Dataset,
    seed: u64,
    jobs: usize,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let eval = eval_manifest(cfg, ds, seed)?;
    let seeds = cfg.ablation.seeds_for(seed);
    let rows = run_ablation(&cfg.train, &cfg.ablation.arms, &seeds, ds, &eval, jobs)?;
    create_dir(dir)?;
    for row in &rows {
        let run_dir = dir
            .join(arm_dir(&row.arm))
            .join(format!("seed-{}", row.seed));
        create_dir(&run_dir)?;
        write_history(&run_dir, &row.history)?;
    }
    let mut buf = Vec::new();
    write_ablation_csv(&rows, &mut buf)?;
    write_file(&dir.join("ablation.csv"), &buf)?;
    out.write_all(&buf).map_err(|e| Error::io("<stdout>", e))
}

fn tokens_line(name: &str, before: &[String], after: &[String]) -> String {
    if before == after {
        format!("{name}: identical")
    } else {
        format!("{name}: {} -> {}", before.join(" "), after.join(" "))
    }
}

fn augment_preview(
    s: &Sample,
    ds: &Dataset,
    cfg: &AugmentConfig,
    max_len: usize,
    seed: u64,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    cfg.validate()?;
    let table = &ds.synsets;
    let pivots = augment::default_pivots(table, &cfg.pivots);
    let stream = |kind, technique: &str| derive(seed, kind, &format!("{}/{technique}", s.id));
    let tokens = &s.tokens;
    let target = s.target_index;
    say(out, format!("sample {}: {}", s.id, tokens.join(" ")))?;

    let mut rng = stream(StreamKind::TextAugment, "substitution");
    let substituted = if rng.random_bool(cfg.p_substitute) && table.contains(&tokens[target]) {
        augment::lexical_substitute(tokens, target, table, Some(&s.sense_id), &mut rng)?
    } else {
        tokens.clone()
    };
    say(out, tokens_line("substitution", tokens, &substituted))?;

    let mut rng = stream(StreamKind::TextAugment, "insertion");
    let inserted = if rng.random_bool(cfg.p_insert) {
        augment::random_insertion(tokens, target, cfg.n_insert, table, max_len, &mut rng).0
    } else {
        tokens.clone()
    };
    say(out, tokens_line("insertion", tokens, &inserted))?;

    let mut rng = stream(StreamKind::TextAugment, "deletion");
    let (deleted, _) = augment::random_deletion(tokens, cfg.p_delete, target, &mut rng);
    say(out, tokens_line("deletion", tokens, &deleted))?;

    for pivot in &cfg.pivots {
        let mut rng = stream(
            StreamKind::TextAugment,
            &format!("back-translation-{pivot}"),
        );
        let translated = if rng.random_bool(cfg.p_back_translate) {
            augment::back_translate(tokens, pivot, &pivots)?
        } else {
            tokens.clone()
        };
        say(
            out,
            tokens_line(&format!("back-translation ({pivot})"), tokens, &translated),
        )?;
    }

    let image = s.images[s.gold].to_image();
    let mut rng = stream(StreamKind::ImageAugment, "rotation");
    let degrees = cfg
        .rotations
        .get(rng.random_range(0..cfg.rotations.len().max(1)))
        .copied()
        .unwrap_or(0);
    let rotated = augment::rotate(&image, degrees);
    let mut rng = stream(StreamKind::ImageAugment, "flip");
    let flipped = if rng.random_bool(cfg.flip_prob) {
        augment::flip_horizontal(&image)
    } else {
        image.clone()
    };
    let mut rng = stream(StreamKind::ImageAugment, "noise");
    let noisy = augment::add_noise(&image, cfg.noise_sigma, &mut rng);

    create_dir(dir)?;
    for (name, after) in [("rotation", rotated), ("flip", flipped), ("noise", noisy)] {
        image.save_pgm(&dir.join(format!("{name}_before.pgm")))?;
        after.save_pgm(&dir.join(format!("{name}_after.pgm")))?;
        say(out, image_line(name, &image, &after))?;
    }
    Ok(())
}

fn image_line(name: &str, before: &Image, after: &Image) -> String {
    if before == after {
        format!("{name}: identical")
    } else {
        let changed = if before.height() == after.height() {
            before
                .pixels()
                .iter()
                .zip(after.pixels())
                .filter(|(a, b)| a != b)
                .count()
        } else {
            before.pixels().len()
        };
        format!(
            "{name}: {changed} of {} pixels changed",
            before.pixels().len()
        )
    }
}

/// Worst-case result of one check over several seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub max_raw_rel_error: f64,
    pub unresolved: usize,
    pub passed: bool,
}

impl CheckSummary {
    fn absorb(&mut self, r: &CheckReport) {
        self.max_rel_error = self.max_rel_error.max(r.max_rel_error());
        self.max_raw_rel_error = self.max_raw_rel_error.max(r.max_raw_rel_error());
        self.unresolved += r.unresolved();
        self.passed &= r.passed();
    }
}

/// Per-primitive and end-to-end gradient checks over `seeds` input seeds
/// starting at `seed`, in a fixed order.
pub fn gradient_summaries(seed: u64, seeds: u64, h: f64, tol: f64) -> Result<Vec<CheckSummary>> {
    let mut summaries: Vec<CheckSummary> = Vec::new();
    let mut absorb =
        |name: String, r: &CheckReport| match summaries.iter_mut().find(|s| s.name == name) {
            Some(s) => s.absorb(r),
            None => {
                let mut s = CheckSummary {
                    name,
                    passed: true,
                    ..CheckSummary::default()
                };
                s.absorb(r);
                summaries.push(s);
            }
        };
    for k in 0..seeds {
        let sd = seed.wrapping_add(k);
        for (name, report) in primitive_suite(sd, h, tol)? {
            absorb(name.to_string(), &report);
        }
        for fusion in [
            FusionStrategy::Late,
            FusionStrategy::Early,
            FusionStrategy::CrossAttention,
        ] {
            let report = end_to_end_grad_check(fusion, sd, h, tol)?;
            absorb(format!("end_to_end_{fusion}"), &report);
        }
    }
    Ok(summaries)
}

fn grad_check_command(seed: u64, seeds: u64, h: f64, tol: f64, out: &mut dyn Write) -> Result<()> {
    if seeds == 0 || !(h > 0.0) || !(tol > 0.0) {
        return Err(Error::Config(
            "grad-check needs seeds >= 1, h > 0 and tol > 0".into(),
        ));
    }
    let summaries = gradient_summaries(seed, seeds, h, tol)?;
    say(
        out,
        format!(
            "{:<28} {:>12} {:>12} {:>10}  status",
            "check", "max_rel", "max_raw_rel", "roundoff"
        ),
    )?;
    for s in &summaries {
        say(
            out,
            format!(
                "{:<28} {:>12.3e} {:>12.3e} {:>10}  {}",
                s.name,
                s.max_rel_error,
                s.max_raw_rel_error,
                s.unresolved,
                if s.passed { "ok" } else { "FAIL" }
            ),
        )?;
    }
    let failed: Vec<&str> = summaries
        .iter()
        .filter(|s| !s.passed)
        .map(|s| s.name.as_str())
        .collect();
    if failed.is_empty() {
        say(
            out,
            format!(
                "all {} checks within {tol:e} over {seeds} seeds",
                summaries.len()
            ),
        )
    } else {
        Err(Error::Contract(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run(
            std::iter::once("arpa-lab").chain(args.iter().copied()),
            &mut out,
        );
        (code, String::from_utf8(out).unwrap())
    }

    fn small_config(dir: &Path) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(
            &p,
            r#"{
  "generator": {"train_samples": 12, "test_samples": 6, "image_size": 8},
  "train": {"epochs": 1, "batch_size": 4, "model": {
    "text": {"embed_dim": 4, "num_layers": 1, "num_heads": 2, "mlp_hidden": 8, "max_len": 8},
    "vision": {"image_size": 8, "patch_size": 2, "embed_dim": 4, "num_stages": 1, "blocks_per_stage": 2, "window_size": 2, "num_heads": 2},
    "proj_dim": 4}}
}"#,
        )
        .unwrap();
        p
    }

    #[test]
    fn unknown_subcommand_and_flag_exit_one() {
        assert_eq!(run_capture(&["frobnicate"]).0, 1);
        assert_eq!(run_capture(&["grad-check", "--bogus"]).0, 1);
        assert_eq!(run_capture(&["train"]).0, 1);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Input("x".into())), 1);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 2);
    }

    #[test]
    fn generate_train_evaluate_preview_and_chart() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = small_config(d);
        let cfg = cfg.to_str().unwrap();
        let data = d.join("data");
        let (code, msg) = run_capture(&[
            "generate-data",
            "--config",
            cfg,
            "--out",
            data.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{msg}");
        for f in ["train.jsonl", "test.jsonl", "synsets.tsv", "images"] {
            assert!(data.join(f).exists(), "{f}");
        }
        let run1 = d.join("run1");
        let (code, _) = run_capture(&[
            "train",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--out",
            run1.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        for f in [
            "checkpoint.bin",
            "metrics.csv",
            "history.csv",
            "config.json",
        ] {
            assert!(run1.join(f).exists(), "{f}");
        }
        let ck = run1.join("checkpoint.bin");
        let (code, msg) = run_capture(&[
            "evaluate",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--perturbed",
        ]);
        assert_eq!(code, 0);
        assert!(msg.starts_with("test-perturbed (6 samples)"), "{msg}");

        let sample = "train-000003";
        let preview = d.join("preview");
        let args = [
            "augment-preview",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--sample",
            sample,
            "--out",
            preview.to_str().unwrap(),
        ];
        let (code, first) = run_capture(&args);
        assert_eq!(code, 0);
        assert_eq!(run_capture(&args).1, first);
        assert!(preview.join("noise_after.pgm").exists());
        let (code, _) = run_capture(&[
            "augment-preview",
            "--data",
            data.to_str().unwrap(),
            "--sample",
            "nope",
            "--out",
            preview.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);

        let noop = d.join("noop.json");
        std::fs::write(
            &noop,
            r#"{"train": {"augment": {"p_substitute": 0, "p_insert": 0, "p_delete": 0, "p_back_translate": 0,
                "rotations": [0], "flip_prob": 0, "noise_sigma": 0}}}"#,
        )
        .unwrap();
        let (code, text) = run_capture(&[
            "augment-preview",
            "--config",
            noop.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--sample",
            sample,
            "--out",
            preview.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines.len(), 8, "{text}");
        assert!(lines.iter().all(|l| l.ends_with(": identical")), "{text}");

        let svg = d.join("chart.svg");
        let metrics = run1.join("metrics.csv");
        let chart = [
            "chart",
            "--out",
            svg.to_str().unwrap(),
            metrics.to_str().unwrap(),
        ];
        assert_eq!(run_capture(&chart).0, 0);
        let first = std::fs::read(&svg).unwrap();
        assert_eq!(run_capture(&chart).0, 0);
        assert_eq!(std::fs::read(&svg).unwrap(), first);
        let empty = d.join("empty.csv");
        std::fs::write(
            &empty,
            "run_id,split,accuracy,mrr,n_samples,seed,config_hash\n",
        )
        .unwrap();
        assert_eq!(
            run_capture(&[
                "chart",
                "--out",
                svg.to_str().unwrap(),
                empty.to_str().unwrap()
            ])
            .0,
            1
        );
    }

    #[test]
    fn deletion_preview_keeps_the_target() {
        let gen = arpa_core::data::GenConfig {
            train_samples: 20,
            test_samples: 0,
            image_size: 8,
            ..Default::default()
        };
        let ds = generate_dataset(&gen, 3).unwrap();
        let cfg = AugmentConfig {
            p_delete: 1.0,
            ..AugmentConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        for s in &ds.train.samples {
            let mut out = Vec::new();
            augment_preview(s, &ds, &cfg, 16, 1, dir.path(), &mut out).unwrap();
            let text = String::from_utf8(out).unwrap();
            let line = text.lines().find(|l| l.starts_with("deletion: ")).unwrap();
            assert_eq!(
                line,
                format!(
                    "deletion: {} -> {}",
                    s.tokens.join(" "),
                    s.tokens[s.target_index]
                )
            );
        }
    }

    #[test]
    fn ablation_writes_table_and_per_arm_directories() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = small_config(d);
        let text = std::fs::read_to_string(&cfg).unwrap().replacen(
            "\"generator\"",
            "\"ablation\": {\"arms\": [{}, {\"gcn\": \"bypass\"}], \"seeds\": [1, 2]},\n  \"generator\"",
            1,
        );
        std::fs::write(&cfg, text).unwrap();
        let data = d.join("data");
        assert_eq!(
            run_capture(&[
                "generate-data",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                data.to_str().unwrap()
            ])
            .0,
            0
        );
        let out = d.join("ablation");
        let (code, table) = run_capture(&[
            "ablate",
            "--jobs",
            "2",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert_eq!(table.lines().count(), 1 + 4 + 4);
        assert!(out
            .join("gcn_bypass")
            .join("seed-2")
            .join("history.csv")
            .exists());
        assert!(out.join("base").join("seed-1").join("metrics.csv").exists());
        assert_eq!(
            std::fs::read_to_string(out.join("ablation.csv")).unwrap(),
            table
        );
    }

    #[test]
    fn grad_check_command_passes_on_one_seed() {
        let (code, text) = run_capture(&["grad-check", "--seeds", "1"]);
        assert_eq!(code, 0, "{text}");
        assert!(text.contains("end_to_end_cross_attention"));
        assert!(text.lines().last().unwrap().starts_with("all "));
    }
}

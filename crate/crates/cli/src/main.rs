//! `countloss` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Parser, Subcommand};
use countloss::countdp::{count_distribution, count_log_prob, interval_log_prob, InstanceScores};
use countloss::datasets::{
    load_csv, load_csv_with, make_gaussians_with_counts, make_llp_bags, make_mil_bags,
    make_pu_split, make_synthetic_gaussians, read_bags, write_bags, Dataset, PuDataset,
    Standardizer, TabularSchema, WeakLabel,
};
use countloss::model::Mlp;
use countloss::oracle::verify_count_distribution;
use countloss::trainer::{evaluate_instances, evaluate_mil_bags, train, LevelMetrics, TrainData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use config::{usage, DataSource, UsageError};

#[derive(Parser)]
#[command(
    name = "countloss",
    version,
    about = "Exact count probabilities and weakly supervised training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count probabilities for probabilities read from stdin.
    #[command(group(ArgGroup::new("query").args(["s", "all", "interval"])))]
    Count {
        /// Probability that exactly S instances are positive.
        #[arg(long)]
        s: Option<usize>,
        /// The whole distribution (default).
        #[arg(long)]
        all: bool,
        /// Probability that the count lies in [A, B].
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        interval: Option<Vec<usize>>,
    },
    /// Generate a dataset with LLP/MIL bags or a PU split.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled instance CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// MIL bag file for bag-level metrics.
        #[arg(long)]
        bags: Option<PathBuf>,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare the lattice with brute-force enumeration on random inputs.
    Verify {
        #[arg(default_value_t = 1000)]
        trials: usize,
        #[arg(default_value_t = 15)]
        k_max: usize,
        #[arg(default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Count {
            s,
            all: _,
            interval,
        } => cmd_count(s, interval),
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Train {
            config,
            epochs,
            seed,
            lr,
            out,
        } => cmd_train(&config, epochs, seed, lr, out),
        Command::Evaluate {
            checkpoint,
            data,
            bags,
            json,
        } => cmd_evaluate(&checkpoint, &data, bags.as_deref(), json.as_deref()),
        Command::Verify {
            trials,
            k_max,
            tolerance,
            seed,
        } => cmd_verify(trials, k_max, tolerance, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// `%.12g`-style formatting.
fn sig12(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, e) = sci.split_once('e').unwrap();
    let e: i32 = e.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..12).contains(&e) {
        let decimals = (11 - e).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim(mantissa),
            if e < 0 { '-' } else { '+' },
            e.abs()
        )
    }
}

fn read_probabilities() -> anyhow::Result<Vec<f64>> {
    let mut text = String::new();
    std::io::stdin().read_to_string(&mut text)?;
    let mut probs = Vec::new();
    for tok in text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
    {
        let p: f64 = tok
            .parse()
            .map_err(|_| usage(format!("{tok:?} is not a number")))?;
        if !(p > 0.0 && p < 1.0) {
            bail!(usage(format!("probability {tok} is outside (0, 1)")));
        }
        probs.push(p);
    }
    if probs.is_empty() {
        bail!(usage("no probabilities on stdin"));
    }
    Ok(probs)
}

fn cmd_count(s: Option<usize>, interval: Option<Vec<usize>>) -> anyhow::Result<ExitCode> {
    let probs = read_probabilities()?;
    let k = probs.len();
    let scores = InstanceScores::from_probs(&probs)?;
    let mut out = std::io::stdout().lock();
    if let Some(s) = s {
        if s > k {
            bail!(usage(format!("--s {s} exceeds the {k} inputs")));
        }
        let lp = count_log_prob(&scores, s)?;
        writeln!(out, "{s}\t{}\t{}", sig12(lp), sig12(lp.exp()))?;
    } else if let Some(iv) = interval {
        let (a, b) = (iv[0], iv[1]);
        if a > b || b > k {
            bail!(usage(format!("--interval {a} {b} is not inside [0, {k}]")));
        }
        let lp = interval_log_prob(&scores, a, b)?;
        writeln!(out, "{a}..{b}\t{}\t{}", sig12(lp), sig12(lp.exp()))?;
    } else {
        for (s, lp) in count_distribution(&scores).log_probs().iter().enumerate() {
            writeln!(out, "{s}\t{}\t{}", sig12(*lp), sig12(lp.exp()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a C,
    /// sha256 of every input file.
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
    created_unix_seconds: u64,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &C,
    inputs: &[&Path],
    artifacts: &[&str],
) -> anyhow::Result<()> {
    let mut fingerprints = BTreeMap::new();
    for p in inputs {
        fingerprints.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        tool: "countloss",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        inputs: fingerprints,
        artifacts: artifacts
            .iter()
            .map(|a| dir.join(a).display().to_string())
            .collect(),
        created_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut cfg = config::load_simulate(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out)?;
    let mut inputs: Vec<&Path> = vec![config_path];
    let mut artifacts = vec!["instances.csv"];
    let (data, test) = match &cfg.data {
        DataSource::Gaussian {
            n,
            dim,
            separation,
            test_n,
        } => {
            let data = make_synthetic_gaussians(*n, *dim, *separation, cfg.seed)
                .map_err(|e| usage(e.to_string()))?;
            let test = test_n
                .map(|m| {
                    make_gaussians_with_counts(
                        m - m / 2,
                        m / 2,
                        *dim,
                        *separation,
                        cfg.seed.wrapping_add(1),
                    )
                })
                .transpose()?;
            (data, test)
        }
        DataSource::Adult { path, test_path } => {
            inputs.push(path);
            let (data, enc) = load_csv(path, &TabularSchema::adult())?;
            let test = match test_path {
                Some(t) => {
                    inputs.push(t);
                    Some(load_csv_with(t, &enc)?)
                }
                None => None,
            };
            (data, test)
        }
        DataSource::Csv { path, test_path } => {
            inputs.push(path);
            let (data, enc) = load_csv(path, &TabularSchema::instance_csv())?;
            let test = match test_path {
                Some(t) => {
                    inputs.push(t);
                    Some(load_csv_with(t, &enc)?)
                }
                None => None,
            };
            (data, test)
        }
    };
    let labels = data
        .labels()
        .ok_or_else(|| anyhow!("simulation needs labeled instances"))?
        .to_vec();
    data.write_csv(out.join("instances.csv"))?;
    if let Some(t) = &test {
        t.write_csv(out.join("test_instances.csv"))?;
        artifacts.push("test_instances.csv");
    }
    println!("instances: {} rows x {} features", data.len(), data.dim());

    if let Some(llp) = &cfg.llp {
        let range = (llp.proportion_range[0], llp.proportion_range[1]);
        let made = make_llp_bags(&data, llp.bag_size, range, llp.count, cfg.seed)?;
        write_bags(out.join("bags.jsonl"), &made.bags)?;
        artifacts.push("bags.jsonl");
        println!("llp bags: {}", made.bags.len());
        if made.clamped > 0 {
            eprintln!(
                "warning: {} bags had their proportion clamped to the available class counts",
                made.clamped
            );
        }
    } else if let Some(mil) = &cfg.mil {
        let bags = make_mil_bags(
            &data,
            mil.size_mean,
            mil.size_std,
            |i| labels[i],
            mil.count,
            cfg.seed,
        )?;
        let positive = bags
            .iter()
            .filter(|b| b.weak_label == WeakLabel::MaxLabel(true))
            .count();
        write_bags(out.join("bags.jsonl"), &bags)?;
        artifacts.push("bags.jsonl");
        println!("mil bags: {} ({positive} positive)", bags.len());
    } else if let Some(pu) = &cfg.pu {
        let split = make_pu_split(&data, pu.alpha, pu.c, cfg.seed)?;
        split.write(out.join("pu_split.json"))?;
        artifacts.push("pu_split.json");
        let est = split.mixture_estimate()?;
        println!(
            "pu split: {} labeled positives, {} unlabeled, estimated beta {:.4}",
            split.positive_indices.len(),
            split.unlabeled_indices.len(),
            est.beta
        );
    }
    write_manifest(out, "simulate", cfg.seed, &cfg, &inputs, &artifacts)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct RunCheckpoint {
    format: String,
    version: u32,
    standardizer: Option<Standardizer>,
    model: serde_json::Value,
}

const RUN_FORMAT: &str = "countloss-run";

fn save_checkpoint(
    path: &Path,
    model: &Mlp,
    standardizer: Option<&Standardizer>,
) -> anyhow::Result<()> {
    let ck = RunCheckpoint {
        format: RUN_FORMAT.into(),
        version: 1,
        standardizer: standardizer.cloned(),
        model: serde_json::from_str(&model.to_checkpoint_string()?)?,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ck)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Mlp, Option<Standardizer>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: RunCheckpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ck.format != RUN_FORMAT || ck.version != 1 {
        bail!("{}: not a {RUN_FORMAT} v1 checkpoint", path.display());
    }
    let model = Mlp::from_checkpoint_str(&serde_json::to_string(&ck.model)?)?;
    Ok((model, ck.standardizer))
}

fn cmd_train(
    config_path: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let mut run = config::load_train(config_path)?;
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(l) = lr {
        run.train.learning_rate = l;
    }
    if let Some(o) = out {
        run.output.dir = o;
    }
    run.train
        .validate()
        .map_err(|e| usage(format!("[train]: {e}")))?;

    let (mut data, _) = load_csv(&run.input.instances, &TabularSchema::instance_csv())?;
    let standardizer = if run.input.standardize {
        let st = Standardizer::fit(&data)?;
        st.apply(&mut data)?;
        Some(st)
    } else {
        None
    };
    let mut inputs: Vec<&Path> = vec![config_path, &run.input.instances];
    let bags;
    let split;
    let train_data = if run.train.setting.is_pu() {
        let p = run
            .input
            .pu_split
            .as_deref()
            .ok_or_else(|| usage("[input]: PU settings need `pu_split`"))?;
        inputs.push(p);
        split = PuDataset::read(p).with_context(|| format!("reading {}", p.display()))?;
        TrainData::Pu {
            data: &data,
            split: &split,
        }
    } else {
        let p = run
            .input
            .bags
            .as_deref()
            .ok_or_else(|| usage("[input]: LLP and MIL settings need `bags`"))?;
        inputs.push(p);
        bags = read_bags(p)?;
        TrainData::Bags {
            data: &data,
            bags: &bags,
        }
    };

    let outcome = train(&run.train, train_data)?;
    let dir = &run.output.dir;
    fs::create_dir_all(dir)?;
    save_checkpoint(
        &dir.join("checkpoint.json"),
        &outcome.model,
        standardizer.as_ref(),
    )?;
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    for record in &outcome.history {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    write_manifest(
        dir,
        "train",
        run.train.seed,
        &run,
        &inputs,
        &["checkpoint.json", "metrics.jsonl"],
    )?;

    let best = &outcome.history[outcome.best_epoch];
    println!("epochs run: {}", outcome.history.len() - 1);
    println!("best epoch: {}", outcome.best_epoch);
    if let Some(l) = best.validation_loss {
        println!("validation loss: {}", sig12(l));
    }
    if let Some(m) = best.instance {
        print_metrics("validation instances", &m);
    }
    if let Some(b) = outcome.beta {
        println!("beta: {}", sig12(b));
    }
    println!("checkpoint: {}", dir.join("checkpoint.json").display());
    Ok(ExitCode::SUCCESS)
}

fn print_metrics(label: &str, m: &LevelMetrics) {
    let auc = m.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    println!(
        "{label}: auc {auc} accuracy {:.4} f1 {:.4} precision {:.4} recall {:.4}",
        m.accuracy, m.f1, m.precision, m.recall
    );
}

#[derive(Serialize)]
struct EvaluationReport {
    instances: usize,
    instance: LevelMetrics,
    bag: Option<LevelMetrics>,
}

fn cmd_evaluate(
    checkpoint: &Path,
    data_path: &Path,
    bags: Option<&Path>,
    json: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let (model, standardizer) = load_checkpoint(checkpoint)?;
    let (mut data, _): (Dataset, _) = load_csv(data_path, &TabularSchema::instance_csv())?;
    if data.labels().is_none() {
        bail!(usage(format!(
            "{} has no label column",
            data_path.display()
        )));
    }
    if let Some(st) = &standardizer {
        st.apply(&mut data)?;
    }
    let instance = evaluate_instances(&model, &data)?;
    print_metrics(&format!("instances ({})", data.len()), &instance);
    let bag = match bags {
        Some(p) => {
            let bags = read_bags(p)?;
            let m = evaluate_mil_bags(&model, &data, &bags)?;
            print_metrics(&format!("bags ({})", bags.len()), &m);
            Some(m)
        }
        None => None,
    };
    if let Some(p) = json {
        let report = EvaluationReport {
            instances: data.len(),
            instance,
            bag,
        };
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(trials: usize, k_max: usize, tolerance: f64, seed: u64) -> anyhow::Result<ExitCode> {
    let report = verify_count_distribution(trials, k_max, tolerance, seed)
        .map_err(|e| usage(e.to_string()))?;
    println!(
        "{} trials, k <= {}: max abs error {:.3e}, max rel error {:.3e}, tolerance {:.1e}: {}",
        report.trials,
        report.k_max,
        report.max_abs_error,
        report.max_rel_error,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[cfg(test)]
mod tests {
    use super::sig12;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(sig12(0.504), "0.504");
        assert_eq!(sig12(0.39799999999999996), "0.398");
        assert_eq!(sig12(0.006000000000000004), "0.006");
        assert_eq!(sig12(-0.6851790109107684), "-0.685179010911");
        assert_eq!(sig12(1.0), "1");
        assert_eq!(sig12(1.234e-20), "1.234e-20");
        assert_eq!(sig12(f64::NEG_INFINITY), "-inf");
        assert_eq!(sig12(0.0), "0");
    }
}

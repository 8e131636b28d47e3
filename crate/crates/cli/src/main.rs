//! Command-line front end: `headlab <verb> [options] [--key=value ...]`.
//!
//! Every run-config key can be overridden with `--key=value`; the overrides
//! are applied after the optional `--config` file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use headlab::camera::CameraPose;
use headlab::harness::{
    self, ablation_cells, cmd_ablate, cmd_eval, cmd_grid, cmd_invert, cmd_nearest, cmd_synth, cmd_train,
    list_checkpoints, load_dataset, load_model, verify_tree, InvertOptions, LoadedModel, RunConfig, Session,
    GRID_YAWS, KEYS,
};
use headlab::inversion::ConditionSource;

#[derive(Parser, Debug)]
#[command(name = "headlab", version, about = "Semantic-conditional 3D-aware GAN laboratory")]
struct Cli {
    /// key=value run configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (defaults to $HEADLAB_OUT, then ./headlab_out)
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate the synthetic multi-view dataset
    Synth {
        /// Target directory (default <root>/datasets/<name>)
        #[arg(long, alias = "dir")]
        out: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        jitter: Option<f64>,
        /// Data seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one configuration
    Train {
        /// Continue from the newest checkpoint of the run
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint under every configured protocol
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Table destination (default next to the checkpoint)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate the ablation matrix
    Ablate {
        /// Comma-separated subset of cells
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Pivotal tuning inversion of one image
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// "yaw,pitch" in degrees
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        /// Hold the mean pool condition fixed instead of the target embedding
        #[arg(long)]
        pool_mean: bool,
        #[arg(long)]
        w_plus: bool,
        #[arg(long, default_value_t = headlab::inversion::DEFAULT_STEPS)]
        stage1_steps: usize,
        #[arg(long, default_value_t = headlab::inversion::DEFAULT_STEPS)]
        stage2_steps: usize,
    },
    /// Render fixed seeds over a list of yaws
    Grid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        yaws: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair generated front views with their nearest dataset subjects
    Nearest {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-hash an output tree and cross-check config hashes
    Verify {
        /// Directory to check (default the output root)
        dir: Option<PathBuf>,
    },
}

/// Splits `--key=value` run-config overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        let kv = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .filter(|(k, _)| KEYS.contains(k));
        match kv {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn run_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts a checkpoint stem, either checkpoint file, or a run directory
/// (its newest checkpoint).
fn resolve_ckpt(p: &Path) -> Result<PathBuf> {
    if p.is_dir() {
        return list_checkpoints(p)?
            .pop()
            .map(|(_, stem)| stem)
            .with_context(|| format!("{} holds no checkpoints", p.display()));
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("manifest" | "safetensors") => Ok(p.with_extension("")),
        _ => Ok(p.to_path_buf()),
    }
}

/// Restores a checkpoint and opens its dataset; overrides adjust the
/// evaluation settings only.
fn open_model(ckpt: &Path, overrides: &[(String, String)]) -> Result<(LoadedModel, Session)> {
    let stem = resolve_ckpt(ckpt)?;
    let model = load_model(&stem).with_context(|| format!("loading {}", stem.display()))?;
    let mut cfg = model.cfg.clone();
    cfg.apply(overrides)?;
    let session = Session::open(cfg)?;
    Ok((model, session))
}

fn parse_pose(s: &str) -> Result<CameraPose> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("pose '{s}' is not yaw,pitch"))?;
    let [yaw, pitch] = parts[..] else {
        bail!("pose '{s}' needs exactly two angles");
    };
    Ok(CameraPose::from_degrees(yaw, pitch)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let root = cli.out_root.clone().unwrap_or_else(harness::output_root);
    match cli.verb {
        Verb::Synth {
            out,
            subjects,
            views,
            jitter,
            seed,
        } => {
            let mut overrides = overrides;
            let flags = [
                ("subjects", subjects.map(|v| v.to_string())),
                ("views", views.map(|v| v.to_string())),
                ("jitter", jitter.map(|v| v.to_string())),
                ("data_seed", seed.map(|v| v.to_string())),
            ];
            overrides.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
            let cfg = run_config(cli.config.as_deref(), &overrides)?;
            let dir = out.unwrap_or_else(|| root.join("datasets").join(&cfg.name));
            let ds = cmd_synth(&cfg, &dir)?;
            log::info!("wrote {} subjects to {}", ds.len(), dir.display());
        }
        Verb::Train { resume } => {
            let cfg = run_config(cli.config.as_deref(), &overrides)?;
            let dir = root.join("runs").join(&cfg.name);
            let session = Session::open(cfg)?;
            let s = cmd_train(&session, &dir, resume)?;
            println!("step\tcheckpoint\tcheckpoint_hash\tcollapsed\tconfig_hash");
            println!(
                "{}\t{}\t{}\t{}\t{}",
                s.steps,
                s.final_checkpoint.display(),
                s.checkpoint_hash,
                s.collapse.as_ref().is_some_and(|c| c.collapsed()),
                s.config_hash
            );
        }
        Verb::Eval { ckpt, output } => {
            let (model, session) = open_model(&ckpt, &overrides)?;
            let stem = resolve_ckpt(&ckpt)?;
            let output = output.unwrap_or_else(|| stem.with_extension("eval.tsv"));
            cmd_eval(&model, &session, Some(&output))?;
            print!("{}", std::fs::read_to_string(&output)?);
        }
        Verb::Ablate { cells } => {
            let cfg = run_config(cli.config.as_deref(), &overrides)?;
            let mut all = ablation_cells(cfg.total_kimg);
            if !cells.is_empty() {
                if let Some(bad) = cells.iter().find(|c| !all.iter().any(|a| a.name == c.as_str())) {
                    bail!("unknown ablation cell '{bad}'");
                }
                all.retain(|a| cells.iter().any(|c| c == a.name));
            }
            let ds = load_dataset(&cfg)?;
            let dir = root.join("ablations").join(&cfg.name);
            let report = cmd_ablate(&cfg, &ds, &all, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("ablation.tsv"))?);
            for (cell, why) in &report.missing {
                eprintln!("missing cell {cell}: {why}");
            }
        }
        Verb::Invert {
            ckpt,
            target,
            mask,
            pose,
            out,
            pool_mean,
            w_plus,
            stage1_steps,
            stage2_steps,
        } => {
            let (model, session) = open_model(&ckpt, &overrides)?;
            let opts = InvertOptions {
                source: if pool_mean {
                    ConditionSource::PoolMean
                } else {
                    ConditionSource::TargetEmbedding
                },
                stage1_steps,
                stage2_steps,
                w_plus,
                seed: model.cfg.eval_seed,
            };
            let r = cmd_invert(&model, &session, &target, &mask, parse_pose(&pose)?, &opts, &out)?;
            println!("initial_loss\tfinal_loss\tcondition_hash");
            println!("{:.9}\t{:.9}\t{}", r.initial_loss(), r.final_loss(), r.condition_hash);
        }
        Verb::Grid { ckpt, seeds, yaws, out } => {
            let (model, session) = open_model(&ckpt, &overrides)?;
            let yaws = if yaws.is_empty() { GRID_YAWS.to_vec() } else { yaws };
            for f in cmd_grid(&model, &session, &seeds, &yaws, &out)? {
                println!("{}", f.display());
            }
        }
        Verb::Nearest { ckpt, n, output } => {
            let (model, session) = open_model(&ckpt, &overrides)?;
            let pairs = cmd_nearest(&model, &session, n, output.as_deref())?;
            println!("{}", headlab::harness::NearestPair::HEADER);
            for p in pairs {
                println!("{}\t{}\t{:.6}", p.sample, p.subject_id, p.similarity);
            }
        }
        Verb::Verify { dir } => {
            let dir = dir.unwrap_or(root);
            let rep = verify_tree(&dir)?;
            println!("runs\tcheckpoints\tfiles\ttables\tproblems");
            println!(
                "{}\t{}\t{}\t{}\t{}",
                rep.runs,
                rep.checkpoints,
                rep.files,
                rep.tables,
                rep.problems.len()
            );
            for p in &rep.problems {
                eprintln!("{p}");
            }
            if !rep.ok() {
                bail!("verification found {} problems", rep.problems.len());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["headlab", "train", "--resume", "--batch=4", "--strategy=view", "--out-root=x"]
            .map(String::from)
            .to_vec();
        let (rest, ov) = split_overrides(args);
        assert_eq!(rest, ["headlab", "train", "--resume", "--out-root=x"]);
        assert_eq!(ov, [("batch".into(), "4".into()), ("strategy".into(), "view".into())]);
        let cfg = run_config(None, &ov).unwrap();
        assert_eq!(cfg.batch, 4);
        assert!(run_config(None, &[("batch".into(), "0".into())]).is_err());
    }

    #[test]
    fn poses_and_checkpoint_paths() {
        let p = parse_pose("-30,10").unwrap();
        assert!((p.yaw.to_degrees() + 30.0).abs() < 1e-9);
        assert!(parse_pose("1").is_err());
        assert_eq!(resolve_ckpt(Path::new("a/ckpt_00000001.manifest")).unwrap(), Path::new("a/ckpt_00000001"));
    }

    #[test]
    fn synth_takes_dataset_flags() {
        let cli = Cli::parse_from(["headlab", "synth", "--subjects", "12", "--views", "3", "--out", "d", "--seed", "4"]);
        let Verb::Synth {
            out, subjects, views, seed, ..
        } = cli.verb
        else {
            panic!("not synth");
        };
        assert_eq!((subjects, views, seed), (Some(12), Some(3), Some(4)));
        assert_eq!(out.unwrap(), Path::new("d"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

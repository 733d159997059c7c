//! `hydroseg`: phantom generation, registration, fusion, training,
//! inference and the five-fold ablation, wired to the core crate.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hydroseg_core::error::{CoreError, Result};
use hydroseg_core::eval::{
    five_fold, render_csv, render_tables, run_ablation, AblationConfig, DiceReport,
    Variant,
};
use hydroseg_core::fuse::{fuse_majority, propagate_all, AtlasSet};
use hydroseg_core::phantom::{load_dataset, make_dataset, write_dataset, PhantomConfig};
use hydroseg_core::register::{register_direct, train_amortized, predict_field, RegConfig, RegMode};
use hydroseg_core::segnet::{infer, train_two_stage, TwoStageModel};
use hydroseg_core::tensorad::SgdConfig;
use hydroseg_core::volume::{read_mvol, write_mvol_labels, write_mvol_volume, Volume3};

#[derive(Parser)]
#[command(name = "hydroseg", about = "Hydrocephalus brain MR segmentation pipeline")]
struct Cli {
    /// Plain-text `key = value` defaults; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Deformable registration of one pair; writes the displacement field.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// direct | amortized
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Multi-atlas propagation and majority-vote fusion onto one query.
    Fuse {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        atlas_dir: PathBuf,
        /// Number of atlases taken from the dataset, in index order.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out_prior: PathBuf,
        #[arg(long)]
        out_label: PathBuf,
    },
    /// Trains one ablation variant on a dataset and writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// base | base_hard | base_hard_soft
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Segments one dataset subject with a trained checkpoint.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subject: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice report of predicted label maps against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// All four variants over five folds; writes tables and CSV.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cubic grid size per axis.
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        amplitude: Option<f32>,
        /// Ventricle dilation range as LO:HI.
        #[arg(long)]
        ventricle: Option<String>,
    },
}

/// `key = value` defaults, lowest priority in the flag → config → built-in
/// chain.
struct Config(HashMap<String, String>);

impl Config {
    fn load(path: Option<&Path>) -> Result<Config> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CoreError::format(i as u64, format!("expected `key = value`, got '{}'", line))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Config(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                CoreError::argument(format!("config key '{}' has unusable value '{}'", key, raw))
            }),
            None => Ok(default),
        }
    }
}

fn anatomical_channel(vol: &Volume3) -> Result<Volume3> {
    if vol.channels() == 1 {
        Ok(vol.clone())
    } else {
        vol.extract_channel(0)
    }
}

fn reg_config(cfg: &Config, mode: Option<String>, lambda: Option<f64>, levels: Option<usize>) -> Result<RegConfig> {
    let mut reg = RegConfig::default();
    reg.lambda_smooth = cfg.get("lambda", lambda, reg.lambda_smooth)?;
    reg.levels = cfg.get("levels", levels, reg.levels)?;
    reg.iters_per_level = cfg.get("iters", None, reg.iters_per_level)?;
    reg.step = cfg.get("step", None, reg.step)?;
    reg.seed = cfg.get("seed", None, reg.seed)?;
    reg.mode = match cfg.get("mode", mode, "direct".to_string())?.as_str() {
        "direct" => RegMode::Direct,
        "amortized" => RegMode::Amortized,
        other => {
            return Err(CoreError::argument(format!(
                "mode must be direct or amortized, got '{}'",
                other
            )))
        }
    };
    Ok(reg)
}

fn ablation_config(cfg: &Config, seed: Option<u64>, steps: Option<usize>) -> Result<AblationConfig> {
    let mut out = AblationConfig::default();
    out.seed = cfg.get("seed", seed, out.seed)?;
    out.steps = cfg.get("steps", steps, out.steps)?;
    out.lr = cfg.get("lr", None, out.lr)?;
    out.levels = cfg.get("net_levels", None, out.levels)?;
    out.base_channels = cfg.get("base_channels", None, out.base_channels)?;
    out.crop_margin = cfg.get("crop_margin", None, out.crop_margin)?;
    out.augment = cfg.get("augment", None, out.augment)?;
    out.reg.lambda_smooth = cfg.get("reg_lambda", None, out.reg.lambda_smooth)?;
    out.reg.levels = cfg.get("reg_levels", None, out.reg.levels)?;
    out.reg.iters_per_level = cfg.get("reg_iters", None, out.reg.iters_per_level)?;
    Ok(out)
}

/// Training split that stands in for "all subjects" when a dataset is
/// trained on directly (no held-out fold).
fn whole_dataset_ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn loo_priors(
    dataset: &[(Volume3, hydroseg_core::LabelMap)],
    reg: &RegConfig,
) -> Result<Vec<hydroseg_core::fuse::AtlasPrior>> {
    let ids = whole_dataset_ids(dataset.len());
    let mut priors = Vec::with_capacity(ids.len());
    for &i in &ids {
        let entries: Vec<_> = ids
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dataset[j].clone())
            .collect();
        let atlases = AtlasSet::new(entries)?;
        let props = propagate_all(&atlases, &dataset[i].0, reg)?;
        priors.push(fuse_majority(&props)?.1);
    }
    Ok(priors)
}

fn cmd_phantom_generate(
    cfg: &Config,
    out: PathBuf,
    subjects: Option<usize>,
    seed: Option<u64>,
    dims: Option<usize>,
    amplitude: Option<f32>,
    ventricle: Option<String>,
) -> Result<()> {
    let mut pc = PhantomConfig::default();
    pc.n_subjects = cfg.get("subjects", subjects, pc.n_subjects)?;
    pc.seed = cfg.get("seed", seed, pc.seed)?;
    let d = cfg.get("dims", dims, pc.dims.0)?;
    pc.dims = (d, d, d);
    pc.deform_amplitude = cfg.get("amplitude", amplitude, pc.deform_amplitude)?;
    let vent = cfg.get(
        "ventricle",
        ventricle,
        format!("{}:{}", pc.ventricle_scale.0, pc.ventricle_scale.1),
    )?;
    let (lo, hi) = vent
        .split_once(':')
        .ok_or_else(|| CoreError::argument("--ventricle expects LO:HI"))?;
    pc.ventricle_scale = (
        lo.parse().map_err(|_| CoreError::argument("bad ventricle LO"))?,
        hi.parse().map_err(|_| CoreError::argument("bad ventricle HI"))?,
    );
    let dataset = make_dataset(&pc)?;
    write_dataset(&out, &pc, &dataset)?;
    println!("wrote {} subjects to {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_register(
    cfg: &Config,
    fixed: PathBuf,
    moving: PathBuf,
    out: PathBuf,
    mode: Option<String>,
    lambda: Option<f64>,
    levels: Option<usize>,
) -> Result<()> {
    let reg = reg_config(cfg, mode, lambda, levels)?;
    let fixed = anatomical_channel(&read_mvol(&fixed)?.into_volume()?)?;
    let moving = anatomical_channel(&read_mvol(&moving)?.into_volume()?)?;
    let field = match reg.mode {
        RegMode::Direct => register_direct(&fixed, &moving, &reg)?,
        RegMode::Amortized => {
            let (model, _) = train_amortized(&[(fixed.clone(), moving.clone())], &reg)?;
            predict_field(&model, &fixed, &moving)?
        }
    };
    write_mvol_volume(&field.to_volume(), &out)?;
    println!(
        "field mean magnitude {:.4} vox -> {}",
        field.mean_magnitude(),
        out.display()
    );
    Ok(())
}

fn cmd_fuse(
    cfg: &Config,
    query: PathBuf,
    atlas_dir: PathBuf,
    k: Option<usize>,
    out_prior: PathBuf,
    out_label: PathBuf,
) -> Result<()> {
    let reg = reg_config(cfg, None, None, None)?;
    let query = read_mvol(&query)?.into_volume()?;
    let mut entries = load_dataset(&atlas_dir)?;
    let k = cfg.get("k", k, entries.len())?;
    if k == 0 || k > entries.len() {
        return Err(CoreError::argument(format!(
            "k must be in 1..={}, got {}",
            entries.len(),
            k
        )));
    }
    entries.truncate(k);
    let atlases = AtlasSet::new(entries)?;
    let props = propagate_all(&atlases, &query, &reg)?;
    let (consensus, prior) = fuse_majority(&props)?;
    write_mvol_volume(&prior.to_volume(query.spacing()), &out_prior)?;
    write_mvol_labels(&consensus, &out_label)?;
    println!("fused {} atlases -> {}", k, out_label.display());
    Ok(())
}

fn cmd_train(
    cfg: &Config,
    data: PathBuf,
    variant: String,
    out: PathBuf,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<()> {
    let variant = Variant::parse(&variant)?;
    if variant == Variant::MabsOnly {
        return Err(CoreError::argument(
            "mabs_only has no trainable parameters; use `fuse` directly",
        ));
    }
    let ab = ablation_config(cfg, seed, steps)?;
    let dataset = load_dataset(&data)?;
    let use_hard = variant != Variant::Base;
    let priors = if use_hard {
        Some(loo_priors(&dataset, &ab.reg)?)
    } else {
        None
    };
    let ts = ab.two_stage(variant);
    let sgd = SgdConfig {
        lr0: ab.lr,
        ..SgdConfig::new(ab.steps)
    };
    let (model, losses) = train_two_stage(&dataset, priors.as_deref(), &ts, &sgd, ab.steps, ab.seed)?;
    model.save(&out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "loss {:.4} -> {:.4} over {} steps; checkpoint {}",
            first.0 + first.1,
            last.0 + last.1,
            losses.len(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_infer(
    cfg: &Config,
    model: PathBuf,
    subject: usize,
    data: PathBuf,
    out: PathBuf,
) -> Result<()> {
    let model = TwoStageModel::load(&model)?;
    let dataset = load_dataset(&data)?;
    if subject >= dataset.len() {
        return Err(CoreError::argument(format!(
            "subject {} out of range, dataset has {}",
            subject,
            dataset.len()
        )));
    }
    let prior = if model.cfg.use_hard() {
        let reg = reg_config(cfg, None, None, None)?;
        let entries: Vec<_> = dataset
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != subject)
            .map(|(_, e)| e.clone())
            .collect();
        let atlases = AtlasSet::new(entries)?;
        let props = propagate_all(&atlases, &dataset[subject].0, &reg)?;
        Some(fuse_majority(&props)?.1)
    } else {
        None
    };
    let pred = infer(&model, &dataset[subject].0, prior.as_ref())?;
    write_mvol_labels(&pred, &out)?;
    println!("labelled subject {} -> {}", subject, out.display());
    Ok(())
}

fn cmd_evaluate(pred_dir: PathBuf, truth_dir: PathBuf, out: PathBuf) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(&truth_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("subj_") && n.ends_with("_lab.mvol"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CoreError::argument(format!(
            "no subj_*_lab.mvol files in {}",
            truth_dir.display()
        )));
    }
    let mut report = DiceReport::new("evaluate");
    for name in &names {
        let truth = read_mvol(truth_dir.join(name))?.into_labels()?;
        let pred = read_mvol(pred_dir.join(name))?.into_labels()?;
        report.add_subject(&pred, &truth);
    }
    std::fs::write(&out, render_csv(std::slice::from_ref(&report)))?;
    print!("{}", render_tables(std::slice::from_ref(&report)));
    println!("{} subjects -> {}", names.len(), out.display());
    Ok(())
}

fn cmd_ablation(cfg: &Config, data: PathBuf, out_dir: PathBuf, seed: Option<u64>) -> Result<()> {
    let ab = ablation_config(cfg, seed, None)?;
    let dataset = load_dataset(&data)?;
    let split = five_fold(dataset.len(), ab.seed)?;
    let reports = run_ablation(&dataset, &split, &ab)?;
    std::fs::create_dir_all(&out_dir)?;
    let text = render_tables(&reports);
    std::fs::write(out_dir.join("tables.txt"), &text)?;
    std::fs::write(out_dir.join("report.csv"), render_csv(&reports))?;
    print!("{}", text);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom {
            command: PhantomCommand::Generate { out, subjects, seed, dims, amplitude, ventricle },
        } => cmd_phantom_generate(&cfg, out, subjects, seed, dims, amplitude, ventricle),
        Command::Register { fixed, moving, out, mode, lambda, levels } => {
            cmd_register(&cfg, fixed, moving, out, mode, lambda, levels)
        }
        Command::Fuse { query, atlas_dir, k, out_prior, out_label } => {
            cmd_fuse(&cfg, query, atlas_dir, k, out_prior, out_label)
        }
        Command::Train { data, variant, out, seed, steps } => {
            cmd_train(&cfg, data, variant, out, seed, steps)
        }
        Command::Infer { model, subject, data, out } => cmd_infer(&cfg, model, subject, data, out),
        Command::Evaluate { pred_dir, truth_dir, out } => cmd_evaluate(pred_dir, truth_dir, out),
        Command::Ablation { data, out_dir, seed } => cmd_ablation(&cfg, data, out_dir, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hydroseg: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end. Every command is a pure function of its config,
//! inputs and seed.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::adaptation::{adapt, calibrate_thresholds};
use crate::config::{default_provenance, PartitionSpec, Provenance, RunConfig, TAG_ELICIT, TAG_PROBE, TAG_SOURCE, TAG_TARGET};
use crate::error::{Error, Result};
use crate::inference::{build_pose_bank, estimate_with_scorer, SceneScorer};
use crate::io;
use crate::partition::{check_support, elicit_domain, global_pseudo_label_subset, greedy_partition, LabeledSampleSet, VertexPartition};
use crate::seed::{derive, derived_rng};
use crate::synth::{generate_source, generate_target, strip_labels};
use crate::training::{evaluate, ratio_histogram, train_source, Model};

#[derive(Debug, Parser)]
#[command(name = "meshsva", version, about = "Neural-mesh pose estimation with selective vertex adaptation")]
pub struct Cli {
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a source or target dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Labeled scenes from the true model.
        #[arg(long, conflicts_with = "target", required_unless_present = "target")]
        source: bool,
        /// Scenes from the shifted model, with the ground truth kept apart.
        #[arg(long)]
        target: bool,
        /// Draw a held-out target split from an independent stream.
        #[arg(long, requires = "target")]
        probe: bool,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the source model on a labeled dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Labeled source dataset.
        #[arg(long)]
        data: PathBuf,
        /// Model JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Fix every concentration to this value.
        #[arg(long)]
        fixed_kappa: Option<f64>,
        /// Overrides `training.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Training-curve CSV; defaults to `<out>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Adapt a model to an unlabeled target dataset.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Source model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Target dataset; its ground truth is never read.
        #[arg(long)]
        data: PathBuf,
        /// Adapted model JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// History CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Labeled source dataset to recalibrate thresholds from.
        #[arg(long)]
        calibrate: Option<PathBuf>,
        /// Labeled probe dataset, evaluated only.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Overrides `adaptation.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a model on a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Labeled dataset.
        #[arg(long)]
        data: PathBuf,
        /// Receives metrics.json, scenes.csv and histogram.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check piece-wise support and elicit a target domain.
    TheoremCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose scenes form the sample set; poses are estimated.
        #[arg(long)]
        data: PathBuf,
        /// JSON list of vertex blocks; overrides the config partition.
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Verdict JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every default with its provenance.
    Defaults,
}

/// Exit code for an error: 2 config, 3 data, 4 starvation or assumption.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Starvation { .. } | Error::Assumption(_) => 4,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::DegenerateProjection(_) => 3,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Gen { common, source, probe, out, .. } => cmd_gen(&load_config(&common)?, source, probe, &out),
        Command::Train { common, data, out, fixed_kappa, epochs, curve } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = fixed_kappa {
                cfg.training.fixed_kappa = true;
                cfg.training.kappa = k;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            cfg.validate()?;
            let curve = curve.unwrap_or_else(|| sibling(&out, ".curve.csv"));
            cmd_train(&cfg, &data, &out, &curve)
        }
        Command::Adapt { common, model, data, out, history, calibrate, probe, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.adaptation.epochs = e;
            }
            let history = history.unwrap_or_else(|| sibling(&out, ".history.csv"));
            cmd_adapt(&cfg, &model, &data, &out, &history, calibrate.as_deref(), probe.as_deref())
        }
        Command::Eval { common, model, data, out_dir } => cmd_eval(&load_config(&common)?, &model, &data, &out_dir),
        Command::TheoremCheck { common, model, data, partition, out } => {
            cmd_theorem_check(&load_config(&common)?, &model, &data, partition.as_deref(), &out)
        }
        Command::Defaults => {
            for (key, value, prov) in default_provenance() {
                let tag = match prov {
                    Provenance::Paper(q) => format!("paper: \"{q}\""),
                    Provenance::Artifact => "artifact default".to_string(),
                };
                println!("{key:32} {value:20} [{tag}]");
            }
            Ok(())
        }
    }
}

pub fn cmd_gen(cfg: &RunConfig, source: bool, probe: bool, out: &Path) -> Result<()> {
    let geo = cfg.geometry()?;
    let cam = cfg.camera()?;
    let grid = cfg.grid();
    let world = cfg.true_model()?;
    let manifest = if source {
        let scenes = generate_source(&world, &grid, &cam, cfg.source.n, cfg.source.data_kappa, derive(cfg.seed, TAG_SOURCE, 0))?;
        let (unlabeled, truth) = strip_labels(&scenes);
        let spec = json!({ "source": cfg.source, "world": cfg.world, "mesh": cfg.mesh, "camera": cfg.camera, "dim": cfg.dim });
        io::write_dataset(out, "source", cfg.seed, spec, &unlabeled, &truth)?
    } else {
        let shifted = cfg.shifted_model(&world)?;
        let (tag, n) = if probe { (TAG_PROBE, cfg.target.probe_n) } else { (TAG_TARGET, cfg.target.n) };
        if n == 0 {
            return Err(Error::Config("target.probe_n must be >= 1 to generate a probe split".into()));
        }
        let data = generate_target(&shifted.model, &cfg.domain_spec(), &grid, &cam, n, derive(cfg.seed, tag, 0))?;
        let spec = json!({
            "target": cfg.target, "world": cfg.world, "mesh": cfg.mesh, "camera": cfg.camera, "dim": cfg.dim,
            "robust_vertices": shifted.robust, "split": if probe { "probe" } else { "train" },
        });
        io::write_dataset(out, "target", cfg.seed, spec, &data.scenes, &data.truth)?
    };
    debug_assert_eq!(geo.vertex_count(), world.mesh.vertex_count());
    println!("wrote {} {} scenes to {} (seed {})", manifest.n, manifest.kind, out.display(), manifest.seed);
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    loss: f64,
    neural: f64,
    clutter: f64,
    contrastive: f64,
    accepted_steps: usize,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, curve: &Path) -> Result<()> {
    let geo = cfg.geometry()?;
    let cam = cfg.camera()?;
    let scenes = io::read_labeled(data, geo.vertex_count())?;
    let tc = cfg.training_config();
    let result = train_source(&scenes, geo, &cam, &tc)?;
    let delta = calibrate_thresholds(&result.model, &scenes, &cam, cfg.adaptation.quantile)?;
    let meta = json!({
        "fixed_kappa": tc.fixed_kappa,
        "lambda": tc.lambda,
        "mu": tc.mu,
        "epochs": tc.epochs,
        "seed": cfg.seed,
        "never_observed": result.never_observed,
        "quantile": cfg.adaptation.quantile,
        "delta": delta,
    });
    create_parent(out)?;
    io::write_model(out, &result.model, meta)?;
    create_parent(curve)?;
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(curve)?));
    for r in &result.curve {
        wr.serialize(CurveRow {
            epoch: r.epoch,
            loss: r.loss.total(),
            neural: r.loss.neural,
            clutter: r.loss.clutter,
            contrastive: r.loss.contrastive,
            accepted_steps: r.accepted_steps,
        })?;
    }
    wr.flush()?;
    let last = result.curve.last().expect("curve has the initial entry");
    println!("trained on {} scenes; final loss {:.6} (neural {:.6})", scenes.len(), last.loss.total(), last.loss.neural);
    if !result.never_observed.is_empty() {
        eprintln!("warning: {} vertices never visible in training data", result.never_observed.len());
    }
    Ok(())
}

fn model_delta(meta: &serde_json::Value, vertex_count: usize) -> Result<Vec<f64>> {
    let delta: Vec<f64> = meta
        .get("delta")
        .and_then(|d| serde_json::from_value(d.clone()).ok())
        .ok_or_else(|| Error::Config("model carries no thresholds; pass --calibrate with a labeled source dataset".into()))?;
    if delta.len() != vertex_count {
        return Err(Error::Data("threshold table does not match the mesh".into()));
    }
    Ok(delta)
}

pub fn cmd_adapt(
    cfg: &RunConfig,
    model_path: &Path,
    data: &Path,
    out: &Path,
    history: &Path,
    calibrate: Option<&Path>,
    probe: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let (model, meta) = io::read_model(model_path)?;
    let cam = cfg.camera()?;
    let r_count = model.mesh.vertex_count();
    let delta = match calibrate {
        Some(dir) => calibrate_thresholds(&model, &io::read_labeled(dir, r_count)?, &cam, cfg.adaptation.quantile)?,
        None => model_delta(&meta, r_count)?,
    };
    let (_, target) = io::read_unlabeled(data)?;
    let probe = probe.map(|p| io::read_labeled(p, r_count)).transpose()?;
    let bank = build_pose_bank(model.mesh.geometry(), &cam, &cfg.grid())?;
    let acfg = cfg.adaptation_config(delta.clone());
    let result = adapt(&model, &target, &cam, &bank, &cfg.inference_options(), &acfg, probe.as_deref())?;
    let mut meta = meta;
    meta["delta"] = json!(delta);
    meta["adapted_epochs"] = json!(result.history.rows.len());
    create_parent(out)?;
    io::write_model(out, &result.model, meta)?;
    create_parent(history)?;
    result.history.write_csv(BufWriter::new(File::create(history)?))?;
    let last = result.history.rows.last().expect("at least one epoch");
    println!(
        "adapted for {} epochs; robust ratio {:.3}, drift {:.3} deg{}",
        result.history.rows.len(),
        last.robust_ratio,
        last.mean_drift_deg,
        if result.history.converged { ", converged" } else { "" }
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, data: &Path, out_dir: &Path) -> Result<()> {
    let (model, _) = io::read_model(model_path)?;
    let cam = cfg.camera()?;
    let scenes = io::read_labeled(data, model.mesh.vertex_count())?;
    let bank = build_pose_bank(model.mesh.geometry(), &cam, &cfg.grid())?;
    let ev = evaluate(&model, &scenes, &cam, &bank, &cfg.inference_options(), cfg.eval.ratio_delta)?;
    fs::create_dir_all(out_dir)?;
    io::write_json(&out_dir.join("metrics.json"), &io::MetricsJson::from(ev.metrics))?;
    io::write_scene_csv(BufWriter::new(File::create(out_dir.join("scenes.csv"))?), &ev.scenes)?;
    io::write_histogram_csv(
        BufWriter::new(File::create(out_dir.join("histogram.csv"))?),
        &ratio_histogram(&ev, cfg.eval.bins),
    )?;
    println!(
        "acc_pi6 {:.4} acc_pi18 {:.4} median {:.3} deg over {} scenes",
        ev.metrics.acc_pi6,
        ev.metrics.acc_pi18,
        ev.metrics.median_error.to_degrees(),
        ev.metrics.n
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TheoremVerdict {
    #[serde(rename = "K")]
    pub k: usize,
    pub per_k_counts: Vec<usize>,
    pub global_count: usize,
    pub elicited_count: usize,
    pub all_elicited_pass: bool,
}

/// Support counts, global subset size and elicitation outcome on a sample
/// set. Unsatisfied support is returned as an assumption error after the
/// verdict has been computed.
pub fn theorem_verdict(set: &LabeledSampleSet, part: &VertexPartition, omega: f64, m: usize, seed: u64) -> Result<(TheoremVerdict, bool)> {
    let delta = set.delta().to_vec();
    let report = check_support(set, part, &delta);
    let global_count = global_pseudo_label_subset(set, &delta, omega)?.len();
    let (elicited_count, all_elicited_pass) = if report.satisfied {
        let samples = elicit_domain(set, part, &delta, m, &mut derived_rng(seed, TAG_ELICIT, 0))?;
        (samples.len(), samples.iter().all(|s| s.passes(&delta)))
    } else {
        (0, false)
    };
    Ok((
        TheoremVerdict { k: part.k(), per_k_counts: report.per_k_counts, global_count, elicited_count, all_elicited_pass },
        report.satisfied,
    ))
}

fn sample_set(model: &Model, target: &[crate::synth::UnlabeledScene], cfg: &RunConfig, delta: Vec<f64>) -> Result<LabeledSampleSet> {
    let cam = cfg.camera()?;
    let bank = build_pose_bank(model.mesh.geometry(), &cam, &cfg.grid())?;
    let opts = cfg.inference_options();
    let est: Vec<_> = target
        .par_iter()
        .map(|s| {
            let f = model.extractor.extract(&s.features);
            let scorer = SceneScorer::new(&f, &model.mesh, &model.clutter, &cam)?;
            let e = estimate_with_scorer(&scorer, &bank, &opts)?;
            Ok((f, e))
        })
        .collect::<Result<_>>()?;
    let feats: Vec<_> = est.iter().map(|(f, _)| f).collect();
    let rasters: Vec<_> = est.iter().map(|(_, e)| &e.best().raster).collect();
    LabeledSampleSet::from_rasters(&feats, &rasters, &model.mesh, delta)
}

pub fn cmd_theorem_check(cfg: &RunConfig, model_path: &Path, data: &Path, partition: Option<&Path>, out: &Path) -> Result<()> {
    let (model, meta) = io::read_model(model_path)?;
    let r_count = model.mesh.vertex_count();
    let delta = model_delta(&meta, r_count)?;
    let (_, target) = io::read_unlabeled(data)?;
    let set = sample_set(&model, &target, cfg, delta)?;
    let spec = match partition {
        Some(p) => PartitionSpec::Blocks(io::read_json(p).map_err(|e| Error::Config(e.to_string()))?),
        None => cfg.theorem.partition.clone(),
    };
    let part = match spec {
        PartitionSpec::Blocks(b) => VertexPartition::new(b, r_count).map_err(|e| Error::Config(format!("partition: {e}")))?,
        PartitionSpec::Greedy { k } => greedy_partition(&set, set.delta(), k).map_err(|e| Error::Config(format!("partition: {e}")))?,
    };
    let (verdict, satisfied) = theorem_verdict(&set, &part, cfg.theorem.omega, cfg.theorem.m, cfg.seed)?;
    create_parent(out)?;
    io::write_json(out, &verdict)?;
    println!("{}", serde_json::to_string(&verdict)?);
    if !satisfied {
        return Err(Error::Assumption(format!("piece-wise support fails; per-block counts {:?}", verdict.per_k_counts)));
    }
    Ok(())
}

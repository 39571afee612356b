use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use datbev_core::harness::evaluate::{eval_scenes, evaluate, object_depth_profiles};
use datbev_core::harness::train::train;
use datbev_core::harness::{ablate, ModelState, RunConfig, Variant};
use datbev_core::metrics::{
    along_ray_error, compute_nds, duplicates_per_ground_truth, match_by_center_distance, EvalDump, MetricsReport, SceneEval,
    TP_THRESHOLD,
};
use datbev_core::scene_sim::{generate_scene, Scene, SceneFile, SimConfig};
use datbev_core::Error;

#[derive(Parser)]
#[command(name = "datbev", version, about = "Depth-aware BEV detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the held-out scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A scene file, or a seed range `a..b`.
        #[arg(long)]
        scenes: String,
        #[arg(long)]
        report: PathBuf,
        /// Also write detections and ground truth in dump format.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train and evaluate the base run plus every ablation variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// nuScenes detection score from mAP and the five TP errors.
    Nds {
        #[arg(long)]
        map: f64,
        #[arg(long)]
        mate: f64,
        #[arg(long)]
        mase: f64,
        #[arg(long)]
        maoe: f64,
        #[arg(long)]
        mave: f64,
        #[arg(long)]
        maae: f64,
    },
    /// Metrics of a detection dump (`{"scenes": [{"id", "gts", "dets"}]}`).
    Metrics {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Diagnostics.
    Diag {
        #[command(subcommand)]
        what: Diag,
    },
}

#[derive(Subcommand)]
enum Diag {
    /// Per-object duplicates and depth errors along object rays, plus
    /// attention depth profiles, as CSV.
    Rays {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A scene file, or a seed range `a..b`; defaults to the held-out scenes.
        #[arg(long)]
        scenes: Option<String>,
        /// Directory for `rays.csv` and `profiles.csv`; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_scenes(spec: &str, state: &ModelState) -> Result<(Vec<Scene>, SimConfig)> {
    if let Some((a, b)) = spec.split_once("..") {
        if let (Ok(a), Ok(b)) = (a.parse::<u64>(), b.parse::<u64>()) {
            if a > b {
                bail!(Error::InvalidConfig(format!("empty seed range {spec}")));
            }
            let sim = state.config.eval_sim();
            let scenes = (a..b).map(|s| generate_scene(&sim, s)).collect::<datbev_core::Result<_>>()?;
            return Ok((scenes, sim));
        }
    }
    let file = SceneFile::load(Path::new(spec)).with_context(|| format!("reading scenes from {spec}"))?;
    Ok((file.scenes, file.sim))
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json()?)?;
    fs::write(path.with_extension("txt"), report.to_string())?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let trained = train(&cfg, Some(out))?;
    trained.state.save(&out.join("checkpoint.json"))?;
    fs::write(out.join("loss_log.csv"), trained.log_csv())?;
    let scenes = eval_scenes(&cfg)?;
    let (report, dets) = evaluate(&trained.state, &scenes, &cfg.eval_sim())?;
    write_report(&report, &out.join("report.json"))?;
    EvalDump { scenes: dets }.save(&out.join("detections.json"))?;
    println!("trained {} steps; final loss {:.4}", trained.state.step, trained.log.last().map_or(f64::NAN, |r| r.loss.total));
    print!("{report}");
    Ok(())
}

fn cmd_eval(checkpoint: &Path, scenes: &str, report_path: &Path, dump: Option<&Path>) -> Result<()> {
    let state = ModelState::load(checkpoint)?;
    let (scenes, sim) = load_scenes(scenes, &state)?;
    let (report, dets) = evaluate(&state, &scenes, &sim)?;
    write_report(&report, report_path)?;
    if let Some(d) = dump {
        EvalDump { scenes: dets }.save(d)?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_ablate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out)?;
    let variants = cfg.variants.clone().unwrap_or_else(Variant::standard);
    let table = ablate(&cfg, &variants, Some(out))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(out.join("ablation.txt"), table.to_string())?;
    print!("{table}");
    if !table.same_data_streams() {
        bail!("variants consumed different scene streams");
    }
    Ok(())
}

fn rays_csv(evals: &[SceneEval], state: &ModelState) -> String {
    let mut s = String::from("scene,gt,x,y,class,range,duplicates,matched,along_ray_error,across_ray_error\n");
    for e in evals {
        let counts = duplicates_per_ground_truth(e, &state.config.eval.duplicates);
        let m = match_by_center_distance(&e.dets, &e.gts, TP_THRESHOLD);
        for (j, (g, count)) in e.gts.iter().zip(counts).enumerate() {
            let matched = m.matches.iter().find(|mm| mm.gt == j);
            let (along, across) = matched
                .map(|mm| along_ray_error((e.dets[mm.det].x, e.dets[mm.det].y), (g.x, g.y)))
                .map_or((String::new(), String::new()), |(a, b)| (format!("{a:.6}"), format!("{b:.6}")));
            writeln!(
                s,
                "{},{j},{:.4},{:.4},{},{:.4},{count},{},{along},{across}",
                e.id,
                g.x,
                g.y,
                g.class,
                g.x.hypot(g.y),
                matched.is_some()
            )
            .unwrap();
        }
    }
    s
}

/// Logit of an object-center key as a query slides along the object's depth.
fn profiles_csv(state: &ModelState, scenes: &[Scene], sim: &SimConfig) -> Result<String> {
    let sweep: Vec<f64> = (0..9).map(|i| 0.1 + 0.1 * i as f64).collect();
    let mut s = String::from("scene,gt,camera,sweep_dn,logit_uvd,logit_uv_only\n");
    for p in object_depth_profiles(state, &scenes[..scenes.len().min(10)], sim, &sweep)? {
        let prof = &p.profile;
        for (i, dn) in sweep.iter().enumerate() {
            writeln!(s, "{},{},{},{dn:.3},{:.6},{:.6}", p.scene, p.object, p.camera, prof.full[i], prof.uv_only[i]).unwrap();
        }
    }
    Ok(s)
}

fn cmd_diag_rays(checkpoint: &Path, scenes: Option<&str>, out: Option<&Path>) -> Result<()> {
    let state = ModelState::load(checkpoint)?;
    let (scenes, sim) = match scenes {
        Some(spec) => load_scenes(spec, &state)?,
        None => (eval_scenes(&state.config)?, state.config.eval_sim()),
    };
    let (report, evals) = evaluate(&state, &scenes, &sim)?;
    let rays = rays_csv(&evals, &state);
    let profiles = profiles_csv(&state, &scenes, &sim)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("rays.csv"), rays)?;
            fs::write(dir.join("profiles.csv"), profiles)?;
            println!("duplicate_rate {:.4}  depth_error {:.4}", report.duplicates.rate, report.depth_error);
        }
        None => print!("{rays}\n{profiles}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { checkpoint, scenes, report, dump } => cmd_eval(&checkpoint, &scenes, &report, dump.as_deref()),
        Command::Ablate { config, out } => cmd_ablate(&config, &out),
        Command::Nds { map, mate, mase, maoe, mave, maae } => {
            println!("{:.6}", compute_nds(map, [Some(mate), Some(mase), Some(maoe), Some(mave), Some(maae)]));
            Ok(())
        }
        Command::Metrics { dump, report } => {
            let dump = EvalDump::load(&dump)?;
            let r = MetricsReport::compute(&dump.scenes, &Default::default());
            if let Some(p) = report {
                write_report(&r, &p)?;
            }
            print!("{r}");
            Ok(())
        }
        Command::Diag { what: Diag::Rays { checkpoint, scenes, out } } => {
            cmd_diag_rays(&checkpoint, scenes.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::InvalidConfig(_)) => ExitCode::from(2),
                Some(Error::DivergedLoss { .. }) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

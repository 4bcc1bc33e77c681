use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vtinsert::bench::{
    bench_ablation_ft, bench_tactile, check_collection, check_ft, check_main, check_modality, check_tactile, emit_report,
    episode_start, Check,
};
use vtinsert::collect::{visit_dataset, AlignmentParams, InsertionParams};
use vtinsert::exec::{run_insertion, ExecParams, LearnedTactile, LearnedVision, Mode};
use vtinsert::learn::Model;
use vtinsert::pipeline::{
    push_vision, run_alignment_collection, run_demo, run_insertion_collection, run_main_suites, run_modality_suite, run_pipeline,
    train_tactile, train_vision, vision_spec, wide_demo, Models, PipelineConfig, VisionSets, MEDIAN_N,
};
use vtinsert::refine::{refine_trials, RefineGrid};
use vtinsert::scene::{default_scene, SceneConfig};
use vtinsert::{Error, Pose, Result};

#[derive(Parser)]
#[command(name = "vtinsert", version, about = "Visuo-tactile insertion: data collection, training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scene file (key = value lines); the default scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect the tactile alignment dataset into <out>/alignment.
    CollectAlign(Common),
    /// Collect the camera insertion dataset into <out>/insertion.
    CollectInsert(Common),
    /// Train the tactile policy from an alignment dataset.
    TrainTac {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to <out>/alignment.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
    /// Train both insertion policies from an insertion dataset.
    TrainVis {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to <out>/insertion.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
    /// Refine perturbed demonstrations and find the unplug height.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Run one insertion episode.
    Run {
        #[command(flatten)]
        common: Common,
        /// Directory with tactile/, vision/ and vision_no_rotation/.
        #[arg(long)]
        models: PathBuf,
        /// Grasp offset as x,z,beta in meters and radians.
        #[arg(long, default_value = "0,-0.004,0", allow_hyphen_values = true)]
        grasp: String,
        /// Write the per-step trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Main suite and tactile accuracy; runs the whole pipeline when no
    /// models are given.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Force-torque refinement ablation (ZA, ZAWF, ZAWFG).
    AblateFt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Sensing-modality ablation under target noise.
    AblateModality {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
    },
}

fn load_scene(c: &Common) -> Result<SceneConfig> {
    match &c.scene {
        Some(p) => SceneConfig::load(p),
        None => Ok(default_scene()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    checks.iter().all(|c| c.pass)
}

fn parse_grasp(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("grasp '{s}': {e}"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [x, z, beta] => Ok(Pose::new(x, 0.0, z, beta, 0.0)),
        _ => Err(Error::Parse(format!("grasp '{s}': expected x,z,beta"))),
    }
}

fn refine_cmd(c: &Common, trials: usize) -> Result<bool> {
    let scene = load_scene(c)?;
    let results = refine_trials(&scene, c.seed, trials, &RefineGrid::default())?;
    let mut reduced = 0;
    let mut rows = Vec::new();
    for r in &results {
        let ok = r.before.is_none_or(|b| r.outcome.objective <= b);
        reduced += ok as usize;
        rows.push(json!({
            "perturbation": [r.perturbation.x(), r.perturbation.y(), r.perturbation.gamma()],
            "before": r.before,
            "after": r.outcome.objective,
            "delta": [r.outcome.delta.x(), r.outcome.delta.y(), r.outcome.delta.gamma()],
        }));
    }
    let demo = run_demo(&scene)?;
    let z = demo.z_min.z_min;
    let d = scene.insertion_depth;
    let step = vtinsert::refine::ZminParams::default().delta_z;
    write_json(&c.out.join("refine.json"), &json!({ "trials": rows, "z_min": z, "t_refined": demo.t_refined.to_string() }))?;
    Ok(report(&[
        Check { name: "refinement".into(), pass: reduced == results.len(), detail: format!("{reduced}/{} not worse than the demonstration", results.len()) },
        Check {
            name: "z_min".into(),
            pass: z >= d - 1e-12 && z <= d + 2.0 * step + 1e-12,
            detail: format!("{:.4} mm (range [{:.1}, {:.1}] mm)", z * 1e3, d * 1e3, (d + 2.0 * step) * 1e3),
        },
    ]))
}

fn collect_align_cmd(c: &Common) -> Result<bool> {
    let scene = load_scene(c)?;
    let demo = run_demo(&scene)?;
    let dir = c.out.join("alignment");
    let (recs, digest) = run_alignment_collection(&scene, &demo.t_refined, c.seed, &AlignmentParams::default(), Some(&dir))?;
    println!("{} records in {} (digest {digest})", recs.len(), dir.display());
    // a guard trip aborts alignment collection with an error
    Ok(true)
}

fn collect_insert_cmd(c: &Common) -> Result<bool> {
    let scene = load_scene(c)?;
    let demo = run_demo(&scene)?;
    let dir = c.out.join("insertion");
    let (_, summary, digest) =
        run_insertion_collection(&scene, &demo.t_refined, demo.z_min.z_min, c.seed, &InsertionParams::default(), Some(&dir))?;
    println!("{} records from {} grasps in {} (digest {digest})", summary.records, summary.grasps, dir.display());
    Ok(report(&[check_collection(&scene, &summary.safety)]))
}

fn train_tac_cmd(c: &Common, data: Option<PathBuf>, epochs: usize) -> Result<bool> {
    let scene = load_scene(c)?;
    let data = data.unwrap_or_else(|| c.out.join("alignment"));
    let mut pairs = Vec::new();
    visit_dataset(&data, Some(&scene.hash()), &mut |r| {
        pairs.push((r.image, r.label));
        Ok(())
    })?;
    let (model, rep) = train_tactile(&scene, &pairs, c.seed, epochs)?;
    let dir = c.out.join("models").join("tactile");
    model.save(&dir)?;
    println!("trained on {} records, val mse {:.5}, saved to {}", pairs.len(), rep.val_mse, dir.display());
    Ok(report(&[check_tactile(&bench_tactile(&scene, &model, c.seed, MEDIAN_N)?)]))
}

fn train_vis_cmd(c: &Common, data: Option<PathBuf>, epochs: usize) -> Result<bool> {
    let scene = load_scene(c)?;
    let data = data.unwrap_or_else(|| c.out.join("insertion"));
    let spec = vision_spec(&scene, 3);
    let mut sets = VisionSets {
        full: vtinsert::learn::TrainSet::new(spec.input_dim()),
        no_rotation: vtinsert::learn::TrainSet::new(spec.input_dim()),
    };
    visit_dataset(&data, Some(&scene.hash()), &mut |r| push_vision(&mut sets, &spec, &r))?;
    let (full, r_full) = train_vision(&scene, &sets.full, 3, c.seed, epochs)?;
    let (norot, r_norot) = train_vision(&scene, &sets.no_rotation, 1, c.seed, epochs)?;
    let dir = c.out.join("models");
    full.save(&dir.join("vision"))?;
    norot.save(&dir.join("vision_no_rotation"))?;
    let finite = r_full.val_mse.is_finite() && r_norot.val_mse.is_finite();
    Ok(report(&[Check {
        name: "vision training".into(),
        pass: finite,
        detail: format!("val mse {:.5} (all data), {:.5} (no rotation); saved to {}", r_full.val_mse, r_norot.val_mse, dir.display()),
    }]))
}

fn run_cmd(c: &Common, models: &Path, grasp: &str, trace: Option<PathBuf>) -> Result<bool> {
    let scene = load_scene(c)?;
    let g = parse_grasp(grasp)?;
    let tac = Model::load(&models.join("tactile"))?;
    let vis = Model::load(&models.join("vision"))?;
    let demo = run_demo(&scene)?;
    let z = demo.z_min.z_min;
    let mut state = episode_start(&demo.t_refined, z, &g);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let r = run_insertion(
        &scene,
        &mut state,
        &LearnedTactile { model: &tac, median_n: MEDIAN_N },
        &LearnedVision { model: &vis },
        &demo.t_refined,
        z,
        &ExecParams::default(),
        Mode::Combined,
        &mut rng,
    )?;
    println!("success = {}", r.success);
    println!("attempts = {}", r.attempts);
    println!("termination = {}", r.termination.as_str());
    println!("final_distance = {}", r.final_distance);
    println!("peak_force = {}", r.peak_force);
    if let Some(o) = r.estimated_offset {
        println!("estimated_offset = {},{},{}", o[0], o[1], o[2]);
    }
    if let Some(path) = trace {
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Dataset(e.to_string());
        w.write_record(["attempt", "x", "y", "z", "beta", "gamma", "dx", "dy", "dbeta", "fz"]).map_err(err)?;
        for s in &r.trace {
            let p = s.pose;
            let vals = [p.x(), p.y(), p.z(), p.beta(), p.gamma(), s.action[0], s.action[1], s.action[2], s.fz];
            let mut rec = vec![s.attempt.to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(r.success)
}

fn bench_cmd(c: &Common, models: Option<PathBuf>) -> Result<bool> {
    let scene = load_scene(c)?;
    match models {
        Some(dir) => {
            let models = Models::load(&dir)?;
            let demo = run_demo(&scene)?;
            let rep = run_main_suites(&scene, &models, &demo, c.seed, &ExecParams::default())?;
            emit_report(&rep, &c.out.join("report"))?;
            let mut checks = vec![check_tactile(rep.tactile.as_ref().expect("main suites report tactile accuracy"))];
            checks.extend(check_main(&rep.rows));
            Ok(report(&checks))
        }
        None => {
            let cfg = PipelineConfig { seed: c.seed, out: Some(c.out.clone()), ..PipelineConfig::default() };
            let out = run_pipeline(&scene, &cfg)?;
            for (name, secs) in &out.timings {
                println!("{name}: {secs:.1} s");
            }
            let rep = &out.report;
            let mut checks = vec![check_collection(&scene, &out.insertion.safety)];
            checks.push(check_tactile(rep.tactile.as_ref().expect("pipeline reports tactile accuracy")));
            checks.extend(check_main(&rep.rows));
            checks.extend(check_ft(rep.ft.as_ref().expect("pipeline runs the ablation"), scene.receptacle_clearance));
            checks.extend(check_modality(&rep.rows));
            Ok(report(&checks))
        }
    }
}

fn ablate_ft_cmd(c: &Common, trials: usize) -> Result<bool> {
    let scene = load_scene(c)?;
    let demo = run_demo(&scene)?;
    let table = bench_ablation_ft(&scene, c.seed, trials, &[wide_demo(&scene)], demo.z_min.z_min, &RefineGrid::default())?;
    for t in &table.trials {
        println!(
            "{:<6} demo dx {:+.3} mm dy {:+.3} mm tilt {:+.3} deg: {}/{}",
            t.mode.as_str(),
            t.demo.dx * 1e3,
            t.demo.dy * 1e3,
            t.demo.tilt.to_degrees(),
            t.successes,
            t.total
        );
    }
    let v = serde_json::to_value(&table).map_err(|e| Error::Dataset(e.to_string()))?;
    write_json(&c.out.join("ablate_ft.json"), &v)?;
    Ok(report(&check_ft(&table, scene.receptacle_clearance)))
}

fn ablate_modality_cmd(c: &Common, models: &Path) -> Result<bool> {
    let scene = load_scene(c)?;
    let models = Models::load(models)?;
    let demo = run_demo(&scene)?;
    let cfg = PipelineConfig { seed: c.seed, vision_all_data_arm: true, ..PipelineConfig::default() };
    let rows = run_modality_suite(&scene, &models, &demo, &cfg)?;
    let rep = vtinsert::bench::BenchReport { seed: c.seed, scene_hash: scene.hash(), rows, ..Default::default() };
    for a in rep.aggregates() {
        println!("{}: {}/{}", a.arm, a.successes, a.total);
    }
    emit_report(&rep, &c.out.join("modality"))?;
    Ok(report(&check_modality(&rep.rows)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::CollectAlign(c) => collect_align_cmd(&c),
        Cmd::CollectInsert(c) => collect_insert_cmd(&c),
        Cmd::TrainTac { common, data, epochs } => train_tac_cmd(&common, data, epochs),
        Cmd::TrainVis { common, data, epochs } => train_vis_cmd(&common, data, epochs),
        Cmd::Refine { common, trials } => refine_cmd(&common, trials),
        Cmd::Run { common, models, grasp, trace } => run_cmd(&common, &models, &grasp, trace),
        Cmd::Bench { common, models } => bench_cmd(&common, models),
        Cmd::AblateFt { common, trials } => ablate_ft_cmd(&common, trials),
        Cmd::AblateModality { common, models } => ablate_modality_cmd(&common, &models),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use diffphys::identification::{
    evaluate, fit, FitConfig, FitProblem, LearnableParams, LossKind, ParamKind, PixelScene, PixelSequence,
};
use diffphys::render::{render_video, scenario_assets, BlurSchedule, Camera, Frame, RenderAssets};
use diffphys::scenarios::{has_block_contact, simulate as simulate_one, Dataset, ParamsOverride, ScenarioConfig, ScenarioKind, Trajectory};
use diffphys::world::rollout;

use crate::config::Resolver;
use crate::plot::convergence_plot;
use crate::{EvalArgs, GenerateArgs, IdentifyArgs, PredictArgs, SimulateArgs};

/// 3 for numerical failures, 2 for everything else (usage, I/O).
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<diffphys::Error>() {
            return match err {
                diffphys::Error::Solver { .. }
                | diffphys::Error::Divergence { .. }
                | diffphys::Error::Regime(_)
                | diffphys::Error::Geometry(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn path_string(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| diffphys::Error::io(dir, e))?;
    Ok(())
}

fn scenario_config(r: &mut Resolver, scenario: Option<String>, seed: Option<u64>, steps: Option<usize>, h: Option<f64>) -> Result<ScenarioConfig> {
    let kind: ScenarioKind = r.get("scenario", scenario, "push".to_string())?.parse()?;
    let mut cfg = ScenarioConfig::for_kind(kind);
    cfg.seed = r.seed(seed)?;
    cfg.n_steps = r.get("steps", steps, cfg.n_steps)?;
    cfg.h = r.get("h", h, cfg.h)?;
    Ok(cfg)
}

pub fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let mut r = Resolver::new("generate", a.common.config.as_deref())?;
    let mut cfg = scenario_config(&mut r, a.scenario, a.common.seed, a.steps, a.h)?;
    let n = r.get("n", a.n, 50usize)?;
    let lo = r.get("force_min", a.force_min, cfg.force_range[0])?;
    let hi = r.get("force_max", a.force_max, cfg.force_range[1])?;
    cfg.force_range = [lo, hi];
    cfg.upstream_start = r.get("upstream", a.upstream, false)?;
    let out = PathBuf::from(r.get("out", path_string(a.out), "data".to_string())?);
    cfg.validate()?;

    create_dir(&out)?;
    let ds = Dataset::generate(&cfg, n)?;
    ds.save(&out.join("dataset.json"))?;
    if cfg.kind != ScenarioKind::Incline {
        let (assets, sprites) = scenario_assets(cfg.bodies.len(), cfg.bodies[0].size(), &Camera::default());
        assets.save(&out.join("assets"), &sprites)?;
    }
    r.save(&out.join("config.ini"))?;
    println!("wrote {} {} trajectories of {} states to {}", n, cfg.kind, cfg.n_steps, out.display());
    if cfg.kind == ScenarioKind::Collide {
        let hits = ds.trajectories.iter().filter(|t| has_block_contact(&cfg, t)).count();
        println!("block contact in {hits}/{n} trajectories");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let mut r = Resolver::new("simulate", a.common.config.as_deref())?;
    let cfg = scenario_config(&mut r, a.scenario, a.common.seed, a.steps, a.h)?;
    let index = r.get("index", a.index, 0u64)?;
    let mass = r.opt("mass", a.mass)?;
    let mu = r.opt("mu", a.mu)?;
    let out = PathBuf::from(r.get("out", path_string(a.out), "trajectory.json".to_string())?);
    let frames = r.opt("frames", path_string(a.frames))?.map(PathBuf::from);
    let stride = r.get("stride", a.stride, 1usize)?;
    cfg.validate()?;

    let world = cfg.world();
    let mut masses = world.masses();
    let mut friction = world.friction.values();
    if let Some(m) = mass {
        masses[0] = m;
    }
    if let Some(m) = mu {
        friction.iter_mut().for_each(|f| *f = m);
    }
    let over = ParamsOverride { masses, friction };
    let traj = simulate_one(&cfg, index, Some(&over))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text = serde_json::to_string(&traj)?;
    std::fs::write(&out, text).map_err(|e| diffphys::Error::io(&out, e))?;
    if let Some(dir) = frames {
        if cfg.kind == ScenarioKind::Incline {
            bail!("frames cannot be rendered for the incline scenario: the renderer draws planar poses only");
        }
        create_dir(&dir)?;
        let (assets, sprites) = scenario_assets(cfg.bodies.len(), cfg.bodies[0].size(), &Camera::default());
        let poses: Vec<_> = traj.states.iter().map(|s| s.poses.clone()).collect();
        let video = render_video(&poses, &sprites, &assets.background_frame(), &assets.camera, stride)?;
        for (k, f) in video.iter().enumerate() {
            f.save_png(&dir.join(format!("frame_{:04}.png", k * stride)))?;
        }
        r.save(&dir.join("config.ini"))?;
    }
    let cfg_path = out.with_extension("ini");
    r.save(&cfg_path)?;
    println!("wrote {} states to {}", traj.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(&dir.join("dataset.json")).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_scene(dir: &Path, ds: &Dataset) -> Result<PixelScene> {
    if ds.config.kind == ScenarioKind::Incline {
        bail!("the incline scenario cannot be rendered: the renderer draws planar poses only");
    }
    let assets_dir = dir.join("assets");
    let (assets, sprites) = if assets_dir.join("assets.json").exists() {
        RenderAssets::load(&assets_dir)?
    } else {
        scenario_assets(ds.bodies.len(), ds.bodies[0].params.size(), &Camera::default())
    };
    if sprites.len() != ds.bodies.len() {
        return Err(diffphys::Error::RenderMismatch(format!("{} sprites for {} bodies", sprites.len(), ds.bodies.len())).into());
    }
    Ok(PixelScene::from_assets(&assets, sprites))
}

fn load_params(path: Option<&Path>, ds: &Dataset) -> Result<LearnableParams> {
    let mut p = LearnableParams::from_world(&ds.world());
    if let Some(path) = path {
        let path = if path.is_dir() { path.join("params.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| diffphys::Error::io(&path, e))?;
        let values: BTreeMap<String, f64> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for (name, v) in values {
            let kind = LearnableParams::kind_of(&name).with_context(|| format!("unknown parameter '{name}'"))?;
            if p.position(kind).is_none() {
                bail!("parameter '{name}' does not exist in this dataset");
            }
            p.set_value(kind, v);
        }
    }
    Ok(p)
}

fn free_kinds(free: &str, params: &LearnableParams) -> Result<Vec<ParamKind>> {
    let frictions = params.kinds.iter().copied().filter(|k| matches!(k, ParamKind::Friction(_)));
    Ok(match free {
        "mass" => vec![ParamKind::Mass(0)],
        "friction" => frictions.collect(),
        "both" => std::iter::once(ParamKind::Mass(0)).chain(frictions).collect(),
        other => bail!("--free must be mass, friction or both (got '{other}')"),
    })
}

pub fn identify(a: IdentifyArgs) -> Result<ExitCode> {
    let mut r = Resolver::new("identify", a.common.config.as_deref())?;
    let data = PathBuf::from(r.required("data", path_string(a.data))?);
    let expected = r.opt("scenario", a.scenario)?;
    let loss: LossKind = r.get("loss", a.loss, "sysid".to_string())?.parse()?;
    let free = r.get("free", a.free, "friction".to_string())?;
    let seed = r.seed(a.common.seed)?;
    let defaults = FitConfig::default();
    let blur_default = BlurSchedule::default();
    let cfg = FitConfig {
        epochs: r.get("epochs", a.epochs, defaults.epochs)?,
        lr_params: r.get("lr", a.lr, defaults.lr_params)?,
        lr_init: r.get("lr_init", a.lr_init, defaults.lr_init)?,
        alpha: r.get("alpha", a.alpha, defaults.alpha)?,
        blur: BlurSchedule {
            start_kernel: r.get("blur_start_kernel", a.blur_start_kernel, blur_default.start_kernel)?,
            start_sigma: r.get("blur_start_sigma", a.blur_start_sigma, blur_default.start_sigma)?,
            end_kernel: r.get("blur_end_kernel", a.blur_end_kernel, blur_default.end_kernel)?,
            end_sigma: r.get("blur_end_sigma", a.blur_end_sigma, blur_default.end_sigma)?,
        },
        loss_tol: r.opt("loss_tol", a.loss_tol)?,
        ..defaults
    };
    let init_factor = r.get("init_factor", a.init_factor, 2.0)?;
    let mass_init = r.opt("mass_init", a.mass_init)?;
    let mu_init = r.opt("mu_init", a.mu_init)?;
    let frame_stride = r.get("frame_stride", a.frame_stride, 5usize)?;
    let out = PathBuf::from(r.get("out", path_string(a.out), "fit".to_string())?);

    let ds = load_dataset(&data)?;
    let kind = ds.config.kind;
    if let Some(s) = expected {
        let want: ScenarioKind = s.parse()?;
        if want != kind {
            bail!("dataset holds the {kind} scenario, not {want}");
        }
    }
    if loss == LossKind::Pixel && kind == ScenarioKind::Incline {
        bail!("the pixel loss is not supported for the incline scenario: the renderer draws planar poses only");
    }
    let world = ds.world();
    let truth = LearnableParams::from_world(&world);
    let mut params = truth.clone();
    let kinds = free_kinds(&free, &params)?;
    params.free_only(&kinds);
    for k in &kinds {
        let start = match k {
            ParamKind::Mass(_) => mass_init,
            ParamKind::Friction(_) => mu_init,
        };
        let v = start.unwrap_or_else(|| truth.value(*k).expect("free entry exists") * init_factor);
        params.set_value(*k, v);
    }

    let train: Vec<&Trajectory> = ds.train().collect();
    let test: Vec<&Trajectory> = ds.test().collect();
    let pixels = if loss == LossKind::Pixel {
        let scene = load_scene(&data, &ds)?;
        let seqs = train.iter().map(|t| PixelSequence::from_trajectory(t, &scene, frame_stride)).collect::<diffphys::Result<Vec<_>>>()?;
        Some((scene, seqs))
    } else {
        None
    };
    let problem = FitProblem {
        world: world.clone(),
        train,
        test,
        object_size: ds.bodies[0].params.size(),
        truth: Some(truth.values()),
        pixels,
    };
    create_dir(&out)?;
    r.save(&out.join("config.ini"))?;
    let report = fit(loss, &problem, params.clone(), None, &cfg)?;

    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    let fitted: BTreeMap<String, f64> = report.names.iter().cloned().zip(report.final_params.iter().copied()).collect();
    let path = out.join("params.json");
    std::fs::write(&path, serde_json::to_string_pretty(&fitted)?).map_err(|e| diffphys::Error::io(&path, e))?;
    let free_idx: Vec<usize> = (0..report.names.len()).filter(|i| report.free[*i]).collect();
    let series: Vec<Vec<f64>> = free_idx.iter().map(|&i| report.epochs.iter().map(|e| e.params[i]).collect()).collect();
    let truth_vals: Vec<Option<f64>> = free_idx.iter().map(|&i| report.truth.as_ref().map(|t| t[i])).collect();
    let plot = out.join("convergence.png");
    convergence_plot(&series, &truth_vals).save_with_format(&plot, image::ImageFormat::Png).map_err(diffphys::Error::from)?;

    println!("{} fit on {} ({} epochs), seed {seed}", loss, kind, report.epochs.len() - 1);
    for &i in &free_idx {
        let rel = report.rel_errors.as_ref().map_or(String::new(), |r| format!(" (rel. error {:.3}%)", 100.0 * r[i]));
        println!("  {} = {:.6}{rel}", report.names[i], report.final_params[i]);
    }
    println!("  loss {:.6e}, test position error {:.3}% of object size, rotation error {:.3} deg", report.final_loss(), 100.0 * report.pos_err, report.rot_err);
    if let Some(o) = &report.observability {
        if o.observable {
            println!("  free parameters are jointly observable (curvature ratio {:.3e})", o.ratio);
        } else {
            println!("  free parameters are NOT jointly observable: flat loss direction (curvature ratio {:.3e})", o.ratio);
        }
    }
    if !report.skipped.is_empty() {
        println!("  skipped trajectories: {:?}", report.skipped);
    }
    if report.diverged {
        eprintln!("error: fit diverged; report written to {}", out.display());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn predict(a: PredictArgs) -> Result<ExitCode> {
    let mut r = Resolver::new("predict", a.common.config.as_deref())?;
    let data = PathBuf::from(r.required("data", path_string(a.data))?);
    let params_path = r.opt("params", path_string(a.params))?.map(PathBuf::from);
    let traj = r.opt("traj", a.traj)?;
    let stride = r.get("stride", a.stride, 30usize)?;
    let out = PathBuf::from(r.get("out", path_string(a.out), "predict".to_string())?);
    r.seed(a.common.seed)?;

    let ds = load_dataset(&data)?;
    let scene = load_scene(&data, &ds)?;
    let params = load_params(params_path.as_deref(), &ds)?;
    let idx = traj.or_else(|| ds.split.test.first().copied()).unwrap_or(0);
    let gt = ds.trajectories.get(idx).with_context(|| format!("no trajectory {idx}"))?;
    let states = rollout(&params.world(&ds.world()), &gt.states[0], gt.step_forces())?;

    create_dir(&out)?;
    let mut w = csv::Writer::from_path(out.join("pixel_error.csv")).map_err(diffphys::Error::from)?;
    w.write_record(["frame", "state", "mean_abs_error"]).map_err(diffphys::Error::from)?;
    for (k, t) in (0..states.len()).step_by(stride.max(1)).enumerate() {
        let f_gt = scene.render(&gt.states[t].poses)?;
        let f_pred = scene.render(&states[t].poses)?;
        let diff: Frame = f_gt.abs_diff(&f_pred);
        f_gt.save_png(&out.join(format!("gt_{t:04}.png")))?;
        f_pred.save_png(&out.join(format!("pred_{t:04}.png")))?;
        diff.save_png(&out.join(format!("diff_{t:04}.png")))?;
        w.write_record([k.to_string(), t.to_string(), diff.mean().to_string()]).map_err(diffphys::Error::from)?;
    }
    w.flush().map_err(|e| diffphys::Error::io(out.join("pixel_error.csv"), e))?;
    r.save(&out.join("config.ini"))?;
    println!("rendered trajectory {idx} to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut r = Resolver::new("eval", a.common.config.as_deref())?;
    let data = PathBuf::from(r.required("data", path_string(a.data))?);
    let params_path = r.opt("params", path_string(a.params))?.map(PathBuf::from);
    let out = PathBuf::from(r.get("out", path_string(a.out), "metrics.csv".to_string())?);
    r.seed(a.common.seed)?;

    let ds = load_dataset(&data)?;
    let params = load_params(params_path.as_deref(), &ds)?;
    let world = params.world(&ds.world());
    let size = ds.bodies[0].params.size();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(&out).map_err(diffphys::Error::from)?;
    w.write_record(["scenario", "split", "trajectories", "pos_err_pct", "rot_err_deg"]).map_err(diffphys::Error::from)?;
    for (split, trajs) in [("test", ds.test().collect::<Vec<_>>()), ("train", ds.train().collect())] {
        let (pos, rot) = evaluate(&world, &trajs, size);
        w.write_record([ds.config.kind.to_string(), split.to_string(), trajs.len().to_string(), (100.0 * pos).to_string(), rot.to_string()])
            .map_err(diffphys::Error::from)?;
        println!("{split}: position error {:.4}% of object size, rotation error {:.4} deg", 100.0 * pos, rot);
    }
    w.flush().map_err(|e| diffphys::Error::io(&out, e))?;
    r.save(&out.with_extension("ini"))?;
    Ok(ExitCode::SUCCESS)
}

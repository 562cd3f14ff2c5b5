use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use koopman_sysid::dynamics::{build_snapshots, generate_trajectories, DatasetManifest, State, Trajectory};
use koopman_sysid::eval::{compare, mae, pendulum_rollout};
use koopman_sysid::koopman::{supervised_dkrc, Dictionary, FeatureMode, SystemFile};
use koopman_sysid::neuralnet::ModelFile;
use koopman_sysid::spectrogram::{mel_spectrogram, trajectory_images, SignalChannel, TrajectoryImages};
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, Vec<Trajectory>), CliError> {
    let manifest = DatasetManifest::load(path).map_err(CliError::input)?;
    let trajs = manifest.load_trajectories(path).map_err(CliError::input)?;
    if trajs.is_empty() {
        return Err(CliError::Usage(format!("{} lists no trajectories", path.display())));
    }
    Ok((manifest, trajs))
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    if cfg.dynamics.n_trajectories == 0 {
        return Err(CliError::Usage("dynamics.n_trajectories must be at least 1".into()));
    }
    if cfg.dynamics.steps == 0 {
        return Err(CliError::Usage("dynamics.steps must be at least 1".into()));
    }
    let trajs = generate_trajectories(&cfg.dynamics, cfg.seed).map_err(CliError::input)?;
    create_dir(out)?;
    let width = (trajs.len() - 1).to_string().len().max(3);
    let mut files = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        let name = format!("traj_{i:0width$}.csv");
        t.write_csv(&out.join(&name)).map_err(CliError::input)?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        version: DatasetManifest::VERSION,
        files,
        params: cfg.dynamics.params,
        policy: cfg.dynamics.policy.clone(),
        seed: cfg.seed,
        steps_per_trajectory: cfg.dynamics.steps,
        config_hash: Some(cfg.hash()),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} trajectories to {}", manifest.files.len(), out.display());
    Ok(())
}

pub fn spectrogram(cfg: &PipelineConfig, manifest_path: &Path, out: &Path) -> Result<(), CliError> {
    let (_, trajs) = load_manifest(manifest_path)?;
    create_dir(out)?;
    let channels: &[(SignalChannel, &str)] = match cfg.spectrogram.channel {
        SignalChannel::Theta => &[(SignalChannel::Theta, "theta")],
        SignalChannel::ThetaDot => &[(SignalChannel::ThetaDot, "thetadot")],
        SignalChannel::Both => &[(SignalChannel::Theta, "theta"), (SignalChannel::ThetaDot, "thetadot")],
    };
    let mut files = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        for (ch, label) in channels {
            let signal = match ch {
                SignalChannel::ThetaDot => t.theta_dots(),
                _ => t.thetas(),
            };
            let spec = mel_spectrogram(&signal, &cfg.spectrogram.spectrogram).map_err(CliError::input)?;
            let csv = format!("mel_{i:03}_{label}.csv");
            let sidecar = format!("mel_{i:03}_{label}.json");
            spec.export(&out.join(&csv), &out.join(&sidecar)).map_err(CliError::input)?;
            files.push(csv);
            files.push(sidecar);
        }
        let images = trajectory_images(&t.thetas(), &t.theta_dots(), &cfg.spectrogram).map_err(CliError::input)?;
        if let Some(last) = images.images.last() {
            let pgm = format!("image_{i:03}_last.pgm");
            write(&out.join(&pgm), &last.to_pgm())?;
            files.push(pgm);
        }
    }
    write_json(
        &out.join("spectrograms.json"),
        &json!({ "config_hash": cfg.hash(), "image_config": cfg.spectrogram, "files": files }),
    )?;
    println!("wrote {} spectrogram files to {}", files.len(), out.display());
    Ok(())
}

pub fn identify(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    mode: FeatureMode,
    allow_inadmissible: bool,
    out: &Path,
) -> Result<(), CliError> {
    let (_, trajs) = load_manifest(manifest_path)?;
    let snapshots = build_snapshots(&trajs).map_err(CliError::input)?;
    let images: Option<Vec<TrajectoryImages>> = match mode {
        FeatureMode::RawOnly => None,
        FeatureMode::RawLatent => Some(
            trajs
                .iter()
                .map(|t| trajectory_images(&t.thetas(), &t.theta_dots(), &cfg.spectrogram))
                .collect::<Result<_, _>>()
                .map_err(CliError::input)?,
        ),
    };
    let dkrc = cfg.supervised(mode);
    let res = supervised_dkrc(&snapshots, images.as_deref(), &dkrc).map_err(CliError::from_core)?;
    create_dir(out)?;
    let hash = cfg.hash();

    let mut report = res.report.clone();
    report
        .metadata
        .insert("inadmissible_allowed".into(), json!(allow_inadmissible && !report.admissible));
    report.metadata.insert("config_hash".into(), json!(hash));

    let mut file = SystemFile::new(&res.system, &res.dictionary, &report);
    file.config_hash = Some(hash.clone());
    file.save(&out.join("system.json")).map_err(CliError::input)?;
    res.system.export_csv(out).map_err(CliError::input)?;

    if let Dictionary::Encoder(enc) = &res.dictionary {
        write_json(&out.join("ae_model.json"), &ModelFile::from_network(&enc.net, Some(&dkrc.ae)))?;
        if let Some(feat) = &enc.image {
            write_json(&out.join("cae_model.json"), &ModelFile::from_network(&feat.cae, Some(&dkrc.cae)))?;
        }
    }
    write_json(
        &out.join("report.json"),
        &json!({
            "config_hash": hash,
            "mode": mode,
            "report": report,
            "candidates": res.candidates,
            "ae_training": res.ae_report,
            "cae_training": res.cae_report,
        }),
    )?;
    println!(
        "N = {}, h1 max-abs = {:.3e}, h1 rms = {:.3e}, rank(Q) = {}, admissible = {}",
        report.lift_dim, report.h1.max_abs, report.h1.frobenius_rms, report.ctrb_rank, report.admissible
    );
    if !report.admissible && !allow_inadmissible {
        return Err(CliError::Inadmissible(format!(
            "no admissible lifting up to N = {}; best-effort system written to {}",
            dkrc.n_max,
            out.display()
        )));
    }
    Ok(())
}

fn read_controls(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read controls {}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "torque")
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad torque value '{l}' in {}", path.display())))
        })
        .collect()
}

pub struct RolloutArgs {
    pub system: PathBuf,
    pub theta: f64,
    pub theta_dot: f64,
    pub horizon: Option<usize>,
    pub controls: Option<PathBuf>,
}

pub fn rollout(cfg: &PipelineConfig, args: &RolloutArgs, out: &Path) -> Result<(), CliError> {
    let file = SystemFile::load(&args.system).map_err(CliError::input)?;
    let sys = file.system().map_err(CliError::input)?;
    let torques = match (&args.controls, args.horizon) {
        (Some(p), h) => {
            let mut t = read_controls(p)?;
            if let Some(h) = h {
                if t.len() < h {
                    return Err(CliError::Usage(format!("{} holds {} torques, horizon is {h}", p.display(), t.len())));
                }
                t.truncate(h);
            }
            t
        }
        (None, h) => vec![0.0; h.unwrap_or(cfg.eval.horizon)],
    };
    let x0 = State::new(args.theta, args.theta_dot);
    let result =
        pendulum_rollout(&sys, &file.dictionary, &cfg.dynamics.params, x0, &torques).map_err(CliError::from_core)?;
    create_dir(out)?;
    result.write_plot_csv(&out.join("rollout.csv")).map_err(CliError::input)?;
    let m = mae(&result, cfg.eval.wrap_theta);
    write_json(
        &out.join("rollout.json"),
        &json!({
            "config_hash": cfg.hash(),
            "system_config_hash": file.config_hash,
            "x0": [args.theta, args.theta_dot],
            "horizon": torques.len(),
            "wrap_theta": cfg.eval.wrap_theta,
            "mae_theta": m[0],
            "mae_theta_dot": m[1],
        }),
    )?;
    println!("horizon {}: MAE theta = {:.4}, theta_dot = {:.4}", torques.len(), m[0], m[1]);
    Ok(())
}

pub fn compare_cmd(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let cc = cfg.compare();
    if cc.dims.is_empty() || cc.modes.is_empty() || cc.seeds.is_empty() {
        return Err(CliError::Usage("eval.dims, eval.modes and eval.seeds must be nonempty".into()));
    }
    let table = compare(&cc).map_err(CliError::from_core)?;
    create_dir(out)?;
    let hash = cfg.hash();
    write(&out.join("table.csv"), &table.to_csv())?;
    write_json(&out.join("table.json"), &json!({ "config_hash": hash, "table": table }))?;
    print!("{}", table.to_csv());
    if table.rows.iter().all(|r| r.succeeded() == 0) {
        return Err(CliError::Numeric("every comparison cell failed".into()));
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not JSON: {e}", path.display())))?;
    let pretty = serde_json::to_string_pretty(&value).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{pretty}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Usage(format!("cannot write output: {e}"))),
        _ => Ok(()),
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use robustbf::bgnn::pipeline_forward;
use robustbf::channel::{dbm_to_mw, derive_rng, gen_errors_for, stream, Dataset};
use robustbf::metrics::{daqe, min_rates};
use robustbf::powermin::{bisect_power, feasibility_rate, BisectConfig};
use robustbf::training::{evaluate, init_state, train_from, Checkpoint, Mode, Model, TrainConfig};

use crate::config::{parse_grid, RunConfig};
use crate::error::CliError;

/// Stream tag for the fresh errors drawn by `cdf`.
const CDF_STREAM: u64 = 101;

pub fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset, CliError> {
    let data = match path {
        Some(p) => Dataset::load(p).map_err(|e| CliError::io(p.display(), e))?,
        None => Dataset::generate(&cfg.system, cfg.seed, cfg.data.train, cfg.data.validation, cfg.data.test)?,
    };
    let (n, k) = (data.config.n_antennas, data.config.n_users);
    if (n, k) != (cfg.system.n_antennas, cfg.system.n_users) {
        return Err(CliError::Config(format!(
            "dataset is {n}x{k} but the config expects {}x{}",
            cfg.system.n_antennas, cfg.system.n_users
        )));
    }
    if data.test.is_empty() {
        return Err(CliError::Config("dataset has no test channels".into()));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::io(path.display(), "checkpoint not found"));
    }
    Ok(Checkpoint::load(path)?)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Writes the config comment line, a header row and `rows` to `out`, or to
/// stdout when `out` is `None`.
fn write_csv(cfg: &RunConfig, out: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut buf = cfg.csv_header().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let err = |e: csv::Error| CliError::io("csv", e);
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io("csv", e))?;
    }
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
            }
            fs::write(p, &buf).map_err(|e| CliError::io(p.display(), e))
        }
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::io("stdout", e)),
    }
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg, None)?;
    data.save(out).map_err(|e| CliError::io(out.display(), e))?;
    println!(
        "wrote {}: N={} K={} train={} validation={} test={} config_hash={} seed={}",
        out.display(),
        data.config.n_antennas,
        data.config.n_users,
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        cfg.hash(),
        cfg.seed
    );
    Ok(())
}

pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

pub fn train_paths(out_dir: &Path, mode: Mode) -> TrainPaths {
    TrainPaths {
        checkpoint: out_dir.join(format!("{mode}.ckpt.json")),
        history: out_dir.join(format!("{mode}.history.csv")),
    }
}

pub fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    mode: Option<Mode>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainPaths, CliError> {
    let dataset = load_data(cfg, data)?;
    let mut tcfg: TrainConfig = cfg.train.clone();
    if let Some(m) = mode {
        tcfg.mode = m;
    }
    let state = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.mode != tcfg.mode {
                return Err(CliError::Config(format!("checkpoint mode {} differs from requested {}", ck.mode, tcfg.mode)));
            }
            ck.train_state
                .ok_or_else(|| CliError::Config(format!("{} holds no training state to resume", p.display())))?
        }
        None => init_state(&dataset, &tcfg)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let paths = train_paths(out_dir, tcfg.mode);
    let mut save_err = None;
    let state = train_from(&dataset, &tcfg, state, |s| {
        if let Some(r) = s.history.epochs.last() {
            eprintln!(
                "[{}] epoch {} loss {:.4} val_rhat {:.3} Mbps clamp {:.3} ({:.1}s)",
                tcfg.mode, r.epoch, r.train_loss, r.val_rhat_mbps, r.clamp_rate, r.seconds
            );
        }
        let mut ck = Checkpoint::new(tcfg.seed, cfg.system.clone(), s.best_model.clone());
        ck.train_state = Some(s.clone());
        if let Err(e) = ck.save(&paths.checkpoint) {
            save_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    let mut ck = Checkpoint::new(tcfg.seed, cfg.system.clone(), state.best_model.clone());
    let history = state.history.to_csv();
    ck.train_state = Some(state);
    ck.save(&paths.checkpoint)?;
    let mut text = cfg.csv_header();
    text.push_str(&history);
    fs::write(&paths.history, text).map_err(|e| CliError::io(paths.history.display(), e))?;
    Ok(paths)
}

pub fn rate_curve(
    cfg: &RunConfig,
    data: Option<&Path>,
    checkpoints: &[PathBuf],
    grid_spec: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let grid = parse_grid(grid_spec)?;
    if checkpoints.is_empty() {
        return Err(CliError::Config("at least one checkpoint is required".into()));
    }
    let models = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = load_data(cfg, data)?;
    let mut curves = Vec::new();
    for ck in &models {
        let rows = evaluate(&ck.model, &cfg.system, &dataset.test, &grid, cfg.eval.error_samples, cfg.seed)?;
        curves.push((ck.mode, rows));
    }
    let mut rows = Vec::new();
    for (j, &p) in grid.iter().enumerate() {
        for (mode, curve) in &curves {
            rows.push(vec![fmt(p), mode.to_string(), fmt(curve[j].mean_rhat_mbps), fmt(curve[j].std_rhat_mbps)]);
        }
    }
    write_csv(cfg, out, &["p_dbm", "method", "mean_rhat_mbps", "std"], &rows)
}

pub fn cdf(
    cfg: &RunConfig,
    data: Option<&Path>,
    checkpoint: &Path,
    index: usize,
    errors: usize,
    p_dbm: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_data(cfg, data)?;
    let sample = dataset.test.get(index).ok_or_else(|| {
        CliError::Config(format!("channel index {index} out of range (test split has {})", dataset.test.len()))
    })?;
    let sys = &cfg.system;
    let noise = sys.noise_powers_mw();
    let p = p_dbm.unwrap_or(cfg.eval.cdf_power_dbm);
    let tags = [stream::EVAL, CDF_STREAM, index as u64];
    let msgs = ck.model.messages(cfg.seed, &tags, sample.n_antennas(), sample.n_users());
    let w = ck.model.beams(&sample.h_est, dbm_to_mw(p), &noise, &msgs)?;
    let errs = gen_errors_for(&mut derive_rng(cfg.seed, &tags), sys, sample, errors)?;
    let mut mins = min_rates(&sample.h_est, &w, &errs, sys.bandwidth_mhz(), &noise)?;
    mins.sort_by(f64::total_cmp);
    if let Ok(q) = daqe(&sample.h_est, &w, &errs, sys.outage_target, sys.bandwidth_mhz(), &noise) {
        eprintln!("channel {index} at {p} dBm: r_hat {:.4} Mbps", q.r_hat);
    }
    let u = mins.len() as f64;
    let rows: Vec<Vec<String>> = mins
        .iter()
        .enumerate()
        .map(|(i, &r)| vec![fmt(r), fmt((i + 1) as f64 / u)])
        .collect();
    write_csv(cfg, out, &["rate_mbps", "empirical_cdf"], &rows)
}

fn eval_channels(cfg: &RunConfig, dataset: &Dataset) -> usize {
    cfg.eval.channels.unwrap_or(dataset.test.len()).clamp(1, dataset.test.len())
}

pub fn power_min(
    cfg: &RunConfig,
    data: Option<&Path>,
    checkpoint: &Path,
    targets_spec: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let targets = parse_grid(targets_spec)?;
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_data(cfg, data)?;
    let channels = &dataset.test[..eval_channels(cfg, &dataset)];
    let mut rows = Vec::new();
    for &r in &targets {
        let bcfg = BisectConfig {
            target_mbps: r,
            ..cfg.bisect.clone()
        };
        let t0 = Instant::now();
        let s = feasibility_rate(&ck.model, &cfg.system, channels, &bcfg, cfg.seed)?;
        let mean_ms = 1e3 * t0.elapsed().as_secs_f64() / channels.len() as f64;
        rows.push(vec![
            fmt(r),
            s.mean_p_dbm.map(fmt).unwrap_or_default(),
            fmt(s.feasibility),
            format!("{mean_ms:.3}"),
        ]);
    }
    write_csv(
        cfg,
        out,
        &["rate_target", "mean_pstar_dbm_over_feasible", "feasibility", "mean_ms"],
        &rows,
    )
}

fn summarize_ms(mut times: Vec<f64>) -> (f64, f64) {
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let idx = ((0.95 * times.len() as f64).ceil() as usize).clamp(1, times.len()) - 1;
    (mean, times[idx])
}

fn forward_once(model: &Model, h: &robustbf::numerics::ComplexMat, p_mw: f64, noise: &[f64], seed: u64, i: u64) -> Result<(), CliError> {
    let msgs = model.messages(seed, &[stream::EVAL, i], h.rows(), h.cols());
    match (model.mode, &model.snet, &model.pnet, &msgs.s, &msgs.p) {
        (Mode::Proposed, Some(s), Some(p), Some(ms), Some(mp)) => {
            std::hint::black_box(pipeline_forward(h, p_mw, s, p, noise, (ms, mp))?);
        }
        _ => {
            std::hint::black_box(model.beams(h, p_mw, noise, &msgs)?);
        }
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, n: usize, out: Option<&Path>) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_data(cfg, data)?;
    let channels = &dataset.test[..eval_channels(cfg, &dataset)];
    let noise = cfg.system.noise_powers_mw();
    let p_mw = dbm_to_mw(cfg.train.validation_power_dbm);
    let mut forward = Vec::with_capacity(n);
    let mut bisect = Vec::with_capacity(n);
    for i in 0..n {
        let s = &channels[i % channels.len()];
        let t0 = Instant::now();
        forward_once(&ck.model, &s.h_est, p_mw, &noise, cfg.seed, i as u64)?;
        forward.push(1e3 * t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        std::hint::black_box(bisect_power(&ck.model, &cfg.system, s, &cfg.bisect, cfg.seed, &[i as u64])?);
        bisect.push(1e3 * t0.elapsed().as_secs_f64());
    }
    let rows: Vec<Vec<String>> = [("p1_inference", forward), ("p2_power_min", bisect)]
        .into_iter()
        .map(|(phase, t)| {
            let (mean, p95) = summarize_ms(t);
            vec![phase.to_string(), format!("{mean:.4}"), format!("{p95:.4}")]
        })
        .collect();
    write_csv(cfg, out, &["phase", "mean_ms", "p95_ms"], &rows)
}

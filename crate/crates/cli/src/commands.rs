use std::fs;
use std::path::{Path, PathBuf};

use eemax_core::chanmodel::{generate, load_dataset, save_dataset, ScenarioConfig};
use eemax_core::inet::{load_checkpoint, save_checkpoint};
use eemax_core::objective::{nats_to_mbit_per_joule, PenaltyForm};
use eemax_core::oracle::{read_comparison_csv, solve_dataset, write_comparison_csv, ComparisonRow, OracleConfig, OracleMode};
use eemax_core::trainer::{
    evaluate, rastrigin_box, rastrigin_box_rng, rastrigin_gd, rastrigin_start, read_metrics_csv, rastrigin,
    write_metrics_csv, EpochMetrics, EvalSummary, OptimizerKind, RastriginConfig, StopReason, TrainConfig,
    TrainState, Trainer,
};
use log::{info, warn};
use serde_json::json;

use crate::args::{
    Cli, Command, EvalArgs, GenDataArgs, MethodArg, OptimizerArg, OracleArgs, OracleModeArg, PenaltyArg,
    RastriginArgs, ReplayArgs, TrainArgs,
};
use crate::error::{CliError, CliResult};
use crate::manifest::{output_key, sha256_file, sibling_manifest, Manifest, Recorder};

/// Runs one parsed command. `argv` is the effective argument list without
/// the program name, as recorded in manifests.
pub fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    let name = cli.command.name();
    match cli.command {
        Command::GenData(a) => gen_data(&a, Recorder::new(Some(sibling_manifest(&a.out)), name, argv)?),
        Command::Train(a) => train(&a, argv),
        Command::Eval(a) => {
            let rec = Recorder::new(a.out.as_deref().map(sibling_manifest), name, argv)?;
            eval(&a, rec)
        }
        Command::Oracle(a) => oracle(&a, Recorder::new(Some(sibling_manifest(&a.out)), name, argv)?),
        Command::Rastrigin(a) => cmd_rastrigin(&a, Recorder::new(Some(sibling_manifest(&a.out)), name, argv)?),
        Command::Replay(a) => replay(&a),
    }
}

/// Centres of a near-square grid of cells covering `area`, row by row.
fn grid_positions(n: usize, [x0, y0, x1, y1]: [f64; 4]) -> Vec<[f64; 2]> {
    if n == 0 {
        return Vec::new();
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = ((x1 - x0) / cols as f64, (y1 - y0) / rows as f64);
    (0..n)
        .map(|k| [x0 + (k % cols) as f64 * w + w / 2.0, y0 + (k / cols) as f64 * h + h / 2.0])
        .collect()
}

fn gen_data(a: &GenDataArgs, mut rec: Recorder) -> CliResult<()> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let base = ScenarioConfig::default();
    let sc = ScenarioConfig {
        num_users: a.users,
        num_bs: a.bs,
        bs_antennas: a.antennas,
        bs_positions: if a.bs == base.num_bs {
            base.bs_positions.clone()
        } else {
            grid_positions(a.bs, base.area)
        },
        decay_factor: a.decay,
        bandwidth_hz: a.model.bandwidth,
        static_power_w: a.model.static_power,
        amp_inefficiency: a.model.amp_inefficiency,
        p_max_w: a.model.p_max_w()?,
        rng_seed: a.seed,
        ..base
    };
    sc.validate()?;
    rec.begin(json!({ "scenario": sc, "samples": a.samples, "seed": a.seed }), &[])?;
    let ds = generate(&sc, a.samples, a.seed)?;
    save_dataset(&ds, &a.out)?;
    rec.finish(&[(output_key(&a.out), a.out.clone())])?;
    println!("wrote {} samples with {} users to {}", ds.len(), ds.users(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        mc_samples: a.smc,
        eps: a.eps,
        kappa_step: a.kappa_step,
        kappa_window: a.kappa_window,
        h0: a.h0,
        rho: a.rho,
        region_adaptation: a.region_adapt,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sga => OptimizerKind::Sga,
        },
        seed: a.seed,
        penalty_form: match a.penalty {
            PenaltyArg::Hinge => PenaltyForm::Hinge,
            PenaltyArg::Literal => PenaltyForm::Literal,
        },
        p_max_w: a.model.p_max_w()?,
        model: a.model.power_model(),
        bandwidth_hz: a.model.bandwidth,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Files of a training run directory.
struct RunDir {
    config: PathBuf,
    net: PathBuf,
    state: PathBuf,
    metrics: PathBuf,
}

impl RunDir {
    fn new(dir: &Path) -> Self {
        Self {
            config: dir.join("config.json"),
            net: dir.join("net.bin"),
            state: dir.join("state.json"),
            metrics: dir.join("metrics.csv"),
        }
    }

    fn save(&self, t: &Trainer, rows: &[EpochMetrics]) -> eemax_core::Result<()> {
        save_checkpoint(&self.net, t.alpha(), t.beta())?;
        t.state().save(&self.state)?;
        write_metrics_csv(&self.metrics, rows)
    }

    fn outputs(&self) -> Vec<(String, PathBuf)> {
        [&self.config, &self.net, &self.state, &self.metrics]
            .into_iter()
            .map(|p| (output_key(p), p.clone()))
            .collect()
    }
}

fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let test = a.test_data.as_ref().map(load_dataset).transpose()?;
    let run = RunDir::new(&a.out_dir);
    let requested = train_config(a)?;

    let (mut trainer, mut rows, cfg) = if a.resume {
        if !run.config.exists() {
            return Err(CliError::Usage(format!("no run to resume in {}", a.out_dir.display())));
        }
        let text = fs::read_to_string(&run.config).map_err(|e| CliError::io(&run.config, e))?;
        let saved: TrainConfig =
            serde_json::from_str(&text).map_err(|e| eemax_core::Error::State(format!("config.json: {e}")))?;
        if (TrainConfig { epochs: saved.epochs, ..requested }) != saved {
            warn!("resuming with the saved configuration; training flags other than --epochs are ignored");
        }
        let (alpha, beta) = load_checkpoint(&run.net)?;
        let state = TrainState::load(&run.state)?;
        let rows = read_metrics_csv(&run.metrics)?;
        if rows.last().map(|r| r.epoch) != Some(state.epoch) {
            return Err(eemax_core::Error::State("metrics.csv and state.json describe different epochs".into()).into());
        }
        (Trainer::resume(saved.clone(), alpha, beta, state)?, rows, saved)
    } else {
        if run.config.exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume to continue it or pick another --out-dir",
                a.out_dir.display()
            )));
        }
        fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
        let text = serde_json::to_string_pretty(&requested).expect("config serializes");
        fs::write(&run.config, text + "\n").map_err(|e| CliError::io(&run.config, e))?;
        (Trainer::new(requested.clone())?, Vec::new(), requested)
    };

    let first = trainer.state().epoch;
    let manifest = if a.resume {
        a.out_dir.join(format!("manifest-resume-{first}.json"))
    } else {
        a.out_dir.join("manifest.json")
    };
    let mut rec = Recorder::new(Some(manifest), "train", argv)?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.test_data.as_deref());
    if a.resume {
        inputs.extend([run.net.as_path(), run.state.as_path(), run.metrics.as_path()]);
    }
    rec.begin(
        json!({ "train": cfg, "users": ds.users(), "epochs": a.epochs, "checkpoint_every": a.checkpoint_every }),
        &inputs,
    )?;

    let every = a.checkpoint_every;
    let stop = trainer.run(&ds, a.epochs, |m, t| {
        rows.push(*m);
        log::debug!("epoch {} ee {:.6} entropy {:.3} penalty {:.3e}", m.epoch, m.mean_ee_mbit_per_j, m.mean_entropy_nats, m.mean_penalty);
        if every > 0 && m.epoch > first && m.epoch % every == 0 {
            run.save(t, &rows)?;
            info!("epoch {}: checkpoint written, mean EE {:.6} Mbit/J", m.epoch, m.mean_ee_mbit_per_j);
        }
        Ok(())
    })?;
    run.save(&trainer, &rows)?;
    rec.finish(&run.outputs())?;

    let last = rows.last().expect("run logs at least one row");
    let why = match stop {
        StopReason::EntropyThreshold => "entropy threshold reached",
        StopReason::EpochCap => "epoch budget used",
    };
    println!(
        "{why} at epoch {}: mean EE {:.6} Mbit/J, entropy {:.4} nats, penalty {:.3e}, s {} W",
        last.epoch, last.mean_ee_mbit_per_j, last.mean_entropy_nats, last.mean_penalty, last.s_watts
    );
    if let Some(test) = &test {
        let e = evaluate(trainer.alpha(), test, trainer.scale(), &cfg.model, cfg.bandwidth_hz, None)?;
        println!("test mean EE {:.6} Mbit/J over {} samples", e.mean_ee_mbit_per_j, test.len());
    }
    Ok(())
}

fn eval(a: &EvalArgs, mut rec: Recorder) -> CliResult<()> {
    let (alpha, _) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let p_max = a.model.p_max_w()?;
    let state_path = a.state.clone().or_else(|| {
        let sibling = a.checkpoint.with_file_name("state.json");
        sibling.exists().then_some(sibling)
    });
    let s = match &state_path {
        Some(p) => TrainState::load(p)?.region.s,
        None => p_max,
    };
    let oracle = a.oracle.as_ref().map(read_comparison_csv).transpose()?;

    let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.data];
    inputs.extend(state_path.as_deref());
    inputs.extend(a.oracle.as_deref());
    rec.begin(json!({ "s_watts": s, "model": a.model.power_model(), "bandwidth_hz": a.model.bandwidth }), &inputs)?;

    let summary = evaluate(&alpha, &ds, s, &a.model.power_model(), a.model.bandwidth, oracle.as_deref())?;
    match summary.mean_ratio {
        Some(r) => println!("samples,mean_ee_mbit_per_j,mean_ratio\n{},{},{}", ds.len(), summary.mean_ee_mbit_per_j, r),
        None => println!("samples,mean_ee_mbit_per_j\n{},{}", ds.len(), summary.mean_ee_mbit_per_j),
    }
    if let Some(out) = &a.out {
        match &oracle {
            Some(rows) => write_comparison_csv(out, ds.users(), &summary.comparison(rows))?,
            None => write_samples_csv(out, ds.users(), &summary)?,
        }
        rec.finish(&[(output_key(out), out.clone())])?;
    }
    Ok(())
}

/// `sample_index,ee_net,p_net_0..`.
fn write_samples_csv(path: &Path, users: usize, summary: &EvalSummary) -> CliResult<()> {
    let csv_io = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["sample_index".to_string(), "ee_net".into()];
    header.extend((0..users).map(|i| format!("p_net_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (k, s) in summary.samples.iter().enumerate() {
        let mut rec = vec![k.to_string(), s.ee_mbit_per_j.to_string()];
        rec.extend(s.p_w.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn oracle(a: &OracleArgs, mut rec: Recorder) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = OracleConfig::for_users(ds.users());
    if let Some(k) = a.grid_points {
        cfg.grid_points = k;
    }
    cfg.starts = a.starts;
    cfg.validate()?;
    let mode = match a.mode {
        OracleModeArg::Grid => OracleMode::Grid,
        OracleModeArg::Multistart => OracleMode::Multistart,
    };
    if mode == OracleMode::Grid && ds.users() > cfg.max_grid_users {
        return Err(CliError::Usage(format!(
            "the exhaustive grid would need {}^{} objective evaluations per sample and is limited to {} users; \
             use --mode multistart, whose result is a lower bound on the optimum",
            cfg.grid_points,
            ds.users(),
            cfg.max_grid_users
        )));
    }
    let p_max = a.model.p_max_w()?;
    let model = a.model.power_model();
    rec.begin(
        json!({ "oracle": cfg, "mode": mode, "seed": a.seed, "p_max_w": p_max, "model": model, "bandwidth_hz": a.model.bandwidth }),
        &[&a.data],
    )?;
    let results = solve_dataset(&ds, p_max, &model, &cfg, mode, a.seed)?;
    let rows: Vec<ComparisonRow> = results
        .into_iter()
        .enumerate()
        .map(|(k, r)| ComparisonRow {
            sample_index: k,
            ee_oracle: nats_to_mbit_per_joule(r.objective, a.model.bandwidth),
            ee_net: None,
            p_oracle: r.p,
            p_net: None,
        })
        .collect();
    write_comparison_csv(&a.out, ds.users(), &rows)?;
    rec.finish(&[(output_key(&a.out), a.out.clone())])?;
    let mean = rows.iter().map(|r| r.ee_oracle).sum::<f64>() / rows.len() as f64;
    println!("mean oracle EE {mean:.6} Mbit/J over {} samples", rows.len());
    Ok(())
}

fn cmd_rastrigin(a: &RastriginArgs, mut rec: Recorder) -> CliResult<()> {
    let cfg = RastriginConfig {
        n: a.n,
        iterations: a.iterations,
        learning_rate: a.lr,
        kappa_step: a.kappa_step,
        seed: a.seed,
        ..RastriginConfig::default()
    };
    cfg.validate()?;
    rec.begin(json!({ "rastrigin": cfg, "method": format!("{:?}", a.method).to_lowercase() }), &[])?;
    let start = rastrigin_start(&cfg);
    let f0 = rastrigin(&start, cfg.amplitude);
    let boxed = match a.method {
        MethodArg::Box | MethodArg::Both => Some(rastrigin_box(&start, &cfg, &mut rastrigin_box_rng(&cfg))?.0),
        MethodArg::Gd => None,
    };
    let gd = match a.method {
        MethodArg::Gd | MethodArg::Both => Some(rastrigin_gd(&start, &cfg).0),
        MethodArg::Box => None,
    };

    let csv_io = |e: csv::Error| CliError::io(&a.out, e.into());
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_io)?;
    let traces: Vec<(&str, &Vec<f64>)> = [("f_box", boxed.as_ref()), ("f_gd", gd.as_ref())]
        .into_iter()
        .filter_map(|(name, t)| t.map(|t| (name, t)))
        .collect();
    let mut header = vec!["iteration"];
    header.extend(traces.iter().map(|(name, _)| *name));
    w.write_record(&header).map_err(csv_io)?;
    for it in 0..=cfg.iterations {
        let mut row = vec![it.to_string()];
        row.extend(traces.iter().map(|(_, t)| if it == 0 { f0 } else { t[it - 1] }.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    rec.finish(&[(output_key(&a.out), a.out.clone())])?;
    for (name, t) in &traces {
        println!("{name} final {:.6e}", t.last().copied().unwrap_or(f0));
    }
    Ok(())
}

/// Points the output flag of `argv` into `into`, keeping the file or
/// directory name. Returns the new argv and the new output location.
fn redirect_output(argv: &[String], flag: &str, into: &Path) -> CliResult<(Vec<String>, PathBuf)> {
    let mut out = argv.to_vec();
    let eq = format!("{flag}=");
    let pos = out.iter().position(|t| t == flag || t.starts_with(&eq));
    let Some(pos) = pos else {
        return Err(CliError::Usage(format!("recorded command has no {flag}; nothing to compare")));
    };
    let old = match out[pos].strip_prefix(&eq) {
        Some(v) => v.to_string(),
        None => out
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("recorded {flag} has no value")))?,
    };
    let name = Path::new(&old)
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("recorded {flag} `{old}` has no file name")))?;
    let new = into.join(name);
    let value = new.display().to_string();
    if out[pos] == flag {
        out[pos + 1] = value;
    } else {
        out[pos] = format!("{eq}{value}");
    }
    Ok((out, new))
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let m = Manifest::load(&a.manifest)?;
    let bad = |reason: &str| CliError::Manifest {
        path: a.manifest.display().to_string(),
        reason: reason.into(),
    };
    if !m.complete {
        return Err(bad("the recorded run did not complete"));
    }
    if m.argv.iter().any(|t| t == "--resume") {
        return Err(bad("resumed runs depend on the state they started from; replay the original run"));
    }
    fs::create_dir_all(&a.into).map_err(|e| CliError::io(&a.into, e))?;
    let into = a.into.canonicalize().map_err(|e| CliError::io(&a.into, e))?;
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::io(&m.cwd, e))?;
    for (path, hash) in &m.inputs_sha256 {
        if sha256_file(Path::new(path))? != *hash {
            return Err(bad(&format!("input {path} changed since the recorded run")));
        }
    }

    let flag = if m.subcommand == "train" { "--out-dir" } else { "--out" };
    let (argv, new_out) = redirect_output(&m.argv, flag, &into)?;
    let root = if flag == "--out-dir" { new_out } else { into };
    let full: Vec<String> = std::iter::once(m.tool.clone()).chain(argv.iter().cloned()).collect();
    let cli = <Cli as clap::Parser>::try_parse_from(&full).map_err(|e| CliError::Usage(e.to_string()))?;
    if cli.command.name() != m.subcommand {
        return Err(bad("argv does not match the recorded subcommand"));
    }
    run(cli, &argv)?;

    let mut differ = Vec::new();
    for (key, hash) in &m.outputs_sha256 {
        let now = sha256_file(&root.join(key))?;
        if now == *hash {
            println!("match {key} {now}");
        } else {
            differ.push(format!("{key}: recorded {hash}, got {now}"));
        }
    }
    if differ.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(differ.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_for_four_stations_is_a_square_grid() {
        let g = grid_positions(4, [0.0, 0.0, 2.0, 2.0]);
        assert_eq!(g, vec![[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]]);
        let g = grid_positions(3, [0.0, 0.0, 2.0, 2.0]);
        assert_eq!(g, vec![[0.5, 0.5], [1.5, 0.5], [0.5, 1.5]]);
        assert!(grid_positions(0, [0.0, 0.0, 1.0, 1.0]).is_empty());
    }

    #[test]
    fn redirect_rewrites_both_flag_spellings() {
        let argv: Vec<String> = ["gen-data", "--out", "a/b/d.bin", "--seed", "1"].map(String::from).into();
        let (out, p) = redirect_output(&argv, "--out", Path::new("/x")).unwrap();
        assert_eq!(out[2], "/x/d.bin");
        assert_eq!(p, PathBuf::from("/x/d.bin"));
        let argv: Vec<String> = ["train", "--out-dir=runs/r1"].map(String::from).into();
        let (out, p) = redirect_output(&argv, "--out-dir", Path::new("/y")).unwrap();
        assert_eq!(out[1], "--out-dir=/y/r1");
        assert_eq!(p, PathBuf::from("/y/r1"));
        assert!(redirect_output(&argv, "--out", Path::new("/y")).is_err());
    }
}

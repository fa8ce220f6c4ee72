use std::path::{Path, PathBuf};

use gridnode::autodiff::{grad_check_many, Tape, Tensor};
use gridnode::datagen::{
    add_noise, generate_excitation, load_dataset, read_trajectory_csv, save_dataset, simulate_trajectory, slice_aligned,
    slice_samples, write_trajectory_csv, SampleSet, Trajectory,
};
use gridnode::evaluation::{aggregate_csv, evaluate_named, export_trajectory, EvalTable, TruthSource};
use gridnode::models::{load_checkpoint, save_checkpoint, Model, ModelConfig, ModelKind};
use gridnode::nn::{Activation, Mlp, MlpConfig, Tcn, TcnConfig};
use gridnode::odeint::rk4_step_tape;
use gridnode::powergrid::{pair2_model, GridModel};
use gridnode::rng::{stream_rng, stream_seed};
use gridnode::training::{sweep, sweep_csv, train, TrainConfig};
use gridnode::transfer::{apply_edits, retrain_fraction, scenario_by_name};
use log::info;

use crate::config::Config;
use crate::error::CliError;

pub const DATASET_FILES: [&str; 4] = ["d1.gnds", "d2.gnds", "d3.gnds", "d4.gnds"];

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn trajectory_file(j: usize) -> String {
    format!("trajectory_{j}.csv")
}

fn excitation_seed(seed: u64, prefix: &str, j: usize) -> u64 {
    stream_seed(seed, &format!("{prefix}excitation-{j}"))
}

fn noise_seed(seed: u64, prefix: &str, j: usize) -> u64 {
    stream_seed(seed, &format!("{prefix}noise-{j}"))
}

/// The four noisy trajectories behind D1 to D4.
pub fn simulate_study(cfg: &Config, grid: &GridModel, seed: u64, prefix: &str) -> Result<Vec<Trajectory>, CliError> {
    let ex = &cfg.excitation;
    (1..=4)
        .map(|j| {
            let schedule = generate_excitation(grid, ex.durations[j - 1], ex.period, ex.amplitude, cfg.simulation.dt, excitation_seed(seed, prefix, j))?;
            let clean = simulate_trajectory(grid, &schedule, &cfg.simulation, j as u32)?;
            info!("simulated trajectory {j}: {} rows", clean.rows());
            Ok(add_noise(&clean, cfg.noise.snr_db, noise_seed(seed, prefix, j))?)
        })
        .collect()
}

/// D1 to D3 with the regular windows, D4 with step-aligned ones.
pub fn slice_study(cfg: &Config, trajs: &[Trajectory], seed: u64, prefix: &str) -> Result<Vec<SampleSet>, CliError> {
    let s = &cfg.slicing;
    let period_steps = (cfg.excitation.period / cfg.simulation.dt).round() as usize;
    trajs
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mut set = if j == 3 {
                slice_aligned(t, s.test_window, s.test_window, s.test_window, period_steps)?
            } else {
                slice_samples(t, s.history, s.horizon, s.stride)?
            };
            set.meta.seeds = vec![excitation_seed(seed, prefix, j + 1), noise_seed(seed, prefix, j + 1)];
            set.meta.snr_db = cfg.noise.snr_db.is_finite().then_some(cfg.noise.snr_db);
            Ok(set)
        })
        .collect()
}

pub fn simulate(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    create_dir(out)?;
    for (j, t) in simulate_study(cfg, &grid, seed, "")?.iter().enumerate() {
        let path = out.join(trajectory_file(j + 1));
        write_trajectory_csv(t, &path)?;
        println!("wrote {} ({} rows x {} nodes)", path.display(), t.rows(), t.n_nodes());
    }
    Ok(())
}

pub fn dataset(cfg: &Config, seed: u64, traj_dir: &Path, out: &Path) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let trajs = (1..=4)
        .map(|j| read_trajectory_csv(&traj_dir.join(trajectory_file(j)), j as u32))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(t) = trajs.iter().find(|t| t.node_ids != grid.topology().node_ids()) {
        return Err(CliError::Config(format!(
            "trajectory {} has nodes {:?}, configured grid has {:?}",
            t.id,
            t.node_ids,
            grid.topology().node_ids()
        )));
    }
    create_dir(out)?;
    for (set, name) in slice_study(cfg, &trajs, seed, "")?.iter().zip(DATASET_FILES) {
        let path = out.join(name);
        save_dataset(set, &path)?;
        println!(
            "wrote {} ({} samples x {} nodes, H={} K={} D={})",
            path.display(),
            set.len(),
            set.n_nodes(),
            set.meta.h,
            set.meta.k,
            set.meta.d
        );
    }
    Ok(())
}

fn load_sets(dir: &Path, which: &[usize]) -> Result<Vec<SampleSet>, CliError> {
    which.iter().map(|&i| Ok(load_dataset(&dir.join(DATASET_FILES[i]))?)).collect()
}

fn train_config(cfg: &Config, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: stream_seed(seed, "train"),
        ..cfg.training.clone()
    }
}

fn report_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    ckpt.with_file_name(format!("{stem}_report.csv"))
}

pub fn train_cmd(cfg: &Config, seed: u64, data: &Path, kind: ModelKind, out: &Path) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let sets = load_sets(data, &[0, 1])?;
    let model = Model::new(kind, cfg.model.clone(), grid.topology(), &sets[0], &mut stream_rng(seed, "init"))?;
    info!("{} model with {} parameters", kind.name(), model.count_parameters().total());
    let (best, report) = train(model, &sets[0], &sets[1], &train_config(cfg, seed))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&best, &report.metadata(), out)?;
    let rp = report_path(out);
    write_file(&rp, &report.to_csv())?;
    println!("{}", report.summary());
    println!("wrote {} and {}", out.display(), rp.display());
    Ok(())
}

pub fn sweep_cmd(cfg: &Config, seed: u64, data: &Path, kind: ModelKind, out: &Path) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let sets = load_sets(data, &[0, 1, 2])?;
    let points = cfg.sweep.points(&cfg.model, &train_config(cfg, seed));
    if points.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let results = sweep(kind, &points, grid.topology(), &sets[0], &sets[1], &sets[2])?;
    create_dir(out)?;
    write_file(&out.join("sweep.csv"), &sweep_csv(&results))?;
    if let (Some(model), Some(report)) = (&results[0].model, &results[0].report) {
        save_checkpoint(model, &report.metadata(), &out.join("best.gnck"))?;
    }
    println!(
        "ranked {} configurations; best selection loss {}",
        results.len(),
        results[0].selection_loss
    );
    Ok(())
}

fn unique_names(models: &[Model]) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(models.len());
    for m in models {
        let base = m.kind().name().to_string();
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

pub fn eval_cmd(cfg: Option<&Config>, ckpts: &[PathBuf], data: &Path, truth: TruthSource, out: &Path) -> Result<(), CliError> {
    let set = load_dataset(data)?;
    let models = ckpts
        .iter()
        .map(|p| load_for(cfg, p, &set))
        .collect::<Result<Vec<_>, _>>()?;
    let names = unique_names(&models);
    create_dir(out)?;
    let mut tables = Vec::new();
    for (m, name) in models.iter().zip(&names) {
        let t = evaluate_named(m, name, &set, truth)?;
        write_file(&out.join(format!("eval_{name}.csv")), &t.to_csv())?;
        tables.push(t);
    }
    write_file(&out.join("aggregate.csv"), &aggregate_csv(&tables.iter().collect::<Vec<_>>()))?;
    let named: Vec<(&str, &Model)> = names.iter().map(String::as_str).zip(models.iter()).collect();
    let sample = if set.len() > 1 { 1 } else { 0 };
    export_trajectory(&named, &set, sample, &out.join("trajectory.csv"))?;
    println!("evaluated {} model(s) on {} samples; wrote {}", models.len(), set.len(), out.display());
    Ok(())
}

/// Loads a checkpoint for `set`: against the configured grid when a config
/// is given, otherwise against the stored topology after checking node ids.
fn load_for(cfg: Option<&Config>, path: &Path, set: &SampleSet) -> Result<Model, CliError> {
    let model = match cfg {
        Some(c) => load_checkpoint(path, c.grid()?.topology(), false)?.0,
        None => {
            let any = gridnode::powergrid::GridTopology::new(&set.meta.node_ids, &[]).map_err(|e| CliError::Config(e.to_string()))?;
            load_checkpoint(path, &any, true)?.0
        }
    };
    if model.topology().node_ids() != set.meta.node_ids {
        return Err(CliError::Config(format!(
            "{}: model nodes {:?} differ from dataset nodes {:?}",
            path.display(),
            model.topology().node_ids(),
            set.meta.node_ids
        )));
    }
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
pub fn transfer_cmd(
    cfg: &Config,
    seed: u64,
    ckpt: &Path,
    scenario: &str,
    data: &Path,
    fraction: f64,
    truth: TruthSource,
    out: &Path,
) -> Result<(), CliError> {
    let sc = scenario_by_name(scenario).ok_or_else(|| CliError::Config(format!("unknown scenario `{scenario}`")))?;
    let original_d4 = load_dataset(&data.join(DATASET_FILES[3]))?;
    let (original, _) = load_checkpoint(ckpt, sc.original.topology(), false)?;

    let trajs = simulate_study(cfg, &sc.altered, seed, "transfer-")?;
    let altered = slice_study(cfg, &trajs, seed, "transfer-")?;
    let mut edited = original.clone();
    apply_edits(&mut edited, &sc.edits)?;
    let tc = train_config(cfg, seed);
    let (retrained, report) = retrain_fraction(edited.clone(), &altered[0], &altered[1], fraction, &tc)?;

    create_dir(out)?;
    let tables: Vec<EvalTable> = vec![
        evaluate_named(&original, "original", &original_d4, truth)?,
        evaluate_named(&edited, "no_retrain", &altered[3], truth)?,
        evaluate_named(&retrained, "retrained", &altered[3], truth)?,
    ];
    for t in &tables {
        write_file(&out.join(format!("eval_{}.csv", t.model)), &t.to_csv())?;
    }
    write_file(&out.join("aggregate.csv"), &aggregate_csv(&tables.iter().collect::<Vec<_>>()))?;
    write_file(&out.join("retrain_report.csv"), &report.to_csv())?;
    save_checkpoint(&retrained, &report.metadata(), &out.join("retrained.gnck"))?;
    println!("{}", report.summary());
    println!("wrote {}", out.display());
    Ok(())
}

/// Named gradient checks with their tolerances.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, f64, f64)>, CliError> {
    let mut rng = stream_rng(seed, "gradcheck");
    let num = |e: gridnode::autodiff::AutodiffError| CliError::Numeric(e.to_string());
    let mut out = Vec::new();
    for act in [Activation::Tanh, Activation::Silu, Activation::Gelu] {
        let mlp = Mlp::new(
            MlpConfig {
                input_dim: 3,
                hidden_layers: 2,
                hidden_width: 5,
                output_dim: 2,
                activation: act,
            },
            &mut rng,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let x = Tensor::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).expect("shape").with_grad();
        let mut inputs: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
        inputs.push(x);
        let err = grad_check_many(
            |tape: &mut Tape, v| {
                let vars = mlp.bind_from(&mut gridnode::nn::ParamCursor::new(&v[..v.len() - 1]));
                let y = vars.forward(tape, v[v.len() - 1]).map_err(nn_to_ad)?;
                let y = tape.square(y);
                Ok(tape.sum(y))
            },
            &inputs,
            1e-6,
        )
        .map_err(num)?;
        out.push((format!("mlp ({act:?})"), err, 1e-6));
    }
    let tcn = Tcn::new(
        TcnConfig {
            in_channels: 2,
            hidden_channels: 3,
            out_dim: 2,
            kernel_size: 2,
            blocks: 2,
        },
        &mut rng,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let seq = Tensor::new(&[2, 7, 2], (0..28).map(|i| (i as f64 * 0.61).cos()).collect()).expect("shape").with_grad();
    let mut inputs: Vec<Tensor> = tcn.params().into_iter().cloned().collect();
    inputs.push(seq);
    let err = grad_check_many(
        |tape: &mut Tape, v| {
            let vars = tcn.bind_from(&mut gridnode::nn::ParamCursor::new(&v[..v.len() - 1]));
            let y = vars.encode(tape, v[v.len() - 1]).map_err(nn_to_ad)?;
            let y = tape.square(y);
            Ok(tape.sum(y))
        },
        &inputs,
        1e-6,
    )
    .map_err(num)?;
    out.push(("tcn encoder".into(), err, 1e-6));

    let rhs = Mlp::new(
        MlpConfig {
            input_dim: 4,
            hidden_layers: 1,
            hidden_width: 6,
            output_dim: 3,
            activation: Activation::Tanh,
        },
        &mut rng,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut inputs: Vec<Tensor> = rhs.params().into_iter().cloned().collect();
    inputs.push(Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]).expect("shape").with_grad());
    let err = grad_check_many(
        |tape: &mut Tape, v| {
            let vars = rhs.bind_from(&mut gridnode::nn::ParamCursor::new(&v[..v.len() - 1]));
            let u = tape.constant(&[2, 1], vec![0.2, -0.1])?;
            let mut f = |t: &mut Tape, x, u| {
                let xu = t.concat(&[x, u], 1)?;
                vars.forward(t, xu).map_err(|e| gridnode::odeint::OdeError::Autodiff(nn_to_ad(e)))
            };
            let x1 = rk4_step_tape(tape, &mut f, v[v.len() - 1], u, 0.05).map_err(|e| match e {
                gridnode::odeint::OdeError::Autodiff(a) => a,
                other => gridnode::autodiff::AutodiffError::Invalid {
                    op: "rk4",
                    msg: other.to_string(),
                },
            })?;
            let y = tape.square(x1);
            Ok(tape.sum(y))
        },
        &inputs,
        1e-6,
    )
    .map_err(num)?;
    out.push(("rk4 step through mlp rhs".into(), err, 1e-6));

    let grid = pair2_model();
    let ex = generate_excitation(&grid, 3.0, 1.0, 0.2, 0.01, stream_seed(seed, "gradcheck-data"))?;
    let traj = simulate_trajectory(&grid, &ex, &Default::default(), 0)?;
    let set = slice_samples(&traj, 8, 3, 50)?;
    let cfg = ModelConfig {
        hidden_layers: 1,
        hidden_width: 6,
        tcn_channels: 4,
        tcn_kernel: 2,
        history: 8,
        activation: Activation::Tanh,
        ..ModelConfig::default()
    };
    let model = Model::new(ModelKind::Mpg, cfg, grid.topology(), &set, &mut rng)?;
    let batch = gridnode::models::Batch::from_samples(&set, &(0..set.len().min(3)).collect::<Vec<_>>())?;
    let inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let err = grad_check_many(
        |tape: &mut Tape, v| {
            model.loss_with(tape, v, &batch).map_err(|e| gridnode::autodiff::AutodiffError::Invalid {
                op: "loss",
                msg: e.to_string(),
            })
        },
        &inputs,
        1e-6,
    )
    .map_err(num)?;
    out.push(("mpg loss, 2 nodes, H=8, K=3".into(), err, 1e-4));
    Ok(out)
}

fn nn_to_ad(e: gridnode::nn::NnError) -> gridnode::autodiff::AutodiffError {
    match e {
        gridnode::nn::NnError::Autodiff(a) => a,
        other => gridnode::autodiff::AutodiffError::Invalid {
            op: "nn",
            msg: other.to_string(),
        },
    }
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let results = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for (name, err, tol) in &results {
        let ok = *err < *tol;
        println!("{} {name}: max rel error {err:.3e} (tol {tol:.0e})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

//! Command-line experiment driver.
//!
//! Every subcommand reads one TOML config and writes its artifacts into the
//! output directory. No output contains timestamps, so reruns with the same
//! seed are byte-identical.

mod config;
pub mod svg;

pub use config::{
    DataPurpose, DataSettings, ExperimentConfig, FieldSettings, InpaintSettings, Overrides, SamplerSettings, Sweep,
};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{MsgmError, Result};
use crate::evalbench::{
    field_alignment, score_field, unlearning_ratio, AnalyticScore, Region, ScoreField, DEFAULT_UR_THRESHOLD,
};
use crate::likelihood::{nll_report, NllReport};
use crate::numcore::Tensor;
use crate::sampler::{inpaint, pc_sample, reconstruct, write_points_csv, SampleBatch};
use crate::scorenet::{read_checkpoint, write_checkpoint, ScoreModel, ScoreNet};
use crate::train::{train, LossCurve, SplitDataset, TrainMode};

#[derive(Debug, Parser)]
#[command(
    name = "msgm",
    version,
    about = "Score-based generative models with unlearning objectives"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Model checkpoint to read; defaults to `<out>/model.ckpt`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Training mode, overriding the config.
    #[arg(long, global = true)]
    pub mode: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a score network and write the checkpoint and loss curve.
    Train,
    /// Draw samples from a checkpoint.
    Sample,
    /// Probability-flow NLL of held-out retained and forget points.
    Nll,
    /// Unlearning ratio, NLL table and figures for a checkpoint.
    Eval,
    /// Score field on a lattice.
    Field {
        /// Use the exact perturbed-mixture score instead of a checkpoint.
        #[arg(long)]
        analytic: bool,
    },
    /// Complete partially observed points.
    Inpaint,
    /// Perturb and denoise held-out points.
    Reconstruct,
    /// Train and evaluate one model per sweep value.
    Ablate,
}

/// Exit status for a failed command: 2 for numerical failures, 1 otherwise.
pub fn exit_code(err: &MsgmError) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Runs one command and returns its summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| MsgmError::Config(vec!["--config is required".to_string()]))?;
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.clone(),
        out_dir: cli.out.clone(),
    };
    let cfg = ExperimentConfig::load(path, &overrides)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| MsgmError::io(&cfg.out_dir, e))?;
    let ckpt = || cli.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    match &cli.command {
        Command::Train => {
            let init = if cfg.plan.mode.is_finetune() {
                let p = cli.checkpoint.as_ref().ok_or_else(|| {
                    MsgmError::invalid(format!(
                        "{} needs --checkpoint with the pre-trained model",
                        cfg.plan.mode
                    ))
                })?;
                Some(load_model(&cfg, p)?)
            } else {
                None
            };
            run_train(&cfg, init)
        }
        Command::Sample => run_sample(&cfg, &load_model(&cfg, &ckpt())?),
        Command::Nll => run_nll(&cfg, &load_model(&cfg, &ckpt())?),
        Command::Eval => run_eval(&cfg, &load_model(&cfg, &ckpt())?, &ckpt()),
        Command::Field { analytic } => {
            if *analytic {
                let model = AnalyticScore::new(cfg.mixture.clone(), cfg.sde);
                run_field(&cfg, &model, "analytic")
            } else {
                run_field(&cfg, &load_model(&cfg, &ckpt())?, &cfg.name)
            }
        }
        Command::Inpaint => run_inpaint(&cfg, &load_model(&cfg, &ckpt())?),
        Command::Reconstruct => run_reconstruct(&cfg, &load_model(&cfg, &ckpt())?),
        Command::Ablate => run_ablation(&cfg),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| MsgmError::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Training split and held-out evaluation split.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(SplitDataset, SplitDataset)> {
    let train = SplitDataset::from_mixture(
        &cfg.mixture,
        cfg.data.n_train,
        &mut cfg.data_stream(DataPurpose::TrainData),
    )?;
    let held = SplitDataset::from_mixture(
        &cfg.mixture,
        cfg.data.n_eval,
        &mut cfg.data_stream(DataPurpose::HeldOut),
    )?;
    Ok((train, held))
}

/// Reads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<ScoreNet> {
    let bytes = std::fs::read(path).map_err(|e| MsgmError::io(path, e))?;
    let net = read_checkpoint(&bytes, cfg.sde)?;
    if *net.architecture() != cfg.arch {
        return Err(MsgmError::Checkpoint(format!(
            "architecture mismatch: checkpoint has {:?}, config expects {:?}",
            net.architecture(),
            cfg.arch
        )));
    }
    Ok(net)
}

/// Trains per the config, from `init` or a fresh network seeded by the
/// global seed.
pub fn train_model(cfg: &ExperimentConfig, init: Option<ScoreNet>) -> Result<(ScoreNet, LossCurve)> {
    let (data, _) = datasets(cfg)?;
    let net = init.unwrap_or_else(|| ScoreNet::init(cfg.seed, cfg.arch.clone(), cfg.sde));
    train(&cfg.plan, &data, net)
}

pub fn run_train(cfg: &ExperimentConfig, init: Option<ScoreNet>) -> Result<String> {
    let (net, curve) = train_model(cfg, init)?;
    write_file(&cfg.out_dir.join("model.ckpt"), &write_checkpoint(&net))?;
    write_file(&cfg.out_dir.join("loss.csv"), &csv_bytes(|b| curve.write_csv(b))?)?;
    write_file(
        &cfg.out_dir.join("loss.svg"),
        svg::loss_curve(&curve, &format!("{} loss", cfg.name)).as_bytes(),
    )?;
    Ok(format!(
        "trained {} for {} steps: final L_g {:.4} (mean of last {})",
        cfg.plan.mode,
        curve.len(),
        curve.tail_mean_l_g(1000),
        curve.len().min(1000)
    ))
}

pub fn draw_samples(cfg: &ExperimentConfig, model: &(impl ScoreModel + ?Sized)) -> Result<SampleBatch> {
    let s = &cfg.sampler;
    pc_sample(
        model,
        &cfg.sde,
        s.n_samples,
        s.n_steps,
        s.snr,
        s.corrector_steps,
        &mut cfg.data_stream(DataPurpose::Sampling),
    )
}

fn labels(cfg: &ExperimentConfig, points: &Tensor) -> Vec<usize> {
    points.row_iter().map(|r| cfg.mixture.bayes_component(r).0).collect()
}

fn write_scatter(cfg: &ExperimentConfig, points: &Tensor, file: &str, title: &str) -> Result<()> {
    let svg = svg::scatter(points, &labels(cfg, points), cfg.field.rect, title);
    write_file(&cfg.out_dir.join(file), svg.as_bytes())
}

pub fn run_sample(cfg: &ExperimentConfig, net: &ScoreNet) -> Result<String> {
    let batch = draw_samples(cfg, net)?;
    write_file(&cfg.out_dir.join("samples.csv"), &csv_bytes(|b| batch.write_csv(b))?)?;
    write_scatter(cfg, &batch.points, "samples.svg", &format!("{} samples", cfg.name))?;
    let ur = unlearning_ratio(&cfg.mixture, &batch.points, DEFAULT_UR_THRESHOLD)?;
    Ok(format!("{} samples written; UR {ur:.4}", batch.points.rows()))
}

pub fn held_out_nll(cfg: &ExperimentConfig, model: &(impl ScoreModel + ?Sized)) -> Result<NllReport> {
    let (_, held) = datasets(cfg)?;
    nll_report(model, &cfg.sde, &held, &cfg.likelihood)
}

pub fn run_nll(cfg: &ExperimentConfig, net: &ScoreNet) -> Result<String> {
    let report = held_out_nll(cfg, net)?;
    write_file(&cfg.out_dir.join("nll.csv"), &csv_bytes(|b| report.write_csv(b))?)?;
    Ok(format!(
        "NLL(D_g) {:.4} NLL(D_f) {:.4} gap {:.4}",
        report.d_g.mean,
        report.d_f.mean,
        report.gap()
    ))
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub ur: f64,
    pub nll_dg: f64,
    pub nll_df: f64,
}

pub fn write_results_csv<W: std::io::Write>(rows: &[EvalRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["method", "UR", "NLL_Dg", "NLL_Df"])?;
    for r in rows {
        wr.write_record([
            r.method.clone(),
            r.ur.to_string(),
            r.nll_dg.to_string(),
            r.nll_df.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| MsgmError::io("results csv", e))?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<EvalRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse()
                .map_err(|_| MsgmError::invalid(format!("bad number '{s}' in results csv")))
        };
        rows.push(EvalRow {
            method: rec.get(0).unwrap_or("").to_string(),
            ur: num(1)?,
            nll_dg: num(2)?,
            nll_df: num(3)?,
        });
    }
    Ok(rows)
}

/// UR from fresh samples plus held-out NLL.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &(impl ScoreModel + ?Sized),
) -> Result<(EvalRow, SampleBatch, NllReport)> {
    let batch = draw_samples(cfg, model)?;
    let ur = unlearning_ratio(&cfg.mixture, &batch.points, DEFAULT_UR_THRESHOLD)?;
    let report = held_out_nll(cfg, model)?;
    let row = EvalRow {
        method: cfg.name.clone(),
        ur,
        nll_dg: report.d_g.mean,
        nll_df: report.d_f.mean,
    };
    Ok((row, batch, report))
}

pub fn run_eval(cfg: &ExperimentConfig, net: &ScoreNet, ckpt: &Path) -> Result<String> {
    let (row, batch, report) = evaluate(cfg, net)?;
    write_file(
        &cfg.out_dir.join("results.csv"),
        &csv_bytes(|b| write_results_csv(std::slice::from_ref(&row), b))?,
    )?;
    write_file(&cfg.out_dir.join("nll.csv"), &csv_bytes(|b| report.write_csv(b))?)?;
    write_scatter(cfg, &batch.points, "scatter.svg", &format!("{} samples", cfg.name))?;
    let field = score_field(net, cfg.field.t, cfg.field.rect, cfg.field.resolution)?;
    write_file(
        &cfg.out_dir.join("quiver.svg"),
        svg::quiver(&field, &format!("{} score, t = {}", cfg.name, cfg.field.t)).as_bytes(),
    )?;
    let loss = ckpt.with_file_name("loss.csv");
    if let Ok(bytes) = std::fs::read(&loss) {
        let curve = LossCurve::read_csv(bytes.as_slice())?;
        write_file(
            &cfg.out_dir.join("loss.svg"),
            svg::loss_curve(&curve, &format!("{} loss", cfg.name)).as_bytes(),
        )?;
    }
    Ok(format!(
        "{}: UR {:.4} NLL(D_g) {:.4} NLL(D_f) {:.4}",
        row.method, row.ur, row.nll_dg, row.nll_df
    ))
}

pub fn write_field_csv<W: std::io::Write>(field: &ScoreField, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y", "u", "v"])?;
    for (i, v) in field.vectors.row_iter().enumerate() {
        let (x, y) = field.node(i);
        wr.write_record([x.to_string(), y.to_string(), v[0].to_string(), v[1].to_string()])?;
    }
    wr.flush().map_err(|e| MsgmError::io("field csv", e))?;
    Ok(())
}

/// `(x, y, u, v)` rows.
pub fn read_field_csv<R: std::io::Read>(r: R) -> Result<Vec<[f64; 4]>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut row = [0.0; 4];
        for (j, v) in row.iter_mut().enumerate() {
            let s = rec.get(j).unwrap_or("");
            *v = s
                .parse()
                .map_err(|_| MsgmError::invalid(format!("bad number '{s}' in field csv")))?;
        }
        out.push(row);
    }
    Ok(out)
}

pub fn run_field(cfg: &ExperimentConfig, model: &(impl ScoreModel + ?Sized), label: &str) -> Result<String> {
    let f = &cfg.field;
    let field = score_field(model, f.t, f.rect, f.resolution)?;
    write_file(
        &cfg.out_dir.join("field.csv"),
        &csv_bytes(|b| write_field_csv(&field, b))?,
    )?;
    write_file(
        &cfg.out_dir.join("field.svg"),
        svg::quiver(&field, &format!("{label} score, t = {}", f.t)).as_bytes(),
    )?;
    let truth = score_field(
        &AnalyticScore::new(cfg.mixture.clone(), cfg.sde),
        f.t,
        f.rect,
        f.resolution,
    )?;
    let a = field_alignment(&field, &truth, &Region::All)?;
    Ok(format!(
        "{} field nodes written; mean cosine to the exact score {:.4}",
        field.len(),
        a.mean_cosine
    ))
}

pub fn run_inpaint(cfg: &ExperimentConfig, net: &ScoreNet) -> Result<String> {
    let ip = &cfg.inpaint;
    let observed = Tensor::vector(ip.observed.clone());
    let batch = inpaint(
        net,
        &cfg.sde,
        &observed,
        &ip.mask,
        ip.n,
        cfg.sampler.n_steps,
        &mut cfg.data_stream(DataPurpose::Inpaint),
    )?;
    write_file(&cfg.out_dir.join("inpaint.csv"), &csv_bytes(|b| batch.write_csv(b))?)?;
    write_scatter(cfg, &batch.points, "inpaint.svg", &format!("{} inpainting", cfg.name))?;
    let rate = crate::evalbench::nsfg_assignment_rate(&cfg.mixture, &batch.points);
    Ok(format!(
        "{} completions; NSFG assignment rate {rate:.4}",
        batch.points.rows()
    ))
}

/// Fraction of `before` rows whose Bayes component survives in `after`.
pub fn preserved_fraction(cfg: &ExperimentConfig, before: &Tensor, after: &Tensor) -> f64 {
    let same = before
        .row_iter()
        .zip(after.row_iter())
        .filter(|(a, b)| cfg.mixture.bayes_component(a).0 == cfg.mixture.bayes_component(b).0)
        .count();
    same as f64 / before.rows().max(1) as f64
}

pub fn run_reconstruct(cfg: &ExperimentConfig, net: &ScoreNet) -> Result<String> {
    let (_, held) = datasets(cfg)?;
    let mut rng = cfg.data_stream(DataPurpose::Reconstruct);
    let t_star = cfg.sampler.t_star;
    let rg = reconstruct(net, &cfg.sde, &held.d_g, t_star, &mut rng)?;
    let rf = reconstruct(net, &cfg.sde, &held.d_f, t_star, &mut rng)?;
    let mut all = rg.data().to_vec();
    all.extend_from_slice(rf.data());
    let all = Tensor::matrix(rg.rows() + rf.rows(), rg.cols(), all);
    write_file(
        &cfg.out_dir.join("reconstruct.csv"),
        &csv_bytes(|b| write_points_csv(&all, b))?,
    )?;
    let keep = preserved_fraction(cfg, &held.d_g, &rg);
    let nsfg = crate::evalbench::nsfg_assignment_rate(&cfg.mixture, &rf);
    Ok(format!(
        "t_star {t_star}: D_g component preserved {keep:.4}; D_f still NSFG {nsfg:.4}"
    ))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub param: String,
    pub value: f64,
    pub ur: f64,
    pub nll_dg: f64,
    pub nll_df: f64,
    pub final_l_g: f64,
    /// Empty on success, otherwise the failure message.
    pub error: String,
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["param", "value", "UR", "NLL_Dg", "NLL_Df", "final_L_g", "error"])?;
    for r in rows {
        wr.write_record([
            r.param.clone(),
            r.value.to_string(),
            r.ur.to_string(),
            r.nll_dg.to_string(),
            r.nll_df.to_string(),
            r.final_l_g.to_string(),
            r.error.clone(),
        ])?;
    }
    wr.flush().map_err(|e| MsgmError::io("ablation csv", e))?;
    Ok(())
}

pub fn read_ablation_csv<R: std::io::Read>(r: R) -> Result<Vec<AblationRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse()
                .map_err(|_| MsgmError::invalid(format!("bad number '{s}' in ablation csv")))
        };
        rows.push(AblationRow {
            param: rec.get(0).unwrap_or("").to_string(),
            value: num(1)?,
            ur: num(2)?,
            nll_dg: num(3)?,
            nll_df: num(4)?,
            final_l_g: num(5)?,
            error: rec.get(6).unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

/// Configs of an ablation sweep, each differing from `cfg` in one value.
pub fn sweep_configs(cfg: &ExperimentConfig) -> Result<Vec<(String, f64, ExperimentConfig)>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| MsgmError::Config(vec!["ablate: the config has no [ablate] sweep".to_string()]))?;
    let mut out = Vec::new();
    match sweep {
        Sweep::Alpha(values) => {
            for &a in values {
                let mut c = cfg.clone();
                c.plan.alpha = a;
                c.name = format!("{} alpha={a}", cfg.plan.mode);
                out.push(("alpha".to_string(), a, c));
            }
        }
        Sweep::Interval(values) => {
            for &k in values {
                let mut c = cfg.clone();
                c.plan.update_interval = k;
                c.name = format!("{} interval={k}", cfg.plan.mode);
                out.push(("update_interval".to_string(), k as f64, c));
            }
        }
    }
    if out.is_empty() {
        return Err(MsgmError::Config(vec!["ablate: empty sweep".to_string()]));
    }
    Ok(out)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<String> {
    if !cfg.plan.mode.is_msgm() || cfg.plan.mode.is_finetune() {
        return Err(MsgmError::invalid(format!(
            "ablations train from scratch with Ort or Obt, not {}",
            cfg.plan.mode
        )));
    }
    let mut rows = Vec::new();
    let mut first_err = None;
    for (param, value, c) in sweep_configs(cfg)? {
        let outcome = train_model(&c, None).and_then(|(net, curve)| {
            write_file(
                &cfg.out_dir.join(format!("ablate_{param}_{value}.ckpt")),
                &write_checkpoint(&net),
            )?;
            let (row, _, _) = evaluate(&c, &net)?;
            Ok((row, curve.tail_mean_l_g(1000)))
        });
        let row = match outcome {
            Ok((r, lg)) => AblationRow {
                param,
                value,
                ur: r.ur,
                nll_dg: r.nll_dg,
                nll_df: r.nll_df,
                final_l_g: lg,
                error: String::new(),
            },
            Err(e) => {
                let msg = e.to_string().replace('\n', " ");
                first_err.get_or_insert(e);
                AblationRow {
                    param,
                    value,
                    ur: f64::NAN,
                    nll_dg: f64::NAN,
                    nll_df: f64::NAN,
                    final_l_g: f64::NAN,
                    error: msg,
                }
            }
        };
        let _ = writeln!(
            std::io::stderr(),
            "{}={}: {}",
            row.param,
            row.value,
            if row.error.is_empty() { "ok" } else { &row.error }
        );
        rows.push(row);
    }
    write_file(
        &cfg.out_dir.join("ablation.csv"),
        &csv_bytes(|b| write_ablation_csv(&rows, b))?,
    )?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(format!("{} ablation runs written", rows.len())),
    }
}

/// Training mode names accepted by `--mode`.
pub fn mode_names() -> Vec<&'static str> {
    TrainMode::ALL.iter().map(|m| m.name()).collect()
}

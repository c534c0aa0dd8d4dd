use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::Args;
use log::info;

use flowdistill::analysis::{
    endpoint_error, kd_baseline_distill, run_sweep, shifted_support, w1_distance, MetricsRecord,
};
use flowdistill::config::RunConfig;
use flowdistill::distill::{evaluation_noise, DistillCheckpoint, Distiller, HeadMode};
use flowdistill::flow::{integrate, train_teacher, CountingField, TimeGrid};
use flowdistill::nn::{Matrix, ParamFile, VelocityModel};
use flowdistill::trajstore::{generate_store, TrajectoryStore};

use crate::Common;

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Trajectory loss only (lambda_adv = 0).
    #[arg(long)]
    no_adv: bool,
    /// One projection head shared by every key timestep.
    #[arg(long)]
    single_head: bool,
    /// Rounds between checkpoints.
    #[arg(long, default_value_t = 50)]
    checkpoint_every: usize,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed rounds, leaving only the checkpoint.
    #[arg(long, hide = true)]
    halt_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Velocity model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4096)]
    count: usize,
    /// Uniform Euler steps from t = 1 to 0; defaults to the store's grid.
    #[arg(long)]
    steps: Option<usize>,
    /// Output CSV; defaults to samples.csv in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4096)]
    count: usize,
    #[arg(long)]
    steps: Option<usize>,
    /// Compare against this teacher's samples on the full grid instead of
    /// the dataset support.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    label: String,
}

pub struct Context {
    config: RunConfig,
    out: PathBuf,
}

fn load_model(path: &Path) -> Result<VelocityModel> {
    let file = ParamFile::load(path)?;
    VelocityModel::from_file(file).with_context(|| format!("{} is not a velocity model", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn stdout_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn samples_csv(x: &Matrix, nfe: usize) -> String {
    let mut out = format!("# nfe={nfe}\n");
    let header: Vec<String> = (0..x.cols()).map(|k| format!("x{k}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in x.iter_rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if let Some(out) = &common.out {
            config.out_dir = out.clone();
        }
        if let Some(threads) = common.threads {
            if threads == 0 {
                bail!("--threads must be positive");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .context("cannot configure the worker pool")?;
        }
        let out = config.out_dir.clone();
        Ok(Self { config, out })
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("cannot create {}", self.out.display()))
    }

    fn path_or(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.out.join(default))
    }

    pub fn print_config(&self) -> Result<()> {
        stdout_line(&self.config.to_json())
    }

    pub fn train_teacher(&self) -> Result<()> {
        self.ensure_out()?;
        let cfg = self.config.teacher_config();
        info!(
            "training teacher: {} iterations, batch {}",
            cfg.iterations, cfg.batch_size
        );
        let trained = train_teacher(&self.config.dataset()?, &cfg)?;
        let path = self.out.join("teacher.json");
        trained.model.to_file().save(&path)?;
        let mut csv = String::from("iteration,loss\n");
        for r in &trained.history {
            writeln!(csv, "{},{}", r.iteration, r.loss)?;
        }
        write(&self.out.join("teacher_loss.csv"), csv)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    pub fn synth(&self, teacher: Option<PathBuf>) -> Result<()> {
        self.ensure_out()?;
        let teacher = load_model(&self.path_or(teacher, "teacher.json"))?;
        let grid = self.config.grid()?;
        let store = generate_store(
            &teacher,
            self.config.store.count,
            &grid,
            self.config.stage_seed("synth"),
        )?;
        let path = self.out.join("store.jsonl");
        store.save(&path)?;
        info!("wrote {} trajectories to {}", store.len(), path.display());
        Ok(())
    }

    pub fn distill(&self, args: DistillArgs) -> Result<()> {
        self.ensure_out()?;
        let mut cfg = self.config.distill_config();
        if args.no_adv {
            cfg.lambda_adv = 0.0;
        }
        if args.single_head {
            cfg.heads = HeadMode::Shared;
        }
        let teacher = load_model(&self.path_or(args.teacher, "teacher.json"))?;
        let store = TrajectoryStore::load(self.path_or(args.store, "store.jsonl"), Some(&teacher))?;
        let ckpt_path = self.out.join("distill_checkpoint.json");
        let mut distiller = if args.resume {
            let ckpt = DistillCheckpoint::load(&ckpt_path)?;
            ckpt.ensure_matches(&cfg)?;
            info!("resuming after round {}", ckpt.state.rounds_done);
            Distiller::resume(&teacher, &store, cfg.clone(), ckpt.state)?
        } else {
            Distiller::new(&teacher, &store, cfg.clone())?
        };
        distiller.run(Some(args.checkpoint_every), args.halt_after, |d| {
            DistillCheckpoint {
                seed: cfg.seed,
                config: cfg.clone(),
                state: d.state(),
            }
            .save(&ckpt_path)
        })?;
        if distiller.rounds_done() < cfg.rounds {
            info!(
                "halted after round {}; checkpoint at {}",
                distiller.rounds_done(),
                ckpt_path.display()
            );
            return Ok(());
        }
        let outcome = distiller.finish();
        outcome.student.to_file().save(self.out.join("student.json"))?;
        let heads_dir = self.out.join("heads");
        fs::create_dir_all(&heads_dir).with_context(|| format!("cannot create {}", heads_dir.display()))?;
        for (i, head) in outcome.heads.iter().enumerate() {
            head.to_file().save(heads_dir.join(format!("head_{i}.json")))?;
        }
        let mut csv = String::from(flowdistill::distill::DistillMetrics::CSV_HEADER);
        csv.push('\n');
        for row in &outcome.metrics {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        write(&self.out.join("distill_metrics.csv"), csv)?;
        info!(
            "wrote student and {} heads to {}",
            outcome.heads.len(),
            self.out.display()
        );
        Ok(())
    }

    pub fn kd_baseline(&self, teacher: Option<PathBuf>, mismatch: f64) -> Result<()> {
        self.ensure_out()?;
        if !(mismatch >= 0.0 && mismatch.is_finite()) {
            bail!("--mismatch must be a finite non-negative number, got {mismatch}");
        }
        let teacher = load_model(&self.path_or(teacher, "teacher.json"))?;
        let p_d = shifted_support(&self.config.dataset()?, mismatch)?;
        let outcome = kd_baseline_distill(&teacher, &p_d, &self.config.grid()?, &self.config.kd_config())?;
        outcome.student.to_file().save(self.out.join("kd_student.json"))?;
        let mut csv = String::from("iteration,loss\n");
        for r in &outcome.history {
            writeln!(csv, "{},{}", r.iteration, r.loss)?;
        }
        write(&self.out.join("kd_loss.csv"), csv)?;
        info!(
            "wrote KD student ({} windows; sample it with --steps {})",
            outcome.schedule.intervals(),
            outcome.schedule.intervals()
        );
        Ok(())
    }

    pub fn analyze(&self, teacher: Option<PathBuf>, store: Option<PathBuf>) -> Result<()> {
        self.ensure_out()?;
        let teacher = load_model(&self.path_or(teacher, "teacher.json"))?;
        let store = TrajectoryStore::load(self.path_or(store, "store.jsonl"), None)?;
        if store.teacher_fingerprint() != teacher.fingerprint() {
            bail!("store was not generated by this teacher");
        }
        let report = run_sweep(
            &teacher,
            &store,
            &self.config.dataset()?,
            &self.config.distill_config(),
            &self.config.sweep_config(),
        )?;
        write(&self.out.join("sweep.csv"), report.to_csv())?;
        for (m, (u, kd)) in report.mismatches().iter().zip(
            report
                .medians(|r| r.useless_frequency)
                .into_iter()
                .zip(report.medians(|r| r.kd_w1)),
        ) {
            info!("M = {m}: median useless frequency {u:.5}, median KD W1 {kd:.4}");
        }
        Ok(())
    }

    fn draw(&self, model: &VelocityModel, count: usize, steps: Option<usize>) -> Result<(Matrix, usize)> {
        if count == 0 {
            bail!("--count must be positive");
        }
        let steps = steps.unwrap_or(self.config.store.steps);
        let grid = TimeGrid::uniform(steps)?;
        let z = evaluation_noise(self.config.stage_seed("sample"), count, model.dim());
        let counted = CountingField::new(model);
        let x = integrate(&counted, &z, &grid, steps, 0)?;
        Ok((x, counted.evaluations()))
    }

    pub fn sample(&self, args: SampleArgs) -> Result<()> {
        let model = load_model(&args.model)?;
        let (x, nfe) = self.draw(&model, args.count, args.steps)?;
        let path = match args.output {
            Some(p) => p,
            None => {
                self.ensure_out()?;
                self.out.join("samples.csv")
            }
        };
        write(&path, samples_csv(&x, nfe))?;
        info!("wrote {} samples ({nfe} evaluations) to {}", x.rows(), path.display());
        Ok(())
    }

    pub fn eval(&self, args: EvalArgs) -> Result<()> {
        self.ensure_out()?;
        let model = load_model(&args.model)?;
        let support = self.config.dataset()?;
        let (x, nfe) = self.draw(&model, args.count, args.steps)?;
        if x.cols() != 1 {
            bail!("eval reports W1 for 1-D models only");
        }
        let reference = match &args.reference {
            Some(path) => {
                let teacher = load_model(path)?;
                self.draw(&teacher, args.count, None)?.0
            }
            None => support.repeated(args.count),
        };
        let rows: Vec<&[f64]> = x.iter_rows().collect();
        let record = MetricsRecord {
            label: args.label,
            w1: w1_distance(x.as_slice(), reference.as_slice())?,
            endpoint_error: endpoint_error(&rows, &support.support)?,
            useless_frequency: None,
            seed: self.config.seed,
        };
        let csv = format!("{}\n{}\n", MetricsRecord::CSV_HEADER, record.csv_row());
        write(&self.out.join("eval.csv"), &csv)?;
        stdout_line(&format!(
            "{}: W1 {:.5}, endpoint error {:.5}, nfe {nfe}",
            record.label, record.w1, record.endpoint_error
        ))
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lstc::eval::{read_class_filter, read_detections, read_ground_truth, write_detections, EvalReport};
use lstc::feature_bank::FeatureBank;
use lstc::long_term::{second_order_decoupled, second_order_full, SecondOrderHead};
use lstc::numerics::Matrix;
use lstc::pipeline::{
    build_bank, gradient_suite, infer_dataset, pool_actors, sweep_km, synth_generate, train, Dataset, ModelState,
    SynthConfig, TrainConfig, GRAD_TOL,
};
use lstc::short_term::{export_heatmap, write_heatmap};
use lstc::{Error, Result};

#[derive(Parser)]
#[command(name = "lstc", version, about = "Long-short-term context action detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (dataset.json, config.json, gt.csv).
    Synth {
        /// JSON SynthConfig; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (writes the bank) or stage 2 (reads it).
    Train(TrainArgs),
    /// Score every (actor, class) pair of a dataset into a detection CSV.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-mAP of a detection CSV against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        deltas: Vec<f64>,
        #[arg(long)]
        weighted: bool,
        /// File with one evaluated class id per line.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// JSON report path.
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
    },
    /// Compare full and decoupled second-order attention; CSV to stdout.
    Oracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        max_l: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Stage-2 K/M grid on a dataset split 3:1 by video.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        m: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Feature bank utilities.
    Bank {
        #[command(subcommand)]
        cmd: BankCmd,
    },
    /// Export one actor's short-term attention map as PGM + CSV per frame.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Clip index within the dataset.
        #[arg(long)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        actor: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    stage: u32,
    #[arg(long)]
    data: PathBuf,
    /// Written by stage 1, read by stage 2.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// JSON TrainConfig; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum BankCmd {
    /// Print a per-video summary table.
    Inspect { file: PathBuf },
    /// One JSON object per record on stdout.
    ExportNdjson { file: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out } => {
            let cfg: SynthConfig = read_json(config.as_deref())?;
            let ds = synth_generate(&cfg)?;
            ds.save(&out)?;
            println!("wrote {} clips to {}", ds.clips.len(), out.display());
        }
        Cmd::Train(a) => cmd_train(a)?,
        Cmd::Infer { model, data, bank, out } => {
            let model = ModelState::load(model)?;
            let ds = Dataset::load(data)?;
            let bank = bank.map(|p| FeatureBank::load_with_dim(p, model.d())).transpose()?;
            let dets = infer_dataset(&model, &ds, bank.as_ref())?;
            write_detections(io::BufWriter::new(fs::File::create(&out)?), &dets)?;
            println!("wrote {} detections to {}", dets.len(), out.display());
        }
        Cmd::Eval { gt, det, deltas, weighted, classes, report } => {
            let gts = read_ground_truth(gt)?;
            let dets = read_detections(det)?;
            let filter = classes.map(read_class_filter).transpose()?;
            let rep = EvalReport::compute(&dets, &gts, &deltas, weighted, filter.as_ref())?;
            print!("{}", rep.table());
            fs::write(&report, serde_json::to_vec_pretty(&rep)?)?;
        }
        Cmd::Oracle { trials, max_l, seed } => cmd_oracle(trials, max_l, seed)?,
        Cmd::Gradcheck { seeds } => {
            let mut worst = 0.0f64;
            println!("seed,check,max_rel_err");
            for seed in 0..seeds {
                for rep in gradient_suite(seed)? {
                    println!("{seed},{},{:e}", rep.op_name, rep.max_rel_err);
                    worst = worst.max(rep.max_rel_err);
                }
            }
            eprintln!("worst relative error {worst:e} (tolerance {GRAD_TOL:e})");
            if worst >= GRAD_TOL {
                return Err(Error::NonFinite(format!("gradient check failed: {worst:e} >= {GRAD_TOL:e}")));
            }
        }
        Cmd::Sweep { data, k, m, config } => {
            let ds = Dataset::load(data)?;
            let base: TrainConfig = read_json(config.as_deref())?;
            let n_train = (ds.config.n_videos * 3 / 4).max(1);
            let (tr, te) = ds.split_videos(n_train);
            if te.clips.is_empty() {
                return Err(Error::Config("sweep needs at least two videos".into()));
            }
            let s1 = train(&tr, &TrainConfig { stage: 1, ..base.clone() }, None, None)?;
            let bank = build_bank(&ds)?;
            let stage2 = TrainConfig { stage: 2, steps: base.steps * 4, ..base };
            println!("K,M,long_term_map");
            for row in sweep_km(&tr, &te, &s1.model, &bank, &stage2, &k, &m)? {
                println!("{},{},{:.6}", row.k, row.m, row.metric);
            }
        }
        Cmd::Bank { cmd } => match cmd {
            BankCmd::Inspect { file } => print!("{}", FeatureBank::load(file)?.summary()),
            BankCmd::ExportNdjson { file } => {
                let bank = FeatureBank::load(file)?;
                let stdout = io::stdout();
                bank.export_ndjson(io::BufWriter::new(stdout.lock()))?;
            }
        },
        Cmd::Heatmap { model, data, clip, actor, out } => {
            let model = ModelState::load(model)?;
            let ds = Dataset::load(data)?;
            let c = ds.clips.get(clip).ok_or_else(|| {
                Error::InvalidArgument(format!("clip {clip} out of range ({} clips)", ds.clips.len()))
            })?;
            let actors = pool_actors(&c.features, &c.boxes)?;
            let (_, cache) = model.short.forward(&c.features, actors.features())?;
            let hm = export_heatmap(cache.attention(), actor)?;
            for p in write_heatmap(&hm, actor, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    cfg.stage = a.stage;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = Dataset::load(&a.data)?;
    let t = Instant::now();
    let outcome = if a.stage == 1 {
        let init = a.init.map(ModelState::load).transpose()?;
        let out = train(&ds, &cfg, init.as_ref(), None)?;
        out.bank.as_ref().expect("stage 1 builds a bank").save(&a.bank)?;
        out
    } else {
        let init = a
            .init
            .ok_or_else(|| Error::Config("stage 2 needs --init <stage-1 model>".into()))?;
        let init = ModelState::load(init)?;
        let bank = FeatureBank::load_with_dim(&a.bank, init.d())?;
        train(&ds, &cfg, Some(&init), Some(&bank))?
    };
    outcome.model.save(&a.out)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(a.out.with_extension("loss.csv"), curve)?;
    println!(
        "stage {} trained {} steps in {:.2?}; final batch loss {:.6}",
        a.stage,
        outcome.loss_curve.len(),
        t.elapsed(),
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_oracle(trials: usize, max_l: usize, seed: u64) -> Result<()> {
    if trials == 0 || max_l == 0 {
        return Err(Error::Config("--trials and --max-l must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = io::stdout().lock();
    writeln!(out, "L,time_full,time_decoupled,max_abs_diff")?;
    let mut worst = 0.0f64;
    for l in 1..=max_l {
        let (mut t_full, mut t_dec, mut diff) = (0.0, 0.0, 0.0f64);
        for _ in 0..trials {
            let head = SecondOrderHead::new(16, 8, &mut rng);
            let q = Matrix::random_normal(4, 16, 1.0, &mut rng);
            let ctx = Matrix::random_normal(l, 16, 1.0, &mut rng);
            let t = Instant::now();
            let full = second_order_full(&q, &ctx, &head)?;
            t_full += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let dec = second_order_decoupled(&q, &ctx, &head)?;
            t_dec += t.elapsed().as_secs_f64();
            diff = diff.max(full.max_abs_diff(&dec)?);
        }
        worst = worst.max(diff);
        writeln!(out, "{l},{t_full:e},{t_dec:e},{diff:e}")?;
    }
    if worst >= 1e-9 {
        return Err(Error::NonFinite(format!("full and decoupled paths differ by {worst:e}")));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

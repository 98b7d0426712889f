use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tlss_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tlss_core::pipeline::{self, files};
use tlss_core::synthdata::{load_dataset_with_dim, save_dataset};
use tlss_core::{distill, pretrain, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "tlss", version, about = "Long-tailed self-supervised pretraining with OOD samples and guided distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `paths.out_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the long-tailed ID train split, a balanced ID test split and the OOD pool.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_id: Option<PathBuf>,
        #[arg(long)]
        out_ood: Option<PathBuf>,
        #[arg(long)]
        out_test: Option<PathBuf>,
    },
    /// Stage 1: contrastive pretraining with tail-aware OOD sampling.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        id: Option<PathBuf>,
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
    },
    /// Stage 2: guided distillation of a stage-1 checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        id: Option<PathBuf>,
        #[arg(long)]
        f_ckpt: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
    },
    /// Train a linear probe on a frozen checkpoint and report metrics.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        id_train: Option<PathBuf>,
        #[arg(long)]
        id_test: Option<PathBuf>,
        /// Use 1% of the labels.
        #[arg(long)]
        few_shot: bool,
    },
    /// Baseline and full method end to end, with a comparison table.
    RunAll {
        #[command(flatten)]
        common: Common,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn load(c: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            cfg = cfg.with_seed(seed);
        }
        let out = c.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
        Ok(Self { cfg, out, quiet: c.quiet })
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    fn ensure_out(&self, file: &Path) -> Result<()> {
        match file.parent() {
            Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
            _ => Ok(()),
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out_id, out_ood, out_test } => {
            let ctx = Ctx::load(&common)?;
            let (id_p, ood_p, test_p) =
                (ctx.path(&out_id, files::ID_TRAIN), ctx.path(&out_ood, files::OOD), ctx.path(&out_test, files::ID_TEST));
            let data = pipeline::generate(&ctx.cfg)?;
            for (ds, p) in [(&data.train, &id_p), (&data.ood, &ood_p), (&data.test, &test_p)] {
                ctx.ensure_out(p)?;
                save_dataset(ds, p)?;
            }
            let counts = data.train.class_counts();
            for (c, n) in counts.iter().enumerate() {
                ctx.say(&format!("class {c}: {n}"));
            }
            ctx.say(&format!("OOD pool: {}", data.ood.len()));
            ctx.say(&format!("wrote {}, {}, {}", id_p.display(), ood_p.display(), test_p.display()));
        }
        Command::Pretrain { common, id, ood, out_ckpt } => {
            let ctx = Ctx::load(&common)?;
            let id_p = ctx.path(&id, files::ID_TRAIN);
            let ood_p = ctx.path(&ood, files::OOD);
            let ck_p = ctx.path(&out_ckpt, files::F_CKPT);
            require(&id_p)?;
            require(&ood_p)?;
            let dim = ctx.cfg.data.dim;
            let train = load_dataset_with_dim(&id_p, dim)?;
            let pool = load_dataset_with_dim(&ood_p, dim)?;
            let out = pipeline::pretrain(&ctx.cfg.stage_one(), &train, Some(&pool))?;
            ctx.ensure_out(&ck_p)?;
            save_checkpoint(&Checkpoint { encoder: out.encoder, velocity: Some(out.velocity), cluster: None }, &ck_p)?;
            let log_p = ck_p.with_file_name(files::PRETRAIN_LOG);
            pretrain::write_pretrain_log(&log_p, &out.log)?;
            if let Some(last) = out.log.last() {
                ctx.say(&format!("epoch {}: L_CPT {:.4}, {} OOD samples", last.epoch, last.l_cpt, last.n_ood_sampled));
            }
            ctx.say(&format!("wrote {} and {}", ck_p.display(), log_p.display()));
        }
        Command::Distill { common, id, f_ckpt, out_ckpt } => {
            let ctx = Ctx::load(&common)?;
            let id_p = ctx.path(&id, files::ID_TRAIN);
            let f_p = ctx.path(&f_ckpt, files::F_CKPT);
            let g_p = ctx.path(&out_ckpt, files::G_CKPT);
            require(&f_p)?;
            require(&id_p)?;
            let f = load_checkpoint(&f_p)?.encoder;
            let train = load_dataset_with_dim(&id_p, f.config.input_dim)?;
            let out = pipeline::distill(&ctx.cfg, &f, &train)?;
            ctx.ensure_out(&g_p)?;
            save_checkpoint(&Checkpoint { encoder: out.encoder, velocity: None, cluster: Some(out.index.clusters) }, &g_p)?;
            let log_p = g_p.with_file_name(files::DISTILL_LOG);
            distill::write_distill_log(&log_p, &out.log)?;
            if let Some(last) = out.log.last() {
                ctx.say(&format!("epoch {}: L_GL {:.4}", last.epoch, last.l_gl));
            }
            ctx.say(&format!("wrote {} and {}", g_p.display(), log_p.display()));
        }
        Command::Probe { common, ckpt, id_train, id_test, few_shot } => {
            let ctx = Ctx::load(&common)?;
            let ck_p = ctx.path(&ckpt, files::G_CKPT);
            let tr_p = ctx.path(&id_train, files::ID_TRAIN);
            let te_p = ctx.path(&id_test, files::ID_TEST);
            for p in [&ck_p, &tr_p, &te_p] {
                require(p)?;
            }
            let enc = load_checkpoint(&ck_p)?.encoder;
            let train = load_dataset_with_dim(&tr_p, enc.config.input_dim)?;
            let test = load_dataset_with_dim(&te_p, enc.config.input_dim)?;
            let report = pipeline::evaluate(&ctx.cfg, &enc, &train, &test, few_shot)?;
            let stem = if few_shot { "few_shot_metrics" } else { "probe_metrics" };
            std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
            let csv_p = ctx.out.join(format!("{stem}.csv"));
            report.write_csv(&csv_p)?;
            let txt_p = ctx.out.join(format!("{stem}.txt"));
            std::fs::write(&txt_p, format!("{report}\n")).map_err(|e| Error::io(&txt_p, e))?;
            ctx.say(&report.to_string());
            ctx.say(&format!("wrote {}", csv_p.display()));
        }
        Command::RunAll { common } => {
            let ctx = Ctx::load(&common)?;
            let summary = pipeline::run_all(&ctx.cfg, &ctx.out, &mut |m| ctx.say(m))?;
            ctx.say("");
            ctx.say(&pipeline::comparison_text(&summary.baseline, &summary.full));
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TLSS_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("TLSS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line surface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lgd_core::backbone::{extract_features, Branch};
use lgd_core::config::{RunConfig, KEYS};
use lgd_core::density::encode_density;
use lgd_core::episodes::synthetic_benchmark;
use lgd_core::eval::{evaluate, run_ablation, Suite};
use lgd_core::mldl::encode_similarity;
use lgd_core::tensor::Tensor;
use lgd_core::trainer::{adapt_and_predict, train_base_with, TraceRow};

use crate::checkpoint;
use crate::dataset::{load_scenes, materialize_benchmark};
use crate::formats::{annotation_for, read_annotation, read_dmap, read_image, read_roi, write_dmap, write_preview};
use crate::report;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "lgdcount", version, about = "One-shot scene-specific crowd counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark described by a config file.
    Synth {
        /// Config file; `bench.*` keys and `seed` are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; receives `train.tsv` and `test.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Final checkpoint path. Interval snapshots go next to it.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV (`iter,loss,lr,skipped`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit prototypes on one annotated support and count the queries.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation record of the support image.
        #[arg(long)]
        support: PathBuf,
        /// Support image; defaults to the path named in the record.
        #[arg(long)]
        support_image: Option<PathBuf>,
        #[arg(long = "query", required = true)]
        queries: Vec<PathBuf>,
        /// Region-of-interest mask (binary PGM).
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-query density maps.
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the checkpoint with the fitted prototypes.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
        /// Also write one similarity plane per prototype and query.
        #[arg(long)]
        export_similarity: bool,
    },
    /// Evaluate a checkpoint on the scenes of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed that picks each scene's support image.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train and evaluate every variant of an experiment suite on the
    /// synthetic benchmark.
    Ablate {
        /// `prototypes`, `dilation` or `components`.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Render a raw density map as a PNG preview.
    ExportDensity {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// List every config key with its default value.
    Keys,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iter,loss,lr,skipped\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.lr, r.skipped));
    }
    s
}

fn snapshot_path(out: &Path, iter: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}-{iter:06}.lgdc"))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "query".into())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut say = |s: String| -> Result<()> { writeln!(out, "{s}").map_err(|e| Error::io(Path::new("<stdout>"), e)) };
    match cli.command {
        Command::Synth { spec, seed, out: dir } => {
            let cfg = load_config(spec.as_deref(), seed)?;
            let bench = synthetic_benchmark(&cfg.bench, cfg.seed)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (train, test) = materialize_benchmark(&bench, &dir)?;
            say(format!("{}\n{}", train.display(), test.display()))?;
        }
        Command::Train {
            manifest,
            config,
            seed,
            out: ckpt,
            trace,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let scenes = load_scenes(&manifest)?;
            let outcome = train_base_with(&scenes, &cfg.model, &cfg.train, cfg.seed, |i, m| {
                checkpoint::save(&snapshot_path(&ckpt, i), m)
                    .map_err(|e| lgd_core::Error::Data(e.to_string()))
            })?;
            checkpoint::save(&ckpt, &outcome.model)?;
            if let Some(t) = trace {
                write_text(&t, &trace_csv(&outcome.trace))?;
            }
            say(format!(
                "trained {} iterations, {} episodes skipped; checkpoint {} ({})",
                outcome.trace.len(),
                outcome.skipped,
                ckpt.display(),
                checkpoint::file_hash(&ckpt)?
            ))?;
        }
        Command::Adapt {
            checkpoint: ckpt,
            support,
            support_image,
            queries,
            roi,
            config,
            out_dir,
            save_checkpoint,
            export_similarity,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let model = checkpoint::load(&ckpt)?;
            let record = read_annotation(&support)?;
            let image_path = support_image.unwrap_or_else(|| support.parent().unwrap_or(Path::new("")).join(&record.image));
            let simg = read_image(&image_path)?;
            let ann = annotation_for(&record, simg.height(), simg.width(), &support)?;
            let gt = encode_density(&ann, cfg.train.density_sigma, (simg.height(), simg.width()))?;
            let roi = roi.as_deref().map(read_roi).transpose()?;
            let qimgs = queries.iter().map(|q| read_image(q)).collect::<Result<Vec<_>>>()?;
            let qrefs: Vec<_> = qimgs.iter().collect();
            let name = image_path.display().to_string();
            let a = adapt_and_predict(&model, &name, &simg, &gt, &qrefs, roi.as_ref())?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for ((q, img), (dm, count)) in queries.iter().zip(&qimgs).zip(&a.predictions) {
                write_dmap(&out_dir.join(format!("{}.dmap", stem(q))), dm.grid())?;
                if export_similarity {
                    let f = extract_features(model.backbone(), model.params(), img.tensor(), Branch::Query)?;
                    let ldsm = encode_similarity(&a.prototypes, &f)?;
                    let s = ldsm.delta().shape();
                    for v in 0..s[0] {
                        let plane = Tensor::new(vec![1, s[1], s[2]], ldsm.plane(v).to_vec())?;
                        write_dmap(&out_dir.join(format!("{}.ldsm{v}.dmap", stem(q))), &plane)?;
                    }
                }
                say(format!("{}\t{count:.3}", q.display()))?;
            }
            if let Some(p) = save_checkpoint {
                checkpoint::save_adapted(&p, &model, &a.prototypes)?;
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            manifest,
            config,
            seed,
            json,
            table,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let model = checkpoint::load(&ckpt)?;
            let scenes = load_scenes(&manifest)?;
            let rep = evaluate(&model, &scenes, cfg.seed, cfg.train.density_sigma)?;
            let text = report::eval_table(&rep);
            if let Some(p) = json {
                let hash = checkpoint::file_hash(&ckpt)?;
                write_text(&p, &report::to_text(&report::eval_json(&rep, &cfg, &hash)))?;
            }
            if let Some(p) = table {
                write_text(&p, &text)?;
            }
            say(text)?;
        }
        Command::Ablate {
            suite,
            config,
            json,
            table,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let suite = Suite::parse(&suite).map_err(|e| Error::Usage(e.to_string()))?;
            let mut progress = |s: &str| eprintln!("{s}");
            let t = run_ablation(&suite, &cfg, &mut progress)?;
            let text = report::ablation_table(&t);
            if let Some(p) = json {
                write_text(&p, &report::to_text(&report::ablation_json(&t, &cfg)))?;
            }
            if let Some(p) = table {
                write_text(&p, &text)?;
            }
            say(text)?;
        }
        Command::ExportDensity { input, output } => {
            let dm = read_dmap(&input)?;
            write_preview(&output, dm.grid())?;
        }
        Command::Keys => {
            let defaults = RunConfig::default();
            for (k, doc) in KEYS {
                say(format!("{k} = {}\t# {doc}", defaults.get(k)?))?;
            }
        }
    }
    Ok(())
}

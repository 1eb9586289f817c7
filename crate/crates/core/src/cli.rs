//! The `emobank` command-line tool.
//!
//! Every command reads an optional TOML config (`--config`), uses `--seed`
//! for all of its randomness and writes into `--out`. Commands that need a
//! corpus read `--corpus <dir>` when given and otherwise regenerate it from
//! the config's `[data]` section.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::Config;
use crate::diffusion::{prepare_samples, quartile_accuracy, train_diffusion, DiffusionModel, TrainSample};
use crate::embedder::{train_embedder, EmbedderModel, EmotionPrior};
use crate::error::{Error, Result};
use crate::eval::{
    self, code_purity, generate_and_score, interpolate, interpolation_curve, modality_ablation, project_2d,
    prompts_from_samples, write_csv, AblationArm, MetricReport,
};
use crate::synthdata::{emotion_name, export_corpus, generate_corpus, import_corpus, ClipRecord};

const CSV_HELP: &str = "\
Output files (all under --out):
  gen-data         corpus/ (clip_NNNNN.dclp + index.jsonl), gen_data.json
  train-embedder   embedder.dceb, train_embedder.json,
                   embedder_loss.csv: step,loss
  train-diffusion  diffusion.dcdf, train_diffusion.json,
                   diffusion_loss.csv: step,total,denoising,cls,vq
  eval-cluster     eval_cluster.json,
                   embeddings.csv: clip_id,identity,emotion,intensity,e0..e{d-1}
  eval-ablation    eval_ablation.json,
                   ablation.csv: arm,emotion,d_cls
  interp           interp.json,
                   interp.csv: step,alpha,p_<emotion> for every emotion
  sample           sample.json,
                   samples.csv: index,source_clip,target,predicted,swap_target,swap_predicted
  project          project.json,
                   projection.csv: clip_id,identity,emotion,intensity,x,y

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training divergence.";

#[derive(Debug, Parser)]
#[command(name = "emobank", version, about = "Emotion-conditioned toy video diffusion", after_help = CSV_HELP)]
pub struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus directory written by gen-data; regenerated from the config if omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedderArg {
    /// Embedder checkpoint (default: <out>/embedder.dceb).
    #[arg(long)]
    pub embedder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffusionArg {
    /// Diffusion checkpoint (default: <out>/diffusion.dcdf).
    #[arg(long)]
    pub diffusion: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (seeded by --seed).
    GenData,
    /// Train the emotion embedder with InfoNCE.
    TrainEmbedder {
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Train denoiser, emotion bank and discriminator on a frozen embedder.
    TrainDiffusion {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
    },
    /// Clustering strength of the emotion priors.
    EvalCluster {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
    },
    /// Clustering strength with audio only, visual only and both streams.
    EvalAblation {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
    },
    /// Interpolate between two emotion prompts and score generated latents.
    Interp {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
        #[command(flatten)]
        diffusion: DiffusionArg,
        /// Start emotion index.
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// End emotion index.
        #[arg(long, default_value_t = 1)]
        to: usize,
        /// Generated latents per interpolation point.
        #[arg(long, default_value_t = 16)]
        draws: usize,
    },
    /// Generate latents for every emotion and score them.
    Sample {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
        #[command(flatten)]
        diffusion: DiffusionArg,
    },
    /// 2-D principal-component projection of the emotion priors.
    Project {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        embedder: EmbedderArg,
    },
}

struct Ctx {
    cfg: Config,
    hash: String,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn report(&self, metric: &str) -> MetricReport {
        MetricReport::new(metric, self.seed, &self.hash)
    }

    fn corpus(&self, arg: &CorpusArg) -> Result<Vec<ClipRecord>> {
        match &arg.corpus {
            Some(dir) => import_corpus(dir),
            None => generate_corpus(&self.cfg.data, self.cfg.data.seed),
        }
    }

    fn embedder(&self, arg: &EmbedderArg) -> Result<EmbedderModel> {
        EmbedderModel::load(&arg.embedder.clone().unwrap_or_else(|| self.out.join("embedder.dceb")))
    }

    fn diffusion(&self, arg: &DiffusionArg) -> Result<DiffusionModel> {
        DiffusionModel::load(&arg.diffusion.clone().unwrap_or_else(|| self.out.join("diffusion.dcdf")))
    }

    fn latent_shape(&self) -> Vec<usize> {
        let d = &self.cfg.data;
        vec![d.frames, d.latent_channels, d.latent_height, d.latent_width]
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("emobank: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { hash: cfg.hash(), cfg, seed: cli.seed, out: cli.out };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainEmbedder { corpus } => cmd_train_embedder(&ctx, corpus),
        Command::TrainDiffusion { corpus, embedder } => cmd_train_diffusion(&ctx, corpus, embedder),
        Command::EvalCluster { corpus, embedder } => eval_cluster(&ctx, corpus, embedder),
        Command::EvalAblation { corpus, embedder } => eval_ablation(&ctx, corpus, embedder),
        Command::Interp { corpus, embedder, diffusion, from, to, draws } => {
            interp(&ctx, corpus, embedder, diffusion, *from, *to, *draws)
        }
        Command::Sample { corpus, embedder, diffusion } => cmd_sample(&ctx, corpus, embedder, diffusion),
        Command::Project { corpus, embedder } => project(&ctx, corpus, embedder),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let corpus = generate_corpus(&ctx.cfg.data, ctx.seed)?;
    export_corpus(&corpus, &ctx.out.join("corpus"))?;
    let mut r = ctx.report("gen_data");
    r.insert("clips", corpus.len())
        .insert("identities", ctx.cfg.data.identities)
        .insert("emotions", ctx.cfg.data.emotions)
        .insert("frames", ctx.cfg.data.frames);
    r.write(&ctx.out.join("gen_data.json"))
}

/// Mean of the first (or last) `n` entries of a non-empty curve.
fn window_mean(v: &[f64], from_start: bool, n: usize) -> f64 {
    let n = n.min(v.len());
    let w = if from_start { &v[..n] } else { &v[v.len() - n..] };
    w.iter().sum::<f64>() / n as f64
}

fn cmd_train_embedder(ctx: &Ctx, corpus: &CorpusArg) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let run = train_embedder(&corpus, &ctx.cfg.embedder, ctx.seed)?;
    run.model.save(&ctx.out.join("embedder.dceb"))?;
    let rows: Vec<Vec<String>> = run.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]).collect();
    write_csv(&ctx.out.join("embedder_loss.csv"), &["step", "loss"], &rows)?;
    let mut r = ctx.report("train_embedder");
    r.insert("steps", run.losses.len())
        .insert("initial_eval_loss", run.initial_eval_loss)
        .insert("final_eval_loss", run.final_eval_loss);
    if !run.losses.is_empty() {
        r.insert("first_window_loss", window_mean(&run.losses, true, 20))
            .insert("last_window_loss", window_mean(&run.losses, false, 20));
    }
    r.write(&ctx.out.join("train_embedder.json"))
}

fn cmd_train_diffusion(ctx: &Ctx, corpus: &CorpusArg, embedder: &EmbedderArg) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let embedder = ctx.embedder(embedder)?;
    let samples = prepare_samples(&corpus, &embedder)?;
    let run = train_diffusion(
        &corpus,
        &embedder,
        &ctx.cfg.diffusion,
        &ctx.cfg.bank,
        ctx.cfg.data.emotions,
        ctx.seed,
    )?;
    run.model.save(&ctx.out.join("diffusion.dcdf"))?;
    let rows: Vec<Vec<String>> = run
        .curve
        .iter()
        .map(|c| vec![c.step.to_string(), num(c.total), num(c.denoising), num(c.cls), num(c.vq)])
        .collect();
    write_csv(&ctx.out.join("diffusion_loss.csv"), &["step", "total", "denoising", "cls", "vq"], &rows)?;
    let den: Vec<f64> = run.curve.iter().map(|c| c.denoising).collect();
    let quartiles = quartile_accuracy(&run.model, &samples, ctx.cfg.eval.quartile_evals, ctx.seed)?;
    let purity = code_purity(&run.model, &samples)?;
    let mut r = ctx.report("train_diffusion");
    r.insert("steps", run.curve.len())
        .insert("dead_code_reseeds", run.reseeds)
        .insert("quartile_accuracy", quartiles.iter().map(|q| q.0).collect::<Vec<_>>())
        .insert("quartile_counts", quartiles.iter().map(|q| q.1).collect::<Vec<_>>())
        .insert("code_purity", purity.purity)
        .insert("majority_codes_distinct", purity.distinct)
        .insert("majority_codes", purity.majority.values().copied().collect::<Vec<_>>());
    if !den.is_empty() {
        r.insert("first_window_denoising", window_mean(&den, true, 50))
            .insert("last_window_denoising", window_mean(&den, false, 50));
    }
    r.write(&ctx.out.join("train_diffusion.json"))
}

fn priors(corpus: &[ClipRecord], embedder: &EmbedderModel) -> Result<Vec<Vec<f64>>> {
    eval::ablation_means(corpus, embedder, AblationArm::Both)
}

fn eval_cluster(ctx: &Ctx, corpus: &CorpusArg, embedder: &EmbedderArg) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let embedder = ctx.embedder(embedder)?;
    let mus = priors(&corpus, &embedder)?;
    let labelled: Vec<(Vec<f64>, usize)> =
        corpus.iter().zip(&mus).map(|(c, m)| (m.clone(), c.emotion as usize)).collect();
    let stats = eval::cluster_stats(&labelled)?;
    let mut r = ctx.report("eval_cluster");
    r.insert("d_cls", stats.d_cls)
        .insert("d_intra", stats.d_intra)
        .insert("d_inter", stats.d_inter)
        .insert(
            "per_emotion",
            stats
                .per_class
                .iter()
                .map(|(e, v)| (emotion_name(*e), json!(v)))
                .collect::<serde_json::Map<_, _>>(),
        );
    r.write(&ctx.out.join("eval_cluster.json"))?;
    let d = embedder.d_s();
    let mut header: Vec<String> = ["clip_id", "identity", "emotion", "intensity"].map(String::from).to_vec();
    header.extend((0..d).map(|i| format!("e{i}")));
    let rows: Vec<Vec<String>> = corpus
        .iter()
        .zip(&mus)
        .map(|(c, m)| {
            let mut row = vec![c.clip_id.to_string(), c.identity.to_string(), c.emotion.to_string(), c.intensity.to_string()];
            row.extend(m.iter().map(|x| num(*x)));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&ctx.out.join("embeddings.csv"), &header, &rows)
}

fn eval_ablation(ctx: &Ctx, corpus: &CorpusArg, embedder: &EmbedderArg) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let embedder = ctx.embedder(embedder)?;
    let result = modality_ablation(&corpus, &embedder)?;
    let mut r = ctx.report("eval_ablation");
    let mut rows = Vec::new();
    for (arm, per) in &result.per_emotion {
        let obj: serde_json::Map<String, serde_json::Value> =
            per.iter().map(|(e, v)| (emotion_name(*e), json!(v))).collect();
        r.insert(arm.name(), obj);
        r.insert(&format!("pooled_{}", arm.name()), result.pooled[arm]);
        for (e, v) in per {
            rows.push(vec![arm.name().to_string(), emotion_name(*e), num(*v)]);
        }
    }
    r.insert("ordering_both_gt_visual_gt_audio", result.ordering_holds());
    r.write(&ctx.out.join("eval_ablation.json"))?;
    write_csv(&ctx.out.join("ablation.csv"), &["arm", "emotion", "d_cls"], &rows)
}

fn diffusion_inputs(
    ctx: &Ctx,
    corpus: &CorpusArg,
    embedder: &EmbedderArg,
    diffusion: &DiffusionArg,
) -> Result<(DiffusionModel, Vec<TrainSample>, Vec<Vec<f64>>)> {
    let corpus = ctx.corpus(corpus)?;
    let embedder = ctx.embedder(embedder)?;
    let model = ctx.diffusion(diffusion)?;
    let samples = prepare_samples(&corpus, &embedder)?;
    let prompts = prompts_from_samples(&samples, model.dims.emotions)?;
    Ok((model, samples, prompts))
}

fn interp(
    ctx: &Ctx,
    corpus: &CorpusArg,
    embedder: &EmbedderArg,
    diffusion: &DiffusionArg,
    from: usize,
    to: usize,
    draws: usize,
) -> Result<()> {
    let (model, samples, prompts) = diffusion_inputs(ctx, corpus, embedder, diffusion)?;
    if from >= prompts.len() || to >= prompts.len() {
        return Err(Error::argument(format!("emotion index must be below {}", prompts.len())));
    }
    let as_prior = |v: &Vec<f64>| EmotionPrior { mu: v.clone(), sigma2: vec![0.0; v.len()], sample: v.clone() };
    let steps = ctx.cfg.eval.interp_steps;
    let path = interpolate(&as_prior(&prompts[from]), &as_prior(&prompts[to]), steps)?;
    let curve = interpolation_curve(
        &model,
        &samples,
        &path,
        draws,
        &ctx.latent_shape(),
        ctx.cfg.diffusion.guidance_scale,
        ctx.seed,
    )?;
    let names: Vec<String> = (0..model.dims.emotions).map(|e| format!("p_{}", emotion_name(e))).collect();
    let mut header = vec!["step", "alpha"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut row = vec![i.to_string(), num(i as f64 / (steps - 1) as f64)];
            row.extend(p.iter().map(|x| num(*x)));
            row
        })
        .collect();
    write_csv(&ctx.out.join("interp.csv"), &header, &rows)?;
    let mut r = ctx.report("interp");
    r.insert("from", emotion_name(from))
        .insert("to", emotion_name(to))
        .insert("steps", steps)
        .insert("draws", draws)
        .insert("target_probability", curve.iter().map(|p| p[to]).collect::<Vec<_>>());
    r.write(&ctx.out.join("interp.json"))
}

fn cmd_sample(ctx: &Ctx, corpus: &CorpusArg, embedder: &EmbedderArg, diffusion: &DiffusionArg) -> Result<()> {
    let (model, samples, prompts) = diffusion_inputs(ctx, corpus, embedder, diffusion)?;
    let report = generate_and_score(
        &model,
        &samples,
        &prompts,
        ctx.cfg.eval.samples_per_emotion,
        &ctx.latent_shape(),
        ctx.cfg.diffusion.guidance_scale,
        ctx.seed,
    )?;
    let rows: Vec<Vec<String>> = report
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                i.to_string(),
                p.source_clip.to_string(),
                p.target.to_string(),
                eval::argmax(&p.probs).to_string(),
                p.swap_target.to_string(),
                eval::argmax(&p.swap_probs).to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("samples.csv"),
        &["index", "source_clip", "target", "predicted", "swap_target", "swap_predicted"],
        &rows,
    )?;
    let corpus_means = eval::corpus_channel_means(&samples, ctx.cfg.data.latent_channels);
    let mut r = ctx.report("sample");
    r.insert("samples", report.pairs.len())
        .insert("sampler_steps", model.schedule.sampler_steps)
        .insert("emo_accuracy", report.accuracy)
        .insert("swap_changed_fraction", report.swap_changed)
        .insert("generated_channel_means", report.channel_means.clone())
        .insert("corpus_channel_means", corpus_means);
    r.write(&ctx.out.join("sample.json"))
}

fn project(ctx: &Ctx, corpus: &CorpusArg, embedder: &EmbedderArg) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let embedder = ctx.embedder(embedder)?;
    let mus = priors(&corpus, &embedder)?;
    let proj = project_2d(&mus)?;
    let rows: Vec<Vec<String>> = corpus
        .iter()
        .zip(&proj.coords)
        .map(|(c, xy)| {
            vec![
                c.clip_id.to_string(),
                c.identity.to_string(),
                c.emotion.to_string(),
                c.intensity.to_string(),
                num(xy[0]),
                num(xy[1]),
            ]
        })
        .collect();
    write_csv(&ctx.out.join("projection.csv"), &["clip_id", "identity", "emotion", "intensity", "x", "y"], &rows)?;
    let mut r = ctx.report("project");
    r.insert("explained_variance", proj.explained.to_vec())
        .insert("total_variance", proj.total_variance)
        .insert("degenerate", proj.degenerate);
    r.write(&ctx.out.join("project.json"))
}

/// Convenience for tests: run with a slice of string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("emobank").chain(args.iter().copied()))
}

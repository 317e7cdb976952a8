use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dualgan::data::{
    generate_dataset, load_png, oracle_scorer, save_png, AttributeScorer, Dataset, SyntheticSpec, ATTRIBUTES,
};
use dualgan::editing::{collect_scored_codes, edit_sequence, evaluate_edit, fit_direction, DirectionSet, FitParams};
use dualgan::extractor::FeatureExtractor;
use dualgan::inversion::{load_encoder, train_inversion};
use dualgan::latent::{LatentPair, MappedPair};
use dualgan::metrics::{
    identity_rescoring, lpips_diversity, rows, texture_consistency, DiversityMode, DiversityReport,
};
use dualgan::rng::stream;
use dualgan::training::{fid_proxy, reference_features, train};
use dualgan::{load_config, Checkpoint, Error, GeneratorStack, ModelConfig, Tensor};

#[derive(Parser)]
#[command(name = "dualgan", version, about = "Dual latent space GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    /// Independent z and p per image.
    Free,
    /// One shared p, z resampled per image.
    #[value(name = "fix_p", alias = "fix-p")]
    FixP,
    /// One shared z, p resampled per image.
    #[value(name = "fix_z", alias = "fix-z")]
    FixZ,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset.
    Dataset {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator stack and critic.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config override `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, value_enum, default_value = "free")]
        mode: SampleMode,
        #[arg(long)]
        out: PathBuf,
        /// Also write each image's initial feature map as raw little-endian f32.
        #[arg(long)]
        dump_f0: bool,
    },
    /// Fit per-attribute edit directions in both mapped spaces.
    FitDirections {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated attribute names; all oracle attributes by default.
        #[arg(long, value_delimiter = ',')]
        attrs: Vec<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an edit strip: the origin plus `steps` edited images.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        directions: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lambda_z: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lambda_p: f64,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an inversion encoder against a frozen checkpoint.
    InvertTrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Encode a PNG and re-render it.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation metrics; prints JSON then a table.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        directions: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// FID-proxy against dataset features.
    Fid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Perceptual diversity with both codes, z only and p only resampled.
    Lpips {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attribute re-scoring of an edit over fresh latents.
    Rescoring {
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Identity change along edit strips, normalized by the edited attribute change.
    IdRescoring {
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Spread of one attribute across p swaps with z fixed.
    Texture {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "hue")]
        attr: String,
        #[arg(long, default_value_t = 50)]
        latents: usize,
        #[arg(long, default_value_t = 20)]
        swaps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    directions: PathBuf,
    #[arg(long)]
    attr: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lambda_z: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lambda_p: f64,
    #[arg(long, default_value_t = 6)]
    steps: usize,
    #[arg(long, default_value_t = 200)]
    latents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn config(path: Option<&PathBuf>, overrides: &[String]) -> dualgan::Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ModelConfig::desk(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Validation {
            key: o.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn oracles(names: &[String]) -> dualgan::Result<Vec<Box<dyn AttributeScorer>>> {
    names
        .iter()
        .map(|n| Ok(Box::new(oracle_scorer(n)?) as Box<dyn AttributeScorer>))
        .collect()
}

fn all_oracles() -> Vec<Box<dyn AttributeScorer>> {
    let names: Vec<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
    oracles(&names).expect("built-in attribute names")
}

fn refs(v: &[Box<dyn AttributeScorer>]) -> Vec<&dyn AttributeScorer> {
    v.iter().map(|b| b.as_ref()).collect()
}

fn image(t: &Tensor<f32>, i: usize) -> Tensor<f32> {
    t.narrow(0, i, 1).reshape(&t.shape()[1..])
}

fn write_strip(images: &Tensor<f32>, out: &Path) -> dualgan::Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    (0..images.shape()[0])
        .map(|i| {
            let p = out.join(format!("{i:04}.png"));
            save_png(&image(images, i), &p)?;
            Ok(p)
        })
        .collect()
}

fn emit(value: Value, table: Option<String>) {
    println!("{value}");
    if let Some(t) = table {
        println!("{t}");
    }
}

fn sample_pair(stack: &GeneratorStack<f32>, seed: u64, count: usize, mode: SampleMode) -> LatentPair<f32> {
    let pair = stack.draw_latents(&mut stream(seed, "sample", 0), count);
    let shared = stack.draw_latents(&mut stream(seed, "sample.shared", 0), 1);
    let shape = pair.z.shape().to_vec();
    match mode {
        SampleMode::Free => pair,
        SampleMode::FixP => LatentPair {
            z: pair.z,
            p: shared.p.broadcast_to(&shape),
        },
        SampleMode::FixZ => LatentPair {
            z: shared.z.broadcast_to(&shape),
            p: pair.p,
        },
    }
}

fn edit_eval(
    a: &EditArgs,
) -> dualgan::Result<(
    GeneratorStack<f32>,
    Checkpoint,
    dualgan::editing::EditEvaluation,
    MappedPair<f32>,
)> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
    let dirs = DirectionSet::load(&a.directions)?;
    let dir = dirs.get(&a.attr)?;
    let scorers = all_oracles();
    let ev = evaluate_edit(
        &stack,
        dir,
        a.lambda_z,
        a.lambda_p,
        a.steps,
        a.latents,
        a.seed,
        &refs(&scorers),
    )?;
    let mapped = stack.map_latents(&stack.draw_latents(&mut stream(a.seed, "edit.test", 0), a.latents))?;
    Ok((stack, ck, ev, mapped))
}

fn metric(m: Metric) -> dualgan::Result<()> {
    match m {
        Metric::Fid {
            ckpt,
            data,
            samples,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
            let ex = FeatureExtractor::<f32>::from_checkpoint(&ck)?;
            let ds = Dataset::load(&data)?;
            let real = reference_features(&ex, &ds, samples, seed);
            let v = fid_proxy(&stack, &ex, &real, samples, seed)?;
            emit(
                json!({"metric": "fid_proxy", "value": v, "samples": samples, "step": ck.step}),
                Some(format!("fid_proxy  {v:.4}  ({samples} samples, step {})", ck.step)),
            );
        }
        Metric::Lpips {
            ckpt,
            samples,
            reps,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
            let ex = FeatureExtractor::<f32>::from_checkpoint(&ck)?;
            let d = |mode| lpips_diversity(&stack, &ex, mode, samples, reps, seed);
            let r = DiversityReport::new(
                d(DiversityMode::All)?,
                d(DiversityMode::VaryZ)?,
                d(DiversityMode::VaryP)?,
                samples,
                reps,
            );
            emit(serde_json::to_value(&r)?, Some(r.to_table()));
        }
        Metric::Rescoring { edit } => {
            let (_, _, ev, _) = edit_eval(&edit)?;
            let table = format!("{}\nmonotone strips: {:.3}", ev.report.to_table(), ev.monotone_fraction);
            emit(serde_json::to_value(&ev)?, Some(table));
        }
        Metric::IdRescoring { edit } => {
            let (stack, ck, ev, mapped) = edit_eval(&edit)?;
            let ex = FeatureExtractor::<f32>::from_checkpoint(&ck)?;
            let dirs = DirectionSet::load(&edit.directions)?;
            let seq = edit_sequence(&mapped, dirs.get(&edit.attr)?, edit.lambda_z, edit.lambda_p, edit.steps)?;
            // features[image][step]
            let mut features = vec![Vec::with_capacity(seq.len()); mapped.batch()];
            for m in &seq {
                let emb = rows(&ex.embed(&stack.render_chunked(m, 64)?));
                for (i, f) in emb.into_iter().enumerate() {
                    features[i].push(f);
                }
            }
            let v = identity_rescoring(&features, ev.report.c_e)?;
            emit(
                json!({"metric": "id_rescoring", "value": v, "c_e": ev.report.c_e, "edited": edit.attr}),
                Some(format!("id_rescoring  {v:.4}  (C_e {:.4})", ev.report.c_e)),
            );
        }
        Metric::Texture {
            ckpt,
            attr,
            latents,
            swaps,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
            let scorer = oracle_scorer(&attr)?;
            let v = texture_consistency(&stack, &scorer, latents, swaps, seed)?;
            emit(
                json!({"metric": "texture_consistency", "attribute": attr, "value": v, "latents": latents, "swaps": swaps, "variant": ck.config.variant.to_string()}),
                Some(format!(
                    "texture_consistency[{attr}]  {v:.5}  ({latents} latents x {swaps} swaps)"
                )),
            );
        }
    }
    Ok(())
}

fn run(cmd: Command) -> dualgan::Result<()> {
    match cmd {
        Command::Dataset { spec, count, seed, out } => {
            let spec = match spec {
                Some(p) => SyntheticSpec::load(p)?,
                None => SyntheticSpec::default(),
            };
            let ds = generate_dataset(&spec, count, seed)?;
            ds.save(&out)?;
            println!("{}", json!({"images": ds.len(), "out": out}));
        }
        Command::Train {
            config: path,
            data,
            out,
            resume,
            overrides,
        } => {
            let cfg = config(path.as_ref(), &overrides)?;
            let ds = Dataset::load(&data)?;
            let s = train(&cfg, &ds, &out, resume.as_deref())?;
            println!(
                "{}",
                json!({"final_step": s.final_step, "checkpoint": s.final_checkpoint, "log": out.join("log.jsonl")})
            );
        }
        Command::Sample {
            ckpt,
            seed,
            count,
            mode,
            out,
            dump_f0,
        } => {
            if count == 0 {
                return Err(Error::Invalid("count must be at least 1".into()));
            }
            let stack = GeneratorStack::<f32>::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let mapped = stack.map_latents(&sample_pair(&stack, seed, count, mode))?;
            let files = write_strip(&stack.render_chunked(&mapped, 32)?, &out)?;
            let mut f0_files = Vec::new();
            if dump_f0 {
                for i in 0..count {
                    let f0 = stack.f0(&mapped.select(i).p_plus)?;
                    let bytes: Vec<u8> = f0.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    let p = out.join(format!("f0-{i:04}.bin"));
                    fs::write(&p, bytes)?;
                    f0_files.push(p);
                }
            }
            println!("{}", json!({"images": files, "f0": f0_files}));
        }
        Command::FitDirections {
            ckpt,
            attrs,
            samples,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ck.config.clone();
            let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
            let names = if attrs.is_empty() {
                ATTRIBUTES.iter().map(|s| s.to_string()).collect()
            } else {
                attrs
            };
            let scorers = oracles(&names)?;
            let samples = samples.unwrap_or(cfg.edit_samples);
            let codes = collect_scored_codes(&stack, &refs(&scorers), samples, seed)?;
            let params = FitParams {
                quantile: cfg.svm_quantile,
                c: cfg.svm_c,
                seed,
                ..FitParams::default()
            };
            let mut set = DirectionSet {
                n: cfg.n,
                d: cfg.d,
                directions: Vec::new(),
            };
            for (k, name) in names.iter().enumerate() {
                let dir = fit_direction(&codes.z_plus, &codes.p_plus, &codes.scores[k], name, &params)?;
                let acc = |f: &Option<dualgan::editing::SpaceFit>| f.as_ref().map(|f| f.validation_accuracy);
                log::info!(
                    "{name}: validation accuracy z {:?} p {:?}",
                    acc(&dir.fit.z),
                    acc(&dir.fit.p)
                );
                set.directions.push(dir);
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            set.save(&out)?;
            let summary: Vec<Value> = set
                .directions
                .iter()
                .map(|d| {
                    json!({
                        "attribute": d.attribute,
                        "z_accuracy": d.fit.z.as_ref().map(|f| f.validation_accuracy),
                        "p_accuracy": d.fit.p.as_ref().map(|f| f.validation_accuracy),
                    })
                })
                .collect();
            println!("{}", json!({"out": out, "samples": samples, "directions": summary}));
        }
        Command::Edit {
            ckpt,
            directions,
            attr,
            lambda_z,
            lambda_p,
            steps,
            seed,
            out,
        } => {
            let stack = GeneratorStack::<f32>::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let dirs = DirectionSet::load(&directions)?;
            let dir = dirs.get(&attr)?;
            let origin = stack.map_latents(&stack.draw_latents(&mut stream(seed, "sample", 0), 1))?;
            let seq = edit_sequence(&origin, dir, lambda_z, lambda_p, steps)?;
            let images = stack.render(&MappedPair::concat(&seq))?;
            let files = write_strip(&images, &out)?;
            let scorer = oracle_scorer(&attr)?;
            println!("{}", json!({"images": files, "scores": scorer.score_batch(&images)}));
        }
        Command::InvertTrain {
            ckpt,
            data,
            out,
            resume,
            steps,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = data.map(Dataset::load).transpose()?;
            let (state, _) = train_inversion(&ck, ds.as_ref(), &out, resume.as_deref(), steps)?;
            println!("{}", json!({"final_step": state.step, "out": out}));
        }
        Command::Invert {
            ckpt,
            encoder,
            image: path,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let stack = GeneratorStack::<f32>::from_checkpoint(&ck)?;
            let enc = load_encoder(&Checkpoint::load(&encoder)?)?;
            let img = load_png(&path)?;
            let r = ck.config.resolution;
            if img.shape() != [3, r, r] {
                return Err(Error::Shape {
                    what: "input image".into(),
                    expected: vec![3, r, r],
                    got: img.shape().to_vec(),
                });
            }
            let codes = enc.encode(&img.reshape(&[1, 3, r, r]))?;
            let recon = stack.render(&codes)?;
            fs::create_dir_all(&out)?;
            save_png(&recon.reshape(&[3, r, r]), out.join("reconstruction.png"))?;
            let mse = img
                .data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / img.numel() as f64;
            let latent = json!({"z_plus": codes.z_plus.data(), "p_plus": codes.p_plus.data(), "shape": [ck.config.n, ck.config.d]});
            fs::write(out.join("latent.json"), serde_json::to_string(&latent)?)?;
            println!(
                "{}",
                json!({"reconstruction": out.join("reconstruction.png"), "mse": mse})
            );
        }
        Command::Metrics { metric: m } => metric(m)?,
        Command::Serve {
            ckpt,
            encoder,
            directions,
            port,
        } => {
            let gan = Checkpoint::load(&ckpt)?;
            let enc = encoder.map(Checkpoint::load).transpose()?;
            let dirs = directions.map(DirectionSet::load).transpose()?;
            let engine = dualgan_service::Engine::new(gan, enc, dirs)?;
            dualgan_service::run(engine, port)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": error_kind(&e), "detail": e.to_string()}));
            ExitCode::from(2)
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::Validation { .. } => "validation",
        Error::Shape { .. } => "shape",
        Error::Checkpoint { .. } => "checkpoint",
        Error::NonFinite(_) => "non_finite",
        Error::Degenerate(_) => "degenerate",
        Error::UnknownAttribute(_) => "unknown_attribute",
        Error::Invalid(_) => "invalid",
        Error::Image { .. } => "image",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

//! `capgen` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use capgen::attack::{full_attack, gradient_color_allocation, random_color_allocation, subsample, AttackConfig, AttackResult};
use capgen::detector::{train_detector, TrainConfig};
use capgen::eot::TransformRanges;
use capgen::eval::{compare_variants, evaluate_patch, size_sweep, EvalConfig, EvalEot, EvalReport, PrPoint, SWEEP_RATIOS};
use capgen::io::{self, PatchArtifact};
use capgen::palette::{extract_base_colors, DEFAULT_K, DEFAULT_MAX_ITERS};
use capgen::patch::{quantize_patch, render_patch, RenderedPatch, DEFAULT_TAU};
use capgen::scene::{synthesize_dataset, LabeledScene, SceneConfig, DEFAULT_SIZE, DEFAULT_TEST_SCENES, DEFAULT_TRAIN_SCENES};
use capgen::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Map, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Default number of training scenes an attack optimizes over.
const DEFAULT_ATTACK_SCENES: usize = 16;

#[derive(Parser)]
#[command(name = "capgen", version, about = "Camouflaged adversarial patch generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster environment images into k base colors.
    ExtractColors {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize labeled train and test scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRAIN_SCENES)]
        train: usize,
        #[arg(long, default_value_t = DEFAULT_TEST_SCENES)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: usize,
        /// Tint backgrounds toward this palette.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Train the toy detector on the train split
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable occlusion augmentation.
        #[arg(long)]
        no_occlusion: bool,
        /// Per-epoch loss CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Optimize a patch against a detector.
    Attack {
        #[arg(long, value_enum)]
        mode: AttackMode,
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON run config; see README.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training scenes drawn for the attack.
        #[arg(long, default_value_t = DEFAULT_ATTACK_SCENES)]
        scenes: usize,
        /// Per-step loss CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// A patch with random, unoptimized logits.
    RandomPatch {
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = capgen::attack::DEFAULT_PATCH_SIZE)]
        width: usize,
        #[arg(long, default_value_t = capgen::attack::DEFAULT_PATCH_SIZE)]
        height: usize,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Swap a patch's palette for colors of new environment images.
    Recolor {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a patch as PNG
    Render {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Each pixel takes its most probable palette color.
        #[arg(long)]
        quantized: bool,
    },
    /// AP50 on the test split, with or without a patch.
    Eval {
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        /// Randomized transforms with this seed.
        #[arg(long)]
        eot_seed: Option<u64>,
        /// Precision-recall curve as PNG.
        #[arg(long)]
        curve_png: Option<PathBuf>,
    },
    /// AP50 of several patches side by side.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        patches: Vec<PathBuf>,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        /// Also sweep the patch ratio for every patch.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackMode {
    /// Optimize from a near-uniform start.
    Full,
    /// Optimize from a random allocation.
    FixedColors,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    attack: AttackConfig,
    eval: EvalConfig,
    eot: Option<TransformRanges>,
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ExtractColors { images, k, seed, max_iters, out } => {
            let imgs = io::load_png_dir(&images)?;
            let palette = extract_base_colors(&imgs, k, seed, max_iters)?;
            io::save_palette(&out, &palette)?;
            for c in palette.to_rgb8() {
                println!("{} {} {}", c[0], c[1], c[2]);
            }
        }
        Command::GenData { out, train, test, seed, size, palette } => {
            let tint = palette.as_deref().map(io::load_palette).transpose()?;
            let config = SceneConfig {
                width: size,
                height: size,
                tint,
                ..SceneConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train_scenes = synthesize_dataset(&mut rng, train, &config)?;
            let test_scenes = synthesize_dataset(&mut rng, test, &config)?;
            io::save_dataset(&out.join("train"), &train_scenes)?;
            io::save_dataset(&out.join("test"), &test_scenes)?;
            let meta = json!({
                "version": capgen::FORMAT_VERSION,
                "seed": seed,
                "train": train,
                "test": test,
                "size": size,
                "tint": palette.map(|p| p.display().to_string()),
            });
            write_json(&out.join("dataset.json"), &meta)?;
            println!("{train} train and {test} test scenes in {}", out.display());
        }
        Command::TrainDetector { data, out, epochs, lr, batch, seed, no_occlusion, losses } => {
            let scenes = load_split(&data, "train")?;
            let defaults = TrainConfig::default();
            let config = TrainConfig {
                epochs: epochs.unwrap_or(defaults.epochs),
                lr: lr.unwrap_or(defaults.lr),
                batch: batch.unwrap_or(defaults.batch),
                seed,
                occlusion: if no_occlusion { None } else { defaults.occlusion },
                ..defaults
            };
            let report = train_detector(&scenes, &config)?;
            let mut meta = Map::new();
            meta.insert("seed".into(), seed.into());
            meta.insert("epochs".into(), config.epochs.into());
            meta.insert("lr".into(), config.lr.into());
            meta.insert("batch".into(), config.batch.into());
            meta.insert("occlusion".into(), config.occlusion.is_some().into());
            meta.insert("scenes".into(), scenes.len().into());
            io::save_detector_with_meta(&out, &report.model, &meta)?;
            if let Some(path) = losses {
                let rows: Vec<_> = report.epoch_losses.iter().enumerate().map(|(i, &l)| (i, l, 0.0)).collect();
                write_text(&path, &io::loss_csv(&rows))?;
            }
            if let Some(last) = report.epoch_losses.last() {
                println!("final epoch loss {last:.4}");
            }
        }
        Command::Attack { mode, palette, detector, data, out, config, epochs, seed, scenes, losses } => {
            let run = load_run_config(config.as_deref())?;
            let mut attack = run.attack;
            if let Some(eot) = run.eot {
                attack.eot = eot;
            }
            if let Some(s) = seed.or(run.seed) {
                attack.seed = s;
            }
            if let Some(e) = epochs {
                attack.epochs = e;
            }
            attack.validate()?;
            let palette = io::load_palette(&palette)?;
            let model = io::load_detector(&detector)?;
            let pool = load_split(&data, "train")?;
            let picked = subsample(&pool, scenes, attack.seed);
            let result: AttackResult = match mode {
                AttackMode::Full => full_attack(&attack, &model, &picked, &palette)?,
                AttackMode::FixedColors => gradient_color_allocation(&attack, &model, &picked, &palette, attack.seed)?,
            };
            let mut meta = Map::new();
            meta.insert("mode".into(), mode_name(mode).into());
            meta.insert("seed".into(), attack.seed.into());
            meta.insert("scenes".into(), picked.len().into());
            meta.insert("best_loss".into(), result.best_loss.into());
            meta.insert("config".into(), serde_json::to_value(&attack)?);
            io::save_patch(
                &out,
                &PatchArtifact {
                    params: result.params.clone(),
                    palette,
                    meta,
                },
            )?;
            if let Some(path) = losses {
                write_text(&path, &io::loss_csv(&result.csv_rows()))?;
            }
            println!("best loss {:.4} over {} steps", result.best_loss, result.history.len());
        }
        Command::RandomPatch { palette, out, width, height, tau, seed } => {
            let palette = io::load_palette(&palette)?;
            let params = random_color_allocation(seed, width, height, palette.k(), tau)?;
            let mut meta = Map::new();
            meta.insert("mode".into(), "random".into());
            meta.insert("seed".into(), seed.into());
            io::save_patch(&out, &PatchArtifact { params, palette, meta })?;
        }
        Command::Recolor { patch, images, k, seed, out } => {
            let start = Instant::now();
            let artifact = io::load_patch(&patch)?;
            let imgs = io::load_png_dir(&images)?;
            let recolored = capgen::attack::fast_generate(&artifact, &imgs, k, seed)?;
            io::save_patch(&out, &recolored)?;
            println!("recolored in {:.3} s", start.elapsed().as_secs_f64());
        }
        Command::Render { patch, out, quantized } => {
            let artifact = io::load_patch(&patch)?;
            let rendered = if quantized {
                quantize_patch(&artifact.params, &artifact.palette)?
            } else {
                render_patch(&artifact.params, &artifact.palette)?
            };
            io::save_png(&out, rendered.width, rendered.height, &rendered.pixels)?;
        }
        Command::Eval { patch, detector, data, report, config, ratio, eot_seed, curve_png } => {
            let run = load_run_config(config.as_deref())?;
            let eval = eval_config(run, ratio, eot_seed);
            let model = io::load_detector(&detector)?;
            let scenes = load_split(&data, "test")?;
            let rendered = patch.as_deref().map(load_rendered).transpose()?;
            let mut rep = evaluate_patch(&model, &scenes, rendered.as_ref(), &eval)?;
            rep.patch = patch.map(|p| p.display().to_string());
            io::save_report(&report, &rep)?;
            if let Some(path) = curve_png {
                save_curve_png(&path, &rep)?;
            }
            println!("AP50 {:.4} (tp {}, fp {}, gt {})", rep.ap50, rep.true_positives, rep.false_positives, rep.ground_truths);
        }
        Command::Compare { patches, detector, data, ratio, sweep, out } => {
            let eval = eval_config(RunConfig::default(), ratio, None);
            let model = io::load_detector(&detector)?;
            let scenes = load_split(&data, "test")?;
            let variants = patches
                .iter()
                .map(|p| Ok((p.display().to_string(), load_rendered(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let table = compare_variants(&model, &scenes, &variants, &eval)?;
            println!("{:<40} {:>8}", "clean", format!("{:.4}", table.clean_ap50));
            for row in &table.rows {
                println!("{:<40} {:>8}", row.name, format!("{:.4}", row.ap50));
            }
            let mut doc = json!({ "version": capgen::FORMAT_VERSION, "comparison": table });
            if sweep {
                let mut sweeps = Map::new();
                for (name, p) in &variants {
                    let s = size_sweep(&model, &scenes, p, &SWEEP_RATIOS, &eval)?;
                    let line: Vec<String> = s.iter().map(|(r, ap)| format!("{r:.2}:{ap:.4}")).collect();
                    println!("{name} sweep {}", line.join(" "));
                    sweeps.insert(name.clone(), serde_json::to_value(s)?);
                }
                doc["sweep"] = Value::Object(sweeps);
            }
            if let Some(path) = out {
                write_json(&path, &doc)?;
            }
        }
    }
    Ok(())
}

fn mode_name(mode: AttackMode) -> &'static str {
    match mode {
        AttackMode::Full => "full",
        AttackMode::FixedColors => "fixed-colors",
    }
}

fn eval_config(run: RunConfig, ratio: Option<f64>, eot_seed: Option<u64>) -> EvalConfig {
    let mut eval = run.eval;
    if let Some(r) = ratio {
        eval.ratio = r;
    }
    if let Some(seed) = eot_seed.or(run.seed.filter(|_| run.eot.is_some())) {
        eval.eot = Some(EvalEot {
            ranges: run.eot.unwrap_or_default(),
            seed,
        });
    }
    eval
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_text(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_rendered(path: &Path) -> Result<RenderedPatch> {
    let a = io::load_patch(path)?;
    render_patch(&a.params, &a.palette)
}

/// `dir/split` when it holds a dataset, else `dir` itself.
fn load_split(dir: &Path, split: &str) -> Result<Vec<LabeledScene>> {
    let sub = dir.join(split);
    if sub.join(io::ANNOTATIONS_FILE).is_file() {
        io::load_dataset(&sub)
    } else {
        io::load_dataset(dir)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Recall on x, precision on y, drawn as the interpolated step envelope.
fn save_curve_png(path: &Path, report: &EvalReport) -> Result<()> {
    const N: usize = 200;
    let mut px = vec![1.0; 3 * N * N];
    let mut put = |x: usize, y: usize| {
        let (x, y) = (x.min(N - 1), y.min(N - 1));
        for c in 0..3 {
            px[c * N * N + (N - 1 - y) * N + x] = 0.0;
        }
    };
    for i in 0..N {
        put(i, 0);
        put(0, i);
    }
    let curve: &[PrPoint] = &report.curve;
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for (i, p) in curve.iter().enumerate().rev() {
        best = best.max(p.precision);
        envelope[i] = best;
    }
    let scale = |v: f64| (v.clamp(0.0, 1.0) * (N - 1) as f64).round() as usize;
    let mut prev_r = 0.0;
    for (p, &prec) in curve.iter().zip(&envelope) {
        for x in scale(prev_r)..=scale(p.recall) {
            put(x, scale(prec));
        }
        prev_r = p.recall;
    }
    io::save_png(path, N, N, &px)
}

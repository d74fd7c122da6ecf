use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xdkd_core::gradcheck::{primitive_suite, CheckResult, STEP};
use xdkd_core::harness::{self, composed_gradcheck, predict, saliency_alignment, saliency_maps, train_with, DistillConfig, Sample, TrainReport};
use xdkd_core::model::{DepthNet, LayerId};
use xdkd_core::saliency::Source;
use xdkd_core::synthetic::{dataset, SceneParams};

use crate::config::RunConfig;
use crate::dataset::{read_dataset, read_samples, write_dataset, SceneFiles};
use crate::error::{Error, IoContext, Result};
use crate::{ablation, checkpoint, pfm, pgm, report, xtd};

/// Errors above this fail `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

#[derive(Debug, Parser)]
#[command(name = "xdkd", version, about = "Radar-camera depth students with saliency and distribution distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes.
    GenData {
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write dd.pfm next to each scene.
        #[arg(long)]
        pfm: bool,
    },
    /// Train the wide teacher.
    TrainTeacher(TrainArgs),
    /// Train the student on depth supervision only.
    TrainStudent(TrainArgs),
    /// Train the student with both distillation terms.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Metrics of a checkpoint on a scene directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [50.0, 70.0, 80.0])]
        caps: Vec<f64>,
    },
    /// Write predicted depth (XTD and PFM) for every scene.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM maps of student and teacher for one scene.
    DumpSaliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// A scene directory (image.xtd, radar.xtd, dd.xtd, ds.xtd).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// `autodiff`, `composed`, or a single primitive name.
        #[arg(long)]
        module: Option<String>,
    },
    /// Train one plain student per fusion variant.
    Ablate {
        #[arg(long, default_value = "add,concat,attention,film,film_no_daspp")]
        kinds: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dmin: Option<f64>,
    #[arg(long)]
    pub dmax: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Scenes to report metrics on after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Print per-epoch losses.
    #[arg(long)]
    pub verbose: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        let flags = [("count", self.bins.map(|v| v.to_string())), ("tau", self.tau.map(float)), ("d_min", self.dmin.map(float)), ("d_max", self.dmax.map(float))];
        for (key, value) in flags {
            if let Some(v) = value {
                overrides.push(format!("bins.{key}={v}"));
            }
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// TOML float literal (always with a decimal point or exponent).
fn float(v: f64) -> String {
    format!("{v:?}")
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return 1;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, count, height, width, out, pfm } => gen_data(seed, count, height, width, &out, pfm),
        Command::TrainTeacher(args) => {
            let cfg = args.config.resolve()?;
            let model = DepthNet::new(&cfg.teacher_spec()?, cfg.teacher.seed)?;
            train_command(&args, &cfg, model, cfg.teacher.seed, &cfg.teacher_training()?, None)
        }
        Command::TrainStudent(args) => {
            let cfg = args.config.resolve()?;
            let model = DepthNet::new(&cfg.student_spec()?, cfg.model.seed)?;
            train_command(&args, &cfg, model, cfg.model.seed, &cfg.distill()?, None)
        }
        Command::Distill { train, teacher } => {
            let cfg = train.config.resolve()?;
            let teacher = checkpoint::load(&teacher)?;
            let model = DepthNet::new(&cfg.student_spec()?, cfg.model.seed)?;
            train_command(&train, &cfg, model, cfg.model.seed, &cfg.distill()?, Some(&teacher))
        }
        Command::Eval { model, data, caps } => {
            let model = checkpoint::load(&model)?;
            let samples = read_samples(&data)?;
            let metrics = harness::evaluate(&model, &samples, &caps)?;
            let mut out = report::metrics_table(&metrics);
            out.push('\n');
            for m in &metrics {
                report::metrics_lines(&mut out, m);
            }
            print!("{out}");
            Ok(())
        }
        Command::Predict { model, data, out } => predict_command(&model, &data, &out),
        Command::DumpSaliency { model, teacher, scene, out, layers } => dump_saliency(&model, &teacher, &scene, &out, layers),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::Ablate { kinds, config, data, eval, out } => {
            let cfg = config.resolve()?;
            let kinds = ablation::parse_kinds(&kinds)?;
            let threads = ablation::threads_from_env()?;
            let train = read_samples(&data)?;
            let eval = match &eval {
                Some(dir) => read_samples(dir)?,
                None => Vec::new(),
            };
            let rows = ablation::run(&kinds, &cfg.student_spec()?, cfg.model.seed, &train, &eval, &cfg.distill()?, threads)?;
            let table = ablation::table(&rows);
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir).at(&dir)?;
                cfg.echo(&dir)?;
                let path = dir.join("ablation.txt");
                fs::write(&path, table).at(&path)?;
            }
            Ok(())
        }
    }
}

fn gen_data(seed: u64, count: usize, height: usize, width: usize, out: &Path, with_pfm: bool) -> Result<()> {
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let params = SceneParams::default();
    let scenes = dataset(seed, count, height, width, &params)
        .map(|s| s.map(|s| SceneFiles::from_scene(&s)))
        .collect::<xdkd_core::Result<Vec<_>>>()?;
    write_dataset(out, &scenes, with_pfm)?;
    println!("wrote {count} scenes of {height}x{width} to {}", out.display());
    Ok(())
}

fn train_command(args: &TrainArgs, cfg: &RunConfig, mut model: DepthNet, seed: u64, dc: &DistillConfig, teacher: Option<&DepthNet>) -> Result<()> {
    let data = read_samples(&args.data)?;
    let eval = match &args.eval {
        Some(dir) => read_samples(dir)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&args.out).at(&args.out)?;
    cfg.echo(&args.out)?;
    let verbose = args.verbose;
    let start = Instant::now();
    let mut report = train_with(&mut model, &data, &eval, dc, teacher, &mut |e, l| {
        if verbose {
            eprintln!("epoch {:>3} depth {:.6} xkd {:.6} d2kd {:.6} total {:.6}", e + 1, l.depth, l.xkd, l.d2kd, l.total);
        }
    })?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    checkpoint::save(&model, seed, &args.out)?;
    report::write(&report, &args.out)?;
    println!("{}", summary_line(&report));
    Ok(())
}

fn summary_line(report: &TrainReport) -> String {
    let mut line = harness::summary(report);
    write!(line, " wall_time={:.1}s", report.wall_time_secs).unwrap();
    line
}

fn predict_command(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load(model)?;
    let scenes = read_dataset(data)?;
    for s in &scenes {
        let depth = predict(&model, &s.sample()?)?;
        let dir = out.join(&s.name);
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join("depth.xtd");
        xtd::write(&path, &depth).at(&path)?;
        let path = dir.join("depth.pfm");
        pfm::write(&path, &depth).at(&path)?;
    }
    println!("wrote {} depth maps to {}", scenes.len(), out.display());
    Ok(())
}

/// `image@16` -> `image16`, safe as a file stem.
fn layer_stem(layer: LayerId) -> String {
    layer.to_string().replace('@', "")
}

fn dump_saliency(model: &Path, teacher: &Path, scene: &Path, out: &Path, layers: Option<Vec<String>>) -> Result<()> {
    let student = checkpoint::load(model)?;
    let teacher = checkpoint::load(teacher)?;
    let layers: Vec<LayerId> = match layers {
        Some(list) => list.iter().map(|s| s.parse()).collect::<xdkd_core::Result<_>>()?,
        None => LayerId::DEFAULT_SET.to_vec(),
    };
    let sample: Sample = SceneFiles::read(scene)?.sample()?;
    fs::create_dir_all(out).at(out)?;
    for (net, source) in [(&student, Source::Student), (&teacher, Source::Teacher)] {
        for map in saliency_maps(net, &sample, &layers, source)? {
            let stem = format!("{}_{}", source.as_str(), layer_stem(map.layer));
            let path = out.join(format!("{stem}.xtd"));
            xtd::write(&path, &map.values).at(&path)?;
            let path = out.join(format!("{stem}.pgm"));
            pgm::write(&path, &map.values).at(&path)?;
        }
    }
    let cos = saliency_alignment(&student, &teacher, std::slice::from_ref(&sample), &layers)?;
    let mut text = String::new();
    for (layer, c) in layers.iter().zip(&cos) {
        writeln!(text, "{layer} = {c}").unwrap();
    }
    let path = out.join("alignment.txt");
    fs::write(&path, &text).at(&path)?;
    print!("{text}");
    Ok(())
}

/// Worst error of the student objective over the gradcheck seeds.
pub fn composed_check() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in GRADCHECK_SEEDS {
        worst = worst.max(composed_gradcheck(seed, STEP)?);
    }
    Ok(CheckResult { name: "composed_student".into(), max_error: worst })
}

fn gradcheck(module: Option<&str>) -> Result<()> {
    let seeds: Vec<u64> = GRADCHECK_SEEDS.collect();
    let mut results = Vec::new();
    let want_primitives = !matches!(module, Some("composed"));
    if want_primitives {
        let suite = primitive_suite(&seeds, STEP)?;
        let selected: Vec<CheckResult> = match module {
            None | Some("autodiff") => suite,
            Some(name) => suite.into_iter().filter(|r| r.name == name).collect(),
        };
        if selected.is_empty() {
            return Err(Error::config(format!("unknown gradcheck module `{}`", module.unwrap_or_default())));
        }
        results.extend(selected);
    }
    if matches!(module, None | Some("composed")) {
        results.push(composed_check()?);
    }
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.max_error < GRADCHECK_TOLERANCE;
        println!("{:<24} {:.3e} {}", r.name, r.max_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(xdkd_core::Error::Verification(format!("gradient mismatch in {}", failed.join(", "))).into())
    }
}


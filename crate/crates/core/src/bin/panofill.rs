use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use panofill::config::KeyValues;
use panofill::erp::{apply_mask_gray, make_fov_mask, FovSpec, Image};
use panofill::pipeline::{
    complete_with, evaluate, run_ablation, synth_dataset, train_adjust_stage, train_transformer_stage, train_vqgan1_stage,
    train_vqgan2_stage, AblationConfig, CompleteOptions, PipelineBundle, PipelineConfig, SamplingArm, CONFIG_KEYS,
};
use panofill::{Error, Result};

const OUT_ENV: &str = "PANOFILL_OUT";
const BUNDLE_FILE: &str = "bundle.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "panofill",
    about = "Diverse 360-degree panorama completion",
    after_help = "Any config key can be given as a flag, e.g. `--vqgan2.steps 50` or `--sampler.schedule=raster`.\n\
                  The output root defaults to $PANOFILL_OUT, then ./panofill-out."
)]
struct Cli {
    /// Output root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Plain-text `key = value` config applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arm {
    Raster,
    CircularPadding,
    CircularInference,
}

impl Arm {
    fn sampling(self) -> SamplingArm {
        match self {
            Arm::Raster => SamplingArm::Raster,
            Arm::CircularPadding => SamplingArm::CircularPadding,
            Arm::CircularInference => SamplingArm::CircularInference,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a procedural panorama set (`data.n` images at `train.h`).
    Synth {
        /// Subdirectory of the output root.
        #[arg(long, default_value = "data")]
        dir: String,
        /// Image height (defaults to `train.h`).
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train the full-panorama autoencoder, creating the bundle if needed.
    TrainVqgan2 {
        /// Image directory (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the masked-input encoder on the bundle's codebook.
    TrainVqgan1 {
        /// Image directory (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the token transformer on masked/full token pairs.
    TrainTransformer {
        /// Image directory (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the adjustment network.
    TrainAdjust {
        /// Image directory (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Complete one PNG panorama whose known region is `--fov`.
    Complete {
        /// 2:1 panorama; pixels outside the known region are ignored.
        #[arg(long)]
        input: PathBuf,
        /// Known region, e.g. `angular:90x90@0` (defaults to `eval.fov`).
        #[arg(long)]
        fov: Option<String>,
        /// Number of samples; sample `i` uses seed `sampler.seed + i`.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Sampling arm (defaults to the configured sampler).
        #[arg(long, value_enum)]
        arm: Option<Arm>,
        /// Also write per-token sampling records.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate the bundle on a PNG test set.
    Evaluate {
        /// Test image directory (defaults to `<out>/test`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sampling arm (defaults to the configured sampler).
        #[arg(long, value_enum)]
        arm: Option<Arm>,
    },
    /// Sampling and loss-term ablations; trains every arm it needs.
    Ablate {
        /// Comma-separated training seeds.
        #[arg(long, default_value = "11,12,13")]
        seeds: String,
        /// Skip the three inference arms.
        #[arg(long)]
        skip_sampling: bool,
        /// Skip the three loss-term arms.
        #[arg(long)]
        skip_loss: bool,
    },
}

/// Splits `--<config key> value` and `--<config key>=value` out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, KeyValues)> {
    let mut rest = Vec::new();
    let mut kv = KeyValues::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !CONFIG_KEYS.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?,
        };
        if kv.contains(&key) {
            return Err(Error::Config(format!("flag --{key} given twice")));
        }
        kv.set(&key, value);
    }
    Ok((rest, kv))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn load_images(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    paths.iter().map(|p| Image::load(p)).collect()
}

struct Ctx {
    out: PathBuf,
    config: PipelineConfig,
    overrides: KeyValues,
}

impl Ctx {
    fn bundle_path(&self) -> PathBuf {
        self.out.join(BUNDLE_FILE)
    }

    /// The saved bundle with command-line overrides applied, or a new one.
    fn bundle(&self) -> Result<PipelineBundle> {
        let p = self.bundle_path();
        if !p.exists() {
            return PipelineBundle::new(self.config.clone());
        }
        let mut b = PipelineBundle::load(&p)?;
        b.config.apply(&self.overrides)?;
        b.check()?;
        Ok(b)
    }

    fn existing_bundle(&self) -> Result<PipelineBundle> {
        if !self.bundle_path().exists() {
            return Err(Error::Config(format!("no bundle at {}; run the training commands first", self.bundle_path().display())));
        }
        self.bundle()
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(p)
    }

    fn data_dir(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.out.join(default))
    }
}

fn losses_text(losses: impl Iterator<Item = f64>) -> String {
    losses.enumerate().map(|(i, l)| format!("step={i} loss={l}\n")).collect()
}

fn run(cli: Cli, overrides: KeyValues) -> Result<()> {
    let out = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("panofill-out"));
    let mut config = match cli.preset {
        Preset::Desk => PipelineConfig::default(),
        Preset::Smoke => PipelineConfig::smoke(),
    };
    if let Some(p) = &cli.config {
        config.apply(&KeyValues::load(p)?)?;
    }
    config.apply(&overrides)?;
    config.validate()?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let ctx = Ctx { out, config, overrides };

    match cli.cmd {
        Cmd::Synth { dir, height } => {
            let h = height.unwrap_or(ctx.config.train_h);
            let set = synth_dataset(ctx.config.data_n, h, ctx.config.data_seed)?;
            let d = ctx.out.join(&dir);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            let mut sidecar = String::new();
            for (i, (img, spec)) in set.iter().enumerate() {
                img.save(&d.join(format!("{i:05}.png")))?;
                sidecar.push_str(&format!("image={i:05}.png {}\n", spec.to_line()));
            }
            ctx.write(&format!("{dir}/scenes.txt"), &sidecar)?;
            println!("wrote {} panoramas to {}", set.len(), d.display());
        }
        Cmd::TrainVqgan2 { data } => {
            let imgs = load_images(&ctx.data_dir(data, "data"))?;
            let mut b = ctx.bundle()?;
            let log = train_vqgan2_stage(&mut b, &imgs)?;
            ctx.write("logs/vqgan2.txt", &losses_text(log.terms.iter().map(|t| t.total)))?;
            b.save(&ctx.bundle_path())?;
            println!("vqgan2 trained; bundle {}", b.digest());
        }
        Cmd::TrainVqgan1 { data } => {
            let imgs = load_images(&ctx.data_dir(data, "data"))?;
            let mut b = ctx.existing_bundle()?;
            let log = train_vqgan1_stage(&mut b, &imgs)?;
            ctx.write("logs/vqgan1.txt", &losses_text(log.terms.iter().map(|t| t.total)))?;
            b.save(&ctx.bundle_path())?;
            println!("vqgan1 trained; bundle {}", b.digest());
        }
        Cmd::TrainTransformer { data } => {
            let imgs = load_images(&ctx.data_dir(data, "data"))?;
            let mut b = ctx.existing_bundle()?;
            let log = train_transformer_stage(&mut b, &imgs)?;
            ctx.write("logs/transformer.txt", &losses_text(log.losses.iter().copied()))?;
            b.save(&ctx.bundle_path())?;
            println!("transformer trained; bundle {}", b.digest());
        }
        Cmd::TrainAdjust { data } => {
            let imgs = load_images(&ctx.data_dir(data, "data"))?;
            let mut b = ctx.existing_bundle()?;
            let losses = train_adjust_stage(&mut b, &imgs)?;
            ctx.write("logs/adjust.txt", &losses_text(losses.into_iter()))?;
            b.save(&ctx.bundle_path())?;
            println!("adjustment network trained; bundle {}", b.digest());
        }
        Cmd::Complete { input, fov, samples, arm, trace } => {
            let b = ctx.existing_bundle()?;
            let img = Image::load(&input)?;
            let spec = match fov {
                Some(s) => FovSpec::parse(&s)?,
                None => b.config.eval.fov,
            };
            let mask = make_fov_mask(&spec, img.height(), img.width())?;
            let masked = apply_mask_gray(&img, &mask)?;
            let (mut sc, pad) = match arm {
                Some(a) => a.sampling().settings(&b.config.sampler),
                None => (b.config.sampler.clone(), panofill::kernels::PadMode::Zero),
            };
            sc.trace = trace;
            let outs = complete_with(&b, &masked, &mask, samples, &sc, CompleteOptions { decode_pad: pad, observer: None })?;
            let dir = ctx.out.join("complete");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (i, c) in outs.iter().enumerate() {
                c.image.save(&dir.join(format!("sample_{i:03}.png")))?;
                if trace {
                    let text: String = c.trace.iter().map(|r| r.to_line() + "\n").collect();
                    ctx.write(&format!("complete/sample_{i:03}.trace.txt"), &text)?;
                }
            }
            println!("wrote {} completions to {}", outs.len(), dir.display());
        }
        Cmd::Evaluate { data, arm } => {
            let b = ctx.existing_bundle()?;
            let imgs = load_images(&ctx.data_dir(data, "test"))?;
            let (sc, pad) = match arm {
                Some(a) => a.sampling().settings(&b.config.sampler),
                None => (b.config.sampler.clone(), panofill::kernels::PadMode::Zero),
            };
            let (report, _) = evaluate(&b, &imgs, &b.config.eval, &sc, pad)?;
            let p = ctx.write("report.txt", &report.to_text())?;
            println!("report written to {}", p.display());
        }
        Cmd::Ablate { seeds, skip_sampling, skip_loss } => {
            let mut a = AblationConfig::new(ctx.config.clone());
            a.seeds = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
                .collect::<Result<_>>()?;
            a.run_sampling = !skip_sampling;
            a.run_loss = !skip_loss;
            let report = run_ablation(&a)?;
            let p = ctx.write("ablation.txt", &report.to_text())?;
            print!("{}", report.to_text());
            println!("ablation written to {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

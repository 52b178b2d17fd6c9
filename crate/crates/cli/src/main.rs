mod nets;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use leafnet::cascade::{evaluate, run_cascade, CascadeConfig, CascadeModels, Verdict};
use leafnet::features::{conv_layers, export_feature_maps};
use leafnet::preprocess::dataset::Manifest;
use leafnet::preprocess::{load_rgb, sample_patches, save_rgb_png, AugmentPolicy, LeafImage};
use leafnet::trainer::{train, write_history, xavier_init, TrainConfig};
use leafnet::wire::{serve, RemoteStage};
use leafnet::{count_params, synth, weights_io, StageModel, Tensor};
use nets::{load_stage, NetSpec};

#[derive(Parser)]
#[command(name = "leafnet", version, about = "Three-stage early-exit leaf classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer shapes and parameter counts of a network.
    Params {
        #[arg(long, default_value = "s")]
        net: NetSpec,
        #[arg(long)]
        classes: usize,
    },
    /// Write a freshly initialized weight archive.
    Init {
        #[arg(long)]
        net: NetSpec,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a threshold preset in config-file form.
    Config {
        #[arg(long, default_value = "mk")]
        preset: String,
    },
    /// Train one stage network.
    Train(TrainArgs),
    /// Classify one image and print the outcome as JSON.
    Infer {
        image: PathBuf,
        #[command(flatten)]
        cascade: CascadeArgs,
    },
    /// Run the cascade over a labeled manifest and print the per-stage report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cascade: CascadeArgs,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Serve one stage network over TCP until killed.
    Serve {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        net: Option<NetSpec>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Export convolution feature maps of one image as PGM files.
    Inspect {
        image: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        net: Option<NetSpec>,
        /// Layer indices; defaults to the first four convolutions.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a manifest from one sub-directory per class.
    Manifest {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a manifest into train and test manifests, stratified by class.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.167)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic four-class shapes dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CascadeArgs {
    /// Threshold file; keys as printed by `leafnet config`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "mk")]
    preset: String,
    #[arg(long)]
    stage1_weights: Option<PathBuf>,
    #[arg(long)]
    stage2_weights: Option<PathBuf>,
    #[arg(long)]
    stage3_weights: Option<PathBuf>,
    /// Use a stage-3 server instead of local weights.
    #[arg(long, value_name = "HOST:PORT", conflicts_with = "stage3_weights")]
    stage3_remote: Option<String>,
    #[arg(long, default_value_t = 2000)]
    remote_timeout_ms: u64,
    #[arg(long, default_value = "s")]
    stage1_net: NetSpec,
    #[arg(long, default_value = "w")]
    stage2_net: NetSpec,
    #[arg(long, default_value = "p")]
    stage3_net: NetSpec,
    /// Overrides one threshold, e.g. `--set top_seg=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the patch sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; without it a seeded split of --manifest is used.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.167)]
    val_fraction: f64,
    #[arg(long)]
    net: Option<NetSpec>,
    /// Defaults to the manifest's class count.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Defaults to 256, 128 or 512 for stage 1, 2 or 3.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Patches drawn per image when training stage 3.
    #[arg(long, default_value_t = 7)]
    patches: usize,
    #[arg(long, default_value_t = 1.0)]
    min_leaf_fraction: f64,
    /// Archive to start from instead of random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Params { net, classes } => cmd_params(&net, classes)?,
        Cmd::Init { net, classes, seed, out } => {
            let def = net.build(classes)?;
            weights_io::save_with_manifest(&xavier_init(&def, seed)?, &out)?;
            println!("wrote {} ({} classes) to {}", def.name, classes, out.display());
        }
        Cmd::Config { preset } => print!("{}", CascadeConfig::preset(&preset)?.to_kv_string()),
        Cmd::Train(args) => cmd_train(&args)?,
        Cmd::Infer { image, cascade } => return cmd_infer(&image, &cascade),
        Cmd::Eval { manifest, cascade, jobs } => cmd_eval(&manifest, &cascade, jobs)?,
        Cmd::Serve { stage, weights, net, addr } => {
            let net = net.unwrap_or_else(|| NetSpec::default_for(stage));
            let model = load_stage(stage, weights.as_deref(), &net, None)?;
            let server = serve(Arc::new(model), addr.as_str())?;
            println!("serving stage {stage} on {}", server.local_addr());
            std::io::stdout().flush()?;
            server.wait();
        }
        Cmd::Inspect { image, stage, weights, net, layers, out } => {
            let net = net.unwrap_or_else(|| NetSpec::default_for(stage));
            let model = load_stage(stage, weights.as_deref(), &net, None)?;
            let leaf = load_leaf(&image)?;
            let input = leaf.input_for(model.input_dims())?;
            let layers = if layers.is_empty() { conv_layers(model.def()).into_iter().take(4).collect() } else { layers };
            let files = export_feature_maps(model.def(), model.weights(), &input, &layers, &out)?;
            println!("wrote {} feature maps to {}", files.len(), out.display());
        }
        Cmd::Manifest { root, out } => {
            let (m, names) = Manifest::scan_class_dirs(&root)?;
            m.save(&out)?;
            for (i, n) in names.iter().enumerate() {
                println!("{i}\t{n}");
            }
        }
        Cmd::Split { manifest, test_fraction, seed, out } => {
            let m = Manifest::load(&manifest)?;
            let (train, test) = m.split(test_fraction, seed)?;
            fs::create_dir_all(&out)?;
            train.save(&out.join("train.txt"))?;
            test.save(&out.join("test.txt"))?;
            println!("{} train, {} test", train.len(), test.len());
        }
        Cmd::Synth { count, size, seed, out } => cmd_synth(count, size, seed, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_params(net: &NetSpec, classes: usize) -> Result<()> {
    let def = net.build(classes)?;
    let shapes = def.shapes()?;
    let specs = def.param_specs()?;
    println!("{} input {}x{}x{}", def.name, def.input_dims[0], def.input_dims[1], def.input_dims[2]);
    println!("{:>5}  {:<14} {:<14} {:>10}", "layer", "kind", "output", "params");
    for (i, (layer, shape)) in def.layers.iter().zip(&shapes).enumerate() {
        let n: usize = specs.iter().filter(|s| s.layer == i).map(|s| s.len()).sum();
        println!("{i:>5}  {:<14} {:<14} {n:>10}", layer.to_string(), shape.to_string());
    }
    let c = count_params(&def)?;
    println!("total {}\ntrainable {}\nnon-trainable {}", c.total, c.trainable, c.non_trainable);
    Ok(())
}

fn load_leaf(path: &Path) -> Result<LeafImage> {
    let rgb = load_rgb(path)?;
    LeafImage::from_rgb(rgb).with_context(|| format!("binarizing {}", path.display()))
}

fn load_config(args: &CascadeArgs) -> Result<CascadeConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CascadeConfig::parse(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => CascadeConfig::preset(&args.preset)?,
    };
    for kv in &args.overrides {
        let (key, value) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.patch_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedModels {
    s1: Box<dyn StageModel>,
    s2: Box<dyn StageModel>,
    s3: Box<dyn StageModel>,
}

impl LoadedModels {
    fn load(args: &CascadeArgs) -> Result<Self> {
        let s1 = load_stage(1, args.stage1_weights.as_deref(), &args.stage1_net, None)?;
        let k = s1.def().class_count;
        let s2 = load_stage(2, args.stage2_weights.as_deref(), &args.stage2_net, Some(k))?;
        let s3: Box<dyn StageModel> = match &args.stage3_remote {
            Some(addr) => {
                let dims = args.stage3_net.build(k)?.input_dims;
                Box::new(RemoteStage::new(addr.as_str(), dims, k, Duration::from_millis(args.remote_timeout_ms))?)
            }
            None => Box::new(load_stage(3, args.stage3_weights.as_deref(), &args.stage3_net, Some(k))?),
        };
        Ok(LoadedModels { s1: Box::new(s1), s2: Box::new(s2), s3 })
    }

    fn models(&self) -> CascadeModels<'_> {
        CascadeModels { silhouette: self.s1.as_ref(), whole: self.s2.as_ref(), patch: self.s3.as_ref() }
    }
}

fn cmd_infer(image: &Path, args: &CascadeArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let loaded = LoadedModels::load(args)?;
    let leaf = load_leaf(image)?;
    let outcome = run_cascade(&leaf, &loaded.models(), &cfg)?;
    let rule = match &outcome.verdict {
        Verdict::Decided { rule, .. } => Some(rule.name()),
        Verdict::Plausible { .. } => None,
    };
    let json = serde_json::json!({
        "verdict": outcome.verdict,
        "stage": outcome.final_stage(),
        "rule": rule,
        "trace": outcome.trace,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(if outcome.verdict.is_decided() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_eval(manifest: &Path, args: &CascadeArgs, jobs: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let loaded = LoadedModels::load(args)?;
    let m = Manifest::load(manifest).with_context(|| format!("manifest {}", manifest.display()))?;
    let report = evaluate(&m, &loaded.models(), &cfg, jobs)?;
    print!("{}", report.render());
    Ok(())
}

/// Each image contributes `count` patches carrying its label.
fn patch_samples(leaves: &[(LeafImage, usize)], count: usize, px: usize, min_leaf: f64, seed: u64) -> Result<Vec<(LeafImage, usize)>> {
    let mut out = Vec::new();
    for (i, (leaf, y)) in leaves.iter().enumerate() {
        let set = sample_patches(leaf, count, px, min_leaf, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        for p in set.patches {
            out.push((LeafImage::new(p, Tensor::full(&[1, px, px], 1.0))?, *y));
        }
    }
    Ok(out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let (train_m, val_m) = match &a.val_manifest {
        Some(v) => (manifest, Manifest::load(v)?),
        None => manifest.split(a.val_fraction, a.seed)?,
    };
    let k = a.classes.unwrap_or_else(|| train_m.class_count().max(val_m.class_count()));
    let net = a.net.clone().unwrap_or_else(|| NetSpec::default_for(a.stage));
    let def = net.build(k)?;
    let mut train_set = train_m.load_leaves()?;
    let mut val_set = val_m.load_leaves()?;
    if a.stage == 3 {
        let px = def.input_dims[1];
        train_set = patch_samples(&train_set, a.patches, px, a.min_leaf_fraction, a.seed)?;
        val_set = patch_samples(&val_set, a.patches, px, a.min_leaf_fraction, a.seed.wrapping_add(1))?;
        if train_set.is_empty() || val_set.is_empty() {
            bail!("no patch window met the leaf-coverage rule; lower --min-leaf-fraction");
        }
    }
    let mut cfg = TrainConfig::for_stage(a.stage)?;
    cfg.max_epochs = a.epochs;
    cfg.max_steps = a.max_steps;
    cfg.seed = a.seed;
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if a.no_augment {
        cfg.augment = AugmentPolicy::NONE;
    }
    let init = a.init.as_deref().map(weights_io::load).transpose()?;

    fs::create_dir_all(&a.out)?;
    let best_path = a.out.join(format!("stage{}.swpl", a.stage));
    let outcome = train(&def, &train_set, &val_set, &cfg, init, Some(&best_path))?;
    weights_io::save_with_manifest(&outcome.best_weights, &best_path)?;
    weights_io::save(&outcome.final_weights, &a.out.join(format!("stage{}.final.swpl", a.stage)))?;
    write_history(&a.out.join(format!("stage{}.history.csv", a.stage)), &outcome.epochs)?;
    println!(
        "stage {}: {} epochs, {} steps, best val acc {:.4} at epoch {}, checkpoint {}",
        a.stage,
        outcome.epochs.len(),
        outcome.steps.len(),
        outcome.best_val_acc,
        outcome.best_epoch,
        best_path.display()
    );
    Ok(())
}

fn cmd_synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let names = ["disk", "square", "triangle", "cross"];
    let data = synth::shapes_dataset(count, size, seed)?;
    let mut lines = String::new();
    for (i, (leaf, y)) in data.iter().enumerate() {
        let rel = PathBuf::from(names[*y]).join(format!("{i:05}.png"));
        fs::create_dir_all(out.join(names[*y]))?;
        save_rgb_png(&out.join(&rel), &leaf.rgb)?;
        lines.push_str(&format!("{}\t{y}\n", rel.display()));
    }
    fs::write(out.join("manifest.txt"), lines)?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

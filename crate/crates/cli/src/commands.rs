//! Subcommand implementations. Each one resolves its settings first (so
//! `--print-config` never touches the disk), writes the resolved config and
//! a manifest into the output directory, then does the work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use qhconv::container::Container;
use qhconv::data::synth::{shapes_dataset, SYNTH_CLASSES};
use qhconv::data::{
    cifar10_test_file, cifar10_train_files, load_cifar_binary, subsample, CifarFlavor, Dataset, Preprocessor, CIFAR10_CLASSES,
    DEFAULT_ZCA_EPSILON,
};
use qhconv::nn::{
    argmax_rows, evaluate, init_checkpoint, metrics_tsv, predict, preset, resume, softmax, Checkpoint, HyperParams, Model, Preset,
};
use qhconv::occlusion::{
    correctly_classified, evaluate_robustness, generate_occlusion_set, Fill, OcclusionGrid, DEFAULT_RADIUS,
};
use qhconv::rf::{emit_coverage_image, simulate_rf, RfStats};
use qhconv::rng::derive_seed;
use qhconv::saliency::{render, roi, saliency_map, top_classes, ImageFormat};
use qhconv::Tensor;

use crate::config::{usage, ConfigFile, Resolver};
use crate::{Cli, Command, EvalArgs, OccludeArgs, ParamsArgs, PreprocessArgs, RfsimArgs, SaliencyArgs, TrainArgs};

const TRAIN_FILE: &str = "train.qhd";
const TEST_FILE: &str = "test.qhd";
const RAW_TEST_FILE: &str = "test_raw.qhd";
const PREPROCESS_FILE: &str = "preprocess.qhp";
const DATASET_INFO: &str = "dataset.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: Vec<(String, String)>,
    digest: String,
}

#[derive(Serialize, serde::Deserialize)]
struct DatasetInfo {
    source: String,
    classes: Vec<String>,
}

struct Ctx {
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn path_text(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let section = match &cli.command {
        Command::Preprocess(_) => "preprocess",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Params(_) => "params",
        Command::Rfsim(_) => "rfsim",
        Command::Saliency(_) => "saliency",
        Command::Occlude(_) => "occlude",
    };
    let mut r = Resolver::new(section, file);
    let threads = r.get("threads", cli.threads, 1usize)?;
    if threads == 0 {
        return usage("--threads must be at least 1");
    }
    let out = PathBuf::from(r.get("out", path_text(&cli.out), "runs".to_string())?);

    let job: Box<dyn FnOnce(&Ctx) -> anyhow::Result<()>> = match cli.command {
        Command::Preprocess(a) => preprocess(&mut r, a, path_text(&cli.data_root))?,
        Command::Train(a) => train(&mut r, a, &out)?,
        Command::Eval(a) => eval(&mut r, a, &out)?,
        Command::Params(a) => params(&mut r, a)?,
        Command::Rfsim(a) => rfsim(&mut r, a)?,
        Command::Saliency(a) => saliency(&mut r, a, &out)?,
        Command::Occlude(a) => occlude(&mut r, a, &out)?,
    };

    if cli.print_config {
        print!("{}", r.to_text());
        return Ok(());
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_manifest(&out, section, &r)?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting the worker pool")?;
    job(&Ctx { out })
}

fn write_manifest(out: &Path, section: &str, r: &Resolver) -> anyhow::Result<()> {
    let text = r.to_text();
    let version = env!("CARGO_PKG_VERSION");
    let digest = hex::encode(Sha256::digest(format!("{version}\n{text}").as_bytes()));
    let m = Manifest { command: section, version, config: r.resolved().to_vec(), digest };
    fs::write(out.join(format!("{section}.config")), &text)?;
    fs::write(out.join(format!("{section}.manifest.json")), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if !p.is_file() {
        bail!(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", p.display())));
    }
    Ok(())
}

fn load_dataset(p: &Path) -> anyhow::Result<(Dataset, String)> {
    require_file(p)?;
    Ok(Dataset::from_container(&Container::load(p).with_context(|| format!("reading {}", p.display()))?)?)
}

fn load_checkpoint(p: &Path) -> anyhow::Result<Checkpoint> {
    require_file(p)?;
    Checkpoint::load(p).with_context(|| format!("reading checkpoint {}", p.display()))
}

fn class_names(data: &Path, classes: usize) -> Vec<String> {
    fs::read_to_string(data.join(DATASET_INFO))
        .ok()
        .and_then(|s| serde_json::from_str::<DatasetInfo>(&s).ok())
        .map(|d| d.classes)
        .filter(|c| c.len() == classes)
        .unwrap_or_else(|| (0..classes).map(|c| c.to_string()).collect())
}

type Job = Box<dyn FnOnce(&Ctx) -> anyhow::Result<()>>;

fn preprocess(r: &mut Resolver, a: PreprocessArgs, data_root: Option<String>) -> anyhow::Result<Job> {
    let source = r.get("source", a.source, "cifar10".to_string())?;
    if source != "cifar10" && source != "synth" {
        return usage(format!("unknown source {source:?} (cifar10 or synth)"));
    }
    let root = PathBuf::from(r.get("data_root", data_root, "data/cifar-10-batches-bin".to_string())?);
    let train_size = r.get("train_size", a.train_size, 5000usize)?;
    let test_size = r.get("test_size", a.test_size, 2000usize)?;
    let seed = r.get("data_seed", a.data_seed, 0u64)?;
    let gcn = r.get("gcn", a.gcn, true)?;
    let eps_text = r.get("zca_epsilon", a.zca_epsilon, DEFAULT_ZCA_EPSILON.to_string())?;
    let zca = match eps_text.as_str() {
        "none" | "off" => None,
        s => Some(s.parse::<f64>().map_err(|e| crate::config::UsageError(format!("zca_epsilon {s:?}: {e}")))?),
    };
    if source == "synth" && (train_size == 0 || test_size == 0) {
        return usage("synthetic data needs explicit train_size and test_size");
    }

    Ok(Box::new(move |ctx: &Ctx| {
        let (train, test, names) = if source == "cifar10" {
            let files = cifar10_train_files(&root);
            for f in files.iter().chain(std::iter::once(&cifar10_test_file(&root))) {
                require_file(f)?;
            }
            let train = load_cifar_binary(&files, CifarFlavor::Cifar10, "train")?;
            let test = load_cifar_binary(&[cifar10_test_file(&root)], CifarFlavor::Cifar10, "test")?;
            let train = if train_size == 0 { train } else { subsample(&train, train_size, derive_seed(seed, 0))? };
            let test = if test_size == 0 { test } else { subsample(&test, test_size, derive_seed(seed, 1))? };
            (train, test, CIFAR10_CLASSES.map(String::from).to_vec())
        } else {
            let train = shapes_dataset(train_size, derive_seed(seed, 0), "train")?;
            let test = shapes_dataset(test_size, derive_seed(seed, 1), "test")?;
            (train, test, SYNTH_CLASSES.map(String::from).to_vec())
        };
        log::info!("fitting preprocessing on {} training images", train.len());
        let pre = Preprocessor::fit(&train, gcn, zca)?;
        let digest = pre.digest();
        pre.to_container()?.save(ctx.path(PREPROCESS_FILE))?;
        pre.apply_dataset(&train)?.to_container(&digest)?.save(ctx.path(TRAIN_FILE))?;
        pre.apply_dataset(&test)?.to_container(&digest)?.save(ctx.path(TEST_FILE))?;
        test.to_container("raw")?.save(ctx.path(RAW_TEST_FILE))?;
        let info = DatasetInfo { source, classes: names };
        fs::write(ctx.path(DATASET_INFO), serde_json::to_string_pretty(&info)?)?;
        println!("preprocessed {} train / {} test images, digest {digest}", train.len(), test.len());
        Ok(())
    }))
}

fn train(r: &mut Resolver, a: TrainArgs, out: &Path) -> anyhow::Result<Job> {
    let data = PathBuf::from(r.get("data", path_text(&a.data), out.display().to_string())?);
    let preset_name = r.get("preset", a.preset, "QH-A".to_string())?;
    let which: Preset = preset_name.parse().map_err(|e: qhconv::Error| crate::config::UsageError(e.to_string()))?;
    let scale = r.get("scale", a.scale, 4usize)?;
    let pattern_seed = r.get("pattern_seed", a.pattern_seed, 0u64)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let epochs = r.get("epochs", a.epochs, 20usize)?;
    let defaults = HyperParams::scaled(epochs);
    let hyper = HyperParams {
        lr_init: r.get("lr", a.lr, defaults.lr_init)?,
        batch_size: r.get("batch_size", a.batch_size, defaults.batch_size)?,
        momentum: r.get("momentum", a.momentum, defaults.momentum)?,
        weight_decay: r.get("weight_decay", a.weight_decay, defaults.weight_decay)?,
        weight_decay_final: r.get("weight_decay_final", a.weight_decay_final, defaults.weight_decay_final)?,
        ..defaults
    };
    hyper.validate().map_err(|e| crate::config::UsageError(e.to_string()))?;
    r.record("lr_milestones", &format!("{:?}", hyper.lr_milestones));
    r.record("wd_decay_start", &hyper.wd_decay_start);
    let resume_run = r.get("resume", a.resume.then_some(true), false)?;

    Ok(Box::new(move |ctx: &Ctx| {
        let (train_set, digest) = load_dataset(&data.join(TRAIN_FILE))?;
        let (test_set, test_digest) = load_dataset(&data.join(TEST_FILE))?;
        if digest != test_digest {
            bail!(qhconv::Error::InvalidArgument("train and test splits were preprocessed differently".into()));
        }
        let config = preset(which, scale, train_set.class_count, pattern_seed)?;
        let name = config.name.clone();
        let ckpt_path = ctx.path(&format!("{name}.ckpt"));
        let log_path = ctx.path(&format!("{name}.metrics.tsv"));
        let mut ckpt = if resume_run {
            let c = load_checkpoint(&ckpt_path)?;
            c.verify_preprocess(&digest)?;
            if c.config() != &config || c.seed != seed || c.hyper != hyper {
                bail!(qhconv::Error::InvalidArgument("checkpoint was trained with a different configuration".into()));
            }
            log::info!("resuming {name} after epoch {}", c.epoch);
            c
        } else {
            init_checkpoint(&config, &hyper, seed, &digest)?
        };
        let start = Instant::now();
        resume(&mut ckpt, &train_set, Some(&test_set), epochs, |c| {
            c.save(&ckpt_path)?;
            fs::write(&log_path, metrics_tsv(&c.metrics))?;
            Ok(())
        })?;
        let secs = start.elapsed().as_secs_f64();
        let err = ckpt.metrics.last().and_then(|m| m.test_error).unwrap_or(f64::NAN);
        fs::write(ctx.path(&format!("{name}.summary.tsv")), format!("model\tparams\tepochs\ttest_error\tseconds\n{name}\t{}\t{}\t{err:.6}\t{secs:.3}\n", ckpt.model.count_params(), ckpt.epoch))?;
        println!("{name}: test error {:.2}% after {} epochs ({secs:.1} s)", 100.0 * err, ckpt.epoch);
        Ok(())
    }))
}

fn eval(r: &mut Resolver, a: EvalArgs, out: &Path) -> anyhow::Result<Job> {
    let Some(ckpt) = r.get("checkpoint", path_text(&a.checkpoint), String::new()).map(|s| (!s.is_empty()).then(|| PathBuf::from(s)))? else {
        return usage("eval needs --checkpoint");
    };
    let data = PathBuf::from(r.get("data", path_text(&a.data), out.display().to_string())?);
    Ok(Box::new(move |ctx: &Ctx| {
        let c = load_checkpoint(&ckpt)?;
        let (test, digest) = load_dataset(&data.join(TEST_FILE))?;
        c.verify_preprocess(&digest)?;
        let err = evaluate(&c.model, &test)?;
        let name = &c.config().name;
        fs::write(ctx.path(&format!("{name}.eval.tsv")), format!("model\timages\ttest_error\n{name}\t{}\t{err:.6}\n", test.len()))?;
        println!("{name}: test error {:.2}% on {} images", 100.0 * err, test.len());
        Ok(())
    }))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn params(r: &mut Resolver, a: ParamsArgs) -> anyhow::Result<Job> {
    let names: Vec<String> = r.list("presets", a.presets, "BASE-A,QH-A,QH-B,QH-C,BASE-REF,QH-EXT")?;
    let presets = names
        .iter()
        .map(|n| n.parse::<Preset>().map_err(|e| crate::config::UsageError(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = r.get("scale", a.scale, 1usize)?;
    let classes = r.get("classes", a.classes, 10usize)?;
    Ok(Box::new(move |ctx: &Ctx| {
        let mut tsv = String::from("model\tparams\tconv3x3_weights\tmacs\n");
        let mut conv3 = Vec::new();
        for p in &presets {
            let m = Model::<f32>::zeros(&preset(*p, scale, classes, 0)?)?;
            let rows = m.account([3, 32, 32])?;
            let w3: u64 = rows.iter().filter(|r| r.name.starts_with("conv-") && !r.name.starts_with("conv-1x1")).map(|r| r.weights).sum();
            let macs: u64 = rows.iter().map(|r| r.macs).sum();
            let _ = writeln!(tsv, "{}\t{}\t{w3}\t{macs}", m.config().name, m.count_params());
            conv3.push((*p, w3));
        }
        print!("{tsv}");
        let find = |p: Preset| conv3.iter().find(|(q, _)| *q == p).map(|(_, w)| *w);
        if let (Some(b), Some(q)) = (find(Preset::BaseA), find(Preset::QhA)) {
            let g = gcd(q, b);
            println!("QH-A / BASE-A 3x3-class weights: {}/{}", q / g, b / g);
        }
        fs::write(ctx.path("params.tsv"), tsv)?;
        Ok(())
    }))
}

fn rfsim(r: &mut Resolver, a: RfsimArgs) -> anyhow::Result<Job> {
    let depths: Vec<usize> = r.list("depths", a.depths, "3,5,7,9")?;
    let samples = r.get("samples", a.samples, 5000usize)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    if depths.is_empty() || depths.contains(&0) {
        return usage("depths must be positive");
    }
    Ok(Box::new(move |ctx: &Ctx| {
        let mut tsv = format!("{}\n", RfStats::HEADER);
        for &d in &depths {
            let s = simulate_rf(d, samples, seed)?;
            emit_coverage_image(&s, ctx.path(&format!("rf_mean_d{d}.png")))?;
            s.example.write_png(ctx.path(&format!("rf_example_d{d}.png")), 8)?;
            tsv.push_str(&s.to_record());
            tsv.push('\n');
        }
        print!("{tsv}");
        fs::write(ctx.path("rfsim.tsv"), tsv)?;
        Ok(())
    }))
}

enum ClassChoice {
    Label,
    Predicted,
    Fixed(usize),
}

fn saliency(r: &mut Resolver, a: SaliencyArgs, out: &Path) -> anyhow::Result<Job> {
    let Some(ckpt) = r.get("checkpoint", path_text(&a.checkpoint), String::new()).map(|s| (!s.is_empty()).then(|| PathBuf::from(s)))? else {
        return usage("saliency needs --checkpoint");
    };
    let data = PathBuf::from(r.get("data", path_text(&a.data), out.display().to_string())?);
    let images: Vec<usize> = r.list("images", a.images, "0,1,2,3")?;
    // usize::MAX stands for "last max-pool"
    let layer = r.get("layer", a.layer.map(|l| l.to_string()), "last_maxpool".to_string())?;
    let layer = if layer == "last_maxpool" { None } else { Some(layer.parse::<usize>().map_err(|e| crate::config::UsageError(format!("layer: {e}")))?) };
    let omega = r.get("omega", a.omega, 5usize)?;
    let tau = r.get("tau", a.tau, 0.0f64)?;
    let class = match r.get("class", a.class, "label".to_string())?.as_str() {
        "label" => ClassChoice::Label,
        "pred" => ClassChoice::Predicted,
        s => ClassChoice::Fixed(s.parse().map_err(|e| crate::config::UsageError(format!("class {s:?}: {e}")))?),
    };
    let format: ImageFormat = r.get("format", a.format, "png".to_string())?.parse().map_err(|e: qhconv::Error| crate::config::UsageError(e.to_string()))?;
    if !(0.0..1.0).contains(&tau) || omega == 0 {
        return usage("tau must lie in [0, 1) and omega must be positive");
    }

    Ok(Box::new(move |ctx: &Ctx| {
        let c = load_checkpoint(&ckpt)?;
        let (test, digest) = load_dataset(&data.join(TEST_FILE))?;
        let (raw, _) = load_dataset(&data.join(RAW_TEST_FILE))?;
        c.verify_preprocess(&digest)?;
        let model = &c.model;
        let layer = match layer {
            Some(l) => l,
            None => c.config().last_maxpool().ok_or_else(|| qhconv::Error::InvalidArgument("model has no max-pool layer".into()))?,
        };
        let names = class_names(&data, test.class_count);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let dir = ctx.path("saliency");
        fs::create_dir_all(&dir)?;
        let mut summary = String::from("image\tlabel\tclass\troi_pixels\tmax\n");
        for &id in &images {
            if id >= test.len() {
                bail!(qhconv::Error::InvalidArgument(format!("image {id} out of range ({} test images)", test.len())));
            }
            let x: Tensor<f32> = test.images.select(&[id]);
            let probs = softmax(&predict(model, &x)?);
            let target = match class {
                ClassChoice::Label => test.labels[id],
                ClassChoice::Predicted => argmax_rows(&probs)[0],
                ClassChoice::Fixed(k) => k,
            };
            let map = saliency_map(model, &x, target, layer, omega)?;
            let region = roi(&map, tau)?;
            let scores: Vec<f64> = probs.data().iter().map(|&p| p as f64).collect();
            let top = top_classes(&scores, &name_refs, 5);
            let path = dir.join(format!("{}_img{id}_l{layer}.{}", c.config().name, format.extension()));
            render(raw.images.item(id), &map, &region, &top, &path, format)?;
            let _ = writeln!(summary, "{id}\t{}\t{target}\t{}\t{:.6e}", test.labels[id], region.len(), map.max());
        }
        print!("{summary}");
        fs::write(dir.join("summary.tsv"), summary)?;
        Ok(())
    }))
}

fn occlude(r: &mut Resolver, a: OccludeArgs, out: &Path) -> anyhow::Result<Job> {
    let ckpts: Vec<String> = r.list("checkpoints", a.checkpoints, "")?;
    if ckpts.is_empty() {
        return usage("occlude needs --checkpoints");
    }
    let gens: Vec<String> = r.list("generators", a.generators, &ckpts.join(","))?;
    if gens.iter().any(|g| !ckpts.contains(g)) {
        return usage("every generator must also be listed in --checkpoints");
    }
    let data = PathBuf::from(r.get("data", path_text(&a.data), out.display().to_string())?);
    let n_images = r.get("n_images", a.n_images, 0usize)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let full = OcclusionGrid::full(seed);
    let top_k: Vec<usize> = r.list("top_k", a.top_k, "1,5")?;
    let fills: Vec<Fill> = r.list("fills", a.fills, "black,motley")?;
    let default_fractions = full.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let fractions: Vec<f64> = r.list("fractions", a.fractions, &default_fractions)?;
    let radius = r.get("radius", a.radius, DEFAULT_RADIUS)?;
    let grid = OcclusionGrid { top_k, fills, fractions, radius, seed };
    for s in grid.specs("check") {
        s.validate().map_err(|e| crate::config::UsageError(e.to_string()))?;
    }

    Ok(Box::new(move |ctx: &Ctx| {
        let (raw, _) = load_dataset(&data.join(RAW_TEST_FILE))?;
        require_file(&data.join(PREPROCESS_FILE))?;
        let pre = Preprocessor::from_container(&Container::load(data.join(PREPROCESS_FILE))?)?;
        let loaded = ckpts.iter().map(|p| load_checkpoint(Path::new(p))).collect::<anyhow::Result<Vec<_>>>()?;
        for c in &loaded {
            c.verify_preprocess(&pre.digest())?;
        }
        let mut names: Vec<String> = Vec::new();
        for c in &loaded {
            let mut n = c.config().name.clone();
            if names.contains(&n) {
                n = format!("{n}#{}", names.len());
            }
            names.push(n);
        }
        let models: Vec<&Model<f32>> = loaded.iter().map(|c| &c.model).collect();

        let mut keep = correctly_classified(&models, &pre.apply_dataset(&raw)?)?;
        if keep.is_empty() {
            bail!(qhconv::Error::InvalidArgument("no test image is classified correctly by every model".into()));
        }
        if n_images > 0 {
            keep.truncate(n_images);
        }
        let subset = raw.select(&keep)?;
        log::info!("occluding {} correctly classified images", subset.len());

        let generators: Vec<(&str, &Model<f32>)> = gens
            .iter()
            .map(|g| {
                let i = ckpts.iter().position(|c| c == g).expect("checked above");
                (names[i].as_str(), models[i])
            })
            .collect();
        let mut sets = generate_occlusion_set(&subset, &pre, &generators, &models, &grid)?;
        let dir = ctx.path("occluded");
        fs::create_dir_all(&dir)?;
        for s in &mut sets {
            s.image_ids = s.image_ids.iter().map(|&i| keep[i]).collect();
            let file: String = s.spec.label().chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' { ch } else { '_' }).collect();
            s.save(dir.join(format!("{file}.qhd")))?;
        }
        let evaluated: Vec<(&str, &Model<f32>)> = names.iter().map(String::as_str).zip(models.iter().copied()).collect();
        let table = evaluate_robustness(&evaluated, &pre, &sets)?;
        print!("{}", table.to_tsv());
        fs::write(ctx.path("robustness.tsv"), table.to_tsv())?;
        fs::write(ctx.path("robustness_long.tsv"), table.to_long_tsv())?;
        Ok(())
    }))
}

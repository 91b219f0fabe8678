use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use signpatch::adapters::{Detector, Endpoint, ExternalDetector, ToyDetector, ToyGenerator, ToyOutput, WireServer};
use signpatch::camera::load_calibration;
use signpatch::compositor::{read_dataset, Background, CompositeConfig, Compositor, SignInstance};
use signpatch::evalsim::{format_failures, format_records, read_records, NapSpec, Simulator, SweepConfig};
use signpatch::optimizer::{scenes_from_dataset, Attack, AttackConfig, Checkpoint, OverlayPlacement, RunWriter, Slot, UpdateRule};
use signpatch::raster::{load_png, save_png, Image};
use signpatch::report::{
    confidence_traces, plot_image, plot_svg, render_table, report_meta, summarize, TableFormat,
};

use crate::error::{io_error, CliError};
use crate::manifest::RunManifest;
use crate::{AttackArgs, Cli, Command, ComposeArgs, EvaluateArgs, PlotFormat, ReportArgs, ServeArgs, UpdateKind};

const TOY_GRID: usize = 4;

/// The optional `--config` document.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    compose: Option<CompositeConfig>,
    attack: Option<AttackConfig>,
    evaluate: Option<SweepConfig>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Config("--out is required".into()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn require_dir(dir: &Path, what: &str) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} directory {} not found", dir.display())))
    }
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Compose(args) => compose(args, file, seed, cli.jobs, require_out(cli.out)?),
        Command::Attack(args) => attack(args, file, seed, require_out(cli.out)?),
        Command::Evaluate(args) => evaluate(args, file, seed, cli.jobs, require_out(cli.out)?),
        Command::Report(args) => report(args, require_out(cli.out)?),
        Command::ServeToyDetector(args) => serve(args, seed.unwrap_or(0)),
    }
}

fn compose(args: ComposeArgs, file: FileConfig, seed: Option<u64>, jobs: usize, out: PathBuf) -> Result<(), CliError> {
    let cam = load_calibration(&args.calib)?;
    require_dir(&args.signs, "signs")?;
    require_dir(&args.backgrounds, "backgrounds")?;

    let mut class_dirs: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&args.signs).map_err(|e| io_error(&args.signs, e))? {
        let path = entry.map_err(|e| io_error(&args.signs, e))?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let class: u32 = name
            .parse()
            .map_err(|_| CliError::Data(format!("sign directory {} is not a numeric class id", path.display())))?;
        class_dirs.push((class, path));
    }
    class_dirs.sort();
    let mut signs = Vec::new();
    for (class, dir) in &class_dirs {
        for png in pngs_in(dir)? {
            let source = png.strip_prefix(&args.signs).unwrap_or(&png).display().to_string();
            signs.push(SignInstance::new(load_png(&png)?, *class, source)?);
        }
    }
    if signs.is_empty() {
        return Err(CliError::Data(format!("no sign crops under {}", args.signs.display())));
    }

    let mut pool = Vec::new();
    for png in pngs_in(&args.backgrounds)? {
        let source = png.file_name().unwrap_or_default().to_string_lossy().to_string();
        let bg = if args.undistorted {
            Background::undistorted(load_png(&png)?, source)?
        } else {
            Background::captured(load_png(&png)?, source)?.undistort(&cam)?
        };
        pool.push(bg);
    }
    if pool.is_empty() {
        return Err(CliError::Data(format!("no background PNGs under {}", args.backgrounds.display())));
    }

    let mut cfg = file.compose.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = args.per_class {
        cfg.targets = class_dirs.iter().map(|(c, _)| (*c, n)).collect();
    } else if cfg.targets.is_empty() {
        for s in &signs {
            *cfg.targets.entry(s.class_id()).or_insert(0) += 1;
        }
    }
    let compositor = Compositor::new(cam, cfg.clone())?;
    create_dir(&out)?;
    let manifest = RunManifest::new("compose", json!({ "compose": cfg, "camera": cam }), cfg.seed, &out)
        .input("calib", &args.calib)
        .input("signs", &args.signs)
        .input("backgrounds", &args.backgrounds);
    let dataset = compositor.generate_dataset(&signs, &pool, &out, jobs)?;
    eprintln!("wrote {} samples to {}", dataset.entries.len(), out.display());
    manifest.write(&out)
}

fn external_detector(cmd: &str) -> Result<Box<dyn Detector>, CliError> {
    Ok(Box::new(ExternalDetector::connect(Endpoint::command(cmd)?)?))
}

fn toy_detector(width: usize, height: usize, seed: u64) -> Result<Box<dyn Detector>, CliError> {
    Ok(Box::new(ToyDetector::train_synthetic(width, height, TOY_GRID, seed)?))
}

fn attack(args: AttackArgs, file: FileConfig, seed: Option<u64>, out: PathBuf) -> Result<(), CliError> {
    let mut cfg = file.attack.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = args.init.clone() {
        cfg.inits = v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.lr {
        cfg.eta = v;
    }
    if let Some(v) = args.lambda_tv {
        cfg.lambda_tv = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(u) = args.update {
        cfg.update = match u {
            UpdateKind::Sgd => UpdateRule::Sgd,
            UpdateKind::Momentum => UpdateRule::Momentum { beta: 0.9 },
            UpdateKind::Adam => UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        };
    }
    let slot = match &args.slot {
        Some(s) => Slot::parse(s).ok_or_else(|| CliError::Config(format!("--slot {s:?} is not center, upper or lower")))?,
        None => cfg.placement.slot,
    };
    cfg.placement = OverlayPlacement::new(slot, args.size_fraction.unwrap_or(cfg.placement.size_fraction))?;
    cfg.validate()?;
    if args.patch_side < 2 || args.latent_dim == 0 {
        return Err(CliError::Config("--patch-side must be >= 2 and --latent-dim >= 1".into()));
    }

    require_dir(&args.dataset, "dataset")?;
    let items = read_dataset(&args.dataset)?;
    let scenes = scenes_from_dataset(&items)?;
    let (w, h) = (scenes[0].image.width(), scenes[0].image.height());
    let detector = match &args.detector_cmd {
        Some(cmd) => external_detector(cmd)?,
        None => toy_detector(w, h, cfg.seed)?,
    };
    if !detector.supports_gradients() {
        return Err(CliError::Capability("the selected detector does not provide input gradients".into()));
    }
    let output = match args.generator {
        crate::GeneratorKind::ToySigmoid => ToyOutput::Sigmoid,
        crate::GeneratorKind::ToyLinear => ToyOutput::Linear,
    };
    let generator = ToyGenerator::smooth(args.patch_side, args.latent_dim, cfg.seed, output);

    let attack = Attack::new(cfg.clone(), &scenes, detector.as_ref(), &generator)?;
    create_dir(&out)?;
    let mut manifest = RunManifest::new(
        "attack",
        json!({
            "attack": cfg,
            "detector": args.detector_cmd.as_deref().unwrap_or("toy"),
            "generator": format!("{:?}", args.generator),
            "patch_side": args.patch_side,
            "latent_dim": args.latent_dim,
            "candidate_every": args.candidate_every,
        }),
        cfg.seed,
        &out,
    )
    .input("dataset", &args.dataset);
    let outcome = match &args.resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let ckpt = Checkpoint::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            manifest = manifest.input("resume", path);
            let mut writer = RunWriter::reopen(&out, &ckpt, args.candidate_every)?;
            let outcome = attack.resume(ckpt, &mut writer)?;
            writer.finish(&outcome)?;
            outcome
        }
        None => {
            let mut writer = RunWriter::create(&out, &cfg, args.candidate_every)?;
            let outcome = attack.run(&mut writer)?;
            writer.finish(&outcome)?;
            outcome
        }
    };
    eprintln!(
        "best patch: init {} iteration {} mean STOP confidence {:.4}",
        outcome.best.init, outcome.best.iteration, outcome.best.confidence
    );
    manifest.write(&out)
}

fn parse_nap(spec: &str) -> Result<NapSpec, CliError> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--nap {spec:?} must be NAME=PNG")))?;
    if name.is_empty() || name.contains(',') {
        return Err(CliError::Config(format!("--nap {spec:?} has an invalid name")));
    }
    Ok(NapSpec {
        name: name.to_string(),
        path: Some(PathBuf::from(path)),
    })
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    Ok(Image::from_rgb8(&load_png(path)?))
}

fn evaluate(args: EvaluateArgs, file: FileConfig, seed: Option<u64>, jobs: usize, out: PathBuf) -> Result<(), CliError> {
    let mut cfg = file.evaluate.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !args.naps.is_empty() {
        cfg.naps = args.naps.iter().map(|s| parse_nap(s)).collect::<Result<_, _>>()?;
    }
    if let Some(d) = args.distances.clone() {
        cfg.distances = d;
    }
    if let Some(w) = args.window {
        cfg.window = w;
    }
    if let Some(j) = args.jitter {
        cfg.jitter = j;
    }
    if let Some(p) = &args.calib {
        cfg.camera = load_calibration(p)?;
    }
    if args.background.is_some() {
        cfg.background = args.background.clone();
    }
    if args.sign.is_some() {
        cfg.sign = args.sign.clone();
    }
    cfg.validate()?;

    let mut naps = BTreeMap::new();
    for nap in &cfg.naps {
        if let Some(p) = &nap.path {
            naps.insert(nap.name.clone(), load_image(p)?);
        }
    }
    let background = cfg.background.as_deref().map(load_image).transpose()?;
    let sign = cfg.sign.as_deref().map(load_image).transpose()?;
    let detector = match &args.detector_cmd {
        Some(cmd) => external_detector(cmd)?,
        None => toy_detector(cfg.camera.width as usize, cfg.camera.height as usize, cfg.seed)?,
    };
    let sim = Simulator::new(cfg.clone(), naps, background, sign)?;
    create_dir(&out)?;
    let mut manifest = RunManifest::new(
        "evaluate",
        json!({ "evaluate": cfg, "detector": args.detector_cmd.as_deref().unwrap_or("toy") }),
        cfg.seed,
        &out,
    );
    for nap in &cfg.naps {
        if let Some(p) = &nap.path {
            manifest = manifest.input(&format!("nap_{}", nap.name), p);
        }
    }
    let records = sim.run_sweep(detector.as_ref(), jobs)?;
    write_text(&out.join("records.csv"), &format_records(&records))?;
    write_text(&out.join("sweep_config.json"), &(cfg.to_json() + "\n"))?;
    let failures = out.join("failures.csv");
    match format_failures(&records) {
        Some(text) => {
            write_text(&failures, &text)?;
            eprintln!("{} cells failed; see {}", text.lines().count() - 1, failures.display());
        }
        None => {
            if failures.exists() {
                fs::remove_file(&failures).map_err(|e| io_error(&failures, e))?;
            }
        }
    }
    eprintln!("wrote {} cells to {}", records.len(), out.join("records.csv").display());
    manifest.write(&out)
}

fn report(args: ReportArgs, out: PathBuf) -> Result<(), CliError> {
    let records_path = args.records.clone().unwrap_or_else(|| out.join("records.csv"));
    if !records_path.is_file() {
        return Err(CliError::Data(format!("records file {} not found", records_path.display())));
    }
    let records = read_records(&records_path)?;
    let summary = summarize(&records)?;
    let traces = confidence_traces(&records)?;
    create_dir(&out)?;
    write_text(&out.join("summary.csv"), &render_table(&summary, TableFormat::Csv)?)?;
    write_text(&out.join("summary.md"), &render_table(&summary, TableFormat::Markdown)?)?;
    let meta = serde_json::to_string_pretty(&report_meta(&summary)).expect("meta serializes");
    write_text(&out.join("report_meta.json"), &(meta + "\n"))?;
    if matches!(args.plot, PlotFormat::Svg | PlotFormat::Both) {
        write_text(&out.join("confidence_vs_distance.svg"), &plot_svg(&traces))?;
    }
    if matches!(args.plot, PlotFormat::Png | PlotFormat::Both) {
        let img = plot_image(&traces, 900, 540);
        save_png(&img.to_rgb8()?, &out.join("confidence_vs_distance.png"))?;
    }
    RunManifest::new("report", json!({ "plot": format!("{:?}", args.plot) }), 0, &out)
        .input("records", &records_path)
        .write(&out)
}

fn serve(args: ServeArgs, seed: u64) -> Result<(), CliError> {
    let det = ToyDetector::train_synthetic(args.width, args.height, TOY_GRID, seed)?;
    let mut server = WireServer::new(Box::new(det));
    if args.gradients {
        server = server.with_gradients();
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    server
        .serve(stdin.lock(), stdout.lock())
        .map_err(|e| CliError::Data(format!("serve: {e}")))
}

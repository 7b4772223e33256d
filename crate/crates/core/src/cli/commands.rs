use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{
    ClassifierArgs, CliError, Command, Context, CribriformArgs, DatasetArgs, DecomposeArgs, EvalArgs, GradeArgs,
    GradcheckArgs, MaskArgs, NetArg, NucleoliArgs, Provenance, StainArgs, SynthArgs, TrainArgs,
};
use crate::grading::{
    build_patch_dataset, evaluate_with, grade_slide, hematoxylin_image, CnnClassifier, DatasetManifest, GradingError,
    LoadedSlide, PatchDataset, PatchSettings, SlideGrade, TruthClassifier,
};
use crate::micro_cnn::{
    build_network, load_network, save_network, tiny_gradient_check, train, Network, NetworkConfig, TrainConfig,
};
use crate::nuclei::NucleusParams;
use crate::patterns::{detect_cribriform, detect_prominent_nucleoli, CribriformExport, CribriformParams, NucleoliParams, NucleoliStatus};
use crate::pipeline::{
    decompose_slide, fit_level, load_slide, mask_path, mask_slide, scan_nuclei, stain_matrix, CorpusSource,
    LoadOptions, StainOptions,
};
use crate::regions::BitMask;
use crate::slide_io::{
    open_slide, save_gray_image, write_overlay, OverlayRegion, SlidePackage, CRIBRIFORM_COLOR, NUCLEOLI_COLOR,
    TUMOR_COLOR,
};
use crate::stain::energy_gradient_check;
use crate::synth::{synth_corpus_with, synth_slide, CorpusOptions, GroundTruth, SynthSpec, DATASET_FILE};

/// Creates the directory an output file goes into.
fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub(super) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(super) fn dispatch(command: &Command, ctx: &Context) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a, ctx),
        Command::Mask(a) => mask(a, ctx),
        Command::Decompose(a) => decompose(a, ctx),
        Command::Dataset(a) => dataset(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Grade(a) => grade(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Nucleoli(a) => nucleoli(a, ctx),
        Command::Cribriform(a) => cribriform(a, ctx),
        Command::Gradcheck(a) => gradcheck(a, ctx),
    }
}

impl StainArgs {
    fn options(&self) -> StainOptions {
        StainOptions { lambda: self.lambda, samples: self.samples, seed: self.stain_seed }
    }
}

fn synth(a: &SynthArgs, ctx: &Context) -> Result<(), CliError> {
    let out = ctx.resolve(&a.out);
    match (a.per_class, a.class) {
        (Some(n), None) => {
            let options = CorpusOptions { size: a.size, mpp: a.mpp, ..CorpusOptions::default() };
            let manifest = synth_corpus_with(n, &out, a.seed, &options)?;
            println!("wrote {} slides to {}", manifest.entries.len(), out.display());
        }
        (None, Some(class)) => {
            let mut spec = SynthSpec::new(class.into(), a.seed);
            spec.size = a.size;
            spec.mpp = a.mpp;
            spec.cribriform = a.cribriform;
            spec.marker = a.marker;
            let (_, truth) = synth_slide(&spec, &out)?;
            println!("wrote {} slide ({} nuclei) to {}", truth.label, truth.nuclei.len(), out.display());
        }
        _ => return Err(CliError::Message("synth needs --per-class or --class".into())),
    }
    Provenance::new(ctx, "synth", &[("seed", a.seed)]).write_for(&out)
}

fn mask(a: &MaskArgs, ctx: &Context) -> Result<(), CliError> {
    let slide = open_slide(ctx.resolve(&a.slide))?;
    let mask = mask_slide(&slide, a.k, a.seed)?;
    println!(
        "tumor fraction {:.4} at level {} ({}x{})",
        mask.tumor_count() as f64 / mask.labels.len() as f64,
        mask.level,
        mask.width,
        mask.height
    );
    if let Some(p) = &a.overlay {
        let p = ctx.resolve(p);
        ensure_parent(&p)?;
        write_overlay(&slide, mask.level, &[OverlayRegion { mask: mask.tumor(), color: TUMOR_COLOR }], &p)?;
    }
    Provenance::new(ctx, "mask", &[("seed", a.seed)]).write_for(&mask_path(&slide))
}

fn decompose(a: &DecomposeArgs, ctx: &Context) -> Result<(), CliError> {
    let mut slide = open_slide(ctx.resolve(&a.slide))?;
    let fit = decompose_slide(&mut slide, &a.stain.options())?;
    let d = fit.model.d;
    for row in &d {
        println!("{:>12.6} {:>12.6} {:>12.6}", row[0], row[1], row[2]);
    }
    println!(
        "energy {:.6e}  iterations {}  converged {}",
        fit.report.f_star, fit.report.iterations, fit.report.converged
    );
    let level = a.level.unwrap_or_else(|| fit_level(&slide));
    let out = a.out.as_ref().map_or_else(|| slide.root().join("hematoxylin.png"), |p| ctx.resolve(p));
    ensure_parent(&out)?;
    save_gray_image(&hematoxylin_image(&slide.read_level(level)?, &d), &out)?;
    Provenance::new(ctx, "decompose", &[("stain_seed", a.stain.stain_seed)]).write_for(&out)
}

fn dataset(a: &DatasetArgs, ctx: &Context) -> Result<(), CliError> {
    let root = ctx.resolve(&a.corpus);
    let manifest = DatasetManifest::load(&root.join(DATASET_FILE))?;
    let source = CorpusSource {
        root,
        settings: PatchSettings { size: a.size, level: a.level },
        options: LoadOptions { k: a.k, mask_seed: 0, stain: a.stain.options() },
    };
    let data = build_patch_dataset(&manifest, &source, a.patches, a.size, a.seed)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let [g3, g4] = data.class_counts();
    let c = &data.census;
    println!(
        "train slides {} ({} grade 3, {} grade 4)  eval {}  excluded {}",
        c.train(),
        c.train_grade3,
        c.train_grade4,
        c.eval,
        c.excluded
    );
    println!("patches {} ({g3} grade 3, {g4} grade 4)", data.len());
    let out = ctx.resolve(&a.out);
    ensure_parent(&out)?;
    data.save(&out)?;
    Provenance::new(ctx, "dataset", &[("seed", a.seed), ("stain_seed", a.stain.stain_seed)]).write_for(&out)
}

fn network_config(a: &TrainArgs) -> NetworkConfig {
    let mut cfg = match a.net {
        NetArg::Desk => NetworkConfig::desk(),
        NetArg::Full => NetworkConfig::default(),
        NetArg::Tiny => NetworkConfig::tiny(),
    };
    cfg.loss = a.loss.into();
    if let Some(p) = a.dropout {
        cfg.dropout.iter_mut().for_each(|d| d.p = p);
    }
    cfg
}

fn train_cmd(a: &TrainArgs, ctx: &Context) -> Result<(), CliError> {
    let data = PatchDataset::load(&ctx.resolve(&a.data))?;
    let cfg = network_config(a);
    if cfg.input_size != data.patch_size as usize || cfg.input_channels != 1 {
        return Err(CliError::Message(format!(
            "network expects {0}x{0}x{1} inputs, patch set holds {2}x{2} grey patches",
            cfg.input_size, cfg.input_channels, data.patch_size
        )));
    }
    let mut net = build_network(&cfg, a.seed)?;
    let (inputs, labels) = data.inputs();
    let tc = TrainConfig { batch_size: a.batch, learning_rate: a.lr, iterations: a.iters, seed: a.seed, shuffle: true };
    let every = (a.iters / 20).max(1);
    let history = train(&mut net, &inputs, &labels, &tc, |it, loss| {
        if it % every == 0 || it + 1 == a.iters {
            eprintln!("iteration {it:>6}  loss {loss:.5}");
        }
    })?;
    let out = ctx.resolve(&a.out);
    ensure_parent(&out)?;
    save_network(&net, &out)?;
    let log = a.log.as_ref().map_or_else(
        || {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".loss.txt");
            out.with_file_name(name)
        },
        |p| ctx.resolve(p),
    );
    ensure_parent(&log)?;
    let mut text = String::from("iteration loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(text, "{i} {l}");
    }
    fs::write(&log, text)?;
    let correct = net.predict(&inputs)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
    println!("trained {} parameters; patch accuracy {:.4}", net.param_count(), correct as f64 / labels.len() as f64);
    Provenance::new(ctx, "train", &[("seed", a.seed)]).write_for(&out)
}

enum Classifier {
    Network(Network),
    Oracle,
}

impl ClassifierArgs {
    fn load(&self, ctx: &Context) -> Result<(Classifier, PatchSettings), CliError> {
        match (&self.weights, self.oracle) {
            (Some(w), false) => {
                let net = load_network(&ctx.resolve(w))?;
                let size = net.config.input_size as u32;
                Ok((Classifier::Network(net), PatchSettings { size, level: self.level }))
            }
            (None, true) => Ok((Classifier::Oracle, PatchSettings { size: self.size, level: self.level })),
            _ => Err(CliError::Message("pass exactly one of --weights and --oracle".into())),
        }
    }
}

fn oracle_for(slide: &SlidePackage, settings: &PatchSettings) -> Result<TruthClassifier, CliError> {
    let truth = GroundTruth::load(slide.root())?;
    let ds = slide.level(settings.level)?.downsample;
    Ok(TruthClassifier { truths: HashMap::from([(slide.id(), truth)]), downsamples: HashMap::from([(slide.id(), ds)]) })
}

fn grade_loaded(
    slide: &LoadedSlide,
    classifier: &Classifier,
    settings: &PatchSettings,
    n: usize,
    seed: u64,
) -> Result<SlideGrade, CliError> {
    let grade = match classifier {
        Classifier::Network(network) => grade_slide(slide, &CnnClassifier { network }, settings, n, seed)?,
        Classifier::Oracle => grade_slide(slide, &oracle_for(&slide.slide, settings)?, settings, n, seed)?,
    };
    Ok(grade)
}

fn save_grade_overlay(slide: &SlidePackage, grade: &SlideGrade, path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_overlay(slide, grade.level, &grade.overlay_regions(slide, grade.level)?, path)?;
    Ok(())
}

fn grade(a: &GradeArgs, ctx: &Context) -> Result<(), CliError> {
    let (classifier, settings) = a.classifier.load(ctx)?;
    let options = LoadOptions { k: a.k, mask_seed: 0, stain: a.stain.options() };
    let slide = load_slide(&ctx.resolve(&a.slide), &options)?;
    let grade = grade_loaded(&slide, &classifier, &settings, a.patches, a.seed)?;
    println!(
        "{}: verdict {}  grade-3 votes {}  grade-4 votes {}",
        grade.slide_id, grade.verdict, grade.votes_grade3, grade.votes_grade4
    );
    let provenance = Provenance::new(ctx, "grade", &[("seed", a.seed), ("stain_seed", a.stain.stain_seed)]);
    if let Some(p) = &a.overlay {
        let p = ctx.resolve(p);
        save_grade_overlay(&slide.slide, &grade, &p)?;
        provenance.write_for(&p)?;
    }
    if let Some(p) = &a.out {
        let p = ctx.resolve(p);
        write_json(&p, &grade)?;
        provenance.write_for(&p)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, ctx: &Context) -> Result<(), CliError> {
    let (classifier, settings) = a.classifier.load(ctx)?;
    let root = ctx.resolve(&a.corpus);
    let manifest = DatasetManifest::load(&root.join(DATASET_FILE))?;
    let options = LoadOptions { k: a.k, mask_seed: 0, stain: a.stain.options() };
    let overlays = a.overlays.as_ref().map(|p| ctx.resolve(p));
    let report = evaluate_with(&manifest, a.patches, a.seed, |entry, seed| {
        let run = || -> Result<SlideGrade, CliError> {
            let slide = load_slide(&root.join(&entry.slide_path), &options)?;
            let grade = grade_loaded(&slide, &classifier, &settings, a.patches, seed)?;
            if let Some(dir) = &overlays {
                let name = format!("{}.png", entry.slide_path.replace(['/', '\\'], "_"));
                save_grade_overlay(&slide.slide, &grade, &dir.join(name))?;
            }
            Ok(grade)
        };
        run().map_err(|e| match e {
            CliError::Grading(g) => g,
            other => GradingError::Format(other.to_string()),
        })
    })?;
    print!("{}", report.summary());
    let out = ctx.resolve(&a.out);
    write_json(&out, &report)?;
    Provenance::new(ctx, "eval", &[("seed", a.seed), ("stain_seed", a.stain.stain_seed)]).write_for(&out)
}

#[derive(Serialize)]
struct NucleoliRecord {
    id: usize,
    x: f64,
    y: f64,
    area: usize,
    status: NucleoliStatus,
    prominent: bool,
    dark_mean: f64,
    light_mean: f64,
    dark_weight: f64,
    separation: f64,
}

#[derive(Serialize)]
struct NucleoliReport {
    slide: String,
    nuclei: usize,
    evaluated: usize,
    prominent: usize,
    flags: Vec<NucleoliRecord>,
}

fn nucleoli(a: &NucleoliArgs, ctx: &Context) -> Result<(), CliError> {
    let slide = open_slide(ctx.resolve(&a.slide))?;
    let d = stain_matrix(&slide, &a.stain.options())?;
    let scan = scan_nuclei(&slide, &d, &NucleusParams::default())?;
    let params = NucleoliParams { separation: a.separation, min_dark_weight: a.min_dark_weight };
    let flags = detect_prominent_nucleoli(&scan.nuclei, &scan.hematoxylin, &params);
    let records: Vec<NucleoliRecord> = scan
        .nuclei
        .iter()
        .zip(&flags)
        .map(|(n, f)| NucleoliRecord {
            id: n.id,
            x: n.centroid.0,
            y: n.centroid.1,
            area: n.area,
            status: f.status,
            prominent: f.prominent,
            dark_mean: f.dark_mean,
            light_mean: f.light_mean,
            dark_weight: f.dark_weight,
            separation: f.separation,
        })
        .collect();
    let report = NucleoliReport {
        slide: slide.id(),
        nuclei: records.len(),
        evaluated: records.iter().filter(|r| r.status == NucleoliStatus::Evaluated).count(),
        prominent: records.iter().filter(|r| r.prominent).count(),
        flags: records,
    };
    println!("{}: {} nuclei, {} evaluated, {} with prominent nucleoli", report.slide, report.nuclei, report.evaluated, report.prominent);
    let out = ctx.resolve(&a.out);
    write_json(&out, &report)?;
    if let Some(p) = &a.overlay {
        let pixels: Vec<(u32, u32)> = scan
            .nuclei
            .iter()
            .zip(&flags)
            .filter(|(_, f)| f.prominent)
            .flat_map(|(n, _)| n.pixels.iter().copied())
            .collect();
        let mask = BitMask::from_pixels(slide.width(), slide.height(), &pixels);
        let p = ctx.resolve(p);
        ensure_parent(&p)?;
        write_overlay(&slide, 0, &[OverlayRegion { mask, color: NUCLEOLI_COLOR }], p)?;
    }
    Provenance::new(ctx, "nucleoli", &[("stain_seed", a.stain.stain_seed)]).write_for(&out)
}

#[derive(Serialize)]
struct CribriformReport {
    slide: String,
    nuclei: usize,
    regions: Vec<CribriformExport>,
}

fn cribriform(a: &CribriformArgs, ctx: &Context) -> Result<(), CliError> {
    let slide = open_slide(ctx.resolve(&a.slide))?;
    let d = stain_matrix(&slide, &a.stain.options())?;
    let scan = scan_nuclei(&slide, &d, &NucleusParams::default())?;
    let params = CribriformParams { min_roundness: a.min_roundness, min_lumens: a.min_lumens, ..Default::default() };
    let regions = detect_cribriform(&slide, &scan.graph, &params)?;
    let report = CribriformReport {
        slide: slide.id(),
        nuclei: scan.nuclei.len(),
        regions: regions.iter().map(|r| r.export()).collect(),
    };
    println!("{}: {} cribriform regions", report.slide, report.regions.len());
    let out = ctx.resolve(&a.out);
    write_json(&out, &report)?;
    if let Some(p) = &a.overlay {
        let (w, h) = (slide.width(), slide.height());
        let marks: Vec<OverlayRegion> =
            regions.iter().map(|r| OverlayRegion { mask: r.gland.to_frame(w, h), color: CRIBRIFORM_COLOR }).collect();
        let p = ctx.resolve(p);
        ensure_parent(&p)?;
        write_overlay(&slide, 0, &marks, p)?;
    }
    Provenance::new(ctx, "cribriform", &[("stain_seed", a.stain.stain_seed)]).write_for(&out)
}

fn gradcheck(a: &GradcheckArgs, _ctx: &Context) -> Result<(), CliError> {
    let energy = energy_gradient_check(a.cases, a.seed)?;
    println!("energy gradient: {} cases, max relative error {energy:.3e}", a.cases);
    let cnn = tiny_gradient_check(a.params, a.seed)?;
    println!(
        "network gradient: {} parameters, max relative error {:.3e} (parameter {})",
        cnn.checked, cnn.max_relative_error, cnn.worst_parameter
    );
    let worst = energy.max(cnn.max_relative_error);
    if !(worst < a.tolerance) {
        return Err(CliError::Message(format!("gradient check failed: max relative error {worst:.3e} >= {:.1e}", a.tolerance)));
    }
    Ok(())
}

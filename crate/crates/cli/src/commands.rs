use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use count_adapt::classifier::{train_classifier, DomainClassifierHead, SceneMode};
use count_adapt::datagen::{
    augment_hflip, gen_dataset, load_dot_dataset_split, load_image, save_dot_dataset,
    split_train_val, Scene, SyntheticDomainSpec,
};
use count_adapt::eval::{evaluate, params_audit, write_report_csv};
use count_adapt::features::{build_frozen_extractor, Extractor, FrozenExtractorSpec};
use count_adapt::gradcheck::grad_suite;
use count_adapt::persistence::ModelArchive;
use count_adapt::refiner::{build_refinement_pairs, train_refiner};
use count_adapt::regressor::{
    adapt_with, predict_image, prime, DomainId, ModelParams, PatchDataset, TrainLog,
};
use count_adapt::seed::derive_seed;
use serde::Serialize;

use crate::config::{apply_overrides, render_section, ConfigFile};
use crate::{Cli, Command};

const LOSS_EVERY: usize = 100;
const GRAD_TOLERANCE: f64 = 1e-4;

struct Run {
    dir: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn loss_csv(&self, log: &TrainLog) -> Result<()> {
        log.write_csv(self.path("loss.csv"), LOSS_EVERY)?;
        Ok(())
    }
}

/// Resolve the active section, then create the run directory and echo it.
fn start<S: Serialize + serde::de::DeserializeOwned>(
    cli: &Cli,
    name: &str,
    section: &S,
) -> Result<(S, Run)> {
    let resolved = apply_overrides(section, name, &cli.overrides)?;
    let text = render_section(name, &resolved)?;
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            let base = PathBuf::from("runs").join(format!("{name}-{secs}"));
            let mut dir = base.clone();
            let mut i = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{i}", base.display()));
                i += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    let run = Run { dir };
    run.write("config.toml", &text)?;
    let argv: Vec<String> = std::env::args().collect();
    run.write("command.txt", &(argv.join(" ") + "\n"))?;
    Ok((resolved, run))
}

pub fn run(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => {
            let (mut cfg, run) = start(&cli, "gen-data", &file.gen_data)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            gen_data(a, &cfg, &run)
        }
        Command::Prime(a) => {
            let (cfg, run) = start(&cli, "prime", &file.prime)?;
            cmd_prime(a, &cfg, &run)
        }
        Command::Adapt(a) => {
            let (cfg, run) = start(&cli, "adapt", &file.adapt)?;
            cmd_adapt(a, &cfg, &run)
        }
        Command::TrainRefiner(a) => {
            let (cfg, run) = start(&cli, "train-refiner", &file.train_refiner)?;
            cmd_train_refiner(a, &cfg, &run)
        }
        Command::TrainClassifier(a) => {
            let (cfg, run) = start(&cli, "train-classifier", &file.train_classifier)?;
            cmd_train_classifier(a, &cfg, &run)
        }
        Command::Eval(a) => {
            let (cfg, run) = start(&cli, "eval", &file.eval)?;
            cmd_eval(a, &cfg, &run)
        }
        Command::Predict(a) => {
            let (cfg, run) = start(&cli, "predict", &file.predict)?;
            cmd_predict(a, &cfg, &run)
        }
        Command::Audit(a) => {
            let (_, run) = start(&cli, "audit", &file.audit)?;
            let archive = load_archive(&a.archive)?;
            let report = params_audit(&archive.model, archive.classifier.as_ref()).to_string();
            run.write("audit.txt", &report)?;
            print!("{report}");
            Ok(())
        }
        Command::GradCheck(a) => {
            let (_, run) = start(&cli, "grad-check", &file.grad_check)?;
            let report = grad_suite(a.seed)?;
            let text = format!("seed {}\n{report}\n", a.seed);
            run.write("gradcheck.txt", &text)?;
            print!("{text}");
            if report.max() >= GRAD_TOLERANCE {
                bail!(
                    "max relative error {:.3e} is not below {GRAD_TOLERANCE:e}",
                    report.max()
                );
            }
            Ok(())
        }
    }
}

fn resolve_spec(name: &str) -> Result<SyntheticDomainSpec> {
    if let Some(spec) = SyntheticDomainSpec::preset(name) {
        return Ok(spec);
    }
    let path = Path::new(name);
    if !path.is_file() {
        let presets: Vec<String> = SyntheticDomainSpec::presets()
            .into_iter()
            .map(|s| s.name)
            .collect();
        bail!(
            "`{name}` is neither a preset ({}) nor a spec file",
            presets.join(", ")
        );
    }
    let text =
        fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: SyntheticDomainSpec = toml::from_str(&text)
        .map_err(|e| anyhow::anyhow!("spec {}: {}", path.display(), e.message()))?;
    spec.validate()?;
    Ok(spec)
}

/// Build in a sibling `.partial` directory and move it into place, so the
/// destination only ever holds a complete artifact.
fn write_atomically(
    dest: &Path,
    marker: &str,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if dest.exists() && !dest.join(marker).exists() {
        bail!(
            "{} exists and is not a {marker} directory; refusing to overwrite it",
            dest.display()
        );
    }
    let name = dest
        .file_name()
        .with_context(|| format!("{} has no directory name", dest.display()))?;
    let partial = dest.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if partial.exists() {
        fs::remove_dir_all(&partial).with_context(|| format!("removing {}", partial.display()))?;
    }
    if let Some(parent) = partial.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    build(&partial)?;
    if dest.exists() {
        fs::remove_dir_all(dest).with_context(|| format!("replacing {}", dest.display()))?;
    }
    fs::rename(&partial, dest).with_context(|| format!("moving archive into {}", dest.display()))
}

fn save_archive(archive: &ModelArchive, dest: &Path) -> Result<()> {
    write_atomically(dest, "manifest.txt", |tmp| {
        archive.save(tmp)?;
        Ok(())
    })
}

fn load_archive(dir: &Path) -> Result<ModelArchive> {
    if !dir.is_dir() {
        bail!("archive {} does not exist", dir.display());
    }
    ModelArchive::load(dir).with_context(|| format!("loading archive {}", dir.display()))
}

fn extractor_for(model: &ModelParams) -> Result<Extractor> {
    let spec = model
        .extractor
        .as_ref()
        .context("archive has no feature extractor spec")?;
    Ok(build_frozen_extractor(spec)?)
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Scene>> {
    if !data.is_dir() {
        bail!("dataset {} does not exist", data.display());
    }
    load_dot_dataset_split(data, split)
        .with_context(|| format!("loading dataset {}", data.display()))
}

/// The scenes of `domain`, or of the dataset's only domain.
fn domain_scenes(data: &Path, split: &str, domain: Option<&str>) -> Result<(DomainId, Vec<Scene>)> {
    let scenes = load_split(data, split)?;
    let mut by_domain = group_by_domain(scenes);
    let d = match domain {
        Some(d) => DomainId::new(d),
        None if by_domain.len() == 1 => by_domain.keys().next().cloned().expect("one domain"),
        None if by_domain.is_empty() => bail!("dataset {} has no `{split}` scenes", data.display()),
        None => {
            let names: Vec<&str> = by_domain.keys().map(DomainId::as_str).collect();
            bail!(
                "dataset {} holds several domains ({}); pass --domain",
                data.display(),
                names.join(", ")
            );
        }
    };
    let scenes = by_domain.remove(&d).with_context(|| {
        format!(
            "dataset {} has no `{split}` scenes of domain {d}",
            data.display()
        )
    })?;
    Ok((d, scenes))
}

fn group_by_domain(scenes: Vec<Scene>) -> BTreeMap<DomainId, Vec<Scene>> {
    let mut by_domain: BTreeMap<DomainId, Vec<Scene>> = BTreeMap::new();
    for s in scenes {
        by_domain.entry(s.domain.clone()).or_default().push(s);
    }
    by_domain
}

fn summary(log: &TrainLog) -> String {
    format!(
        "loss {:.4} -> {:.4} (mean of last {LOSS_EVERY})",
        log.initial().unwrap_or(f64::NAN),
        log.tail_mean(LOSS_EVERY)
    )
}

fn gen_data(a: &crate::GenDataArgs, cfg: &crate::config::GenDataConfig, run: &Run) -> Result<()> {
    let spec = resolve_spec(&a.spec)?;
    if a.count == 0 {
        bail!("scene count must be positive");
    }
    if a.out_dir.join("manifest.csv").exists() {
        bail!("{} already holds a dataset", a.out_dir.display());
    }
    if a.out_dir.exists()
        && fs::read_dir(&a.out_dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true)
    {
        bail!("{} exists and is not empty", a.out_dir.display());
    }
    let scenes = gen_dataset(&spec, a.count, (cfg.height, cfg.width), cfg.seed)?;
    let order: Vec<usize> = (0..scenes.len()).collect();
    let (_, val) = split_train_val(&order, cfg.val_fraction, derive_seed(cfg.seed, 0x5911))?;
    let mut splits = vec!["train"; scenes.len()];
    for &i in &val {
        splits[i] = "val";
    }
    if a.out_dir.exists() {
        fs::remove_dir(&a.out_dir).with_context(|| format!("replacing {}", a.out_dir.display()))?;
    }
    write_atomically(&a.out_dir, "manifest.csv", |tmp| {
        save_dot_dataset(tmp, &scenes, &splits)?;
        Ok(())
    })?;
    let line = format!(
        "wrote {} {} scenes ({} train, {} val) to {}\n",
        scenes.len(),
        spec.name,
        scenes.len() - val.len(),
        val.len(),
        a.out_dir.display()
    );
    run.write("log.txt", &line)?;
    print!("{line}");
    Ok(())
}

fn with_hflip(scenes: Vec<Scene>, hflip: bool) -> Vec<Scene> {
    if hflip {
        augment_hflip(&scenes)
    } else {
        scenes
    }
}

fn cmd_prime(a: &crate::PrimeArgs, cfg: &crate::config::PrimeConfig, run: &Run) -> Result<()> {
    if a.out.exists() && !a.out.join("manifest.txt").exists() {
        bail!("{} exists and is not an archive", a.out.display());
    }
    let (d, scenes) = domain_scenes(&a.data, &cfg.split, a.domain.as_deref())?;
    let channels = scenes[0].pixels.channels();
    let spec = FrozenExtractorSpec::with_output_dim(channels, cfg.feature_dim, cfg.extractor_seed);
    let extractor = build_frozen_extractor(&spec)?;
    let mut model = ModelParams::new(cfg.feature_dim, cfg.model_seed)?.with_extractor(spec);
    let ds = PatchDataset::from_scenes(&extractor, &with_hflip(scenes, cfg.hflip), cfg.patch_size)?;
    let log = prime(&mut model, &ds, &d, &cfg.train_config())?;
    run.loss_csv(&log)?;
    save_archive(&ModelArchive::new(model), &a.out)?;
    let line = format!(
        "primed {d} on {} patches: {}; archive {}\n",
        ds.len(),
        summary(&log),
        a.out.display()
    );
    run.write("log.txt", &line)?;
    print!("{line}");
    Ok(())
}

fn cmd_adapt(a: &crate::AdaptArgs, cfg: &crate::config::AdaptConfig, run: &Run) -> Result<()> {
    let c = &a.common;
    let mut archive = load_archive(&c.archive)?;
    let extractor = extractor_for(&archive.model)?;
    let (d, scenes) = domain_scenes(&c.data, &cfg.split, c.domain.as_deref())?;
    let ds = PatchDataset::from_scenes(&extractor, &with_hflip(scenes, cfg.hflip), cfg.patch_size)?;
    let log = adapt_with(&mut archive.model, &ds, &d, &cfg.train_config(), a.retrain)?;
    run.loss_csv(&log)?;
    let out = c.out.as_ref().unwrap_or(&c.archive);
    save_archive(&archive, out)?;
    let line = format!(
        "adapted {d} on {} patches: {}; archive {}\n",
        ds.len(),
        summary(&log),
        out.display()
    );
    run.write("log.txt", &line)?;
    print!("{line}");
    Ok(())
}

fn cmd_train_refiner(
    a: &crate::DomainArgs,
    cfg: &crate::config::RefinerConfig,
    run: &Run,
) -> Result<()> {
    let mut archive = load_archive(&a.archive)?;
    let extractor = extractor_for(&archive.model)?;
    let (d, scenes) = domain_scenes(&a.data, &cfg.split, a.domain.as_deref())?;
    archive.model.domain(&d)?;
    let pairs = build_refinement_pairs(&archive.model, &extractor, &scenes, &d, cfg.patch_size)?;
    let fit = train_refiner(&mut archive.model, &d, &pairs, &cfg.train_config())?;
    run.loss_csv(&fit.log)?;
    let mut ck = String::from("iteration,heldout_mae\n");
    for (it, m) in &fit.checkpoints {
        let _ = writeln!(ck, "{it},{m}");
    }
    run.write("checkpoints.csv", &ck)?;
    let out = a.out.as_ref().unwrap_or(&a.archive);
    save_archive(&archive, out)?;
    let line = format!(
        "refiner for {d} on {} grids: {}; kept iteration {}; archive {}\n",
        pairs.len(),
        summary(&fit.log),
        fit.selected_iteration,
        out.display()
    );
    run.write("log.txt", &line)?;
    print!("{line}");
    Ok(())
}

fn cmd_train_classifier(
    a: &crate::ClassifierArgs,
    cfg: &crate::config::ClassifierConfig,
    run: &Run,
) -> Result<()> {
    let mut archive = load_archive(&a.archive)?;
    let extractor = extractor_for(&archive.model)?;
    let mut by_domain: BTreeMap<DomainId, Vec<Scene>> = BTreeMap::new();
    for dir in &a.data {
        for (d, mut s) in group_by_domain(load_split(dir, &cfg.split)?) {
            by_domain.entry(d).or_default().append(&mut s);
        }
    }
    if by_domain.len() < 2 {
        bail!(
            "the classifier needs `{}` scenes of at least two domains, found {}",
            cfg.split,
            by_domain.len()
        );
    }
    let domains: Vec<DomainId> = by_domain.keys().cloned().collect();
    let mut head =
        DomainClassifierHead::new(archive.model.feature_dim(), domains.clone(), cfg.head_seed)?;
    let data = by_domain
        .iter()
        .map(|(d, s)| {
            Ok((
                d.clone(),
                PatchDataset::from_scenes(&extractor, s, cfg.patch_size)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let log = train_classifier(&archive.model, &mut head, &data, &cfg.train_config())?;
    run.loss_csv(&log)?;
    archive.classifier = Some(head);
    let out = a.out.as_ref().unwrap_or(&a.archive);
    save_archive(&archive, out)?;
    let names: Vec<&str> = domains.iter().map(DomainId::as_str).collect();
    let line = format!(
        "classifier over {}: {}; archive {}\n",
        names.join(", "),
        summary(&log),
        out.display()
    );
    run.write("log.txt", &line)?;
    print!("{line}");
    Ok(())
}

fn cmd_eval(a: &crate::EvalArgs, cfg: &crate::config::EvalConfig, run: &Run) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let extractor = extractor_for(&archive.model)?;
    let groups: Vec<(DomainId, Vec<Scene>)> = match &a.domain {
        Some(d) => vec![domain_scenes(&a.data, &cfg.split, Some(d))?],
        None => group_by_domain(load_split(&a.data, &cfg.split)?)
            .into_iter()
            .collect(),
    };
    if groups.is_empty() {
        bail!("dataset {} has no `{}` scenes", a.data.display(), cfg.split);
    }
    let mut reports = Vec::new();
    for (d, scenes) in &groups {
        reports.push(evaluate(
            &archive.model,
            &extractor,
            scenes,
            d,
            cfg.patch_size,
            a.refined,
            &cfg.split,
        )?);
    }
    write_report_csv(run.path("report.csv"), &reports)?;
    let text: String = reports
        .iter()
        .map(|r| format!("{r}\n"))
        .collect::<Vec<_>>()
        .join("\n");
    run.write("summary.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_predict(
    a: &crate::PredictArgs,
    cfg: &crate::config::PredictConfig,
    run: &Run,
) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let model = &archive.model;
    let extractor = extractor_for(model)?;
    if !a.image.is_file() {
        bail!("image {} does not exist", a.image.display());
    }
    let image = load_image(&a.image)?;
    let mut out = String::new();
    let domain = if a.auto_domain {
        let head = archive
            .classifier
            .as_ref()
            .context("--auto-domain needs an archive with a trained classifier")?;
        let mode = match cfg.classify_mode.as_str() {
            "patch-vote" => SceneMode::PatchVote,
            "whole-image" => SceneMode::WholeImage,
            other => bail!("classify_mode must be `patch-vote` or `whole-image`, got `{other}`"),
        };
        let c = head.classify_scene(model, &extractor, &image, cfg.patch_size, mode)?;
        let votes: Vec<String> = head
            .domains
            .iter()
            .zip(c.votes.iter().zip(&c.mean_probs))
            .map(|(d, (v, p))| format!("{d}={v} ({p:.3})"))
            .collect();
        let _ = writeln!(
            out,
            "classified as {} (votes: {})",
            c.domain,
            votes.join(", ")
        );
        c.domain
    } else {
        DomainId::new(
            a.domain
                .as_deref()
                .expect("clap requires --domain or --auto-domain"),
        )
    };
    let (mut grid, mut total) = predict_image(model, &extractor, &image, &domain, cfg.patch_size)?;
    if a.refined {
        let net = model
            .domain(&domain)?
            .refiner
            .as_ref()
            .with_context(|| format!("domain {domain} has no trained refiner"))?;
        grid = net.refine(&grid)?;
        total = grid.sum().max(0.0);
    }
    let _ = writeln!(out, "domain: {domain}");
    let _ = writeln!(
        out,
        "grid: {}x{}{}",
        grid.rows(),
        grid.cols(),
        if a.refined { " (refined)" } else { "" }
    );
    let mut csv = String::new();
    for r in 0..grid.rows() {
        let row: Vec<f64> = (0..grid.cols()).map(|c| grid.get(r, c)).collect();
        let _ = writeln!(
            out,
            "  {}",
            row.iter().map(|v| format!("{v:8.3}")).collect::<String>()
        );
        let _ = writeln!(
            csv,
            "{}",
            row.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        );
    }
    let _ = writeln!(out, "total: {total:.3}");
    run.write("grid.csv", &csv)?;
    run.write("prediction.txt", &out)?;
    print!("{out}");
    Ok(())
}

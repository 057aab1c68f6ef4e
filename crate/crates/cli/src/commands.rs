use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cpn_core::baselines::{CodingBank, CompCodeConfig, CompCodeMatcher, Matcher, RegionHistMatcher};
use cpn_core::dataset::{
    generate_synthetic, load_samples, write_corpus, write_manifest, Jitter, ManifestRow, PalmSample, Side, Stage,
    SyntheticPalmSpec,
};
use cpn_core::eval::{self, bias_seed, write_claims, write_sweep_csv, EvalReport, Verifier};
use cpn_core::experiments::{loss_settings, loss_sweep, mu_sweep, write_rows, DeskCorpus, MU_VALUES};
use cpn_core::gabor::{BankConfig, GaborBank};
use cpn_core::model::{CpnConfig, CpnModel};
use cpn_core::roi::{bias_transform, locate_roi, resample_roi, BiasSpec, RoiBox};
use cpn_core::train::{train_with, write_loss_csv, TrainConfig};
use cpn_core::Raster;
use cpn_tensor::checkpoint::{self, NamedArray};

use cpn_cli::descriptors;
use cpn_cli::matchers::{self, load_model};
use cpn_cli::run_config::{ModelFile, RunConfig};

use crate::{
    BaselineMatchArgs, BaselineName, BiasArgs, BiasSweepArgs, CodingArgs, EmbedArgs, EvaluateArgs, ExtractRoiArgs,
    GenBankArgs, GenDataArgs, SetArgs, SweepArgs, SweepKind, TrainArgs,
};

impl CodingArgs {
    fn config(&self) -> CompCodeConfig {
        CompCodeConfig {
            orientations: self.orientations,
            lambda: self.coding_lambda,
            sigma: self.coding_sigma,
            gamma: self.coding_gamma,
            size: self.coding_size,
        }
    }
}

impl SetArgs {
    /// Enrollment and probe samples.
    fn load(&self) -> Result<(Vec<PalmSample>, Vec<PalmSample>)> {
        let (enroll, probes) = match (&self.manifest, &self.gallery, &self.probes) {
            (Some(m), _, _) => {
                let (e, p): (Vec<_>, Vec<_>) =
                    load_samples(m)?.into_iter().partition(|s| s.stage == Stage::Enrollment);
                (e, p)
            }
            (None, Some(g), Some(p)) => (load_samples(g)?, load_samples(p)?),
            _ => bail!("give --manifest, or both --gallery and --probes"),
        };
        ensure!(!enroll.is_empty(), "no enrollment images");
        ensure!(!probes.is_empty(), "no probe images");
        log::info!("{} enrollment and {} probe images", enroll.len(), probes.len());
        Ok((enroll, probes))
    }
}

fn labelled(samples: &[PalmSample]) -> Vec<(u32, &Raster)> {
    samples.iter().map(|s| (s.identity, &s.image)).collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn file_stem(sample: &PalmSample) -> String {
    sample
        .path
        .as_deref()
        .and_then(Path::file_stem)
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn gen_bank(a: GenBankArgs) -> Result<()> {
    let cfg = BankConfig {
        lambdas: a.lambdas,
        sigmas: a.sigmas,
        directions: a.directions,
        size: a.size,
        gamma: a.gamma,
        include_curved: a.curved,
        ..BankConfig::paper()
    };
    let bank = GaborBank::build(&cfg)?;
    create_parent(&a.out)?;
    checkpoint::save(&a.out, &[NamedArray::new("gabor.kernels", bank.kernels())])?;
    let listing = a.out.with_extension("txt");
    std::fs::write(&listing, bank.listing())?;
    log::info!("{} kernels written to {} and {}", bank.len(), a.out.display(), listing.display());
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let defaults = SyntheticPalmSpec::default();
    let spec = SyntheticPalmSpec {
        n_identities: a.identities,
        images_per_identity: a.images,
        enrollment_per_identity: a.enroll,
        image_size: a.size,
        jitter: Jitter {
            translation: a.translation.unwrap_or(defaults.jitter.translation),
            rotation: a.rotation.unwrap_or(defaults.jitter.rotation),
            ..defaults.jitter
        },
        noise: a.noise.unwrap_or(defaults.noise),
        first_identity: a.first_identity,
        seed: a.seed,
        ..defaults
    };
    let samples = generate_synthetic(&spec)?;
    let manifest = write_corpus(&samples, &a.out)?;
    log::info!("{} images written, manifest {}", samples.len(), manifest.display());
    Ok(())
}

/// Writes `images` as PNGs into the manifest's directory and the manifest
/// itself. Keypoints are dropped: they do not survive resampling.
fn write_derived(manifest: &Path, samples: &[PalmSample], images: &[Raster], prefix: &str) -> Result<()> {
    create_parent(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::with_capacity(samples.len());
    for (i, (s, img)) in samples.iter().zip(images).enumerate() {
        let name = format!("{prefix}{i:05}_{}.png", file_stem(s));
        img.save_png(dir.join(&name))?;
        rows.push(ManifestRow {
            path: name,
            identity: s.identity,
            stage: s.stage,
            side: s.side,
            keypoints: None,
        });
    }
    write_manifest(manifest, &rows)?;
    Ok(())
}

pub fn extract_roi(a: ExtractRoiArgs) -> Result<()> {
    let samples = load_samples(&a.manifest)?;
    let rois = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (w, h) = (s.image.width(), s.image.height());
            let roi = match &s.keypoints {
                Some(kp) => {
                    kp.check_bounds(w, h)?;
                    locate_roi(kp, s.side == Side::Left)?
                }
                None => {
                    log::warn!("row {i}: no keypoints, using the whole image");
                    RoiBox::full_image(w, h)
                }
            };
            resample_roi(&s.image, &roi, a.size).with_context(|| format!("row {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = a.out.join("manifest.jsonl");
    write_derived(&manifest, &samples, &rois, "roi")?;
    log::info!("{} ROIs written, manifest {}", rois.len(), manifest.display());
    Ok(())
}

pub fn bias(a: BiasArgs) -> Result<()> {
    let samples = load_samples(&a.input)?;
    let images = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = BiasSpec {
                r: a.r,
                seed: bias_seed(a.seed, a.r, i),
            };
            let b = bias_transform(&s.image, &spec)?;
            log::debug!("row {i}: shift ({}, {})", b.tx, b.ty);
            Ok(b.image)
        })
        .collect::<Result<Vec<_>>>()?;
    write_derived(&a.output, &samples, &images, "bias")?;
    log::info!("{} images biased with r = {}, manifest {}", images.len(), a.r, a.output.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let run = RunConfig::load(&a.config)?;
    let samples: Vec<PalmSample> = load_samples(&run.manifest)?
        .into_iter()
        .filter(|s| run.stage.is_none_or(|st| s.stage == st))
        .collect();
    let identities: Vec<u32> = samples.iter().map(|s| s.identity).collect::<BTreeSet<_>>().into_iter().collect();
    ensure!(identities.len() >= 2, "training needs at least two palms, found {}", identities.len());
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| identities.binary_search(&s.identity).expect("identity was collected"))
        .collect();
    let rois: Vec<&Raster> = samples.iter().map(|s| &s.image).collect();
    let model_cfg = run.model_config(identities.len());
    let train_cfg = run.train_config();
    let model_seed = run.model.seed.unwrap_or(0);
    log::info!(
        "training on {} images of {} palms, {} kernels, {} epochs",
        rois.len(),
        identities.len(),
        model_cfg.bank.kernel_count(),
        train_cfg.epochs
    );
    let mut model = CpnModel::<f32>::new(model_cfg.clone(), model_seed)?;
    let logs = train_with(&mut model, &rois, &labels, &train_cfg, |_| {})?;
    std::fs::create_dir_all(&a.out)?;
    model.save(a.out.join(ModelFile::CHECKPOINT))?;
    write_loss_csv(a.out.join("loss.csv"), &logs)?;
    ModelFile {
        identities,
        model_seed,
        model: model_cfg,
        train: train_cfg,
    }
    .save(&a.out)?;
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let (_, model) = load_model(&a.model)?;
    let samples = load_samples(&a.manifest)?;
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, s)| model.embed(&s.image).with_context(|| format!("row {i}")))
        .collect::<Result<Vec<_>>>()?;
    create_parent(&a.out)?;
    descriptors::save(&a.out, &rows)?;
    let index = a.out.with_extension("csv");
    let mut w = csv::Writer::from_path(&index)?;
    w.write_record(["row", "identity", "side", "stage", "path"])?;
    for (i, s) in samples.iter().enumerate() {
        let side = if s.side == Side::Left { "left" } else { "right" };
        let stage = if s.stage == Stage::Enrollment { "enrollment" } else { "probe" };
        let path = s.path.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
        w.write_record([i.to_string(), s.identity.to_string(), side.into(), stage.into(), path])?;
    }
    w.flush()?;
    log::info!("{} descriptors written to {}, index {}", rows.len(), a.out.display(), index.display());
    Ok(())
}

/// Every probe image against every gallery image.
fn score_pairs<M: Matcher>(m: &M, gallery: &[PalmSample], probes: &[PalmSample], out: &Path) -> Result<usize> {
    let encode = |set: &[PalmSample]| set.iter().map(|s| m.template(&s.image)).collect::<cpn_core::Result<Vec<_>>>();
    let g = encode(gallery)?;
    let p = encode(probes)?;
    create_parent(out)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["probe_row", "gallery_row", "probe_id", "gallery_id", "distance"])?;
    for (pi, pt) in p.iter().enumerate() {
        for (gi, gt) in g.iter().enumerate() {
            w.write_record([
                pi.to_string(),
                gi.to_string(),
                probes[pi].identity.to_string(),
                gallery[gi].identity.to_string(),
                m.distance(pt, gt)?.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(p.len() * g.len())
}

pub fn baseline_match(a: BaselineMatchArgs) -> Result<()> {
    let (gallery, probes) = a.sets.load()?;
    let bank = CodingBank::straight(&a.coding.config())?;
    let pairs = match a.matcher {
        BaselineName::Compcode => score_pairs(&CompCodeMatcher::new(bank), &gallery, &probes, &a.out)?,
        BaselineName::RegionHist => score_pairs(&RegionHistMatcher::new(bank), &gallery, &probes, &a.out)?,
    };
    log::info!("{pairs} scores written to {}", a.out.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let matcher = matchers::build(&a.matcher, &a.coding.config(), a.model.as_deref())?;
    let (enroll, probes) = a.sets.load()?;
    let outcome = matcher.verify(&labelled(&enroll), &labelled(&probes))?;
    let report = EvalReport::from_outcome(&outcome)?;
    report.write_csv_bundle(&a.out)?;
    write_claims(a.out.join("claims.csv"), &outcome.claims)?;
    println!(
        "{}: rank-1 {:.4}, EER {:.4} ({} genuine, {} impostor)",
        report.label, report.rank1, report.eer.eer, report.genuine_count, report.impostor_count
    );
    Ok(())
}

pub fn bias_sweep(a: BiasSweepArgs) -> Result<()> {
    let coding = a.coding.config();
    let built = a
        .matchers
        .iter()
        .map(|n| matchers::build(n, &coding, a.model.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn Verifier> = built.iter().map(|m| m.as_ref()).collect();
    let (enroll, probes) = a.sets.load()?;
    let points = eval::bias_sweep(&labelled(&enroll), &labelled(&probes), &refs, &a.r, a.seed)?;
    create_parent(&a.out)?;
    write_sweep_csv(&a.out, &points)?;
    for p in &points {
        println!("{} r={}: EER {:.4}, rank-1 {:.4}", p.matcher, p.r, p.eer, p.rank1);
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let spec = SyntheticPalmSpec {
        seed: a.data_seed,
        ..SyntheticPalmSpec::default()
    };
    let corpus = DeskCorpus::generate(&spec)?;
    let base = CpnConfig::tiny(spec.n_identities);
    let train = TrainConfig {
        epochs: a.epochs,
        ..TrainConfig::default()
    };
    let out: PathBuf = a.out;
    create_parent(&out)?;
    match a.kind {
        SweepKind::Loss => write_rows(&out, &loss_sweep(&corpus, &base, &train, &loss_settings(), a.model_seed)?)?,
        SweepKind::Mu => write_rows(&out, &mu_sweep(&corpus, &base, &train, &MU_VALUES, a.model_seed)?)?,
    }
    log::info!("sweep written to {}", out.display());
    Ok(())
}

//! Desk-scale experiments on the synthetic corpus: the end-to-end network
//! run, baseline ablations, the bias sweep and the hyperparameter sweeps.
//!
//! The network is trained on the enrollment images of the corpus. Closed-set
//! Rank-1 scores the held-out probes of those identities; verification
//! metrics come from a separately generated corpus whose identities never
//! appear in training.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::baselines::{
    CodingBank, CombinedMatcher, CompCodeConfig, CompCodeMatcher, Matcher, RegionHistMatcher,
};
use crate::dataset::{generate_synthetic, PalmSample, Stage, SyntheticPalmSpec};
use crate::error::{invalid, Result};
use crate::eval::{bias_sweep, compute_eer, run_protocol, score_templates, ProtocolOutcome, SweepPoint, Verifier};
use crate::gabor::Bend;
use crate::model::{cosine_distance, CpnConfig, CpnModel, FusionMode, HeadKind};
use crate::raster::Raster;
use crate::train::{train_with, EpochLog, TrainConfig};

/// Identities in the disjoint verification corpus.
pub const VERIFICATION_IDENTITIES: usize = 20;

/// Training corpus plus an identity-disjoint verification corpus.
#[derive(Clone, Debug)]
pub struct DeskCorpus {
    pub spec: SyntheticPalmSpec,
    pub samples: Vec<PalmSample>,
    pub verification: Vec<PalmSample>,
}

/// The verification corpus: same generator settings, fresh seed, and
/// identity labels starting past the training range.
pub fn verification_spec(spec: &SyntheticPalmSpec) -> SyntheticPalmSpec {
    SyntheticPalmSpec {
        n_identities: VERIFICATION_IDENTITIES,
        first_identity: spec.first_identity + spec.n_identities as u32 + 1000,
        seed: spec.seed.wrapping_mul(31).wrapping_add(17),
        ..spec.clone()
    }
}

fn by_stage(samples: &[PalmSample], stage: Stage) -> Vec<(u32, &Raster)> {
    samples
        .iter()
        .filter(|s| s.stage == stage)
        .map(|s| (s.identity, &s.image))
        .collect()
}

impl DeskCorpus {
    pub fn generate(spec: &SyntheticPalmSpec) -> Result<Self> {
        Ok(DeskCorpus {
            spec: spec.clone(),
            samples: generate_synthetic(spec)?,
            verification: generate_synthetic(&verification_spec(spec))?,
        })
    }

    /// Enrollment ROIs with class labels `identity − first_identity`.
    pub fn training(&self) -> (Vec<&Raster>, Vec<usize>) {
        self.enrollment()
            .into_iter()
            .map(|(id, r)| (r, (id - self.spec.first_identity) as usize))
            .unzip()
    }

    pub fn enrollment(&self) -> Vec<(u32, &Raster)> {
        by_stage(&self.samples, Stage::Enrollment)
    }

    pub fn probes(&self) -> Vec<(u32, &Raster)> {
        by_stage(&self.samples, Stage::Probe)
    }

    pub fn verification_enrollment(&self) -> Vec<(u32, &Raster)> {
        by_stage(&self.verification, Stage::Enrollment)
    }

    pub fn verification_probes(&self) -> Vec<(u32, &Raster)> {
        by_stage(&self.verification, Stage::Probe)
    }
}

/// Closed-set identification and disjoint-identity verification results.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorEval {
    pub closed: ProtocolOutcome,
    pub verification: ProtocolOutcome,
    pub rank1: f64,
    pub eer: f64,
}

/// Scores any embedding under cosine distance on both protocols.
pub fn evaluate_embedding(
    corpus: &DeskCorpus,
    embed: impl Fn(&Raster) -> Result<Vec<f32>>,
) -> Result<DescriptorEval> {
    let encode = |set: Vec<(u32, &Raster)>| -> Result<Vec<(u32, Vec<f32>)>> {
        set.into_iter().map(|(id, r)| Ok((id, embed(r)?))).collect()
    };
    let dist = |a: &Vec<f32>, b: &Vec<f32>| Ok(cosine_distance(a, b));
    let closed = score_templates(&encode(corpus.enrollment())?, &encode(corpus.probes())?, dist)?;
    let verification = score_templates(
        &encode(corpus.verification_enrollment())?,
        &encode(corpus.verification_probes())?,
        dist,
    )?;
    Ok(DescriptorEval {
        rank1: closed.rank1,
        eer: compute_eer(&verification.scores)?.eer,
        closed,
        verification,
    })
}

pub fn evaluate_model(model: &CpnModel<f32>, corpus: &DeskCorpus) -> Result<DescriptorEval> {
    evaluate_embedding(corpus, |r| model.embed(r))
}

#[derive(Clone, Debug)]
pub struct EndToEnd {
    pub model: CpnModel<f32>,
    pub logs: Vec<EpochLog>,
    pub eval: DescriptorEval,
    pub elapsed: Duration,
}

/// Trains a fresh model on the corpus enrollment images and evaluates it.
pub fn run_end_to_end(
    corpus: &DeskCorpus,
    config: &CpnConfig,
    train_cfg: &TrainConfig,
    model_seed: u64,
) -> Result<EndToEnd> {
    if config.n_classes != corpus.spec.n_identities {
        return Err(invalid(format!(
            "model has {} classes but the corpus {} identities",
            config.n_classes, corpus.spec.n_identities
        )));
    }
    let start = Instant::now();
    let mut model = CpnModel::<f32>::new(config.clone(), model_seed)?;
    let (rois, labels) = corpus.training();
    let logs = train_with(&mut model, &rois, &labels, train_cfg, |_| {})?;
    let eval = evaluate_model(&model, corpus)?;
    Ok(EndToEnd {
        model,
        logs,
        eval,
        elapsed: start.elapsed(),
    })
}

/// One labelled `(Rank-1, EER)` result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub rank1: f64,
    pub eer: f64,
}

fn method_row(name: String, outcome: &ProtocolOutcome) -> Result<MethodRow> {
    Ok(MethodRow {
        method: name,
        rank1: outcome.rank1,
        eer: compute_eer(&outcome.scores)?.eer,
    })
}

/// Straight bank, curved bank and their distance average, each scored with
/// the pixel-wise competitive code.
pub fn curved_ablation(
    enrollment: &[(u32, &Raster)],
    probes: &[(u32, &Raster)],
    cfg: &CompCodeConfig,
) -> Result<Vec<MethodRow>> {
    let straight = CompCodeMatcher {
        label: "compcode-straight".into(),
        ..CompCodeMatcher::new(CodingBank::straight(cfg)?)
    };
    let curved = CompCodeMatcher {
        label: "compcode-curved".into(),
        ..CompCodeMatcher::new(CodingBank::curved(cfg, Bend::Positive)?)
    };
    let combined = CombinedMatcher {
        straight: straight.clone(),
        curved: curved.clone(),
    };
    let mut rows = Vec::new();
    for m in [&straight as &dyn Verifier, &curved, &combined] {
        rows.push(method_row(m.name(), &m.verify(enrollment, probes)?)?);
    }
    Ok(rows)
}

/// CompCode and the region-histogram matcher under the ROI-bias sweep.
pub fn bias_robustness(
    enrollment: &[(u32, &Raster)],
    probes: &[(u32, &Raster)],
    cfg: &CompCodeConfig,
    r_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let bank = CodingBank::straight(cfg)?;
    let cc = CompCodeMatcher::new(bank.clone());
    let rh = RegionHistMatcher::new(bank);
    bias_sweep(enrollment, probes, &[&cc, &rh], r_values, seed)
}

/// EER increase of `matcher` between two bias degrees of a sweep.
pub fn eer_increase(points: &[SweepPoint], matcher: &str, from: usize, to: usize) -> Option<f64> {
    let at = |r| points.iter().find(|p| p.matcher == matcher && p.r == r).map(|p| p.eer);
    Some(at(to)? - at(from)?)
}

/// A loss-function setting of the arc-margin study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSetting {
    pub head: HeadKind,
    pub s: f64,
    pub m: f64,
}

/// Softmax, then `(s, m)` ∈ {(64, .5), (32, .5), (16, .5), (64, .3), (64, .7)}.
pub fn loss_settings() -> Vec<LossSetting> {
    let arc = |s, m| LossSetting {
        head: HeadKind::ArcMargin,
        s,
        m,
    };
    vec![
        LossSetting {
            head: HeadKind::Softmax,
            s: 0.0,
            m: 0.0,
        },
        arc(64.0, 0.5),
        arc(32.0, 0.5),
        arc(16.0, 0.5),
        arc(64.0, 0.3),
        arc(64.0, 0.7),
    ]
}

/// Row of the loss-function table; `s` and `m` are empty for softmax.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub loss: String,
    pub s: Option<f64>,
    pub m: Option<f64>,
    pub rank1: f64,
    pub eer: f64,
}

pub fn loss_sweep(
    corpus: &DeskCorpus,
    base: &CpnConfig,
    train_cfg: &TrainConfig,
    settings: &[LossSetting],
    model_seed: u64,
) -> Result<Vec<LossRow>> {
    settings
        .iter()
        .map(|st| {
            let mut cfg = base.clone();
            cfg.head = st.head;
            let arc = st.head == HeadKind::ArcMargin;
            if arc {
                cfg.arc.s = st.s;
                cfg.arc.m = st.m;
            }
            let run = run_end_to_end(corpus, &cfg, train_cfg, model_seed)?;
            log::info!("loss setting {st:?}: rank-1 {:.4}, EER {:.4}", run.eval.rank1, run.eval.eer);
            Ok(LossRow {
                loss: if arc { "arc-margin" } else { "softmax" }.into(),
                s: arc.then_some(st.s),
                m: arc.then_some(st.m),
                rank1: run.eval.rank1,
                eer: run.eval.eer,
            })
        })
        .collect()
}

/// Block-loss weights of the sensitivity study.
pub const MU_VALUES: [f64; 5] = [0.1, 0.3, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MuRow {
    pub mu: f64,
    pub rank1: f64,
    pub eer: f64,
}

pub fn mu_sweep(
    corpus: &DeskCorpus,
    base: &CpnConfig,
    train_cfg: &TrainConfig,
    mus: &[f64],
    model_seed: u64,
) -> Result<Vec<MuRow>> {
    mus.iter()
        .map(|&mu| {
            let cfg = CpnConfig { mu, ..base.clone() };
            let run = run_end_to_end(corpus, &cfg, train_cfg, model_seed)?;
            log::info!("mu {mu}: rank-1 {:.4}, EER {:.4}", run.eval.rank1, run.eval.eer);
            Ok(MuRow {
                mu,
                rank1: run.eval.rank1,
                eer: run.eval.eer,
            })
        })
        .collect()
}

/// Without block loss, average fusion, max fusion and dynamic fusion, each
/// trained from scratch.
pub fn fusion_ablation(
    corpus: &DeskCorpus,
    base: &CpnConfig,
    train_cfg: &TrainConfig,
    model_seed: u64,
) -> Result<Vec<MethodRow>> {
    let variants = [
        ("without-block-loss", CpnConfig { block_loss: false, ..base.clone() }),
        ("average", CpnConfig { fusion: FusionMode::Average, ..base.clone() }),
        ("max", CpnConfig { fusion: FusionMode::Max, ..base.clone() }),
        ("dynamic", CpnConfig { fusion: FusionMode::Dynamic, ..base.clone() }),
    ];
    variants
        .into_iter()
        .map(|(name, cfg)| {
            let run = run_end_to_end(corpus, &cfg, train_cfg, model_seed)?;
            Ok(MethodRow {
                method: name.into(),
                rank1: run.eval.rank1,
                eer: run.eval.eer,
            })
        })
        .collect()
}

/// Each block feature of a trained model used alone as the descriptor.
pub fn blockwise_eval(model: &CpnModel<f32>, corpus: &DeskCorpus) -> Result<Vec<MethodRow>> {
    let blocks = model.config().block_grid.pow(2);
    (0..blocks)
        .map(|b| {
            let eval = evaluate_embedding(corpus, |r| Ok(model.embed_blocks(r)?.swap_remove(b)))?;
            Ok(MethodRow {
                method: format!("block-{}", b + 1),
                rank1: eval.rank1,
                eer: eval.eer,
            })
        })
        .collect()
}

/// Raw standardized pixels under cosine distance, the trivial reference.
pub fn pixel_baseline(corpus: &DeskCorpus) -> Result<DescriptorEval> {
    evaluate_embedding(corpus, |r| Ok(r.standardized().data().iter().map(|&v| v as f32).collect()))
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Protocol outcome of any matcher on the corpus enrollment and probes.
pub fn matcher_outcome<M: Matcher>(matcher: &M, corpus: &DeskCorpus) -> Result<ProtocolOutcome> {
    run_protocol(matcher, &corpus.enrollment(), &corpus.probes())
}

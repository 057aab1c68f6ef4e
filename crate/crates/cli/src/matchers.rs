//! Matchers selectable by name on the command line.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cpn_core::baselines::{CodingBank, CombinedMatcher, CompCodeConfig, CompCodeMatcher, Matcher, RegionHistMatcher};
use cpn_core::eval::Verifier;
use cpn_core::gabor::Bend;
use cpn_core::model::{cosine_distance, CpnModel};
use cpn_core::Raster;

use crate::run_config::ModelFile;

pub const NAMES: [&str; 6] = [
    "compcode",
    "region-hist",
    "compcode-curved",
    "compcode+curved",
    "region-hist+curved",
    "cpn",
];

/// A trained network scored by cosine distance between descriptors.
pub struct CpnMatcher {
    pub model: CpnModel<f32>,
}

impl Matcher for CpnMatcher {
    type Template = Vec<f32>;

    fn name(&self) -> String {
        "cpn".into()
    }

    fn template(&self, roi: &Raster) -> cpn_core::Result<Vec<f32>> {
        self.model.embed(roi)
    }

    fn distance(&self, a: &Vec<f32>, b: &Vec<f32>) -> cpn_core::Result<f64> {
        Ok(cosine_distance(a, b))
    }
}

pub fn load_model(dir: &Path) -> Result<(ModelFile, CpnModel<f32>)> {
    let file = ModelFile::load(dir)?;
    let ckpt = dir.join(ModelFile::CHECKPOINT);
    let model = CpnModel::load(file.model.clone(), &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((file, model))
}

fn curved_compcode(cfg: &CompCodeConfig) -> Result<CompCodeMatcher> {
    Ok(CompCodeMatcher {
        label: "compcode-curved".into(),
        ..CompCodeMatcher::new(CodingBank::curved(cfg, Bend::Positive)?)
    })
}

pub fn build(name: &str, coding: &CompCodeConfig, model: Option<&Path>) -> Result<Box<dyn Verifier>> {
    let straight = || CodingBank::straight(coding);
    Ok(match name {
        "compcode" => Box::new(CompCodeMatcher::new(straight()?)),
        "region-hist" => Box::new(RegionHistMatcher::new(straight()?)),
        "compcode-curved" => Box::new(curved_compcode(coding)?),
        "compcode+curved" => Box::new(CombinedMatcher {
            straight: CompCodeMatcher::new(straight()?),
            curved: curved_compcode(coding)?,
        }),
        "region-hist+curved" => Box::new(CombinedMatcher {
            straight: RegionHistMatcher::new(straight()?),
            curved: RegionHistMatcher {
                label: "region-hist-curved".into(),
                ..RegionHistMatcher::new(CodingBank::curved(coding, Bend::Positive)?)
            },
        }),
        "cpn" => {
            let dir = model.ok_or_else(|| anyhow!("matcher cpn needs --model"))?;
            Box::new(CpnMatcher {
                model: load_model(dir)?.1,
            })
        }
        other => bail!("unknown matcher {other:?}; expected one of {}", NAMES.join(", ")),
    })
}

//! Deep Ensembles: M identically-specified models trained from distinct
//! seeds, aggregated into a mixture mean and variance per class, plus a
//! mutual-information disagreement statistic.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::HyperParams;
use crate::error::{Error, Result};
use crate::formats::afck;
use crate::models::{build_model, train, ArchId, EpochStats, LabeledImages, Model, ModelSpec};
use crate::nn::Tensor;
use crate::scalar::{mix_seed, Scalar};

/// M trained replicas sharing one spec and hyperparameters.
#[derive(Clone, Debug)]
pub struct Ensemble<S> {
    pub members: Vec<Model<S>>,
    pub member_seeds: Vec<u64>,
    pub base_seed: u64,
}

/// Aggregated prediction for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainPrediction {
    /// Mixture mean per class.
    pub mean: Vec<f64>,
    /// Mixture variance per class.
    pub variance: Vec<f64>,
    /// Mutual information between prediction and member identity.
    pub disagreement: f64,
    pub member_scores: Vec<Vec<f64>>,
}

fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

/// Mixture aggregation: mean of member means; variance as mean of member
/// variances plus the spread of member means. Softmax classifiers emit no
/// member variances, so `member_vars = None` passes zeros and the variance
/// reduces to the population variance of the means.
pub fn aggregate(
    member_scores: &[Vec<f64>],
    member_vars: Option<&[Vec<f64>]>,
) -> Result<UncertainPrediction> {
    let m = member_scores.len();
    if m == 0 {
        return Err(Error::Argument("aggregate needs at least one member".into()));
    }
    let k = member_scores[0].len();
    for s in member_scores {
        if s.len() != k {
            return Err(Error::Shape(format!(
                "member score length {} vs {}",
                s.len(),
                k
            )));
        }
    }
    if let Some(vars) = member_vars {
        if vars.len() != m || vars.iter().any(|v| v.len() != k) {
            return Err(Error::Shape(
                "member variance shapes do not match member scores".into(),
            ));
        }
    }

    let mf = m as f64;
    let mut mean = vec![0.0; k];
    for s in member_scores {
        for (acc, &v) in mean.iter_mut().zip(s) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= mf;
    }

    // Centered form of (1/M) sum mu_i^2 - mu_c^2; algebraically identical,
    // never negative.
    let mut variance = vec![0.0; k];
    for s in member_scores {
        for (j, &v) in s.iter().enumerate() {
            let d = v - mean[j];
            variance[j] += d * d;
        }
    }
    for v in variance.iter_mut() {
        *v /= mf;
    }
    if let Some(vars) = member_vars {
        for mv in vars {
            for (j, &v) in mv.iter().enumerate() {
                variance[j] += v / mf;
            }
        }
    }

    let mean_member_entropy =
        member_scores.iter().map(|s| entropy(s)).sum::<f64>() / mf;
    let disagreement = (entropy(&mean) - mean_member_entropy).max(0.0);

    Ok(UncertainPrediction {
        mean,
        variance,
        disagreement,
        member_scores: member_scores.to_vec(),
    })
}

/// Train members with an injected trainer (member index, seed) so the
/// one-retry divergence policy is testable without real training.
///
/// A member that diverges is retrained once with a perturbed seed; a
/// second divergence aborts the ensemble.
pub fn train_members_with<S: Scalar, F>(
    m: usize,
    base_seed: u64,
    trainer: F,
) -> Result<(Vec<Model<S>>, Vec<u64>)>
where
    F: Fn(usize, u64) -> Result<Model<S>> + Sync,
{
    if m == 0 {
        return Err(Error::Argument("ensemble size must be at least 1".into()));
    }
    let results: Vec<(Model<S>, u64)> = (0..m)
        .into_par_iter()
        .map(|idx| -> Result<(Model<S>, u64)> {
            let seed = mix_seed(base_seed, &[0x3a3, idx as u64]);
            match trainer(idx, seed) {
                Ok(model) => Ok((model, seed)),
                Err(Error::Diverged { .. }) => {
                    let retry_seed = mix_seed(seed, &[0xde5e]);
                    match trainer(idx, retry_seed) {
                        Ok(model) => Ok((model, retry_seed)),
                        Err(Error::Diverged { epoch, batch }) => Err(Error::Numerical(format!(
                            "ensemble member {idx} diverged twice (last at epoch {epoch}, batch {batch})"
                        ))),
                        Err(other) => Err(other),
                    }
                }
                Err(other) => Err(other),
            }
        })
        .collect::<Result<_>>()?;
    let (models, seeds): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((models, seeds))
}

/// Train M members differing only in initialization/shuffle seed.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble<S: Scalar>(
    arch: ArchId,
    h: &HyperParams,
    input_hw: (usize, usize),
    train_set: &LabeledImages<S>,
    val_set: &LabeledImages<S>,
    epochs: usize,
    batch_size: usize,
    m: usize,
    base_seed: u64,
) -> Result<Ensemble<S>> {
    let (members, member_seeds) = train_members_with(m, base_seed, |_, seed| {
        let model = build_model(arch, h, input_hw, seed)?;
        train(model, train_set, val_set, epochs, batch_size, h, seed)
    })?;
    Ok(Ensemble {
        members,
        member_seeds,
        base_seed,
    })
}

impl<S: Scalar> Ensemble<S> {
    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.members[0].spec
    }

    /// Run every member and aggregate per image.
    pub fn predict_uncertain(&self, images: &[Tensor<S>]) -> Result<Vec<UncertainPrediction>> {
        let per_member: Vec<Vec<[f64; 2]>> = self
            .members
            .par_iter()
            .map(|model| model.predict_proba(images))
            .collect::<Result<_>>()?;
        (0..images.len())
            .map(|i| {
                let scores: Vec<Vec<f64>> =
                    per_member.iter().map(|p| p[i].to_vec()).collect();
                aggregate(&scores, None)
            })
            .collect()
    }
}

// ---- persistence ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    m: usize,
    base_seed: u64,
    member_seeds: Vec<u64>,
    spec: ModelSpec,
    hyperparams: HyperParams,
}

#[derive(Serialize, Deserialize)]
struct MemberSidecar {
    arch: ArchId,
    hyperparams: HyperParams,
    seed: u64,
    history: Vec<EpochStats>,
}

impl<S: Scalar> Ensemble<S> {
    /// Persist as `ensemble.json` plus one checkpoint and sidecar per member.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = EnsembleMeta {
            m: self.m(),
            base_seed: self.base_seed,
            member_seeds: self.member_seeds.clone(),
            spec: self.spec().clone(),
            hyperparams: self.members[0].hyper.clone(),
        };
        let meta_path = dir.join("ensemble.json");
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Data(format!("ensemble meta serialization: {e}")))?;
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        for (i, model) in self.members.iter().enumerate() {
            afck::write(&dir.join(format!("member_{i:02}.afck")), &model.params)?;
            let sidecar = MemberSidecar {
                arch: model.spec.arch,
                hyperparams: model.hyper.clone(),
                seed: model.seed,
                history: model.history.clone(),
            };
            let sp = dir.join(format!("member_{i:02}.json"));
            let json = serde_json::to_string_pretty(&sidecar)
                .map_err(|e| Error::Data(format!("member sidecar serialization: {e}")))?;
            std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Ensemble<S>> {
        let meta_path = dir.join("ensemble.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: EnsembleMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        let mut members = Vec::with_capacity(meta.m);
        for i in 0..meta.m {
            let params = afck::read(&dir.join(format!("member_{i:02}.afck")))?;
            let sp = dir.join(format!("member_{i:02}.json"));
            let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
            let sidecar: MemberSidecar = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", sp.display())))?;
            members.push(Model {
                spec: meta.spec.clone(),
                hyper: sidecar.hyperparams,
                params,
                seed: sidecar.seed,
                history: sidecar.history,
            });
        }
        Ok(Ensemble {
            members,
            member_seeds: meta.member_seeds,
            base_seed: meta.base_seed,
        })
    }
}

//! Synthetic matched data with Gamma-bounded confounded assignment.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{MatchedSet, Partition};
use crate::rng::{Substreams, STREAM_DGP, STREAM_EXPERIMENT};
use crate::stats::{mean, normal_cdf, quantile, sd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of matched sets.
    pub sets: usize,
    /// Units per set (one treated, n - 1 controls).
    pub n: usize,
    pub d: usize,
    pub p_imp: f64,
    pub alpha_u: f64,
    pub tau_star: f64,
    pub gamma: f64,
    pub outcomes: usize,
    /// Fraction of outcomes whose effect is zeroed per set; used when outcomes > 1.
    pub mask_frac: f64,
    pub two_sided: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sets: 1200,
            n: 4,
            d: 5,
            p_imp: 0.3,
            alpha_u: 0.2,
            tau_star: 3.0,
            gamma: 3.0,
            outcomes: 1,
            mask_frac: 0.6,
            two_sided: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 {
            return invalid("sets must be positive");
        }
        if self.n < 2 {
            return invalid("n must be at least 2");
        }
        if self.d < 2 {
            return invalid("d must be at least 2 (the importance score uses x1 and x2)");
        }
        if !(0.0..=1.0).contains(&self.p_imp) {
            return invalid("p_imp must lie in [0, 1]");
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return invalid("gamma must be finite and at least 1");
        }
        if self.outcomes == 0 {
            return invalid("outcomes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mask_frac) {
            return invalid("mask_frac must lie in [0, 1)");
        }
        if !self.tau_star.is_finite() || !self.alpha_u.is_finite() {
            return invalid("tau_star and alpha_u must be finite");
        }
        Ok(())
    }
}

/// Number of sets used for a target group size: max(1200, 200 m), doubled for trees.
pub fn default_set_count(group_size: usize, tree: bool) -> usize {
    let base = 1200.max(200 * group_size);
    if tree {
        2 * base
    } else {
        base
    }
}

/// Coefficients drawn once per experiment and shared by its replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    /// One coefficient vector per outcome.
    pub beta: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

impl ExperimentParams {
    pub fn draw(d: usize, outcomes: usize, subs: &Substreams) -> Self {
        let mut rng = subs.stream(STREAM_EXPERIMENT, 0);
        let beta = (0..outcomes).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        let eta = (0..d).map(|_| rng.random::<f64>()).collect();
        Self { beta, eta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimData {
    pub sets: Vec<MatchedSet>,
    pub important: Vec<bool>,
    /// Signed effect added to the treated unit, per set and outcome.
    pub effects: Vec<Vec<f64>>,
    /// Assignment probabilities within each set.
    pub assign_probs: Vec<Vec<f64>>,
}

impl SimData {
    pub fn ids(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.id).collect()
    }

    pub fn covariates(&self) -> Vec<Vec<f64>> {
        self.sets.iter().map(|s| s.covariates.clone()).collect()
    }

    /// A set carries signal when any of its outcomes has a nonzero effect.
    pub fn set_nonnull(&self) -> Vec<bool> {
        self.effects.iter().map(|e| e.iter().any(|&v| v != 0.0)).collect()
    }

    /// A group is nonnull when it contains at least one nonnull set.
    pub fn group_nonnull(&self, partition: &Partition) -> Vec<bool> {
        let idx = self.index();
        let nn = self.set_nonnull();
        partition.groups.iter().map(|g| g.iter().any(|id| nn[idx[id]])).collect()
    }

    fn index(&self) -> std::collections::HashMap<usize, usize> {
        self.sets.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }
}

/// Which outcomes have their effect zeroed: ceil(q M) per set, capped at M - 1.
pub fn mask_outcomes<R: Rng + ?Sized>(sets: usize, outcomes: usize, q: f64, rng: &mut R) -> Result<Vec<Vec<bool>>> {
    if outcomes < 2 {
        return invalid("masking needs at least 2 outcomes");
    }
    if !(0.0..1.0).contains(&q) {
        return invalid("mask fraction must lie in [0, 1)");
    }
    let k = ((q * outcomes as f64).ceil() as usize).min(outcomes - 1);
    Ok((0..sets)
        .map(|_| {
            let mut m = vec![false; outcomes];
            for j in sample(rng, outcomes, k) {
                m[j] = true;
            }
            m
        })
        .collect())
}

/// Draws one dataset. Set ids are 1..=sets.
pub fn gen_dataset<R: Rng + ?Sized>(cfg: &SimConfig, params: &ExperimentParams, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    if params.beta.len() != cfg.outcomes || params.eta.len() != cfg.d || params.beta.iter().any(|b| b.len() != cfg.d) {
        return invalid("experiment parameters do not match the configuration");
    }
    let (i_n, n, d, m_out) = (cfg.sets, cfg.n, cfg.d, cfg.outcomes);
    let x: Vec<Vec<f64>> = (0..i_n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let score: Vec<f64> = x.iter().map(|r| r[0] + 0.5 * r[1]).collect();
    let t = quantile(&score, 1.0 - cfg.p_imp);
    let important: Vec<bool> = if cfg.p_imp == 0.0 { vec![false; i_n] } else { score.iter().map(|&s| s >= t).collect() };
    let z: Vec<f64> = x.iter().map(|r| r.iter().zip(&params.eta).map(|(a, b)| a * b).sum::<f64>() - 1.0).collect();
    let (zm, zs) = (mean(&z), sd(&z));
    let tau: Vec<f64> = z
        .iter()
        .map(|&v| cfg.tau_star * normal_cdf(if zs > 0.0 { (v - zm) / zs } else { 0.0 }))
        .collect();
    let masks = if m_out > 1 && cfg.mask_frac > 0.0 {
        Some(mask_outcomes(i_n, m_out, cfg.mask_frac, rng)?)
    } else {
        None
    };
    let lg = cfg.gamma.ln();
    let mut sets = Vec::with_capacity(i_n);
    let mut effects = Vec::with_capacity(i_n);
    let mut probs = Vec::with_capacity(i_n);
    for i in 0..i_n {
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = u.iter().map(|&v| (lg * v).exp()).collect();
        let total: f64 = w.iter().sum();
        let treated = WeightedIndex::new(&w).expect("positive weights").sample(rng);
        let eff: Vec<f64> = (0..m_out)
            .map(|m| {
                let masked = masks.as_ref().is_some_and(|mk| mk[i][m]);
                if important[i] && !masked {
                    tau[i]
                } else {
                    0.0
                }
            })
            .collect();
        let base: Vec<f64> = params.beta.iter().map(|b| b.iter().zip(&x[i]).map(|(a, c)| a * c).sum()).collect();
        let outcomes: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                (0..m_out)
                    .map(|m| {
                        let e: f64 = rng.sample(StandardNormal);
                        let fx = if j == treated { eff[m] } else { 0.0 };
                        base[m] + cfg.alpha_u * u[j] + fx + e
                    })
                    .collect()
            })
            .collect();
        sets.push(MatchedSet::new(i + 1, x[i].clone(), outcomes, treated)?);
        effects.push(eff);
        probs.push(w.iter().map(|v| v / total).collect());
    }
    Ok(SimData { sets, important, effects, assign_probs: probs })
}

/// Replicate `rep` of an experiment: fresh noise from the replicate's DGP stream.
pub fn gen_replicate(cfg: &SimConfig, params: &ExperimentParams, subs: &Substreams, rep: u64) -> Result<SimData> {
    let mut rng = subs.stream(STREAM_DGP, rep);
    gen_dataset(cfg, params, &mut rng)
}

/// Flips the effect direction of every set in a group with probability 1/2.
///
/// Equivalent to negating tau before generation, since the effect enters
/// only the treated unit. Returns the per-group flip bits.
pub fn two_sided_flip<R: Rng + ?Sized>(data: &mut SimData, partition: &Partition, rng: &mut R) -> Vec<bool> {
    let idx = data.index();
    let mut flips = Vec::with_capacity(partition.len());
    for g in &partition.groups {
        let b = rng.random_bool(0.5);
        flips.push(b);
        if !b {
            continue;
        }
        for id in g {
            let i = idx[id];
            let t = data.sets[i].treated_index;
            for (m, e) in data.effects[i].iter_mut().enumerate() {
                data.sets[i].outcomes[t][m] -= 2.0 * *e;
                *e = -*e;
            }
        }
    }
    flips
}

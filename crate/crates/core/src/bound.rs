//! Numeric check that the variational objective upper-bounds the exact
//! negative log-likelihood on small discrete latent-variable models.
//!
//! A model has a finite latent space `Z`, a prior `p(z)`, and a set of
//! observations `(x, c)` each carrying `p(x | z, c)` for every `z`. Factored
//! models enumerate `Z` as the row-major product of per-dimension value sets,
//! with an independent prior per dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::BoundError;

const SUM_TOL: f64 = 1e-9;
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: String,
    pub c: String,
    /// `p(x | z, c)` indexed by latent state.
    pub likelihood: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub prior: Vec<f64>,
    /// Per-dimension priors for a factored model; `prior` is their product.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<Vec<f64>>>,
    pub observations: Vec<Observation>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), String> {
    if p.is_empty() {
        return Err(format!("{what} is empty"));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("{what} has entry {v}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(format!("{what} sums to {s}"));
    }
    Ok(())
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// A distribution drawn as normalized uniform positives.
pub fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    normalized((0..n).map(|_| rng.gen_range(1e-3..1.0)).collect())
}

impl ToyModel {
    pub fn new(prior: Vec<f64>, observations: Vec<Observation>) -> Result<Self, BoundError> {
        let m = ToyModel {
            prior,
            factors: None,
            observations,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn factored(
        factors: Vec<Vec<f64>>,
        observations: Vec<Observation>,
    ) -> Result<Self, BoundError> {
        let mut prior = vec![1.0];
        for f in &factors {
            prior = prior
                .iter()
                .flat_map(|a| f.iter().map(move |b| a * b))
                .collect();
        }
        let m = ToyModel {
            prior,
            factors: Some(factors),
            observations,
        };
        m.validate()?;
        Ok(m)
    }

    /// Random model with the given dimension sizes. A single size gives an
    /// unfactored model.
    pub fn random(
        sizes: &[usize],
        n_observations: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, BoundError> {
        let n: usize = sizes.iter().product();
        let observations = (0..n_observations)
            .map(|i| Observation {
                x: format!("x{i}"),
                c: "c".into(),
                likelihood: (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect(),
            })
            .collect();
        if sizes.len() == 1 {
            Self::new(random_distribution(n, rng), observations)
        } else {
            let factors = sizes.iter().map(|&k| random_distribution(k, rng)).collect();
            Self::factored(factors, observations)
        }
    }

    pub fn validate(&self) -> Result<(), BoundError> {
        check_distribution(&self.prior, "prior").map_err(BoundError::Model)?;
        if let Some(factors) = &self.factors {
            for (d, f) in factors.iter().enumerate() {
                check_distribution(f, &format!("factor {d}")).map_err(BoundError::Model)?;
            }
            let n: usize = factors.iter().map(Vec::len).product();
            if n != self.prior.len() {
                return Err(BoundError::Model(format!(
                    "factor sizes give {n} states but the prior has {}",
                    self.prior.len()
                )));
            }
        }
        if self.observations.is_empty() {
            return Err(BoundError::Model("no observations".into()));
        }
        for o in &self.observations {
            if o.likelihood.len() != self.prior.len() {
                return Err(BoundError::Model(format!(
                    "observation ({}, {}) has {} likelihoods for {} states",
                    o.x,
                    o.c,
                    o.likelihood.len(),
                    self.prior.len()
                )));
            }
            if let Some(v) = o
                .likelihood
                .iter()
                .find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
            {
                return Err(BoundError::Model(format!("likelihood {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.prior.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        match &self.factors {
            Some(f) => f.iter().map(Vec::len).collect(),
            None => vec![self.prior.len()],
        }
    }

    pub fn observation(&self, x: &str, c: &str) -> Result<usize, BoundError> {
        self.observations
            .iter()
            .position(|o| o.x == x && o.c == c)
            .ok_or_else(|| BoundError::UnknownObservation {
                x: x.into(),
                c: c.into(),
            })
    }

    /// Row-major joint index of per-dimension values.
    pub fn joint_index(&self, values: &[usize]) -> usize {
        self.sizes()
            .iter()
            .zip(values)
            .fold(0, |acc, (k, v)| acc * k + v)
    }

    pub fn decode(&self, mut z: usize) -> Vec<usize> {
        let sizes = self.sizes();
        let mut out = vec![0; sizes.len()];
        for (d, k) in sizes.iter().enumerate().rev() {
            out[d] = z % k;
            z /= k;
        }
        out
    }

    fn marginal(&self, obs: usize) -> f64 {
        let o = &self.observations[obs];
        self.prior
            .iter()
            .zip(&o.likelihood)
            .map(|(p, l)| p * l)
            .sum()
    }

    pub fn exact_nll(&self, obs: usize) -> Result<f64, BoundError> {
        let m = self.marginal(obs);
        if m <= 0.0 {
            return Err(BoundError::InfiniteNll);
        }
        Ok(-m.ln())
    }

    /// Bayes posterior `p(z | x, c)`.
    pub fn posterior(&self, obs: usize) -> Result<PosteriorTable, BoundError> {
        let m = self.marginal(obs);
        if m <= 0.0 {
            return Err(BoundError::InfiniteNll);
        }
        let o = &self.observations[obs];
        Ok(PosteriorTable(
            self.prior
                .iter()
                .zip(&o.likelihood)
                .map(|(p, l)| p * l / m)
                .collect(),
        ))
    }

    /// Posterior that is one-hot on each observed dimension and equal to the
    /// dimension prior elsewhere.
    pub fn observed_posterior(
        &self,
        observed: &[Option<usize>],
    ) -> Result<PosteriorTable, BoundError> {
        let factors = self.factor_list();
        if observed.len() != factors.len() {
            return Err(BoundError::Posterior(format!(
                "{} observed slots for {} dimensions",
                observed.len(),
                factors.len()
            )));
        }
        let per_dim = factors
            .iter()
            .zip(observed)
            .map(|(f, o)| match o {
                Some(v) if *v < f.len() => Ok((0..f.len())
                    .map(|i| if i == *v { 1.0 } else { 0.0 })
                    .collect()),
                Some(v) => Err(BoundError::Posterior(format!("value {v} out of range"))),
                None => Ok(f.clone()),
            })
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        Ok(PosteriorTable(
            (0..self.n_states())
                .map(|z| {
                    self.decode(z)
                        .iter()
                        .zip(&per_dim)
                        .map(|(v, q)| q[*v])
                        .product()
                })
                .collect(),
        ))
    }

    /// Sum of per-dimension KL terms for an observed pattern: `-ln p_d(v)` for
    /// each observed dimension, zero for the rest.
    pub fn per_dimension_kl(&self, observed: &[Option<usize>]) -> Result<f64, BoundError> {
        let mut total = 0.0;
        for (f, o) in self.factor_list().iter().zip(observed) {
            if let Some(v) = o {
                let p = *f
                    .get(*v)
                    .ok_or_else(|| BoundError::Posterior(format!("value {v} out of range")))?;
                if p <= 0.0 {
                    return Err(BoundError::InfiniteKl);
                }
                total -= p.ln();
            }
        }
        Ok(total)
    }

    fn factor_list(&self) -> Vec<Vec<f64>> {
        self.factors
            .clone()
            .unwrap_or_else(|| vec![self.prior.clone()])
    }
}

/// `q(z | x, c)` over the model's latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PosteriorTable(pub Vec<f64>);

impl PosteriorTable {
    pub fn new(q: Vec<f64>) -> Result<Self, BoundError> {
        check_distribution(&q, "posterior").map_err(BoundError::Posterior)?;
        Ok(PosteriorTable(q))
    }
}

/// `KL(q || p)` with `0 ln 0 = 0`.
pub fn kl(q: &[f64], p: &[f64]) -> Result<f64, BoundError> {
    let mut total = 0.0;
    for (qi, pi) in q.iter().zip(p) {
        if *qi == 0.0 {
            continue;
        }
        if *pi == 0.0 {
            return Err(BoundError::InfiniteKl);
        }
        total += qi * (qi / pi).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundComponents {
    /// `E_q[-ln p(x | z, c)]`; infinite when `q` covers a zero-likelihood state.
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn elbo_upper_bound(
    m: &ToyModel,
    obs: usize,
    q: &PosteriorTable,
) -> Result<BoundComponents, BoundError> {
    if q.0.len() != m.n_states() {
        return Err(BoundError::Posterior(format!(
            "{} entries for {} states",
            q.0.len(),
            m.n_states()
        )));
    }
    let o = &m.observations[obs];
    let mut reconstruction = 0.0;
    for (qi, li) in q.0.iter().zip(&o.likelihood) {
        if *qi == 0.0 {
            continue;
        }
        reconstruction += if *li == 0.0 {
            f64::INFINITY
        } else {
            -qi * li.ln()
        };
    }
    let kl = kl(&q.0, &m.prior)?;
    Ok(BoundComponents {
        reconstruction,
        kl,
        total: reconstruction + kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub check: String,
    pub observation: usize,
    pub q: Vec<f64>,
    pub nll: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub violations: usize,
    pub max_gap_at_posterior: f64,
    /// Factored models only: mismatches between joint KL and the sum of
    /// per-dimension terms, or KL drift under a perturbed likelihood.
    pub kl_mismatches: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.kl_mismatches == 0 && self.max_gap_at_posterior <= 1e-9
    }
}

const MAX_COUNTEREXAMPLES: usize = 10;

fn record(
    report: &mut BoundReport,
    check: &str,
    obs: usize,
    q: &PosteriorTable,
    nll: f64,
    bound: f64,
) {
    report.violations += 1;
    if report.counterexamples.len() < MAX_COUNTEREXAMPLES {
        report.counterexamples.push(Counterexample {
            check: check.into(),
            observation: obs,
            q: q.0.clone(),
            nll,
            bound,
        });
    }
}

/// Runs `trials` random posteriors per model and checks the bound, plus
/// tightness at the Bayes posterior for every observation.
pub fn verify_bound(m: &ToyModel, trials: usize, seed: u64) -> Result<BoundReport, BoundError> {
    m.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BoundReport {
        sizes: m.sizes(),
        trials,
        violations: 0,
        max_gap_at_posterior: 0.0,
        kl_mismatches: 0,
        counterexamples: Vec::new(),
    };

    for obs in 0..m.observations.len() {
        let nll = m.exact_nll(obs)?;
        let post = m.posterior(obs)?;
        let b = elbo_upper_bound(m, obs, &post)?.total;
        report.max_gap_at_posterior = report.max_gap_at_posterior.max((b - nll).abs());
    }

    let factored = m.factors.is_some();
    for t in 0..trials {
        let obs = t % m.observations.len();
        let nll = m.exact_nll(obs)?;
        let q = PosteriorTable(random_distribution(m.n_states(), &mut rng));
        let b = elbo_upper_bound(m, obs, &q)?.total;
        if b < nll - BOUND_TOL {
            record(&mut report, "random", obs, &q, nll, b);
        }

        if factored {
            let observed: Vec<Option<usize>> = m
                .sizes()
                .iter()
                .map(|&k| rng.gen_bool(0.5).then(|| rng.gen_range(0..k)))
                .collect();
            let q = m.observed_posterior(&observed)?;
            let parts = elbo_upper_bound(m, obs, &q)?;
            if parts.total < nll - BOUND_TOL {
                record(&mut report, "observed", obs, &q, nll, parts.total);
            }
            let per_dim = m.per_dimension_kl(&observed)?;
            let mut perturbed = m.clone();
            for l in &mut perturbed.observations[obs].likelihood {
                *l = (*l * rng.gen_range(0.5..1.0)).max(1e-6);
            }
            let kl_perturbed = elbo_upper_bound(&perturbed, obs, &q)?.kl;
            if (parts.kl - per_dim).abs() > 1e-9 || (kl_perturbed - parts.kl).abs() > 1e-12 {
                report.kl_mismatches += 1;
            }
        }
    }
    Ok(report)
}

/// Latent shapes exercised by default: two states, four states, and a
/// factored 3 x 2 space.
pub const REFERENCE_SHAPES: [&[usize]; 3] = [&[2], &[4], &[3, 2]];

/// One random model per reference shape, four observations each.
pub fn reference_models(seed: u64) -> Result<Vec<ToyModel>, BoundError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    REFERENCE_SHAPES
        .iter()
        .map(|sizes| ToyModel::random(sizes, 4, &mut rng))
        .collect()
}

//! Worst-case expected loss over density-ratio-bounded distribution sets.
//!
//! Given an empirical loss distribution `P` with atoms `(loss_i, p_i)`, the
//! RU set contains every `Q` with `Γ⁻¹ ≤ dQ/dP ≤ Γ`. Its worst case puts ratio
//! `Γ` on the highest losses until the normalization budget runs out, one
//! atom takes a fractional ratio, and everything below gets `Γ⁻¹`. The P-mass
//! that ends up at ratio `Γ` is `1 − η(Γ)`, so the Q-mass there is `η(Γ)`.
//!
//! The directional set only lets atoms whose residual sign matches `d` be
//! upweighted; every other atom is pinned at `Γ⁻¹`.
//!
//! [`sup_oracle_lp`] solves the same linear programs through their Lagrangian
//! dual and shares no code with the greedy constructions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Direction, LossError, MetaInfo};
use crate::scalar::{cmp_partial, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Parameter(#[from] LossError),
    #[error("level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("distribution is empty")]
    Empty,
    #[error("probability at index {index} is not positive ({prob})")]
    NonPositiveProbability { index: usize, prob: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{signs} signs supplied for {points} points")]
    SignCount { signs: usize, points: usize },
    #[error(
        "not enough mass on the requested side: upweighting needs P-mass {needed}, only {available} available (deficit {deficit})"
    )]
    Infeasible {
        needed: f64,
        available: f64,
        deficit: f64,
    },
}

/// Finite discrete distribution over real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution<T> {
    points: Vec<(T, T)>,
}

impl<T: Scalar> DiscreteDistribution<T> {
    /// `(value, probability)` pairs; probabilities must be positive and sum
    /// to one within `1e-12`.
    pub fn new(points: Vec<(T, T)>) -> Result<Self, RobustnessError> {
        if points.is_empty() {
            return Err(RobustnessError::Empty);
        }
        let mut total = T::zero();
        for (i, &(v, p)) in points.iter().enumerate() {
            if !v.is_finite_value() || !p.is_finite_value() {
                return Err(RobustnessError::NonFinite(i));
            }
            if p <= T::zero() {
                return Err(RobustnessError::NonPositiveProbability {
                    index: i,
                    prob: p.to_f64_lossy(),
                });
            }
            total = total + p;
        }
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(RobustnessError::NotNormalized(total.to_f64_lossy()));
        }
        Ok(Self { points })
    }

    /// Equal probability on every value.
    pub fn uniform(values: &[T]) -> Result<Self, RobustnessError> {
        if values.is_empty() {
            return Err(RobustnessError::Empty);
        }
        let p = T::one() / T::from_count(values.len());
        Self::new(values.iter().map(|&v| (v, p)).collect())
    }

    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> T {
        self.points
            .iter()
            .fold(T::zero(), |acc, &(v, p)| acc + v * p)
    }

    /// Indices sorted by value descending; ties keep index order.
    fn descending_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| cmp_partial(&self.points[b].0, &self.points[a].0));
        idx
    }

    /// Lower quantile: the smallest value whose CDF reaches `level`.
    pub fn quantile(&self, level: T) -> Result<T, RobustnessError> {
        check_level(level)?;
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| cmp_partial(&self.points[a].0, &self.points[b].0));
        let mut cdf = T::zero();
        for &i in &idx {
            cdf = cdf + self.points[i].1;
            if cdf >= level {
                return Ok(self.points[i].0);
            }
        }
        Ok(self.points[idx[idx.len() - 1]].0)
    }
}

/// Density ratios `dQ/dP` for each atom and the resulting expected loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase<T> {
    pub ratios: Vec<T>,
    pub sup_value: T,
    /// Loss value of the last atom that received any upweighting.
    pub threshold: Option<T>,
}

impl<T: Scalar> WorstCase<T> {
    /// `E_Q[v] − E_P[v]` for per-atom values `v` (e.g. outcomes).
    pub fn mean_shift(&self, dist: &DiscreteDistribution<T>, values: &[T]) -> T {
        dist.points
            .iter()
            .zip(&self.ratios)
            .zip(values)
            .fold(T::zero(), |acc, ((&(_, p), &r), &v)| {
                acc + p * (r - T::one()) * v
            })
    }

    /// Whether the worst case shifts the mean of `values` strictly in
    /// direction `d`.
    pub fn shifts_mean_toward(
        &self,
        dist: &DiscreteDistribution<T>,
        values: &[T],
        d: Direction,
    ) -> bool {
        let shift = Direction::of(self.mean_shift(dist, values));
        shift != Direction::None && shift == d
    }
}

/// `Γ / (Γ + 1)`, the Q-mass that receives ratio `Γ` in a worst case.
pub fn eta<T: Scalar>(gamma: T) -> Result<T, RobustnessError> {
    check_gamma(gamma)?;
    Ok(gamma / (gamma + T::one()))
}

/// Expected value of the upper `1 − level` tail.
///
/// An atom straddling the quantile is included fractionally so the tail mass
/// is exactly `1 − level`.
pub fn cvar<T: Scalar>(dist: &DiscreteDistribution<T>, level: T) -> Result<T, RobustnessError> {
    check_level(level)?;
    let tail = T::one() - level;
    let mut remaining = tail;
    let mut acc = T::zero();
    for i in dist.descending_order() {
        if remaining <= T::zero() {
            break;
        }
        let (v, p) = dist.points[i];
        let take = p.min_of(remaining);
        acc = acc + take * v;
        remaining = remaining - take;
    }
    Ok(acc / tail)
}

/// Worst case over the RU set `Γ⁻¹ ≤ dQ/dP ≤ Γ`.
pub fn worst_case_ru<T: Scalar>(
    losses: &DiscreteDistribution<T>,
    gamma: T,
) -> Result<WorstCase<T>, RobustnessError> {
    check_gamma(gamma)?;
    let eligible = vec![true; losses.len()];
    greedy_fill(losses, gamma, &eligible)
}

/// Worst case over the directional set: only atoms with `signs[i] == d`
/// may be upweighted.
///
/// Fails when the matching atoms carry less than the P-mass `1/(Γ + 1)`
/// that the upweighting needs.
pub fn worst_case_dru<T: Scalar>(
    losses: &DiscreteDistribution<T>,
    signs: &[Direction],
    meta: &MetaInfo<T>,
) -> Result<WorstCase<T>, RobustnessError> {
    check_gamma(meta.gamma)?;
    if meta.direction == Direction::None && meta.gamma > T::one() {
        return Err(LossError::MissingDirection(meta.gamma.to_f64_lossy()).into());
    }
    let eligible = directional_mask(signs, meta.direction, losses.len())?;
    greedy_fill(losses, meta.gamma, &eligible)
}

/// `signs[i] == d`, checked for length.
pub fn directional_mask(
    signs: &[Direction],
    d: Direction,
    points: usize,
) -> Result<Vec<bool>, RobustnessError> {
    if signs.len() != points {
        return Err(RobustnessError::SignCount {
            signs: signs.len(),
            points,
        });
    }
    Ok(signs.iter().map(|&s| s != Direction::None && s == d).collect())
}

fn greedy_fill<T: Scalar>(
    dist: &DiscreteDistribution<T>,
    gamma: T,
    eligible: &[bool],
) -> Result<WorstCase<T>, RobustnessError> {
    let inv = T::one() / gamma;
    let spread = gamma - inv;
    // every atom starts at Γ⁻¹; the rest of the unit mass must be added on top
    let mut budget = T::one() - inv;
    let available: T = dist
        .points
        .iter()
        .zip(eligible)
        .filter(|(_, &e)| e)
        .fold(T::zero(), |acc, (&(_, p), _)| acc + p);
    if budget > spread * available {
        let needed = T::one() / (gamma + T::one());
        return Err(RobustnessError::Infeasible {
            needed: needed.to_f64_lossy(),
            available: available.to_f64_lossy(),
            deficit: (needed - available).to_f64_lossy(),
        });
    }

    let mut ratios = vec![inv; dist.len()];
    let mut threshold = None;
    for i in dist.descending_order() {
        if budget <= T::zero() {
            break;
        }
        if !eligible[i] {
            continue;
        }
        let (loss, p) = dist.points[i];
        let take = (spread * p).min_of(budget);
        ratios[i] = inv + take / p;
        budget = budget - take;
        threshold = Some(loss);
    }
    let sup_value = dist
        .points
        .iter()
        .zip(&ratios)
        .fold(T::zero(), |acc, (&(l, p), &r)| acc + l * p * r);
    Ok(WorstCase {
        ratios,
        sup_value,
        threshold,
    })
}

/// Maximum of `Σ wᵢ lossᵢ` over `wᵢ ∈ [pᵢ/Γ, Γ pᵢ]`, `Σ wᵢ = 1`.
///
/// With `eligible`, atoms marked `false` are fixed at `pᵢ/Γ`. Solved by
/// minimizing the piecewise-linear dual `λ + Σ maxᵢ wᵢ(lossᵢ − λ)` over its
/// breakpoints `λ ∈ {lossᵢ}`, which is exact for a feasible program.
pub fn sup_oracle_lp<T: Scalar>(
    losses: &DiscreteDistribution<T>,
    gamma: T,
    eligible: Option<&[bool]>,
) -> Result<T, RobustnessError> {
    check_gamma(gamma)?;
    if let Some(mask) = eligible {
        if mask.len() != losses.len() {
            return Err(RobustnessError::SignCount {
                signs: mask.len(),
                points: losses.len(),
            });
        }
    }
    let bounds: Vec<(T, T, T)> = losses
        .points()
        .iter()
        .enumerate()
        .map(|(i, &(l, p))| {
            let lo = p / gamma;
            let hi = if eligible.is_none_or(|m| m[i]) {
                p * gamma
            } else {
                lo
            };
            (l, lo, hi)
        })
        .collect();

    let lo_sum = bounds.iter().fold(T::zero(), |acc, b| acc + b.1);
    let hi_sum = bounds.iter().fold(T::zero(), |acc, b| acc + b.2);
    if hi_sum < T::one() || lo_sum > T::one() {
        let available: T = losses
            .points()
            .iter()
            .enumerate()
            .filter(|(i, _)| eligible.is_none_or(|m| m[*i]))
            .fold(T::zero(), |acc, (_, &(_, p))| acc + p);
        let needed = T::one() / (gamma + T::one());
        return Err(RobustnessError::Infeasible {
            needed: needed.to_f64_lossy(),
            available: available.to_f64_lossy(),
            deficit: (needed - available).to_f64_lossy(),
        });
    }

    let dual = |lambda: T| {
        bounds.iter().fold(lambda, |acc, &(l, lo, hi)| {
            let slack = l - lambda;
            acc + if slack > T::zero() { hi * slack } else { lo * slack }
        })
    };
    let best = bounds
        .iter()
        .map(|&(l, _, _)| dual(l))
        .reduce(|a, b| a.min_of(b))
        .expect("distribution is non-empty");
    Ok(best)
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<(), RobustnessError> {
    if gamma >= T::one() {
        Ok(())
    } else {
        Err(LossError::GammaBelowOne(gamma.to_f64_lossy()).into())
    }
}

fn check_level<T: Scalar>(level: T) -> Result<(), RobustnessError> {
    if level > T::zero() && level < T::one() {
        Ok(())
    } else {
        Err(RobustnessError::Level(level.to_f64_lossy()))
    }
}

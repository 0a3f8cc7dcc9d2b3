//! Pointwise regression losses: squared, RU, directional RU and squared pinball.
//!
//! All losses take a prediction `z`, an outcome `y` and, for the two robust
//! losses, the auxiliary threshold `a` produced by the alpha network. The
//! base loss inside RU and dRU is always the squared error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("gamma must be >= 1, got {0}")]
    GammaBelowOne(f64),
    #[error("pinball level p must lie in (0, 1), got {0}")]
    PinballLevel(f64),
    #[error("directional loss needs direction -1 or +1 when gamma > 1 (gamma = {0}); use the RU loss instead")]
    MissingDirection(f64),
}

/// Direction of the expected selection bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Direction {
    Down,
    None,
    Up,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Down => -1,
            Direction::None => 0,
            Direction::Up => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Down => Direction::Up,
            Direction::None => Direction::None,
            Direction::Up => Direction::Down,
        }
    }

    /// Sign of a value as a direction; zero maps to `None`.
    pub fn of<T: Scalar>(v: T) -> Self {
        if v > T::zero() {
            Direction::Up
        } else if v < T::zero() {
            Direction::Down
        } else {
            Direction::None
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        d.sign()
    }
}

impl TryFrom<i8> for Direction {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            -1 => Ok(Direction::Down),
            0 => Ok(Direction::None),
            1 => Ok(Direction::Up),
            other => Err(format!("direction must be -1, 0 or 1, got {other}")),
        }
    }
}

/// Robustness meta-information for one target: bias magnitude and direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaInfo<T> {
    pub gamma: T,
    pub direction: Direction,
}

impl<T: Scalar> MetaInfo<T> {
    pub fn new(gamma: T, direction: Direction) -> Result<Self, LossError> {
        check_gamma(gamma)?;
        Ok(Self { gamma, direction })
    }

    /// Γ = 1 with no direction: the missing-at-random case.
    pub fn unbiased() -> Self {
        Self {
            gamma: T::one(),
            direction: Direction::None,
        }
    }
}

/// Which loss to train with, along with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec<T> {
    Squared,
    Ru { gamma: T },
    Dru { meta: MetaInfo<T> },
    Pinball { p: T },
}

impl<T: Scalar> LossSpec<T> {
    pub fn ru(gamma: T) -> Result<Self, LossError> {
        check_gamma(gamma)?;
        Ok(LossSpec::Ru { gamma })
    }

    pub fn dru(meta: MetaInfo<T>) -> Result<Self, LossError> {
        check_meta(&meta)?;
        Ok(LossSpec::Dru { meta })
    }

    pub fn pinball(p: T) -> Result<Self, LossError> {
        check_level(p)?;
        Ok(LossSpec::Pinball { p })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            LossSpec::Squared => Ok(()),
            LossSpec::Ru { gamma } => check_gamma(*gamma),
            LossSpec::Dru { meta } => check_meta(meta),
            LossSpec::Pinball { p } => check_level(*p),
        }
    }

    /// Whether the loss consumes the auxiliary threshold network.
    pub fn needs_alpha(&self) -> bool {
        matches!(self, LossSpec::Ru { .. } | LossSpec::Dru { .. })
    }

    /// Loss value; `a` is ignored by losses without a threshold.
    pub fn value(&self, z: T, a: T, y: T) -> Result<T, LossError> {
        match self {
            LossSpec::Squared => Ok(squared_loss(z, y)),
            LossSpec::Ru { gamma } => ru_loss(z, a, y, *gamma),
            LossSpec::Dru { meta } => dru_loss(z, a, y, meta),
            LossSpec::Pinball { p } => pinball_loss(z, y, *p),
        }
    }

    /// `(dL/dz, dL/da)`. See [`loss_gradients`].
    pub fn gradients(&self, z: T, a: T, y: T) -> (T, T) {
        loss_gradients(self, z, a, y)
    }
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<(), LossError> {
    // written so that NaN fails too
    if gamma >= T::one() {
        Ok(())
    } else {
        Err(LossError::GammaBelowOne(gamma.to_f64_lossy()))
    }
}

fn check_meta<T: Scalar>(meta: &MetaInfo<T>) -> Result<(), LossError> {
    check_gamma(meta.gamma)?;
    if meta.direction == Direction::None && meta.gamma > T::one() {
        return Err(LossError::MissingDirection(meta.gamma.to_f64_lossy()));
    }
    Ok(())
}

fn check_level<T: Scalar>(p: T) -> Result<(), LossError> {
    if p > T::zero() && p < T::one() {
        Ok(())
    } else {
        Err(LossError::PinballLevel(p.to_f64_lossy()))
    }
}

pub fn squared_loss<T: Scalar>(z: T, y: T) -> T {
    let r = z - y;
    r * r
}

/// `Γ⁻¹ L + (1 − Γ⁻¹) a + (Γ − Γ⁻¹)(L − a)₊` with `L = (z − y)²`.
pub fn ru_loss<T: Scalar>(z: T, a: T, y: T, gamma: T) -> Result<T, LossError> {
    check_gamma(gamma)?;
    let inv = T::one() / gamma;
    let l = squared_loss(z, y);
    Ok(inv * l + (T::one() - inv) * a + (gamma - inv) * (l - a).positive_part())
}

/// `Γ⁻¹ L + (Γ − 1) a + ((Γ² − 1)/Γ)(L − a)₊ · [sign(z − y) = d]`.
///
/// The hinge is gated off when `z == y`.
pub fn dru_loss<T: Scalar>(z: T, a: T, y: T, meta: &MetaInfo<T>) -> Result<T, LossError> {
    check_meta(meta)?;
    let gamma = meta.gamma;
    let l = squared_loss(z, y);
    let mut out = l / gamma + (gamma - T::one()) * a;
    if residual_on_side(z, y, meta.direction) {
        out = out + hinge_coefficient(gamma) * (l - a).positive_part();
    }
    Ok(out)
}

/// `p (z − y)²` when over-predicting, `(1 − p)(z − y)²` when under-predicting.
pub fn pinball_loss<T: Scalar>(z: T, y: T, p: T) -> Result<T, LossError> {
    check_level(p)?;
    Ok(pinball_weight(z, y, p) * squared_loss(z, y))
}

/// Subgradient `(dL/dz, dL/da)` of a validated loss.
///
/// At a hinge or indicator boundary the flat (lower) branch is used, so the
/// hinge counts as active only when `L > a` strictly and the direction gate
/// only when `sign(z − y)` is non-zero and equals `d`.
pub fn loss_gradients<T: Scalar>(spec: &LossSpec<T>, z: T, a: T, y: T) -> (T, T) {
    let two = T::one() + T::one();
    let r = z - y;
    let dl_dz = two * r;
    match spec {
        LossSpec::Squared => (dl_dz, T::zero()),
        LossSpec::Ru { gamma } => {
            let inv = T::one() / *gamma;
            let mut dz = inv * dl_dz;
            let mut da = T::one() - inv;
            if r * r > a {
                let c = *gamma - inv;
                dz = dz + c * dl_dz;
                da = da - c;
            }
            (dz, da)
        }
        LossSpec::Dru { meta } => {
            let gamma = meta.gamma;
            let mut dz = dl_dz / gamma;
            let mut da = gamma - T::one();
            if residual_on_side(z, y, meta.direction) && r * r > a {
                let c = hinge_coefficient(gamma);
                dz = dz + c * dl_dz;
                da = da - c;
            }
            (dz, da)
        }
        LossSpec::Pinball { p } => (pinball_weight(z, y, *p) * dl_dz, T::zero()),
    }
}

fn hinge_coefficient<T: Scalar>(gamma: T) -> T {
    (gamma * gamma - T::one()) / gamma
}

fn residual_on_side<T: Scalar>(z: T, y: T, d: Direction) -> bool {
    let side = Direction::of(z - y);
    side != Direction::None && side == d
}

fn pinball_weight<T: Scalar>(z: T, y: T, p: T) -> T {
    if z > y {
        p
    } else if z < y {
        T::one() - p
    } else {
        T::zero()
    }
}

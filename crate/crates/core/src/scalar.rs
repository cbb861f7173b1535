//! Floating point abstraction used by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type of tensors. Implemented for `f32` and `f64`; all random
/// draws happen in `f64` and convert down so both precisions consume
/// identical RNG streams.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Relative-error bound this precision is expected to meet against
    /// central finite differences.
    const GRADCHECK_TOL: f64;
    /// Step used by the finite-difference probe. Wider at single precision
    /// to keep the quotient above cancellation noise.
    const GRADCHECK_STEP: f64;
    /// Denominator floor for relative error. Must sit above the probe's
    /// own roundoff, roughly `18 eps |L| / (12 step)` for unit-scale
    /// losses, or a near-zero directional derivative amplifies forward
    /// evaluation noise into a spurious failure.
    const GRADCHECK_REL_FLOOR: f64;
    /// Runtime tag of this type, recorded in checkpoints and reports.
    const PRECISION: Precision;

    /// Conversion from f64, exact for every value these impls can
    /// represent. Named to avoid clashing with `FromPrimitive::from_f64`.
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn into_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const GRADCHECK_TOL: f64 = 1e-3;
    const GRADCHECK_STEP: f64 = 2e-2;
    // eps 6e-8 and step 2e-2 put stencil roundoff near 2e-6 absolute;
    // against this floor that reads as 2e-4, a fifth of the tolerance.
    const GRADCHECK_REL_FLOOR: f64 = 1e-2;
    const PRECISION: Precision = Precision::Single;
}

impl Scalar for f64 {
    const GRADCHECK_TOL: f64 = 1e-5;
    const GRADCHECK_STEP: f64 = 1e-5;
    const GRADCHECK_REL_FLOOR: f64 = 1e-3;
    const PRECISION: Precision = Precision::Double;
}

/// Which `Scalar` a run executes with. Parsed from CLI / config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Single
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?}, expected single or double")),
        }
    }
}

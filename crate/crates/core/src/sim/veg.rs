use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Thickness-class fractions of the nominal length, shared by both roles.
pub const THICKNESS_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.20, 0.50, 1.0];

/// Class names for cut slices (K = 5).
pub const SLICE_CLASS_NAMES: [&str; 5] = ["very thin", "thin", "thick", "very thick", "full"];

/// Class names for the remaining piece (K = 4); the very-thin class is
/// dropped because a minimum thickness is needed to hold the piece.
pub const REMAINING_CLASS_NAMES: [&str; 4] = ["thin", "thick", "very thick", "full"];

pub const SLICE_CLASSES: usize = 5;
pub const REMAINING_CLASSES: usize = 4;

/// Minimum holdable remaining length, as a fraction of nominal length.
pub const MIN_HOLD_FRACTION: f64 = 0.05;

/// Smallest slice the blade produces.
pub const MIN_SLICE_CM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VegKind {
    Cucumber,
    Tomato,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeTag {
    Bar,
    Ellipse,
}

/// Static per-type profile: nominal length, sampling ranges, silhouette.
#[derive(Clone, Debug)]
pub struct VegProfile {
    pub kind: VegKind,
    pub name: &'static str,
    /// Nominal length l in cm; thickness classes are fractions of this.
    pub nominal_length: f64,
    /// Sampled initial lengths fall in this range (cm).
    pub length_range: (f64, f64),
    /// Commanded slice thicknesses are sampled from this range (cm).
    pub action_range: (f64, f64),
    pub shape: ShapeTag,
}

const CUCUMBER: VegProfile = VegProfile {
    kind: VegKind::Cucumber,
    name: "cucumber",
    nominal_length: 20.0,
    length_range: (12.0, 25.0),
    action_range: (0.4, 8.0),
    shape: ShapeTag::Bar,
};

const TOMATO: VegProfile = VegProfile {
    kind: VegKind::Tomato,
    name: "tomato",
    nominal_length: 5.0,
    length_range: (4.0, 7.0),
    action_range: (0.4, 3.0),
    shape: ShapeTag::Ellipse,
};

impl VegKind {
    pub fn profile(self) -> &'static VegProfile {
        match self {
            VegKind::Cucumber => &CUCUMBER,
            VegKind::Tomato => &TOMATO,
        }
    }

    pub fn name(self) -> &'static str {
        self.profile().name
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cucumber" => Ok(VegKind::Cucumber),
            "tomato" => Ok(VegKind::Tomato),
            other => Err(Error::Config(format!("unknown vegetable type '{other}'"))),
        }
    }

    pub fn min_hold(self) -> f64 {
        MIN_HOLD_FRACTION * self.profile().nominal_length
    }
}

/// Ground-truth simulator state for one vegetable being cut.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VegetableState {
    pub kind: VegKind,
    pub initial_length: f64,
    pub remaining_length: f64,
    pub cut_count: u32,
    pub rng_seed: u64,
}

/// Commanded slice thickness in cm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutAction {
    pub d: f64,
}

/// Result of attempting one cut.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutOutcome {
    pub created: bool,
    /// Realized slice thickness; present iff `created`.
    pub slice_thickness: Option<f64>,
    pub remaining_after: f64,
    pub stop: bool,
}

/// Which kind of object an observation depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsRole {
    WholeVegetable,
    Slice,
}

impl ObsRole {
    pub fn classes(self) -> usize {
        match self {
            ObsRole::Slice => SLICE_CLASSES,
            ObsRole::WholeVegetable => REMAINING_CLASSES,
        }
    }
}

/// Sample a fresh vegetable; deterministic per (type, seed).
pub fn new_vegetable(kind: VegKind, seed: u64) -> VegetableState {
    let profile = kind.profile();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4c454e));
    let length = rng.gen_range(profile.length_range.0..=profile.length_range.1);
    VegetableState {
        kind,
        initial_length: length,
        remaining_length: length,
        cut_count: 0,
        rng_seed: seed,
    }
}

/// Execute one parameterized cut.
///
/// The commanded thickness picks up Gaussian execution noise and a blade
/// floor of [`MIN_SLICE_CM`]. If the noisy cut would leave less than the
/// holdable minimum, nothing is cut and the outcome is a STOP. Material is
/// conserved exactly: `remaining_after = remaining - slice_thickness`.
pub fn apply_cut(
    state: &VegetableState,
    action: CutAction,
    noise_sigma: f64,
) -> Result<(VegetableState, CutOutcome)> {
    if !(action.d > 0.0) {
        return Err(Error::InvalidValue { context: "cut thickness", value: action.d });
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidValue { context: "noise sigma", value: noise_sigma });
    }
    let eps = if noise_sigma > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(state.rng_seed, 0xc07 ^ u64::from(state.cut_count)));
        Normal::new(0.0, noise_sigma).expect("finite sigma").sample(&mut rng)
    } else {
        0.0
    };
    let d_try = (action.d + eps).max(MIN_SLICE_CM);
    let min_hold = state.kind.min_hold();
    if d_try > state.remaining_length - min_hold {
        let outcome = CutOutcome {
            created: false,
            slice_thickness: None,
            remaining_after: state.remaining_length,
            stop: true,
        };
        return Ok((*state, outcome));
    }
    let remaining_after = state.remaining_length - d_try;
    let next = VegetableState {
        remaining_length: remaining_after,
        cut_count: state.cut_count + 1,
        ..*state
    };
    let outcome = CutOutcome {
        created: true,
        slice_thickness: Some(d_try),
        remaining_after,
        stop: false,
    };
    Ok((next, outcome))
}

/// Map a thickness to its class index for the given role.
///
/// Slice bins: (0, .05l], (.05l, .10l], (.10l, .20l], (.20l, .50l], (.50l, l].
/// Remaining bins drop the first; anything above l clamps to the top class.
pub fn classify_thickness(thickness: f64, nominal_length: f64, role: ObsRole) -> Result<usize> {
    if !(thickness > 0.0) {
        return Err(Error::InvalidValue { context: "thickness", value: thickness });
    }
    let fractions: &[f64] = match role {
        ObsRole::Slice => &THICKNESS_FRACTIONS,
        ObsRole::WholeVegetable => &THICKNESS_FRACTIONS[1..],
    };
    for (idx, f) in fractions.iter().enumerate() {
        if thickness <= f * nominal_length {
            return Ok(idx);
        }
    }
    Ok(fractions.len() - 1)
}

//! Fixed camera schedule for the six target views and the autoregressive
//! step partition.
//!
//! View ids are 1-based and combined: view 1 is the input image, views
//! 2..=7 are the targets in *sequence* (generation) order. Step `k` conditions
//! on views `1..=2k-1` and predicts views `2k` and `2k+1`, which always form
//! one row of the 3x2 grid.
//!
//! Elevations are absolute and signed: +20 places the camera above the
//! equatorial plane looking down, -10 below it looking up.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};

pub const NUM_TARGETS: usize = 6;
pub const NUM_STEPS: usize = 3;
pub const FIRST_AZIMUTH_DEG: f64 = 30.0;
pub const AZIMUTH_INCREMENT_DEG: f64 = 60.0;
pub const UPPER_ELEVATION_DEG: f64 = 20.0;
pub const LOWER_ELEVATION_DEG: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self {
            azimuth_deg,
            elevation_deg,
        }
    }

    /// Same elevation, azimuth shifted by `base_deg` and wrapped into [0, 360).
    pub fn relative_to(&self, base_deg: f64) -> Self {
        Self::new(wrap_degrees(self.azimuth_deg + base_deg), self.elevation_deg)
    }
}

pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// The six target poses in grid order (row-major, nearest row first),
/// azimuths relative to the input view.
pub fn target_poses() -> [CameraPose; NUM_TARGETS] {
    std::array::from_fn(|i| {
        let elevation = if i % 2 == 0 {
            UPPER_ELEVATION_DEG
        } else {
            LOWER_ELEVATION_DEG
        };
        CameraPose::new(
            FIRST_AZIMUTH_DEG + AZIMUTH_INCREMENT_DEG * i as f64,
            elevation,
        )
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub k: usize,
    pub condition_view_ids: Vec<usize>,
    pub target_view_ids: [usize; 2],
}

impl StepPlan {
    pub fn num_conditions(&self) -> usize {
        self.condition_view_ids.len()
    }
}

pub fn step_plan(k: usize) -> Result<StepPlan> {
    if !(1..=NUM_STEPS).contains(&k) {
        bail_arg!("step index k must be in 1..={NUM_STEPS}, got {k}");
    }
    Ok(StepPlan {
        k,
        condition_view_ids: (1..2 * k).collect(),
        target_view_ids: [2 * k, 2 * k + 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceOrder {
    #[default]
    Normal,
    Reverse,
    Random,
}

impl SequenceOrder {
    pub const ALL: [SequenceOrder; 3] = [
        SequenceOrder::Normal,
        SequenceOrder::Reverse,
        SequenceOrder::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SequenceOrder::Normal => "normal",
            SequenceOrder::Reverse => "reverse",
            SequenceOrder::Random => "random",
        }
    }

    /// Canonical target index (0-based, grid order) generated at each
    /// sequence position (0-based).
    pub fn sequence_to_canonical(&self) -> [usize; NUM_TARGETS] {
        let rows = reorder(*self);
        std::array::from_fn(|pos| {
            let row = rows[pos / 2];
            2 * (row - 1) + pos % 2
        })
    }
}

impl std::str::FromStr for SequenceOrder {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Self::Normal),
            "reverse" => Ok(Self::Reverse),
            "random" => Ok(Self::Random),
            other => bail_arg!("unknown sequence order `{other}`"),
        }
    }
}

impl std::fmt::Display for SequenceOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grid rows (1-based) in the order they are generated.
///
/// `Random` puts the middle row first and keeps the other two in their
/// original relative order.
pub fn reorder(order: SequenceOrder) -> [usize; NUM_STEPS] {
    match order {
        SequenceOrder::Normal => [1, 2, 3],
        SequenceOrder::Reverse => [3, 2, 1],
        SequenceOrder::Random => [2, 1, 3],
    }
}

/// Elevation of a combined view id. The input view's elevation is sampled
/// per object and must be supplied by the caller.
pub fn elevation_of(view_id: usize, input_elevation_deg: f64) -> Result<f64> {
    match view_id {
        1 => Ok(input_elevation_deg),
        2..=7 => Ok(if view_id % 2 == 0 {
            UPPER_ELEVATION_DEG
        } else {
            LOWER_ELEVATION_DEG
        }),
        _ => bail_arg!("unknown view id {view_id}; expected 1..=7"),
    }
}

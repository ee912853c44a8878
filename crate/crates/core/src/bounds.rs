use serde::{Deserialize, Serialize};

/// A certified enclosure `[lower, upper]` of a real quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Self {
        debug_assert!(lower <= upper, "inverted bounds [{lower}, {upper}]");
        Bounds { lower, upper }
    }

    pub fn exact(value: f64) -> Self {
        Bounds {
            lower: value,
            upper: value,
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    /// Contains `value` after widening both ends by `tol`.
    pub fn contains_within(&self, value: f64, tol: f64) -> bool {
        self.lower - tol <= value && value <= self.upper + tol
    }

    pub fn clamp_unit(self) -> Self {
        Bounds {
            lower: self.lower.clamp(0.0, 1.0),
            upper: self.upper.clamp(0.0, 1.0),
        }
    }

    /// Distance from `value` to the enclosure (zero when inside).
    pub fn distance_to(&self, value: f64) -> f64 {
        if value < self.lower {
            self.lower - value
        } else if value > self.upper {
            value - self.upper
        } else {
            0.0
        }
    }
}

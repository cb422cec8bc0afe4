//! Simulation time as an integer count of attoseconds.
//!
//! Integer time keeps event ordering exact and lets the ranging timestamps
//! of ideal clocks reproduce geometric ranges to well below a nanometre.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

pub const ATTOS_PER_SECOND: i128 = 1_000_000_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub i128);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(s: f64) -> Self {
        SimTime((s * ATTOS_PER_SECOND as f64).round() as i128)
    }

    pub fn as_secs(self) -> f64 {
        let whole = self.0 / ATTOS_PER_SECOND;
        let frac = self.0 % ATTOS_PER_SECOND;
        whole as f64 + frac as f64 / ATTOS_PER_SECOND as f64
    }

    pub fn attos(self) -> i128 {
        self.0
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        assert_eq!(SimTime::from_secs(1.5).attos(), 1_500_000_000_000_000_000);
        assert_eq!(SimTime::from_secs(0.1).as_secs(), 0.1);
        assert_eq!(SimTime::from_secs(2.0) - SimTime::from_secs(0.5), SimTime::from_secs(1.5));
        assert_eq!(SimTime(-1).as_secs(), -1e-18);
    }
}

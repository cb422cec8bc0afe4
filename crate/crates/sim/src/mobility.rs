//! Waypoint trajectories.

use nalgebra::Vector3;

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    /// Seconds.
    pub arrival: f64,
    /// Seconds spent at the waypoint after arriving.
    pub dwell: f64,
}

/// Piecewise-linear path through dwelled waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// Arrival times must be strictly increasing and each arrival must come
    /// after the previous dwell ends.
    pub fn new(waypoints: Vec<Waypoint>) -> SimResult<Self> {
        if waypoints.is_empty() {
            return Err(SimError::InvalidArgument("trajectory needs a waypoint".into()));
        }
        for w in &waypoints {
            if !(w.dwell >= 0.0) || !w.arrival.is_finite() || w.position.iter().any(|c| !c.is_finite()) {
                return Err(SimError::InvalidArgument("waypoint must be finite with nonnegative dwell".into()));
            }
        }
        for pair in waypoints.windows(2) {
            if !(pair[1].arrival > pair[0].arrival + pair[0].dwell) {
                return Err(SimError::InvalidArgument("waypoint times must be strictly increasing".into()));
            }
        }
        Ok(Self { waypoints })
    }

    pub fn stationary(position: Vector3<f64>) -> Self {
        Self { waypoints: vec![Waypoint { position, arrival: 0.0, dwell: 0.0 }] }
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Index of the waypoint being dwelled at, if any. The time before the
    /// first arrival counts as dwelling at the first waypoint.
    pub fn dwelling_at(&self, t: f64) -> Option<usize> {
        let first = &self.waypoints[0];
        if t <= first.arrival + first.dwell {
            return Some(0);
        }
        self.waypoints.iter().position(|w| t >= w.arrival && t <= w.arrival + w.dwell)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        for pair in self.waypoints.windows(2) {
            let leave = pair[0].arrival + pair[0].dwell;
            if t > leave && t < pair[1].arrival {
                return (pair[1].position - pair[0].position) / (pair[1].arrival - leave);
            }
        }
        Vector3::zeros()
    }
}

/// True position at `t` seconds: the waypoint while dwelling, linear
/// interpolation in transit, and the end points held outside the schedule.
pub fn mobility_position(traj: &Trajectory, t: f64) -> Vector3<f64> {
    let w = &traj.waypoints;
    if t <= w[0].arrival {
        return w[0].position;
    }
    for (i, cur) in w.iter().enumerate() {
        let leave = cur.arrival + cur.dwell;
        if t <= leave {
            return cur.position;
        }
        match w.get(i + 1) {
            Some(next) if t < next.arrival => {
                let f = (t - leave) / (next.arrival - leave);
                return cur.position + (next.position - cur.position) * f;
            }
            Some(_) => continue,
            None => return cur.position,
        }
    }
    unreachable!("trajectory has at least one waypoint")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> Trajectory {
        Trajectory::new(vec![
            Waypoint { position: Vector3::new(0.0, 0.0, 0.0), arrival: 0.0, dwell: 2.0 },
            Waypoint { position: Vector3::new(4.0, 2.0, 0.0), arrival: 4.0, dwell: 1.0 },
        ])
        .unwrap()
    }

    #[test]
    fn examples() {
        let t = path();
        assert_eq!(mobility_position(&t, 1.0), Vector3::zeros());
        assert_eq!(mobility_position(&t, 3.0), Vector3::new(2.0, 1.0, 0.0));
        assert_eq!(mobility_position(&t, 4.5), Vector3::new(4.0, 2.0, 0.0));
        assert_eq!(mobility_position(&t, 100.0), Vector3::new(4.0, 2.0, 0.0));
        assert_eq!(mobility_position(&t, -1.0), Vector3::zeros());
        assert_eq!(t.velocity(3.0), Vector3::new(2.0, 1.0, 0.0));
        assert_eq!(t.dwelling_at(4.5), Some(1));
        assert_eq!(t.dwelling_at(3.0), None);
    }

    #[test]
    fn rejects_overlapping_schedule() {
        let bad = Trajectory::new(vec![
            Waypoint { position: Vector3::zeros(), arrival: 0.0, dwell: 5.0 },
            Waypoint { position: Vector3::zeros(), arrival: 4.0, dwell: 0.0 },
        ]);
        assert!(bad.is_err());
    }
}

//! Uniform time and space grids.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite() && t0 < t_end) {
            return Err(Error::Grid(format!("need t0 < T, got [{t0}, {t_end}]")));
        }
        if n_steps == 0 {
            return Err(Error::Grid("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, slice: usize) -> f64 {
        if slice == self.n_steps {
            self.t_end
        } else {
            self.t0 + slice as f64 * self.dt()
        }
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    /// Grid covering slices `from..=to` of `self`, with the same step.
    pub fn sub_grid(&self, from: usize, to: usize) -> Result<TimeGrid> {
        if from >= to || to > self.n_steps {
            return Err(Error::Grid(format!("bad slice range {from}..{to}")));
        }
        TimeGrid::new(self.time(from), self.time(to), to - from)
    }
}

/// Where a point falls on a [`SpaceGrid`]: value = (1-theta)*W[lo] + theta*W[hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub lo: usize,
    pub hi: usize,
    pub theta: f64,
    /// The point lay outside `[x_min, x_max]` and was clamped to the boundary.
    pub clamped: bool,
}

impl Location {
    pub fn interpolate(&self, field: &[f64]) -> f64 {
        if self.theta == 0.0 {
            field[self.lo]
        } else {
            (1.0 - self.theta) * field[self.lo] + self.theta * field[self.hi]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_nodes: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_nodes: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::Grid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if n_nodes < 3 {
            return Err(Error::Grid(format!("need at least 3 nodes, got {n_nodes}")));
        }
        Ok(Self { x_min, x_max, n_nodes })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_nodes - 1) as f64
    }

    pub fn x(&self, node: usize) -> f64 {
        if node + 1 == self.n_nodes {
            self.x_max
        } else {
            self.x_min + node as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes).map(|j| self.x(j)).collect()
    }

    /// Brackets `x`; points within 1e-9 cells of a node snap to it.
    pub fn locate(&self, x: f64) -> Location {
        let last = self.n_nodes - 1;
        let s = (x - self.x_min) / self.dx();
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 && nearest >= 0.0 && nearest <= last as f64 {
            let j = nearest as usize;
            return Location { lo: j, hi: j, theta: 0.0, clamped: false };
        }
        if s < 0.0 {
            return Location { lo: 0, hi: 0, theta: 0.0, clamped: true };
        }
        if s > last as f64 {
            return Location { lo: last, hi: last, theta: 0.0, clamped: true };
        }
        let lo = (s.floor() as usize).min(last - 1);
        Location {
            lo,
            hi: lo + 1,
            theta: s - lo as f64,
            clamped: false,
        }
    }

    /// Nodes whose distance to either edge exceeds `fraction` of the width.
    pub fn interior(&self, fraction: f64) -> std::ops::Range<usize> {
        let skip = ((self.n_nodes - 1) as f64 * fraction).ceil() as usize;
        skip..self.n_nodes.saturating_sub(skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(SpaceGrid::new(0.0, 1.0, 2).is_err());
        assert!(SpaceGrid::new(1.0, 0.0, 5).is_err());
    }

    #[test]
    fn locate_brackets_and_clamps() {
        let g = SpaceGrid::new(-1.0, 1.0, 21).unwrap();
        let loc = g.locate(0.05);
        assert_eq!((loc.lo, loc.hi), (10, 11));
        assert!((loc.theta - 0.5).abs() < 1e-12);
        let on = g.locate(-1.0 + 3.0 * 0.1);
        assert_eq!((on.lo, on.theta), (3, 0.0));
        assert!(g.locate(1.5).clamped);
        assert_eq!(g.locate(-7.0).lo, 0);
        assert_eq!(g.interior(0.1), 2..19);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time unit tag. Grids never convert between units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Seconds,
    Minutes,
}

impl TimeUnit {
    pub fn suffix(self) -> &'static str {
        match self {
            TimeUnit::Seconds => "s",
            TimeUnit::Minutes => "min",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Self> {
        match s {
            "s" => Some(TimeUnit::Seconds),
            "min" => Some(TimeUnit::Minutes),
            _ => None,
        }
    }
}

/// Strictly increasing list of at least two time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    points: Vec<f64>,
    unit: TimeUnit,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    unit: TimeUnit,
    points: Vec<f64>,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.points, raw.unit)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(g: TimeGrid) -> Self {
        RawGrid {
            unit: g.unit,
            points: g.points,
        }
    }
}

/// Relative tolerance used when merging knots coming from different grids.
const KNOT_TOL: f64 = 1e-10;

impl TimeGrid {
    pub fn new(points: Vec<f64>, unit: TimeUnit) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("time grid", "needs at least 2 points"));
        }
        if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid("time grid", format!("non-finite point {bad}")));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "time grid",
                format!("not strictly increasing at {} -> {}", w[0], w[1]),
            ));
        }
        Ok(Self { points, unit })
    }

    /// `n_intervals` equal intervals on `[start, end]`.
    pub fn uniform(start: f64, end: f64, n_intervals: usize, unit: TimeUnit) -> Result<Self> {
        if n_intervals == 0 {
            return Err(Error::invalid("time grid", "zero intervals"));
        }
        let span = end - start;
        let points = (0..=n_intervals)
            .map(|i| {
                if i == n_intervals {
                    end
                } else {
                    start + span * i as f64 / n_intervals as f64
                }
            })
            .collect();
        Self::new(points, unit)
    }

    /// Grid with the given spacing; the span must be an integer multiple of `step`.
    pub fn with_step(start: f64, end: f64, step: f64, unit: TimeUnit) -> Result<Self> {
        let ratio = (end - start) / step;
        let n = ratio.round();
        if step <= 0.0 || n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::invalid(
                "time grid",
                format!("span {start}..{end} is not a multiple of step {step}"),
            ));
        }
        Self::uniform(start, end, n as usize, unit)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn unit(&self) -> TimeUnit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_intervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.last() - self.first()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.first() && t <= self.last()
    }

    fn tol(&self) -> f64 {
        KNOT_TOL * self.first().abs().max(self.last().abs()).max(1.0)
    }

    /// Interval index `k` with `t` in `[points[k], points[k+1])`; the terminal
    /// point belongs to the last interval.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        if !self.contains(t) {
            return Err(Error::OutOfRange {
                t,
                start: self.first(),
                end: self.last(),
            });
        }
        let k = self.points.partition_point(|&p| p <= t);
        Ok(k.saturating_sub(1).min(self.n_intervals() - 1))
    }

    /// Index of a grid point equal to `t` within knot tolerance.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = self.tol();
        let k = self.points.partition_point(|&p| p < t - tol);
        (k < self.points.len() && (self.points[k] - t).abs() <= tol).then_some(k)
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Sorted union of several grids, restricted to `[start, end]`.
    /// Points closer than the knot tolerance are merged, keeping the first seen.
    pub fn union(grids: &[&TimeGrid], start: f64, end: f64) -> Result<TimeGrid> {
        let unit = grids.first().map(|g| g.unit).unwrap_or_default();
        let mut all: Vec<f64> = vec![start, end];
        for g in grids {
            if g.unit != unit {
                return Err(Error::invalid("time grid union", "mixed time units"));
            }
            all.extend(g.points.iter().copied().filter(|&p| p >= start && p <= end));
        }
        Self::from_unsorted(all, start, end, unit)
    }

    /// Builds a grid from arbitrary points clipped to `[start, end]`.
    pub fn from_unsorted(mut all: Vec<f64>, start: f64, end: f64, unit: TimeUnit) -> Result<Self> {
        all.retain(|&p| p >= start && p <= end);
        all.push(start);
        all.push(end);
        all.sort_by(f64::total_cmp);
        let tol = KNOT_TOL * start.abs().max(end.abs()).max(1.0);
        let mut merged: Vec<f64> = Vec::with_capacity(all.len());
        for p in all {
            match merged.last() {
                Some(&q) if p - q <= tol => {}
                _ => merged.push(p),
            }
        }
        // keep the exact end point
        if let Some(last) = merged.last_mut() {
            *last = end;
        }
        Self::new(merged, unit)
    }

    /// Uniformly subdivides every interval so that none exceeds `max_step`.
    pub fn refine(&self, max_step: f64) -> Result<TimeGrid> {
        if !(max_step > 0.0) || !max_step.is_finite() {
            return Err(Error::invalid("max_step", format!("{max_step} must be > 0")));
        }
        let mut out = Vec::with_capacity(self.points.len());
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ratio = (b - a) / max_step;
            // slack keeps already-fine intervals from splitting on rounding noise
            let n = ((ratio * (1.0 - 1e-12)).ceil() as usize).max(1);
            out.push(a);
            for i in 1..n {
                out.push(a + (b - a) * i as f64 / n as f64);
            }
        }
        out.push(self.last());
        TimeGrid::new(out, self.unit)
    }
}

/// Free-function form of [`TimeGrid::refine`].
pub fn grid_refine(grid: &TimeGrid, max_step: f64) -> Result<TimeGrid> {
    grid.refine(max_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(p: &[f64]) -> TimeGrid {
        TimeGrid::new(p.to_vec(), TimeUnit::Seconds).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![0.0], TimeUnit::Seconds).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.0], TimeUnit::Seconds).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.5], TimeUnit::Seconds).is_err());
        assert!(TimeGrid::new(vec![0.0, f64::NAN], TimeUnit::Seconds).is_err());
    }

    #[test]
    fn refine_examples() {
        assert_eq!(g(&[0.0, 10.0]).refine(5.0).unwrap().points(), &[0.0, 5.0, 10.0]);
        let r = g(&[0.0, 10.0]).refine(4.0).unwrap();
        assert_eq!(r.len(), 4);
        for (a, b) in r.points().iter().zip([0.0, 10.0 / 3.0, 20.0 / 3.0, 10.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g(&[0.0, 1.0, 2.0]).refine(10.0).unwrap().points(), &[0.0, 1.0, 2.0]);
        assert!(g(&[0.0, 1.0]).refine(0.0).is_err());
    }

    #[test]
    fn union_merges_close_knots() {
        let a = g(&[0.0, 1.0, 2.0]);
        let b = g(&[0.5, 1.0 + 1e-14, 3.0]);
        let u = TimeGrid::union(&[&a, &b], 0.0, 2.0).unwrap();
        assert_eq!(u.points(), &[0.0, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn interval_lookup() {
        let grid = g(&[0.0, 1.0, 2.0]);
        assert_eq!(grid.interval_of(0.0).unwrap(), 0);
        assert_eq!(grid.interval_of(1.0).unwrap(), 1);
        assert_eq!(grid.interval_of(2.0).unwrap(), 1);
        assert!(matches!(grid.interval_of(2.5), Err(Error::OutOfRange { .. })));
        assert_eq!(grid.index_of(1.0 + 1e-13), Some(1));
        assert_eq!(grid.index_of(1.5), None);
    }

    proptest! {
        #[test]
        fn refine_superset_bounded_and_fixpoint(
            gaps in prop::collection::vec(0.01f64..20.0, 1..8),
            max_step in 0.05f64..5.0,
        ) {
            let mut pts = vec![0.0];
            for d in &gaps { let next = pts.last().unwrap() + d; pts.push(next); }
            let grid = g(&pts);
            let fine = grid.refine(max_step).unwrap();
            for p in grid.points() {
                prop_assert!(fine.index_of(*p).is_some());
            }
            for w in fine.points().windows(2) {
                prop_assert!(w[1] - w[0] <= max_step * (1.0 + 1e-9));
            }
            let twice = fine.refine(max_step).unwrap();
            prop_assert_eq!(twice.points(), fine.points());
        }
    }
}

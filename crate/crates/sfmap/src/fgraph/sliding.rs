//! Sliding-window estimation with a global factor archive.
//!
//! The window keeps the most recent navigation states and optimizes them
//! against the active factors plus a marginal prior summarizing everything
//! that slid out. Factors flagged for the archive are kept (inactive) after
//! marginalization, so the whole session can later be re-solved in batch for
//! a smoothed trajectory.

use super::factors::{Factor, MarginalPrior};
use super::solver::{marginalize, optimize, OptimizeReport, SolverOptions};
use super::values::{GraphError, Key, NavState, Values, Variable};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct SlidingWindowConfig {
    /// Maximum number of states kept in the window.
    pub window: usize,
    pub solver: SolverOptions,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            window: 10,
            solver: SolverOptions::default(),
        }
    }
}

/// Handle to a factor in the window's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorId(usize);

struct Slot {
    factor: Box<dyn Factor>,
    /// Participates in window optimization.
    active: bool,
    /// Participates in batch smoothing.
    archived: bool,
}

pub struct SlidingWindow {
    pub config: SlidingWindowConfig,
    /// Active window states.
    pub values: Values,
    slots: Vec<Slot>,
    prior: Option<MarginalPrior>,
    /// Last window estimate of every state that slid out, by frame index.
    past: BTreeMap<u64, NavState>,
}

impl SlidingWindow {
    pub fn new(config: SlidingWindowConfig) -> Self {
        assert!(config.window >= 2, "window must hold at least two states");
        SlidingWindow {
            config,
            values: Values::new(),
            slots: Vec::new(),
            prior: None,
            past: BTreeMap::new(),
        }
    }

    pub fn add_state(&mut self, index: u64, state: NavState) {
        self.values.insert(Key::nav(index), Variable::Nav(state));
    }

    pub fn state(&self, index: u64) -> Option<&NavState> {
        self.values.get(Key::nav(index)).map(|v| v.as_nav())
    }

    pub fn window_len(&self) -> usize {
        self.values.len()
    }

    /// Frame indices currently in the window, oldest first.
    pub fn window_indices(&self) -> Vec<u64> {
        self.values.keys().map(|k| k.index()).collect()
    }

    /// Add a factor. Archived factors are retained for batch smoothing after
    /// they leave the window; transient ones (replaceable visual constraints
    /// that get rebuilt every step) are dropped.
    pub fn add_factor(&mut self, factor: Box<dyn Factor>, archive: bool) -> FactorId {
        self.slots.push(Slot {
            factor,
            active: true,
            archived: archive,
        });
        FactorId(self.slots.len() - 1)
    }

    /// Deactivate a factor and drop it from the archive.
    pub fn retire_factor(&mut self, id: FactorId) {
        let slot = &mut self.slots[id.0];
        slot.active = false;
        slot.archived = false;
    }

    /// Promote a transient factor to archived (e.g. the final visual
    /// constraint of a frame once its depths have converged).
    pub fn archive_factor(&mut self, id: FactorId) {
        self.slots[id.0].archived = true;
    }

    /// Optimize the current window in place.
    pub fn optimize(&mut self) -> Result<OptimizeReport, GraphError> {
        // borrow fields separately: the factor list reads slots/prior while
        // the solver mutates values
        let mut factors: Vec<&dyn Factor> = self
            .slots
            .iter()
            .filter(|s| s.active)
            .map(|s| s.factor.as_ref())
            .collect();
        if let Some(p) = &self.prior {
            factors.push(p);
        }
        optimize(&factors, &mut self.values, &self.config.solver)
    }

    /// Marginalize the oldest state out of the window. Active factors
    /// touching it (and the current prior) are consumed into a new prior;
    /// archived ones stay available for batch smoothing.
    pub fn marginalize_oldest(&mut self) -> Result<(), GraphError> {
        let Some(oldest) = self.values.keys().next() else {
            return Ok(());
        };
        let touching: Vec<usize> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.active && s.factor.keys().contains(&oldest))
            .map(|(i, _)| i)
            .collect();
        let mut consumed: Vec<&dyn Factor> = touching
            .iter()
            .map(|&i| self.slots[i].factor.as_ref())
            .collect();
        let prior_touches = self
            .prior
            .as_ref()
            .is_some_and(|p| p.keys().contains(&oldest));
        if prior_touches {
            consumed.push(self.prior.as_ref().unwrap());
        }
        let new_prior = marginalize(&consumed, &self.values, &[oldest])?;
        drop(consumed);
        for i in touching {
            self.slots[i].active = false;
        }
        if prior_touches || self.prior.is_none() {
            self.prior = Some(new_prior);
        } else {
            // the old prior does not touch the dropped state: merge by
            // marginalizing both together (drop set empty for the old one)
            let old = self.prior.take().unwrap();
            let both: Vec<&dyn Factor> = vec![&old, &new_prior];
            let merged = marginalize(&both, &self.values, &[])?;
            self.prior = Some(merged);
        }
        if let Some(Variable::Nav(n)) = self.values.remove(oldest) {
            self.past.insert(oldest.index(), n);
        }
        Ok(())
    }

    /// Shrink the window to the configured size.
    pub fn enforce_window(&mut self) -> Result<(), GraphError> {
        while self.values.len() > self.config.window {
            self.marginalize_oldest()?;
        }
        Ok(())
    }

    /// Best available estimate for a frame: current window state or the last
    /// estimate before it slid out.
    pub fn estimate(&self, index: u64) -> Option<NavState> {
        if let Some(v) = self.values.get(Key::nav(index)) {
            return Some(*v.as_nav());
        }
        self.past.get(&index).copied()
    }

    /// All archived factors plus the still-active archived ones, for batch
    /// smoothing. Excludes marginal priors.
    fn archive_factors(&self) -> Vec<&dyn Factor> {
        self.slots
            .iter()
            .filter(|s| s.archived)
            .map(|s| s.factor.as_ref())
            .collect()
    }

    /// Batch-solve the whole session from the archived factors, seeded with
    /// the per-frame estimates. Returns the smoothed trajectory.
    pub fn global_smooth(&self) -> Result<BTreeMap<u64, NavState>, GraphError> {
        let factors = self.archive_factors();
        let mut values = Values::new();
        for (&i, n) in &self.past {
            values.insert(Key::nav(i), Variable::Nav(*n));
        }
        for (k, v) in self.values.iter() {
            if k.is_nav() {
                values.insert(k, v.clone());
            }
        }
        optimize(&factors, &mut values, &self.config.solver)?;
        let mut out = BTreeMap::new();
        for (k, v) in values.iter() {
            if k.is_nav() {
                out.insert(k.index(), *v.as_nav());
            }
        }
        Ok(out)
    }
}

/// Write a trajectory as CSV, one row per state, 17 significant digits.
pub fn write_trajectory_csv<W: Write>(
    states: &BTreeMap<u64, NavState>,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "t,qw,qx,qy,qz,tx,ty,tz,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz"
    )?;
    for n in states.values() {
        let p = n.pose.to_array();
        let mut row = format!("{:.16e}", n.timestamp);
        for v in p
            .iter()
            .chain(n.velocity.iter())
            .chain(n.bias_acc.iter())
            .chain(n.bias_gyr.iter())
        {
            row.push_str(&format!(",{:.16e}", v));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::factors::{GnssFactor, ImuFactor, NavPriorFactor};
    use super::super::noise::NoiseModel;
    use super::super::preintegration::{preintegrate, ImuNoise, ImuSample, PreintegratedImu};
    use super::*;
    use crate::geom::Pose;
    use nalgebra::{UnitQuaternion, Vector3};

    /// Constant-velocity straight run with gravity-supporting IMU samples.
    fn straight_run(n: usize) -> (Vec<NavState>, PreintegratedImu) {
        let dt_kf = 0.5;
        let mut states = Vec::new();
        for i in 0..n {
            let t = i as f64 * dt_kf;
            states.push(NavState::new(
                Pose::new(
                    UnitQuaternion::identity(),
                    Vector3::new(2.0 * t, 0.0, 0.0),
                ),
                Vector3::new(2.0, 0.0, 0.0),
                t,
            ));
        }
        let samples: Vec<ImuSample> = (0..100)
            .map(|_| ImuSample {
                accel: Vector3::new(0.0, 0.0, 9.81),
                gyro: Vector3::zeros(),
                dt: 0.005,
            })
            .collect();
        let pre =
            preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
                .unwrap();
        (states, pre)
    }

    fn feed(window: &mut SlidingWindow, states: &[NavState], pre: &PreintegratedImu) {
        for (i, s) in states.iter().enumerate() {
            let i = i as u64;
            // deliberately biased initial guess away from ground truth
            let mut guess = *s;
            guess.retract(&[0.05, -0.03, 0.02, 0.0, 0.0, 0.01, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            window.add_state(i, guess);
            if i == 0 {
                window.add_factor(
                    Box::new(NavPriorFactor::new(
                        Key::nav(0),
                        states[0],
                        NoiseModel::from_sigmas(&[1e-3; 15]),
                    )),
                    true,
                );
            } else {
                window.add_factor(
                    Box::new(
                        ImuFactor::new(Key::nav(i - 1), Key::nav(i), pre.clone()).unwrap(),
                    ),
                    true,
                );
            }
            window.add_factor(
                Box::new(GnssFactor::new(
                    Key::nav(i),
                    *s.pose.translation(),
                    Vector3::zeros(),
                    NoiseModel::isotropic(3, 0.05),
                )),
                true,
            );
            window.optimize().unwrap();
            window.enforce_window().unwrap();
        }
    }

    #[test]
    fn window_tracks_noise_free_trajectory() {
        let (states, pre) = straight_run(12);
        let mut window = SlidingWindow::new(SlidingWindowConfig {
            window: 4,
            ..Default::default()
        });
        feed(&mut window, &states, &pre);
        assert_eq!(window.window_len(), 4);
        for (i, s) in states.iter().enumerate() {
            let est = window.estimate(i as u64).unwrap();
            let err = (est.pose.translation() - s.pose.translation()).norm();
            assert!(err < 1e-3, "frame {i}: err {err}");
        }
    }

    #[test]
    fn minimal_window_of_two_still_solves() {
        let (states, pre) = straight_run(6);
        let mut window = SlidingWindow::new(SlidingWindowConfig {
            window: 2,
            ..Default::default()
        });
        feed(&mut window, &states, &pre);
        let last = window.estimate(5).unwrap();
        let err = (last.pose.translation() - states[5].pose.translation()).norm();
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn global_smooth_matches_batch_solution() {
        // run with aggressive marginalization, then smooth; the archive holds
        // the full batch problem so the smoothed result must match a batch
        // solve from scratch
        let (states, pre) = straight_run(8);
        let mut window = SlidingWindow::new(SlidingWindowConfig {
            window: 3,
            ..Default::default()
        });
        feed(&mut window, &states, &pre);
        let smoothed = window.global_smooth().unwrap();

        // batch oracle
        let mut values = Values::new();
        let mut factors: Vec<Box<dyn Factor>> = Vec::new();
        for (i, s) in states.iter().enumerate() {
            let mut guess = *s;
            guess.retract(&[0.02; 15]);
            values.insert(Key::nav(i as u64), Variable::Nav(guess));
        }
        factors.push(Box::new(NavPriorFactor::new(
            Key::nav(0),
            states[0],
            NoiseModel::from_sigmas(&[1e-3; 15]),
        )));
        for i in 1..states.len() as u64 {
            factors.push(Box::new(
                ImuFactor::new(Key::nav(i - 1), Key::nav(i), pre.clone()).unwrap(),
            ));
        }
        for (i, s) in states.iter().enumerate() {
            factors.push(Box::new(GnssFactor::new(
                Key::nav(i as u64),
                *s.pose.translation(),
                Vector3::zeros(),
                NoiseModel::isotropic(3, 0.05),
            )));
        }
        let refs: Vec<&dyn Factor> = factors.iter().map(|b| b.as_ref()).collect();
        optimize(&refs, &mut values, &SolverOptions::default()).unwrap();

        for i in 0..states.len() as u64 {
            let a = smoothed[&i];
            let b = values.get(Key::nav(i)).unwrap().as_nav();
            let err = (a.pose.translation() - b.pose.translation()).norm();
            assert!(err < 1e-6, "frame {i}: {err}");
        }
    }

    #[test]
    fn trajectory_csv_is_deterministic_and_well_formed() {
        let (states, _) = straight_run(3);
        let map: BTreeMap<u64, NavState> =
            states.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_trajectory_csv(&map, &mut a).unwrap();
        write_trajectory_csv(&map, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,qw,qx,qy,qz,tx,ty,tz,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz"
        );
        assert_eq!(lines.count(), 3);
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), 17);
        }
    }

    #[test]
    fn retired_factors_leave_archive() {
        let (states, _) = straight_run(2);
        let mut window = SlidingWindow::new(SlidingWindowConfig::default());
        window.add_state(0, states[0]);
        let id = window.add_factor(
            Box::new(NavPriorFactor::new(
                Key::nav(0),
                states[0],
                NoiseModel::from_sigmas(&[1e-2; 15]),
            )),
            true,
        );
        assert_eq!(window.archive_factors().len(), 1);
        window.retire_factor(id);
        assert_eq!(window.archive_factors().len(), 0);
    }
}

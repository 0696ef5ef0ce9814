//! State container for the nonlinear least-squares engine.
//!
//! Variables live on manifolds; solvers work in local coordinates and write
//! back through `retract`. Keys are namespaced integers with a total order, so
//! column assignment (and therefore every assembly reduction) is deterministic.

use crate::geom::{Pose, Twist};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("factor references missing state {0:?}")]
    MissingState(Key),
    #[error("factor spans dropped and absent keys: {0:?}")]
    DanglingFactor(Key),
    #[error("solver diverged: cost became non-finite")]
    SolverDiverged,
    #[error("timestamps inconsistent with preintegration interval: {0}")]
    TimestampMismatch(String),
    #[error("no IMU samples to preintegrate")]
    EmptySampleList,
    #[error("normal equations are not positive definite")]
    NotPositiveDefinite,
}

/// Namespaced variable key. The namespace lives in the top byte so keys of one
/// kind sort together and navigation states stay contiguous in banded solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub u64);

const NS_NAV: u64 = 0;
const NS_POSE: u64 = 1;
const NS_SCALAR: u64 = 2;

impl Key {
    pub fn nav(i: u64) -> Key {
        Key((NS_NAV << 56) | i)
    }
    pub fn pose(i: u64) -> Key {
        Key((NS_POSE << 56) | i)
    }
    pub fn scalar(i: u64) -> Key {
        Key((NS_SCALAR << 56) | i)
    }
    pub fn index(&self) -> u64 {
        self.0 & 0x00ff_ffff_ffff_ffff
    }
    pub fn is_scalar(&self) -> bool {
        (self.0 >> 56) == NS_SCALAR
    }
    pub fn is_nav(&self) -> bool {
        (self.0 >> 56) == NS_NAV
    }
}

/// Body navigation state: pose, velocity and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
    pub bias_gyr: Vector3<f64>,
    pub timestamp: f64,
}

impl NavState {
    pub fn new(pose: Pose, velocity: Vector3<f64>, timestamp: f64) -> Self {
        NavState {
            pose,
            velocity,
            bias_acc: Vector3::zeros(),
            bias_gyr: Vector3::zeros(),
            timestamp,
        }
    }

    pub const DIM: usize = 15;

    /// Local coordinates layout: [xi_pose(6), dv(3), dba(3), dbg(3)].
    pub fn retract(&mut self, delta: &[f64]) {
        self.pose = self.pose.retract(&Twist::from_slice(&delta[0..6]));
        self.velocity += Vector3::new(delta[6], delta[7], delta[8]);
        self.bias_acc += Vector3::new(delta[9], delta[10], delta[11]);
        self.bias_gyr += Vector3::new(delta[12], delta[13], delta[14]);
    }

    /// Local coordinates of `other` relative to `self` (pose part by SE(3) log).
    pub fn local(&self, other: &NavState) -> [f64; 15] {
        let xi = self
            .pose
            .local(&other.pose)
            .expect("nav states too far apart for local coordinates")
            .to_array();
        let dv = other.velocity - self.velocity;
        let dba = other.bias_acc - self.bias_acc;
        let dbg = other.bias_gyr - self.bias_gyr;
        [
            xi[0], xi[1], xi[2], xi[3], xi[4], xi[5], dv.x, dv.y, dv.z, dba.x, dba.y, dba.z,
            dbg.x, dbg.y, dbg.z,
        ]
    }
}

#[derive(Debug, Clone)]
pub enum Variable {
    Nav(NavState),
    Pose(Pose),
    Scalar(f64),
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::Nav(_) => NavState::DIM,
            Variable::Pose(_) => 6,
            Variable::Scalar(_) => 1,
        }
    }

    pub fn retract(&mut self, delta: &[f64]) {
        match self {
            Variable::Nav(n) => n.retract(delta),
            Variable::Pose(p) => *p = p.retract(&Twist::from_slice(delta)),
            Variable::Scalar(s) => *s += delta[0],
        }
    }

    /// Local coordinates of `other` relative to `self`; dims must match.
    pub fn local(&self, other: &Variable) -> Vec<f64> {
        match (self, other) {
            (Variable::Nav(a), Variable::Nav(b)) => a.local(b).to_vec(),
            (Variable::Pose(a), Variable::Pose(b)) => a
                .local(b)
                .expect("poses too far apart for local coordinates")
                .to_array()
                .to_vec(),
            (Variable::Scalar(a), Variable::Scalar(b)) => vec![b - a],
            _ => panic!("variable kind mismatch in local()"),
        }
    }

    pub fn as_nav(&self) -> &NavState {
        match self {
            Variable::Nav(n) => n,
            _ => panic!("expected nav state"),
        }
    }

    pub fn as_pose(&self) -> &Pose {
        match self {
            Variable::Nav(n) => &n.pose,
            Variable::Pose(p) => p,
            _ => panic!("expected pose"),
        }
    }

    pub fn as_scalar(&self) -> f64 {
        match self {
            Variable::Scalar(s) => *s,
            _ => panic!("expected scalar"),
        }
    }
}

/// Keyed variable set with an optional fixed subset excluded from solving.
#[derive(Debug, Clone, Default)]
pub struct Values {
    vars: BTreeMap<Key, Variable>,
    fixed: BTreeSet<Key>,
}

impl Values {
    pub fn new() -> Self {
        Values::default()
    }

    pub fn insert(&mut self, key: Key, var: Variable) {
        self.vars.insert(key, var);
    }

    pub fn fix(&mut self, key: Key) {
        self.fixed.insert(key);
    }

    pub fn is_fixed(&self, key: Key) -> bool {
        self.fixed.contains(&key)
    }

    pub fn get(&self, key: Key) -> Option<&Variable> {
        self.vars.get(&key)
    }

    pub fn expect(&self, key: Key) -> Result<&Variable, GraphError> {
        self.vars.get(&key).ok_or(GraphError::MissingState(key))
    }

    pub fn remove(&mut self, key: Key) -> Option<Variable> {
        self.fixed.remove(&key);
        self.vars.remove(&key)
    }

    pub fn contains(&self, key: Key) -> bool {
        self.vars.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.vars.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Key, &Variable)> {
        self.vars.iter().map(|(k, v)| (*k, v))
    }

    pub fn get_mut(&mut self, key: Key) -> Option<&mut Variable> {
        self.vars.get_mut(&key)
    }

    /// Keys eligible for solving, in deterministic order.
    pub fn free_keys(&self) -> Vec<Key> {
        self.vars
            .keys()
            .copied()
            .filter(|k| !self.fixed.contains(k))
            .collect()
    }
}

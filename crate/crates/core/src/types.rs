//! Shared domain types: planar vectors, yaw-only quaternions, entity and joint
//! states, demonstrations and datasets, plus goal-frame conversion.

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar vector in meters (or meters/second for velocities).
/// Serialized as a `[x, y]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized_or_zero(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Scales the vector down so its norm does not exceed `max`.
    pub fn clamp_norm(self, max: f64) -> Vec2 {
        let n = self.norm();
        if n > max && n > 0.0 {
            self * (max / n)
        } else {
            self
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Unit quaternion, serialized as `[w, x, y, z]`. In the planar world only
/// yaw rotations (about z) occur, so `x = y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(a: [f64; 4]) -> Self {
        Quat {
            w: a[0],
            x: a[1],
            y: a[2],
            z: a[3],
        }
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Quat {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    /// Rotation angle about z, wrapped to (-pi, pi].
    pub fn yaw(self) -> f64 {
        wrap_angle(2.0 * self.z.atan2(self.w))
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conj(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-6
    }

    pub fn is_yaw_only(self) -> bool {
        self.x.abs() <= 1e-9 && self.y.abs() <= 1e-9
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    // in-range angles are returned bit-exact
    if a > -std::f64::consts::PI && a <= std::f64::consts::PI {
        return a;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Per-entity state `[p, q_rot, w, h, v_prev]`, shared by agents, the object
/// and the goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub p: Vec2,
    pub q: Quat,
    pub w: f64,
    pub h: f64,
    pub v_prev: Vec2,
}

impl EntityState {
    pub fn new(p: Vec2, yaw: f64, w: f64, h: f64, v_prev: Vec2) -> Self {
        EntityState {
            p,
            q: Quat::from_yaw(yaw),
            w,
            h,
            v_prev,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.q.yaw()
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite()
            && self.q.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.v_prev.is_finite()
    }

    /// Ten raw state features in the layout `[p(2), q(4), w, h, v_prev(2)]`.
    pub fn features(&self) -> [f64; 10] {
        [
            self.p.x,
            self.p.y,
            self.q.w,
            self.q.x,
            self.q.y,
            self.q.z,
            self.w,
            self.h,
            self.v_prev.x,
            self.v_prev.y,
        ]
    }
}

fn check_goal(goal: &EntityState) -> Result<()> {
    if !goal.q.is_unit() || !goal.q.is_yaw_only() {
        return Err(Error::invalid(format!(
            "goal quaternion must be unit and yaw-only, got {:?}",
            goal.q
        )));
    }
    Ok(())
}

/// Expresses a world-frame pose in the goal's coordinate frame. Position and
/// previous velocity are rotated into the goal frame; rotation becomes the
/// relative rotation `q_goal^-1 * q`.
pub fn to_goal_frame(world: &EntityState, goal: &EntityState) -> Result<EntityState> {
    check_goal(goal)?;
    let yaw = goal.q.yaw();
    Ok(EntityState {
        p: (world.p - goal.p).rotate(-yaw),
        q: goal.q.conj().mul(world.q),
        w: world.w,
        h: world.h,
        v_prev: world.v_prev.rotate(-yaw),
    })
}

/// Inverse of [`to_goal_frame`].
pub fn from_goal_frame(local: &EntityState, goal: &EntityState) -> Result<EntityState> {
    check_goal(goal)?;
    let yaw = goal.q.yaw();
    Ok(EntityState {
        p: local.p.rotate(yaw) + goal.p,
        q: goal.q.mul(local.q),
        w: local.w,
        h: local.h,
        v_prev: local.v_prev.rotate(yaw),
    })
}

/// Joint state of all agents, the manipulated object and the goal at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub agents: Vec<EntityState>,
    pub object: EntityState,
    pub goal: EntityState,
}

impl JointState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Converts every entity into the goal frame. The goal itself becomes the
    /// origin with identity rotation.
    pub fn to_goal_frame(&self) -> Result<JointState> {
        let goal = &self.goal;
        let agents = self
            .agents
            .iter()
            .map(|a| to_goal_frame(a, goal))
            .collect::<Result<Vec<_>>>()?;
        Ok(JointState {
            agents,
            object: to_goal_frame(&self.object, goal)?,
            goal: to_goal_frame(goal, goal)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.agents.iter().all(EntityState::is_finite)
            && self.object.is_finite()
            && self.goal.is_finite()
    }

    /// Reorders agents: `out.agents[i] = self.agents[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> JointState {
        JointState {
            agents: perm.iter().map(|&i| self.agents[i]).collect(),
            object: self.object,
            goal: self.goal,
        }
    }
}

/// One recorded step: joint state plus the commanded per-agent actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub state: JointState,
    pub actions: Vec<Vec2>,
}

thread_local! {
    static META_GUARD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// While alive, any read of [`Demonstration::meta`] on this thread panics.
/// Retrieval code paths hold one so provenance labels can never leak into
/// similarity search.
pub struct MetaGuard {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl MetaGuard {
    pub fn enter() -> Self {
        META_GUARD_DEPTH.with(|d| d.set(d.get() + 1));
        MetaGuard {
            _not_send: std::marker::PhantomData,
        }
    }

    pub fn active() -> bool {
        META_GUARD_DEPTH.with(|d| d.get() > 0)
    }
}

impl Drop for MetaGuard {
    fn drop(&mut self) {
        META_GUARD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub const DEMO_SCHEMA_VERSION: u32 = 1;

/// A variable-length multi-agent demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub n_agents: usize,
    pub dt: f64,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl Demonstration {
    pub fn new(id: impl Into<String>, dt: f64, steps: Vec<StepRecord>) -> Result<Self> {
        let n_agents = steps.first().map(|s| s.state.n_agents()).unwrap_or(0);
        let d = Demonstration {
            id: id.into(),
            n_agents,
            dt,
            steps,
            meta: BTreeMap::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Provenance tags for evaluation fixtures. Panics inside a [`MetaGuard`].
    pub fn meta(&self) -> &BTreeMap<String, String> {
        assert!(
            !MetaGuard::active(),
            "demonstration meta read inside a retrieval code path"
        );
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &JointState> {
        self.steps.iter().map(|s| &s.state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::invalid(format!(
                "demonstration {} has {} steps, need at least 2",
                self.id,
                self.steps.len()
            )));
        }
        if self.n_agents == 0 {
            return Err(Error::invalid(format!("demonstration {} has no agents", self.id)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("demonstration {} has dt = {}", self.id, self.dt)));
        }
        let goal = self.steps[0].state.goal;
        for (t, s) in self.steps.iter().enumerate() {
            if s.state.n_agents() != self.n_agents || s.actions.len() != self.n_agents {
                return Err(Error::invalid(format!(
                    "demonstration {} step {}: expected {} agents/actions, got {}/{}",
                    self.id,
                    t,
                    self.n_agents,
                    s.state.n_agents(),
                    s.actions.len()
                )));
            }
            if s.state.goal != goal {
                return Err(Error::invalid(format!(
                    "demonstration {} step {}: goal changed within the episode",
                    self.id, t
                )));
            }
            if !s.state.is_finite() || !s.actions.iter().all(|a| a.is_finite()) {
                return Err(Error::invalid(format!(
                    "demonstration {} step {}: non-finite value",
                    self.id, t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct DemoRecordOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    demo: &'a Demonstration,
}

#[derive(Deserialize)]
struct DemoRecordIn {
    schema_version: u32,
    #[serde(flatten)]
    demo: Demonstration,
}

/// Serializes a demonstration to a single JSON line (no trailing newline).
pub fn serialize_demo(d: &Demonstration) -> Result<String> {
    Ok(serde_json::to_string(&DemoRecordOut {
        schema_version: DEMO_SCHEMA_VERSION,
        demo: d,
    })?)
}

/// Parses one JSON line; `line_no` is 1-based and only used for diagnostics.
pub fn deserialize_demo(line: &str, line_no: usize) -> Result<Demonstration> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(ver) if ver == DEMO_SCHEMA_VERSION as u64 => {}
        Some(ver) => {
            return Err(Error::SchemaVersion {
                found: ver as u32,
                expected: DEMO_SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                line: line_no,
                msg: "missing schema_version".into(),
            })
        }
    }
    let rec: DemoRecordIn = serde_json::from_value(v).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    debug_assert_eq!(rec.schema_version, DEMO_SCHEMA_VERSION);
    let d = rec.demo;
    if d.steps.first().map(|s| s.state.n_agents()) != Some(d.n_agents) && !d.steps.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("n_agents = {} does not match recorded agents", d.n_agents),
        });
    }
    d.validate().map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    Ok(d)
}

/// Which stage of the retrieve-and-learn pipeline a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Prior,
    Target,
    Retrieved,
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: DatasetRole,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn new(role: DatasetRole, demos: Vec<Demonstration>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &demos {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::invalid(format!("duplicate demonstration id {}", d.id)));
            }
        }
        Ok(Dataset { role, demos })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.demos.iter().find(|d| d.id == id)
    }

    /// JSONL text: one demonstration per line, each terminated by `\n`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.demos {
            out.push_str(&serialize_demo(d)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(role: DatasetRole, text: &str) -> Result<Self> {
        let mut demos = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            demos.push(deserialize_demo(line, i + 1)?);
        }
        Dataset::new(role, demos)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::io_util::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(role: DatasetRole, path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_jsonl(role, &text)
    }
}

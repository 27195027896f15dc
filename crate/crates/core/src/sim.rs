//! Deterministic planar push-manipulation world.
//!
//! Agents are kinematic discs that execute their commanded velocity. The
//! object is a rectangle moved by penalty contact forces under quasi-static
//! damping: its velocity is proportional to the net contact force, so it stops
//! as soon as nobody pushes it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{wrap_angle, Demonstration, EntityState, JointState, StepRecord, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Stick,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Stick => "stick",
            Shape::Block => "block",
        })
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

/// Object footprint `(w, h)` in meters; `w` is the long (pushing) side.
pub fn object_dims(shape: Shape) -> (f64, f64) {
    match shape {
        Shape::Stick => (0.24, 0.02),
        Shape::Block => (0.24, 0.08),
    }
}

/// Goal distance band `[lo, hi)` in meters. The easy band is closed at 0.1.
pub fn distance_band(difficulty: Difficulty) -> (f64, f64) {
    match difficulty {
        Difficulty::Easy => (0.0, 0.1),
        Difficulty::Hard => (0.1, 0.2),
    }
}

pub const MAX_GOAL_YAW: f64 = std::f64::consts::FRAC_PI_2;

/// Task family: number of agents, object and difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskKind {
    pub n_agents: usize,
    pub shape: Shape,
    pub difficulty: Difficulty,
}

impl TaskKind {
    pub fn new(n_agents: usize, shape: Shape, difficulty: Difficulty) -> Self {
        TaskKind {
            n_agents,
            shape,
            difficulty,
        }
    }

    /// `n{N}_{shape}_{difficulty}`, used for file names and table rows.
    pub fn key(&self) -> String {
        format!("n{}_{}_{}", self.n_agents, self.shape, self.difficulty)
    }

    /// Shape/difficulty label without the agent count.
    pub fn label(&self) -> String {
        format!("{}_{}", self.shape, self.difficulty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vec2,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose {
            p: Vec2::new(x, y),
            yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub object_init: Pose,
    pub goal: Pose,
    pub agent_inits: Vec<Pose>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn n_agents(&self) -> usize {
        self.kind.n_agents
    }

    pub fn object_dims(&self) -> (f64, f64) {
        object_dims(self.kind.shape)
    }

    pub fn goal_entity(&self) -> EntityState {
        let (w, h) = self.object_dims();
        EntityState::new(self.goal.p, self.goal.yaw, w, h, Vec2::ZERO)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub dt: f64,
    /// Integration substeps per control step.
    pub substeps: usize,
    pub agent_radius: f64,
    pub max_speed: f64,
    pub contact_stiffness: f64,
    pub object_lin_damping: f64,
    pub object_ang_damping: f64,
    pub friction_ratio: f64,
    pub arena_half_extent: f64,
    pub max_steps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dt: 0.05,
            substeps: 20,
            agent_radius: 0.015,
            max_speed: 0.1,
            contact_stiffness: 1000.0,
            object_lin_damping: 20.0,
            object_ang_damping: 60.0,
            friction_ratio: 0.3,
            arena_half_extent: 0.5,
            max_steps: 300,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("agent_radius", self.agent_radius),
            ("max_speed", self.max_speed),
            ("contact_stiffness", self.contact_stiffness),
            ("object_lin_damping", self.object_lin_damping),
            ("object_ang_damping", self.object_ang_damping),
            ("friction_ratio", self.friction_ratio),
            ("arena_half_extent", self.arena_half_extent),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("world.{name} must be positive, got {v}")));
            }
        }
        if self.dt > 0.1 {
            return Err(Error::Config(format!("world.dt must be <= 0.1 s, got {}", self.dt)));
        }
        if self.substeps == 0 || self.max_steps == 0 {
            return Err(Error::Config("world.substeps and world.max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Agent bounding-box side (disc diameter).
    pub fn agent_size(&self) -> f64 {
        2.0 * self.agent_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessTolerance {
    pub pos_tol: f64,
    pub yaw_tol_deg: f64,
}

impl Default for SuccessTolerance {
    fn default() -> Self {
        SuccessTolerance {
            pos_tol: 0.02,
            yaw_tol_deg: 10.0,
        }
    }
}

impl SuccessTolerance {
    pub fn yaw_tol(&self) -> f64 {
        self.yaw_tol_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentBody {
    pub p: Vec2,
    /// Last executed (post-clamp) velocity.
    pub v: Vec2,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectBody {
    pub p: Vec2,
    pub yaw: f64,
    pub v: Vec2,
    pub omega: f64,
    pub w: f64,
    pub h: f64,
}

impl ObjectBody {
    fn inertia(&self) -> f64 {
        (self.w * self.w + self.h * self.h) / 12.0
    }

    pub fn to_local(&self, world: Vec2) -> Vec2 {
        (world - self.p).rotate(-self.yaw)
    }

    pub fn to_world(&self, local: Vec2) -> Vec2 {
        local.rotate(self.yaw) + self.p
    }

    /// Velocity of a world point rigidly attached to the object.
    pub fn point_velocity(&self, world: Vec2) -> Vec2 {
        self.v + (world - self.p).perp() * self.omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub agents: Vec<AgentBody>,
    pub object: ObjectBody,
    pub step_count: usize,
}

impl SimState {
    pub fn from_task(task: &TaskSpec) -> Self {
        let (w, h) = task.object_dims();
        SimState {
            agents: task
                .agent_inits
                .iter()
                .map(|a| AgentBody {
                    p: a.p,
                    v: Vec2::ZERO,
                    heading: a.yaw,
                })
                .collect(),
            object: ObjectBody {
                p: task.object_init.p,
                yaw: task.object_init.yaw,
                v: Vec2::ZERO,
                omega: 0.0,
                w,
                h,
            },
            step_count: 0,
        }
    }

    pub fn min_agent_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                m = m.min((self.agents[i].p - self.agents[j].p).norm());
            }
        }
        m
    }
}

/// Penetration of a disc into a rectangle centered at the origin (local frame).
/// Returns `(contact point on the boundary, outward normal, depth)`.
pub(crate) fn disc_rect_contact(local: Vec2, radius: f64, hw: f64, hh: f64) -> Option<(Vec2, Vec2, f64)> {
    let clamped = Vec2::new(local.x.clamp(-hw, hw), local.y.clamp(-hh, hh));
    let d = local - clamped;
    let dist = d.norm();
    if dist > 0.0 {
        if dist >= radius {
            return None;
        }
        return Some((clamped, d * (1.0 / dist), radius - dist));
    }
    // center inside the rectangle: exit through the nearest side
    let gaps = [
        (hw - local.x, Vec2::new(1.0, 0.0)),
        (hw + local.x, Vec2::new(-1.0, 0.0)),
        (hh - local.y, Vec2::new(0.0, 1.0)),
        (hh + local.y, Vec2::new(0.0, -1.0)),
    ];
    let (gap, n) = gaps
        .iter()
        .copied()
        .fold((f64::INFINITY, Vec2::ZERO), |best, g| if g.0 < best.0 { g } else { best });
    Some((local + n * gap, n, radius + gap))
}

/// Fraction of agent-agent overlap removed per substep.
const AGENT_PUSHOUT: f64 = 0.5;
/// Tangential velocity coupling relative to linear damping, capped by Coulomb friction.
const TANGENTIAL_COUPLING: f64 = 0.5;

/// Advances the world by one control step. Commands faster than
/// `cfg.max_speed` are clamped.
pub fn step(state: &SimState, cfg: &WorldConfig, commands: &[Vec2]) -> Result<SimState> {
    if commands.len() != state.agents.len() {
        return Err(Error::invalid(format!(
            "expected {} commands, got {}",
            state.agents.len(),
            commands.len()
        )));
    }
    if commands.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite agent command".into()));
    }
    let mut next = state.clone();
    for (a, c) in next.agents.iter_mut().zip(commands) {
        a.v = c.clamp_norm(cfg.max_speed);
        if a.v.norm() > 1e-9 {
            a.heading = a.v.angle();
        }
    }
    let h = cfg.dt / cfg.substeps as f64;
    let r = cfg.agent_radius;
    let limit = cfg.arena_half_extent - r;
    let mut obj_v = Vec2::ZERO;
    let mut obj_w = 0.0;
    for _ in 0..cfg.substeps {
        for a in next.agents.iter_mut() {
            a.p += a.v * h;
        }
        let n = next.agents.len();
        for i in 0..n {
            for j in i + 1..n {
                let d = next.agents[j].p - next.agents[i].p;
                let dist = d.norm();
                let overlap = 2.0 * r - dist;
                if overlap > 0.0 {
                    let nrm = if dist > 1e-12 { d * (1.0 / dist) } else { Vec2::new(1.0, 0.0) };
                    let corr = nrm * (0.5 * AGENT_PUSHOUT * overlap);
                    next.agents[i].p -= corr;
                    next.agents[j].p += corr;
                }
            }
        }
        for a in next.agents.iter_mut() {
            a.p.x = a.p.x.clamp(-limit, limit);
            a.p.y = a.p.y.clamp(-limit, limit);
        }

        let o = next.object;
        let (hw, hh) = (0.5 * o.w, 0.5 * o.h);
        let mut force = Vec2::ZERO;
        let mut torque = 0.0;
        for a in &next.agents {
            let Some((c_local, n_local, depth)) = disc_rect_contact(o.to_local(a.p), r, hw, hh) else {
                continue;
            };
            let normal = n_local.rotate(o.yaw);
            let contact = o.to_world(c_local);
            let fn_mag = cfg.contact_stiffness * depth;
            let tangent = normal.perp();
            let slip = (a.v - o.point_velocity(contact)).dot(tangent);
            let ft_cap = cfg.friction_ratio * fn_mag;
            let ft = (TANGENTIAL_COUPLING * cfg.object_lin_damping * slip).clamp(-ft_cap, ft_cap);
            let f = -normal * fn_mag + tangent * ft;
            force += f;
            torque += (contact - o.p).cross(f);
        }
        obj_v = force * (1.0 / cfg.object_lin_damping);
        obj_w = torque / (o.inertia() * cfg.object_ang_damping);
        let obj = &mut next.object;
        obj.v = obj_v;
        obj.omega = obj_w;
        obj.p += obj_v * h;
        obj.yaw = wrap_angle(obj.yaw + obj_w * h);
    }
    next.object.v = obj_v;
    next.object.omega = obj_w;
    next.step_count += 1;
    if !next.object.p.is_finite() || !next.object.yaw.is_finite() {
        return Err(Error::Numeric("object state became non-finite".into()));
    }
    Ok(next)
}

/// World-frame joint state with the goal attached.
pub fn snapshot(state: &SimState, goal: &EntityState, cfg: &WorldConfig) -> JointState {
    let s = cfg.agent_size();
    JointState {
        agents: state
            .agents
            .iter()
            .map(|a| EntityState::new(a.p, a.heading, s, s, a.v))
            .collect(),
        object: EntityState::new(
            state.object.p,
            state.object.yaw,
            state.object.w,
            state.object.h,
            state.object.v,
        ),
        goal: *goal,
    }
}

/// Goal-frame observation of the current state.
pub fn observe(state: &SimState, goal: &EntityState, cfg: &WorldConfig) -> Result<JointState> {
    snapshot(state, goal, cfg).to_goal_frame()
}

pub fn pose_error(object: &EntityState, goal: &EntityState) -> (f64, f64) {
    ((object.p - goal.p).norm(), wrap_angle(object.yaw() - goal.yaw()).abs())
}

pub fn is_success(state: &SimState, goal: &EntityState, tol: &SuccessTolerance) -> bool {
    let dp = (state.object.p - goal.p).norm();
    let dyaw = wrap_angle(state.object.yaw - goal.yaw()).abs();
    dp <= tol.pos_tol && dyaw <= tol.yaw_tol()
}

/// Samples a task: fixed object at the arena center, goal uniformly in the
/// difficulty band, collision-free agent starts.
pub fn sample_task(kind: TaskKind, cfg: &WorldConfig, rng: &mut Rng) -> Result<TaskSpec> {
    if !(2..=4).contains(&kind.n_agents) {
        return Err(Error::invalid(format!("n_agents must be 2, 3 or 4, got {}", kind.n_agents)));
    }
    let seed = rng.seed();
    let (lo, hi) = distance_band(kind.difficulty);
    let dist = match kind.difficulty {
        // closed upper bound for the easy band
        Difficulty::Easy => (lo + (hi - lo) * rng.uniform() * (1.0 + f64::EPSILON)).min(hi),
        Difficulty::Hard => rng.range(lo, hi),
    };
    let dir = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
    let goal_yaw = rng.range(-MAX_GOAL_YAW, MAX_GOAL_YAW);
    let object_init = Pose::new(0.0, 0.0, 0.0);
    let goal = Pose {
        p: object_init.p + Vec2::from_angle(dir) * dist,
        yaw: object_init.yaw + goal_yaw,
    };
    let (w, h) = object_dims(kind.shape);
    let r = cfg.agent_radius;
    let clearance = 0.01;
    let limit = cfg.arena_half_extent - r;
    let mut agent_inits: Vec<Pose> = Vec::with_capacity(kind.n_agents);
    let mut attempts = 0usize;
    while agent_inits.len() < kind.n_agents {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "could not place {} agents without overlap after 10^4 attempts",
                kind.n_agents
            )));
        }
        let p = Vec2::new(rng.range(-limit, limit), rng.range(-limit, limit));
        let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        let local = (p - object_init.p).rotate(-object_init.yaw);
        let inside_object =
            local.x.abs() < 0.5 * w + r + clearance && local.y.abs() < 0.5 * h + r + clearance;
        let overlaps = agent_inits.iter().any(|a| (a.p - p).norm() < 2.0 * r + clearance);
        if !inside_object && !overlaps {
            agent_inits.push(Pose { p, yaw });
        }
    }
    Ok(TaskSpec {
        kind,
        object_init,
        goal,
        agent_inits,
        seed,
    })
}

/// Closed-loop controller producing one world-frame velocity per agent from
/// the world-frame state history (last element is the current state).
pub trait Policy {
    fn reset(&mut self) {}
    fn act(&mut self, history: &[JointState], rng: &mut Rng) -> Result<Vec<Vec2>>;
}

impl<F> Policy for F
where
    F: FnMut(&[JointState], &mut Rng) -> Result<Vec<Vec2>>,
{
    fn act(&mut self, history: &[JointState], rng: &mut Rng) -> Result<Vec<Vec2>> {
        self(history, rng)
    }
}

/// Commands zero velocity to every agent.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, history: &[JointState], _rng: &mut Rng) -> Result<Vec<Vec2>> {
        Ok(vec![Vec2::ZERO; history.last().map_or(0, |s| s.n_agents())])
    }
}

/// Runs one episode until success (after at least two recorded steps) or
/// `max_steps`. The demonstration stores world-frame states and the commanded
/// (post-clamp) actions.
pub fn rollout(
    policy: &mut dyn Policy,
    task: &TaskSpec,
    cfg: &WorldConfig,
    tol: &SuccessTolerance,
    rng: &mut Rng,
) -> Result<(Demonstration, bool)> {
    policy.reset();
    let goal = task.goal_entity();
    let mut state = SimState::from_task(task);
    let mut history: Vec<JointState> = Vec::with_capacity(cfg.max_steps);
    let mut steps = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps.max(2) {
        let js = snapshot(&state, &goal, cfg);
        history.push(js.clone());
        let cmds = policy.act(&history, rng)?;
        if cmds.len() != task.n_agents() {
            return Err(Error::invalid(format!(
                "policy returned {} actions for {} agents",
                cmds.len(),
                task.n_agents()
            )));
        }
        let cmds: Vec<Vec2> = cmds.iter().map(|c| c.clamp_norm(cfg.max_speed)).collect();
        state = step(&state, cfg, &cmds)?;
        steps.push(StepRecord {
            state: js,
            actions: cmds,
        });
        if steps.len() >= 2 && is_success(&state, &goal, tol) {
            break;
        }
    }
    let success = is_success(&state, &goal, tol);
    let demo = Demonstration::new(format!("ep-{:016x}", task.seed), cfg.dt, steps)?;
    Ok((demo, success))
}

//! Scripted demonstrators at three proficiency tiers and batch generation of
//! the prior and target datasets.
//!
//! The expert turns the pose error into a desired object twist and, through
//! the quasi-static damping model, into a wanted wrench. It then picks the
//! contact slots on the object boundary whose (friction-cone) forces realize
//! that wrench best, walks the agents around the object to those slots and
//! presses with a depth giving the planned normal force. Sticks only accept
//! slots on their long sides, so a large error along the stick axis is removed
//! by first turning the stick across it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_hash, Rng};
use crate::sim::{
    object_dims, rollout, sample_task, Difficulty, Policy, Shape, SuccessTolerance, TaskKind, WorldConfig,
};
use crate::types::{wrap_angle, Dataset, DatasetRole, Demonstration, JointState, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Best,
    Average,
    Worst,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Best, Tier::Average, Tier::Worst];

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Best => "best",
            Tier::Average => "average",
            Tier::Worst => "worst",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertTier {
    pub tier: Tier,
    pub noise_std: f64,
    pub misassign_prob: f64,
}

impl ExpertTier {
    pub fn best() -> Self {
        ExpertTier {
            tier: Tier::Best,
            noise_std: 0.0,
            misassign_prob: 0.0,
        }
    }

    pub fn average() -> Self {
        ExpertTier {
            tier: Tier::Average,
            noise_std: 0.03,
            misassign_prob: 0.0,
        }
    }

    pub fn worst() -> Self {
        ExpertTier {
            tier: Tier::Worst,
            noise_std: 0.06,
            misassign_prob: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tier == Tier::Best && (self.noise_std != 0.0 || self.misassign_prob != 0.0) {
            return Err(Error::Config("best tier must be noise-free".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.misassign_prob) {
            return Err(Error::Config(format!("invalid tier parameters {self:?}")));
        }
        Ok(())
    }
}

/// Gains and geometry of the scripted demonstrator.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ExpertGains {
    lin_gain: f64,
    ang_gain: f64,
    max_obj_speed: f64,
    max_obj_rate: f64,
    standoff: f64,
    depth_gain: f64,
    hold_gain: f64,
    nav_gain: f64,
    nav_margin: f64,
    arrive_tol: f64,
    replan_steps: usize,
    /// Weight of walking distance (per meter and agent) in slot selection.
    walk_weight: f64,
    switch_margin: f64,
}

const GAINS: ExpertGains = ExpertGains {
    lin_gain: 1.0,
    ang_gain: 1.5,
    max_obj_speed: 0.05,
    max_obj_rate: 0.75,
    standoff: 0.004,
    depth_gain: 10.0,
    hold_gain: 5.0,
    nav_gain: 3.0,
    nav_margin: 0.008,
    arrive_tol: 0.006,
    replan_steps: 10,
    walk_weight: 0.3,
    switch_margin: 0.15,
};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    /// Contact point on the boundary, object frame.
    point: Vec2,
    /// Outward normal, object frame.
    normal: Vec2,
}

fn slots_for(w: f64, h: f64, long_sides_only: bool) -> Vec<Slot> {
    let (hw, hh) = (0.5 * w, 0.5 * h);
    let mut out = Vec::new();
    for &x in &[-0.1, -0.05, 0.0, 0.05, 0.1] {
        let x = x * hw / 0.12;
        out.push(Slot {
            point: Vec2::new(x, hh),
            normal: Vec2::new(0.0, 1.0),
        });
        out.push(Slot {
            point: Vec2::new(x, -hh),
            normal: Vec2::new(0.0, -1.0),
        });
    }
    if !long_sides_only {
        for &y in &[-0.5 * hh, 0.5 * hh] {
            out.push(Slot {
                point: Vec2::new(hw, y),
                normal: Vec2::new(1.0, 0.0),
            });
            out.push(Slot {
                point: Vec2::new(-hw, y),
                normal: Vec2::new(-1.0, 0.0),
            });
        }
    }
    out
}

/// Sticks are pushed only from their long sides.
fn is_stick(h: f64) -> bool {
    h < 0.05
}

/// Nonnegative ridge least squares `min |A x - b|^2 + RIDGE |x|^2` over
/// x >= 0 for three-row columns. The ridge keeps nearly opposed contacts from
/// "solving" a wrench with huge internal forces. Returns `(x, residual norm)`.
fn nnls3(cols: &[[f64; 3]], b: [f64; 3]) -> (Vec<f64>, f64) {
    nnls3_ridge(cols, b, RIDGE)
}

/// Lawson-Hanson active set on the normal equations.
fn nnls3_ridge(cols: &[[f64; 3]], b: [f64; 3], ridge: f64) -> (Vec<f64>, f64) {
    let m = cols.len();
    let gram: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| dot3(cols[i], cols[j]) + if i == j { ridge } else { 0.0 }).collect())
        .collect();
    let atb: Vec<f64> = cols.iter().map(|c| dot3(*c, b)).collect();
    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    let tol = 1e-12 * (1.0 + dot3(b, b).sqrt());
    for _ in 0..(3 * m + 3) {
        // gradient of the (negated) objective
        let w: Vec<f64> = (0..m)
            .map(|i| atb[i] - (0..m).map(|j| gram[i][j] * x[j]).sum::<f64>())
            .collect();
        let Some(j) = (0..m)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&p, &q| w[p].total_cmp(&w[q]).then(q.cmp(&p)))
        else {
            break;
        };
        passive[j] = true;
        for _ in 0..(3 * m + 3) {
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let sub: Vec<Vec<f64>> = idx.iter().map(|&r| idx.iter().map(|&c| gram[r][c]).collect()).collect();
            let rhs: Vec<f64> = idx.iter().map(|&r| atb[r]).collect();
            let Some(z) = solve_dense(sub, rhs) else {
                passive[j] = false;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = z[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z[k] - x[i]);
                if x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    let mut res = b;
    for (xi, c) in x.iter().zip(cols) {
        for d in 0..3 {
            res[d] -= xi * c[d];
        }
    }
    let rn = dot3(res, res).sqrt();
    (x, rn)
}

const RIDGE: f64 = 0.05;

/// Contacts push only when they realize at least half of the wanted wrench.
const PUSH_RESIDUAL: f64 = 0.5;

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut v: Vec<f64>) -> Option<Vec<f64>> {
    let k = v.len();
    let scale = (0..k).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        v.swap(col, piv);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            for c in col..k {
                a[row][c] -= f * a[col][c];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let mut acc = v[row];
        for c in row + 1..k {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

fn combinations(k: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, n, &mut Vec::new(), &mut out);
    out
}

#[derive(Debug, Clone, Default)]
struct Plan {
    /// Slot index per agent.
    slots: Vec<usize>,
    age: usize,
    clock: usize,
    translating: bool,
    cross_yaw: Option<f64>,
    ready: Vec<bool>,
}

/// Scripted multi-agent pushing demonstrator.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    tier: ExpertTier,
    world: WorldConfig,
    tol: SuccessTolerance,
    plan: Option<Plan>,
}

impl ScriptedExpert {
    pub fn new(tier: ExpertTier, world: &WorldConfig, tol: &SuccessTolerance) -> Self {
        ScriptedExpert {
            tier,
            world: world.clone(),
            tol: *tol,
            plan: None,
        }
    }

    pub fn tier(&self) -> &ExpertTier {
        &self.tier
    }

    /// Desired object twist `(v, omega)`, with `v` in the object frame.
    fn desired_twist(&self, s: &JointState, plan: &mut Plan) -> (Vec2, f64) {
        let g = GAINS;
        let obj = &s.object;
        let yaw = obj.yaw();
        let e = (s.goal.p - obj.p).rotate(-yaw);
        let goal_yaw = s.goal.yaw();
        if !is_stick(obj.h) {
            let omega = (wrap_angle(goal_yaw - yaw) * g.ang_gain).clamp(-g.max_obj_rate, g.max_obj_rate);
            return ((e * g.lin_gain).clamp_norm(g.max_obj_speed), omega);
        }
        // Friction moves a stick only a little along its axis, so a large
        // axial error is handled by turning the stick across it, pushing, and
        // finally turning to the goal yaw.
        let axial = e.x.abs();
        plan.translating = if plan.translating {
            axial > 0.75 * self.tol.pos_tol && e.norm() > 0.3 * self.tol.pos_tol
        } else {
            axial > 2.5 * self.tol.pos_tol
        };
        if !plan.translating {
            plan.cross_yaw = None;
            let omega = (wrap_angle(goal_yaw - yaw) * g.ang_gain).clamp(-g.max_obj_rate, g.max_obj_rate);
            return ((e * g.lin_gain).clamp_norm(g.max_obj_speed), omega);
        }
        // the crossing yaw is kept until the error drifts well off its
        // normal, otherwise the stick chases the error direction
        let e_world = e.rotate(yaw);
        let stale = plan.cross_yaw.is_none_or(|c| {
            let off = e_world.dot(Vec2::from_angle(c)).abs();
            off > (0.6 * self.tol.pos_tol).max(0.35 * e.norm())
        });
        if stale {
            let base = e_world.angle() - std::f64::consts::FRAC_PI_2;
            let cost = |c: f64| wrap_angle(c - yaw).abs() + wrap_angle(goal_yaw - c).abs();
            let (a, b) = (wrap_angle(base), wrap_angle(base + std::f64::consts::PI));
            plan.cross_yaw = Some(if cost(a) <= cost(b) { a } else { b });
        }
        let target_yaw = plan.cross_yaw.unwrap_or(goal_yaw);
        let gain = if wrap_angle(target_yaw - yaw).abs() > 0.3 { 0.3 * g.lin_gain } else { g.lin_gain };
        let v = (e * gain).clamp_norm(g.max_obj_speed);
        let omega = (wrap_angle(target_yaw - yaw) * g.ang_gain).clamp(-g.max_obj_rate, g.max_obj_rate);
        (v, omega)
    }

    /// Wrench (object frame, torque scaled by the half width) that produces
    /// the twist under quasi-static damping.
    fn wrench(&self, s: &JointState, v: Vec2, omega: f64) -> [f64; 3] {
        let obj = &s.object;
        let inertia = (obj.w * obj.w + obj.h * obj.h) / 12.0;
        let l = 0.5 * obj.w;
        let f = v * self.world.object_lin_damping;
        [f.x, f.y, inertia * self.world.object_ang_damping * omega / l]
    }

    /// Wrench columns of the two friction-cone edges at a contact.
    fn contact_columns(point: Vec2, normal: Vec2, l: f64, mu: f64) -> [[f64; 3]; 2] {
        let d = -normal;
        let t = normal.perp();
        [d + t * mu, d - t * mu].map(|f| [f.x, f.y, point.cross(f) / l])
    }

    fn usable_friction(&self) -> f64 {
        0.7 * self.world.friction_ratio
    }

    fn standoff_point(&self, s: &JointState, sl: &Slot) -> Vec2 {
        let obj = &s.object;
        let yaw = obj.yaw();
        obj.p + (sl.point + sl.normal * (self.world.agent_radius + GAINS.standoff)).rotate(yaw)
    }

    /// Best assignment of agents to the given slots and its mean walking
    /// distance.
    fn assign(&self, s: &JointState, slots: &[Slot], chosen: &[usize]) -> (Vec<usize>, f64) {
        let n = s.agents.len();
        let targets: Vec<Vec2> = chosen.iter().map(|&j| self.standoff_point(s, &slots[j])).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in permutations(n) {
            let cost: f64 = perm.iter().enumerate().map(|(i, &k)| (s.agents[i].p - targets[k]).norm()).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c - 1e-12) {
                best = Some((cost, perm.iter().map(|&k| chosen[k]).collect()));
            }
        }
        let (cost, order) = best.unwrap_or_default();
        (order, cost / n.max(1) as f64)
    }

    /// `(unrealized fraction of the wrench, total cost including walking)`.
    fn score(&self, s: &JointState, slots: &[Slot], cols: &[[[f64; 3]; 2]], b: [f64; 3], assigned: &[usize]) -> (f64, f64) {
        let sub: Vec<[f64; 3]> = assigned.iter().flat_map(|&j| cols[j]).collect();
        // Ridge shrinkage depends on the contact geometry, so the fitted
        // force pattern is rescaled optimally before measuring the residual.
        let (x, _) = nnls3(&sub, b);
        let mut y = [0.0; 3];
        for (xi, c) in x.iter().zip(&sub) {
            for d in 0..3 {
                y[d] += xi * c[d];
            }
        }
        let yy = dot3(y, y);
        let alpha = if yy > 0.0 { (dot3(y, b) / yy).max(0.0) } else { 0.0 };
        let res = ((0..3).map(|d| (b[d] - alpha * y[d]).powi(2)).sum::<f64>()).sqrt();
        let bn = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt().max(1e-9);
        let walk: f64 = assigned
            .iter()
            .enumerate()
            .map(|(i, &j)| (s.agents[i].p - self.standoff_point(s, &slots[j])).norm())
            .sum::<f64>()
            / assigned.len().max(1) as f64;
        (res / bn, res / bn + GAINS.walk_weight * walk)
    }

    fn commands(&mut self, s: &JointState, rng: &mut Rng) -> Vec<Vec2> {
        let (dp, dyaw) = (
            (s.goal.p - s.object.p).norm(),
            wrap_angle(s.goal.yaw() - s.object.yaw()).abs(),
        );
        let mut cmds = if dp <= 0.5 * self.tol.pos_tol && dyaw <= 0.5 * self.tol.yaw_tol() {
            vec![Vec2::ZERO; s.agents.len()]
        } else {
            self.plan_commands(s, rng)
        };
        if self.tier.noise_std > 0.0 {
            for c in cmds.iter_mut() {
                *c += Vec2::new(rng.normal(), rng.normal()) * self.tier.noise_std;
            }
        }
        cmds.into_iter().map(|c| c.clamp_norm(self.world.max_speed)).collect()
    }

    fn plan_commands(&mut self, s: &JointState, rng: &mut Rng) -> Vec<Vec2> {
        let g = GAINS;
        let n = s.agents.len();
        let r = self.world.agent_radius;
        let obj = s.object;
        let yaw = obj.yaw();
        let slots = slots_for(obj.w, obj.h, is_stick(obj.h));
        let (l, mu) = (0.5 * obj.w, if is_stick(obj.h) { self.usable_friction() } else { 0.0 });
        let cols: Vec<[[f64; 3]; 2]> = slots.iter().map(|sl| Self::contact_columns(sl.point, sl.normal, l, mu)).collect();
        let mut plan = self.plan.take().unwrap_or_default();
        let (v, omega) = self.desired_twist(s, &mut plan);
        let b = self.wrench(s, v, omega);

        let second = (1.0 / self.world.dt).round().max(1.0) as usize;
        let misassign = plan.clock % second == 0
            && self.tier.misassign_prob > 0.0
            && rng.bernoulli(self.tier.misassign_prob);
        plan.clock += 1;
        if plan.slots.len() != n || plan.age >= g.replan_steps || misassign {
            let current = if plan.slots.len() == n {
                Some(self.score(s, &slots, &cols, b, &plan.slots))
            } else {
                None
            };
            let next = if misassign {
                let mut all: Vec<usize> = (0..slots.len()).collect();
                rng.shuffle(&mut all);
                all.truncate(n);
                Some(all)
            } else {
                let mut best: Option<(f64, Vec<usize>)> = None;
                for combo in combinations(slots.len(), n) {
                    let (assigned, _) = self.assign(s, &slots, &combo);
                    let (_, sc) = self.score(s, &slots, &cols, b, &assigned);
                    if best.as_ref().is_none_or(|(c, _)| sc < *c - 1e-12) {
                        best = Some((sc, assigned));
                    }
                }
                match (best, current) {
                    (Some((sc, a)), Some((cur_res, cur))) if sc < cur - g.switch_margin || cur_res > PUSH_RESIDUAL && sc < cur => {
                        Some(a)
                    }
                    (Some((_, a)), None) => Some(a),
                    _ => None,
                }
            };
            if let Some(next) = next {
                for (i, (&old, &new)) in plan.slots.iter().zip(&next).enumerate() {
                    if old != new {
                        plan.ready[i] = false;
                    }
                }
                plan.slots = next;
            }
            plan.age = 0;
        }
        plan.age += 1;

        if plan.ready.len() != n {
            plan.ready = vec![false; n];
        }
        // (actual contact point in the object frame, outward normal, depth,
        // lateral offset from the slot, lateral offset past the side margin)
        let mut geo = Vec::with_capacity(n);
        for (i, &j) in plan.slots.iter().enumerate() {
            let sl = slots[j];
            let t = sl.normal.perp();
            let local = (s.agents[i].p - obj.p).rotate(-yaw);
            let half_len = if sl.normal.x == 0.0 { 0.5 * obj.w } else { 0.5 * obj.h };
            let lat = local.dot(t);
            let lat_max = half_len - 0.5 * r;
            let contact = sl.point + t * (lat.clamp(-lat_max, lat_max) - sl.point.dot(t));
            let along = (local - sl.point).dot(sl.normal);
            let from_slot = lat - sl.point.dot(t);
            let in_band = along > r - 0.006 && along < r + g.standoff + 2.5 * g.arrive_tol;
            plan.ready[i] = if plan.ready[i] {
                in_band && lat.abs() < half_len
            } else {
                in_band && from_slot.abs() < g.arrive_tol
            };
            geo.push((contact, sl.normal, r - along, from_slot, lat - lat.clamp(-lat_max, lat_max)));
        }
        // agents already in place push as soon as they can realize most of
        // the wrench on their own
        let active: Vec<usize> = (0..n).filter(|&i| plan.ready[i]).collect();
        let sub: Vec<[f64; 3]> = active
            .iter()
            .flat_map(|&i| Self::contact_columns(geo[i].0, geo[i].1, l, mu))
            .collect();
        let (x, res) = nnls3(&sub, b);
        let bn = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let pushing = !active.is_empty() && res <= PUSH_RESIDUAL * bn;
        let mut forces = vec![(0.0, 0.0); n];
        if pushing {
            for (k, &i) in active.iter().enumerate() {
                let (xp, xm) = (x[2 * k], x[2 * k + 1]);
                forces[i] = (xp + xm, mu * (xp - xm));
            }
        }

        let mut cmds = Vec::with_capacity(n);
        for i in 0..n {
            let (contact, normal, depth, from_slot, overhang) = geo[i];
            let a = s.agents[i].p;
            let out = normal.rotate(yaw);
            let tangent = out.perp();
            let cmd = if !plan.ready[i] {
                let target = self.standoff_point(s, &slots[plan.slots[i]]);
                let (wp, remaining) = navigate(a, target, &obj, r + 0.5 * g.standoff, r + 2.5 * g.nav_margin);
                (wp - a).normalized_or_zero() * (g.nav_gain * remaining).min(self.world.max_speed)
            } else if pushing {
                let (f_n, f_t) = forces[i];
                let depth_des = if f_n > 1e-9 {
                    f_n / self.world.contact_stiffness
                } else {
                    -g.standoff
                };
                let point_v = v.rotate(yaw) + contact.rotate(yaw).perp() * omega;
                let slip = if f_n > 1e-9 { f_t / (0.5 * self.world.object_lin_damping) } else { 0.0 };
                point_v - out * (g.depth_gain * (depth_des - depth)) + tangent * (slip - g.hold_gain * overhang)
            } else {
                -out * (g.depth_gain * (-g.standoff - depth)) - tangent * (g.hold_gain * from_slot)
            };
            cmds.push(cmd);
        }
        self.plan = Some(plan);
        cmds
    }
}

impl Policy for ScriptedExpert {
    fn reset(&mut self) {
        self.plan = None;
    }

    fn act(&mut self, history: &[JointState], rng: &mut Rng) -> Result<Vec<Vec2>> {
        let s = history
            .last()
            .ok_or_else(|| Error::invalid("expert queried with empty history"))?;
        Ok(self.commands(s, rng))
    }
}

/// One expert decision for the current world-frame state.
pub fn expert_action(expert: &mut ScriptedExpert, s: &JointState, rng: &mut Rng) -> Vec<Vec2> {
    expert.commands(s, rng)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn segment_hits_box(a: Vec2, b: Vec2, hw: f64, hh: f64) -> bool {
    // Liang-Barsky clip against the open box
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-d.x, a.x + hw),
        (d.x, hw - a.x),
        (-d.y, a.y + hh),
        (d.y, hh - a.y),
    ] {
        if p.abs() < 1e-15 {
            if q <= 0.0 {
                return false;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    t1 - t0 > 1e-9
}

/// Next waypoint from `a` toward `goal` that keeps clear of the object, and
/// the remaining path length.
fn navigate(a: Vec2, goal: Vec2, obj: &crate::types::EntityState, clear: f64, corner: f64) -> (Vec2, f64) {
    let yaw = obj.yaw();
    let to_local = |p: Vec2| (p - obj.p).rotate(-yaw);
    let (hw, hh) = (0.5 * obj.w + clear, 0.5 * obj.h + clear);
    let (cw, ch) = (0.5 * obj.w + corner, 0.5 * obj.h + corner);
    let mut nodes = vec![to_local(a), to_local(goal)];
    nodes.extend([
        Vec2::new(cw, ch),
        Vec2::new(-cw, ch),
        Vec2::new(-cw, -ch),
        Vec2::new(cw, -ch),
    ]);
    if !segment_hits_box(nodes[0], nodes[1], hw, hh) {
        return (goal, (goal - a).norm());
    }
    // Dijkstra over six nodes
    let m = nodes.len();
    let mut dist = vec![f64::INFINITY; m];
    let mut prev = vec![usize::MAX; m];
    let mut done = vec![false; m];
    dist[0] = 0.0;
    for _ in 0..m {
        let Some(u) = (0..m).filter(|&i| !done[i]).min_by(|&x, &y| dist[x].total_cmp(&dist[y])) else {
            break;
        };
        if !dist[u].is_finite() {
            break;
        }
        done[u] = true;
        for v in 0..m {
            if done[v] || segment_hits_box(nodes[u], nodes[v], hw, hh) {
                continue;
            }
            let nd = dist[u] + (nodes[v] - nodes[u]).norm();
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
            }
        }
    }
    if !dist[1].is_finite() {
        // start is inside the clearance zone: step straight out
        let la = nodes[0];
        let out = if (hw - la.x.abs()) < (hh - la.y.abs()) {
            Vec2::new(la.x.signum() * cw, la.y)
        } else {
            Vec2::new(la.x, la.y.signum() * ch)
        };
        let w = out.rotate(yaw) + obj.p;
        return (w, (w - a).norm() + (goal - w).norm());
    }
    let mut v = 1;
    while prev[v] != 0 {
        v = prev[v];
    }
    (nodes[v].rotate(yaw) + obj.p, dist[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShape {
    pub shape: Shape,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub per_policy_count: usize,
    pub target_count: usize,
    pub tasks: Vec<TaskShape>,
    pub n_agents_list: Vec<usize>,
    pub tiers: Vec<ExpertTier>,
    /// Route data collection through the hierarchical controller.
    pub use_controller: bool,
    /// Attempts per requested target demonstration before giving up.
    pub target_attempt_factor: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            per_policy_count: 50,
            target_count: 10,
            tasks: vec![
                TaskShape { shape: Shape::Block, difficulty: Difficulty::Hard },
                TaskShape { shape: Shape::Block, difficulty: Difficulty::Easy },
                TaskShape { shape: Shape::Stick, difficulty: Difficulty::Hard },
                TaskShape { shape: Shape::Stick, difficulty: Difficulty::Easy },
            ],
            n_agents_list: vec![2],
            tiers: vec![ExpertTier::best(), ExpertTier::average(), ExpertTier::worst()],
            use_controller: false,
            target_attempt_factor: 20,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_policy_count == 0 || self.target_count == 0 {
            return Err(Error::Config("datagen counts must be >= 1".into()));
        }
        if self.tasks.is_empty() || self.n_agents_list.is_empty() || self.tiers.is_empty() {
            return Err(Error::Config("datagen task, agent and tier lists must be non-empty".into()));
        }
        if let Some(n) = self.n_agents_list.iter().find(|n| !(2..=4).contains(*n)) {
            return Err(Error::Config(format!("n_agents {n} not in {{2,3,4}}")));
        }
        for t in &self.tiers {
            t.validate()?;
        }
        Ok(())
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        let mut out = Vec::new();
        for &n in &self.n_agents_list {
            for t in &self.tasks {
                out.push(TaskKind::new(n, t.shape, t.difficulty));
            }
        }
        out
    }

    /// Prior demonstrations generated for each agent count.
    pub fn prior_count_per_n(&self) -> usize {
        self.per_policy_count * self.tiers.len() * self.tasks.len()
    }
}

/// Everything an episode generator needs besides the seed.
pub struct GenContext<'a> {
    pub world: &'a WorldConfig,
    pub tol: &'a SuccessTolerance,
    pub control: Option<&'a crate::control::ControlConfig>,
}

fn run_expert_episode(
    ctx: &GenContext<'_>,
    kind: TaskKind,
    tier: ExpertTier,
    seed: u64,
) -> Result<(Demonstration, bool)> {
    let mut task_rng = Rng::new(derive_seed(seed, &[0]));
    let task = sample_task(kind, ctx.world, &mut task_rng)?;
    let mut act_rng = Rng::new(derive_seed(seed, &[1]));
    let expert = ScriptedExpert::new(tier, ctx.world, ctx.tol);
    match ctx.control {
        Some(c) => {
            let mut ctrl = crate::control::HierarchicalController::new(expert, c.clone(), ctx.world);
            rollout(&mut ctrl, &task, ctx.world, ctx.tol, &mut act_rng)
        }
        None => {
            let mut expert = expert;
            rollout(&mut expert, &task, ctx.world, ctx.tol, &mut act_rng)
        }
    }
}

fn tagged(mut d: Demonstration, id: String, kind: TaskKind, tier: Tier, success: bool) -> Demonstration {
    d.id = id;
    d.with_meta("task", kind.label())
        .with_meta("n_agents", kind.n_agents.to_string())
        .with_meta("tier", tier.as_str())
        .with_meta("success", success.to_string())
}

/// Prior dataset for one agent count: `per_policy_count` episodes for every
/// (tier, task) pair. Failures are kept.
pub fn generate_prior(cfg: &GenConfig, n_agents: usize, seed: u64, ctx: &GenContext<'_>) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for t in &cfg.tasks {
        let kind = TaskKind::new(n_agents, t.shape, t.difficulty);
        for tier in &cfg.tiers {
            for i in 0..cfg.per_policy_count {
                jobs.push((kind, *tier, i));
            }
        }
    }
    use rayon::prelude::*;
    let demos = jobs
        .par_iter()
        .map(|&(kind, tier, i)| {
            let ep_seed = derive_seed(
                seed,
                &[label_hash("prior"), label_hash(&kind.key()), label_hash(tier.tier.as_str()), i as u64],
            );
            let (d, ok) = run_expert_episode(ctx, kind, tier, ep_seed)?;
            let id = format!("prior-{}-{}-{:04}", kind.key(), tier.tier.as_str(), i);
            Ok(tagged(d, id, kind, tier.tier, ok))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(DatasetRole::Prior, demos)
}

/// Target dataset for one task: successful best-tier episodes only.
pub fn generate_target(
    kind: TaskKind,
    count: usize,
    seed: u64,
    attempt_factor: usize,
    ctx: &GenContext<'_>,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("target count must be >= 1"));
    }
    let tier = ExpertTier::best();
    let budget = count * attempt_factor.max(1);
    let mut demos = Vec::with_capacity(count);
    for attempt in 0..budget {
        if demos.len() == count {
            break;
        }
        let ep_seed = derive_seed(seed, &[label_hash("target"), label_hash(&kind.key()), attempt as u64]);
        let (d, ok) = run_expert_episode(ctx, kind, tier, ep_seed)?;
        if ok {
            let id = format!("target-{}-{:04}", kind.key(), demos.len());
            demos.push(tagged(d, id, kind, Tier::Best, true));
        }
    }
    if demos.len() < count {
        return Err(Error::Config(format!(
            "only {} of {} successful target demonstrations for {} within {} attempts",
            demos.len(),
            count,
            kind.key(),
            budget
        )));
    }
    Dataset::new(DatasetRole::Target, demos)
}

/// Success counts keyed by `(task, tier)`, read from fixture meta tags.
pub fn success_table(ds: &Dataset) -> BTreeMap<(String, String), (usize, usize)> {
    let mut out: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for d in &ds.demos {
        let m = d.meta();
        let key = (
            m.get("task").cloned().unwrap_or_default(),
            m.get("tier").cloned().unwrap_or_default(),
        );
        let e = out.entry(key).or_default();
        e.1 += 1;
        if m.get("success").map(String::as_str) == Some("true") {
            e.0 += 1;
        }
    }
    out
}

pub fn object_dims_for(shape: Shape) -> (f64, f64) {
    object_dims(shape)
}

//! Hierarchical execution: a high-level policy proposes preferred velocities
//! every `highlevel_interval` steps, reciprocal velocity obstacles (ORCA
//! half-planes solved as a 2D linear program) make them collision-free, and a
//! differential-drive filter limits heading changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sim::{Policy, WorldConfig};
use crate::types::{wrap_angle, JointState, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Simulation steps between high-level policy queries.
    pub highlevel_interval: usize,
    pub robot_radius: f64,
    pub safety_margin: f64,
    pub time_horizon: f64,
    pub max_speed: f64,
    /// rad/s
    pub heading_rate_limit: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            highlevel_interval: 5,
            robot_radius: 0.015,
            safety_margin: 0.002,
            time_horizon: 1.0,
            max_speed: 0.1,
            heading_rate_limit: 2.0 * std::f64::consts::PI,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.highlevel_interval == 0 {
            return Err(Error::Config("control.highlevel_interval must be >= 1".into()));
        }
        for (name, v) in [
            ("robot_radius", self.robot_radius),
            ("safety_margin", self.safety_margin),
            ("time_horizon", self.time_horizon),
            ("max_speed", self.max_speed),
            ("heading_rate_limit", self.heading_rate_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("control.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub preferred: Vec2,
    pub adjusted: Vec2,
}

/// Half-plane `{v : det(direction, point - v) <= 0}`, i.e. valid velocities lie
/// to the left of the directed line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub point: Vec2,
    pub direction: Vec2,
}

impl Line {
    fn violation(&self, v: Vec2) -> f64 {
        self.direction.cross(self.point - v)
    }
}

const LP_EPS: f64 = 1e-12;

/// Optimizes along line `idx` subject to lines `0..idx` and the speed disc.
fn lp1(lines: &[Line], idx: usize, radius: f64, opt: Vec2, direction_opt: bool, result: &mut Vec2) -> bool {
    let line = lines[idx];
    let dot = line.point.dot(line.direction);
    let disc = dot * dot + radius * radius - line.point.norm_sq();
    if disc < 0.0 {
        return false;
    }
    let sq = disc.sqrt();
    let (mut t_left, mut t_right) = (-dot - sq, -dot + sq);
    for other in &lines[..idx] {
        let denom = line.direction.cross(other.direction);
        let numer = other.direction.cross(line.point - other.point);
        if denom.abs() <= LP_EPS {
            if numer < 0.0 {
                return false;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }
    *result = if direction_opt {
        if opt.dot(line.direction) > 0.0 {
            line.point + line.direction * t_right
        } else {
            line.point + line.direction * t_left
        }
    } else {
        let t = line.direction.dot(opt - line.point).clamp(t_left, t_right);
        line.point + line.direction * t
    };
    true
}

/// Returns the index of the first line that could not be satisfied, or
/// `lines.len()` on success.
fn lp2(lines: &[Line], radius: f64, opt: Vec2, direction_opt: bool, result: &mut Vec2) -> usize {
    *result = if direction_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized_or_zero() * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        if lines[i].violation(*result) > 0.0 {
            let keep = *result;
            if !lp1(lines, i, radius, opt, direction_opt, result) {
                *result = keep;
                return i;
            }
        }
    }
    lines.len()
}

/// Infeasible case: minimizes the largest violation of the soft lines while
/// keeping the first `hard` lines satisfied.
fn lp3(lines: &[Line], hard: usize, begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if lines[i].violation(*result) <= distance {
            continue;
        }
        let mut proj: Vec<Line> = lines[..hard].to_vec();
        for j in hard..i {
            let denom = lines[i].direction.cross(lines[j].direction);
            let point = if denom.abs() <= LP_EPS {
                if lines[i].direction.dot(lines[j].direction) > 0.0 {
                    continue;
                }
                (lines[i].point + lines[j].point) * 0.5
            } else {
                lines[i].point
                    + lines[i].direction
                        * (lines[j].direction.cross(lines[i].point - lines[j].point) / denom)
            };
            proj.push(Line {
                point,
                direction: (lines[j].direction - lines[i].direction).normalized_or_zero(),
            });
        }
        let keep = *result;
        let opt = Vec2::new(-lines[i].direction.y, lines[i].direction.x);
        if lp2(&proj, radius, opt, true, result) < proj.len() {
            *result = keep;
        }
        distance = lines[i].violation(*result);
    }
}

/// Reciprocal half-plane for agent `a` against neighbour `b`.
fn orca_line(
    pos_a: Vec2,
    vel_a: Vec2,
    pos_b: Vec2,
    vel_b: Vec2,
    combined_radius: f64,
    horizon: f64,
    dt: f64,
) -> Line {
    let rel_pos = pos_b - pos_a;
    let rel_vel = vel_a - vel_b;
    let dist_sq = rel_pos.norm_sq();
    let r_sq = combined_radius * combined_radius;
    let inv_h = 1.0 / horizon;
    let (direction, u);
    if dist_sq > r_sq {
        let w = rel_vel - rel_pos * inv_h;
        let w_len_sq = w.norm_sq();
        let dot1 = w.dot(rel_pos);
        if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
            // cut-off circle
            let w_len = w_len_sq.sqrt();
            let unit_w = w * (1.0 / w_len);
            direction = Vec2::new(unit_w.y, -unit_w.x);
            u = unit_w * (combined_radius * inv_h - w_len);
        } else {
            let leg = (dist_sq - r_sq).sqrt();
            // exact head-on ties deflect along the left leg
            if rel_pos.cross(w) >= 0.0 {
                direction = Vec2::new(
                    rel_pos.x * leg - rel_pos.y * combined_radius,
                    rel_pos.x * combined_radius + rel_pos.y * leg,
                ) * (1.0 / dist_sq);
            } else {
                direction = -Vec2::new(
                    rel_pos.x * leg + rel_pos.y * combined_radius,
                    -rel_pos.x * combined_radius + rel_pos.y * leg,
                ) * (1.0 / dist_sq);
            }
            u = direction * rel_vel.dot(direction) - rel_vel;
        }
    } else {
        // already overlapping: resolve within one step
        let inv_dt = 1.0 / dt;
        let w = rel_vel - rel_pos * inv_dt;
        let w_len = w.norm();
        let unit_w = if w_len > 0.0 { w * (1.0 / w_len) } else { Vec2::new(1.0, 0.0) };
        direction = Vec2::new(unit_w.y, -unit_w.x);
        u = unit_w * (combined_radius * inv_dt - w_len);
    }
    Line {
        point: vel_a + u * 0.5,
        direction,
    }
}

/// Arena wall half-planes for an agent close enough to reach a wall within
/// the horizon.
fn wall_lines(p: Vec2, limit: f64, horizon: f64, max_speed: f64) -> Vec<Line> {
    let reach = horizon * max_speed;
    let mut out = Vec::new();
    if limit - p.x < reach {
        out.push(Line {
            point: Vec2::new((limit - p.x) / horizon, 0.0),
            direction: Vec2::new(0.0, 1.0),
        });
    }
    if p.x + limit < reach {
        out.push(Line {
            point: Vec2::new((-limit - p.x) / horizon, 0.0),
            direction: Vec2::new(0.0, -1.0),
        });
    }
    if limit - p.y < reach {
        out.push(Line {
            point: Vec2::new(0.0, (limit - p.y) / horizon),
            direction: Vec2::new(-1.0, 0.0),
        });
    }
    if p.y + limit < reach {
        out.push(Line {
            point: Vec2::new(0.0, (-limit - p.y) / horizon),
            direction: Vec2::new(1.0, 0.0),
        });
    }
    out
}

/// Collision-avoiding velocities closest to the preferred ones.
///
/// `arena_limit`, when given, is the largest reachable |x| or |y| of an agent
/// center; walls then become hard constraints.
pub fn rvo_adjust(
    positions: &[Vec2],
    velocities: &[Vec2],
    preferred: &[Vec2],
    cfg: &ControlConfig,
    dt: f64,
    arena_limit: Option<f64>,
) -> Result<Vec<Vec2>> {
    let n = positions.len();
    if velocities.len() != n || preferred.len() != n {
        return Err(Error::invalid("rvo_adjust: input lengths differ"));
    }
    if positions.iter().chain(velocities).chain(preferred).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("rvo_adjust: non-finite input".into()));
    }
    let combined = 2.0 * (cfg.robot_radius + cfg.safety_margin);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut lines = match arena_limit {
            Some(l) => wall_lines(positions[i], l, cfg.time_horizon, cfg.max_speed),
            None => Vec::new(),
        };
        let hard = lines.len();
        for j in 0..n {
            if j != i {
                lines.push(orca_line(
                    positions[i],
                    velocities[i],
                    positions[j],
                    velocities[j],
                    combined,
                    cfg.time_horizon,
                    dt,
                ));
            }
        }
        let mut v = Vec2::ZERO;
        let fail = lp2(&lines, cfg.max_speed, preferred[i], false, &mut v);
        if fail < lines.len() {
            lp3(&lines, hard, fail, cfg.max_speed, &mut v);
        }
        out.push(v.clamp_norm(cfg.max_speed));
    }
    Ok(out)
}

/// Differential-drive post-filter: the heading turns by at most
/// `heading_rate_limit * dt` toward the command, and the robot drives along its
/// new heading at the commanded speed scaled by the cosine of the remaining
/// heading error (never negative). Returns `(velocity, new heading)`.
pub fn nonholonomic_filter(adjusted: Vec2, heading: f64, cfg: &ControlConfig, dt: f64) -> (Vec2, f64) {
    let speed = adjusted.norm();
    if speed < 1e-12 {
        return (Vec2::ZERO, heading);
    }
    let desired = adjusted.angle();
    let max_turn = cfg.heading_rate_limit * dt;
    let turn = wrap_angle(desired - heading).clamp(-max_turn, max_turn);
    let new_heading = wrap_angle(heading + turn);
    let residual = wrap_angle(desired - new_heading);
    if residual.abs() < 1e-15 {
        return (adjusted, new_heading);
    }
    let s = speed * residual.cos().max(0.0);
    (Vec2::from_angle(new_heading) * s, new_heading)
}

#[derive(Debug, Clone, Default)]
pub struct ControlCache {
    pub age: usize,
    pub preferred: Vec<Vec2>,
    pub headings: Vec<f64>,
    pub queries: usize,
    pub last: Vec<VelocityCommand>,
}

/// One control step: query the high-level policy when due, then avoid
/// collisions and apply the heading filter.
pub fn hierarchical_step(
    policy: &mut dyn Policy,
    history: &[JointState],
    cfg: &ControlConfig,
    world: &WorldConfig,
    cache: &mut ControlCache,
    rng: &mut Rng,
) -> Result<Vec<Vec2>> {
    let s = history
        .last()
        .ok_or_else(|| Error::invalid("hierarchical_step: empty history"))?;
    let n = s.n_agents();
    if cache.headings.len() != n {
        cache.headings = s.agents.iter().map(|a| a.yaw()).collect();
        cache.age = 0;
    }
    if cache.age % cfg.highlevel_interval == 0 || cache.preferred.len() != n {
        cache.preferred = policy.act(history, rng)?;
        cache.queries += 1;
        if cache.preferred.len() != n {
            return Err(Error::invalid(format!(
                "high-level policy returned {} velocities for {} agents",
                cache.preferred.len(),
                n
            )));
        }
    }
    cache.age += 1;
    let positions: Vec<Vec2> = s.agents.iter().map(|a| a.p).collect();
    let velocities: Vec<Vec2> = s.agents.iter().map(|a| a.v_prev).collect();
    let limit = world.arena_half_extent - world.agent_radius;
    let adjusted = rvo_adjust(&positions, &velocities, &cache.preferred, cfg, world.dt, Some(limit))?;
    let mut out = Vec::with_capacity(n);
    cache.last.clear();
    for i in 0..n {
        let (v, h) = nonholonomic_filter(adjusted[i], cache.headings[i], cfg, world.dt);
        cache.headings[i] = h;
        let v = v.clamp_norm(cfg.max_speed);
        cache.last.push(VelocityCommand {
            preferred: cache.preferred[i],
            adjusted: v,
        });
        out.push(v);
    }
    Ok(out)
}

/// Wraps a high-level policy into a [`Policy`] that runs [`hierarchical_step`].
pub struct HierarchicalController<P> {
    pub inner: P,
    pub cfg: ControlConfig,
    world: WorldConfig,
    pub cache: ControlCache,
    /// Per-step audit log of preferred and adjusted velocities.
    pub log: Vec<Vec<VelocityCommand>>,
}

impl<P: Policy> HierarchicalController<P> {
    pub fn new(inner: P, cfg: ControlConfig, world: &WorldConfig) -> Self {
        HierarchicalController {
            inner,
            cfg,
            world: world.clone(),
            cache: ControlCache::default(),
            log: Vec::new(),
        }
    }
}

impl<P: Policy> Policy for HierarchicalController<P> {
    fn reset(&mut self) {
        self.inner.reset();
        self.cache = ControlCache::default();
        self.log.clear();
    }

    fn act(&mut self, history: &[JointState], rng: &mut Rng) -> Result<Vec<Vec2>> {
        let out = hierarchical_step(&mut self.inner, history, &self.cfg, &self.world, &mut self.cache, rng)?;
        self.log.push(self.cache.last.clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{rollout, sample_task, Difficulty, Pose, Shape, SuccessTolerance, TaskKind};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn cfg() -> ControlConfig {
        ControlConfig::default()
    }

    #[test]
    fn defaults_validate() {
        let c = cfg();
        c.validate().unwrap();
        assert_eq!((c.highlevel_interval, c.time_horizon, c.safety_margin), (5, 1.0, 0.002));
        assert!(ControlConfig { highlevel_interval: 0, ..cfg() }.validate().is_err());
        assert!(ControlConfig { time_horizon: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn single_agent_keeps_clamped_preference() {
        let out = rvo_adjust(&[Vec2::ZERO], &[Vec2::ZERO], &[Vec2::new(0.05, 0.02)], &cfg(), 0.05, None).unwrap();
        assert_eq!(out[0], Vec2::new(0.05, 0.02));
        let out = rvo_adjust(&[Vec2::ZERO], &[Vec2::ZERO], &[Vec2::new(0.3, 0.4)], &cfg(), 0.05, None).unwrap();
        assert!((out[0] - Vec2::new(0.06, 0.08)).norm() < 1e-15);
    }

    #[test]
    fn far_apart_agents_are_untouched() {
        let pos = [Vec2::new(-0.4, 0.0), Vec2::new(0.4, 0.0)];
        let pref = [Vec2::new(0.1, 0.0), Vec2::new(-0.1, 0.0)];
        let out = rvo_adjust(&pos, &pref, &pref, &cfg(), 0.05, None).unwrap();
        assert_eq!(out, pref.to_vec());
    }

    #[test]
    fn head_on_pair_deflects_symmetrically() {
        let c = cfg();
        let d = 0.05;
        let v = 0.1;
        let pos = [Vec2::new(-d / 2.0, 0.0), Vec2::new(d / 2.0, 0.0)];
        let vel = [Vec2::new(v, 0.0), Vec2::new(-v, 0.0)];
        let out = rvo_adjust(&pos, &vel, &vel, &c, 0.05, None).unwrap();

        // Velocity-obstacle geometry: the relative velocity (2v, 0) lies on the
        // axis of the cone whose legs make angle asin(R/d) with it; the
        // tie-break picks the left leg, and each agent takes half of the
        // smallest change u that moves the relative velocity onto that leg.
        let r = 2.0 * (c.robot_radius + c.safety_margin);
        let alpha = (r / d).asin();
        let leg = Vec2::new(alpha.cos(), alpha.sin());
        let rel = Vec2::new(2.0 * v, 0.0);
        let u = leg * rel.dot(leg) - rel;
        let expect_a = vel[0] + u * 0.5;
        assert!((out[0] - expect_a).norm() < 1e-12, "{:?} vs {expect_a:?}", out[0]);
        assert!(out[0].y > 0.0);
        assert_eq!(out[1], -out[0]);
    }

    #[test]
    fn nan_input_is_rejected() {
        let r = rvo_adjust(&[Vec2::new(f64::NAN, 0.0)], &[Vec2::ZERO], &[Vec2::ZERO], &cfg(), 0.05, None);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(rvo_adjust(&[Vec2::ZERO], &[], &[Vec2::ZERO], &cfg(), 0.05, None).is_err());
    }

    #[test]
    fn filter_passes_aligned_commands() {
        let c = cfg();
        let (v, h) = nonholonomic_filter(Vec2::new(0.0, 0.07), std::f64::consts::FRAC_PI_2, &c, 0.05);
        assert_eq!(v, Vec2::new(0.0, 0.07));
        assert_eq!(h, std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn filter_stops_and_turns_for_reversed_commands() {
        let c = cfg();
        let dt = 0.05;
        let (v, h) = nonholonomic_filter(Vec2::new(-0.1, 0.0), 0.0, &c, dt);
        assert!(v.norm() < 1e-12, "{v:?}");
        assert!((h.abs() - c.heading_rate_limit * dt).abs() < 1e-12);
    }

    #[test]
    fn filter_converges_on_quarter_turn() {
        let c = ControlConfig {
            heading_rate_limit: 4.0,
            ..cfg()
        };
        let dt = 0.05;
        let bound = ((std::f64::consts::FRAC_PI_2) / (c.heading_rate_limit * dt)).ceil() as usize;
        let cmd = Vec2::new(0.0, 0.1);
        let mut h = 0.0;
        let mut steps = 0;
        loop {
            let (v, nh) = nonholonomic_filter(cmd, h, &c, dt);
            h = nh;
            steps += 1;
            if (v - cmd).norm() < 1e-12 {
                break;
            }
            assert!(steps <= bound, "not converged after {steps}");
        }
        assert!(steps <= bound);
    }

    struct Counting {
        calls: usize,
        goals: Vec<Vec2>,
    }

    impl Policy for Counting {
        fn act(&mut self, history: &[JointState], _rng: &mut Rng) -> Result<Vec<Vec2>> {
            self.calls += 1;
            let s = history.last().unwrap();
            Ok(s.agents
                .iter()
                .zip(&self.goals)
                .map(|(a, g)| (*g - a.p) * 2.0)
                .collect())
        }
    }

    fn run_counting(m: usize, steps: usize, seed: u64) -> (usize, crate::types::Demonstration) {
        let world = WorldConfig {
            max_steps: steps,
            ..WorldConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut task = sample_task(TaskKind::new(3, Shape::Stick, Difficulty::Easy), &world, &mut rng).unwrap();
        task.goal = Pose::new(0.4, 0.4, 0.0); // unreachable within the horizon
        let goals = task.agent_inits.iter().map(|p| -p.p).collect();
        let ctrl_cfg = ControlConfig {
            highlevel_interval: m,
            ..cfg()
        };
        let mut ctrl = HierarchicalController::new(Counting { calls: 0, goals }, ctrl_cfg, &world);
        let (d, _) = rollout(&mut ctrl, &task, &world, &SuccessTolerance::default(), &mut rng).unwrap();
        assert_eq!(ctrl.log.len(), steps);
        assert!(ctrl.log.iter().flatten().all(|c| c.adjusted.norm() <= world.max_speed + 1e-12));
        (ctrl.inner.calls, d)
    }

    #[test]
    fn query_schedule_follows_interval() {
        assert_eq!(run_counting(1, 40, 1).0, 40);
        assert_eq!(run_counting(5, 40, 1).0, 8);
        assert_eq!(run_counting(5, 43, 1).0, 9);
    }

    #[test]
    fn controlled_rollouts_are_deterministic() {
        assert_eq!(run_counting(5, 60, 2).1, run_counting(5, 60, 2).1);
    }

    #[test]
    fn controlled_rollouts_stay_collision_free() {
        let world = WorldConfig {
            max_steps: 200,
            ..WorldConfig::default()
        };
        let c = cfg();
        let mut worst = f64::INFINITY;
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let n = 2 + (seed % 3) as usize;
            let mut task = sample_task(TaskKind::new(n, Shape::Block, Difficulty::Easy), &world, &mut rng).unwrap();
            task.goal = Pose::new(0.4, 0.4, 0.0);
            // agents head for each other's mirrored start, crossing the arena
            let goals: Vec<Vec2> = task.agent_inits.iter().map(|p| -p.p).collect();
            let mut ctrl = HierarchicalController::new(Counting { calls: 0, goals }, c.clone(), &world);
            let (d, _) = rollout(&mut ctrl, &task, &world, &SuccessTolerance::default(), &mut rng).unwrap();
            for r in &d.steps {
                let a = &r.state.agents;
                for i in 0..a.len() {
                    for j in i + 1..a.len() {
                        worst = worst.min((a[i].p - a[j].p).norm());
                    }
                }
                assert!(r.actions.iter().all(|v| v.norm() <= world.max_speed + 1e-9));
            }
        }
        assert!(worst >= 2.0 * c.robot_radius - 1e-6, "min distance {worst}");
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>)> {
        proptest::collection::vec(
            (-0.3f64..0.3, -0.3f64..0.3, -0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1),
            1..5,
        )
        .prop_filter("non-penetrating", |v| {
            (0..v.len()).all(|i| {
                (i + 1..v.len()).all(|j| {
                    let d = Vec2::new(v[i].0 - v[j].0, v[i].1 - v[j].1).norm();
                    d > 0.04
                })
            })
        })
        .prop_map(|v| {
            (
                v.iter().map(|t| Vec2::new(t.0, t.1)).collect(),
                v.iter().map(|t| Vec2::new(t.2, t.3)).collect(),
                v.iter().map(|t| Vec2::new(t.4, t.5)).collect(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn rvo_is_pure_capped_and_point_symmetric((p, v, pref) in arb_scene()) {
            let c = cfg();
            let a = rvo_adjust(&p, &v, &pref, &c, 0.05, None).unwrap();
            let b = rvo_adjust(&p, &v, &pref, &c, 0.05, None).unwrap();
            prop_assert_eq!(&a, &b);
            for x in &a {
                prop_assert!(x.norm() <= c.max_speed + 1e-12);
            }
            let neg = |xs: &[Vec2]| xs.iter().map(|x| -*x).collect::<Vec<_>>();
            let m = rvo_adjust(&neg(&p), &neg(&v), &neg(&pref), &c, 0.05, None).unwrap();
            for (x, y) in a.iter().zip(&m) {
                prop_assert!((*x + *y).norm() < 1e-12, "{:?} {:?}", x, y);
            }
        }
    }
}

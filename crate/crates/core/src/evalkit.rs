//! Success-rate evaluation, results tables, PCA of skill vectors and plot
//! data files.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlConfig, HierarchicalController};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::rng::{derive_seed, label_hash, Rng};
use crate::sim::{rollout, sample_task, Difficulty, Policy, Shape, SuccessTolerance, TaskKind, WorldConfig};

/// Standard error of the mean of a Bernoulli rate.
pub fn sem(p: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("sem: n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("sem: rate {p} outside [0, 1]")));
    }
    Ok((p * (1.0 - p) / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: TaskKind,
    pub variant: String,
    pub successes: usize,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub sem: f64,
}

impl EvalRow {
    pub fn new(task: TaskKind, variant: impl Into<String>, successes: usize, n_episodes: usize) -> Result<Self> {
        if successes > n_episodes {
            return Err(Error::invalid("more successes than episodes"));
        }
        let rate = if n_episodes == 0 { 0.0 } else { successes as f64 / n_episodes as f64 };
        Ok(EvalRow {
            task,
            variant: variant.into(),
            successes,
            n_episodes,
            success_rate: rate,
            sem: sem(rate, n_episodes)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Pooled row over every task of one variant: episodes are summed, not
/// rates averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub successes: usize,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub sem: f64,
}

impl EvalReport {
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    /// Tasks in table order: agent count, then block before stick, hard
    /// before easy.
    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut t: Vec<TaskKind> = self.rows.iter().map(|r| r.task).collect();
        t.sort_by_key(table_order);
        t.dedup();
        t
    }

    pub fn get(&self, task: TaskKind, variant: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.task == task && r.variant == variant)
    }

    pub fn pooled(&self, variant: &str) -> Result<Pooled> {
        let (s, n) = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .fold((0, 0), |(s, n), r| (s + r.successes, n + r.n_episodes));
        if n == 0 {
            return Err(Error::invalid(format!("no episodes for variant {variant}")));
        }
        let rate = s as f64 / n as f64;
        Ok(Pooled {
            successes: s,
            n_episodes: n,
            success_rate: rate,
            sem: sem(rate, n)?,
        })
    }

    /// Wide CSV: one row per task, `rate`/`sem` columns per variant, and a
    /// final `ALL` row with the pooled values.
    pub fn table_csv(&self) -> Result<String> {
        let variants = self.variants();
        let mut s = String::from("n_agents,object,level");
        for v in &variants {
            s.push_str(&format!(",{v}_rate,{v}_sem,{v}_n"));
        }
        s.push('\n');
        for t in self.tasks() {
            s.push_str(&format!("{},{},{}", t.n_agents, t.shape, t.difficulty));
            for v in &variants {
                match self.get(t, v) {
                    Some(r) => s.push_str(&format!(",{:.6},{:.6},{}", r.success_rate, r.sem, r.n_episodes)),
                    None => s.push_str(",,,"),
                }
            }
            s.push('\n');
        }
        s.push_str("ALL,,");
        for v in &variants {
            let p = self.pooled(v)?;
            s.push_str(&format!(",{:.6},{:.6},{}", p.success_rate, p.sem, p.n_episodes));
        }
        s.push('\n');
        Ok(s)
    }

    /// Markdown rendering in percent, `rate±sem` with one decimal.
    pub fn table_markdown(&self) -> Result<String> {
        let variants = self.variants();
        let pct = |rate: f64, sem: f64| format!("{:.1}±{:.1}", 100.0 * rate, 100.0 * sem);
        let mut s = String::from("| N | object | level |");
        for v in &variants {
            s.push_str(&format!(" {v} (%) |"));
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(variants.len()));
        s.push('\n');
        for t in self.tasks() {
            s.push_str(&format!("| {} | {} | {} |", t.n_agents, t.shape, t.difficulty));
            for v in &variants {
                let cell = self.get(t, v).map(|r| pct(r.success_rate, r.sem)).unwrap_or_default();
                s.push_str(&format!(" {cell} |"));
            }
            s.push('\n');
        }
        s.push_str("| ALL | | |");
        for v in &variants {
            let p = self.pooled(v)?;
            s.push_str(&format!(" {} |", pct(p.success_rate, p.sem)));
        }
        s.push('\n');
        Ok(s)
    }

    /// Writes `{stem}.csv`, `{stem}.md` and `{stem}.json` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.table_csv()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.md")), self.table_markdown()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

fn table_order(t: &TaskKind) -> (usize, u8, u8) {
    let shape = match t.shape {
        Shape::Block => 0,
        Shape::Stick => 1,
    };
    let level = match t.difficulty {
        Difficulty::Hard => 0,
        Difficulty::Easy => 1,
    };
    (t.n_agents, shape, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub world: WorldConfig,
    pub tol: SuccessTolerance,
    pub control: ControlConfig,
}

/// Seed of evaluation episode `episode` of `task`. The `"eval"` label keeps
/// these streams apart from data generation.
pub fn eval_seed(seed: u64, task: TaskKind, episode: usize) -> u64 {
    derive_seed(seed, &[label_hash("eval"), label_hash(&task.key()), episode as u64])
}

/// Runs `cfg.n_episodes` seeded episodes of `task`, each with a fresh policy
/// from `make` under the hierarchical controller. Episode seeds depend only
/// on `cfg.seed`, the task and the episode index, so every variant sees the
/// same environments.
pub fn evaluate<P, F>(make: F, task: TaskKind, variant: &str, cfg: &EvalConfig) -> Result<(EvalRow, Vec<bool>)>
where
    P: Policy,
    F: Fn() -> P + Sync,
{
    if cfg.n_episodes == 0 {
        return Err(Error::invalid("evaluate: n_episodes must be >= 1"));
    }
    let outcomes = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|ep| {
            let s = eval_seed(cfg.seed, task, ep);
            let spec = sample_task(task, &cfg.world, &mut Rng::new(derive_seed(s, &[0])))?;
            let mut ctrl = HierarchicalController::new(make(), cfg.control.clone(), &cfg.world);
            let (_, ok) = rollout(&mut ctrl, &spec, &cfg.world, &cfg.tol, &mut Rng::new(derive_seed(s, &[1])))?;
            Ok(ok)
        })
        .collect::<Result<Vec<bool>>>()?;
    let successes = outcomes.iter().filter(|o| **o).count();
    Ok((EvalRow::new(task, variant, successes, cfg.n_episodes)?, outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// One row of `k` coordinates per input vector.
    pub coords: Vec<Vec<f64>>,
}

/// PCA by eigendecomposition of the mean-centered covariance. Each component
/// is signed so that its largest-magnitude element is positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Projection2D> {
    let n = vectors.len();
    if k == 0 || n < k + 1 {
        return Err(Error::invalid(format!("pca: need at least {} vectors, got {n}", k + 1)));
    }
    let d = vectors[0].len();
    if d < k || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("pca: vectors must share a width of at least k"));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() + 1e-12 { (i, *x) } else { best });
        if lead.1 < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        ratios.push(if total > 0.0 { eig.eigenvalues[c].max(0.0) / total } else { 0.0 });
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().zip(centered.row(i).iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Projection2D {
        mean,
        components,
        explained_variance_ratio: ratios,
        coords,
    })
}

/// `index,label,pc1..pck` rows, one per projected vector.
pub fn projection_csv(p: &Projection2D, labels: &[String]) -> Result<String> {
    if labels.len() != p.coords.len() {
        return Err(Error::invalid("one label per projected vector required"));
    }
    let k = p.components.len();
    let mut s = String::from("index,label");
    for i in 1..=k {
        s.push_str(&format!(",pc{i}"));
    }
    s.push('\n');
    for (i, (c, l)) in p.coords.iter().zip(labels).enumerate() {
        s.push_str(&format!("{i},{l}"));
        for x in c {
            s.push_str(&format!(",{x:.12e}"));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Per-variant pooled rates keyed by variant name.
pub fn pooled_summary(report: &EvalReport) -> Result<BTreeMap<String, Pooled>> {
    report.variants().into_iter().map(|v| Ok((v.clone(), report.pooled(&v)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{ExpertTier, ScriptedExpert};
    use crate::rng::Rng;
    use crate::sim::ZeroPolicy;
    use crate::types::{JointState, Vec2};
    use proptest::prelude::*;

    fn round1(x: f64) -> f64 {
        (1000.0 * x).round() / 10.0
    }

    #[test]
    fn sem_reproduces_published_error_bars() {
        assert_eq!(round1(sem(0.414, 70).unwrap()), 5.9);
        assert_eq!(round1(sem(0.569, 840).unwrap()), 1.7);
        assert_eq!(round1(sem(0.124, 840).unwrap()), 1.1);
        assert_eq!(sem(0.0, 9).unwrap(), 0.0);
        assert!(sem(0.5, 0).is_err());
        assert!(sem(1.5, 3).is_err());
    }

    fn all_tasks() -> Vec<TaskKind> {
        let mut out = Vec::new();
        for n in [4, 2, 3] {
            for shape in [Shape::Stick, Shape::Block] {
                for d in [Difficulty::Easy, Difficulty::Hard] {
                    out.push(TaskKind::new(n, shape, d));
                }
            }
        }
        out
    }

    #[test]
    fn table_has_task_rows_and_pooled_all_row() {
        let mut report = EvalReport::default();
        for (i, t) in all_tasks().into_iter().enumerate() {
            report.rows.push(EvalRow::new(t, "ours", 20 + i, 70).unwrap());
            report.rows.push(EvalRow::new(t, "target_only", i, 70).unwrap());
        }
        let csv = report.table_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 12 + 1);
        assert!(lines[1].starts_with("2,block,hard,"));
        assert!(lines[4].starts_with("2,stick,easy,"));
        assert!(lines[13].starts_with("ALL,,,"));
        let pooled = report.pooled("ours").unwrap();
        let expect: usize = (0..12).map(|i| 20 + i).sum();
        assert_eq!((pooled.successes, pooled.n_episodes), (expect, 840));
        assert_eq!(pooled.sem, sem(expect as f64 / 840.0, 840).unwrap());
        let md = report.table_markdown().unwrap();
        assert_eq!(md.lines().count(), 2 + 12 + 1);
        assert_eq!(report.table_csv().unwrap(), csv);
        let dir = tempfile::tempdir().unwrap();
        report.emit(dir.path(), "table").unwrap();
        let first = std::fs::read(dir.path().join("table.csv")).unwrap();
        report.emit(dir.path(), "table").unwrap();
        assert_eq!(std::fs::read(dir.path().join("table.csv")).unwrap(), first);
    }

    fn quick_cfg(n: usize) -> EvalConfig {
        EvalConfig {
            n_episodes: n,
            seed: 4,
            world: WorldConfig::default(),
            tol: SuccessTolerance::default(),
            control: ControlConfig::default(),
        }
    }

    #[test]
    fn expert_beats_zero_policy_and_eval_is_deterministic() {
        let cfg = quick_cfg(8);
        let task = TaskKind::new(2, Shape::Block, Difficulty::Easy);
        let world = cfg.world.clone();
        let tol = cfg.tol;
        let make = || ScriptedExpert::new(ExpertTier::best(), &world, &tol);
        let (expert, outcomes) = evaluate(make, task, "expert", &cfg).unwrap();
        let (zero, _) = evaluate(|| ZeroPolicy, task, "zero", &cfg).unwrap();
        assert!(expert.success_rate > zero.success_rate, "{expert:?} vs {zero:?}");
        let (again, outcomes2) = evaluate(make, task, "expert", &cfg).unwrap();
        assert_eq!((again, outcomes2), (expert, outcomes));
        assert!(evaluate(|| ZeroPolicy, task, "zero", &quick_cfg(0)).is_err());
    }

    #[test]
    fn eval_seeds_are_shared_across_variants_and_distinct_per_task() {
        let a = TaskKind::new(2, Shape::Block, Difficulty::Easy);
        let b = TaskKind::new(2, Shape::Stick, Difficulty::Easy);
        assert_eq!(eval_seed(1, a, 3), eval_seed(1, a, 3));
        assert_ne!(eval_seed(1, a, 3), eval_seed(1, b, 3));
        assert_ne!(eval_seed(1, a, 3), eval_seed(1, a, 4));
        // the policy sees the same initial states in every variant
        let seen = |_: &str| {
            let firsts = std::sync::Mutex::new(Vec::new());
            let make = || {
                |h: &[JointState], _: &mut Rng| {
                    if h.len() == 1 {
                        firsts.lock().unwrap().push(format!("{:?}", h[0]));
                    }
                    Ok(vec![Vec2::ZERO; h[0].n_agents()])
                }
            };
            let cfg = EvalConfig {
                world: WorldConfig {
                    max_steps: 2,
                    ..WorldConfig::default()
                },
                ..quick_cfg(3)
            };
            evaluate(make, a, "x", &cfg).unwrap();
            let mut v = firsts.into_inner().unwrap();
            v.sort();
            v
        };
        assert_eq!(seen("ours"), seen("target_only"));
    }

    /// Eigenvalues of a symmetric 3×3 matrix by the trigonometric closed
    /// form, descending.
    fn cardano(a: [[f64; 3]; 3]) -> [f64; 3] {
        let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [l1, 3.0 * q - l1 - l3, l3]
    }

    /// Eigenvector of `a` for `l`: the largest cross product of two rows of
    /// `a − l I`.
    fn eigvec(a: [[f64; 3]; 3], l: f64) -> [f64; 3] {
        let mut m = a;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] -= l;
        }
        let cross = |u: [f64; 3], v: [f64; 3]| [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let cands = [cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])];
        let best = cands
            .iter()
            .copied()
            .max_by(|x, y| {
                let nx: f64 = x.iter().map(|v| v * v).sum();
                let ny: f64 = y.iter().map(|v| v * v).sum();
                nx.partial_cmp(&ny).unwrap()
            })
            .unwrap();
        let n = best.iter().map(|v| v * v).sum::<f64>().sqrt();
        [best[0] / n, best[1] / n, best[2] / n]
    }

    #[test]
    fn pca_matches_closed_form_3x3() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let scales = [3.0, 1.5, 0.4];
            let pts: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    let raw: Vec<f64> = scales.iter().map(|s| s * rng.normal()).collect();
                    vec![raw[0] + 0.3 * raw[1], raw[1] - 0.2 * raw[2], raw[2] + 0.5 * raw[0]]
                })
                .collect();
            let proj = pca_project(&pts, 2).unwrap();
            let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 50.0).collect();
            let mut cov = [[0.0; 3]; 3];
            for p in &pts {
                for i in 0..3 {
                    for j in 0..3 {
                        cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / 49.0;
                    }
                }
            }
            let l = cardano(cov);
            let total = l[0] + l[1] + l[2];
            for c in 0..2 {
                let v = eigvec(cov, l[c]);
                let dot: f64 = v.iter().zip(&proj.components[c]).map(|(a, b)| a * b).sum();
                assert!((dot.abs() - 1.0).abs() < 1e-9, "component {c}: |dot| = {}", dot.abs());
                assert!((proj.explained_variance_ratio[c] - l[c] / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_edge_cases() {
        let line: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&line, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
        assert!(pca_project(&line[..2], 2).is_err());
        let flat = vec![vec![1.0, 1.0]; 4];
        assert_eq!(pca_project(&flat, 1).unwrap().explained_variance_ratio, vec![0.0]);
        let csv = projection_csv(&p, &vec!["a".to_string(); 6]).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pca_invariants(seed in any::<u64>(), n in 5usize..30, d in 2usize..6) {
            let mut rng = Rng::new(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|j| (j + 1) as f64 * rng.normal()).collect()).collect();
            let p = pca_project(&pts, 2).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - expect).abs() < 1e-9);
                }
                let lead = p.components[i].iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                prop_assert!(lead > 0.0);
            }
            prop_assert!(p.explained_variance_ratio[0] >= p.explained_variance_ratio[1]);
            // reconstruction error does not grow with k
            let err = |k: usize| {
                let q = pca_project(&pts, k).unwrap();
                pts.iter().zip(&q.coords).map(|(x, c)| {
                    (0..d).map(|j| {
                        let r = q.mean[j] + (0..k).map(|m| c[m] * q.components[m][j]).sum::<f64>();
                        (x[j] - r).powi(2)
                    }).sum::<f64>()
                }).sum::<f64>()
            };
            let (e1, e2) = (err(1), err(2));
            prop_assert!(e2 <= e1 + 1e-9);
            // shuffling the inputs leaves the components unchanged
            let mut shuffled = pts.clone();
            rng.shuffle(&mut shuffled);
            let s = pca_project(&shuffled, 2).unwrap();
            if p.explained_variance_ratio[0] - p.explained_variance_ratio[1] > 1e-3 {
                for (a, b) in s.components[0].iter().zip(&p.components[0]) {
                    prop_assert!((a - b).abs() < 1e-7);
                }
            }
        }
    }
}

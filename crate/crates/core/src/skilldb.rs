//! Coordination skill database: skill sequences of prior demonstrations,
//! DTW / FastDTW sequence distances, and top-K retrieval.
//!
//! On disk a database is a directory:
//!
//! - `manifest.json`: schema version, encoder fingerprint, entry list
//!   (`demo_id`, sequence length, line in `demos.jsonl`) and SHA-256 of the
//!   two data files.
//! - `skills.bin`: every skill vector of every entry in entry order, as
//!   little-endian `f64`, `dim` values per vector.
//! - `demos.jsonl`: the demonstrations, one per line.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::SkillModel;
use crate::error::{Error, Result};
use crate::io_util::{sha256_hex, write_atomic};
use crate::types::{Dataset, DatasetRole, Demonstration, MetaGuard};

/// Per-step skill vectors of one demonstration.
pub type SkillSequence = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 − cos(a, b)`.
    Cosine,
    Euclidean,
}

/// `1 − cos(z1, z2)`, clamped to `[0, 2]`.
pub fn cosine_distance(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Dimension {
            op: "cosine_distance",
            lhs: vec![z1.len()],
            rhs: vec![z2.len()],
        });
    }
    let n1 = norm(z1);
    let n2 = norm(z2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate("cosine distance of a zero vector".into()));
    }
    if z1 == z2 {
        return Ok(0.0);
    }
    Ok(cos_dist(dot(z1, z2), n1, n2))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cos_dist(dot: f64, n1: f64, n2: f64) -> f64 {
    (1.0 - dot / (n1 * n2)).clamp(0.0, 2.0)
}

/// A sequence prepared for a metric: flat data plus cached norms.
#[derive(Debug, Clone)]
pub struct Seq {
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl Seq {
    pub fn new(rows: &[Vec<f64>], metric: Metric) -> Result<Self> {
        let dim = rows.first().ok_or_else(|| Error::invalid("empty sequence"))?.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("sequence rows must share a positive width"));
        }
        let data: Vec<f64> = rows.concat();
        let s = Seq::from_flat(dim, data);
        if metric == Metric::Cosine && s.norms.iter().any(|n| *n == 0.0) {
            return Err(Error::Degenerate("cosine distance of a zero vector".into()));
        }
        Ok(s)
    }

    fn from_flat(dim: usize, data: Vec<f64>) -> Self {
        let norms = data.chunks(dim).map(norm).collect();
        Seq { dim, data, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Pairwise averages; a trailing odd element is dropped.
    fn halve(&self) -> Seq {
        let n = self.len() / 2;
        let mut data = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            let (a, b) = (self.row(2 * i), self.row(2 * i + 1));
            data.extend(a.iter().zip(b).map(|(x, y)| (x + y) / 2.0));
        }
        Seq::from_flat(self.dim, data)
    }
}

fn element_cost(a: &Seq, i: usize, b: &Seq, j: usize, metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => {
            let (na, nb) = (a.norms[i], b.norms[j]);
            if na == 0.0 || nb == 0.0 {
                // only reachable for averaged opposite vectors at coarse levels
                return 1.0;
            }
            // n·n can miss dot(z, z) by an ulp; identical rows are exactly 0
            if a.row(i) == b.row(j) {
                return 0.0;
            }
            cos_dist(dot(a.row(i), b.row(j)), na, nb)
        }
        Metric::Euclidean => a
            .row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Element distance used by DTW, for callers and test oracles.
pub fn metric_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    let sa = Seq::new(&[a.to_vec()], metric)?;
    let sb = Seq::new(&[b.to_vec()], metric)?;
    if sa.dim != sb.dim {
        return Err(Error::Dimension {
            op: "metric_distance",
            lhs: vec![sa.dim],
            rhs: vec![sb.dim],
        });
    }
    Ok(element_cost(&sa, 0, &sb, 0, metric))
}

/// Inclusive column range per row.
type Window = Vec<(usize, usize)>;

/// Windowed DTW with steps (1,0), (0,1), (1,1), anchored at both corners.
/// Returns the cost and the optimal path.
fn dtw_window(a: &Seq, b: &Seq, window: &Window, metric: Metric) -> (f64, Vec<(usize, usize)>) {
    let n = a.len();
    let mut offs = Vec::with_capacity(n + 1);
    let mut total = 0;
    for &(lo, hi) in window {
        offs.push(total);
        total += hi + 1 - lo;
    }
    offs.push(total);
    let mut cost = vec![f64::INFINITY; total];
    let get = |cost: &[f64], i: usize, j: usize| -> f64 {
        let (lo, hi) = window[i];
        if j < lo || j > hi {
            f64::INFINITY
        } else {
            cost[offs[i] + j - lo]
        }
    };
    for i in 0..n {
        let (lo, hi) = window[i];
        for j in lo..=hi {
            let m = element_cost(a, i, b, j, metric);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = get(&cost, i - 1, j - 1);
                }
                if i > 0 {
                    best = best.min(get(&cost, i - 1, j));
                }
                if j > 0 {
                    best = best.min(cost_at(&cost, &offs, window, i, j - 1));
                }
                best
            };
            cost[offs[i] + j - lo] = best + m;
        }
    }
    let m = b.len();
    let final_cost = get(&cost, n - 1, m - 1);
    // backtrack, preferring the diagonal on ties
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let cands = [
            (i > 0 && j > 0, i.wrapping_sub(1), j.wrapping_sub(1)),
            (i > 0, i.wrapping_sub(1), j),
            (j > 0, i, j.wrapping_sub(1)),
        ];
        let mut best = (f64::INFINITY, i, j);
        for (ok, ci, cj) in cands {
            if ok {
                let c = get(&cost, ci, cj);
                if c < best.0 {
                    best = (c, ci, cj);
                }
            }
        }
        i = best.1;
        j = best.2;
        path.push((i, j));
    }
    path.reverse();
    (final_cost, path)
}

fn cost_at(cost: &[f64], offs: &[usize], window: &Window, i: usize, j: usize) -> f64 {
    let (lo, hi) = window[i];
    if j < lo || j > hi {
        f64::INFINITY
    } else {
        cost[offs[i] + j - lo]
    }
}

fn full_window(n: usize, m: usize) -> Window {
    vec![(0, m - 1); n]
}

/// Exact DTW cost between two prepared sequences.
pub fn dtw_seq(a: &Seq, b: &Seq, metric: Metric) -> Result<f64> {
    check_pair(a, b)?;
    Ok(dtw_window(a, b, &full_window(a.len(), b.len()), metric).0)
}

fn check_pair(a: &Seq, b: &Seq) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw of an empty sequence"));
    }
    if a.dim != b.dim {
        return Err(Error::Dimension {
            op: "dtw",
            lhs: vec![a.len(), a.dim],
            rhs: vec![b.len(), b.dim],
        });
    }
    Ok(())
}

/// Exact DTW: minimum over monotone alignment paths of the summed element
/// distances.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>], metric: Metric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw of an empty sequence"));
    }
    dtw_seq(&Seq::new(a, metric)?, &Seq::new(b, metric)?, metric)
}

/// FastDTW (coarsen, solve, project the path, refine within `radius`).
pub fn fastdtw(a: &[Vec<f64>], b: &[Vec<f64>], radius: usize, metric: Metric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw of an empty sequence"));
    }
    fastdtw_seq(&Seq::new(a, metric)?, &Seq::new(b, metric)?, radius, metric)
}

pub fn fastdtw_seq(a: &Seq, b: &Seq, radius: usize, metric: Metric) -> Result<f64> {
    check_pair(a, b)?;
    Ok(fastdtw_rec(a, b, radius, metric).0)
}

fn fastdtw_rec(a: &Seq, b: &Seq, radius: usize, metric: Metric) -> (f64, Vec<(usize, usize)>) {
    let min_size = radius + 2;
    if a.len() < min_size || b.len() < min_size {
        return dtw_window(a, b, &full_window(a.len(), b.len()), metric);
    }
    let (_, coarse) = fastdtw_rec(&a.halve(), &b.halve(), radius, metric);
    let window = expand_window(&coarse, a.len(), b.len(), radius);
    dtw_window(a, b, &window, metric)
}

/// Projects a coarse path to full resolution, widened by `radius` coarse
/// cells, and repairs it into a connected band from (0,0) to (n−1,m−1).
fn expand_window(path: &[(usize, usize)], n: usize, m: usize, radius: usize) -> Window {
    let r = radius as isize;
    let mut lo = vec![usize::MAX; n];
    let mut hi = vec![0usize; n];
    for &(ci, cj) in path {
        for di in -r..=r {
            for dj in -r..=r {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 {
                    continue;
                }
                for (fi, fj) in [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)] {
                    let (fi, fj) = (fi as usize, fj as usize);
                    if fi < n && fj < m {
                        lo[fi] = lo[fi].min(fj);
                        hi[fi] = hi[fi].max(fj);
                    }
                }
            }
        }
    }
    // rows the projection missed (odd trailing rows) inherit their neighbour
    for i in 0..n {
        if lo[i] == usize::MAX {
            if i > 0 {
                lo[i] = lo[i - 1];
                hi[i] = hi[i - 1];
            } else {
                lo[i] = 0;
                hi[i] = 0;
            }
        }
    }
    lo[0] = 0;
    hi[n - 1] = m - 1;
    for i in 1..n {
        hi[i] = hi[i].max(hi[i - 1]);
    }
    for i in (0..n - 1).rev() {
        lo[i] = lo[i].min(lo[i + 1]);
    }
    for i in 1..n {
        // a diagonal step from (i−1, hi[i−1]) must land inside row i
        lo[i] = lo[i].min(hi[i - 1] + 1).min(hi[i]);
    }
    lo.into_iter().zip(hi).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillEntry {
    pub demo_id: String,
    pub z: SkillSequence,
    /// Line index of the demonstration in `demos.jsonl`.
    pub demo_ref: usize,
}

pub const DB_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SkillDatabase {
    pub entries: Vec<SkillEntry>,
    pub encoder_fingerprint: String,
    pub schema_version: u32,
    pub demos: Dataset,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    demo_id: String,
    len: usize,
    demo_line: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    encoder_fingerprint: String,
    count: usize,
    dim: usize,
    skills_sha256: String,
    demos_sha256: String,
    entries: Vec<ManifestEntry>,
}

/// Embeds every prior demonstration with `model`.
pub fn build(prior: &Dataset, model: &SkillModel) -> Result<SkillDatabase> {
    if prior.is_empty() {
        return Err(Error::invalid("build: empty prior dataset"));
    }
    let zs = prior
        .demos
        .par_iter()
        .map(|d| {
            let _guard = MetaGuard::enter();
            model.embed_demo(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = prior
        .demos
        .iter()
        .zip(zs)
        .enumerate()
        .map(|(i, (d, z))| SkillEntry {
            demo_id: d.id.clone(),
            z,
            demo_ref: i,
        })
        .collect();
    Ok(SkillDatabase {
        entries,
        encoder_fingerprint: model.fingerprint()?,
        schema_version: DB_SCHEMA_VERSION,
        demos: Dataset::new(DatasetRole::Prior, prior.demos.clone())?,
    })
}

impl SkillDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().and_then(|e| e.z.first()).map_or(0, Vec::len)
    }

    pub fn demo(&self, entry: &SkillEntry) -> &Demonstration {
        &self.demos.demos[entry.demo_ref]
    }

    fn skills_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for z in &e.z {
                for x in z {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let skills = self.skills_bytes();
        let demos = self.demos.to_jsonl()?;
        let manifest = Manifest {
            schema_version: self.schema_version,
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            count: self.entries.len(),
            dim: self.dim(),
            skills_sha256: sha256_hex(&skills),
            demos_sha256: sha256_hex(demos.as_bytes()),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    demo_id: e.demo_id.clone(),
                    len: e.z.len(),
                    demo_line: e.demo_ref,
                })
                .collect(),
        };
        write_atomic(&dir.join("skills.bin"), &skills)?;
        write_atomic(&dir.join("demos.jsonl"), demos.as_bytes())?;
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
        if manifest.schema_version != DB_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.schema_version,
                expected: DB_SCHEMA_VERSION,
            });
        }
        let spath = dir.join("skills.bin");
        let skills = std::fs::read(&spath)?;
        if sha256_hex(&skills) != manifest.skills_sha256 {
            return Err(Error::Checksum(spath));
        }
        let dpath = dir.join("demos.jsonl");
        let demos_text = std::fs::read(&dpath)?;
        if sha256_hex(&demos_text) != manifest.demos_sha256 {
            return Err(Error::Checksum(dpath));
        }
        let demos_text = String::from_utf8(demos_text).map_err(|_| Error::Checksum(dpath.clone()))?;
        let demos = Dataset::from_jsonl(DatasetRole::Prior, &demos_text)?;
        let dim = manifest.dim;
        let total: usize = manifest.entries.iter().map(|e| e.len).sum();
        if skills.len() != total * dim * 8 || manifest.entries.len() != manifest.count {
            return Err(Error::Checksum(spath));
        }
        let mut vals = skills.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut entries = Vec::with_capacity(manifest.count);
        for e in manifest.entries {
            let z: SkillSequence = (0..e.len).map(|_| (&mut vals).take(dim).collect()).collect();
            let demo = demos
                .demos
                .get(e.demo_line)
                .ok_or_else(|| Error::invalid(format!("manifest line {} out of range", e.demo_line)))?;
            if demo.id != e.demo_id || demo.len() != e.len {
                return Err(Error::invalid(format!("manifest entry {} does not match demos.jsonl", e.demo_id)));
            }
            entries.push(SkillEntry {
                demo_id: e.demo_id,
                z,
                demo_ref: e.demo_line,
            });
        }
        Ok(SkillDatabase {
            entries,
            encoder_fingerprint: manifest.encoder_fingerprint,
            schema_version: manifest.schema_version,
            demos,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub radius: usize,
    pub metric: Metric,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            radius: 1,
            metric: Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Every database entry, ascending by distance then demo id.
    pub ranked: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct RetrievalOutput {
    /// Union of the per-query top-K, first occurrence order, no duplicates.
    pub retrieved: Dataset,
    /// Smallest distance at which each retrieved demo was selected, aligned
    /// with `retrieved.demos`.
    pub distances: Vec<f64>,
    pub rankings: Vec<RetrievalResult>,
}

/// Sorts `(id, distance)` ascending by distance, ties by id.
pub fn rank(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Takes the top `k` of each ranking and unions them by demo id.
pub fn union_top_k(rankings: &[RetrievalResult], k: usize) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for r in rankings {
        for (id, d) in r.ranked.iter().take(k) {
            match out.iter_mut().find(|(x, _)| x == id) {
                Some(e) => e.1 = e.1.min(*d),
                None => out.push((id.clone(), *d)),
            }
        }
    }
    out
}

/// Embeds each query with `model` and ranks every database entry by
/// FastDTW distance between skill sequences.
pub fn retrieve(
    db: &SkillDatabase,
    queries: &Dataset,
    model: &SkillModel,
    cfg: &RetrievalConfig,
) -> Result<RetrievalOutput> {
    if cfg.k == 0 {
        return Err(Error::invalid("retrieve: K must be >= 1"));
    }
    if db.is_empty() {
        return Err(Error::invalid("retrieve: empty database"));
    }
    let fp = model.fingerprint()?;
    if fp != db.encoder_fingerprint {
        return Err(Error::StaleDatabase {
            expected: db.encoder_fingerprint.clone(),
            found: fp,
        });
    }
    let entry_seqs = db
        .entries
        .par_iter()
        .map(|e| Seq::new(&e.z, cfg.metric))
        .collect::<Result<Vec<_>>>()?;
    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries.demos {
        let _guard = MetaGuard::enter();
        let qz = model.embed_demo(q)?;
        let qs = Seq::new(&qz, cfg.metric)?;
        let scored = entry_seqs
            .par_iter()
            .zip(&db.entries)
            .map(|(s, e)| Ok((e.demo_id.clone(), fastdtw_seq(&qs, s, cfg.radius, cfg.metric)?)))
            .collect::<Result<Vec<_>>>()?;
        rankings.push(RetrievalResult {
            query_id: q.id.clone(),
            ranked: rank(scored),
        });
    }
    assemble(db, rankings, cfg.k)
}

/// Builds the retrieved dataset from finished rankings.
pub fn assemble(db: &SkillDatabase, rankings: Vec<RetrievalResult>, k: usize) -> Result<RetrievalOutput> {
    let chosen = union_top_k(&rankings, k);
    let mut demos = Vec::with_capacity(chosen.len());
    let mut distances = Vec::with_capacity(chosen.len());
    for (id, d) in chosen {
        let demo = db
            .demos
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("ranked id {id} not in database")))?;
        demos.push(demo.clone());
        distances.push(d);
    }
    Ok(RetrievalOutput {
        retrieved: Dataset::new(DatasetRole::Retrieved, demos)?,
        distances,
        rankings,
    })
}

/// `query_id,rank,demo_id,distance` rows, rank starting at 1.
pub fn rankings_csv(rankings: &[RetrievalResult]) -> String {
    let mut s = String::from("query_id,rank,demo_id,distance\n");
    for r in rankings {
        for (i, (id, d)) in r.ranked.iter().enumerate() {
            s.push_str(&format!("{},{},{},{:.12e}\n", r.query_id, i + 1, id, d));
        }
    }
    s
}

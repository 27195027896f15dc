//! Behavior cloning on target plus retrieved demonstrations, and the
//! baseline variants (A-TM, F-IL, all prior data, target only, Euclidean
//! metric, weighted loss).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EpochLog, FitOptions, Normalizer, SkillModel, TrainDemo};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sim::Policy;
use crate::skilldb::{self, fastdtw_seq, rank, Metric, RetrievalConfig, RetrievalOutput, RetrievalResult, Seq, SkillDatabase};
use crate::tensor::AdamConfig;
use crate::types::{Dataset, DatasetRole, Demonstration, JointState, MetaGuard, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    ATm,
    FIl,
    All,
    TargetOnly,
    Euclidean,
    Weighted,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ours,
        Variant::ATm,
        Variant::FIl,
        Variant::All,
        Variant::TargetOnly,
        Variant::Euclidean,
        Variant::Weighted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::ATm => "a_tm",
            Variant::FIl => "f_il",
            Variant::All => "all",
            Variant::TargetOnly => "target_only",
            Variant::Euclidean => "euclidean",
            Variant::Weighted => "weighted",
        }
    }

    /// Whether the variant retrieves from the skill database.
    pub fn uses_database(&self) -> bool {
        matches!(self, Variant::Ours | Variant::Euclidean | Variant::Weighted)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub variant: Variant,
    pub k: usize,
    pub radius: usize,
    pub epochs: usize,
    /// Fine-tune epochs of the F-IL second phase.
    pub finetune_epochs: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            variant: Variant::Ours,
            k: 10,
            radius: 1,
            epochs: 50,
            finetune_epochs: 10,
            seed: 0,
        }
    }
}

/// `D_train` with one loss weight per demonstration.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub dataset: Dataset,
    pub weights: Vec<f64>,
    /// Present for retrieval-based variants.
    pub retrieval: Option<RetrievalOutput>,
}

/// What a variant may draw on besides the target demonstrations.
#[derive(Default, Clone, Copy)]
pub struct Sources<'a> {
    pub prior: Option<&'a Dataset>,
    pub db: Option<&'a SkillDatabase>,
    pub encoder: Option<&'a SkillModel>,
}

/// `S_i = min(l) / l_i`.
pub fn loss_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = distances.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!("loss weights need positive distances, got {bad}")));
    }
    let lmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(distances.iter().map(|l| lmin / l).collect())
}

fn union(target: &Dataset, extra: &[Demonstration]) -> Result<Dataset> {
    let mut demos = target.demos.clone();
    demos.extend(extra.iter().cloned());
    Dataset::new(DatasetRole::Train, demos)
}

/// Builds `D_train` for `plan.variant`. F-IL trains in two phases and has
/// no single training set; use [`fil_train`].
pub fn compose_training_set(plan: &TrainPlan, target: &Dataset, src: Sources<'_>) -> Result<TrainingSet> {
    if target.is_empty() {
        return Err(Error::invalid("compose: empty target dataset"));
    }
    let need = |what: &str| Error::Config(format!("variant {} needs {what}", plan.variant));
    let ones = |n: usize| vec![1.0; n];
    match plan.variant {
        Variant::TargetOnly => Ok(TrainingSet {
            dataset: union(target, &[])?,
            weights: ones(target.len()),
            retrieval: None,
        }),
        Variant::All => {
            let prior = src.prior.ok_or_else(|| need("the prior dataset"))?;
            let dataset = union(target, &prior.demos)?;
            Ok(TrainingSet {
                weights: ones(dataset.len()),
                dataset,
                retrieval: None,
            })
        }
        Variant::ATm => {
            let prior = src.prior.ok_or_else(|| need("the prior dataset"))?;
            let out = atm_retrieve(prior, target, plan.k, plan.radius)?;
            with_retrieval(plan.variant, target, out)
        }
        Variant::Ours | Variant::Euclidean | Variant::Weighted => {
            let db = src.db.ok_or_else(|| need("a skill database"))?;
            let encoder = src.encoder.ok_or_else(|| need("the skill encoder"))?;
            let metric = if plan.variant == Variant::Euclidean {
                Metric::Euclidean
            } else {
                Metric::Cosine
            };
            let rcfg = RetrievalConfig {
                k: plan.k,
                radius: plan.radius,
                metric,
            };
            let out = skilldb::retrieve(db, target, encoder, &rcfg)?;
            with_retrieval(plan.variant, target, out)
        }
        Variant::FIl => Err(Error::Config("f_il is trained with fil_train, not a single training set".into())),
    }
}

/// `D_target ∪ D_ret` from a finished retrieval. Target demonstrations
/// weigh 1; retrieved ones weigh 1 too, except under [`Variant::Weighted`].
pub fn with_retrieval(variant: Variant, target: &Dataset, out: RetrievalOutput) -> Result<TrainingSet> {
    if !matches!(variant, Variant::Ours | Variant::Euclidean | Variant::Weighted | Variant::ATm) {
        return Err(Error::Config(format!("variant {variant} does not use retrieval")));
    }
    if out.distances.len() != out.retrieved.len() {
        return Err(Error::invalid("one distance per retrieved demonstration required"));
    }
    let dataset = union(target, &out.retrieved.demos)?;
    let mut weights = vec![1.0; target.len()];
    if variant == Variant::Weighted {
        weights.extend(loss_weights(&out.distances)?);
    } else {
        weights.extend(std::iter::repeat(1.0).take(out.retrieved.len()));
    }
    Ok(TrainingSet {
        dataset,
        weights,
        retrieval: Some(out),
    })
}

/// Per-step concatenated agent xy coordinates, in stored agent order.
pub fn xy_sequence(d: &Demonstration) -> Vec<Vec<f64>> {
    d.steps
        .iter()
        .map(|s| s.state.agents.iter().flat_map(|a| [a.p.x, a.p.y]).collect())
        .collect()
}

/// A-TM: FastDTW over raw agent xy trajectories with a Euclidean element
/// metric. Candidates with a different agent count are skipped.
pub fn atm_retrieve(prior: &Dataset, target: &Dataset, k: usize, radius: usize) -> Result<RetrievalOutput> {
    if k == 0 {
        return Err(Error::invalid("retrieve: K must be >= 1"));
    }
    let seqs = prior
        .demos
        .par_iter()
        .map(|d| Seq::new(&xy_sequence(d), Metric::Euclidean))
        .collect::<Result<Vec<_>>>()?;
    let mut rankings = Vec::with_capacity(target.len());
    for q in &target.demos {
        let qs = Seq::new(&xy_sequence(q), Metric::Euclidean)?;
        let scored = prior
            .demos
            .par_iter()
            .zip(&seqs)
            .filter(|(d, _)| d.n_agents == q.n_agents)
            .map(|(d, s)| Ok((d.id.clone(), fastdtw_seq(&qs, s, radius, Metric::Euclidean)?)))
            .collect::<Result<Vec<_>>>()?;
        rankings.push(RetrievalResult {
            query_id: q.id.clone(),
            ranked: rank(scored),
        });
    }
    let chosen = skilldb::union_top_k(&rankings, k);
    let mut demos = Vec::with_capacity(chosen.len());
    let mut distances = Vec::with_capacity(chosen.len());
    for (id, dist) in chosen {
        demos.push(prior.get(&id).expect("ranked ids come from the prior").clone());
        distances.push(dist);
    }
    Ok(RetrievalOutput {
        retrieved: Dataset::new(DatasetRole::Retrieved, demos)?,
        distances,
        rankings,
    })
}

/// Training phase record stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_demo: usize,
    pub lr: f64,
    pub seed: u64,
    pub demos: usize,
}

/// A trained control policy: the encoder architecture trained as a
/// state-to-action map.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub model: SkillModel,
    pub plan: TrainPlan,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyExtra {
    plan: TrainPlan,
    phases: Vec<PhaseRecord>,
}

impl PolicyModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let extra = serde_json::to_value(PolicyExtra {
            plan: self.plan.clone(),
            phases: self.phases.clone(),
        })?;
        self.model.save(path, extra)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (model, extra) = SkillModel::load(path)?;
        let extra: PolicyExtra = serde_json::from_value(extra)?;
        Ok(PolicyModel {
            model,
            plan: extra.plan,
            phases: extra.phases,
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.model.fingerprint()
    }

    /// Deterministic world-frame actions for the last state of `history`,
    /// each clamped to `max_speed`.
    pub fn infer(&self, history: &[JointState], max_speed: f64) -> Result<Vec<Vec2>> {
        let (_, actions) = self.model.predict(history)?;
        Ok(actions.into_iter().map(|a| a.clamp_norm(max_speed)).collect())
    }
}

fn train_demos(set: &TrainingSet, norm: &Normalizer) -> Result<Vec<TrainDemo>> {
    set.dataset
        .demos
        .iter()
        .zip(&set.weights)
        .map(|(d, w)| TrainDemo::new(d, norm, *w))
        .collect()
}

fn fit_phase(
    model: &mut SkillModel,
    demos: &[TrainDemo],
    name: &str,
    epochs: usize,
    seed: u64,
) -> Result<(PhaseRecord, Vec<EpochLog>)> {
    let cfg = &model.cfg;
    let opts = FitOptions {
        epochs,
        batch_size: cfg.batch_size,
        steps_per_demo: cfg.steps_per_demo,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        seed,
    };
    let record = PhaseRecord {
        name: name.into(),
        epochs,
        batch_size: opts.batch_size,
        steps_per_demo: opts.steps_per_demo,
        lr: opts.adam.lr,
        seed,
        demos: demos.len(),
    };
    let log = model.fit(demos, &opts)?;
    Ok((record, log))
}

/// Behavior cloning on a (weighted) training set. The normalizer is fit on
/// the training set itself.
pub fn train_bc(set: &TrainingSet, cfg: &EncoderConfig, plan: &TrainPlan) -> Result<(PolicyModel, Vec<EpochLog>)> {
    if set.dataset.is_empty() {
        return Err(Error::invalid("train_bc: empty training set"));
    }
    if set.weights.len() != set.dataset.len() {
        return Err(Error::invalid("train_bc: one weight per demonstration required"));
    }
    let norm = Normalizer::fit(&set.dataset.demos)?;
    let mut model = SkillModel::new(cfg.clone(), norm, plan.seed)?;
    let demos = train_demos(set, &model.normalizer)?;
    let (record, log) = fit_phase(&mut model, &demos, "bc", plan.epochs, plan.seed)?;
    Ok((
        PolicyModel {
            model,
            plan: plan.clone(),
            phases: vec![record],
        },
        log,
    ))
}

/// F-IL: behavior cloning on the prior, then fine-tuning on the targets.
/// Both phases share the prior-fit normalizer. Returns the log of each phase.
pub fn fil_train(
    prior: &Dataset,
    target: &Dataset,
    cfg: &EncoderConfig,
    plan: &TrainPlan,
) -> Result<(PolicyModel, Vec<EpochLog>, Vec<EpochLog>)> {
    if prior.is_empty() || target.is_empty() {
        return Err(Error::invalid("fil_train: prior and target must be non-empty"));
    }
    let norm = Normalizer::fit(&prior.demos)?;
    let mut model = SkillModel::new(cfg.clone(), norm, plan.seed)?;
    let pre = prior
        .demos
        .iter()
        .map(|d| TrainDemo::new(d, &model.normalizer, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let (pre_rec, pre_log) = fit_phase(&mut model, &pre, "pretrain", plan.epochs, plan.seed)?;
    let fine = target
        .demos
        .iter()
        .map(|d| TrainDemo::new(d, &model.normalizer, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let fine_seed = crate::rng::derive_seed(plan.seed, &[crate::rng::label_hash("finetune")]);
    let (fine_rec, fine_log) = fit_phase(&mut model, &fine, "finetune", plan.finetune_epochs, fine_seed)?;
    Ok((
        PolicyModel {
            model,
            plan: plan.clone(),
            phases: vec![pre_rec, fine_rec],
        },
        pre_log,
        fine_log,
    ))
}

/// Trains `plan.variant` end to end from its sources.
pub fn train_variant(
    plan: &TrainPlan,
    target: &Dataset,
    src: Sources<'_>,
    cfg: &EncoderConfig,
) -> Result<(PolicyModel, Option<TrainingSet>, BTreeMap<String, Vec<EpochLog>>)> {
    let mut logs = BTreeMap::new();
    if plan.variant == Variant::FIl {
        let prior = src.prior.ok_or_else(|| Error::Config("variant f_il needs the prior dataset".into()))?;
        let (p, pre, fine) = fil_train(prior, target, cfg, plan)?;
        logs.insert("pretrain".to_string(), pre);
        logs.insert("finetune".to_string(), fine);
        return Ok((p, None, logs));
    }
    let set = {
        let _guard = MetaGuard::enter();
        compose_training_set(plan, target, src)?
    };
    let (p, log) = train_bc(&set, cfg, plan)?;
    logs.insert("bc".to_string(), log);
    Ok((p, Some(set), logs))
}

/// [`PolicyModel`] as a simulator policy.
pub struct LearnedPolicy<'a> {
    pub model: &'a PolicyModel,
    pub max_speed: f64,
}

impl Policy for LearnedPolicy<'_> {
    fn act(&mut self, history: &[JointState], _rng: &mut Rng) -> Result<Vec<Vec2>> {
        self.model.infer(history, self.max_speed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_prior, GenConfig, GenContext, TaskShape};
    use crate::sim::{Difficulty, Shape, SuccessTolerance, WorldConfig};
    use crate::skilldb::dtw;
    use crate::types::{StepRecord, Vec2};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            enc_self_layers: 1,
            dec_self_layers: 1,
            dec_cross_layers: 1,
            ffn_hidden: 12,
            mlp_hidden: vec![10],
            dropout: 0.0,
            history: 2,
            lr: 3e-3,
            epochs: 1,
            batch_size: 16,
            steps_per_demo: 8,
        }
    }

    fn fixture(per_policy: usize, seed: u64, role: DatasetRole, prefix: &str) -> Dataset {
        let world = WorldConfig {
            max_steps: 40,
            ..WorldConfig::default()
        };
        let tol = SuccessTolerance::default();
        let ctx = GenContext {
            world: &world,
            tol: &tol,
            control: None,
        };
        let cfg = GenConfig {
            per_policy_count: per_policy,
            tasks: vec![
                TaskShape { shape: Shape::Block, difficulty: Difficulty::Easy },
                TaskShape { shape: Shape::Stick, difficulty: Difficulty::Hard },
            ],
            ..GenConfig::default()
        };
        let demos = generate_prior(&cfg, 2, seed, &ctx)
            .unwrap()
            .demos
            .into_iter()
            .map(|mut d| {
                d.id = format!("{prefix}{}", d.id);
                d
            })
            .collect();
        Dataset::new(role, demos).unwrap()
    }

    fn plan(variant: Variant) -> TrainPlan {
        TrainPlan {
            variant,
            k: 3,
            epochs: 2,
            finetune_epochs: 2,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn loss_weight_formula() {
        assert_eq!(loss_weights(&[2.0, 4.0]).unwrap(), vec![1.0, 0.5]);
        assert_eq!(loss_weights(&[3.0, 3.0, 3.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(loss_weights(&[1.0, 2.0, 5.0]).unwrap(), vec![1.0, 0.5, 0.2]);
        assert!(loss_weights(&[1.0, 0.0]).is_err());
        assert!(loss_weights(&[-1.0]).is_err());
        assert!(loss_weights(&[f64::NAN]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn compose_sizes_and_weights() {
        let prior = fixture(2, 1, DatasetRole::Prior, "");
        let target = Dataset::new(DatasetRole::Target, fixture(1, 2, DatasetRole::Target, "t-").demos[..2].to_vec()).unwrap();
        let encoder = SkillModel::new(tiny_cfg(), Normalizer::fit(&prior.demos).unwrap(), 3).unwrap();
        let db = skilldb::build(&prior, &encoder).unwrap();
        let src = Sources {
            prior: Some(&prior),
            db: Some(&db),
            encoder: Some(&encoder),
        };
        let t = compose_training_set(&plan(Variant::TargetOnly), &target, src).unwrap();
        assert_eq!(t.dataset.len(), target.len());
        let all = compose_training_set(&plan(Variant::All), &target, src).unwrap();
        assert_eq!(all.dataset.len(), target.len() + prior.len());
        for v in [Variant::Ours, Variant::Euclidean, Variant::ATm] {
            let s = compose_training_set(&plan(v), &target, src).unwrap();
            let n = s.dataset.len();
            assert!(n > target.len() && n <= target.len() * (1 + 3), "{v}: {n}");
            assert!(s.weights.iter().all(|w| *w == 1.0));
            assert_eq!(s.dataset.demos[..2], target.demos[..]);
        }
        let w = compose_training_set(&plan(Variant::Weighted), &target, src).unwrap();
        assert_eq!(&w.weights[..2], &[1.0, 1.0]);
        let retrieved = &w.weights[2..];
        assert!(retrieved.iter().all(|s| *s > 0.0 && *s <= 1.0));
        assert!(retrieved.contains(&1.0));
        let ours = compose_training_set(&plan(Variant::Ours), &target, src).unwrap();
        assert_eq!(ours.dataset, compose_training_set(&plan(Variant::Ours), &target, src).unwrap().dataset);
        assert!(compose_training_set(&plan(Variant::FIl), &target, src).is_err());
        assert!(compose_training_set(&plan(Variant::Ours), &target, Sources::default()).is_err());
        assert!(compose_training_set(&plan(Variant::All), &target, Sources::default()).is_err());
    }

    fn translated(d: &Demonstration, id: &str, by: Vec2) -> Demonstration {
        let steps = d
            .steps
            .iter()
            .map(|s| {
                let mut st = s.state.clone();
                st.agents.iter_mut().for_each(|a| a.p = a.p + by);
                StepRecord {
                    state: st,
                    actions: s.actions.clone(),
                }
            })
            .collect();
        Demonstration::new(id, d.dt, steps).unwrap()
    }

    #[test]
    fn atm_retrieval_on_xy_trajectories() {
        let prior = fixture(1, 4, DatasetRole::Prior, "");
        let q = prior.demos[0].clone();
        let shifted = translated(&q, "shifted", Vec2::new(0.05, 0.0));
        let target = Dataset::new(DatasetRole::Target, vec![q.clone()]).unwrap();
        let out = atm_retrieve(&prior, &target, 2, 1).unwrap();
        assert_eq!(out.rankings[0].ranked[0], (q.id.clone(), 0.0));
        let xs = xy_sequence(&q);
        let ys = xy_sequence(&shifted);
        assert!(dtw(&xs, &ys, Metric::Euclidean).unwrap() > 0.0);
        let other = &prior.demos[1];
        let r = xs.len().max(other.len());
        let exact = dtw(&xs, &xy_sequence(other), Metric::Euclidean).unwrap();
        let fast = fastdtw_seq(
            &Seq::new(&xs, Metric::Euclidean).unwrap(),
            &Seq::new(&xy_sequence(other), Metric::Euclidean).unwrap(),
            r,
            Metric::Euclidean,
        )
        .unwrap();
        assert_eq!(fast, exact);
        // a three-agent candidate is skipped for a two-agent query
        let mut three = shifted.clone();
        for s in three.steps.iter_mut() {
            let extra = s.state.agents[0];
            s.state.agents.push(extra);
            s.actions.push(Vec2::ZERO);
        }
        let three = Demonstration::new("three", three.dt, three.steps).unwrap();
        let mixed = Dataset::new(DatasetRole::Prior, vec![q.clone(), three]).unwrap();
        let out = atm_retrieve(&mixed, &target, 5, 1).unwrap();
        assert_eq!(out.rankings[0].ranked.len(), 1);
    }

    #[test]
    fn bc_is_deterministic_and_memorizes_one_demo() {
        let data = fixture(1, 5, DatasetRole::Train, "");
        let one = Dataset::new(DatasetRole::Train, vec![data.demos[0].clone()]).unwrap();
        let set = TrainingSet {
            weights: vec![1.0],
            dataset: one,
            retrieval: None,
        };
        let cfg = EncoderConfig {
            steps_per_demo: 0,
            ..tiny_cfg()
        };
        let p = TrainPlan {
            epochs: 80,
            ..plan(Variant::TargetOnly)
        };
        let (a, log) = train_bc(&set, &cfg, &p).unwrap();
        let first = log[0].train_mse;
        let last = log.last().unwrap().train_mse;
        assert!(last < 0.1 * first, "first {first} last {last}");
        let (b, _) = train_bc(&set, &cfg, &p).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(a.phases.len(), 1);
        let empty = TrainingSet {
            dataset: Dataset::new(DatasetRole::Train, vec![]).unwrap(),
            weights: vec![],
            retrieval: None,
        };
        assert!(train_bc(&empty, &cfg, &p).is_err());
    }

    #[test]
    fn fil_fine_tune_improves_target_loss_and_records_phases() {
        let prior = fixture(1, 6, DatasetRole::Prior, "");
        let target = fixture(1, 7, DatasetRole::Target, "t-");
        let p = TrainPlan {
            epochs: 3,
            finetune_epochs: 6,
            ..plan(Variant::FIl)
        };
        let (model, pre, fine) = fil_train(&prior, &target, &tiny_cfg(), &p).unwrap();
        assert_eq!((pre.len(), fine.len()), (3, 6));
        assert!(fine.last().unwrap().train_mse < fine[0].train_mse);
        let names: Vec<&str> = model.phases.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["pretrain", "finetune"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        model.save(&path).unwrap();
        let back = PolicyModel::load(&path).unwrap();
        assert_eq!(back.phases, model.phases);
        assert_eq!(back.plan, model.plan);
        assert_eq!(back.fingerprint().unwrap(), model.fingerprint().unwrap());
    }

    #[test]
    fn inference_is_equivariant_deterministic_and_clamped() {
        let data = fixture(1, 8, DatasetRole::Train, "");
        let model = PolicyModel {
            model: SkillModel::new(tiny_cfg(), Normalizer::fit(&data.demos).unwrap(), 9).unwrap(),
            plan: TrainPlan::default(),
            phases: vec![],
        };
        let hist: Vec<JointState> = data.demos[0].steps[..5].iter().map(|s| s.state.clone()).collect();
        let a = model.infer(&hist, 0.1).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, model.infer(&hist, 0.1).unwrap());
        let perm = [1, 0];
        let ph: Vec<JointState> = hist.iter().map(|s| s.permuted(&perm)).collect();
        let b = model.infer(&ph, 0.1).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((b[i] - a[p]).norm() < 1e-9);
        }
        let tiny = model.infer(&hist, 1e-6).unwrap();
        assert!(tiny.iter().all(|v| v.norm() <= 1e-6 * (1.0 + 1e-12)));
        let mut lp = LearnedPolicy { model: &model, max_speed: 0.1 };
        assert_eq!(lp.act(&hist, &mut Rng::new(0)).unwrap(), a);
    }
}

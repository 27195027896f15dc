//! Stage orchestration. Every stage reads its inputs from and writes its
//! outputs under one output directory, together with a provenance record
//! (config hash, input and output hashes). A stage whose record still matches
//! is skipped unless forced.
//!
//! Layout under `--out`:
//!
//! ```text
//! config.toml  run.json
//! data/        prior.jsonl, target/<task>.jsonl, manifest.json
//! encoder/     encoder.json, loss.csv
//! db/          manifest.json, skills.bin, demos.jsonl
//! retrieval/   <method>/<task>/{retrieved.jsonl, selection.csv, rankings.csv}
//! policies/    <variant>/<task>.json, <variant>/<task>.loss.csv
//! eval/        <variant>/rows.json, report.{csv,md,json}
//! viz/         pca.csv, pca.json
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::datagen::{generate_prior, generate_target, GenContext};
use crate::encoder::{loss_csv, train_encoder, SkillModel};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, pca_project, projection_csv, EvalConfig, EvalReport, EvalRow};
use crate::io_util::{sha256_file, sha256_hex, write_atomic};
use crate::policy::{self, atm_retrieve, train_bc, PolicyModel, LearnedPolicy, Sources, TrainPlan, Variant};
use crate::rng::{derive_seed, label_hash};
use crate::sim::TaskKind;
use crate::skilldb::{self, rankings_csv, Metric, RetrievalConfig, RetrievalOutput, SkillDatabase};
use crate::types::{Dataset, DatasetRole, MetaGuard};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainEncoder,
    BuildDb,
    Retrieve,
    TrainPolicy,
    Eval,
    EmbedViz,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainEncoder,
        Stage::BuildDb,
        Stage::Retrieve,
        Stage::TrainPolicy,
        Stage::Eval,
        Stage::EmbedViz,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainEncoder => "train-encoder",
            Stage::BuildDb => "build-db",
            Stage::Retrieve => "retrieve",
            Stage::TrainPolicy => "train-policy",
            Stage::Eval => "eval",
            Stage::EmbedViz => "embed-viz",
        }
    }
}

/// Retrieval method behind a variant's `D_ret`.
pub fn retrieval_method(v: Variant) -> Option<&'static str> {
    match v {
        Variant::Ours | Variant::Weighted => Some("cosine"),
        Variant::Euclidean => Some("euclidean"),
        Variant::ATm => Some("a_tm"),
        Variant::FIl | Variant::All | Variant::TargetOnly => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    /// Relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Restricts train-policy and eval to one variant.
    pub variant: Option<Variant>,
}

/// An input file and the stage that produces it.
type Input = (Stage, String);

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            out: out.into(),
            force: false,
            variant: None,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn variants(&self) -> Vec<Variant> {
        match self.variant {
            Some(v) => vec![v],
            None => self.cfg.policy.variants.clone(),
        }
    }

    fn provenance_path(stage: Stage, scope: &str) -> String {
        if scope.is_empty() {
            format!("provenance/{}.json", stage.name())
        } else {
            format!("provenance/{}-{scope}.json", stage.name())
        }
    }

    fn read_provenance(&self, stage: Stage, scope: &str) -> Option<Provenance> {
        let text = std::fs::read_to_string(self.path(&Self::provenance_path(stage, scope))).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Hashes `inputs`, checking each against the record of the stage that
    /// wrote it.
    fn check_inputs(&self, inputs: &[Input]) -> Result<BTreeMap<String, String>> {
        let mut records: BTreeMap<Stage, Vec<Provenance>> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (stage, rel) in inputs {
            let stale = || Error::StaleArtifact {
                stage: stage.name(),
                path: self.path(rel),
            };
            let path = self.path(rel);
            if !path.is_file() {
                return Err(stale());
            }
            let hash = sha256_file(&path)?;
            let recs = records.entry(*stage).or_insert_with(|| self.stage_records(*stage));
            if !recs.iter().any(|p| p.outputs.get(rel) == Some(&hash)) {
                return Err(stale());
            }
            out.insert(rel.clone(), hash);
        }
        Ok(out)
    }

    /// Every provenance record of `stage`, including per-variant scopes.
    fn stage_records(&self, stage: Stage) -> Vec<Provenance> {
        let dir = self.path("provenance");
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Vec::new();
        };
        let prefix = stage.name();
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json") && (n == &format!("{prefix}.json") || n.starts_with(&format!("{prefix}-"))))
            .collect();
        names.sort();
        names
            .iter()
            .filter_map(|n| std::fs::read_to_string(dir.join(n)).ok())
            .filter_map(|t| serde_json::from_str::<Provenance>(&t).ok())
            .filter(|p| p.stage == prefix)
            .collect()
    }

    /// Runs `body` unless the stage's record matches the current config,
    /// inputs and outputs. `body` returns the relative paths it wrote.
    fn run_stage(
        &self,
        stage: Stage,
        scope: &str,
        sections: &[&str],
        inputs: &[Input],
        body: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<Outcome> {
        let input_hashes = self.check_inputs(inputs)?;
        let config_hash = self.cfg.section_hash(sections)?;
        if !self.force {
            if let Some(prev) = self.read_provenance(stage, scope) {
                let outputs_ok = prev
                    .outputs
                    .iter()
                    .all(|(rel, h)| sha256_file(&self.path(rel)).map(|x| &x == h).unwrap_or(false));
                if prev.config_hash == config_hash && prev.inputs == input_hashes && outputs_ok {
                    return Ok(Outcome::Skipped);
                }
            }
        }
        let written = body()?;
        let mut outputs = BTreeMap::new();
        for rel in written {
            outputs.insert(rel.clone(), sha256_file(&self.path(&rel))?);
        }
        let record = Provenance {
            stage: stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            inputs: input_hashes,
            outputs,
        };
        write_atomic(
            &self.path(&Self::provenance_path(stage, scope)),
            serde_json::to_string_pretty(&record)?.as_bytes(),
        )?;
        Ok(Outcome::Ran)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        write_atomic(&self.path(rel), bytes)?;
        Ok(rel.to_string())
    }

    pub fn target_rel(task: TaskKind) -> String {
        format!("data/target/{}.jsonl", task.key())
    }

    const PRIOR: &'static str = "data/prior.jsonl";
    const ENCODER: &'static str = "encoder/encoder.json";
    const DB_FILES: [&'static str; 3] = ["db/manifest.json", "db/skills.bin", "db/demos.jsonl"];

    fn load_prior(&self) -> Result<Dataset> {
        Dataset::read(DatasetRole::Prior, &self.path(Self::PRIOR))
    }

    fn load_target(&self, task: TaskKind) -> Result<Dataset> {
        Dataset::read(DatasetRole::Target, &self.path(&Self::target_rel(task)))
    }

    fn load_encoder(&self) -> Result<SkillModel> {
        Ok(SkillModel::load(&self.path(Self::ENCODER))?.0)
    }

    fn gen_context(&self) -> GenContext<'_> {
        GenContext {
            world: &self.cfg.world,
            tol: &self.cfg.success,
            control: if self.cfg.datagen.use_controller {
                Some(&self.cfg.control)
            } else {
                None
            },
        }
    }

    pub fn gen_data(&self) -> Result<Outcome> {
        self.run_stage(Stage::GenData, "", &["seed", "world", "success", "datagen", "control"], &[], || {
            let ctx = self.gen_context();
            let mut prior = Vec::new();
            let mut per_n = BTreeMap::new();
            for &n in &self.cfg.datagen.n_agents_list {
                let d = generate_prior(&self.cfg.datagen, n, self.cfg.seed, &ctx)?;
                per_n.insert(n.to_string(), d.len());
                prior.extend(d.demos);
            }
            let prior = Dataset::new(DatasetRole::Prior, prior)?;
            let prior_text = prior.to_jsonl()?;
            let mut written = vec![self.write(Self::PRIOR, prior_text.as_bytes())?];
            let mut targets = BTreeMap::new();
            for task in self.cfg.tasks() {
                let t = generate_target(
                    task,
                    self.cfg.datagen.target_count,
                    self.cfg.seed,
                    self.cfg.datagen.target_attempt_factor,
                    &ctx,
                )?;
                let text = t.to_jsonl()?;
                targets.insert(task.key(), serde_json::json!({"count": t.len(), "sha256": sha256_hex(text.as_bytes())}));
                written.push(self.write(&Self::target_rel(task), text.as_bytes())?);
            }
            let manifest = serde_json::json!({
                "prior": {"count": prior.len(), "per_n_agents": per_n, "sha256": sha256_hex(prior_text.as_bytes())},
                "targets": targets,
                "config_hash": self.cfg.config_hash()?,
            });
            written.push(self.write("data/manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?);
            Ok(written)
        })
    }

    pub fn train_encoder(&self) -> Result<Outcome> {
        let inputs = [(Stage::GenData, Self::PRIOR.to_string())];
        self.run_stage(Stage::TrainEncoder, "", &["seed", "encoder"], &inputs, || {
            let prior = self.load_prior()?;
            let seed = derive_seed(self.cfg.seed, &[label_hash("encoder")]);
            let (model, log) = train_encoder(&prior.demos, &self.cfg.encoder, seed)?;
            let path = self.path(Self::ENCODER);
            if let Some(p) = path.parent() {
                std::fs::create_dir_all(p)?;
            }
            model.save(&path, serde_json::Value::Null)?;
            Ok(vec![
                Self::ENCODER.to_string(),
                self.write("encoder/loss.csv", loss_csv(&log).as_bytes())?,
            ])
        })
    }

    pub fn build_db(&self) -> Result<Outcome> {
        let inputs = [
            (Stage::GenData, Self::PRIOR.to_string()),
            (Stage::TrainEncoder, Self::ENCODER.to_string()),
        ];
        self.run_stage(Stage::BuildDb, "", &[], &inputs, || {
            let prior = self.load_prior()?;
            let model = self.load_encoder()?;
            let db = skilldb::build(&prior, &model)?;
            db.save(&self.path("db"))?;
            Ok(Self::DB_FILES.iter().map(|s| s.to_string()).collect())
        })
    }

    fn db_inputs() -> Vec<Input> {
        Self::DB_FILES.iter().map(|f| (Stage::BuildDb, f.to_string())).collect()
    }

    fn target_inputs(&self) -> Vec<Input> {
        self.cfg.tasks().into_iter().map(|t| (Stage::GenData, Self::target_rel(t))).collect()
    }

    /// Retrieval methods needed by the configured variants; cosine is always
    /// run for inspection.
    fn methods(&self) -> Vec<&'static str> {
        let mut m = vec!["cosine"];
        for v in &self.cfg.policy.variants {
            if let Some(x) = retrieval_method(*v) {
                if !m.contains(&x) {
                    m.push(x);
                }
            }
        }
        m
    }

    pub fn retrieval_dir(method: &str, task: TaskKind) -> String {
        format!("retrieval/{method}/{}", task.key())
    }

    pub fn retrieve(&self) -> Result<Outcome> {
        let mut inputs = Self::db_inputs();
        inputs.push((Stage::TrainEncoder, Self::ENCODER.to_string()));
        inputs.extend(self.target_inputs());
        let methods = self.methods();
        if methods.contains(&"a_tm") {
            inputs.push((Stage::GenData, Self::PRIOR.to_string()));
        }
        self.run_stage(Stage::Retrieve, "", &["retrieval", "policy"], &inputs, || {
            let db = SkillDatabase::load(&self.path("db"))?;
            let model = self.load_encoder()?;
            let prior = if methods.contains(&"a_tm") { Some(self.load_prior()?) } else { None };
            let mut written = Vec::new();
            for task in self.cfg.tasks() {
                let target = self.load_target(task)?;
                for &method in &methods {
                    let out = {
                        let _guard = MetaGuard::enter();
                        match method {
                            "a_tm" => atm_retrieve(
                                prior.as_ref().expect("loaded for a_tm"),
                                &target,
                                self.cfg.retrieval.k,
                                self.cfg.retrieval.radius,
                            )?,
                            _ => {
                                let metric = if method == "euclidean" { Metric::Euclidean } else { Metric::Cosine };
                                let rcfg = RetrievalConfig {
                                    k: self.cfg.retrieval.k,
                                    radius: self.cfg.retrieval.radius,
                                    metric,
                                };
                                skilldb::retrieve(&db, &target, &model, &rcfg)?
                            }
                        }
                    };
                    let dir = Self::retrieval_dir(method, task);
                    written.push(self.write(&format!("{dir}/retrieved.jsonl"), out.retrieved.to_jsonl()?.as_bytes())?);
                    written.push(self.write(&format!("{dir}/selection.csv"), selection_csv(&out).as_bytes())?);
                    written.push(self.write(&format!("{dir}/rankings.csv"), rankings_csv(&out.rankings).as_bytes())?);
                }
            }
            Ok(written)
        })
    }

    fn load_retrieval(&self, method: &str, task: TaskKind) -> Result<RetrievalOutput> {
        let dir = Self::retrieval_dir(method, task);
        let retrieved = Dataset::read(DatasetRole::Retrieved, &self.path(&format!("{dir}/retrieved.jsonl")))?;
        let text = std::fs::read_to_string(self.path(&format!("{dir}/selection.csv")))?;
        let mut distances = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (id, d) = line.split_once(',').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected demo_id,distance".into(),
            })?;
            if retrieved.demos.get(distances.len()).map(|x| x.id.as_str()) != Some(id) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("selection row {id} does not match retrieved.jsonl"),
                });
            }
            distances.push(d.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(RetrievalOutput {
            retrieved,
            distances,
            rankings: Vec::new(),
        })
    }

    pub fn policy_rel(variant: Variant, task: TaskKind) -> String {
        format!("policies/{variant}/{}.json", task.key())
    }

    pub fn plan_for(&self, variant: Variant, task: TaskKind) -> TrainPlan {
        TrainPlan {
            variant,
            k: self.cfg.retrieval.k,
            radius: self.cfg.retrieval.radius,
            epochs: self.cfg.policy.epochs,
            finetune_epochs: self.cfg.policy.finetune_epochs,
            seed: derive_seed(self.cfg.seed, &[label_hash("policy"), label_hash(variant.as_str()), label_hash(&task.key())]),
        }
    }

    pub fn train_policy(&self) -> Result<Vec<Outcome>> {
        let mut outcomes = Vec::new();
        for variant in self.variants() {
            let mut inputs = self.target_inputs();
            if let Some(method) = retrieval_method(variant) {
                for task in self.cfg.tasks() {
                    let dir = Self::retrieval_dir(method, task);
                    inputs.push((Stage::Retrieve, format!("{dir}/retrieved.jsonl")));
                    inputs.push((Stage::Retrieve, format!("{dir}/selection.csv")));
                }
            }
            if matches!(variant, Variant::All | Variant::FIl) {
                inputs.push((Stage::GenData, Self::PRIOR.to_string()));
            }
            let o = self.run_stage(
                Stage::TrainPolicy,
                variant.as_str(),
                &["seed", "encoder", "retrieval", "policy"],
                &inputs,
                || {
                    let prior = if matches!(variant, Variant::All | Variant::FIl) {
                        Some(self.load_prior()?)
                    } else {
                        None
                    };
                    let mut written = Vec::new();
                    for task in self.cfg.tasks() {
                        let target = self.load_target(task)?;
                        let plan = self.plan_for(variant, task);
                        let (model, logs) = match (variant, retrieval_method(variant)) {
                            (Variant::FIl, _) => {
                                let (m, pre, fine) =
                                    policy::fil_train(prior.as_ref().expect("loaded"), &target, &self.cfg.encoder, &plan)?;
                                (m, vec![("pretrain", pre), ("finetune", fine)])
                            }
                            (_, Some(method)) => {
                                let set = policy::with_retrieval(variant, &target, self.load_retrieval(method, task)?)?;
                                let (m, log) = train_bc(&set, &self.cfg.encoder, &plan)?;
                                (m, vec![("bc", log)])
                            }
                            _ => {
                                let src = Sources {
                                    prior: prior.as_ref(),
                                    ..Sources::default()
                                };
                                let set = {
                                    let _guard = MetaGuard::enter();
                                    policy::compose_training_set(&plan, &target, src)?
                                };
                                let (m, log) = train_bc(&set, &self.cfg.encoder, &plan)?;
                                (m, vec![("bc", log)])
                            }
                        };
                        let rel = Self::policy_rel(variant, task);
                        let path = self.path(&rel);
                        if let Some(p) = path.parent() {
                            std::fs::create_dir_all(p)?;
                        }
                        model.save(&path)?;
                        written.push(rel);
                        for (phase, log) in logs {
                            let csv = format!("policies/{variant}/{}.{phase}.loss.csv", task.key());
                            written.push(self.write(&csv, loss_csv(&log).as_bytes())?);
                        }
                    }
                    Ok(written)
                },
            )?;
            outcomes.push(o);
        }
        Ok(outcomes)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.cfg.eval.n_episodes,
            seed: self.cfg.seed,
            world: self.cfg.world.clone(),
            tol: self.cfg.success,
            control: self.cfg.control.clone(),
        }
    }

    pub fn eval(&self) -> Result<Vec<Outcome>> {
        let mut outcomes = Vec::new();
        for variant in self.variants() {
            let inputs: Vec<Input> = self
                .cfg
                .tasks()
                .into_iter()
                .map(|t| (Stage::TrainPolicy, Self::policy_rel(variant, t)))
                .collect();
            let o = self.run_stage(
                Stage::Eval,
                variant.as_str(),
                &["seed", "world", "success", "control", "eval"],
                &inputs,
                || {
                    let ecfg = self.eval_config();
                    let mut rows = Vec::new();
                    for task in self.cfg.tasks() {
                        let model = PolicyModel::load(&self.path(&Self::policy_rel(variant, task)))?;
                        let make = || LearnedPolicy {
                            model: &model,
                            max_speed: self.cfg.world.max_speed,
                        };
                        let (row, _) = evaluate(make, task, variant.as_str(), &ecfg)?;
                        rows.push(row);
                    }
                    let rel = format!("eval/{variant}/rows.json");
                    Ok(vec![self.write(&rel, serde_json::to_string_pretty(&rows)?.as_bytes())?])
                },
            )?;
            outcomes.push(o);
        }
        self.write_report()?;
        Ok(outcomes)
    }

    /// Assembles `eval/report.*` from every configured variant evaluated so
    /// far, in config order.
    pub fn write_report(&self) -> Result<Option<EvalReport>> {
        let mut report = EvalReport::default();
        for v in &self.cfg.policy.variants {
            let p = self.path(&format!("eval/{v}/rows.json"));
            if p.is_file() {
                let rows: Vec<EvalRow> = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                report.rows.extend(rows);
            }
        }
        if report.rows.is_empty() {
            return Ok(None);
        }
        report.emit(&self.path("eval"), "report")?;
        Ok(Some(report))
    }

    pub fn embed_viz(&self) -> Result<Outcome> {
        self.run_stage(Stage::EmbedViz, "", &["viz"], &Self::db_inputs(), || {
            let db = SkillDatabase::load(&self.path("db"))?;
            let mut vectors = Vec::new();
            let mut labels = Vec::new();
            for e in &db.entries {
                for (t, z) in e.z.iter().enumerate().step_by(self.cfg.viz.stride) {
                    vectors.push(z.clone());
                    labels.push(format!("{}:{t}", e.demo_id));
                }
            }
            let proj = pca_project(&vectors, 2)?;
            let summary = serde_json::json!({
                "mean": proj.mean,
                "components": proj.components,
                "explained_variance_ratio": proj.explained_variance_ratio,
                "count": vectors.len(),
            });
            Ok(vec![
                self.write("viz/pca.csv", projection_csv(&proj, &labels)?.as_bytes())?,
                self.write("viz/pca.json", serde_json::to_string_pretty(&summary)?.as_bytes())?,
            ])
        })
    }

    /// Writes `config.toml` and the run-level record listing the config hash
    /// and every stage record present.
    pub fn write_run_record(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        write_atomic(&self.path("config.toml"), self.cfg.to_toml()?.as_bytes())?;
        let mut stages = BTreeMap::new();
        if let Ok(entries) = std::fs::read_dir(self.path("provenance")) {
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".json"))
                .collect();
            names.sort();
            for n in names {
                stages.insert(n.clone(), sha256_file(&self.path(&format!("provenance/{n}")))?);
            }
        }
        let run = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": self.cfg.config_hash()?,
            "provenance": stages,
        });
        write_atomic(&self.path("run.json"), serde_json::to_string_pretty(&run)?.as_bytes())
    }

    pub fn run(&self, stage: Stage) -> Result<Vec<Outcome>> {
        let r = match stage {
            Stage::GenData => vec![self.gen_data()?],
            Stage::TrainEncoder => vec![self.train_encoder()?],
            Stage::BuildDb => vec![self.build_db()?],
            Stage::Retrieve => vec![self.retrieve()?],
            Stage::TrainPolicy => self.train_policy()?,
            Stage::Eval => self.eval()?,
            Stage::EmbedViz => vec![self.embed_viz()?],
        };
        self.write_run_record()?;
        Ok(r)
    }

    pub fn run_all(&self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }
}

/// `demo_id,distance` per retrieved demonstration; distances round-trip.
pub fn selection_csv(out: &RetrievalOutput) -> String {
    let mut s = String::from("demo_id,distance\n");
    for (d, l) in out.retrieved.demos.iter().zip(&out.distances) {
        s.push_str(&format!("{},{}\n", d.id, l));
    }
    s
}

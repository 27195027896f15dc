//! Transformer skill encoder.
//!
//! A past-context encoder self-attends over tokens for every agent and the
//! object across the last `H + 1` steps plus one goal token. A decoder takes
//! the current-step agent tokens, self-attends among them, cross-attends to
//! the encoder memory, and yields one feature row `e_n` per agent. An MLP
//! head maps each `e_n` to a next-step action; the average of the `e_n` is
//! the skill vector `z`.
//!
//! Nothing is indexed by agent position, so the network is equivariant to
//! agent order and the pooled `z` is invariant to it.
//!
//! The same [`SkillModel`] is trained as the behavior-cloning policy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{sha256_hex, write_atomic};
use crate::rng::{derive_seed, label_hash, Rng};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Segment, Tensor, Var, LN_EPS};
use crate::types::{Demonstration, EntityState, JointState, Vec2};

/// Raw per-token feature width: entity-kind one-hot plus the ten state
/// features.
pub const TOKEN_DIM: usize = 13;
pub const STATE_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_self_layers: usize,
    pub dec_self_layers: usize,
    pub dec_cross_layers: usize,
    /// Feed-forward width inside each attention block.
    pub ffn_hidden: usize,
    /// Hidden widths of the action head.
    pub mlp_hidden: Vec<usize>,
    pub dropout: f64,
    /// History window `H`; the encoder sees `H + 1` steps.
    pub history: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Timesteps sampled per demonstration per epoch; 0 uses every step.
    pub steps_per_demo: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 256,
            n_heads: 8,
            enc_self_layers: 2,
            dec_self_layers: 2,
            dec_cross_layers: 2,
            ffn_hidden: 512,
            mlp_hidden: vec![512, 256],
            dropout: 0.1,
            history: 8,
            lr: 1e-4,
            epochs: 10,
            batch_size: 64,
            steps_per_demo: 0,
        }
    }
}

impl EncoderConfig {
    /// Small network for single-core desk runs.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 4,
            enc_self_layers: 2,
            dec_self_layers: 1,
            dec_cross_layers: 1,
            ffn_hidden: 64,
            mlp_hidden: vec![64, 64],
            dropout: 0.1,
            history: 8,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            steps_per_demo: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the sinusoidal time encoding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("lr, batch_size and ffn_hidden must be positive".into()));
        }
        if self.mlp_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("mlp_hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn token_count(&self, n_agents: usize) -> usize {
        (self.history + 1) * (n_agents + 1) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Agent,
    Object,
    Goal,
}

impl EntityKind {
    fn one_hot(self) -> [f64; 3] {
        match self {
            EntityKind::Agent => [1.0, 0.0, 0.0],
            EntityKind::Object => [0.0, 1.0, 0.0],
            EntityKind::Goal => [0.0, 0.0, 1.0],
        }
    }
}

/// One entity at one timestep, with goal-frame raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: EntityKind,
    pub features: [f64; STATE_DIM],
    pub t: usize,
}

impl Token {
    pub fn raw(&self) -> [f64; TOKEN_DIM] {
        let mut out = [0.0; TOKEN_DIM];
        out[..3].copy_from_slice(&self.kind.one_hot());
        out[3..].copy_from_slice(&self.features);
        out
    }
}

/// Window of the last `h + 1` states of `history` (the final element is the
/// current state, at step index `history.len() − 1`). Shorter prefixes repeat
/// the earliest state. Tokens run oldest step first, agents in order then
/// the object within a step, and end with the goal token.
pub fn tokenize(history: &[JointState], h: usize) -> Result<Vec<Token>> {
    let current = history.last().ok_or_else(|| Error::invalid("tokenize: empty window"))?;
    let n = current.n_agents();
    let t_now = history.len() - 1;
    let mut out = Vec::with_capacity((h + 1) * (n + 1) + 1);
    for k in 0..=h {
        let t = (t_now + k).saturating_sub(h);
        let s = history[t].to_goal_frame()?;
        if s.n_agents() != n {
            return Err(Error::invalid("tokenize: agent count changes within the window"));
        }
        for a in &s.agents {
            out.push(Token {
                kind: EntityKind::Agent,
                features: a.features(),
                t,
            });
        }
        out.push(Token {
            kind: EntityKind::Object,
            features: s.object.features(),
            t,
        });
    }
    out.push(Token {
        kind: EntityKind::Goal,
        features: current.to_goal_frame()?.goal.features(),
        t: t_now,
    });
    Ok(out)
}

/// Interleaved sinusoidal encoding: entry `2i` is `sin(t / 10000^(2i/d))`,
/// entry `2i + 1` the matching cosine.
pub fn time_encoding(t: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
        let a = t as f64 * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Floor applied to feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics for state features and goal-frame actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: vec![0.0; STATE_DIM],
            std: vec![1.0; STATE_DIM],
            action_mean: vec![0.0; 2],
            action_std: vec![1.0; 2],
        }
    }

    /// Statistics over every entity token (agents, object, goal) of every
    /// step, in the goal frame.
    pub fn fit<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Result<Self> {
        let mut s = vec![0.0; STATE_DIM];
        let mut s2 = vec![0.0; STATE_DIM];
        let mut n = 0usize;
        let mut a = [0.0; 2];
        let mut a2 = [0.0; 2];
        let mut na = 0usize;
        for d in demos {
            for step in &d.steps {
                let g = step.state.to_goal_frame()?;
                let yaw = step.state.goal.yaw();
                let ents = g.agents.iter().chain([&g.object, &g.goal]);
                for e in ents {
                    for (j, x) in e.features().iter().enumerate() {
                        s[j] += x;
                        s2[j] += x * x;
                    }
                    n += 1;
                }
                for act in &step.actions {
                    let l = act.rotate(-yaw);
                    for (j, x) in [l.x, l.y].iter().enumerate() {
                        a[j] += x;
                        a2[j] += x * x;
                    }
                    na += 1;
                }
            }
        }
        if n == 0 || na == 0 {
            return Err(Error::invalid("normalizer needs at least one step"));
        }
        let stats = |s: &[f64], s2: &[f64], n: usize| -> (Vec<f64>, Vec<f64>) {
            let mean: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
            let std = s2
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
                .collect();
            (mean, std)
        };
        let (mean, std) = stats(&s, &s2, n);
        let (action_mean, action_std) = stats(&a, &a2, na);
        Ok(Normalizer {
            mean,
            std,
            action_mean,
            action_std,
        })
    }

    pub fn state(&self, f: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for j in 0..STATE_DIM {
            out[j] = (f[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn action(&self, a: Vec2) -> [f64; 2] {
        [
            (a.x - self.action_mean[0]) / self.action_std[0],
            (a.y - self.action_mean[1]) / self.action_std[1],
        ]
    }

    pub fn unaction(&self, a: [f64; 2]) -> Vec2 {
        Vec2::new(
            a[0] * self.action_std[0] + self.action_mean[0],
            a[1] * self.action_std[1] + self.action_mean[1],
        )
    }
}

/// Normalized goal-frame features of one joint state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatState {
    pub agents: Vec<[f64; STATE_DIM]>,
    pub object: [f64; STATE_DIM],
    pub goal: [f64; STATE_DIM],
}

impl FeatState {
    pub fn new(s: &JointState, norm: &Normalizer) -> Result<Self> {
        let g = s.to_goal_frame()?;
        let f = |e: &EntityState| norm.state(&e.features());
        Ok(FeatState {
            agents: g.agents.iter().map(f).collect(),
            object: f(&g.object),
            goal: f(&g.goal),
        })
    }
}

/// One model input: the featurized prefix and the current step index.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub states: &'a [FeatState],
    pub t: usize,
}

/// Result of a batched forward pass.
pub struct Forward {
    /// Decoder features, one row per agent per sample (`Σ N × d_model`).
    pub e: Var,
    /// Predicted normalized goal-frame actions (`Σ N × 2`).
    pub y: Var,
    /// Agent row range of each sample within `e` and `y`.
    pub agent_segs: Vec<Segment>,
    /// Attention nodes in evaluation order, for diagnostics.
    pub attention: Vec<Var>,
}

/// Dropout context: masks derive from `(seed, step, site)`.
#[derive(Debug, Clone, Copy)]
pub struct TrainMode {
    pub seed: u64,
    pub step: u64,
}

struct Ctx<'m> {
    mode: Option<TrainMode>,
    p: f64,
    heads: usize,
    site: u64,
    params: &'m BTreeMap<String, Var>,
    attention: Vec<Var>,
}

impl Ctx<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        self.site += 1;
        match self.mode {
            Some(m) if self.p > 0.0 => {
                let mut rng = Rng::new(derive_seed(m.seed, &[m.step, self.site]));
                g.dropout(x, self.p, &mut rng, true)
            }
            _ => Ok(x),
        }
    }
}

/// Encoder/decoder network with its normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillModel {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
}

fn init_linear(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    ps.insert(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

fn init_ln(ps: &mut ParamStore, name: &str, d: usize) {
    ps.insert(format!("{name}.g"), Tensor::matrix(1, d, vec![1.0; d]).expect("shape"));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, d]));
}

fn init_attn(ps: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) {
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{p}"), d, d, rng);
    }
}

fn init_ffn(ps: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) {
    init_linear(ps, &format!("{name}.fc1"), d, hidden, rng);
    init_linear(ps, &format!("{name}.fc2"), hidden, d, rng);
}

impl SkillModel {
    /// Fresh Glorot-initialized network.
    pub fn new(cfg: EncoderConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(derive_seed(seed, &[label_hash("init")]));
        let d = cfg.d_model;
        let mut ps = ParamStore::default();
        init_linear(&mut ps, "embed", TOKEN_DIM, d, &mut rng);
        for i in 0..cfg.enc_self_layers {
            init_ln(&mut ps, &format!("enc.{i}.ln1"), d);
            init_attn(&mut ps, &format!("enc.{i}.attn"), d, &mut rng);
            init_ln(&mut ps, &format!("enc.{i}.ln2"), d);
            init_ffn(&mut ps, &format!("enc.{i}.ffn"), d, cfg.ffn_hidden, &mut rng);
        }
        init_ln(&mut ps, "enc.ln_out", d);
        for i in 0..cfg.dec_self_layers.max(cfg.dec_cross_layers) {
            if i < cfg.dec_self_layers {
                init_ln(&mut ps, &format!("dec.{i}.ln_self"), d);
                init_attn(&mut ps, &format!("dec.{i}.self"), d, &mut rng);
            }
            if i < cfg.dec_cross_layers {
                init_ln(&mut ps, &format!("dec.{i}.ln_cross"), d);
                init_attn(&mut ps, &format!("dec.{i}.cross"), d, &mut rng);
            }
            init_ln(&mut ps, &format!("dec.{i}.ln_ffn"), d);
            init_ffn(&mut ps, &format!("dec.{i}.ffn"), d, cfg.ffn_hidden, &mut rng);
        }
        init_ln(&mut ps, "dec.ln_out", d);
        let mut width = d;
        for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
            init_linear(&mut ps, &format!("head.{i}"), width, h, &mut rng);
            width = h;
        }
        init_linear(&mut ps, "head.out", width, 2, &mut rng);
        Ok(SkillModel {
            cfg,
            params: ps,
            normalizer,
        })
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params.tensors.iter().map(|(k, t)| (k.clone(), g.param(t))).collect()
    }

    /// Adds every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect()
    }

    /// Batched forward pass. Samples may have different agent counts.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BTreeMap<String, Var>,
        samples: &[Sample<'_>],
        mode: Option<TrainMode>,
    ) -> Result<Forward> {
        if samples.is_empty() {
            return Err(Error::invalid("forward: empty batch"));
        }
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let mut x = Vec::new();
        let mut pe = Vec::new();
        let mut tok_segs = Vec::with_capacity(samples.len());
        let mut agent_rows = Vec::new();
        let mut agent_segs = Vec::with_capacity(samples.len());
        for s in samples {
            let cur = s.states.get(s.t).ok_or_else(|| Error::invalid("forward: step out of range"))?;
            let n = cur.agents.len();
            if n == 0 {
                return Err(Error::invalid("forward: joint state without agents"));
            }
            let start = x.len() / TOKEN_DIM;
            let h = cfg.history;
            for k in 0..=h {
                let t = (s.t + k).saturating_sub(h);
                let st = &s.states[t];
                if st.agents.len() != n {
                    return Err(Error::invalid("forward: agent count changes within the window"));
                }
                let enc = time_encoding(t, d);
                for a in &st.agents {
                    if k == h {
                        agent_rows.push(x.len() / TOKEN_DIM);
                    }
                    push_token(&mut x, EntityKind::Agent, a);
                    pe.extend_from_slice(&enc);
                }
                push_token(&mut x, EntityKind::Object, &st.object);
                pe.extend_from_slice(&enc);
            }
            push_token(&mut x, EntityKind::Goal, &cur.goal);
            pe.extend_from_slice(&time_encoding(s.t, d));
            let len = x.len() / TOKEN_DIM - start;
            tok_segs.push((start, len));
            agent_segs.push((agent_rows.len() - n, n));
        }
        let rows = x.len() / TOKEN_DIM;
        let mut ctx = Ctx {
            mode,
            p: cfg.dropout,
            heads: cfg.n_heads,
            site: 0,
            params,
            attention: Vec::new(),
        };

        let xin = g.constant(Tensor::matrix(rows, TOKEN_DIM, x)?);
        let pe = g.constant(Tensor::matrix(rows, d, pe)?);
        let emb = linear(g, &ctx, xin, "embed")?;
        let emb = g.add(emb, pe)?;
        let emb = ctx.dropout(g, emb)?;

        let mut h = emb;
        for i in 0..cfg.enc_self_layers {
            h = attn_block(g, &mut ctx, h, None, &format!("enc.{i}.ln1"), &format!("enc.{i}.attn"), &tok_segs, &tok_segs)?;
            h = ffn_block(g, &mut ctx, h, &format!("enc.{i}.ln2"), &format!("enc.{i}.ffn"))?;
        }
        let memory = layer_norm(g, &ctx, h, "enc.ln_out")?;

        let mut q = g.gather_rows(emb, &agent_rows)?;
        for i in 0..cfg.dec_self_layers.max(cfg.dec_cross_layers) {
            if i < cfg.dec_self_layers {
                q = attn_block(
                    g,
                    &mut ctx,
                    q,
                    None,
                    &format!("dec.{i}.ln_self"),
                    &format!("dec.{i}.self"),
                    &agent_segs,
                    &agent_segs,
                )?;
            }
            if i < cfg.dec_cross_layers {
                q = attn_block(
                    g,
                    &mut ctx,
                    q,
                    Some(memory),
                    &format!("dec.{i}.ln_cross"),
                    &format!("dec.{i}.cross"),
                    &agent_segs,
                    &tok_segs,
                )?;
            }
            q = ffn_block(g, &mut ctx, q, &format!("dec.{i}.ln_ffn"), &format!("dec.{i}.ffn"))?;
        }
        let e = layer_norm(g, &ctx, q, "dec.ln_out")?;

        let mut y = e;
        for i in 0..cfg.mlp_hidden.len() {
            y = linear(g, &ctx, y, &format!("head.{i}"))?;
            y = g.relu(y);
        }
        let y = linear(g, &ctx, y, "head.out")?;
        Ok(Forward {
            e,
            y,
            agent_segs,
            attention: ctx.attention,
        })
    }

    /// Features `E` (`N × d_model`) and world-frame actions for the current
    /// (last) state of `history`, dropout off.
    pub fn predict(&self, history: &[JointState]) -> Result<(Tensor, Vec<Vec2>)> {
        let current = history.last().ok_or_else(|| Error::invalid("predict: empty history"))?;
        let first = history.len().saturating_sub(self.cfg.history + 1);
        let states = history[first..]
            .iter()
            .map(|s| FeatState::new(s, &self.normalizer))
            .collect::<Result<Vec<_>>>()?;
        // absolute step indices drive the time encoding, so keep them
        let t = history.len() - 1;
        let padded = pad_prefix(states, first);
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let f = self.forward(&mut g, &params, &[Sample { states: &padded, t }], None)?;
        let yaw = current.goal.yaw();
        let y = g.value(f.y);
        let actions = (0..y.rows())
            .map(|r| self.normalizer.unaction([y.at(r, 0), y.at(r, 1)]).rotate(yaw))
            .collect();
        Ok((g.value(f.e).clone(), actions))
    }

    /// Skill sequence `Z` of a demonstration: one pooled vector per step.
    pub fn embed_demo(&self, demo: &Demonstration) -> Result<Vec<Vec<f64>>> {
        let states = demo
            .steps
            .iter()
            .map(|s| FeatState::new(&s.state, &self.normalizer))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(states.len());
        // bounded batches keep peak memory flat for long episodes
        const CHUNK: usize = 64;
        let mut t0 = 0;
        while t0 < states.len() {
            let t1 = (t0 + CHUNK).min(states.len());
            let samples: Vec<Sample<'_>> = (t0..t1).map(|t| Sample { states: &states, t }).collect();
            let mut g = Graph::new();
            let params = self.bind_frozen(&mut g);
            let f = self.forward(&mut g, &params, &samples, None)?;
            let e = g.value(f.e);
            for &(start, len) in &f.agent_segs {
                let rows: Vec<Vec<f64>> = (start..start + len).map(|r| e.row(r).to_vec()).collect();
                out.push(pool(&rows)?);
            }
            t0 = t1;
        }
        Ok(out)
    }

    pub fn to_json(&self, extra: serde_json::Value) -> Result<String> {
        let params: serde_json::Value = serde_json::from_str(&self.params.to_json()?)?;
        let v = serde_json::json!({
            "format": "macs-model",
            "version": MODEL_VERSION,
            "config": self.cfg,
            "normalizer": self.normalizer,
            "params": params,
            "extra": extra,
        });
        Ok(serde_json::to_string(&v)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        #[derive(Deserialize)]
        struct File {
            format: String,
            version: u32,
            config: EncoderConfig,
            normalizer: Normalizer,
            params: serde_json::Value,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let f: File = serde_json::from_str(text)?;
        if f.format != "macs-model" {
            return Err(Error::invalid(format!("not a model checkpoint: format `{}`", f.format)));
        }
        if f.version != MODEL_VERSION {
            return Err(Error::SchemaVersion {
                found: f.version,
                expected: MODEL_VERSION,
            });
        }
        let params = ParamStore::from_json(&serde_json::to_string(&f.params)?)?;
        let model = SkillModel {
            cfg: f.config,
            params,
            normalizer: f.normalizer,
        };
        model.check_shapes()?;
        Ok((model, f.extra))
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = SkillModel::new(self.cfg.clone(), self.normalizer.clone(), 0)?;
        for (k, t) in &fresh.params.tensors {
            let got = self.params.get(k)?;
            if got.shape != t.shape {
                return Err(Error::Dimension {
                    op: "checkpoint",
                    lhs: t.shape.clone(),
                    rhs: got.shape.clone(),
                });
            }
        }
        if fresh.params.tensors.len() != self.params.tensors.len() {
            return Err(Error::invalid("checkpoint has unexpected parameters"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        write_atomic(path, self.to_json(extra)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        SkillModel::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the checkpoint text without extras: identifies the
    /// weights, normalizer and architecture.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json(serde_json::Value::Null)?.as_bytes()))
    }
}

const MODEL_VERSION: u32 = 1;

/// Puts `states` (which start at absolute step `first`) at their absolute
/// indices; earlier slots hold copies of the first state and are never
/// read, because the window clamps at `t − H ≥ first`.
fn pad_prefix(states: Vec<FeatState>, first: usize) -> Vec<FeatState> {
    if first == 0 {
        return states;
    }
    let mut out = Vec::with_capacity(first + states.len());
    out.extend(std::iter::repeat(states[0].clone()).take(first));
    out.extend(states);
    out
}

fn push_token(x: &mut Vec<f64>, kind: EntityKind, f: &[f64; STATE_DIM]) {
    x.extend_from_slice(&kind.one_hot());
    x.extend_from_slice(f);
}

fn linear(g: &mut Graph, ctx: &Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    let w = ctx.param(&format!("{name}.w"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn layer_norm(g: &mut Graph, ctx: &Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    let gm = ctx.param(&format!("{name}.g"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    g.layer_norm(x, gm, b, LN_EPS)
}

/// Multi-head attention with learned projections. Queries come from `xq`,
/// keys and values from `xkv`.
#[allow(clippy::too_many_arguments)]
fn mha(
    g: &mut Graph,
    ctx: &mut Ctx<'_>,
    xq: Var,
    xkv: Var,
    name: &str,
    heads: usize,
    q_segs: &[Segment],
    k_segs: &[Segment],
) -> Result<Var> {
    let q = linear(g, ctx, xq, &format!("{name}.q"))?;
    let k = linear(g, ctx, xkv, &format!("{name}.k"))?;
    let v = linear(g, ctx, xkv, &format!("{name}.v"))?;
    let a = g.attention(q, k, v, heads, q_segs, k_segs)?;
    ctx.attention.push(a);
    linear(g, ctx, a, &format!("{name}.o"))
}

/// Pre-norm residual attention: `x + Dropout(MHA(LN(x), kv))`, where `kv`
/// is `LN(x)` for self-attention or the encoder memory for cross-attention.
#[allow(clippy::too_many_arguments)]
fn attn_block(
    g: &mut Graph,
    ctx: &mut Ctx<'_>,
    x: Var,
    memory: Option<Var>,
    ln: &str,
    name: &str,
    q_segs: &[Segment],
    k_segs: &[Segment],
) -> Result<Var> {
    let xn = layer_norm(g, ctx, x, ln)?;
    let kv = memory.unwrap_or(xn);
    let a = mha(g, ctx, xn, kv, name, ctx.heads, q_segs, k_segs)?;
    let a = ctx.dropout(g, a)?;
    g.add(x, a)
}

fn ffn_block(g: &mut Graph, ctx: &mut Ctx<'_>, x: Var, ln: &str, name: &str) -> Result<Var> {
    let xn = layer_norm(g, ctx, x, ln)?;
    let h = linear(g, ctx, xn, &format!("{name}.fc1"))?;
    let h = g.relu(h);
    let h = linear(g, ctx, h, &format!("{name}.fc2"))?;
    let h = ctx.dropout(g, h)?;
    g.add(x, h)
}

/// Elementwise average of per-agent features. Each column is summed in
/// sorted order, so the result is bitwise independent of agent order.
pub fn pool(e: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = e.first().ok_or_else(|| Error::Degenerate("pool of an empty set".into()))?;
    if e.iter().any(|row| row.len() != first.len()) {
        return Err(Error::invalid("pool: ragged feature rows"));
    }
    let n = e.len() as f64;
    let mut col = Vec::with_capacity(e.len());
    Ok((0..first.len())
        .map(|j| {
            col.clear();
            col.extend(e.iter().map(|row| row[j]));
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect())
}

/// Featurized demonstration ready for training.
#[derive(Debug, Clone)]
pub struct TrainDemo {
    pub id: String,
    pub states: Vec<FeatState>,
    /// Normalized goal-frame actions, per step per agent.
    pub actions: Vec<Vec<[f64; 2]>>,
    pub weight: f64,
    pub validation: bool,
}

impl TrainDemo {
    pub fn new(d: &Demonstration, norm: &Normalizer, weight: f64) -> Result<Self> {
        let mut states = Vec::with_capacity(d.steps.len());
        let mut actions = Vec::with_capacity(d.steps.len());
        for s in &d.steps {
            states.push(FeatState::new(&s.state, norm)?);
            let yaw = s.state.goal.yaw();
            actions.push(s.actions.iter().map(|a| norm.action(a.rotate(-yaw))).collect());
        }
        Ok(TrainDemo {
            id: d.id.clone(),
            states,
            actions,
            weight,
            validation: false,
        })
    }
}

/// Deterministic 95/5 split by id hash.
pub fn is_validation_id(id: &str) -> bool {
    label_hash(id) % 20 == 0
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_demo: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for e in log {
        let v = e.val_mse.map(|v| format!("{v:.12e}")).unwrap_or_default();
        s.push_str(&format!("{},{:.12e},{}\n", e.epoch, e.train_mse, v));
    }
    s
}

fn epoch_samples(demos: &[TrainDemo], steps_per_demo: usize, validation: bool, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        if d.validation != validation {
            continue;
        }
        let t_len = d.states.len();
        if steps_per_demo == 0 || steps_per_demo >= t_len {
            out.extend((0..t_len).map(|t| (i, t)));
        } else {
            out.extend((0..steps_per_demo).map(|_| (i, rng.below(t_len))));
        }
    }
    out
}

impl SkillModel {
    /// Weighted next-step action MSE of one batch, as a graph node.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        params: &BTreeMap<String, Var>,
        demos: &[TrainDemo],
        batch: &[(usize, usize)],
        mode: Option<TrainMode>,
    ) -> Result<Var> {
        let samples: Vec<Sample<'_>> = batch
            .iter()
            .map(|&(i, t)| Sample {
                states: &demos[i].states,
                t,
            })
            .collect();
        let f = self.forward(g, params, &samples, mode)?;
        let mut target = Vec::new();
        let mut weights = Vec::new();
        for &(i, t) in batch {
            for a in &demos[i].actions[t] {
                target.extend_from_slice(a);
                weights.push(demos[i].weight);
            }
        }
        let target = Tensor::matrix(weights.len(), 2, target)?;
        g.mse(f.y, &target, Some(&weights))
    }

    /// Mean loss over `samples` in evaluation mode.
    pub fn eval_loss(&self, demos: &[TrainDemo], samples: &[(usize, usize)], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut wsum = 0.0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let params = self.bind_frozen(&mut g);
            let l = self.batch_loss(&mut g, &params, demos, chunk, None)?;
            let w: f64 = chunk
                .iter()
                .map(|&(i, t)| demos[i].weight * demos[i].actions[t].len() as f64)
                .sum();
            total += g.value(l).item() * w;
            wsum += w;
        }
        Ok(if wsum > 0.0 { total / wsum } else { f64::NAN })
    }

    /// Minimizes the weighted next-step action MSE with Adam; one entry of
    /// the returned log per epoch.
    pub fn fit(&mut self, demos: &[TrainDemo], opts: &FitOptions) -> Result<Vec<EpochLog>> {
        if demos.iter().all(|d| d.validation) {
            return Err(Error::invalid("fit: no training demonstrations"));
        }
        let names: Vec<String> = self.params.tensors.keys().cloned().collect();
        let refs: Vec<&Tensor> = self.params.tensors.values().collect();
        let mut adam = AdamState::new(&refs, opts.adam);
        let mut log = Vec::with_capacity(opts.epochs);
        let val_samples = epoch_samples(demos, 0, true, &mut Rng::new(0));
        let mut step = 0u64;
        for epoch in 1..=opts.epochs {
            let mut rng = Rng::new(derive_seed(opts.seed, &[label_hash("epoch"), epoch as u64]));
            let mut samples = epoch_samples(demos, opts.steps_per_demo, false, &mut rng);
            rng.shuffle(&mut samples);
            let mut total = 0.0;
            let mut count = 0usize;
            for (b, batch) in samples.chunks(opts.batch_size.max(1)).enumerate() {
                let mut g = Graph::new();
                let params = self.bind(&mut g);
                let mode = TrainMode {
                    seed: opts.seed,
                    step,
                };
                let loss = self.batch_loss(&mut g, &params, demos, batch, Some(mode))?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b, loss: lv });
                }
                g.backward(loss)?;
                let grads: Vec<Tensor> = names.iter().map(|n| g.grad_tensor(params[n])).collect();
                if grads.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Divergence { epoch, batch: b, loss: f64::NAN });
                }
                let mut ps: Vec<&mut Tensor> = self.params.tensors.values_mut().collect();
                adam_step(&mut ps, &grads, &mut adam)?;
                total += lv * batch.len() as f64;
                count += batch.len();
                step += 1;
            }
            let val_mse = if val_samples.is_empty() {
                None
            } else {
                Some(self.eval_loss(demos, &val_samples, opts.batch_size)?)
            };
            log.push(EpochLog {
                epoch,
                train_mse: total / count.max(1) as f64,
                val_mse,
            });
        }
        Ok(log)
    }
}

/// Fits the normalizer on `prior` and trains a fresh encoder on all of it
/// (with a 95/5 validation split by id).
pub fn train_encoder(
    prior: &[Demonstration],
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<(SkillModel, Vec<EpochLog>)> {
    if prior.is_empty() {
        return Err(Error::invalid("train_encoder: empty prior dataset"));
    }
    let norm = Normalizer::fit(prior)?;
    let mut model = SkillModel::new(cfg.clone(), norm, seed)?;
    let mut demos = prior
        .iter()
        .map(|d| TrainDemo::new(d, &model.normalizer, 1.0))
        .collect::<Result<Vec<_>>>()?;
    for d in demos.iter_mut() {
        d.validation = is_validation_id(&d.id);
    }
    if demos.iter().all(|d| d.validation) {
        demos.iter_mut().for_each(|d| d.validation = false);
    }
    let opts = FitOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        steps_per_demo: cfg.steps_per_demo,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        seed,
    };
    let log = model.fit(&demos, &opts)?;
    Ok((model, log))
}

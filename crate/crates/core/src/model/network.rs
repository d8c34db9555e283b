use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{GateInit, GateMode, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{BnStats, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct Stack {
    layers: Vec<ConvBn>,
    proj: Option<ConvBn>,
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Gates,
    Adapters,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pass {
    /// Batch statistics for trainable batch norms and active dropout.
    pub train: bool,
    /// Required in task-aware mode.
    pub subject: Option<u32>,
    /// Skip gates entirely (raw backbone features).
    pub bypass_gates: bool,
}

impl Pass {
    pub fn eval(subject: Option<u32>) -> Self {
        Pass {
            train: false,
            subject,
            bypass_gates: false,
        }
    }

    pub fn train(subject: Option<u32>) -> Self {
        Pass {
            train: true,
            subject,
            bypass_gates: false,
        }
    }
}

/// Tape handles for one stack: pre-gate output, gate vector, gated output.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub u: Var,
    pub g: Option<Var>,
    pub h: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub layers: Vec<LayerVars>,
    /// Temporal mean of the last gated stack output.
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub u: Tensor<T>,
    pub g: Option<Tensor<T>>,
    pub h: Tensor<T>,
}

/// Per-stack intermediate values of a single-sample forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub pooled: Tensor<T>,
}

/// Frozen-or-trainable convolutional backbone with channel gates and a
/// shared linear classifier.
#[derive(Clone, Debug)]
pub struct GatedModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    groups: Vec<Group>,
    bn: Vec<BnStats<T>>,
    embed: ConvBn,
    stacks: Vec<Stack>,
    gate_sets: Vec<Vec<GateParams>>,
    subjects: BTreeMap<u32, usize>,
    adapters: Vec<Dense>,
    classifier: Dense,
    init_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

/// Gate value at initialization: `sigmoid(0)`, up to the small second-layer draw.
pub const INITIAL_GATE: f64 = 0.5;

fn same_padding(kernel: usize) -> usize {
    kernel / 2
}

impl<T: Real> GatedModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = GatedModel {
            params: ParamStore::new(),
            groups: Vec::new(),
            bn: Vec::new(),
            embed: ConvBn {
                w: ParamId(0),
                gamma: ParamId(0),
                beta: ParamId(0),
                bn: 0,
                stride: 1,
                padding: 0,
            },
            stacks: Vec::new(),
            gate_sets: Vec::new(),
            subjects: BTreeMap::new(),
            adapters: Vec::new(),
            classifier: Dense {
                w: ParamId(0),
                b: None,
            },
            init_rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d00d),
            config,
        };
        let bb = model.config.backbone.clone();
        model.embed = model.conv_bn("backbone.embed", bb.in_channels, bb.embed_width, 1, 1)?;
        let mut c_in = bb.embed_width;
        for (si, s) in bb.stacks.iter().enumerate() {
            let stride_at = s.kernels.iter().position(|&k| k > 1).unwrap_or(0);
            let mut layers = Vec::new();
            let mut c = c_in;
            for (li, &k) in s.kernels.iter().enumerate() {
                let stride = if li == stride_at { s.stride } else { 1 };
                let name = format!("backbone.stack{si}.conv{li}");
                layers.push(model.conv_bn(&name, c, s.channels, k, stride)?);
                c = s.channels;
            }
            let proj = if c_in != s.channels || s.stride != 1 {
                Some(model.conv_bn(&format!("backbone.stack{si}.proj"), c_in, s.channels, 1, s.stride)?)
            } else {
                None
            };
            model.stacks.push(Stack { layers, proj });
            c_in = s.channels;
        }
        if model.config.gates.is_some() {
            let set = model.new_gate_set()?;
            model.gate_sets.push(set);
        }
        let mut feat = c_in;
        let ad = model.config.adapters;
        for i in 0..ad.layers {
            let w = model.init_param(
                &format!("adapter{i}.weight"),
                &[ad.width, feat],
                (2.0 / feat as f64).sqrt(),
                Group::Adapters,
            )?;
            let b = model.add_param(&format!("adapter{i}.bias"), Tensor::zeros(&[ad.width])?, Group::Adapters);
            model.adapters.push(Dense { w, b: Some(b) });
            feat = ad.width;
        }
        let k = model.config.num_classes;
        let w = model.init_param("classifier.weight", &[k, feat], (1.0 / feat as f64).sqrt(), Group::Classifier)?;
        let b = if model.config.classifier_bias {
            Some(model.add_param("classifier.bias", Tensor::zeros(&[k])?, Group::Classifier))
        } else {
            None
        };
        model.classifier = Dense { w, b };
        Ok(model)
    }

    fn add_param(&mut self, name: &str, value: Tensor<T>, group: Group) -> ParamId {
        self.groups.push(group);
        self.params.add(name, value, true)
    }

    fn init_param(&mut self, name: &str, shape: &[usize], std: f64, group: Group) -> Result<ParamId> {
        let value = Tensor::randn(shape, std, &mut self.init_rng)?;
        Ok(self.add_param(name, value, group))
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<ConvBn> {
        let w = self.init_param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel],
            (2.0 / (c_in * kernel) as f64).sqrt(),
            Group::Backbone,
        )?;
        let gamma = self.add_param(&format!("{name}.bn.gamma"), Tensor::full(&[c_out], T::one())?, Group::Backbone);
        let beta = self.add_param(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out])?, Group::Backbone);
        self.bn.push(BnStats::new(c_out));
        Ok(ConvBn {
            w,
            gamma,
            beta,
            bn: self.bn.len() - 1,
            stride,
            padding: same_padding(kernel),
        })
    }

    fn new_gate_set(&mut self) -> Result<Vec<GateParams>> {
        let gc = self.config.gates.ok_or_else(|| Error::invalid("model has no gates"))?;
        let set_idx = self.gate_sets.len();
        let widths: Vec<usize> = self.config.backbone.stacks.iter().map(|s| s.channels).collect();
        let mut set = Vec::new();
        for (li, c) in widths.into_iter().enumerate() {
            let hidden = gc.hidden(c);
            let w1 = self.init_param(
                &format!("gate{set_idx}.stack{li}.w1"),
                &[hidden, c],
                (2.0 / c as f64).sqrt(),
                Group::Gates,
            )?;
            // small second layer: every gate starts close to 0.5
            let w2 = self.init_param(
                &format!("gate{set_idx}.stack{li}.w2"),
                &[c, hidden],
                0.01,
                Group::Gates,
            )?;
            set.push(GateParams { w1, w2 });
        }
        Ok(set)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(id, _)| self.groups[id.0] == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        for id in self.ids_in(group) {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Mark every backbone parameter non-trainable. Batch norms then run on
    /// their stored statistics.
    pub fn freeze_backbone(&mut self) {
        self.set_group_trainable(Group::Backbone, false);
    }

    pub fn backbone_frozen(&self) -> bool {
        !self.params.get(self.embed.gamma).trainable
    }

    pub fn bn_stats(&self) -> &[BnStats<T>] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats<T>] {
        &mut self.bn
    }

    pub fn has_gates(&self) -> bool {
        !self.gate_sets.is_empty()
    }

    pub fn gate_set_count(&self) -> usize {
        self.gate_sets.len()
    }

    pub fn gate_params(&self, set: usize) -> &[GateParams] {
        &self.gate_sets[set]
    }

    pub fn classifier_weight(&self) -> ParamId {
        self.classifier.w
    }

    pub fn classifier_bias(&self) -> Option<ParamId> {
        self.classifier.b
    }

    pub fn subjects(&self) -> &BTreeMap<u32, usize> {
        &self.subjects
    }

    /// Checksum of all backbone weights and batch-norm statistics.
    pub fn backbone_checksum(&self) -> u64 {
        let ids = self.ids_in(Group::Backbone);
        self.bn.iter().fold(self.params.checksum_of(&ids), |acc, s| {
            acc.rotate_left(5) ^ s.running_mean.checksum() ^ s.running_var.checksum().rotate_left(1)
        })
    }

    pub fn count_parameters(&self) -> ParamCount {
        let total: usize = self.params.iter().map(|(_, p)| p.numel()).sum();
        let trainable: usize = self.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.numel()).sum();
        ParamCount {
            total,
            trainable,
            fraction: trainable as f64 / total as f64,
        }
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Register subject `t` in task-aware mode and give it its own gate set.
    ///
    /// The first registered subject takes the initial set. Later subjects get
    /// a copy of the most recent set (warm) or a fresh draw (cold); all older
    /// sets are frozen.
    pub fn clone_gates_for_task(&mut self, t: u32) -> Result<usize> {
        let init = match self.config.mode {
            GateMode::TaskFree => {
                return Err(Error::WrongMode {
                    mode: "task_free",
                    what: "per-task gate sets".into(),
                })
            }
            GateMode::TaskAware { init } => init,
        };
        if let Some(&idx) = self.subjects.get(&t) {
            return Ok(idx);
        }
        if self.subjects.is_empty() {
            self.subjects.insert(t, 0);
            return Ok(0);
        }
        let last = self.gate_sets.len() - 1;
        let set = self.new_gate_set()?;
        if init == GateInit::Warm {
            for (dst, src) in set.iter().zip(self.gate_sets[last].clone()) {
                let v1 = self.params.value(src.w1).clone();
                let v2 = self.params.value(src.w2).clone();
                self.params.get_mut(dst.w1).value = v1;
                self.params.get_mut(dst.w2).value = v2;
            }
        }
        for old in &self.gate_sets {
            for g in old {
                self.params.set_trainable(g.w1, false);
                self.params.set_trainable(g.w2, false);
            }
        }
        self.gate_sets.push(set);
        let idx = self.gate_sets.len() - 1;
        self.subjects.insert(t, idx);
        Ok(idx)
    }

    fn gate_set_for(&self, subject: Option<u32>) -> Result<Option<usize>> {
        if self.gate_sets.is_empty() {
            return Ok(None);
        }
        match self.config.mode {
            GateMode::TaskFree => Ok(Some(0)),
            GateMode::TaskAware { .. } => {
                let t = subject.ok_or_else(|| Error::WrongMode {
                    mode: "task_aware",
                    what: "forward without a subject id".into(),
                })?;
                self.subjects.get(&t).copied().map(Some).ok_or(Error::UnknownSubject(t))
            }
        }
    }

    fn apply_conv_bn(&mut self, tape: &mut Tape<T>, x: Var, layer: &ConvBn, train: bool) -> Result<Var> {
        let w = tape.param(&self.params, layer.w);
        let y = tape.conv1d(x, w, None, layer.stride, layer.padding)?;
        let gamma = tape.param(&self.params, layer.gamma);
        let beta = tape.param(&self.params, layer.beta);
        let bn_train = train && self.params.get(layer.gamma).trainable;
        tape.batchnorm(y, gamma, beta, &mut self.bn[layer.bn], bn_train)
    }

    /// Record a batched forward pass on `tape`. `x` is `[batch, c0, d0]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, pass: Pass) -> Result<Forward> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != self.config.backbone.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                dim: "input channels",
                expected: self.config.backbone.in_channels,
                got: if xs.len() == 3 { xs[1] } else { 0 },
            });
        }
        let gate_set = if pass.bypass_gates {
            None
        } else {
            self.gate_set_for(pass.subject)?
        };
        let embed = self.embed.clone();
        let e = self.apply_conv_bn(tape, x, &embed, pass.train)?;
        let mut h = tape.relu(e);
        let mut layers = Vec::with_capacity(self.stacks.len());
        for si in 0..self.stacks.len() {
            let stack = self.stacks[si].clone();
            let mut y = h;
            let n = stack.layers.len();
            for (li, layer) in stack.layers.iter().enumerate() {
                y = self.apply_conv_bn(tape, y, layer, pass.train)?;
                if li + 1 < n {
                    y = tape.relu(y);
                }
            }
            let skip = match &stack.proj {
                Some(p) => self.apply_conv_bn(tape, h, p, pass.train)?,
                None => h,
            };
            let sum = tape.add(y, skip)?;
            let u = tape.relu(sum);
            let (g, out) = match gate_set {
                Some(set) => {
                    let gp = self.gate_sets[set][si];
                    let z = tape.mean_pool(u)?;
                    let w1 = tape.param(&self.params, gp.w1);
                    let a = tape.linear(z, w1, None)?;
                    let a = tape.relu(a);
                    let w2 = tape.param(&self.params, gp.w2);
                    let s = tape.linear(a, w2, None)?;
                    let g = tape.sigmoid(s);
                    let hv = tape.channel_scale(u, g)?;
                    (Some(g), hv)
                }
                None => (None, u),
            };
            layers.push(LayerVars { u, g, h: out });
            h = out;
        }
        let pooled = tape.mean_pool(h)?;
        let mut feat = pooled;
        let dropout = self.config.adapters.dropout;
        for ad in self.adapters.clone() {
            let w = tape.param(&self.params, ad.w);
            let b = ad.b.map(|b| tape.param(&self.params, b));
            let y = tape.linear(feat, w, b)?;
            feat = tape.relu(y);
            if pass.train && dropout > 0.0 {
                feat = tape.dropout(feat, dropout, &mut self.dropout_rng)?;
            }
        }
        let w = tape.param(&self.params, self.classifier.w);
        let b = self.classifier.b.map(|b| tape.param(&self.params, b));
        let logits = tape.linear(feat, w, b)?;
        Ok(Forward { layers, pooled, logits })
    }

    /// Logits `[batch, classes]` in evaluation mode.
    pub fn predict(&mut self, x: &Tensor<T>, subject: Option<u32>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, Pass::eval(subject))?;
        Ok(tape.value(f.logits).clone())
    }

    /// Pooled backbone features `[batch, channels]`, gates bypassed.
    pub fn backbone_features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = Pass {
            bypass_gates: true,
            ..Pass::eval(None)
        };
        let f = self.forward(&mut tape, xv, pass)?;
        Ok(tape.value(f.pooled).clone())
    }

    /// Single-sample evaluation forward on `x: [c0, d0]`, optionally keeping
    /// every stack's pre-gate output, gate and gated output.
    pub fn model_forward(
        &mut self,
        x: &Tensor<T>,
        subject: Option<u32>,
        capture: bool,
    ) -> Result<(Tensor<T>, Option<Trace<T>>)> {
        if x.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected [channels, length]".into(),
            });
        }
        let mut tape = Tape::new();
        let xb = x.clone().reshape(&[1, x.dim(0), x.dim(1)])?;
        let xv = tape.constant(xb);
        let f = self.forward(&mut tape, xv, Pass::eval(subject))?;
        let unbatch = |t: &Tensor<T>| -> Result<Tensor<T>> { t.clone().reshape(&t.shape()[1..]) };
        let logits = unbatch(tape.value(f.logits))?;
        let trace = if capture {
            let mut layers = Vec::new();
            for lv in &f.layers {
                layers.push(LayerTrace {
                    u: unbatch(tape.value(lv.u))?,
                    g: lv.g.map(|g| unbatch(tape.value(g))).transpose()?,
                    h: unbatch(tape.value(lv.h))?,
                });
            }
            Some(Trace {
                layers,
                pooled: unbatch(tape.value(f.pooled))?,
            })
        } else {
            None
        };
        Ok((logits, trace))
    }

    /// Fresh gates, adapters and classifier on top of `src`'s backbone.
    pub fn from_backbone(config: ModelConfig, src: &GatedModel<T>, seed: u64) -> Result<Self> {
        let mut model = GatedModel::new(config, seed)?;
        model.load_backbone_from(src)?;
        Ok(model)
    }

    /// Copy backbone weights and batch-norm statistics from a model with the
    /// same backbone configuration.
    ///
    /// Loading an ungated backbone into a gated model divides the weights of
    /// every convolution that reads a gated stack output by the initial gate
    /// value, so the gated model starts out computing the source function.
    pub fn load_backbone_from(&mut self, src: &GatedModel<T>) -> Result<()> {
        if src.config.backbone != self.config.backbone {
            return Err(Error::invalid("backbone configurations differ"));
        }
        for (dst, s) in self.ids_in(Group::Backbone).into_iter().zip(src.ids_in(Group::Backbone)) {
            self.params.get_mut(dst).value = src.params.value(s).clone();
        }
        self.bn = src.bn.clone();
        let ratio = Self::nominal_gate(src) / Self::nominal_gate(self);
        if ratio != 1.0 {
            let r = T::lit(ratio);
            for id in self.gate_consumers()? {
                let p = self.params.get_mut(id);
                p.value = p.value.map(|v| v * r);
            }
        }
        Ok(())
    }

    fn nominal_gate(model: &GatedModel<T>) -> f64 {
        if model.config.gates.is_some() {
            INITIAL_GATE
        } else {
            1.0
        }
    }

    /// Convolution weights applied directly to a gated stack output.
    fn gate_consumers(&self) -> Result<Vec<ParamId>> {
        let mut ids = Vec::new();
        for stack in self.stacks.iter().skip(1) {
            ids.push(stack.layers[0].w);
            match &stack.proj {
                Some(p) => ids.push(p.w),
                None => return Err(Error::invalid("cannot rescale an identity skip that follows a gate")),
            }
        }
        Ok(ids)
    }

    pub(crate) fn names_and_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (_, p) in self.params.iter() {
            out.push((p.name.clone(), &p.value));
        }
        for (i, s) in self.bn.iter().enumerate() {
            out.push((format!("bn{i}.running_mean"), &s.running_mean));
            out.push((format!("bn{i}.running_var"), &s.running_var));
        }
        out
    }

    pub(crate) fn ensure_gate_sets(&mut self, n: usize) -> Result<()> {
        while self.gate_sets.len() < n {
            let set = self.new_gate_set()?;
            self.gate_sets.push(set);
        }
        Ok(())
    }

    pub(crate) fn set_subjects(&mut self, subjects: BTreeMap<u32, usize>) {
        self.subjects = subjects;
    }
}

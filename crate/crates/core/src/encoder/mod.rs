//! Pre-LN transformer encoder in dense, Switch and Omni-router flavours.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::moe::{
    self, DispatchResult, Expert, MoeLayer, MoeOptions, Perturbation, Router, RouterMode,
};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Switch,
    Omni,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dense, Variant::Switch, Variant::Omni];

    pub fn is_moe(self) -> bool {
        self != Variant::Dense
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Switch => "switch",
            Variant::Omni => "omni",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Variant::Dense => 0,
            Variant::Switch => 1,
            Variant::Omni => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
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
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(Variant::Dense),
            "switch" => Ok(Variant::Switch),
            "omni" | "omni-router" | "omni_router" => Ok(Variant::Omni),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }
}

/// Architecture descriptor shared by all three model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// 1 for dense.
    pub experts: usize,
    /// Includes the CTC blank at index 0.
    pub vocab_size: usize,
    pub frame_stack: usize,
    pub feat_dim: usize,
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk(variant: Variant, experts: usize, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            layers: 4,
            embed_dim: 64,
            ffn_dim: 256,
            heads: 4,
            experts: if variant.is_moe() { experts } else { 1 },
            vocab_size,
            frame_stack: 4,
            feat_dim: 80,
        }
    }

    /// 16 blocks, FFN width 4096, 8k vocabulary.
    pub fn large(variant: Variant, embed_dim: usize, experts: usize) -> Self {
        ModelConfig {
            variant,
            layers: 16,
            embed_dim,
            ffn_dim: 4096,
            heads: 8,
            experts: if variant.is_moe() { experts } else { 1 },
            vocab_size: 8000,
            frame_stack: 4,
            feat_dim: 80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("experts", self.experts),
            ("frame_stack", self.frame_stack),
            ("feat_dim", self.feat_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config(
                "vocab_size",
                "needs at least blank plus one label",
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "embed_dim {} not divisible by {} heads",
                    self.embed_dim, self.heads
                ),
            ));
        }
        if self.variant == Variant::Dense && self.experts != 1 {
            return Err(Error::config(
                "experts",
                format!("dense variant takes exactly 1 expert, got {}", self.experts),
            ));
        }
        Ok(())
    }

    pub fn num_moe_layers(&self) -> usize {
        if self.variant.is_moe() {
            self.layers
        } else {
            0
        }
    }

    /// Parameter count derived from the architecture formulas alone.
    pub fn symbolic_param_count(&self) -> ParamCounts {
        let (d, f, n, l) = (self.embed_dim, self.ffn_dim, self.experts, self.layers);
        let ffn = 2 * d * f + f + d;
        let routers = match self.variant {
            Variant::Dense => 0,
            Variant::Switch => l * d * n,
            Variant::Omni => d * n,
        };
        let ffn_total = if self.variant.is_moe() {
            l * n * ffn
        } else {
            l * ffn
        };
        let counts = ParamCounts {
            frontend: self.frame_stack * self.feat_dim * d + d,
            attention: l * 4 * (d * d + d),
            layer_norm: l * 4 * d + 2 * d,
            ffn: ffn_total,
            routers,
            head: d * self.vocab_size,
            total: 0,
        };
        counts.with_total()
    }
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub frontend: usize,
    pub attention: usize,
    pub layer_norm: usize,
    /// Dense FFNs or all experts.
    pub ffn: usize,
    pub routers: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamCounts {
    fn with_total(mut self) -> Self {
        self.total =
            self.frontend + self.attention + self.layer_norm + self.ffn + self.routers + self.head;
        self
    }

    /// Encoder blocks only: everything except frontend and output head.
    pub fn blocks(&self) -> usize {
        self.total - self.frontend - self.head
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(Expert),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: (ParamId, ParamId),
    pub attention: Attention,
    pub ln2: (ParamId, ParamId),
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub frontend: (ParamId, ParamId),
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: (ParamId, ParamId),
    pub head: ParamId,
}

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: rng::StreamRng,
}

impl<S: Real> Init<'_, S> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.uniform(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
        )
    }

    fn fill(&mut self, name: String, len: usize, value: f64) -> Result<ParamId> {
        self.store
            .add(name, Tensor::full(&[len], S::from_f64(value)))
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.fill(format!("{name}.gain"), d, 1.0)?,
            self.fill(format!("{name}.bias"), d, 0.0)?,
        ))
    }

    fn expert(&mut self, name: &str, d: usize, f: usize) -> Result<Expert> {
        Ok(Expert {
            w1: self.linear(&format!("{name}.w1"), d, f)?,
            b1: self.fill(format!("{name}.b1"), f, 0.0)?,
            w2: self.linear(&format!("{name}.w2"), f, d)?,
            b2: self.fill(format!("{name}.b2"), d, 0.0)?,
        })
    }
}

/// Per-call switches for [`Model::forward`].
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub perturb: Option<&'a mut Perturbation>,
    pub detach_gate: bool,
}

/// Output of a forward pass over a batch. Rows of all utterances are packed
/// back to back; `segments[b]` gives `(start, len)` of utterance `b`.
pub struct ForwardOutput<S> {
    pub logits: Var,
    pub segments: Vec<(usize, usize)>,
    pub dispatches: Vec<DispatchResult<S>>,
}

impl<S: Real> Model<S> {
    /// Builds and initializes a model. Identical `(config, seed)` give
    /// bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.embed_dim, config.ffn_dim);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::stream(seed, "init"),
        };
        let stacked = config.frame_stack * config.feat_dim;
        let frontend = (
            init.linear("frontend", stacked, d)?,
            init.fill("frontend.bias".into(), d, 0.0)?,
        );
        let router_bound = 1.0 / (d as f64).sqrt();
        let shared = match config.variant {
            Variant::Omni => Some(init.uniform(
                "router.shared.weight".into(),
                &[d, config.experts],
                router_bound,
            )?),
            _ => None,
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("blocks.{l}");
            let ln1 = init.layer_norm(&format!("{p}.ln1"), d)?;
            let attention = Attention {
                wq: init.linear(&format!("{p}.attn.q"), d, d)?,
                bq: init.fill(format!("{p}.attn.q.bias"), d, 0.0)?,
                wk: init.linear(&format!("{p}.attn.k"), d, d)?,
                bk: init.fill(format!("{p}.attn.k.bias"), d, 0.0)?,
                wv: init.linear(&format!("{p}.attn.v"), d, d)?,
                bv: init.fill(format!("{p}.attn.v.bias"), d, 0.0)?,
                wo: init.linear(&format!("{p}.attn.o"), d, d)?,
                bo: init.fill(format!("{p}.attn.o.bias"), d, 0.0)?,
            };
            let ln2 = init.layer_norm(&format!("{p}.ln2"), d)?;
            let ffn = match config.variant {
                Variant::Dense => FeedForward::Dense(init.expert(&format!("{p}.ffn"), d, f)?),
                Variant::Switch | Variant::Omni => {
                    let router = match shared {
                        Some(weight) => Router {
                            weight,
                            mode: RouterMode::Shared,
                        },
                        None => Router {
                            weight: init.uniform(
                                format!("{p}.router.weight"),
                                &[d, config.experts],
                                router_bound,
                            )?,
                            mode: RouterMode::PerLayer,
                        },
                    };
                    let experts = (0..config.experts)
                        .map(|j| init.expert(&format!("{p}.experts.{j}"), d, f))
                        .collect::<Result<Vec<_>>>()?;
                    FeedForward::Moe(MoeLayer {
                        router,
                        experts,
                        layer_index: l,
                    })
                }
            };
            blocks.push(EncoderBlock {
                ln1,
                attention,
                ln2,
                ffn,
            });
        }
        let final_ln = init.layer_norm("final_ln", d)?;
        let head = init.linear("head", d, config.vocab_size)?;
        Ok(Model {
            config,
            params: store,
            frontend,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense(_) => None,
        })
    }

    /// Distinct router weight tensors.
    pub fn router_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.moe_layers().map(|m| m.router.weight).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Parameter counts from the actual tensors.
    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for p in self.params.iter() {
            let n = p.value.numel();
            let name = p.name.as_str();
            if name.starts_with("frontend") {
                c.frontend += n;
            } else if name.starts_with("head") {
                c.head += n;
            } else if name.contains(".router.") || name.starts_with("router.") {
                c.routers += n;
            } else if name.contains(".attn.") {
                c.attention += n;
            } else if name.contains("ln") {
                c.layer_norm += n;
            } else {
                c.ffn += n;
            }
        }
        c.with_total()
    }

    /// Cast every parameter to another precision, keeping the structure.
    pub fn cast<T: Real>(&self) -> Model<T> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params
                .add(p.name.clone(), p.value.cast())
                .expect("names are unique in the source store");
        }
        Model {
            config: self.config,
            params,
            frontend: self.frontend,
            blocks: self.blocks.clone(),
            final_ln: self.final_ln,
            head: self.head,
        }
    }

    /// Stacks `frame_stack` consecutive frames per row; the last row is
    /// zero-padded when the length is not a multiple.
    pub fn stack_frames(&self, batch: &Batch) -> Result<(Tensor<S>, Vec<(usize, usize)>)> {
        if batch.feat_dim != self.config.feat_dim {
            return Err(Error::shape(
                "forward",
                &[self.config.feat_dim],
                &[batch.feat_dim],
            ));
        }
        let fs = self.config.frame_stack;
        let fd = self.config.feat_dim;
        let mut segments = Vec::with_capacity(batch.len());
        let mut start = 0;
        for &len in &batch.lengths {
            let rows = len.div_ceil(fs);
            segments.push((start, rows));
            start += rows;
        }
        let width = fs * fd;
        let mut data = vec![S::zero(); start * width];
        for (b, &(seg_start, rows)) in segments.iter().enumerate() {
            let feats = batch.utterance_features(b);
            for r in 0..rows {
                let dst = &mut data[(seg_start + r) * width..(seg_start + r + 1) * width];
                for k in 0..fs {
                    let frame = r * fs + k;
                    if frame >= batch.lengths[b] {
                        break;
                    }
                    for (o, &x) in dst[k * fd..(k + 1) * fd]
                        .iter_mut()
                        .zip(&feats[frame * fd..(frame + 1) * fd])
                    {
                        *o = S::from_f64(f64::from(x));
                    }
                }
            }
        }
        Ok((Tensor::new(vec![start, width], data)?, segments))
    }

    /// Full encoder pass. Only real (unpadded) frames enter the network, so
    /// padding never influences attention, routing or statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<S>> {
        let (stacked, segments) = self.stack_frames(batch)?;
        let total = stacked.rows();
        if total == 0 {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let store = &self.params;
        let x = tape.constant(stacked);
        let w = tape.param(store, self.frontend.0);
        let b = tape.param(store, self.frontend.1);
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, b)?;
        let pe = tape.constant(positional_encoding(&segments, self.config.embed_dim));
        let mut h = tape.add(h, pe)?;

        let key_mask = vec![true; total];
        let mut dispatches = Vec::with_capacity(self.config.num_moe_layers());
        for block in &self.blocks {
            let normed = layer_norm(tape, store, h, block.ln1)?;
            let attended = self.attention(tape, &block.attention, normed, &segments, &key_mask)?;
            h = tape.add(h, attended)?;
            let normed = layer_norm(tape, store, h, block.ln2)?;
            let ff = match &block.ffn {
                FeedForward::Dense(e) => e.forward(tape, store, normed)?,
                FeedForward::Moe(layer) => {
                    let moe_opts = MoeOptions {
                        perturb: opts.perturb.as_deref_mut(),
                        detach_gate: opts.detach_gate,
                    };
                    let (y, d) = moe::moe_forward(tape, store, layer, normed, moe_opts)?;
                    dispatches.push(d);
                    y
                }
            };
            h = tape.add(h, ff)?;
        }
        let h = layer_norm(tape, store, h, self.final_ln)?;
        let head = tape.param(store, self.head);
        let logits = tape.matmul(h, head)?;
        Ok(ForwardOutput {
            logits,
            segments,
            dispatches,
        })
    }

    /// Self-attention sublayer: projections, attention, output projection.
    pub fn attention(
        &self,
        tape: &mut Tape<S>,
        a: &Attention,
        x: Var,
        segments: &[(usize, usize)],
        key_mask: &[bool],
    ) -> Result<Var> {
        let store = &self.params;
        let q = linear(tape, store, a.wq, a.bq, x)?;
        let k = linear(tape, store, a.wk, a.bk, x)?;
        let v = linear(tape, store, a.wv, a.bv, x)?;
        let ctx = tape.attention(q, k, v, self.config.heads, segments, key_mask)?;
        linear(tape, store, a.wo, a.bo, ctx)
    }
}

fn linear<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    w: ParamId,
    b: ParamId,
    x: Var,
) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn layer_norm<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    (gain, bias): (ParamId, ParamId),
) -> Result<Var> {
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Fixed sinusoidal encodings, restarting at position 0 in every segment.
pub fn positional_encoding<S: Real>(segments: &[(usize, usize)], d: usize) -> Tensor<S> {
    let total: usize = segments.iter().map(|s| s.1).sum();
    let mut data = vec![S::zero(); total * d];
    for &(start, len) in segments {
        for pos in 0..len {
            let row = &mut data[(start + pos) * d..(start + pos + 1) * d];
            for i in 0..d {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let angle = pos as f64 * freq;
                row[i] = S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![total, d], data).expect("segment rows cover the buffer")
}

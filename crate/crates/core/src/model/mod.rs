//! Segmentation network: patch embedding, a plain transformer block,
//! a patch merge, three perspective blocks sharing one codec and one
//! prototype bank, and an all-MLP multi-scale head.

mod checkpoint;
mod config;
mod train;

use std::rc::Rc;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, RecFlow, PATCH};
pub use train::{LossParts, Phase, SgdMomentum, StepReport, TrainConfig, TrainState};

use crate::attention::{calibrate_graph, pmp_chain_graph, StepProjections};
use crate::bank::PrototypeBank;
use crate::codec::{reconstruction_loss_graph, PerspectiveCodec};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{AttentionStats, Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const IGNORE_LABEL: u8 = 255;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Mlp {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct PlainLayer {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct PerspectiveBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    mlp: Mlp,
}

/// Parameters and layer layout.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    embed: Linear,
    plain: Vec<PlainLayer>,
    merge: Linear,
    blocks: Vec<PerspectiveBlock>,
    codec: Option<PerspectiveCodec>,
    head: [Linear; 2],
}

/// What the forward pass may use besides the parameters.
pub struct ForwardContext<'a> {
    pub phase: Phase,
    pub bank: Option<&'a PrototypeBank>,
    /// Source for the stochastic prototype pull; `None` disables it.
    pub rng: Option<&'a mut Rng>,
}

impl<'a> ForwardContext<'a> {
    pub fn warmup() -> Self {
        Self { phase: Phase::Warmup, bank: None, rng: None }
    }

    pub fn pmp(bank: &'a PrototypeBank) -> Self {
        Self { phase: Phase::Pmp, bank: Some(bank), rng: None }
    }
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    /// `(H*W) x K` logits at input resolution.
    pub logits: Var,
    /// Sum of block reconstruction distances (a zero constant without the codec).
    pub rec_loss: Var,
    /// Plain block output followed by each perspective block output.
    pub features: Vec<Var>,
    /// Combined descriptor maps, one per perspective block.
    pub descriptors: Vec<Var>,
    /// Times a pseudo-perspective feature entered an attention chain.
    pub pseudo_uses: usize,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H x W x K`.
    pub logits: Tensor,
    pub rec_loss: f64,
    pub features: Vec<Tensor>,
    /// Bank-ready descriptors (flattened or pooled), one per perspective block.
    pub descriptors: Vec<Vec<f64>>,
    pub pseudo_uses: usize,
    pub attention: AttentionStats,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).fork(0x6d6f_6465_6c);
        let mut params = ParamStore::new();
        let [c0, c1, ..] = cfg.widths;
        let mut lin = |p: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool| -> Result<Linear> {
            let gain = init_gain(name);
            let w = p.normal(&format!("{name}.w"), &[i, o], gain / (i as f64).sqrt(), &mut rng)?;
            let b = if bias { Some(p.constant(&format!("{name}.b"), &[o], 0.0)?) } else { None };
            Ok(Linear { w, b })
        };
        let norm = |p: &mut ParamStore, name: &str, c: usize| -> Result<Norm> {
            Ok(Norm {
                gamma: p.constant(&format!("{name}.gamma"), &[c], 1.0)?,
                beta: p.constant(&format!("{name}.beta"), &[c], 0.0)?,
            })
        };
        let embed = lin(&mut params, "embed", PATCH * PATCH * cfg.in_channels, c0, true)?;
        let mut plain = Vec::new();
        for l in 0..cfg.plain_layers {
            let n = format!("plain.{l}");
            plain.push(PlainLayer {
                ln1: norm(&mut params, &format!("{n}.ln1"), c0)?,
                q: lin(&mut params, &format!("{n}.q"), c0, c0, false)?,
                k: lin(&mut params, &format!("{n}.k"), c0, c0, false)?,
                v: lin(&mut params, &format!("{n}.v"), c0, c0, false)?,
                o: lin(&mut params, &format!("{n}.o"), c0, c0, true)?,
                ln2: norm(&mut params, &format!("{n}.ln2"), c0)?,
                mlp: Mlp {
                    up: lin(&mut params, &format!("{n}.mlp.up"), c0, cfg.mlp_ratio * c0, true)?,
                    down: lin(&mut params, &format!("{n}.mlp.down"), cfg.mlp_ratio * c0, c0, true)?,
                },
            });
        }
        let merge = lin(&mut params, "merge", 4 * c0, c1, true)?;
        let mut blocks = Vec::new();
        for b in 0..3 {
            let n = format!("ppt.{b}");
            blocks.push(PerspectiveBlock {
                q: lin(&mut params, &format!("{n}.q"), c1, c1, false)?,
                k: lin(&mut params, &format!("{n}.k"), c1, c1, false)?,
                v: lin(&mut params, &format!("{n}.v"), c1, c1, false)?,
                o: lin(&mut params, &format!("{n}.o"), c1, c1, true)?,
                ln2: norm(&mut params, &format!("{n}.ln2"), c1)?,
                mlp: Mlp {
                    up: lin(&mut params, &format!("{n}.mlp.up"), c1, cfg.mlp_ratio * c1, true)?,
                    down: lin(&mut params, &format!("{n}.mlp.down"), cfg.mlp_ratio * c1, c1, true)?,
                },
            });
        }
        let fused = c0 + 3 * c1;
        let head = [
            lin(&mut params, "head.0", fused, cfg.head_hidden, true)?,
            lin(&mut params, "head.1", cfg.head_hidden, cfg.classes, true)?,
        ];
        let codec = if cfg.use_pmp {
            let g = cfg.coarse_grid();
            let mut crng = rng.fork(1);
            Some(PerspectiveCodec::new(cfg.codec, (g, g, c1), &mut params, &mut crng, "codec")?)
        } else {
            None
        };
        Ok(Self { cfg, params, embed, plain, merge, blocks, codec, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codec(&self) -> Option<&PerspectiveCodec> {
        self.codec.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Length of the vectors the bank stores.
    pub fn bank_dim(&self) -> Option<usize> {
        let codec = self.codec.as_ref()?;
        Some(if self.cfg.pooled_descriptor {
            codec.descriptor_shape()[2]
        } else {
            codec.descriptor_len()
        })
    }

    pub fn new_bank(&self) -> Result<Option<PrototypeBank>> {
        self.bank_dim().map(|d| PrototypeBank::new(self.cfg.prototypes, d)).transpose()
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = l.b.map(|b| g.param(&self.params, b));
        g.linear(x, w, b)
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let gm = g.param(&self.params, n.gamma);
        let bt = g.param(&self.params, n.beta);
        let y = g.mul_row(y, gm)?;
        g.add_bias(y, bt)
    }

    fn mlp(&self, g: &mut Graph, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.linear(g, x, &m.up)?;
        let h = g.gelu(h);
        self.linear(g, h, &m.down)
    }

    fn self_attention(&self, g: &mut Graph, x: Var, q: &Linear, k: &Linear, v: &Linear) -> Result<Var> {
        let qv = self.linear(g, x, q)?;
        let kv = self.linear(g, x, k)?;
        let vv = self.linear(g, x, v)?;
        g.attention(qv, kv, vv)
    }

    /// Mean over cells of an `H x W x C` descriptor map.
    fn pool_cells(g: &mut Graph, p: Var) -> Result<Var> {
        let (h, w, c) = g.value(p).hwc()?;
        let cells = (h * w) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in g.value(p).data().iter().enumerate() {
            mean[i % c] += v / cells;
        }
        Ok(g.custom(&[p], Tensor::from_parts(vec![c], mean), move |gr, pv, _| {
            let d = gr.data();
            vec![Tensor::from_fn(pv[0].shape(), |i| d[i % c] / cells)]
        }))
    }

    /// Pseudo descriptor map for `p`, or `p` itself while the bank is empty.
    fn pseudo_descriptor(&self, g: &mut Graph, p: Var, bank: &PrototypeBank, rng: Option<&mut Rng>) -> Result<Var> {
        if bank.is_empty() {
            return Ok(p);
        }
        if self.cfg.pooled_descriptor {
            let pooled = Self::pool_cells(g, p)?;
            let f = bank.modulation_graph(g, pooled, &self.cfg.pseudo)?;
            return g.scale_by(p, f);
        }
        let shape = g.value(p).shape().to_vec();
        let flat = g.reshape(p, &[g.value(p).len()])?;
        let out = bank.pseudo_graph(g, flat, &self.cfg.pseudo, rng)?;
        g.reshape(out, &shape)
    }

    /// Builds the forward graph for one `S x S x C_in` image.
    pub fn forward_graph(&self, g: &mut Graph, image: Var, ctx: &mut ForwardContext<'_>) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        if g.value(image).shape() != [s, s, cfg.in_channels] {
            return Err(shape_err!(
                "model expects {s}x{s}x{}, got {:?}",
                cfg.in_channels,
                g.value(image).shape()
            ));
        }
        let (grid, coarse) = (cfg.grid(), cfg.coarse_grid());
        let [c0, c1, ..] = cfg.widths;

        let patches = g.space_to_depth(image, PATCH)?;
        let x = self.linear(g, patches, &self.embed)?;
        let mut x = g.reshape(x, &[grid * grid, c0])?;
        for layer in &self.plain {
            let h = self.affine_norm(g, x, &layer.ln1)?;
            let a = self.self_attention(g, h, &layer.q, &layer.k, &layer.v)?;
            let a = self.linear(g, a, &layer.o)?;
            x = g.add(x, a)?;
            let h = self.affine_norm(g, x, &layer.ln2)?;
            let m = self.mlp(g, h, &layer.mlp)?;
            x = g.add(x, m)?;
        }
        let plain_out = g.reshape(x, &[grid, grid, c0])?;
        let merged = g.space_to_depth(plain_out, 2)?;
        let merged = self.linear(g, merged, &self.merge)?;
        let mut x = g.reshape(merged, &[coarse * coarse, c1])?;

        let mut features = vec![plain_out];
        let mut descriptors = Vec::new();
        let mut rec_terms = Vec::new();
        let mut pseudo_uses = 0;
        let bank = ctx.bank.filter(|_| ctx.phase == Phase::Pmp);
        for block in &self.blocks {
            let f = g.layer_norm(x, LN_EPS)?;
            let mixed = match &self.codec {
                Some(codec) => {
                    let fmap = g.reshape(f, &[coarse, coarse, c1])?;
                    let frozen = g.constant(g.value(fmap).clone());
                    let (enc_in, target) = match cfg.rec_flow {
                        RecFlow::Full => (fmap, fmap),
                        RecFlow::DetachTarget => (fmap, frozen),
                        RecFlow::CodecOnly => (frozen, frozen),
                    };
                    let enc = codec.encode_graph(g, &self.params, enc_in)?;
                    let rec = codec.decode_graph(g, &self.params, enc.combined)?;
                    rec_terms.push(reconstruction_loss_graph(g, rec, target)?);
                    descriptors.push(enc.combined);
                    match bank {
                        Some(bank) => {
                            let live = if enc_in == fmap { enc.combined } else { codec.encode_graph(g, &self.params, fmap)?.combined };
                            let pseudo = self.pseudo_descriptor(g, live, bank, ctx.rng.as_deref_mut())?;
                            let fp = codec.decode_graph(g, &self.params, pseudo)?;
                            let fp = g.reshape(fp, &[coarse * coarse, c1])?;
                            pseudo_uses += 1;
                            let proj = if cfg.attention.projections {
                                Some(StepProjections {
                                    q: g.param(&self.params, block.q.w),
                                    k: g.param(&self.params, block.k.w),
                                    v: g.param(&self.params, block.v.w),
                                })
                            } else {
                                None
                            };
                            let fused = pmp_chain_graph(g, f, fp, cfg.attention.m, proj)?;
                            calibrate_graph(g, f, fused, cfg.attention.l_cal, proj)?
                        }
                        None => self.self_attention(g, f, &block.q, &block.k, &block.v)?,
                    }
                }
                None => self.self_attention(g, f, &block.q, &block.k, &block.v)?,
            };
            let a = self.linear(g, mixed, &block.o)?;
            x = g.add(x, a)?;
            let h = self.affine_norm(g, x, &block.ln2)?;
            let m = self.mlp(g, h, &block.mlp)?;
            x = g.add(x, m)?;
            features.push(g.reshape(x, &[coarse, coarse, c1])?);
        }

        let mut scales = vec![features[0]];
        for &f in &features[1..] {
            scales.push(g.resize_bilinear(f, grid, grid)?);
        }
        let fused = g.concat_last(&scales)?;
        let h = self.linear(g, fused, &self.head[0])?;
        let h = g.gelu(h);
        let logits = self.linear(g, h, &self.head[1])?;
        let logits = g.resize_bilinear(logits, s, s)?;
        let logits = g.reshape(logits, &[s * s, cfg.classes])?;
        let rec_loss = if rec_terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.sum(&rec_terms)?
        };
        Ok(ForwardVars { logits, rec_loss, features, descriptors, pseudo_uses })
    }

    /// Vector handed to the bank for a combined descriptor map.
    pub fn bank_descriptor(&self, combined: &Tensor) -> Vec<f64> {
        if !self.cfg.pooled_descriptor {
            return combined.data().to_vec();
        }
        let c = *combined.shape().last().expect("rank 3");
        let cells = (combined.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in combined.data().iter().enumerate() {
            mean[i % c] += v / cells;
        }
        mean
    }

    pub fn forward(&self, image: &Tensor, ctx: &mut ForwardContext<'_>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let vars = self.forward_graph(&mut g, x, ctx)?;
        self.collect(&g, &vars)
    }

    fn collect(&self, g: &Graph, vars: &ForwardVars) -> Result<ForwardOutput> {
        let s = self.cfg.image_size;
        Ok(ForwardOutput {
            logits: g.value(vars.logits).reshape(&[s, s, self.cfg.classes])?,
            rec_loss: g.value(vars.rec_loss).item(),
            features: vars.features.iter().map(|&f| g.value(f).clone()).collect(),
            descriptors: vars.descriptors.iter().map(|&p| self.bank_descriptor(g.value(p))).collect(),
            pseudo_uses: vars.pseudo_uses,
            attention: g.attention_stats(),
        })
    }

    /// Loss parts and parameter gradients (store layout) for one sample.
    pub fn loss_and_grads(
        &self,
        image: &Tensor,
        labels: &[u8],
        ctx: &mut ForwardContext<'_>,
    ) -> Result<(LossParts, Vec<Tensor>, ForwardOutput)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let vars = self.forward_graph(&mut g, x, ctx)?;
        let (total, parts) = self.total_loss_graph(&mut g, &vars, labels)?;
        let grads = g.backward(total);
        let mut acc = self.params.zeros_like();
        grads.accumulate_into(&mut acc, 1.0);
        Ok((parts, acc, self.collect(&g, &vars)?))
    }

    /// Loss parts without gradients.
    pub fn loss(&self, image: &Tensor, labels: &[u8], ctx: &mut ForwardContext<'_>) -> Result<LossParts> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let vars = self.forward_graph(&mut g, x, ctx)?;
        Ok(self.total_loss_graph(&mut g, &vars, labels)?.1)
    }

    fn total_loss_graph(&self, g: &mut Graph, vars: &ForwardVars, labels: &[u8]) -> Result<(Var, LossParts)> {
        let seg = g.cross_entropy(vars.logits, Rc::new(labels.to_vec()), IGNORE_LABEL)?;
        let rec = g.scale(vars.rec_loss, self.cfg.rec_weight);
        let total = g.add(seg, rec)?;
        let parts = LossParts {
            seg: g.value(seg).item(),
            rec: g.value(vars.rec_loss).item(),
            total: g.value(total).item(),
        };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss: seg {}, rec {}",
                parts.seg, parts.rec
            )));
        }
        Ok((total, parts))
    }

    /// Per-pixel argmax class ids.
    pub fn predict(&self, image: &Tensor, ctx: &mut ForwardContext<'_>) -> Result<Vec<u8>> {
        let out = self.forward(image, ctx)?;
        Ok(argmax_rows(&out.logits, self.cfg.classes))
    }
}

/// Residual branch outputs and the classifier start small.
fn init_gain(name: &str) -> f64 {
    if name == "head.1" {
        0.1
    } else if name.ends_with(".o") || name.ends_with(".mlp.down") {
        0.5
    } else {
        1.0
    }
}

pub fn argmax_rows(logits: &Tensor, k: usize) -> Vec<u8> {
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean per-pixel cross-entropy plus `rec_weight * rec`, evaluated directly.
pub fn total_loss(logits: &Tensor, labels: &[u8], rec: f64, rec_weight: f64) -> Result<LossParts> {
    let k = *logits.shape().last().ok_or_else(|| shape_err!("scalar logits"))?;
    let mut g = Graph::new();
    let l = g.constant(logits.reshape(&[logits.len() / k, k])?);
    let seg = g.cross_entropy(l, Rc::new(labels.to_vec()), IGNORE_LABEL)?;
    let seg = g.value(seg).item();
    Ok(LossParts { seg, rec, total: seg + rec_weight * rec })
}

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::{
    block_prefix, Layout, Model, ModelConfig, ModelError, Result, EMBED, FINAL_NORM, HEAD,
};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<T> {
    pub gain: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bq: Option<Tensor<T>>,
    pub bk: Option<Tensor<T>>,
    pub bv: Option<Tensor<T>>,
    pub bo: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_up: Option<Tensor<T>>,
    pub b_down: Option<Tensor<T>>,
}

/// Weights of one block. `norm_mlp` exists only for the sequential variant,
/// which normalizes the MLP input separately.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub norm: LayerNormWeights<T>,
    pub attn: AttentionWeights<T>,
    pub mlp: MlpWeights<T>,
    pub norm_mlp: Option<LayerNormWeights<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// `x + (Attn(LN(x)) + MLP(LN(x)))`
    Parallel,
    /// `h = x + Attn(LN1(x)); h + MLP(LN2(h))`
    Sequential,
}

fn norm_shapes(cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = vec![(format!("{prefix}.gain"), vec![d])];
    if cfg.ln_bias {
        v.push((format!("{prefix}.bias"), vec![d]));
    }
    v
}

impl<T: Scalar> BlockWeights<T> {
    pub fn shapes(cfg: &ModelConfig, prefix: &str, with_mlp_norm: bool) -> Vec<(String, Vec<usize>)> {
        let (d, aw, kw, h) = (cfg.d_model, cfg.attn_width(), cfg.kv_width(), cfg.mlp_hidden());
        let mut v = norm_shapes(cfg, &format!("{prefix}.norm"));
        let a = format!("{prefix}.attn");
        v.push((format!("{a}.wq"), vec![d, aw]));
        v.push((format!("{a}.wk"), vec![d, kw]));
        v.push((format!("{a}.wv"), vec![d, kw]));
        v.push((format!("{a}.wo"), vec![aw, d]));
        let m = format!("{prefix}.mlp");
        v.push((format!("{m}.w_up"), vec![d, h]));
        v.push((format!("{m}.w_down"), vec![h, d]));
        if cfg.linear_bias {
            v.push((format!("{a}.b_q"), vec![aw]));
            v.push((format!("{a}.b_k"), vec![kw]));
            v.push((format!("{a}.b_v"), vec![kw]));
            v.push((format!("{a}.b_o"), vec![d]));
            v.push((format!("{m}.b_up"), vec![h]));
            v.push((format!("{m}.b_down"), vec![d]));
        }
        if with_mlp_norm {
            v.extend(norm_shapes(cfg, &format!("{prefix}.norm_mlp")));
        }
        v
    }

    /// Random weights, useful for differential tests. Norm gains and biases
    /// are perturbed away from identity so they take part in the check.
    pub fn random<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        with_mlp_norm: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut map = BTreeMap::new();
        for (name, shape) in Self::shapes(cfg, "b", with_mlp_norm) {
            let mut t = Tensor::randn(shape, std, rng);
            if name.ends_with(".gain") {
                t = t.map(|x| x + T::one());
            }
            map.insert(name, t);
        }
        Self::from_params(&map, "b").expect("shapes are generated above")
    }

    pub fn from_params(params: &BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        let req = |n: String| {
            params
                .get(&n)
                .cloned()
                .ok_or(ModelError::MissingParam(n))
        };
        let opt = |n: String| params.get(&n).cloned();
        let norm = |p: String| -> Result<LayerNormWeights<T>> {
            Ok(LayerNormWeights {
                gain: req(format!("{p}.gain"))?,
                bias: opt(format!("{p}.bias")),
            })
        };
        let a = format!("{prefix}.attn");
        let m = format!("{prefix}.mlp");
        let norm_mlp = if params.contains_key(&format!("{prefix}.norm_mlp.gain")) {
            Some(norm(format!("{prefix}.norm_mlp"))?)
        } else {
            None
        };
        Ok(Self {
            norm: norm(format!("{prefix}.norm"))?,
            attn: AttentionWeights {
                wq: req(format!("{a}.wq"))?,
                wk: req(format!("{a}.wk"))?,
                wv: req(format!("{a}.wv"))?,
                wo: req(format!("{a}.wo"))?,
                bq: opt(format!("{a}.b_q")),
                bk: opt(format!("{a}.b_k")),
                bv: opt(format!("{a}.b_v")),
                bo: opt(format!("{a}.b_o")),
            },
            mlp: MlpWeights {
                w_up: req(format!("{m}.w_up"))?,
                w_down: req(format!("{m}.w_down"))?,
                b_up: opt(format!("{m}.b_up")),
                b_down: opt(format!("{m}.b_down")),
            },
            norm_mlp,
        })
    }

    pub fn to_params(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        let mut put = |n: String, t: &Option<Tensor<T>>| {
            if let Some(t) = t {
                out.insert(n, t.clone());
            }
        };
        let a = format!("{prefix}.attn");
        let m = format!("{prefix}.mlp");
        put(format!("{prefix}.norm.gain"), &Some(self.norm.gain.clone()));
        put(format!("{prefix}.norm.bias"), &self.norm.bias);
        put(format!("{a}.wq"), &Some(self.attn.wq.clone()));
        put(format!("{a}.wk"), &Some(self.attn.wk.clone()));
        put(format!("{a}.wv"), &Some(self.attn.wv.clone()));
        put(format!("{a}.wo"), &Some(self.attn.wo.clone()));
        put(format!("{a}.b_q"), &self.attn.bq);
        put(format!("{a}.b_k"), &self.attn.bk);
        put(format!("{a}.b_v"), &self.attn.bv);
        put(format!("{a}.b_o"), &self.attn.bo);
        put(format!("{m}.w_up"), &Some(self.mlp.w_up.clone()));
        put(format!("{m}.w_down"), &Some(self.mlp.w_down.clone()));
        put(format!("{m}.b_up"), &self.mlp.b_up);
        put(format!("{m}.b_down"), &self.mlp.b_down);
        if let Some(n) = &self.norm_mlp {
            put(format!("{prefix}.norm_mlp.gain"), &Some(n.gain.clone()));
            put(format!("{prefix}.norm_mlp.bias"), &n.bias);
        }
        out
    }
}

/// Input node for parameter `name`, created on first use so tied weights
/// resolve to one node.
pub(crate) fn param<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    shape: &[usize],
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    if let Some(id) = g.input_id(name) {
        if g.shape(id) != shape {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                got: g.shape(id).to_vec(),
                expected: shape.to_vec(),
            });
        }
        return Ok(id);
    }
    Ok(g.input(name, shape, trainable(name))?)
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    w: (&str, [usize; 2]),
    bias: Option<&str>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    let wn = param(g, w.0, &w.1, trainable)?;
    let mut y = g.matmul(x, wn)?;
    if let Some(b) = bias {
        let bn = param(g, b, &[w.1[1]], trainable)?;
        y = g.add_row(y, bn)?;
    }
    Ok(y)
}

pub(crate) fn build_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    prefix: &str,
    cfg: &ModelConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    let d = cfg.d_model;
    let gain = param(g, &format!("{prefix}.gain"), &[d], trainable)?;
    let bias = if cfg.ln_bias {
        Some(param(g, &format!("{prefix}.bias"), &[d], trainable)?)
    } else {
        None
    };
    Ok(g.layer_norm(x, gain, bias, T::of(cfg.ln_eps))?)
}

fn build_attention<T: Scalar>(
    g: &mut Graph<T>,
    xn: NodeId,
    prefix: &str,
    cfg: &ModelConfig,
    layout: &Layout,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    let (d, aw, kw) = (cfg.d_model, cfg.attn_width(), cfg.kv_width());
    let a = format!("{prefix}.attn");
    let b = |s: &str| cfg.linear_bias.then(|| format!("{a}.{s}"));
    let q = linear(g, xn, (&format!("{a}.wq"), [d, aw]), b("b_q").as_deref(), trainable)?;
    let k = linear(g, xn, (&format!("{a}.wk"), [d, kw]), b("b_k").as_deref(), trainable)?;
    let v = linear(g, xn, (&format!("{a}.wv"), [d, kw]), b("b_v").as_deref(), trainable)?;
    let q = g.rope(q, cfg.n_heads, cfg.head_dim, layout.positions.clone(), cfg.rope_base)?;
    let k = g.rope(k, cfg.n_kv, cfg.head_dim, layout.positions.clone(), cfg.rope_base)?;
    let ctx = g.attention(q, k, v, cfg.n_heads, cfg.n_kv, cfg.head_dim, layout.mask.clone())?;
    linear(g, ctx, (&format!("{a}.wo"), [aw, d]), b("b_o").as_deref(), trainable)
}

fn build_mlp<T: Scalar>(
    g: &mut Graph<T>,
    xn: NodeId,
    prefix: &str,
    cfg: &ModelConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    let (d, h) = (cfg.d_model, cfg.mlp_hidden());
    let m = format!("{prefix}.mlp");
    let b = |s: &str| cfg.linear_bias.then(|| format!("{m}.{s}"));
    let up = linear(g, xn, (&format!("{m}.w_up"), [d, h]), b("b_up").as_deref(), trainable)?;
    let act = g.gelu(up);
    linear(g, act, (&format!("{m}.w_down"), [h, d]), b("b_down").as_deref(), trainable)
}

/// Appends one block reading parameters named under `prefix`.
pub fn build_block<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    prefix: &str,
    cfg: &ModelConfig,
    layout: &Layout,
    kind: BlockKind,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId> {
    match kind {
        BlockKind::Parallel => {
            let xn = build_norm(g, x, &format!("{prefix}.norm"), cfg, trainable)?;
            let attn = build_attention(g, xn, prefix, cfg, layout, trainable)?;
            let mlp = build_mlp(g, xn, prefix, cfg, trainable)?;
            let branches = g.add(attn, mlp)?;
            Ok(g.add(x, branches)?)
        }
        BlockKind::Sequential => {
            let xn = build_norm(g, x, &format!("{prefix}.norm"), cfg, trainable)?;
            let attn = build_attention(g, xn, prefix, cfg, layout, trainable)?;
            let h = g.add(x, attn)?;
            let hn = build_norm(g, h, &format!("{prefix}.norm_mlp"), cfg, trainable)?;
            let mlp = build_mlp(g, hn, prefix, cfg, trainable)?;
            Ok(g.add(h, mlp)?)
        }
    }
}

/// Node ids of a language-model graph.
#[derive(Debug, Clone, Copy)]
pub struct LmGraph {
    pub hidden: NodeId,
    pub logits: NodeId,
}

/// Embeds `tokens` and runs the model, optionally prefixed by `prefix_rows`
/// (already in model space, e.g. projected image features).
pub fn build_lm<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    prefix_rows: Option<NodeId>,
    tokens: &[usize],
    layout: &Layout,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<LmGraph> {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let embed = param(g, EMBED, &[v, d], trainable)?;
    let mut parts = Vec::new();
    if let Some(p) = prefix_rows {
        parts.push(p);
    }
    if !tokens.is_empty() {
        if let Some(&id) = tokens.iter().find(|&&t| t >= v) {
            return Err(ModelError::TokenOutOfVocab { id, vocab: v });
        }
        parts.push(g.embedding(embed, Arc::from(tokens))?);
    }
    let mut x = match parts.len() {
        0 => return Err(ModelError::Config("empty input sequence".into())),
        1 => parts[0],
        _ => g.concat_rows(&parts)?,
    };
    let len = g.shape(x)[0];
    // packed rows may exceed the window; each document must not
    let span = layout.positions.iter().max().map_or(0, |&p| p + 1);
    if span > cfg.context_length {
        return Err(ModelError::SequenceTooLong {
            len: span,
            max: cfg.context_length,
        });
    }
    if layout.len() != len {
        return Err(ModelError::Config(format!(
            "layout covers {} positions, sequence has {len}",
            layout.len()
        )));
    }
    for layer in 0..cfg.n_layers {
        x = build_block(g, x, &block_prefix(layer), cfg, layout, BlockKind::Parallel, trainable)?;
    }
    let hidden = build_norm(g, x, FINAL_NORM, cfg, trainable)?;
    let table = if cfg.tied_embeddings {
        embed
    } else {
        param(g, HEAD, &[v, d], trainable)?
    };
    let logits = g.matmul_bt(hidden, table)?;
    Ok(LmGraph { hidden, logits })
}

fn run_single<T: Scalar>(
    mut g: Graph<T>,
    out: NodeId,
    feed: &BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    g.forward(feed)?;
    Ok(g.value(out)?.clone())
}

fn frozen(_: &str) -> bool {
    false
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, w: &LayerNormWeights<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let gain = g.constant(w.gain.clone());
    let bias = w.bias.clone().map(|b| g.constant(b));
    let y = g.layer_norm(xi, gain, bias, T::of(eps))?;
    run_single(g, y, &BTreeMap::new())
}

/// Rotates `x: [seq, heads, head_dim]` by `positions`.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let &[seq, heads, hd] = x.shape() else {
        return Err(ModelError::Config(format!(
            "rope input must be [seq, heads, head_dim], got {:?}",
            x.shape()
        )));
    };
    let mut g = Graph::new();
    let xi = g.constant(x.clone().reshape([seq, heads * hd])?);
    let y = g.rope(xi, heads, hd, positions.into(), base)?;
    Ok(run_single(g, y, &BTreeMap::new())?.reshape([seq, heads, hd])?)
}

/// Grouped-query self-attention (with output projection) on a normalized input.
pub fn attention_gqa<T: Scalar>(
    x_norm: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &ModelConfig,
    layout: &Layout,
) -> Result<Tensor<T>> {
    let block = BlockWeights {
        norm: LayerNormWeights {
            gain: Tensor::ones([cfg.d_model]),
            bias: None,
        },
        attn: w.clone(),
        mlp: MlpWeights {
            w_up: Tensor::zeros([0]),
            w_down: Tensor::zeros([0]),
            b_up: None,
            b_down: None,
        },
        norm_mlp: None,
    };
    let feed = block.to_params("b");
    let mut g = Graph::new();
    let x = g.constant(x_norm.clone());
    let y = build_attention(&mut g, x, "b", cfg, layout, &frozen)?;
    run_single(g, y, &feed)
}

pub fn parallel_block<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    layout: &Layout,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let y = build_block(&mut g, xi, "b", cfg, layout, BlockKind::Parallel, &frozen)?;
    run_single(g, y, &w.to_params("b"))
}

/// Two-norm sequential block; needs `w.norm_mlp`.
pub fn sequential_block<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    layout: &Layout,
) -> Result<Tensor<T>> {
    if w.norm_mlp.is_none() {
        return Err(ModelError::MissingParam("b.norm_mlp.gain".into()));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let y = build_block(&mut g, xi, "b", cfg, layout, BlockKind::Sequential, &frozen)?;
    run_single(g, y, &w.to_params("b"))
}

/// Logits `[seq, vocab]` for one unpacked causal sequence.
pub fn lm_forward<T: Scalar>(tokens: &[usize], model: &Model<T>) -> Result<Tensor<T>> {
    model.check_tokens(tokens)?;
    let mut g = Graph::new();
    let lm = build_lm(
        &mut g,
        &model.config,
        None,
        tokens,
        &Layout::causal(tokens.len()),
        &frozen,
    )?;
    g.forward(model)?;
    Ok(g.value(lm.logits)?.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Already multiplied by the z-loss coefficient.
    pub z: f64,
}

/// Masked mean cross-entropy plus `z_coef * mean(logsumexp^2)`.
pub fn lm_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
    z_coef: f64,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let m: Vec<T> = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let loss = g.lm_loss(l, targets.into(), m.into(), None, T::of(z_coef))?;
    g.forward(&())?;
    let (ce, z) = g.loss_parts(loss)?;
    Ok(LossParts {
        total: g.value(loss)?.item().f64(),
        ce: ce.f64(),
        z: z.f64(),
    })
}

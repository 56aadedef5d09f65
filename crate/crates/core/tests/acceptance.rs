//! Acceptance suite. One line per criterion goes to stdout (pass or fail,
//! measured values, wall time); the test fails if any criterion fails.
//!
//! Oracles here are written from scratch against flat `Vec<f64>` buffers and
//! share no code with the library kernels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::error::Error;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use desklm_core::data::filters::RuleRegistry;
use desklm_core::data::{code_filter, weighted_overhead, CodeFilterConfig, CodeReject, CodeSample, ConversationTree, LmExample, Message};
use desklm_core::model::config::{ROPE_BASE_FINAL, ROPE_BASE_LONG};
use desklm_core::model::{
    attention_gqa, build_lm, lm_forward, parallel_block, presets, rope_apply, sequential_block, AttentionWeights,
    BlockWeights, Layout, Model, ModelConfig,
};
use desklm_core::optim::{noise_temperature, BatchSchedule, LrSchedule, GT};
use desklm_core::tensor::{grad_check_inputs, GradCheckOptions, Graph, Tensor};
use desklm_core::train::{
    batch_gradients, desk_model, run_curriculum, CheckpointStore, CurriculumPlan, Record, ThroughputReport, TrainState,
    Trainer,
};
use desklm_core::model::TensorArchive;
use desklm_core::vlm::{desk_vision, synthetic_fixtures, vlm_train_stage, GridPolicy, VlmModel, VlmStage, VlmState, VlmTrainConfig};

type Outcome = Result<String, Box<dyn Error>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+).into());
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// f64 oracles

mod oracle {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: Option<&[f64]>, eps: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                out.push((v - mean) * inv * gain[j] + bias.map_or(0.0, |b| b[j]));
            }
        }
        out
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Rotate-half rotary embedding of `x: [seq, heads * hd]`.
    pub fn rope(x: &[f64], heads: usize, hd: usize, positions: &[usize], base: f64) -> Vec<f64> {
        let half = hd / 2;
        let mut out = x.to_vec();
        for (r, &p) in positions.iter().enumerate() {
            for h in 0..heads {
                let o = r * heads * hd + h * hd;
                for i in 0..half {
                    let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                    let (c, s) = (theta.cos(), theta.sin());
                    let (a, b) = (x[o + i], x[o + i + half]);
                    out[o + i] = a * c - b * s;
                    out[o + i + half] = a * s + b * c;
                }
            }
        }
        out
    }

    /// Softmax attention of query head `h` over key head `kv_of(h)`, keys
    /// restricted by `visible(i, j)`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        seq: usize,
        heads: usize,
        kv_heads: usize,
        hd: usize,
        kv_of: &dyn Fn(usize) -> usize,
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Vec<f64> {
        let (qw, kw) = (heads * hd, kv_heads * hd);
        let mut out = vec![0.0; seq * qw];
        let scale = 1.0 / (hd as f64).sqrt();
        for h in 0..heads {
            let g = kv_of(h);
            for i in 0..seq {
                let js: Vec<usize> = (0..seq).filter(|&j| visible(i, j)).collect();
                let scores: Vec<f64> = js
                    .iter()
                    .map(|&j| (0..hd).map(|t| q[i * qw + h * hd + t] * k[j * kw + g * hd + t]).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&js) {
                    for t in 0..hd {
                        out[i * qw + h * hd + t] += w / z * v[j * kw + g * hd + t];
                    }
                }
            }
        }
        out
    }

    /// Full attention sublayer: projections, RoPE, attention, output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        xn: &[f64],
        seq: usize,
        d: usize,
        heads: usize,
        kv_heads: usize,
        hd: usize,
        w: [&[f64]; 4],
        positions: &[usize],
        base: f64,
        kv_of: &dyn Fn(usize) -> usize,
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Vec<f64> {
        let (qw, kw) = (heads * hd, kv_heads * hd);
        let q = rope(&matmul(xn, w[0], seq, d, qw), heads, hd, positions, base);
        let k = rope(&matmul(xn, w[1], seq, d, kw), kv_heads, hd, positions, base);
        let v = matmul(xn, w[2], seq, d, kw);
        let ctx = attend(&q, &k, &v, seq, heads, kv_heads, hd, kv_of, visible);
        matmul(&ctx, w[3], seq, qw, d)
    }

    pub fn mlp(xn: &[f64], seq: usize, d: usize, hidden: usize, up: &[f64], down: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matmul(xn, up, seq, d, hidden).into_iter().map(gelu).collect();
        matmul(&h, down, seq, hidden, d)
    }

    /// `-log softmax(row)[target]`
    pub fn nll(row: &[f64], target: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        lse - row[target]
    }
}

fn small_config(d: usize, heads: usize, hd: usize, kv: usize, vocab: usize, ctx: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: d,
        n_heads: heads,
        head_dim: hd,
        n_kv: kv,
        context_length: ctx,
        rope_base: 10_000.0,
        tied_embeddings: true,
        vocab_size: vocab,
        mlp_hidden: None,
        ln_eps: 1e-5,
        ln_bias: true,
        linear_bias: false,
    }
}

fn causal(i: usize, j: usize) -> bool {
    j <= i
}

// ---------------------------------------------------------------------------

/// Zero output projections leave the block an identity; parallel and
/// sequential forms differ; both match the oracle.
fn c1_parallel_block() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let cfg = small_config(32, 4, 8, 2, 11, 64);
    let seq = 9;
    let layout = Layout::causal(seq);
    let x = Tensor::<f64>::randn([seq, cfg.d_model], 1.0, &mut r);

    let mut w = BlockWeights::<f64>::random(&cfg, true, 0.3, &mut r);
    let par = parallel_block(&x, &w, &cfg, &layout)?;
    let seqb = sequential_block(&x, &w, &cfg, &layout)?;
    let forms_gap = par.max_abs_diff(&seqb);
    ensure!(forms_gap > 1e-3, "parallel and sequential forms differ by only {forms_gap:e}");

    // oracle for both forms
    let (d, hd, h, kv) = (cfg.d_model, cfg.head_dim, cfg.n_heads, cfg.n_kv);
    let hidden = cfg.mlp_hidden();
    let pos: Vec<usize> = (0..seq).collect();
    let group = h / kv;
    let attn_w = [w.attn.wq.data(), w.attn.wk.data(), w.attn.wv.data(), w.attn.wo.data()];
    let ln = |x: &[f64], n: &desklm_core::model::LayerNormWeights<f64>| {
        oracle::layer_norm(x, d, n.gain.data(), n.bias.as_ref().map(|b| b.data()), cfg.ln_eps)
    };
    let xn = ln(x.data(), &w.norm);
    let a = oracle::attention(&xn, seq, d, h, kv, hd, attn_w, &pos, cfg.rope_base, &|q| q / group, &causal);
    let m = oracle::mlp(&xn, seq, d, hidden, w.mlp.w_up.data(), w.mlp.w_down.data());
    let want_par: Vec<f64> = (0..x.len()).map(|i| x.data()[i] + (a[i] + m[i])).collect();
    let hmid: Vec<f64> = (0..x.len()).map(|i| x.data()[i] + a[i]).collect();
    let hn = ln(&hmid, w.norm_mlp.as_ref().unwrap());
    let m2 = oracle::mlp(&hn, seq, d, hidden, w.mlp.w_up.data(), w.mlp.w_down.data());
    let want_seq: Vec<f64> = (0..x.len()).map(|i| hmid[i] + m2[i]).collect();
    let err_par = max_diff(par.data(), &want_par);
    let err_seq = max_diff(seqb.data(), &want_seq);
    ensure!(err_par < 1e-10 && err_seq < 1e-10, "oracle mismatch: parallel {err_par:e}, sequential {err_seq:e}");

    w.attn.wo = Tensor::zeros(w.attn.wo.shape().to_vec());
    w.mlp.w_down = Tensor::zeros(w.mlp.w_down.shape().to_vec());
    let id = parallel_block(&x, &w, &cfg, &layout)?;
    ensure!(id.bit_eq(&x), "zeroed output projections do not give the input back");

    // with projection biases, zeroing means zeroing those too
    let mut cfg_b = cfg.clone();
    cfg_b.linear_bias = true;
    let mut wb = BlockWeights::<f64>::random(&cfg_b, false, 0.3, &mut r);
    wb.attn.wo = Tensor::zeros(wb.attn.wo.shape().to_vec());
    wb.attn.bo = Some(Tensor::zeros([cfg_b.d_model]));
    wb.mlp.w_down = Tensor::zeros(wb.mlp.w_down.shape().to_vec());
    wb.mlp.b_down = Some(Tensor::zeros([cfg_b.d_model]));
    ensure!(parallel_block(&x, &wb, &cfg_b, &layout)?.bit_eq(&x), "identity fails with projection biases");

    let xf = x.cast::<f32>();
    let mut wf = BlockWeights::<f32>::random(&cfg, false, 0.3, &mut r);
    wf.attn.wo = Tensor::zeros(wf.attn.wo.shape().to_vec());
    wf.mlp.w_down = Tensor::zeros(wf.mlp.w_down.shape().to_vec());
    ensure!(parallel_block(&xf, &wf, &cfg, &layout)?.bit_eq(&xf), "identity fails in f32");

    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s, limit 1s");
    Ok(format!(
        "identity bit-exact (f64, f32, biased); |parallel - sequential| = {forms_gap:.3e} > 1e-3; oracle err {:.1e}",
        err_par.max(err_seq)
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences over the full toy LM loss in f64.
fn c2_gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = presets::toy();
    ensure!(
        (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.n_kv, cfg.vocab_size) == (2, 64, 4, 2, 97),
        "toy preset is {cfg:?}"
    );
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (tied, segments) in [(true, vec![0u32, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1]), (false, vec![0u32; 10])] {
        let cfg = if tied { cfg.clone() } else { cfg.untied() };
        let model = Model::<f64>::init(cfg.clone(), 11, 0.1)?;
        let mut r = rng(12);
        let n = segments.len();
        let tokens: Vec<usize> = (0..n).map(|_| r.random_range(0..cfg.vocab_size)).collect();
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..cfg.vocab_size)).collect();
        let mask: Vec<f64> = (0..n).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
        let layout = Layout::from_segments(&segments)?;
        let mut g = Graph::<f64>::new();
        let lm = build_lm(&mut g, &cfg, None, &tokens, &layout, &|_| true)?;
        let loss = g.lm_loss(lm.logits, Arc::from(targets), Arc::from(mask), None, 1e-3)?;
        g.output("loss", loss)?;
        let rep = grad_check_inputs(
            &mut g,
            model.params(),
            "loss",
            &GradCheckOptions {
                eps: 1e-5,
                max_coords_per_input: Some(48),
                seed: 13,
            },
        )?;
        let inputs = g.grad_inputs().len();
        ensure!(inputs == model.params().len(), "only {inputs} of {} params are trainable", model.params().len());
        ensure!(rep.max_rel_err < 1e-4, "tied={tied}: rel err {:e} at {:?}", rep.max_rel_err, rep.worst);
        worst = worst.max(rep.max_rel_err);
        coords += rep.coords_checked;
        report.push_str(&format!("{}={:.2e} ", if tied { "tied" } else { "untied" }, rep.max_rel_err));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s, limit 30s");
    Ok(format!("max rel err {worst:.2e} < 1e-4 over {coords} coords ({})", report.trim_end()))
}

/// GQA at n_kv = n_heads is MHA and at n_kv = 1 is MQA.
fn c3_gqa_degeneracy() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let heads = [1, 2, 3, 4, 6, 8][r.random_range(0..6)];
        let hd = 2 * r.random_range(1..=4);
        let d = r.random_range(4..=24);
        let seq = r.random_range(1..=10);
        let packed = r.random_bool(0.5);
        let segments: Vec<u32> = if packed {
            let cut = r.random_range(0..=seq);
            (0..seq).map(|i| u32::from(i >= cut)).collect()
        } else {
            vec![0; seq]
        };
        let layout = Layout::from_segments(&segments)?;
        let visible = |i: usize, j: usize| j <= i && segments[i] == segments[j];
        let positions = layout.positions.to_vec();
        let std = r.random_range(0.2..1.0);
        let xn = Tensor::<f64>::randn([seq, d], 1.0, &mut r);

        let weights = |kv: usize, r: &mut ChaCha8Rng| AttentionWeights::<f64> {
            wq: Tensor::randn([d, heads * hd], std, r),
            wk: Tensor::randn([d, kv * hd], std, r),
            wv: Tensor::randn([d, kv * hd], std, r),
            wo: Tensor::randn([heads * hd, d], std, r),
            bq: None,
            bk: None,
            bv: None,
            bo: None,
        };
        let mut cfg = small_config(d, heads, hd, heads, 7, 16);
        cfg.rope_base = [10_000.0, ROPE_BASE_LONG, ROPE_BASE_FINAL][case % 3];

        // n_kv = n_heads against multi-head attention
        let w = weights(heads, &mut r);
        let got = attention_gqa(&xn, &w, &cfg, &layout)?;
        let ws = [w.wq.data(), w.wk.data(), w.wv.data(), w.wo.data()];
        let mha = oracle::attention(xn.data(), seq, d, heads, heads, hd, ws, &positions, cfg.rope_base, &|h| h, &visible);
        let e_mha = max_diff(got.data(), &mha);

        // n_kv = 1 against multi-query attention and against MHA with the
        // single key/value head copied to every head
        cfg.n_kv = 1;
        let w1 = weights(1, &mut r);
        let got1 = attention_gqa(&xn, &w1, &cfg, &layout)?;
        let ws1 = [w1.wq.data(), w1.wk.data(), w1.wv.data(), w1.wo.data()];
        let mqa = oracle::attention(xn.data(), seq, d, heads, 1, hd, ws1, &positions, cfg.rope_base, &|_| 0, &visible);
        let e_mqa = max_diff(got1.data(), &mqa);
        let replicate = |t: &Tensor<f64>| {
            let mut data = Vec::with_capacity(d * heads * hd);
            for row in t.data().chunks(hd) {
                for _ in 0..heads {
                    data.extend_from_slice(row);
                }
            }
            Tensor::new([d, heads * hd], data).unwrap()
        };
        let w_rep = AttentionWeights {
            wk: replicate(&w1.wk),
            wv: replicate(&w1.wv),
            ..w1.clone()
        };
        cfg.n_kv = heads;
        let got_rep = attention_gqa(&xn, &w_rep, &cfg, &layout)?;
        let e_rep = got1.max_abs_diff(&got_rep);

        for (name, e) in [("mha", e_mha), ("mqa", e_mqa), ("mqa vs replicated mha", e_rep)] {
            ensure!(e < 1e-6, "case {case} ({name}, heads {heads}, hd {hd}, seq {seq}): diff {e:e}");
            worst = worst.max(e);
        }
    }
    Ok(format!("100 cases, max diff {worst:.2e} < 1e-6"))
}

/// Rotary embeddings: exact identity at position 0, relative-position
/// scores, the oracle, and the stage presets.
fn c4_rope() -> Outcome {
    let mut r = rng(4);
    let (heads, hd) = (3, 16);
    let mut shift_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for base in [ROPE_BASE_LONG, ROPE_BASE_FINAL, 10_000.0] {
        let x = Tensor::<f64>::randn([1, heads, hd], 1.0, &mut r);
        ensure!(rope_apply(&x, &[0], base)?.bit_eq(&x), "position 0 is not the identity (base {base})");
        let xf = x.cast::<f32>();
        ensure!(rope_apply(&xf, &[0], base)?.bit_eq(&xf), "position 0 is not the identity in f32");

        for _ in 0..50 {
            let q = Tensor::<f64>::randn([1, heads, hd], 1.0, &mut r);
            let k = Tensor::<f64>::randn([1, heads, hd], 1.0, &mut r);
            let (m, n) = (r.random_range(0..8192), r.random_range(0..8192));
            let s = r.random_range(0..8192);
            let score = |pm: usize, pn: usize| -> Result<Vec<f64>, Box<dyn Error>> {
                let (qr, kr) = (rope_apply(&q, &[pm], base)?, rope_apply(&k, &[pn], base)?);
                Ok((0..heads)
                    .map(|h| (0..hd).map(|t| qr.data()[h * hd + t] * kr.data()[h * hd + t]).sum())
                    .collect())
            };
            let (a, b) = (score(m, n)?, score(m + s, n + s)?);
            shift_err = shift_err.max(max_diff(&a, &b));
        }

        let seq = 7;
        let positions: Vec<usize> = (0..seq).map(|_| r.random_range(0..8192)).collect();
        let x = Tensor::<f64>::randn([seq, heads, hd], 1.0, &mut r);
        let got = rope_apply(&x, &positions, base)?;
        oracle_err = oracle_err.max(max_diff(got.data(), &oracle::rope(x.data(), heads, hd, &positions, base)));
    }
    ensure!(shift_err < 1e-5, "relative-shift score error {shift_err:e}");
    ensure!(oracle_err < 1e-12, "rope differs from oracle by {oracle_err:e}");

    ensure!(ROPE_BASE_LONG == 5_000_042.0 && ROPE_BASE_FINAL == 500_042.0, "rope base constants");
    let want = [(2048, 5_000_042.0, true), (4096, 5_000_042.0, true), (8192, 5_000_042.0, true), (8192, 500_042.0, false)];
    for (stage, (ctx, base, tied)) in (1..=4).zip(want) {
        let c = presets::eleven_b(stage).ok_or("missing preset")?;
        ensure!(
            (c.n_layers, c.d_model, c.n_heads, c.head_dim, c.n_kv) == (60, 4096, 32, 128, 8),
            "stage {stage} architecture {c:?}"
        );
        ensure!(
            c.context_length == ctx && c.rope_base == base && c.tied_embeddings == tied,
            "stage {stage}: ctx {}, base {}, tied {}",
            c.context_length,
            c.rope_base,
            c.tied_embeddings
        );
    }
    ensure!(presets::eleven_b(5).is_none(), "stage 5 preset exists");

    // switching the base on a model changes long-range logits only through RoPE
    let mut m = Model::<f64>::init(small_config(16, 2, 8, 1, 13, 32), 4, 0.3)?;
    m.set_rope_base(ROPE_BASE_LONG)?;
    let a = lm_forward(&[1, 2, 3, 4], &m)?;
    m.set_rope_base(ROPE_BASE_FINAL)?;
    let b = lm_forward(&[1, 2, 3, 4], &m)?;
    ensure!(a.row(0) == b.row(0), "first position depends on the base");
    ensure!(a.max_abs_diff(&b) > 0.0, "base switch had no effect");

    Ok(format!(
        "pos-0 identity exact; shift invariance err {shift_err:.2e} < 1e-5; oracle err {oracle_err:.1e}; presets 5,000,042 x3 then 500,042 untied"
    ))
}

/// Random reply tree with `n` messages; ids and list order are shuffled.
fn random_tree(r: &mut ChaCha8Rng, n: usize, vocab: usize) -> ConversationTree {
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + r.random_range(0..7)).collect();
    ids.shuffle(r);
    let mut nodes: Vec<Message> = (0..n)
        .map(|i| Message {
            id: ids[i],
            role: if i % 2 == 0 { "user".into() } else { "assistant".into() },
            tokens: (0..r.random_range(1..=5)).map(|_| r.random_range(0..vocab) as _).collect(),
            parent: (i > 0).then(|| ids[r.random_range(0..i)]),
        })
        .collect();
    nodes.shuffle(r);
    ConversationTree { nodes }
}

/// Root-to-leaf paths by independent enumeration, as message indices.
fn enumerate_paths(tree: &ConversationTree) -> Vec<Vec<usize>> {
    let by_id: HashMap<u64, usize> = tree.nodes.iter().enumerate().map(|(i, m)| (m.id, i)).collect();
    let mut children = vec![Vec::new(); tree.nodes.len()];
    let mut root = 0;
    for (i, m) in tree.nodes.iter().enumerate() {
        match m.parent {
            Some(p) => children[by_id[&p]].push(i),
            None => root = i,
        }
    }
    let mut paths = Vec::new();
    let mut stack = vec![vec![root]];
    while let Some(p) = stack.pop() {
        let last = *p.last().unwrap();
        if children[last].is_empty() {
            paths.push(p);
        } else {
            for &c in &children[last] {
                let mut q = p.clone();
                q.push(c);
                stack.push(q);
            }
        }
    }
    paths
}

/// Path from the root to message `i`.
fn path_to(tree: &ConversationTree, i: usize) -> Vec<usize> {
    let by_id: HashMap<u64, usize> = tree.nodes.iter().enumerate().map(|(i, m)| (m.id, i)).collect();
    let mut p = vec![i];
    while let Some(parent) = tree.nodes[*p.last().unwrap()].parent {
        p.push(by_id[&parent]);
    }
    p.reverse();
    p
}

fn c5_conversation_masking() -> Outcome {
    let mut r = rng(5);
    let vocab = 31;
    let model = Model::<f64>::init(small_config(16, 2, 8, 1, vocab, 128), 5, 0.3)?;
    let mut worst: f64 = 0.0;
    let mut threads_total = 0;
    for case in 0..200 {
        let n = r.random_range(1..=15);
        let tree = random_tree(&mut r, n, vocab);
        let threads = tree.flatten()?;
        threads_total += threads.len();

        // masked loss over threads
        let (mut masked_sum, mut masked_n) = (0.0, 0usize);
        for t in &threads {
            let tokens: Vec<usize> = t.tokens.iter().map(|&x| x as usize).collect();
            let logits = lm_forward(&tokens, &model)?;
            for i in 1..tokens.len() {
                if t.loss_mask[i] {
                    masked_sum += oracle::nll(logits.row(i - 1), tokens[i]);
                    masked_n += 1;
                }
            }
        }
        // every message once, in the context of its own root path
        let (mut unique_sum, mut unique_n) = (0.0, 0usize);
        for i in 0..tree.nodes.len() {
            let path = path_to(&tree, i);
            let tokens: Vec<usize> = path
                .iter()
                .flat_map(|&j| tree.nodes[j].tokens.iter().map(|&x| x as usize))
                .collect();
            let start = tokens.len() - tree.nodes[i].tokens.len();
            let logits = lm_forward(&tokens, &model)?;
            for p in start.max(1)..tokens.len() {
                unique_sum += oracle::nll(logits.row(p - 1), tokens[p]);
                unique_n += 1;
            }
        }
        ensure!(masked_n == unique_n, "tree {case}: {masked_n} masked targets vs {unique_n} unique");
        let (a, b) = (masked_sum / masked_n.max(1) as f64, unique_sum / unique_n.max(1) as f64);
        ensure!((a - b).abs() < 1e-6, "tree {case}: masked loss {a} vs unique {b}");
        worst = worst.max((a - b).abs());

        let paths = enumerate_paths(&tree);
        ensure!(paths.len() == threads.len(), "tree {case}: {} threads, {} paths", threads.len(), paths.len());
        let mut got_paths: Vec<Vec<u64>> = threads.iter().map(|t| t.path.clone()).collect();
        let mut want_paths: Vec<Vec<u64>> = paths.iter().map(|p| p.iter().map(|&i| tree.nodes[i].id).collect()).collect();
        got_paths.sort();
        want_paths.sort();
        ensure!(got_paths == want_paths, "tree {case}: thread paths differ");
        let total: usize = paths.iter().flatten().map(|&i| tree.nodes[i].tokens.len()).sum();
        let unique: usize = tree.nodes.iter().map(|m| m.tokens.len()).sum();
        let want = total as f64 / unique as f64 - 1.0;
        let got = tree.repetition_overhead()?;
        ensure!(got == want, "tree {case}: overhead {got} vs enumeration {want}");
    }

    // per-source overheads and stage-1 shares of the conversation sources
    let mix = [(0.061, 0.79), (0.0072, 1.64), (0.0004, 0.97)];
    let by_hand = 0.061 * 0.79 + 0.0072 * 1.64 + 0.0004 * 0.97;
    let w = weighted_overhead(&mix);
    ensure!((w - by_hand).abs() < 1e-15, "weighted overhead {w} vs {by_hand}");
    ensure!((w - 0.06).abs() <= 0.005, "weighted overhead {w} is not +6% within 0.5 pt");
    Ok(format!(
        "200 trees ({threads_total} threads), max |masked - unique| {worst:.1e} < 1e-6; overhead exact; weighted +{:.2}%",
        100.0 * w
    ))
}

/// `n` words of exactly `total` characters: two copies of `stop` (when
/// `stops` is 2) or one, the rest filler made of `x`.
fn sized_text(stop: &str, stops: usize, words: usize, total: usize) -> String {
    let stop_len = stop.chars().count();
    let mut out: Vec<String> = vec![stop.to_string(); stops];
    if stops < 2 {
        out.push("x".repeat(stop_len));
    }
    let fillers = words - 2;
    let filler_chars = total - 2 * stop_len;
    assert!(filler_chars >= fillers);
    for i in 0..fillers {
        let len = filler_chars / fillers + usize::from(i < filler_chars % fillers);
        out.push("x".repeat(len));
    }
    out.join(" ")
}

fn c6_filters() -> Outcome {
    let table: [(&str, f64, f64, &str); 10] = [
        ("cs", 2.0, 13.0, "a, k, ke, z, ze, u, to, do, mít, s, se, na, v, ve, je, jsem"),
        ("de", 3.0, 13.0, "das, sein, zu, von, und, haben, mit"),
        ("es", 3.0, 11.0, "el, la, los, las, en, a, de, del, y, con, que, es, ha"),
        ("fr", 3.0, 11.0, "les, dans, un, une, de, et, ou, avec, cela, c’est, à, comme, que"),
        ("it", 3.0, 11.0, "il, in, a, da, di, che, con, per, sono, è, era, io, lui"),
        ("nl", 3.0, 13.0, "de, zijn, naar, van, en, dat, hebben, met"),
        ("pl", 2.0, 13.0, "do, że, i, co, to, mieć, z, w, ze, na, jestem, jest"),
        ("pt", 3.0, 11.0, "o, em, a, de, e, com, que, é, para"),
        ("ro", 3.0, 11.0, "o, un, care, este, către, spre, din, în, și, sau, să, ca, cu, la, de"),
        ("sv", 3.0, 13.0, "det, vara, till, av, och, har, med"),
    ];
    let reg = RuleRegistry::builtin();
    ensure!(reg.len() == 10, "{} builtin rule sets", reg.len());
    let words = 10;
    let mut boundary_checks = 0;
    for (lang, lo, hi, stops) in table {
        let rules = reg.get(lang)?;
        let want: HashSet<String> = stops.split(", ").map(str::to_string).collect();
        ensure!(rules.stop_words == want, "{lang} stop words {:?}", rules.stop_words);
        ensure!(
            rules.char_per_word_min == lo && rules.char_per_word_max == hi,
            "{lang} range {}..{}",
            rules.char_per_word_min,
            rules.char_per_word_max
        );
        ensure!(rules.min_stop_words == 2, "{lang} needs {} stop words", rules.min_stop_words);

        let stop = want.iter().min_by_key(|s| (s.chars().count(), s.to_string())).unwrap();
        let (lo_chars, hi_chars) = (lo as usize * words, hi as usize * words);
        let cases = [
            (sized_text(stop, 2, words, lo_chars), true, "mean at min, 2 stop words"),
            (sized_text(stop, 2, words, hi_chars), true, "mean at max, 2 stop words"),
            (sized_text(stop, 2, words, lo_chars - 1), false, "mean just below min"),
            (sized_text(stop, 2, words, hi_chars + 1), false, "mean just above max"),
            (sized_text(stop, 1, words, lo_chars + 5), false, "1 stop word"),
            (sized_text(stop, 2, words, lo_chars + 5), true, "2 stop words"),
        ];
        for (text, pass, what) in cases {
            let v = rules.check(&text);
            ensure!(v.passed() == pass, "{lang}: {what}: got {v:?} for {text:?}");
            boundary_checks += 1;
        }
    }

    let cfg = CodeFilterConfig::default();
    let sample = |text: String, score: f64| CodeSample {
        text,
        programming_language: "Python".into(),
        nl_language: "en".into(),
        nl_score: score,
    };
    let words_of = |n: usize, w: &str| vec![w; n].join(" ");
    let base = words_of(50, "word");
    ensure!(code_filter(&sample(base.clone(), 0.5), &cfg).is_ok(), "base sample rejected");
    ensure!(matches!(code_filter(&sample(base.clone(), 0.15), &cfg), Err(CodeReject::Score(_))), "score 0.15 accepted");
    ensure!(code_filter(&sample(base.clone(), 0.150_000_1), &cfg).is_ok(), "score just above 0.15 rejected");
    ensure!(
        matches!(code_filter(&sample(words_of(49, "word"), 0.5), &cfg), Err(CodeReject::WordCount(49))),
        "49 words accepted"
    );
    // 50 alphanumerics in exactly 500 characters, then one more punctuation mark
    let mut punct = vec![8usize; 50];
    punct[0] += 1;
    let at = |p: &[usize]| p.iter().map(|&k| format!("a{}", "!".repeat(k))).collect::<Vec<_>>().join(" ");
    let exact = at(&punct);
    ensure!(exact.chars().count() == 500, "alnum fixture has {} chars", exact.chars().count());
    ensure!(code_filter(&sample(exact, 0.5), &cfg).is_ok(), "alnum ratio 0.1 rejected");
    punct[1] += 1;
    ensure!(
        matches!(code_filter(&sample(at(&punct), 0.5), &cfg), Err(CodeReject::AlnumRatio(_))),
        "alnum ratio below 0.1 accepted"
    );
    let long = "a".repeat(100);
    ensure!(code_filter(&sample(words_of(50, &long), 0.5), &cfg).is_ok(), "avg word length 100 rejected");
    let over = format!("{} {}", words_of(49, &long), "a".repeat(101));
    ensure!(
        matches!(code_filter(&sample(over, 0.5), &cfg), Err(CodeReject::AvgWordLength(_))),
        "avg word length above 100 accepted"
    );
    Ok(format!(
        "10 rule sets match the reference values; {boundary_checks} word-length/stop-word edges; code gates 0.15/50/0.1/100 hold"
    ))
}

fn c7_schedules() -> Outcome {
    let lr = LrSchedule::reference();
    let checks = [(0.0, 0.0), (4.0 * GT, 3.7e-4), (4500.0 * GT, 1.89e-5)];
    for (t, want) in checks {
        let got = lr.lr_at(t);
        ensure!((got - want).abs() <= 1e-12 * want.max(1e-30), "lr_at({t:e}) = {got:e}, want {want:e}");
    }
    for t in [4500.0, 4600.0, 5000.0, 5500.0] {
        let got = lr.lr_at(t * GT);
        ensure!(got == 1.89e-5, "lr_at({t} GT) = {got:e}");
    }
    // the schedule runs on global token counts; stages 2-4 sit on the
    // constant tail
    let mut start = 0u64;
    for st in CurriculumPlan::reference(0).resolve()? {
        if st.stage > 1 {
            for t in [start, start + st.token_budget / 2, start + st.token_budget] {
                let got = st.lr.lr_at(t as f64);
                ensure!(got == 1.89e-5, "stage {} lr_at({t:e}) = {got:e}", st.stage);
            }
        }
        start += st.token_budget;
    }
    let mid = lr.lr_at(2252.0 * GT);
    ensure!(mid < 3.7e-4 && mid > 1.89e-5, "cosine midpoint {mid:e}");

    let bs = BatchSchedule::reference();
    ensure!(bs.sizes() == vec![2048, 4096, 8192, 16384, 32768], "sizes {:?}", bs.sizes());
    let pts = bs.doubling_points();
    ensure!(pts.len() == 4 && pts.windows(2).all(|w| w[0] < w[1]), "doubling points {pts:?}");
    for &p in &pts {
        let (before, after) = (bs.batch_size_at(p - 1.0), bs.batch_size_at(p));
        ensure!(after == 2 * before, "at {p:e}: {before} -> {after}");
    }
    ensure!(bs.batch_size_at(0.0) == 2048 && bs.batch_size_at(1e15) == 32768, "end points");

    let mut ratio_err: f64 = 0.0;
    for eta in [3.7e-4, 1.89e-5, 1.0] {
        for b in bs.sizes().windows(2) {
            let r = noise_temperature(eta, b[0]) / noise_temperature(eta, b[1]);
            let err = (r - std::f64::consts::SQRT_2).abs();
            ensure!(err <= 2.0 * f64::EPSILON * std::f64::consts::SQRT_2, "T({})/T({}) = {r}", b[0], b[1]);
            ratio_err = ratio_err.max(err);
        }
        for &b in &bs.sizes()[..3] {
            let r = noise_temperature(eta, b) / noise_temperature(eta, 4 * b);
            ensure!(r == 2.0, "T({b})/T({}) = {r}", 4 * b);
        }
    }
    Ok(format!(
        "lr 0 / 3.7e-4 / 1.89e-5 and constant after; batch 2048->32768 in 4 doublings; T ratio sqrt2 err {ratio_err:.1e}, T(B)/T(4B) = 2 exact"
    ))
}

fn random_examples(r: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> Vec<LmExample> {
    (0..n)
        .map(|_| {
            let cut = r.random_range(1..len);
            LmExample {
                inputs: (0..len).map(|_| r.random_range(0..vocab)).collect(),
                targets: (0..len).map(|_| r.random_range(0..vocab)).collect(),
                target_mask: (0..len).map(|_| r.random_bool(0.8)).collect(),
                segments: (0..len).map(|i| u32::from(i >= cut)).collect(),
            }
        })
        .collect()
}

fn c8_grad_accumulation() -> Outcome {
    let mut r = rng(8);
    let mut cfg = presets::toy();
    cfg.context_length = 32;
    let b = 4;
    let examples = random_examples(&mut r, 2 * b, 24, cfg.vocab_size);
    let mut report = Vec::new();

    let m64 = Model::<f64>::init(cfg.clone(), 8, 0.05)?;
    let full = batch_gradients(&m64, &examples, 2 * b, 1e-4)?;
    let mut worst: f64 = 0.0;
    for micro in [b, 1, 3] {
        let acc = batch_gradients(&m64, &examples, micro, 1e-4)?;
        ensure!(acc.grads.len() == full.grads.len(), "gradient sets differ");
        let diff = full
            .grads
            .iter()
            .map(|(k, g)| g.max_abs_diff(&acc.grads[k]))
            .fold((acc.loss - full.loss).abs(), f64::max);
        ensure!(diff < 1e-6, "f64 micro {micro}: max diff {diff:e}");
        worst = worst.max(diff);
    }
    report.push(format!("f64 {worst:.1e}"));

    let m32 = m64.cast::<f32>();
    let full = batch_gradients(&m32, &examples, 2 * b, 1e-4)?;
    let acc = batch_gradients(&m32, &examples, b, 1e-4)?;
    let diff = full
        .grads
        .iter()
        .map(|(k, g)| g.max_abs_diff(&acc.grads[k]))
        .fold((acc.loss - full.loss).abs(), f64::max);
    ensure!(diff < 1e-6, "f32 micro {b}: max diff {diff:e}");
    report.push(format!("f32 {diff:.1e}"));

    let summed: BTreeMap<_, _> = full.grads.iter().map(|(k, g)| (k.clone(), g.l2_norm())).collect();
    ensure!(summed.values().any(|&n| n > 0.0), "all gradients are zero");
    Ok(format!("batch {} as micro {b} (and 1, 3) vs one pass: max diff {}", 2 * b, report.join(", ")))
}

fn c9_rollback_bisimulation() -> Outcome {
    let plan = CurriculumPlan::desk(9, 1e-8);
    let mut a = Trainer::new(plan.clone(), CheckpointStore::memory())?;
    let sa = a.run(a.fresh_state()?)?;
    ensure!(a.is_complete(&sa), "uninterrupted run did not finish");
    let steps = sa.step;

    // stop half way, pass the state through an archive, resume on a fresh
    // trainer that inherits the checkpoint store
    let mut b = Trainer::new(plan.clone(), CheckpointStore::memory())?;
    b.stop_after(Some(steps / 2));
    let mid = b.run(b.fresh_state()?)?;
    ensure!(mid.step == steps / 2 && !b.is_complete(&mid), "stopped at step {}", mid.step);
    let (manifest, payload) = mid.to_archive(&plan)?.encode()?;
    let (mid_back, plan_back) = TrainState::from_archive(TensorArchive::decode(&manifest, &payload)?)?;
    ensure!(plan_back == plan, "plan changed through the archive");
    let store = std::mem::replace(&mut b.store, CheckpointStore::memory());
    let mut c = Trainer::new(plan.clone(), store)?;
    let sc = c.run(mid_back)?;
    ensure!(sc.bit_eq(&sa), "resumed state differs from the uninterrupted one");
    let joined: Vec<&Record> = b.report.deterministic().into_iter().chain(c.report.deterministic()).collect();
    ensure!(joined == a.report.deterministic(), "resumed records differ");

    // checkpoint round trip
    let (m1, p1) = sa.to_archive(&plan)?.encode()?;
    let (back, _) = TrainState::from_archive(TensorArchive::decode(&m1, &p1)?)?;
    ensure!(back.bit_eq(&sa), "checkpoint round trip is not bit-exact");
    let (m2, p2) = back.to_archive(&plan)?.encode()?;
    ensure!(m1 == m2 && p1 == p2, "re-encoded checkpoint bytes differ");
    let dir = tempfile::tempdir()?;
    let mut disk = CheckpointStore::dir(dir.path())?;
    let mut s = sa.clone();
    let id = disk.save(&mut s, &plan)?;
    let (from_disk, _) = disk.load(id)?;
    ensure!(from_disk.bit_eq(&s), "on-disk checkpoint round trip is not bit-exact");

    // injected non-finite loss: rollback and skip, identically twice
    let fault = steps / 3;
    let spiked = || -> Result<(TrainState, Trainer), Box<dyn Error>> {
        let mut t = Trainer::new(plan.clone(), CheckpointStore::memory())?;
        t.inject_nan_loss(fault);
        let s = t.run(t.fresh_state()?)?;
        Ok((s, t))
    };
    let (s1, t1) = spiked()?;
    let (s2, t2) = spiked()?;
    ensure!(t1.is_complete(&s1), "spiked run did not finish");
    ensure!(s1.bit_eq(&s2), "spiked runs diverge");
    ensure!(t1.report.deterministic() == t2.report.deterministic(), "spiked run records diverge");
    let spikes = t1.report.spike_count();
    let rollback = t1.report.records.iter().find_map(|r| match r {
        Record::Rollback { checkpoint, skipped, .. } => Some((*checkpoint, *skipped)),
        _ => None,
    });
    ensure!(spikes == 1 && s1.spikes == 1, "{spikes} spikes recorded, state counts {}", s1.spikes);
    let (ckpt, skipped) = rollback.ok_or("no rollback record")?;
    ensure!(skipped == plan.spike.skip_tokens, "skipped {skipped}");
    ensure!(!s1.model.bit_eq(&sa.model), "skip had no effect on the trajectory");
    Ok(format!(
        "{steps} steps; stop at {} + resume bit-equal; archive bytes stable; NaN at step {fault} -> rollback to checkpoint {ckpt}, skip {skipped} tokens, replay identical",
        steps / 2
    ))
}

fn c10_desk_curriculum() -> Outcome {
    let t0 = Instant::now();
    let seed = 10;
    let plan = CurriculumPlan::desk(seed, 1e-6);
    let (state, report) = run_curriculum(&plan, seed)?;
    let secs = t0.elapsed().as_secs_f64();
    let evals = report.evals();
    let (first, last) = (evals.first().ok_or("no evals")?, evals.last().unwrap());
    ensure!(first.1 == 0 && first.0 == 1, "first eval at stage {} after {} tokens", first.0, first.1);
    ensure!(last.2 <= 0.8 * first.2, "perplexity {:.3} -> {:.3} is not 20% lower", first.2, last.2);
    let losses: Vec<f64> = report.steps().map(|s| s.3).collect();
    ensure!(!losses.is_empty() && losses.iter().all(|l| l.is_finite()), "non-finite loss");
    ensure!(evals.iter().all(|e| e.2.is_finite()), "non-finite perplexity");
    let starts: Vec<(u8, usize, f64, bool)> = report
        .records
        .iter()
        .filter_map(|r| match r {
            Record::StageStart {
                stage,
                context_length,
                rope_base,
                tied_embeddings,
                ..
            } => Some((*stage, *context_length, *rope_base, *tied_embeddings)),
            _ => None,
        })
        .collect();
    let want = vec![
        (1, 128, ROPE_BASE_LONG, true),
        (2, 256, ROPE_BASE_LONG, true),
        (3, 512, ROPE_BASE_LONG, true),
        (4, 512, ROPE_BASE_FINAL, false),
    ];
    ensure!(starts == want, "stage starts {starts:?}");
    let ends = report.records.iter().filter(|r| matches!(r, Record::StageEnd { .. })).count();
    ensure!(ends == 4 && state.stage_index == 4, "{ends} stage ends");
    ensure!(secs < 600.0, "took {secs:.0}s, limit 600s");
    Ok(format!(
        "{} steps; held-out perplexity {:.2} -> {:.3} ({:.1}% lower); contexts 128/256/512/512 logged",
        losses.len(),
        first.2,
        last.2,
        100.0 * (1.0 - last.2 / first.2)
    ))
}

fn c11_throughput() -> Outcome {
    let rows = [(7.8, 1024, 7.6), (8.5, 1280, 6.6)];
    let mut out = Vec::new();
    for (gt, devices, want) in rows {
        let rep = ThroughputReport::from_rate(gt, devices)?;
        let nmt = rep.nmt_per_hour();
        let rounded = (nmt * 10.0).round() / 10.0;
        ensure!(rounded == want, "{gt} GT/H on {devices}: {nmt} nMT/H rounds to {rounded}, want {want}");
        ensure!((rep.gt_per_hour() - gt).abs() < 1e-12, "GT/H {} from {gt}", rep.gt_per_hour());
        out.push(format!("{gt}/{devices} -> {nmt:.3}"));
    }
    Ok(out.join(", "))
}

fn c12_vlm_freeze() -> Outcome {
    let mut cfg = desk_model();
    cfg.context_length = 256;
    let llm = Model::<f32>::init(cfg, 12, 0.02)?;
    let model = VlmModel::new(llm.clone(), desk_vision(), GridPolicy::default(), 12)?;

    let tokens = [5, 17, 3, 59, 42, 0, 7];
    let a = model.logits(None, &tokens)?;
    let b = lm_forward(&tokens, &llm)?;
    ensure!(a.bit_eq(&b), "image-free logits differ from the base model");

    let mut st = VlmState::new(model);
    let vocab = st.model.llm.config.vocab_size;
    let base = st.model.vision.base;
    let tcfg = VlmTrainConfig {
        steps: 100,
        batch: 4,
        ..Default::default()
    };
    let data = synthetic_fixtures(VlmStage::Pretrain, 32, vocab, base, 12);
    let pre = vlm_train_stage(VlmStage::Pretrain, &data, &mut st, &tcfg)?;
    ensure!(pre.losses.len() == 100, "{} pretrain steps", pre.losses.len());
    ensure!(pre.before.llm == pre.after.llm, "pretrain changed the LLM");
    ensure!(pre.before.encoder == pre.after.encoder, "pretrain changed the encoder");
    ensure!(pre.before.projector != pre.after.projector, "pretrain did not train the projector");
    ensure!(st.model.llm.bit_eq(&llm), "LLM weights moved during pretrain");
    let a = st.model.logits(None, &tokens)?;
    ensure!(a.bit_eq(&b), "image-free logits changed after pretrain");

    let data = synthetic_fixtures(VlmStage::Finetune, 16, vocab, base, 13);
    let fine = vlm_train_stage(
        VlmStage::Finetune,
        &data,
        &mut st,
        &VlmTrainConfig {
            steps: 10,
            ..tcfg
        },
    )?;
    ensure!(fine.before.llm != fine.after.llm, "finetune left the LLM unchanged");
    ensure!(fine.before.encoder == fine.after.encoder, "finetune changed the encoder");
    let after = st.model.logits(None, &tokens)?;
    ensure!(after.bit_eq(&lm_forward(&tokens, &st.model.llm)?), "image-free logits differ after finetune");
    Ok(format!(
        "pretrain 100 steps: llm {} / encoder {} unchanged, loss {:.3} -> {:.3}; finetune moved llm; no-image logits bit-equal",
        &pre.after.llm[..12],
        &pre.after.encoder[..12],
        pre.losses[0],
        pre.losses[99]
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("parallel-block identity", c1_parallel_block),
        ("gradient fidelity", c2_gradient_fidelity),
        ("GQA degeneracy", c3_gqa_degeneracy),
        ("rotary embeddings", c4_rope),
        ("conversation masking", c5_conversation_masking),
        ("filters", c6_filters),
        ("schedules", c7_schedules),
        ("gradient accumulation", c8_grad_accumulation),
        ("rollback bisimulation", c9_rollback_bisimulation),
        ("desk-scale curriculum", c10_desk_curriculum),
        ("throughput report", c11_throughput),
        ("VLM freeze contract", c12_vlm_freeze),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = Vec::new();
    let _ = writeln!(std::io::stdout().lock());
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f);
        let secs = t0.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) => (true, d),
            Ok(Err(e)) => (false, e.to_string()),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        let line = format!("[{}] {n:>2}. {name} ({secs:.2}s): {detail}", if ok { "PASS" } else { "FAIL" });
        // bypass the test harness capture so the lines show up in plain runs
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if !ok {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

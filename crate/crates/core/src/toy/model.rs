//! Pre-norm transformer with GELU MLPs, forward pass with activation capture and
//! prune masking, and a hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{Task, ToyConfig};
use crate::archive::{Archive, Tensor};
use crate::error::{ensure, Error, Result};
use crate::geometry::ModelGeometry;
use crate::scoring::PruneMask;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// One model input.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    /// Real-valued patches, `seq x input_dim`, prefixed internally by a CLS token.
    Patches(Vec<Vec<f64>>),
    /// Token ids, attended causally.
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    /// `model_dim x mlp_dim`; column `i` is neuron `i`'s input weights.
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    /// `mlp_dim x model_dim`.
    pub w_out: Vec<f64>,
}

/// All parameters. Matrices are row-major `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Patch projection (`input_dim x d`) or token table (`vocab x d`).
    pub embed: Vec<f64>,
    /// Patch projection bias; empty for token models.
    pub embed_b: Vec<f64>,
    /// CLS token; empty for token models.
    pub cls: Vec<f64>,
    pub pos: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Weights {
    fn shaped(cfg: &ToyConfig) -> Vec<(String, Vec<usize>)> {
        let (d, m, c) = (cfg.model_dim, cfg.mlp_dim, cfg.num_classes);
        let mut v = Vec::new();
        match cfg.task {
            Task::Classification => {
                v.push(("embed".into(), vec![cfg.input_dim, d]));
                v.push(("embed_b".into(), vec![d]));
                v.push(("cls".into(), vec![d]));
            }
            Task::NextToken => {
                v.push(("embed".into(), vec![c, d]));
                v.push(("embed_b".into(), vec![0]));
                v.push(("cls".into(), vec![0]));
            }
        }
        v.push(("pos".into(), vec![cfg.positions(), d]));
        for l in 0..cfg.num_layers {
            for (name, shape) in [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w_in", vec![d, m]),
                ("b_in", vec![m]),
                ("w_out", vec![m, d]),
            ] {
                v.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        v.push(("lnf_g".into(), vec![d]));
        v.push(("lnf_b".into(), vec![d]));
        v.push(("head_w".into(), vec![d, c]));
        v.push(("head_b".into(), vec![c]));
        v
    }

    /// Parameter tensors in a fixed order, for serialization and flat access.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = vec![&self.embed, &self.embed_b, &self.cls, &self.pos];
        for b in &self.blocks {
            v.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w_in, &b.b_in, &b.w_out,
            ]);
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = vec![&mut self.embed, &mut self.embed_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_in,
                &mut b.b_in,
                &mut b.w_out,
            ]);
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Weights, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    fn init(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
        };
        let (d, m, c) = (cfg.model_dim, cfg.mlp_dim, cfg.num_classes);
        let (embed, embed_b, cls) = match cfg.task {
            Task::Classification => (
                normal(cfg.input_dim * d, (cfg.input_dim as f64).powf(-0.5)),
                vec![0.0; d],
                normal(d, 1.0),
            ),
            Task::NextToken => (normal(c * d, 1.0), vec![], vec![]),
        };
        let pos = normal(cfg.positions() * d, 0.1);
        let s_d = (d as f64).powf(-0.5);
        let s_m = (m as f64).powf(-0.5);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: normal(d * d, s_d),
                wk: normal(d * d, s_d),
                wv: normal(d * d, s_d),
                wo: normal(d * d, s_d),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w_in: normal(d * m, s_d),
                b_in: vec![0.0; m],
                w_out: normal(m * d, s_m),
            })
            .collect();
        Self {
            embed,
            embed_b,
            cls,
            pos,
            blocks,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head_w: normal(d * c, s_d),
            head_b: vec![0.0; c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: ToyConfig,
    pub weights: Weights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row of class/vocab logits per output position (a single CLS row for
    /// classification, every position for next-token prediction).
    pub logits: Vec<Vec<f64>>,
    /// `[layer][position][neuron]` post-activation, post-mask MLP values.
    pub activations: Option<Vec<Vec<Vec<f64>>>>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) struct BlockTrace {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x T x T`, row `t` holds the attention of position `t`.
    pub(crate) probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    z: Vec<f64>,
    /// Post-activation, post-mask, `T x mlp_dim`.
    pub(crate) h: Vec<f64>,
    /// Residual stream after the block, `T x d`.
    pub(crate) out: Vec<f64>,
}

pub(crate) struct Trace {
    pub(crate) t: usize,
    pub(crate) blocks: Vec<BlockTrace>,
    out_rows: Vec<usize>,
    lnf: LnCache,
    f: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

pub fn build_model(config: ToyConfig) -> Result<ToyTransformer> {
    config.validate()?;
    let weights = Weights::init(&config);
    Ok(ToyTransformer { config, weights })
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let th = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

/// `x (rows x din) @ w (din x dout)`.
fn matmul(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (i, &xi) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xi != 0.0 {
                for (yo, &wo) in yr.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
                    *yo += xi * wo;
                }
            }
        }
    }
    y
}

/// Accumulates `dw += x^T dy` and returns `dx = dy w^T`.
fn matmul_backward(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize, dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for i in 0..din {
            let wi = &w[i * dout..(i + 1) * dout];
            let dwi = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = 0.0;
            for o in 0..dout {
                acc += dyr[o] * wi[o];
                dwi[o] += xr[i] * dyr[o];
            }
            dxr[i] = acc;
        }
    }
    dx
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[f64], cache: &LnCache, d: usize, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

impl ToyTransformer {
    pub fn geometry(&self) -> ModelGeometry {
        self.config.geometry()
    }

    fn check_mask(&self, mask: Option<&PruneMask>) -> Result<()> {
        if let Some(m) = mask {
            self.geometry().ensure_compatible(&m.geometry)?;
            m.geometry.ensure_shape(&m.keep)?;
        }
        Ok(())
    }

    /// Sequence length the input occupies inside the model.
    fn check_input(&self, input: &Input) -> Result<usize> {
        let cfg = &self.config;
        match (input, cfg.task) {
            (Input::Patches(p), Task::Classification) => {
                ensure!(
                    !p.is_empty() && p.len() <= cfg.max_seq_len,
                    Validation,
                    "expected 1..={} patches, got {}",
                    cfg.max_seq_len,
                    p.len()
                );
                for row in p {
                    ensure!(
                        row.len() == cfg.input_dim,
                        Validation,
                        "patch has {} values, expected {}",
                        row.len(),
                        cfg.input_dim
                    );
                    ensure!(row.iter().all(|x| x.is_finite()), Validation, "non-finite patch value");
                }
                Ok(p.len() + 1)
            }
            (Input::Tokens(t), Task::NextToken) => {
                ensure!(
                    !t.is_empty() && t.len() <= cfg.max_seq_len,
                    Validation,
                    "expected 1..={} tokens, got {}",
                    cfg.max_seq_len,
                    t.len()
                );
                ensure!(
                    t.iter().all(|&x| x < cfg.num_classes),
                    Validation,
                    "token id out of range for vocabulary of {}",
                    cfg.num_classes
                );
                Ok(t.len())
            }
            _ => Err(Error::Validation(format!(
                "input kind does not match a {:?} model",
                cfg.task
            ))),
        }
    }

    pub fn forward(&self, input: &Input, mask: Option<&PruneMask>, capture: bool) -> Result<ForwardOutput> {
        self.check_mask(mask)?;
        let trace = self.trace(input, mask.map(|m| m.keep.as_slice()))?;
        let c = self.config.num_classes;
        let logits = trace.logits.chunks(c).map(<[f64]>::to_vec).collect();
        let activations = capture.then(|| {
            let m = self.config.mlp_dim;
            trace
                .blocks
                .iter()
                .map(|b| b.h.chunks(m).map(<[f64]>::to_vec).collect())
                .collect()
        });
        Ok(ForwardOutput { logits, activations })
    }

    pub(crate) fn trace(&self, input: &Input, keep: Option<&[Vec<bool>]>) -> Result<Trace> {
        let t = self.check_input(input)?;
        let cfg = &self.config;
        let w = &self.weights;
        let (d, m, nh) = (cfg.model_dim, cfg.mlp_dim, cfg.num_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let causal = cfg.task == Task::NextToken;

        let mut x = vec![0.0; t * d];
        match input {
            Input::Patches(p) => {
                x[..d].copy_from_slice(&w.cls);
                let flat: Vec<f64> = p.iter().flatten().copied().collect();
                let proj = matmul(&flat, p.len(), cfg.input_dim, &w.embed, d);
                for r in 0..p.len() {
                    for j in 0..d {
                        x[(r + 1) * d + j] = proj[r * d + j] + w.embed_b[j];
                    }
                }
            }
            Input::Tokens(tokens) => {
                for (r, &tok) in tokens.iter().enumerate() {
                    x[r * d..(r + 1) * d].copy_from_slice(&w.embed[tok * d..(tok + 1) * d]);
                }
            }
        }
        for (xi, pi) in x.iter_mut().zip(&w.pos) {
            *xi += pi;
        }

        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for (l, bw) in w.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, t, d, &bw.ln1_g, &bw.ln1_b);
            let q = matmul(&a, t, d, &bw.wq, d);
            let k = matmul(&a, t, d, &bw.wk, d);
            let v = matmul(&a, t, d, &bw.wv, d);
            let mut probs = vec![0.0; nh * t * t];
            let mut o = vec![0.0; t * d];
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let visible = if causal { i + 1 } else { t };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..visible {
                        let s: f64 = cols.clone().map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for p in &mut row[..visible] {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    for p in &mut row[..visible] {
                        *p /= sum;
                    }
                    for j in 0..visible {
                        let p = row[j];
                        for c in cols.clone() {
                            o[i * d + c] += p * v[j * d + c];
                        }
                    }
                }
            }
            let attn = matmul(&o, t, d, &bw.wo, d);
            let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

            let (b, ln2) = layer_norm(&x1, t, d, &bw.ln2_g, &bw.ln2_b);
            let mut z = matmul(&b, t, d, &bw.w_in, m);
            for r in 0..t {
                for (zi, bi) in z[r * m..(r + 1) * m].iter_mut().zip(&bw.b_in) {
                    *zi += bi;
                }
            }
            let mut h: Vec<f64> = z.iter().map(|&zi| gelu(zi)).collect();
            if let Some(keep) = keep {
                for r in 0..t {
                    for (hi, &k) in h[r * m..(r + 1) * m].iter_mut().zip(&keep[l]) {
                        if !k {
                            *hi = 0.0;
                        }
                    }
                }
            }
            let mlp = matmul(&h, t, m, &bw.w_out, d);
            let out: Vec<f64> = x1.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            blocks.push(BlockTrace { ln1, a, q, k, v, probs, o, ln2, b, z, h, out });
            x.clone_from(&blocks[l].out);
        }

        let out_rows: Vec<usize> = match cfg.task {
            Task::Classification => vec![0],
            Task::NextToken => (0..t).collect(),
        };
        let sel: Vec<f64> = out_rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        let (f, lnf) = layer_norm(&sel, out_rows.len(), d, &w.lnf_g, &w.lnf_b);
        let c = cfg.num_classes;
        let mut logits = matmul(&f, out_rows.len(), d, &w.head_w, c);
        for r in 0..out_rows.len() {
            for (li, bi) in logits[r * c..(r + 1) * c].iter_mut().zip(&w.head_b) {
                *li += bi;
            }
        }
        Ok(Trace { t, blocks, out_rows, lnf, f, logits })
    }

    /// Accumulates parameter gradients given `dlogits` (same layout as `trace.logits`).
    pub(crate) fn backward(&self, input: &Input, trace: &Trace, dlogits: &[f64], keep: Option<&[Vec<bool>]>, g: &mut Weights) {
        let cfg = &self.config;
        let w = &self.weights;
        let (d, m, nh, c, t) = (cfg.model_dim, cfg.mlp_dim, cfg.num_heads, cfg.num_classes, trace.t);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = trace.out_rows.len();

        for r in 0..rows {
            for j in 0..c {
                g.head_b[j] += dlogits[r * c + j];
            }
        }
        let df = matmul_backward(&trace.f, rows, d, &w.head_w, c, dlogits, &mut g.head_w);
        let dsel = layer_norm_backward(&df, &trace.lnf, d, &w.lnf_g, &mut g.lnf_g, &mut g.lnf_b);
        let mut dx = vec![0.0; t * d];
        for (i, &r) in trace.out_rows.iter().enumerate() {
            for j in 0..d {
                dx[r * d + j] += dsel[i * d + j];
            }
        }

        for l in (0..cfg.num_layers).rev() {
            let bt = &trace.blocks[l];
            let bw = &w.blocks[l];
            let gb = &mut g.blocks[l];

            // MLP
            let dh_act = matmul_backward(&bt.h, t, m, &bw.w_out, d, &dx, &mut gb.w_out);
            let mut dz = vec![0.0; t * m];
            for r in 0..t {
                for i in 0..m {
                    let kept = keep.is_none_or(|k| k[l][i]);
                    if kept {
                        dz[r * m + i] = dh_act[r * m + i] * gelu_grad(bt.z[r * m + i]);
                    }
                }
            }
            for r in 0..t {
                for i in 0..m {
                    gb.b_in[i] += dz[r * m + i];
                }
            }
            let db = matmul_backward(&bt.b, t, d, &bw.w_in, m, &dz, &mut gb.w_in);
            let dx1_ln = layer_norm_backward(&db, &bt.ln2, d, &bw.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            let dx1: Vec<f64> = dx.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();

            // attention
            let d_o = matmul_backward(&bt.o, t, d, &bw.wo, d, &dx1, &mut gb.wo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let row = &bt.probs[(h * t + i) * t..(h * t + i + 1) * t];
                    for j in 0..t {
                        dp[j] = cols.clone().map(|cc| d_o[i * d + cc] * bt.v[j * d + cc]).sum();
                        for cc in cols.clone() {
                            dv[j * d + cc] += row[j] * d_o[i * d + cc];
                        }
                    }
                    let dot: f64 = row.iter().zip(&dp).map(|(p, g)| p * g).sum();
                    for j in 0..t {
                        let ds = row[j] * (dp[j] - dot) * scale;
                        if ds != 0.0 {
                            for cc in cols.clone() {
                                dq[i * d + cc] += ds * bt.k[j * d + cc];
                                dk[j * d + cc] += ds * bt.q[i * d + cc];
                            }
                        }
                    }
                }
            }
            let mut da = matmul_backward(&bt.a, t, d, &bw.wq, d, &dq, &mut gb.wq);
            for (x, y) in da.iter_mut().zip(matmul_backward(&bt.a, t, d, &bw.wk, d, &dk, &mut gb.wk)) {
                *x += y;
            }
            for (x, y) in da.iter_mut().zip(matmul_backward(&bt.a, t, d, &bw.wv, d, &dv, &mut gb.wv)) {
                *x += y;
            }
            let dx_ln = layer_norm_backward(&da, &bt.ln1, d, &bw.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
            dx = dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        }

        for (gp, dxi) in g.pos.iter_mut().zip(&dx) {
            *gp += dxi;
        }
        match input {
            Input::Patches(p) => {
                for (gc, dxi) in g.cls.iter_mut().zip(&dx[..d]) {
                    *gc += dxi;
                }
                let flat: Vec<f64> = p.iter().flatten().copied().collect();
                let dproj = &dx[d..];
                let _ = matmul_backward(&flat, p.len(), cfg.input_dim, &w.embed, d, dproj, &mut g.embed);
                for r in 0..p.len() {
                    for j in 0..d {
                        g.embed_b[j] += dproj[r * d + j];
                    }
                }
            }
            Input::Tokens(tokens) => {
                for (r, &tok) in tokens.iter().enumerate() {
                    for j in 0..d {
                        g.embed[tok * d + j] += dx[r * d + j];
                    }
                }
            }
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new()
            .with_metadata("kind", "toy_model")?
            .with_metadata("config", &self.config)?
            .with_metadata("geometry", self.geometry())?;
        for ((name, shape), data) in Weights::shaped(&self.config).into_iter().zip(self.weights.tensors()) {
            a.push(Tensor::f64(name, shape, data.clone())?);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: ToyConfig = a.meta("config")?;
        let mut model = build_model(config)?;
        let names = Weights::shaped(&model.config);
        for ((name, shape), slot) in names.into_iter().zip(model.weights.tensors_mut()) {
            let t = a.require(&name)?;
            ensure!(t.shape == shape, Format, "tensor '{name}' has shape {:?}, expected {shape:?}", t.shape);
            *slot = t.to_f64();
        }
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Mean cross-entropy of one example and, optionally, its gradient.
pub(crate) fn example_loss(model: &ToyTransformer, input: &Input, targets: &[usize], weight: f64, grads: Option<&mut Weights>) -> Result<(f64, Vec<f64>)> {
    let trace = model.trace(input, None)?;
    let c = model.config.num_classes;
    let rows = trace.out_rows.len();
    ensure!(targets.len() == rows, Validation, "{} targets for {rows} output positions", targets.len());
    let mut dlogits = vec![0.0; rows * c];
    let mut loss = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = &trace.logits[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for j in 0..c {
            let p = (row[j] - lse).exp();
            dlogits[r * c + j] = weight * (p - f64::from(u8::from(j == y))) / rows as f64;
        }
    }
    loss /= rows as f64;
    if let Some(g) = grads {
        model.backward(input, &trace, &dlogits, None, g);
    }
    Ok((loss, trace.logits))
}

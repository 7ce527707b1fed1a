//! Bidirectional denoising transformer.
//!
//! Pre-norm blocks with full (non-causal) self-attention, learned absolute
//! positions, GELU feed-forward at 4x width, and an optionally tied output
//! head. Computation is f64 throughout; parameters are kept f32-representable
//! so checkpoints (stored as 32-bit floats) round-trip forward outputs
//! bit-exactly.
//!
//! Gradients are hand-derived reverse-mode over the cached forward pass. The
//! finite-difference suite is the arbiter of their correctness. A whole batch
//! is concatenated row-wise so the linear layers run as single matrix products;
//! attention stays per-example.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::util::seeded_rng;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"DFER";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl DenoiserConfig {
    pub fn new(vocab_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            max_len: 64,
            vocab_size,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.n_layers == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Named tensor table of the model. Gradients reuse the same structure.
#[derive(Debug, Clone)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    /// Untied output head (vocab_size x d_model); None when tied.
    pub head: Option<Array2<f64>>,
}

impl Params {
    fn init(config: &DenoiserConfig, seed: u64) -> Params {
        let mut rng = seeded_rng(seed, "model-init");
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        // Keep every value exactly f32-representable; see module docs.
        let mut randn = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng) as f32 as f64)
        };
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams {
                    gamma: Array1::ones(d),
                    beta: Array1::zeros(d),
                },
                attn: AttentionParams {
                    wq: randn(d, d),
                    bq: Array1::zeros(d),
                    wk: randn(d, d),
                    bk: Array1::zeros(d),
                    wv: randn(d, d),
                    bv: Array1::zeros(d),
                    wo: randn(d, d),
                    bo: Array1::zeros(d),
                },
                ln2: LayerNormParams {
                    gamma: Array1::ones(d),
                    beta: Array1::zeros(d),
                },
                ffn: FfnParams {
                    w1: randn(d, 4 * d),
                    b1: Array1::zeros(4 * d),
                    w2: randn(4 * d, d),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        Params {
            tok_emb: randn(config.vocab_size, d),
            pos_emb: randn(config.max_len, d),
            blocks,
            ln_f: LayerNormParams {
                gamma: Array1::ones(d),
                beta: Array1::zeros(d),
            },
            head: if config.tie_embeddings {
                None
            } else {
                Some(Array2::zeros((config.vocab_size, d)))
            },
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: LayerNormParams {
                        gamma: Array1::zeros(b.ln1.gamma.raw_dim()),
                        beta: Array1::zeros(b.ln1.beta.raw_dim()),
                    },
                    attn: AttentionParams {
                        wq: Array2::zeros(b.attn.wq.raw_dim()),
                        bq: Array1::zeros(b.attn.bq.raw_dim()),
                        wk: Array2::zeros(b.attn.wk.raw_dim()),
                        bk: Array1::zeros(b.attn.bk.raw_dim()),
                        wv: Array2::zeros(b.attn.wv.raw_dim()),
                        bv: Array1::zeros(b.attn.bv.raw_dim()),
                        wo: Array2::zeros(b.attn.wo.raw_dim()),
                        bo: Array1::zeros(b.attn.bo.raw_dim()),
                    },
                    ln2: LayerNormParams {
                        gamma: Array1::zeros(b.ln2.gamma.raw_dim()),
                        beta: Array1::zeros(b.ln2.beta.raw_dim()),
                    },
                    ffn: FfnParams {
                        w1: Array2::zeros(b.ffn.w1.raw_dim()),
                        b1: Array1::zeros(b.ffn.b1.raw_dim()),
                        w2: Array2::zeros(b.ffn.w2.raw_dim()),
                        b2: Array1::zeros(b.ffn.b2.raw_dim()),
                    },
                })
                .collect(),
            ln_f: LayerNormParams {
                gamma: Array1::zeros(self.ln_f.gamma.raw_dim()),
                beta: Array1::zeros(self.ln_f.beta.raw_dim()),
            },
            head: self.head.as_ref().map(|h| Array2::zeros(h.raw_dim())),
        }
    }

    /// Flat mutable views over every tensor, in a fixed named order.
    pub fn flat_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.as_slice_mut().unwrap()));
        out.push(("pos_emb".into(), self.pos_emb.as_slice_mut().unwrap()));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.ln1.gamma"), b.ln1.gamma.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ln1.beta"), b.ln1.beta.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.wq"), b.attn.wq.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.bq"), b.attn.bq.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.wk"), b.attn.wk.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.bk"), b.attn.bk.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.wv"), b.attn.wv.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.bv"), b.attn.bv.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.wo"), b.attn.wo.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.attn.bo"), b.attn.bo.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ln2.gamma"), b.ln2.gamma.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ln2.beta"), b.ln2.beta.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ffn.w1"), b.ffn.w1.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ffn.b1"), b.ffn.b1.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ffn.w2"), b.ffn.w2.as_slice_mut().unwrap()));
            out.push((format!("blocks.{l}.ffn.b2"), b.ffn.b2.as_slice_mut().unwrap()));
        }
        out.push(("ln_f.gamma".into(), self.ln_f.gamma.as_slice_mut().unwrap()));
        out.push(("ln_f.beta".into(), self.ln_f.beta.as_slice_mut().unwrap()));
        if let Some(head) = self.head.as_mut() {
            out.push(("head".into(), head.as_slice_mut().unwrap()));
        }
        out
    }

    /// Flat read-only views: (name, shape, data), fixed order matching `flat_mut`.
    pub fn flat(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let m2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        let m1 = |a: &Array1<f64>| vec![a.len()];
        out.push(("tok_emb".into(), m2(&self.tok_emb), self.tok_emb.as_slice().unwrap()));
        out.push(("pos_emb".into(), m2(&self.pos_emb), self.pos_emb.as_slice().unwrap()));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln1.gamma"), m1(&b.ln1.gamma), b.ln1.gamma.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ln1.beta"), m1(&b.ln1.beta), b.ln1.beta.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.wq"), m2(&b.attn.wq), b.attn.wq.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.bq"), m1(&b.attn.bq), b.attn.bq.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.wk"), m2(&b.attn.wk), b.attn.wk.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.bk"), m1(&b.attn.bk), b.attn.bk.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.wv"), m2(&b.attn.wv), b.attn.wv.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.bv"), m1(&b.attn.bv), b.attn.bv.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.wo"), m2(&b.attn.wo), b.attn.wo.as_slice().unwrap()));
            out.push((format!("blocks.{l}.attn.bo"), m1(&b.attn.bo), b.attn.bo.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ln2.gamma"), m1(&b.ln2.gamma), b.ln2.gamma.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ln2.beta"), m1(&b.ln2.beta), b.ln2.beta.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ffn.w1"), m2(&b.ffn.w1), b.ffn.w1.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ffn.b1"), m1(&b.ffn.b1), b.ffn.b1.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ffn.w2"), m2(&b.ffn.w2), b.ffn.w2.as_slice().unwrap()));
            out.push((format!("blocks.{l}.ffn.b2"), m1(&b.ffn.b2), b.ffn.b2.as_slice().unwrap()));
        }
        out.push(("ln_f.gamma".into(), m1(&self.ln_f.gamma), self.ln_f.gamma.as_slice().unwrap()));
        out.push(("ln_f.beta".into(), m1(&self.ln_f.beta), self.ln_f.beta.as_slice().unwrap()));
        if let Some(head) = self.head.as_ref() {
            out.push(("head".into(), m2(head), head.as_slice().unwrap()));
        }
        out
    }

    /// Round every value to f32 precision (the checkpoint storage format).
    pub fn snap_to_storage_precision(&mut self) {
        for (_, data) in self.flat_mut() {
            for x in data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The denoiser: configuration, parameter table, and training-step counter.
#[derive(Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Params,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Uniform,
    InverseT,
}

/// One example of a training batch: corrupted input, clean targets, and the
/// per-position loss mask (positions whose prediction is supervised).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_bits: Vec<u8>,
    pub noise_level: f64,
}

struct Batch {
    ids: Vec<u32>,
    /// Row ranges: example e occupies rows offsets[e]..offsets[e+1].
    offsets: Vec<usize>,
}

struct LayerCache {
    xhat1: Array2<f64>,
    inv_std1: Vec<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities, one (T x T) matrix per (example, head).
    attn_p: Vec<Array2<f64>>,
    o: Array2<f64>,
    xhat2: Array2<f64>,
    inv_std2: Vec<f64>,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    inv_std_f: Vec<f64>,
    y: Array2<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
        config.validate()?;
        Ok(Denoiser {
            params: Params::init(&config, seed),
            config,
            step: 0,
        })
    }

    fn head_matrix(&self) -> &Array2<f64> {
        self.params.head.as_ref().unwrap_or(&self.params.tok_emb)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Overlong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Per-position logits over the whole sequence (single example).
    pub fn forward_full(&self, ids: &[u32]) -> Result<Array2<f64>> {
        self.check_len(ids.len())?;
        let batch = Batch {
            ids: ids.to_vec(),
            offsets: vec![0, ids.len()],
        };
        let rows: Vec<usize> = (0..ids.len()).collect();
        Ok(self.forward_batch(&batch, &rows, false).0)
    }

    /// Logits at selected positions only (single example).
    pub fn forward_positions(&self, ids: &[u32], positions: &[usize]) -> Result<Array2<f64>> {
        self.check_len(ids.len())?;
        let batch = Batch {
            ids: ids.to_vec(),
            offsets: vec![0, ids.len()],
        };
        Ok(self.forward_batch(&batch, positions, false).0)
    }

    fn forward_batch(&self, batch: &Batch, logit_rows: &[usize], want_cache: bool) -> (Array2<f64>, Option<Cache>) {
        let d = self.config.d_model;
        let n = batch.ids.len();
        let n_ex = batch.offsets.len() - 1;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Embedding: token + learned absolute position (per example).
        let mut x = Array2::<f64>::zeros((n, d));
        for e in 0..n_ex {
            let (r0, r1) = (batch.offsets[e], batch.offsets[e + 1]);
            for r in r0..r1 {
                let id = batch.ids[r] as usize;
                let pos = r - r0;
                let mut row = x.row_mut(r);
                row.assign(&self.params.tok_emb.row(id));
                row += &self.params.pos_emb.row(pos);
            }
        }

        let mut layer_caches = Vec::with_capacity(self.config.n_layers);
        for block in &self.params.blocks {
            // Pre-norm attention.
            let (xhat1, inv_std1) = layer_norm_forward(&x);
            let a = ln_affine(&xhat1, &block.ln1);
            let q = affine(&a, &block.attn.wq, &block.attn.bq);
            let k = affine(&a, &block.attn.wk, &block.attn.bk);
            let v = affine(&a, &block.attn.wv, &block.attn.bv);
            let mut o = Array2::<f64>::zeros((n, d));
            let mut attn_p = Vec::with_capacity(n_ex * heads);
            for e in 0..n_ex {
                let (r0, r1) = (batch.offsets[e], batch.offsets[e + 1]);
                for h in 0..heads {
                    let (c0, c1) = (h * dh, (h + 1) * dh);
                    let qh = q.slice(s![r0..r1, c0..c1]);
                    let kh = k.slice(s![r0..r1, c0..c1]);
                    let vh = v.slice(s![r0..r1, c0..c1]);
                    let mut sc = qh.dot(&kh.t());
                    sc *= scale;
                    softmax_rows(&mut sc);
                    o.slice_mut(s![r0..r1, c0..c1]).assign(&sc.dot(&vh));
                    attn_p.push(sc);
                }
            }
            let attn_out = affine(&o, &block.attn.wo, &block.attn.bo);
            let mut x2 = x;
            x2 += &attn_out;

            // Pre-norm feed-forward.
            let (xhat2, inv_std2) = layer_norm_forward(&x2);
            let b = ln_affine(&xhat2, &block.ln2);
            let u = affine(&b, &block.ffn.w1, &block.ffn.b1);
            let g = u.mapv(gelu);
            let f = affine(&g, &block.ffn.w2, &block.ffn.b2);
            let mut x3 = x2;
            x3 += &f;
            x = x3;

            layer_caches.push(LayerCache {
                xhat1,
                inv_std1,
                a,
                q,
                k,
                v,
                attn_p,
                o,
                xhat2,
                inv_std2,
                b,
                u,
                g,
            });
        }

        let (xhat_f, inv_std_f) = layer_norm_forward(&x);
        let y = ln_affine(&xhat_f, &self.params.ln_f);

        // Logits only at the requested rows.
        let mut y_sel = Array2::<f64>::zeros((logit_rows.len(), d));
        for (i, &r) in logit_rows.iter().enumerate() {
            y_sel.row_mut(i).assign(&y.row(r));
        }
        let logits = y_sel.dot(&self.head_matrix().t());

        let cache = want_cache.then_some(Cache {
            layers: layer_caches,
            xhat_f,
            inv_std_f,
            y,
        });
        (logits, cache)
    }

    fn backward_batch(
        &self,
        batch: &Batch,
        cache: &Cache,
        logit_rows: &[usize],
        dlogits: &Array2<f64>,
        grads: &mut Params,
    ) {
        let d = self.config.d_model;
        let n = batch.ids.len();
        let n_ex = batch.offsets.len() - 1;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Head: logits = y_sel . E^T.
        let mut y_sel = Array2::<f64>::zeros((logit_rows.len(), d));
        for (i, &r) in logit_rows.iter().enumerate() {
            y_sel.row_mut(i).assign(&cache.y.row(r));
        }
        {
            let dhead = match grads.head.as_mut() {
                Some(h) => h,
                None => &mut grads.tok_emb,
            };
            general_mat_mul(1.0, &dlogits.t(), &y_sel, 1.0, dhead);
        }
        let dy_sel = dlogits.dot(self.head_matrix());
        let mut dy = Array2::<f64>::zeros((n, d));
        for (i, &r) in logit_rows.iter().enumerate() {
            let mut row = dy.row_mut(r);
            row += &dy_sel.row(i);
        }

        // Final layer norm.
        let mut dx = ln_affine_backward(
            &dy,
            &cache.xhat_f,
            &cache.inv_std_f,
            &self.params.ln_f,
            &mut grads.ln_f,
        );

        for (l, block) in self.params.blocks.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let gb = &mut grads.blocks[l];

            // Feed-forward path: x3 = x2 + f(ln2(x2)).
            let df = &dx; // residual passes dx through unchanged
            let mut dg = df.dot(&block.ffn.w2.t());
            general_mat_mul(1.0, &lc.g.t(), df, 1.0, &mut gb.ffn.w2);
            add_colsum(&mut gb.ffn.b2, df);
            dg.zip_mut_with(&lc.u, |dgv, &uv| *dgv *= gelu_grad(uv));
            let du = dg;
            let db = du.dot(&block.ffn.w1.t());
            general_mat_mul(1.0, &lc.b.t(), &du, 1.0, &mut gb.ffn.w1);
            add_colsum(&mut gb.ffn.b1, &du);
            let dx2_ln = ln_affine_backward(&db, &lc.xhat2, &lc.inv_std2, &block.ln2, &mut gb.ln2);
            let mut dx2 = dx;
            dx2 += &dx2_ln;

            // Attention path: x2 = x + attn(ln1(x)).
            let dattn = &dx2;
            let do_ = dattn.dot(&block.attn.wo.t());
            general_mat_mul(1.0, &lc.o.t(), dattn, 1.0, &mut gb.attn.wo);
            add_colsum(&mut gb.attn.bo, dattn);

            let mut dq = Array2::<f64>::zeros((n, d));
            let mut dk = Array2::<f64>::zeros((n, d));
            let mut dv = Array2::<f64>::zeros((n, d));
            for e in 0..n_ex {
                let (r0, r1) = (batch.offsets[e], batch.offsets[e + 1]);
                for h in 0..heads {
                    let (c0, c1) = (h * dh, (h + 1) * dh);
                    let p = &lc.attn_p[e * heads + h];
                    let doh = do_.slice(s![r0..r1, c0..c1]);
                    let qh = lc.q.slice(s![r0..r1, c0..c1]);
                    let kh = lc.k.slice(s![r0..r1, c0..c1]);
                    let vh = lc.v.slice(s![r0..r1, c0..c1]);
                    let dp = doh.dot(&vh.t());
                    dv.slice_mut(s![r0..r1, c0..c1]).assign(&p.t().dot(&doh));
                    // Softmax backward per row: ds = p * (dp - rowsum(dp * p)).
                    let mut ds = dp;
                    for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                        for (dsv, &pv) in ds_row.iter_mut().zip(p_row.iter()) {
                            *dsv = pv * (*dsv - dot);
                        }
                    }
                    ds *= scale;
                    dq.slice_mut(s![r0..r1, c0..c1]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![r0..r1, c0..c1]).assign(&ds.t().dot(&qh));
                }
            }

            let mut da = dq.dot(&block.attn.wq.t());
            da += &dk.dot(&block.attn.wk.t());
            da += &dv.dot(&block.attn.wv.t());
            general_mat_mul(1.0, &lc.a.t(), &dq, 1.0, &mut gb.attn.wq);
            general_mat_mul(1.0, &lc.a.t(), &dk, 1.0, &mut gb.attn.wk);
            general_mat_mul(1.0, &lc.a.t(), &dv, 1.0, &mut gb.attn.wv);
            add_colsum(&mut gb.attn.bq, &dq);
            add_colsum(&mut gb.attn.bk, &dk);
            add_colsum(&mut gb.attn.bv, &dv);

            let dx_ln = ln_affine_backward(&da, &lc.xhat1, &lc.inv_std1, &block.ln1, &mut gb.ln1);
            let mut dx_in = dx2;
            dx_in += &dx_ln;
            dx = dx_in;
        }

        // Embedding scatter.
        for e in 0..n_ex {
            let (r0, r1) = (batch.offsets[e], batch.offsets[e + 1]);
            for r in r0..r1 {
                let id = batch.ids[r] as usize;
                let pos = r - r0;
                let src = dx.row(r);
                let mut t = grads.tok_emb.row_mut(id);
                t += &src;
                let mut p = grads.pos_emb.row_mut(pos);
                p += &src;
            }
        }
    }

    /// Mean (over examples) of the summed cross-entropy at supervised
    /// positions, with gradients accumulated into `grads`.
    ///
    /// Returns the batch loss. Gradients with respect to logits at
    /// unsupervised positions are exactly zero by construction: those logits
    /// are never materialized.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainExample],
        weighting: LossWeighting,
        grads: &mut Params,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut offsets = vec![0usize];
        let mut logit_rows = Vec::new();
        let mut row_meta: Vec<(u32, f64)> = Vec::new(); // (target, example weight)
        let inv_b = 1.0 / batch.len() as f64;
        for ex in batch {
            self.check_len(ex.ids.len())?;
            if ex.ids.len() != ex.targets.len() || ex.ids.len() != ex.loss_bits.len() {
                return Err(Error::Config("ragged example arrays".into()));
            }
            if !ex.loss_bits.contains(&1) {
                return Err(Error::Config(
                    "example with no supervised positions (all-unmasked)".into(),
                ));
            }
            let base = *offsets.last().unwrap();
            let w = match weighting {
                LossWeighting::Uniform => inv_b,
                LossWeighting::InverseT => inv_b / ex.noise_level.max(f64::MIN_POSITIVE),
            };
            for (k, &bit) in ex.loss_bits.iter().enumerate() {
                if bit == 1 {
                    logit_rows.push(base + k);
                    row_meta.push((ex.targets[k], w));
                }
            }
            ids.extend_from_slice(&ex.ids);
            offsets.push(base + ex.ids.len());
        }
        let b = Batch { ids, offsets };
        let (logits, cache) = self.forward_batch(&b, &logit_rows, true);
        let cache = cache.expect("cache requested");

        // Cross-entropy and its gradient, row by row.
        let mut loss = 0.0;
        let mut dlogits = logits; // reuse storage: overwritten with gradients
        for (i, (target, w)) in row_meta.iter().enumerate() {
            let mut row = dlogits.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter() {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            loss += w * (lse - row[*target as usize]);
            // p - onehot, scaled by the example weight.
            for v in row.iter_mut() {
                *v = (*v - lse).exp() * w;
            }
            row[*target as usize] -= w;
        }

        self.backward_batch(&b, &cache, &logit_rows, &dlogits, grads);
        Ok(loss)
    }

    /// Loss only (no gradients); same definition as `loss_and_grads`.
    pub fn loss(&self, batch: &[TrainExample], weighting: LossWeighting) -> Result<f64> {
        let mut loss = 0.0;
        let inv_b = 1.0 / batch.len() as f64;
        for ex in batch {
            self.check_len(ex.ids.len())?;
            if !ex.loss_bits.contains(&1) {
                return Err(Error::Config(
                    "example with no supervised positions (all-unmasked)".into(),
                ));
            }
            let positions: Vec<usize> = ex
                .loss_bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1)
                .map(|(k, _)| k)
                .collect();
            let logits = self.forward_positions(&ex.ids, &positions)?;
            let w = match weighting {
                LossWeighting::Uniform => inv_b,
                LossWeighting::InverseT => inv_b / ex.noise_level.max(f64::MIN_POSITIVE),
            };
            for (i, &k) in positions.iter().enumerate() {
                let row = logits.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += w * (lse - row[ex.targets[k] as usize]);
            }
        }
        Ok(loss)
    }

    // -----------------------------------------------------------------------
    // Checkpointing
    // -----------------------------------------------------------------------

    /// Save the model. Parameters are first rounded to the 32-bit storage
    /// precision so the saved model and its reload produce bit-identical
    /// forward outputs.
    pub fn save(&mut self, path: &Path, vocab_sha256: &str) -> Result<()> {
        self.params.snap_to_storage_precision();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            vocab_sha256: vocab_sha256.to_string(),
        })?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let tensors = self.params.flat();
        out.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in tensors {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for dim in &shape {
                out.write_all(&(*dim as u32).to_le_bytes())?;
            }
            for &x in data {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Load a checkpoint. When `expected_vocab_sha256` is given, a mismatch is
    /// refused: spans and logits are meaningless under a different vocabulary.
    pub fn load(path: &Path, expected_vocab_sha256: Option<&str>) -> Result<Denoiser> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut file)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = read_u32(&mut file)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| Error::Checkpoint("file truncated in header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        header.config.validate()?;
        if let Some(expected) = expected_vocab_sha256 {
            if header.vocab_sha256 != expected {
                return Err(Error::Checkpoint(format!(
                    "vocabulary hash mismatch: checkpoint was trained with {}, current vocabulary is {}",
                    header.vocab_sha256, expected
                )));
            }
        }
        let mut model = Denoiser::new(header.config, 0)?;
        model.step = header.step;
        let n_tensors = read_u32(&mut file)? as usize;
        let mut loaded = std::collections::HashMap::new();
        for _ in 0..n_tensors {
            let name_len = read_u32(&mut file)? as usize;
            let mut name = vec![0u8; name_len];
            file.read_exact(&mut name)
                .map_err(|_| Error::Checkpoint("file truncated in tensor name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
            let ndim = read_u32(&mut file)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut file)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = vec![0f64; count];
            let mut buf = [0u8; 4];
            for x in data.iter_mut() {
                file.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("file truncated in tensor {name}")))?;
                *x = f32::from_le_bytes(buf) as f64;
            }
            loaded.insert(name, (shape, data));
        }
        for (name, dst) in model.params.flat_mut() {
            let (shape, data) = loaded
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let expected: usize = shape.iter().product();
            if expected != dst.len() || data.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: file has {shape:?}, model expects {} values",
                    dst.len()
                )));
            }
            dst.copy_from_slice(&data);
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    /// The vocabulary hash recorded in a checkpoint, without loading tensors.
    pub fn peek_vocab_hash(path: &Path) -> Result<String> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let _version = read_u32(&mut file)?;
        let header_len = read_u32(&mut file)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| Error::Checkpoint("file truncated in header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        Ok(header.vocab_sha256)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    step: u64,
    vocab_sha256: String,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("file truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn add_colsum(acc: &mut Array1<f64>, m: &Array2<f64>) {
    for row in m.rows() {
        *acc += &row;
    }
}

/// Row-wise normalization: returns xhat and 1/std per row.
fn layer_norm_forward(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

fn ln_affine(xhat: &Array2<f64>, p: &LayerNormParams) -> Array2<f64> {
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (v, (&g, &b)) in row.iter_mut().zip(p.gamma.iter().zip(p.beta.iter())) {
            *v = *v * g + b;
        }
    }
    y
}

/// Backward through affine layer norm; accumulates dgamma/dbeta and returns dx.
fn ln_affine_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &[f64],
    p: &LayerNormParams,
    grads: &mut LayerNormParams,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::<f64>::zeros(dy.raw_dim());
    for (r, ((dy_row, xhat_row), &is)) in dy.rows().into_iter().zip(xhat.rows()).zip(inv_std).enumerate() {
        // Parameter gradients.
        for ((dg, db), (&dyv, &xh)) in grads
            .gamma
            .iter_mut()
            .zip(grads.beta.iter_mut())
            .zip(dy_row.iter().zip(xhat_row.iter()))
        {
            *dg += dyv * xh;
            *db += dyv;
        }
        // dxhat = dy * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)).
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ((&dyv, &g), &xh) in dy_row.iter().zip(p.gamma.iter()).zip(xhat_row.iter()) {
            let dxh = dyv * g;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let mean_dxhat = sum_dxhat / d;
        let mean_dxhat_xhat = sum_dxhat_xhat / d;
        let mut dx_row = dx.row_mut(r);
        for ((dxv, (&dyv, &g)), &xh) in dx_row
            .iter_mut()
            .zip(dy_row.iter().zip(p.gamma.iter()))
            .zip(xhat_row.iter())
        {
            *dxv = is * (dyv * g - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let z = GELU_C * (x + GELU_A * x * x * x);
    let t = z.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn tiny_config(vocab: usize, tie: bool) -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            max_len: 12,
            vocab_size: vocab,
            tie_embeddings: tie,
        }
    }

    fn example(ids: Vec<u32>, targets: Vec<u32>, loss_bits: Vec<u8>) -> TrainExample {
        TrainExample {
            ids,
            targets,
            loss_bits,
            noise_level: 0.5,
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax_and_analytic_loss() {
        let vocab = 23usize;
        let model = Denoiser::new(tiny_config(vocab, false), 0).unwrap();
        let logits = model.forward_full(&[1, 2, 3, 4]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // One masked position against a uniform head: loss is ln(vocab).
        let ex = example(vec![1, 2, 3], vec![1, 5, 3], vec![0, 1, 0]);
        let loss = model.loss(&[ex], LossWeighting::Uniform).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn softmax_rows_normalize() {
        let config = tiny_config(17, true);
        let model = Denoiser::new(config, 3).unwrap();
        let logits = model.forward_full(&[4, 9, 2, 11, 7]).unwrap();
        for row in logits.rows() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            let total: f64 = row.iter().map(|v| (v - lse).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_finite_on_random_inputs() {
        let model = Denoiser::new(tiny_config(31, true), 5).unwrap();
        let mut rng = seeded_rng(0, "fwd");
        for _ in 0..1000 {
            let len = rng.gen_range(1..=12);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..31)).collect();
            let logits = model.forward_full(&ids).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn attention_is_bidirectional() {
        // Flipping a token after position k must change the logits at k.
        let model = Denoiser::new(tiny_config(29, true), 7).unwrap();
        let a = model.forward_full(&[3, 4, 5, 6, 7]).unwrap();
        let b = model.forward_full(&[3, 4, 5, 6, 8]).unwrap();
        let delta: f64 = a
            .row(1)
            .iter()
            .zip(b.row(1).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(delta > 1e-9, "future token had no effect: {delta}");
    }

    #[test]
    fn no_positions_means_symmetric_contexts() {
        // With positional embeddings zeroed, swapping the context around two
        // mask positions permutes their logits.
        let mut model = Denoiser::new(tiny_config(13, true), 9).unwrap();
        model.params.pos_emb.fill(0.0);
        let mask = 1u32;
        let a = model.forward_full(&[mask, 7]).unwrap();
        let b = model.forward_full(&[7, mask]).unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(1).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.row(1).iter().zip(b.row(0).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn overlong_input_is_an_error() {
        let model = Denoiser::new(tiny_config(13, true), 0).unwrap();
        let err = model.forward_full(&vec![1u32; 13]).unwrap_err();
        assert!(matches!(err, Error::Overlong { .. }));
    }

    #[test]
    fn all_unmasked_example_is_an_error() {
        let model = Denoiser::new(tiny_config(13, true), 0).unwrap();
        let ex = example(vec![1, 2], vec![1, 2], vec![0, 0]);
        let mut grads = model.params.zeros_like();
        assert!(model
            .loss_and_grads(&[ex], LossWeighting::Uniform, &mut grads)
            .is_err());
    }

    /// Central finite differences over every parameter of a small model.
    /// This is the spot-check twin of the full fidelity suite.
    #[test]
    fn gradients_match_finite_differences() {
        let mut model = Denoiser::new(tiny_config(11, true), 21).unwrap();
        let batch = vec![
            example(vec![1, 4, 5, 6], vec![2, 4, 7, 6], vec![1, 0, 1, 0]),
            example(vec![3, 1, 9], vec![3, 8, 9], vec![0, 1, 0]),
        ];
        let mut grads = model.params.zeros_like();
        let loss0 = model
            .loss_and_grads(&batch, LossWeighting::Uniform, &mut grads)
            .unwrap();
        let loss_again = model.loss(&batch, LossWeighting::Uniform).unwrap();
        assert!((loss0 - loss_again).abs() < 1e-12);

        let h = 1e-5;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .flat()
            .into_iter()
            .map(|(n, _, d)| (n, d.to_vec()))
            .collect();
        let mut max_rel: f64 = 0.0;
        for (tensor_idx, (name, g)) in analytic.iter().enumerate() {
            // Probe a handful of indices per tensor to keep the test fast.
            let probes: Vec<usize> = (0..g.len()).step_by((g.len() / 7).max(1)).collect();
            for &i in &probes {
                let orig = {
                    let mut views = model.params.flat_mut();
                    let v = &mut views[tensor_idx].1;
                    let orig = v[i];
                    v[i] = orig + h;
                    orig
                };
                let up = model.loss(&batch, LossWeighting::Uniform).unwrap();
                {
                    let mut views = model.params.flat_mut();
                    views[tensor_idx].1[i] = orig - h;
                }
                let down = model.loss(&batch, LossWeighting::Uniform).unwrap();
                {
                    let mut views = model.params.flat_mut();
                    views[tensor_idx].1[i] = orig;
                }
                let fd = (up - down) / (2.0 * h);
                let rel = (g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-2);
                if rel > max_rel {
                    max_rel = rel;
                }
                assert!(rel < 1e-6, "{name}[{i}]: analytic {} vs fd {fd}", g[i]);
            }
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn inverse_t_weighting_scales_loss() {
        let model = Denoiser::new(tiny_config(11, true), 2).unwrap();
        let mut ex = example(vec![1, 4, 5], vec![2, 4, 7], vec![1, 0, 1]);
        ex.noise_level = 0.25;
        let uniform = model.loss(&[ex.clone()], LossWeighting::Uniform).unwrap();
        let weighted = model.loss(&[ex], LossWeighting::InverseT).unwrap();
        assert!((weighted - uniform / 0.25).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dfer");
        let mut model = Denoiser::new(tiny_config(19, true), 4).unwrap();
        model.step = 123;
        model.save(&path, "vhash").unwrap();
        let loaded = Denoiser::load(&path, Some("vhash")).unwrap();
        assert_eq!(loaded.step, 123);
        let ids = vec![3u32, 8, 1, 14];
        let a = model.forward_full(&ids).unwrap();
        let b = loaded.forward_full(&ids).unwrap();
        assert_eq!(
            a.as_slice().unwrap(),
            b.as_slice().unwrap(),
            "forward outputs must match bit-exactly"
        );
    }

    #[test]
    fn checkpoint_rejects_corruption_and_wrong_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dfer");
        let mut model = Denoiser::new(tiny_config(19, false), 4).unwrap();
        model.save(&path, "vhash").unwrap();

        // Wrong vocabulary hash is refused with a message naming both hashes.
        let err = Denoiser::load(&path, Some("other")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("vocabulary hash mismatch"), "{msg}");

        // Truncated file.
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.dfer");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Denoiser::load(&cut, None).is_err());

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = dir.path().join("bad.dfer");
        std::fs::write(&badp, &bad).unwrap();
        let err = Denoiser::load(&badp, None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}

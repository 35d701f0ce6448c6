//! Reference implementations written as plain loops over `Vec<f64>`, with no
//! shared code with `qcn-core`. Tests compare the library against these.

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|_| uniform(rng, cols, -1.0, 1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q, r) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; r]; p];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn squash(t: &[f64]) -> Vec<f64> {
    let n2 = dot(t, t);
    let n = n2.sqrt();
    t.iter()
        .map(|x| n2 / (1.0 + n2) * x / (n + 1e-12))
        .collect()
}

/// Pearson correlation; 0 when either side has (near) zero variance.
pub fn pcc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let na = dot(&ca, &ca).sqrt();
    let nb = dot(&cb, &cb).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(&ca, &cb) / (na * nb)
}

/// One routing iteration as recorded by the oracle (matrices are `n × m`).
#[derive(Debug, Clone, Default)]
pub struct OracleIteration {
    pub alpha: Matrix,
    pub coupling: Matrix,
    pub pccs: Matrix,
    pub guidance: Matrix,
    pub queries: Matrix,
    pub outputs: Matrix,
}

/// `û[j][i] = u[i] · W[j]` with `w[j][k][o]`.
pub fn predictions(u: &Matrix, w: &[Matrix]) -> Vec<Matrix> {
    w.iter().map(|wj| matmul(u, wj)).collect()
}

/// Classic routing-by-agreement, unrolled literally.
pub fn route_original(u: &Matrix, w: &[Matrix], r: usize) -> Vec<OracleIteration> {
    let (n, m) = (u.len(), w.len());
    let uhat = predictions(u, w);
    let d = uhat[0][0].len();
    let mut alpha = vec![vec![0.0; m]; n];
    let mut out = Vec::new();
    for _ in 0..r {
        let c: Matrix = alpha.iter().map(|row| softmax(row)).collect();
        let mut v = Vec::new();
        for j in 0..m {
            let mut s = vec![0.0; d];
            for i in 0..n {
                for o in 0..d {
                    s[o] += c[i][j] * uhat[j][i][o];
                }
            }
            v.push(squash(&s));
        }
        out.push(OracleIteration {
            alpha: alpha.clone(),
            coupling: c,
            pccs: vec![vec![0.0; m]; n],
            guidance: vec![vec![0.0; m]; n],
            queries: Vec::new(),
            outputs: v.clone(),
        });
        for i in 0..n {
            for j in 0..m {
                alpha[i][j] += dot(&uhat[j][i], &v[j]);
            }
        }
    }
    out
}

/// Query-guided routing, unrolled line by line: couplings from α, sums
/// weighted by `c + p`, α grows by `p · (û·v)`, queries average with the
/// outputs and `p = tanh(pcc(u_i, q_j))` is recomputed.
pub fn route_query_guided(
    u: &Matrix,
    q: &[f64],
    w: &[Matrix],
    r: usize,
    zero_guidance: bool,
) -> Vec<OracleIteration> {
    let (n, m) = (u.len(), w.len());
    let uhat = predictions(u, w);
    let d = uhat[0][0].len();
    let mut queries: Matrix = vec![q.to_vec(); m];
    let guide = |queries: &Matrix| -> (Matrix, Matrix) {
        let mut raw = vec![vec![0.0; m]; n];
        let mut p = vec![vec![0.0; m]; n];
        if !zero_guidance {
            for i in 0..n {
                for j in 0..m {
                    raw[i][j] = pcc(&u[i], &queries[j]);
                    p[i][j] = raw[i][j].tanh();
                }
            }
        }
        (raw, p)
    };
    let (mut raw, mut p) = guide(&queries);
    let mut alpha = vec![vec![0.0; m]; n];
    let mut out = Vec::new();
    for _ in 0..r {
        let c: Matrix = alpha.iter().map(|row| softmax(row)).collect();
        let mut v = Vec::new();
        for j in 0..m {
            let mut s = vec![0.0; d];
            for i in 0..n {
                for o in 0..d {
                    s[o] += (c[i][j] + p[i][j]) * uhat[j][i][o];
                }
            }
            v.push(squash(&s));
        }
        out.push(OracleIteration {
            alpha: alpha.clone(),
            coupling: c,
            pccs: raw.clone(),
            guidance: p.clone(),
            queries: queries.clone(),
            outputs: v.clone(),
        });
        for i in 0..n {
            for j in 0..m {
                alpha[i][j] += p[i][j] * dot(&uhat[j][i], &v[j]);
            }
        }
        for j in 0..m {
            for o in 0..d {
                queries[j][o] = (queries[j][o] + v[j][o]) / 2.0;
            }
        }
        (raw, p) = guide(&queries);
    }
    out
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "column count");
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) * inv * gain[i] + bias[i])
        .collect()
}

/// Row-vector affine map `x W + b`.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    matmul(x, w)
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(a, c)| a + c).collect())
        .collect()
}

/// Weights of one attention block, each `W` as `[in][out]`.
pub struct AttentionWeights<'a> {
    pub wq: &'a Matrix,
    pub bq: &'a [f64],
    pub wk: &'a Matrix,
    pub bk: &'a [f64],
    pub wv: &'a Matrix,
    pub bv: &'a [f64],
    pub wo: &'a Matrix,
    pub bo: &'a [f64],
}

/// Multi-head scaled dot-product attention for one sequence.
/// `key_mask[t] == false` hides key `t`.
pub fn multi_head_attention(
    q: &Matrix,
    kv: &Matrix,
    w: &AttentionWeights,
    heads: usize,
    key_mask: &[bool],
    causal: bool,
) -> Matrix {
    let qp = affine(q, w.wq, w.bq);
    let kp = affine(kv, w.wk, w.bk);
    let vp = affine(kv, w.wv, w.bv);
    let d = qp[0].len();
    let dk = d / heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut logits = Vec::with_capacity(kv.len());
            for t in 0..kv.len() {
                let mut s = 0.0;
                for c in 0..dk {
                    s += qp[i][h * dk + c] * kp[t][h * dk + c];
                }
                let mut z = s / (dk as f64).sqrt();
                if !key_mask[t] || (causal && t > i) {
                    z += -1e9;
                }
                logits.push(z);
            }
            let a = softmax(&logits);
            for c in 0..dk {
                let mut s = 0.0;
                for t in 0..kv.len() {
                    s += a[t] * vp[t][h * dk + c];
                }
                concat[i][h * dk + c] = s;
            }
        }
    }
    affine(&concat, w.wo, w.bo)
}

pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    (0..len)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    if i % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Corpus BLEU straight from the definition, for cross-checking.
pub fn bleu(hyps: &[Vec<&str>], refs: &[Vec<&str>], max_n: usize) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let grams = |s: &Vec<&str>| -> Vec<Vec<String>> {
                if s.len() < n {
                    return Vec::new();
                }
                (0..=s.len() - n)
                    .map(|i| s[i..i + n].iter().map(|x| x.to_string()).collect())
                    .collect()
            };
            let hg = grams(h);
            let mut rg = grams(r);
            tot += hg.len();
            for g in hg {
                if let Some(pos) = rg.iter().position(|x| *x == g) {
                    rg.swap_remove(pos);
                    hit += 1;
                }
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / tot as f64).ln();
    }
    let c: usize = hyps.iter().map(|h| h.len()).sum();
    let r: usize = refs.iter().map(|h| h.len()).sum();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_p / max_n as f64).exp()
}

/// Looks up a parameter as `(shape, values)`.
pub type ParamLookup<'a> = &'a dyn Fn(&str) -> (Vec<usize>, Vec<f64>);

fn as_matrix(p: ParamLookup, name: &str) -> Matrix {
    let (shape, data) = p(name);
    assert_eq!(shape.len(), 2, "{name} is not a matrix");
    data.chunks(shape[1]).map(<[f64]>::to_vec).collect()
}

fn as_vector(p: ParamLookup, name: &str) -> Vec<f64> {
    p(name).1
}

/// Post-norm Transformer encoder over one sentence, straight from the
/// textbook definition: `x = E[t]·√d + PE`, then per layer
/// `x = LN(x + MHA(x, x, x))`, `x = LN(x + W2·relu(W1·x + b1) + b2)`.
pub fn vanilla_encoder(
    tokens: &[usize],
    key_mask: &[bool],
    layers: usize,
    heads: usize,
    eps: f64,
    p: ParamLookup,
) -> Matrix {
    let emb = as_matrix(p, "src.emb");
    let d = emb[0].len();
    let pe = positional_encoding(tokens.len(), d);
    let mut x: Matrix = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|c| emb[id][c] * (d as f64).sqrt() + pe[t][c])
                .collect()
        })
        .collect();
    let add_norm = |x: &Matrix, y: &Matrix, ln: &str| -> Matrix {
        let g = as_vector(p, &format!("{ln}.g"));
        let b = as_vector(p, &format!("{ln}.b"));
        x.iter()
            .zip(y)
            .map(|(a, c)| {
                let s: Vec<f64> = a.iter().zip(c).map(|(u, v)| u + v).collect();
                layer_norm(&s, &g, &b, eps)
            })
            .collect()
    };
    for l in 0..layers {
        let pre = format!("enc.{l}");
        let m = |s: &str| as_matrix(p, &format!("{pre}.self.{s}"));
        let v = |s: &str| as_vector(p, &format!("{pre}.self.{s}"));
        let (wq, wk, wv, wo) = (m("wq"), m("wk"), m("wv"), m("wo"));
        let (bq, bk, bv, bo) = (v("bq"), v("bk"), v("bv"), v("bo"));
        let w = AttentionWeights {
            wq: &wq,
            bq: &bq,
            wk: &wk,
            bk: &bk,
            wv: &wv,
            bv: &bv,
            wo: &wo,
            bo: &bo,
        };
        let y = multi_head_attention(&x, &x, &w, heads, key_mask, false);
        x = add_norm(&x, &y, &format!("{pre}.self_ln"));
        let w1 = as_matrix(p, &format!("{pre}.ffn.w1"));
        let b1 = as_vector(p, &format!("{pre}.ffn.b1"));
        let w2 = as_matrix(p, &format!("{pre}.ffn.w2"));
        let b2 = as_vector(p, &format!("{pre}.ffn.b2"));
        let h: Matrix = affine(&x, &w1, &b1)
            .into_iter()
            .map(|r| r.into_iter().map(|z| z.max(0.0)).collect())
            .collect();
        let y = affine(&h, &w2, &b2);
        x = add_norm(&x, &y, &format!("{pre}.ffn_ln"));
    }
    x
}

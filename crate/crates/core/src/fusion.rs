//! Feature fusion: element-wise sum, channel concatenation, decision
//! averaging and symmetric cross-modal attention.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Predictor, PredictorCache, FEATURE_DIM};
use crate::data::LogitSequence;
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::layers::{Conv1d, Conv1dCache};
use crate::nn::{join_name, log_softmax_backward, log_softmax_cols, matmul, Mat, Module, Scalar, Tensor};

fn same_shape<T>(a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(format!("{}x{}", a.rows, a.cols), format!("{}x{}", b.rows, b.cols)));
    }
    Ok(())
}

pub fn fuse_add<T: Scalar>(m_r: &Mat<T>, m_i: &Mat<T>) -> Result<Mat<T>> {
    same_shape(m_r, m_i)?;
    let mut out = m_r.clone();
    out.add_assign(m_i);
    Ok(out)
}

/// Radar channels first.
pub fn fuse_concat<T: Scalar>(m_r: &Mat<T>, m_i: &Mat<T>) -> Result<Mat<T>> {
    if m_r.cols != m_i.cols {
        return Err(Error::shape(format!("{} frames", m_r.cols), format!("{} frames", m_i.cols)));
    }
    let mut data = Vec::with_capacity(m_r.data.len() + m_i.data.len());
    data.extend_from_slice(&m_r.data);
    data.extend_from_slice(&m_i.data);
    Ok(Mat::from_vec(m_r.rows + m_i.rows, m_r.cols, data))
}

/// Per-frame mean of two probability sequences.
pub fn fuse_decision(p_r: &LogitSequence, p_i: &LogitSequence) -> Result<LogitSequence> {
    if !p_r.is_probability() || !p_i.is_probability() {
        return Err(Error::validation("probabilities", "decision fusion needs probability inputs"));
    }
    if p_r.n_frames() != p_i.n_frames() {
        return Err(Error::shape(format!("{} frames", p_r.n_frames()), format!("{} frames", p_i.n_frames())));
    }
    let values = p_r.values().iter().zip(p_i.values()).map(|(a, b)| 0.5 * (a + b)).collect();
    LogitSequence::new(p_r.n_frames(), values, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmaConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            n_heads: 8,
            head_dim: 8,
            model_dim: FEATURE_DIM,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.n_heads * self.head_dim != self.model_dim {
            return Err(Error::config(
                "cma",
                format!(
                    "n_heads ({}) * head_dim ({}) must equal model_dim ({})",
                    self.n_heads, self.head_dim, self.model_dim
                ),
            ));
        }
        Ok(())
    }
}

/// One attention direction: queries from one modality, keys and values
/// from the other, heads concatenated and projected back to `model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    pub n_heads: usize,
    pub head_dim: usize,
    pub q: Conv1d<T>,
    pub k: Conv1d<T>,
    pub v: Conv1d<T>,
    pub o: Conv1d<T>,
}

pub struct CrossAttentionCache<T> {
    q_in: Conv1dCache<T>,
    k_in: Conv1dCache<T>,
    v_in: Conv1dCache<T>,
    o_in: Conv1dCache<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Row-stochastic attention per head, `[query][key]`.
    attn: Vec<Vec<T>>,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new(cfg: &CmaConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        CrossAttention {
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            q: Conv1d::pointwise(d, d, rng),
            k: Conv1d::pointwise(d, d, rng),
            v: Conv1d::pointwise(d, d, rng),
            o: Conv1d::pointwise(d, d, rng),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.q.in_ch
    }

    pub fn forward(&self, query_src: &Mat<T>, kv_src: &Mat<T>) -> (Mat<T>, CrossAttentionCache<T>) {
        let n = query_src.cols;
        let dh = self.head_dim;
        let (q, q_in) = self.q.forward(query_src);
        let (k, k_in) = self.k.forward(kv_src);
        let (v, v_in) = self.v.forward(kv_src);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Mat::zeros(self.n_heads * dh, n);
        let mut attn = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let rows = h * dh * n..(h + 1) * dh * n;
            let (qh, kh, vh) = (&q.data[rows.clone()], &k.data[rows.clone()], &v.data[rows.clone()]);
            // scores[i][j] = q_i . k_j / sqrt(dh)
            let mut a = vec![T::zero(); n * n];
            matmul(true, false, n, dh, n, scale, qh, kh, T::zero(), &mut a);
            for row in a.chunks_mut(n) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                let inv = T::one() / s;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            // out_h[:, i] = sum_j a[i][j] v_h[:, j]
            matmul(false, true, dh, n, n, T::one(), vh, &a, T::zero(), &mut heads.data[rows]);
            attn.push(a);
        }
        let (out, o_in) = self.o.forward(&heads);
        (
            out,
            CrossAttentionCache {
                q_in,
                k_in,
                v_in,
                o_in,
                q,
                k,
                v,
                attn,
            },
        )
    }

    /// Returns gradients w.r.t. the query source and the key/value source.
    pub fn backward(
        &self,
        cache: &CrossAttentionCache<T>,
        dy: &Mat<T>,
        grad: Option<&mut CrossAttention<T>>,
    ) -> (Mat<T>, Mat<T>) {
        let n = dy.cols;
        let dh = self.head_dim;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut grad = grad;
        let dheads = self
            .o
            .backward(&cache.o_in, dy, grad.as_deref_mut().map(|g| &mut g.o), true)
            .expect("dx requested");
        let mut dq = Mat::zeros(cache.q.rows, n);
        let mut dk = Mat::zeros(cache.k.rows, n);
        let mut dv = Mat::zeros(cache.v.rows, n);
        let mut da = vec![T::zero(); n * n];
        for h in 0..self.n_heads {
            let rows = h * dh * n..(h + 1) * dh * n;
            let a = &cache.attn[h];
            let dout = &dheads.data[rows.clone()];
            // dV_h = dOut_h . A
            matmul(false, false, dh, n, n, T::one(), dout, a, T::zero(), &mut dv.data[rows.clone()]);
            // dA = dOut_h^T . V_h
            matmul(true, false, n, dh, n, T::one(), dout, &cache.v.data[rows.clone()], T::zero(), &mut da);
            // softmax backward, row-wise
            for (arow, drow) in a.chunks(n).zip(da.chunks_mut(n)) {
                let dot = arow.iter().zip(drow.iter()).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for (d, &x) in drow.iter_mut().zip(arow) {
                    *d = x * (*d - dot);
                }
            }
            // dQ_h = s K_h dS^T ; dK_h = s Q_h dS
            matmul(false, true, dh, n, n, scale, &cache.k.data[rows.clone()], &da, T::zero(), &mut dq.data[rows.clone()]);
            matmul(false, false, dh, n, n, scale, &cache.q.data[rows.clone()], &da, T::zero(), &mut dk.data[rows]);
        }
        let (gq, gk, gv) = match grad {
            Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v)),
            None => (None, None, None),
        };
        let d_query = self.q.backward(&cache.q_in, &dq, gq, true).expect("dx requested");
        let mut d_kv = self.k.backward(&cache.k_in, &dk, gk, true).expect("dx requested");
        d_kv.add_assign(&self.v.backward(&cache.v_in, &dv, gv, true).expect("dx requested"));
        (d_query, d_kv)
    }

    pub fn attention(cache: &CrossAttentionCache<T>) -> &[Vec<T>] {
        &cache.attn
    }
}

impl<T: Scalar> Module<T> for CrossAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.q.visit(&join_name(prefix, "q"), f);
        self.k.visit(&join_name(prefix, "k"), f);
        self.v.visit(&join_name(prefix, "v"), f);
        self.o.visit(&join_name(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.q.visit_mut(&join_name(prefix, "q"), f);
        self.k.visit_mut(&join_name(prefix, "k"), f);
        self.v.visit_mut(&join_name(prefix, "v"), f);
        self.o.visit_mut(&join_name(prefix, "o"), f);
    }
}

/// Symmetric cross-modal attention. Output rows `0..d` attend from radar
/// queries to IMU keys/values, rows `d..2d` the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Cma<T> {
    pub i2r: CrossAttention<T>,
    pub r2i: CrossAttention<T>,
}

pub struct CmaCache<T> {
    pub i2r: CrossAttentionCache<T>,
    pub r2i: CrossAttentionCache<T>,
}

impl<T: Scalar> Cma<T> {
    pub fn new(cfg: &CmaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Cma {
            i2r: CrossAttention::new(cfg, rng),
            r2i: CrossAttention::new(cfg, rng),
        })
    }

    pub fn forward(&self, m_r: &Mat<T>, m_i: &Mat<T>) -> Result<(Mat<T>, CmaCache<T>)> {
        same_shape(m_r, m_i)?;
        let d = self.i2r.model_dim();
        if m_r.rows != d {
            return Err(Error::shape(format!("{d} feature channels"), m_r.rows.to_string()));
        }
        let (a, ca) = self.i2r.forward(m_r, m_i);
        let (b, cb) = self.r2i.forward(m_i, m_r);
        Ok((fuse_concat(&a, &b)?, CmaCache { i2r: ca, r2i: cb }))
    }

    /// Gradients w.r.t. `(m_r, m_i)`.
    pub fn backward(&self, cache: &CmaCache<T>, dy: &Mat<T>, grad: Option<&mut Cma<T>>) -> (Mat<T>, Mat<T>) {
        let d = self.i2r.model_dim();
        let top = dy.slice_rows(0, d);
        let bottom = dy.slice_rows(d, d);
        let (gi2r, gr2i) = match grad {
            Some(g) => (Some(&mut g.i2r), Some(&mut g.r2i)),
            None => (None, None),
        };
        let (mut dr, mut di) = self.i2r.backward(&cache.i2r, &top, gi2r);
        let (di2, dr2) = self.r2i.backward(&cache.r2i, &bottom, gr2i);
        dr.add_assign(&dr2);
        di.add_assign(&di2);
        (dr, di)
    }
}

impl<T: Scalar> Module<T> for Cma<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.i2r.visit(&join_name(prefix, "i2r"), f);
        self.r2i.visit(&join_name(prefix, "r2i"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.i2r.visit_mut(&join_name(prefix, "i2r"), f);
        self.r2i.visit_mut(&join_name(prefix, "r2i"), f);
    }
}

/// Cross-modal attention over radar features `m_a` and IMU features `m_b`.
pub fn cma_forward<T: Scalar>(m_a: &Mat<T>, m_b: &Mat<T>, params: &Cma<T>, cfg: &CmaConfig) -> Result<Mat<T>> {
    cfg.validate()?;
    if params.i2r.n_heads != cfg.n_heads || params.i2r.head_dim != cfg.head_dim {
        return Err(Error::config("cma", "parameters were built for a different head layout"));
    }
    Ok(params.forward(m_a, m_b)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMethod {
    Add,
    Concat,
    Decision,
    Cma,
}

impl FusionMethod {
    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Add => "add",
            FusionMethod::Concat => "concat",
            FusionMethod::Decision => "decision",
            FusionMethod::Cma => "cma",
        }
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "add" => Ok(FusionMethod::Add),
            "concat" => Ok(FusionMethod::Concat),
            "decision" => Ok(FusionMethod::Decision),
            "cma" => Ok(FusionMethod::Cma),
            other => Err(Error::config("fusion", format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub cma: CmaConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Cma,
            cma: CmaConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("fusion", self.method);
        doc.set("cma.n_heads", self.cma.n_heads);
        doc.set("cma.head_dim", self.cma.head_dim);
        doc.set("cma.model_dim", self.cma.model_dim);
    }

    pub fn read_kv(doc: &KvDoc) -> Result<Self> {
        let d = FusionConfig::default();
        let cfg = FusionConfig {
            method: doc.parse_value("fusion")?.unwrap_or(d.method),
            cma: CmaConfig {
                n_heads: doc.parse_value("cma.n_heads")?.unwrap_or(d.cma.n_heads),
                head_dim: doc.parse_value("cma.head_dim")?.unwrap_or(d.cma.head_dim),
                model_dim: doc.parse_value("cma.model_dim")?.unwrap_or(d.cma.model_dim),
            },
        };
        cfg.cma.validate()?;
        Ok(cfg)
    }
}

/// Trainable fusion plus the multimodal predictor. Produces per-frame
/// log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionHead<T> {
    Add(Predictor<T>),
    Concat(Predictor<T>),
    Decision { radar: Predictor<T>, imu: Predictor<T> },
    Cma { cma: Cma<T>, predictor: Predictor<T> },
}

pub enum FusionCache<T> {
    Single { fused: Option<CmaCache<T>>, pred: PredictorCache<T>, logp: Mat<f64> },
    Decision { r: PredictorCache<T>, i: PredictorCache<T>, logp_r: Mat<f64>, logp_i: Mat<f64>, logp: Mat<f64> },
}

fn to_f64_mat<T: Scalar>(m: &Mat<T>) -> Mat<f64> {
    Mat::from_vec(m.rows, m.cols, m.to_f64())
}

impl<T: Scalar> FusionHead<T> {
    pub fn new(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.cma.model_dim;
        Ok(match cfg.method {
            FusionMethod::Add => FusionHead::Add(Predictor::new(d, rng)),
            FusionMethod::Concat => FusionHead::Concat(Predictor::new(2 * d, rng)),
            FusionMethod::Decision => FusionHead::Decision {
                radar: Predictor::new(d, rng),
                imu: Predictor::new(d, rng),
            },
            FusionMethod::Cma => FusionHead::Cma {
                cma: Cma::new(&cfg.cma, rng)?,
                predictor: Predictor::new(2 * d, rng),
            },
        })
    }

    pub fn method(&self) -> FusionMethod {
        match self {
            FusionHead::Add(_) => FusionMethod::Add,
            FusionHead::Concat(_) => FusionMethod::Concat,
            FusionHead::Decision { .. } => FusionMethod::Decision,
            FusionHead::Cma { .. } => FusionMethod::Cma,
        }
    }

    /// Log-probabilities `[3, N]` in double precision.
    pub fn forward(&self, m_r: &Mat<T>, m_i: &Mat<T>) -> Result<(Mat<f64>, FusionCache<T>)> {
        same_shape(m_r, m_i)?;
        let single = |pred: &Predictor<T>, x: &Mat<T>, fused: Option<CmaCache<T>>| -> Result<(Mat<f64>, FusionCache<T>)> {
            let (z, pc) = pred.logits(x)?;
            let logp = log_softmax_cols(&to_f64_mat(&z));
            Ok((logp.clone(), FusionCache::Single { fused, pred: pc, logp }))
        };
        match self {
            FusionHead::Add(p) => single(p, &fuse_add(m_r, m_i)?, None),
            FusionHead::Concat(p) => single(p, &fuse_concat(m_r, m_i)?, None),
            FusionHead::Cma { cma, predictor } => {
                let (f, c) = cma.forward(m_r, m_i)?;
                single(predictor, &f, Some(c))
            }
            FusionHead::Decision { radar, imu } => {
                let (zr, r) = radar.logits(m_r)?;
                let (zi, i) = imu.logits(m_i)?;
                let logp_r = log_softmax_cols(&to_f64_mat(&zr));
                let logp_i = log_softmax_cols(&to_f64_mat(&zi));
                let mut logp = Mat::zeros(logp_r.rows, logp_r.cols);
                for (o, (&a, &b)) in logp.data.iter_mut().zip(logp_r.data.iter().zip(&logp_i.data)) {
                    // log((e^a + e^b) / 2), stable
                    let m = a.max(b);
                    *o = m + (0.5 * ((a - m).exp() + (b - m).exp())).ln();
                }
                Ok((logp.clone(), FusionCache::Decision { r, i, logp_r, logp_i, logp }))
            }
        }
    }

    /// Gradients w.r.t. `(m_r, m_i)` from a gradient w.r.t. the log-probabilities.
    pub fn backward(&self, cache: &FusionCache<T>, dlogp: &Mat<f64>, grad: Option<&mut FusionHead<T>>) -> (Mat<T>, Mat<T>) {
        match (self, cache) {
            (FusionHead::Add(p), FusionCache::Single { pred, logp, .. }) => {
                let g = match grad {
                    Some(FusionHead::Add(g)) => Some(g),
                    _ => None,
                };
                let dz = crate::losses::to_t(&log_softmax_backward(logp, dlogp));
                let dx = p.backward(pred, &dz, g);
                (dx.clone(), dx)
            }
            (FusionHead::Concat(p), FusionCache::Single { pred, logp, .. }) => {
                let g = match grad {
                    Some(FusionHead::Concat(g)) => Some(g),
                    _ => None,
                };
                let dz = crate::losses::to_t(&log_softmax_backward(logp, dlogp));
                let dx = p.backward(pred, &dz, g);
                let d = dx.rows / 2;
                (dx.slice_rows(0, d), dx.slice_rows(d, d))
            }
            (FusionHead::Cma { cma, predictor }, FusionCache::Single { fused: Some(fc), pred, logp }) => {
                let (gc, gp) = match grad {
                    Some(FusionHead::Cma { cma, predictor }) => (Some(cma), Some(predictor)),
                    _ => (None, None),
                };
                let dz = crate::losses::to_t(&log_softmax_backward(logp, dlogp));
                let df = predictor.backward(pred, &dz, gp);
                cma.backward(fc, &df, gc)
            }
            (FusionHead::Decision { radar, imu }, FusionCache::Decision { r, i, logp_r, logp_i, logp }) => {
                let (gr, gi) = match grad {
                    Some(FusionHead::Decision { radar, imu }) => (Some(radar), Some(imu)),
                    _ => (None, None),
                };
                // d logp / d logp_r = p_r / (2 p)
                let mut dr = Mat::zeros(logp.rows, logp.cols);
                let mut di = Mat::zeros(logp.rows, logp.cols);
                for k in 0..logp.data.len() {
                    dr.data[k] = dlogp.data[k] * 0.5 * (logp_r.data[k] - logp.data[k]).exp();
                    di.data[k] = dlogp.data[k] * 0.5 * (logp_i.data[k] - logp.data[k]).exp();
                }
                let dzr = crate::losses::to_t(&log_softmax_backward(logp_r, &dr));
                let dzi = crate::losses::to_t(&log_softmax_backward(logp_i, &di));
                (radar.backward(r, &dzr, gr), imu.backward(i, &dzi, gi))
            }
            _ => panic!("fusion cache from a different method"),
        }
    }
}

impl<T: Scalar> Module<T> for FusionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            FusionHead::Add(p) | FusionHead::Concat(p) => p.visit(&join_name(prefix, "predictor"), f),
            FusionHead::Decision { radar, imu } => {
                radar.visit(&join_name(prefix, "radar_predictor"), f);
                imu.visit(&join_name(prefix, "imu_predictor"), f);
            }
            FusionHead::Cma { cma, predictor } => {
                cma.visit(&join_name(prefix, "cma"), f);
                predictor.visit(&join_name(prefix, "predictor"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            FusionHead::Add(p) | FusionHead::Concat(p) => p.visit_mut(&join_name(prefix, "predictor"), f),
            FusionHead::Decision { radar, imu } => {
                radar.visit_mut(&join_name(prefix, "radar_predictor"), f);
                imu.visit_mut(&join_name(prefix, "imu_predictor"), f);
            }
            FusionHead::Cma { cma, predictor } => {
                cma.visit_mut(&join_name(prefix, "cma"), f);
                predictor.visit_mut(&join_name(prefix, "predictor"), f);
            }
        }
    }
}

//! Raw-waveform encoders and the heads on top of the artifact embedding.
//!
//! Each encoder is a fixed band-pass filterbank followed by residual blocks
//! with feature-map scaling and a GRU whose last hidden state, passed through
//! a linear layer, is the embedding.

use std::f64::consts::PI;

use vocoguard_tape::{kernels, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ModelState, ARTIFACT_ENCODER, CONTENT_ENCODER};
use crate::params::Binder;

pub const LEAKY_SLOPE: f64 = 0.3;
pub const NORM_EPS: f64 = 1e-5;
/// Added before the log compression of the frontend envelopes.
pub const LOG_FLOOR: f64 = 1e-4;

/// Clamped `(low, high)` cutoffs in Hz. The low edge is folded to be
/// non-negative and the high edge never falls below it or above Nyquist.
pub fn filter_bands(low_hz: &[f64], band_hz: &[f64], sample_rate: u32) -> Vec<(f64, f64)> {
    let nyquist = sample_rate as f64 / 2.0;
    low_hz
        .iter()
        .zip(band_hz)
        .map(|(&lo, &bw)| {
            let f1 = lo.abs().min(nyquist);
            let f2 = (f1 + bw.abs()).clamp(f1, nyquist);
            (f1, f2)
        })
        .collect()
}

/// Hamming-windowed sinc band-pass impulse responses, `[F, K]` row-major,
/// each scaled to unit peak.
pub fn sinc_filters(low_hz: &[f64], band_hz: &[f64], kernel: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let half = (kernel / 2) as f64;
    let lowpass = |f: f64, n: f64| {
        if n == 0.0 {
            2.0 * f
        } else {
            (2.0 * PI * f * n).sin() / (PI * n)
        }
    };
    let mut out = Vec::with_capacity(low_hz.len() * kernel);
    for (f1, f2) in filter_bands(low_hz, band_hz, sample_rate) {
        let (f1, f2) = (f1 / sr, f2 / sr);
        let start = out.len();
        for k in 0..kernel {
            let n = k as f64 - half;
            let window = 0.54 - 0.46 * (2.0 * PI * k as f64 / (kernel - 1).max(1) as f64).cos();
            out.push((lowpass(f2, n) - lowpass(f1, n)) * window);
        }
        let peak = out[start..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            out[start..].iter_mut().for_each(|v| *v /= peak);
        }
    }
    out
}

fn check_batch(cfg: &BackboneConfig, waves: &[f32], batch: usize) -> Result<()> {
    if batch == 0 || waves.len() != batch * cfg.input_len {
        return Err(Error::Shape(format!(
            "expected {batch} waveforms of {} samples, got {} samples",
            cfg.input_len,
            waves.len()
        )));
    }
    Ok(())
}

/// Filterbank envelopes `[B, F, T0]`: band-pass convolution at
/// `frontend_stride`, rectification, max-pooling by `frontend_pool`, then
/// `ln(LOG_FLOOR + ·)`. The filters have no trainable parameters, so this
/// runs outside the graph.
pub fn frontend<T: Real>(state: &ModelState, encoder: &str, waves: &[f32], batch: usize) -> Result<Tensor<T>> {
    let cfg = &state.config.backbone;
    check_batch(cfg, waves, batch)?;
    let get = |n: &str| {
        state
            .params
            .get(&format!("{encoder}/frontend/{n}"))
            .map(|p| p.data.clone())
            .ok_or_else(|| Error::Shape(format!("missing frontend parameters for {encoder}")))
    };
    let filters: Vec<T> = sinc_filters(&get("low_hz")?, &get("band_hz")?, cfg.sinc_kernel, cfg.sample_rate)
        .into_iter()
        .map(T::of)
        .collect();
    let (k, f, stride, pool) = (cfg.sinc_kernel, cfg.num_filters, cfg.frontend_stride, cfg.frontend_pool);
    let t0 = cfg.frontend_len();
    let half = k / 2;
    let floor = T::of(LOG_FLOOR);
    let mut padded = vec![T::zero(); cfg.input_len + k];
    let mut out = Vec::with_capacity(batch * f * t0);
    for b in 0..batch {
        for (dst, &s) in padded[half..half + cfg.input_len]
            .iter_mut()
            .zip(&waves[b * cfg.input_len..(b + 1) * cfg.input_len])
        {
            *dst = T::of(s as f64);
        }
        for fi in 0..f {
            let h = &filters[fi * k..(fi + 1) * k];
            for t in 0..t0 {
                let mut m = T::zero();
                for p in 0..pool {
                    let at = (t * pool + p) * stride;
                    m = m.max(kernels::dot(h, &padded[at..at + k]).abs());
                }
                out.push((floor + m).ln());
            }
        }
    }
    Ok(Tensor::new(&[batch, f, t0], out))
}

/// True when both encoders carry identical filterbanks, so one frontend pass
/// can feed both.
pub fn shared_frontend(state: &ModelState) -> bool {
    ["low_hz", "band_hz"].iter().all(|n| {
        state.params.get(&format!("{CONTENT_ENCODER}/frontend/{n}"))
            == state.params.get(&format!("{ARTIFACT_ENCODER}/frontend/{n}"))
    })
}

/// Residual blocks, GRU and output layer of one encoder, from frontend
/// features `[B, F, T0]` to an embedding `[B, d]`.
pub fn encoder_trunk<T: Real>(b: &mut Binder<T>, cfg: &BackboneConfig, enc: &str, feats: Var) -> Var {
    let mut x = feats;
    for i in 0..cfg.num_res_blocks {
        let p = format!("{enc}/resblock{i}");
        let len = b.g.shape(x)[2];
        let (w1, b1) = (b.p(&format!("{p}/conv1/weight")), b.p(&format!("{p}/conv1/bias")));
        let mut h = b.g.conv1d(x, w1, Some(b1), 1);
        h = b.g.instance_norm(h, len, T::of(NORM_EPS));
        let (gamma, beta) = (b.p(&format!("{p}/norm/gamma")), b.p(&format!("{p}/norm/beta")));
        h = b.g.channel_affine(h, gamma, beta);
        h = b.g.leaky_relu(h, T::of(LEAKY_SLOPE));
        let (w2, b2) = (b.p(&format!("{p}/conv2/weight")), b.p(&format!("{p}/conv2/bias")));
        h = b.g.conv1d(h, w2, Some(b2), 1);
        let skip = if i == 0 && cfg.num_filters != cfg.channels {
            let ws = b.p(&format!("{p}/skip/weight"));
            b.g.conv1d(x, ws, None, 0)
        } else {
            x
        };
        h = b.g.add(h, skip);
        h = b.g.max_pool1d(h, 2);
        let pooled = b.g.mean_inner(h, 2);
        let (wf, bf) = (b.p(&format!("{p}/fms/weight")), b.p(&format!("{p}/fms/bias")));
        let s = b.g.linear(pooled, wf, Some(bf));
        let s = b.g.sigmoid(s);
        x = b.g.row_affine(h, s, s);
    }
    let hidden = gru_last_state(b, cfg, enc, x);
    let (w, bias) = (b.p(&format!("{enc}/fc/weight")), b.p(&format!("{enc}/fc/bias")));
    b.g.linear(hidden, w, Some(bias))
}

/// Single-layer GRU over `[B, C, T]`, returning the final hidden state.
fn gru_last_state<T: Real>(b: &mut Binder<T>, cfg: &BackboneConfig, enc: &str, x: Var) -> Var {
    let shape = b.g.shape(x).to_vec();
    let (batch, ch, steps) = (shape[0], shape[1], shape[2]);
    let hd = cfg.recurrent_dim;
    let seq = b.g.permute3(x, [2, 0, 1]);
    let seq = b.g.reshape(seq, &[steps * batch, ch]);
    let (w_ih, b_ih) = (b.p(&format!("{enc}/gru/w_ih")), b.p(&format!("{enc}/gru/b_ih")));
    let (w_hh, b_hh) = (b.p(&format!("{enc}/gru/w_hh")), b.p(&format!("{enc}/gru/b_hh")));
    let gates_x = b.g.linear(seq, w_ih, Some(b_ih));
    let mut h = b.input(Tensor::zeros(&[batch, hd]));
    for t in 0..steps {
        let gx = b.g.slice_rows(gates_x, t * batch, batch);
        let gh = b.g.linear(h, w_hh, Some(b_hh));
        let part = |b: &mut Binder<T>, v: Var, k: usize| b.g.slice_cols(v, k * hd, hd);
        let (xr, xz, xn) = (part(b, gx, 0), part(b, gx, 1), part(b, gx, 2));
        let (hr, hz, hn) = (part(b, gh, 0), part(b, gh, 1), part(b, gh, 2));
        let r = b.g.add(xr, hr);
        let r = b.g.sigmoid(r);
        let z = b.g.add(xz, hz);
        let z = b.g.sigmoid(z);
        let rn = b.g.mul(r, hn);
        let n = b.g.add(xn, rn);
        let n = b.g.tanh(n);
        let diff = b.g.sub(h, n);
        let zd = b.g.mul(z, diff);
        h = b.g.add(n, zd);
    }
    h
}

fn affine<T: Real>(b: &mut Binder<T>, name: &str, x: Var) -> Var {
    let (w, bias) = (b.p(&format!("{name}/weight")), b.p(&format!("{name}/bias")));
    b.g.linear(x, w, Some(bias))
}

/// `(a_s, a_g)` from the shared artifact embedding.
pub fn artifact_projections<T: Real>(b: &mut Binder<T>, shared: Var) -> (Var, Var) {
    (affine(b, "proj_s", shared), affine(b, "proj_g", shared))
}

pub fn domain_logits<T: Real>(b: &mut Binder<T>, a_s: Var) -> Var {
    affine(b, "head_domain", a_s)
}

pub fn auth_logits<T: Real>(b: &mut Binder<T>, a_g: Var) -> Var {
    affine(b, "head_auth", a_g)
}

/// Per-clip content embedding `c`, domain-specific `a_s` and domain-agnostic
/// `a_g`, all as `[B, ·]` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub c: Tensor<f64>,
    pub a_s: Tensor<f64>,
    pub a_g: Tensor<f64>,
}

/// Frontend features of many clips, computed once and reused. The
/// filterbank has no trainable parameters, so the features stay valid for
/// the whole life of a model.
#[derive(Clone, Debug)]
pub struct FrontendCache {
    artifact: Vec<Vec<f64>>,
    /// Empty when both encoders share a filterbank.
    content: Vec<Vec<f64>>,
    shape: [usize; 2],
}

impl FrontendCache {
    /// Features for every clip. Content features are
    /// computed only when `with_content` is set.
    pub fn build<T: Real>(state: &ModelState, waves: &[&[f32]], with_content: bool) -> Result<Self> {
        let cfg = &state.config.backbone;
        let run = |enc: &str| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(waves.len());
            for w in waves {
                out.push(frontend::<T>(state, enc, w, 1)?.to_f64().into_data());
            }
            Ok(out)
        };
        let artifact = run(ARTIFACT_ENCODER)?;
        let content = if with_content && !shared_frontend(state) {
            run(CONTENT_ENCODER)?
        } else {
            Vec::new()
        };
        Ok(Self {
            artifact,
            content,
            shape: [cfg.num_filters, cfg.frontend_len()],
        })
    }

    pub fn len(&self) -> usize {
        self.artifact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifact.is_empty()
    }

    fn stack<T: Real>(&self, rows: &[Vec<f64>], idx: &[usize]) -> Tensor<T> {
        let data = idx.iter().flat_map(|&i| rows[i].iter().map(|&v| T::of(v))).collect();
        Tensor::new(&[idx.len(), self.shape[0], self.shape[1]], data)
    }

    /// Artifact-encoder input `[B, F, T0]` for clips `idx`.
    pub fn artifact<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        self.stack(&self.artifact, idx)
    }

    /// Content-encoder input for clips `idx`.
    pub fn content<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        if self.content.is_empty() {
            self.stack(&self.artifact, idx)
        } else {
            self.stack(&self.content, idx)
        }
    }
}

/// Runs both encoders and the projection heads on `batch` waveforms stored
/// back to back in `waves`.
pub fn encode<T: Real>(state: &ModelState, waves: &[f32], batch: usize) -> Result<FeatureBatch> {
    let fa = frontend::<T>(state, ARTIFACT_ENCODER, waves, batch)?;
    let fc = if shared_frontend(state) {
        fa.clone()
    } else {
        frontend::<T>(state, CONTENT_ENCODER, waves, batch)?
    };
    encode_frontend(state, fc, fa)
}

/// [`encode`] from precomputed frontend features.
pub fn encode_frontend<T: Real>(state: &ModelState, content: Tensor<T>, artifact: Tensor<T>) -> Result<FeatureBatch> {
    let cfg = &state.config.backbone;
    let mut b = Binder::<T>::new(&state.params);
    let xc = b.input(content);
    let xa = b.input(artifact);
    let c = encoder_trunk(&mut b, cfg, CONTENT_ENCODER, xc);
    let shared = encoder_trunk(&mut b, cfg, ARTIFACT_ENCODER, xa);
    let (a_s, a_g) = artifact_projections(&mut b, shared);
    let out = FeatureBatch {
        c: b.g.value(c).to_f64(),
        a_s: b.g.value(a_s).to_f64(),
        a_g: b.g.value(a_g).to_f64(),
    };
    if !(out.c.all_finite() && out.a_s.all_finite() && out.a_g.all_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(out)
}

fn head(state: &ModelState, name: &str, x: &Tensor<f64>, in_dim: usize) -> Result<Tensor<f64>> {
    if x.shape().len() != 2 || x.dim(1) != in_dim {
        return Err(Error::Shape(format!(
            "{name} expects [B, {in_dim}], got {:?}",
            x.shape()
        )));
    }
    let mut b = Binder::<f64>::new(&state.params);
    let xv = b.input(x.clone());
    let y = affine(&mut b, name, xv);
    Ok(b.g.value(y).clone())
}

/// Unnormalized domain logits `[B, |D|]`.
pub fn classify_domain(state: &ModelState, a_s: &Tensor<f64>) -> Result<Tensor<f64>> {
    head(state, "head_domain", a_s, state.config.backbone.artifact_proj_dim)
}

/// Unnormalized real/fake logits `[B, 2]`; column 1 is "fake".
pub fn classify_authenticity(state: &ModelState, a_g: &Tensor<f64>) -> Result<Tensor<f64>> {
    head(state, "head_auth", a_g, state.config.backbone.artifact_proj_dim)
}

/// Softmax probability of "fake" from the authenticity head. Only the
/// artifact encoder is evaluated.
pub fn predict<T: Real>(state: &ModelState, waves: &[f32], batch: usize) -> Result<Vec<f64>> {
    predict_frontend(state, frontend::<T>(state, ARTIFACT_ENCODER, waves, batch)?)
}

/// [`predict`] from precomputed artifact-encoder frontend features.
pub fn predict_frontend<T: Real>(state: &ModelState, artifact: Tensor<T>) -> Result<Vec<f64>> {
    let cfg = &state.config.backbone;
    let batch = artifact.dim(0);
    let mut b = Binder::<T>::new(&state.params);
    let xa = b.input(artifact);
    let shared = encoder_trunk(&mut b, cfg, ARTIFACT_ENCODER, xa);
    let a_g = affine(&mut b, "proj_g", shared);
    let logits = auth_logits(&mut b, a_g);
    let lv = b.g.value(logits);
    let scores: Vec<f64> = (0..batch)
        .map(|r| {
            let row = lv.row(r);
            let d = row[0].f64() - row[1].f64();
            1.0 / (1.0 + d.exp())
        })
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("authenticity scores".into()));
    }
    Ok(scores)
}

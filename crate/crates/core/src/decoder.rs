//! Reconstructs a waveform from a content embedding, restyled by the
//! artifact embeddings through adaptive instance normalization.
//!
//! The content vector is laid out as a `[C, H, W]` grid, normalized per
//! channel, rescaled with `(γ, β)` predicted from `concat(a_s, a_g)`, then
//! upsampled and convolved into a `[channels, H', W']` map that is flattened
//! and trimmed to the output length.

use vocoguard_tape::{Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::params::Binder;

pub const ADAIN_EPS: f64 = 1e-5;

/// `γ · (x − μ) / (σ + ε) + β` per `(example, channel)` over the spatial
/// axes of `x: [B, C, H, W]`, with `gamma, beta: [B, C]`.
pub fn adain_graph<T: Real>(b: &mut Binder<T>, x: Var, gamma: Var, beta: Var) -> Var {
    let s = b.g.shape(x);
    let inner = s[2] * s[3];
    let n = b.g.instance_norm(x, inner, T::of(ADAIN_EPS));
    b.g.row_affine(n, gamma, beta)
}

/// AdaIN on a single `[C, H, W]` map; `style` holds the `C` scales followed
/// by the `C` shifts.
pub fn adain(content_map: &Tensor<f64>, style: &[f64]) -> Result<Tensor<f64>> {
    let s = content_map.shape();
    if s.len() != 3 || style.len() != 2 * s[0] {
        return Err(Error::Shape(format!(
            "adain needs a [C, H, W] map and 2C style values, got {:?} and {}",
            s,
            style.len()
        )));
    }
    let c = s[0];
    let store = crate::params::ParamStore::new();
    let mut b = Binder::<f64>::new(&store);
    let x = b.input(content_map.clone().reshaped(&[1, c, s[1], s[2]]));
    let gamma = b.input(Tensor::new(&[1, c], style[..c].to_vec()));
    let beta = b.input(Tensor::new(&[1, c], style[c..].to_vec()));
    let y = adain_graph(&mut b, x, gamma, beta);
    Ok(b.g.value(y).clone().reshaped(s))
}

/// Decoder forward pass inside a graph: `c: [B, d]`, `a_s, a_g: [B, d_a]`
/// to `[B, output_len]` in (−1, 1).
pub fn decoder_graph<T: Real>(b: &mut Binder<T>, cfg: &ModelConfig, c: Var, a_s: Var, a_g: Var) -> Var {
    let d = &cfg.decoder;
    let cc = d.content_channels(cfg.backbone.embed_dim);
    let batch = b.g.shape(c)[0];

    let style_in = b.g.concat_cols(&[a_s, a_g]);
    let (sw, sb) = (b.p("decoder/style/weight"), b.p("decoder/style/bias"));
    let style = b.g.linear(style_in, sw, Some(sb));
    let gamma_raw = b.g.slice_cols(style, 0, cc);
    let gamma = b.g.offset(gamma_raw, T::one());
    let beta = b.g.slice_cols(style, cc, cc);

    let grid = b.g.reshape(c, &[batch, cc, d.grid_h, d.grid_w]);
    let mut x = adain_graph(b, grid, gamma, beta);
    x = b.g.upsample2x(x);
    let conv = |b: &mut Binder<T>, name: &str, x: Var| {
        let (w, bias) = (b.p(&format!("{name}/weight")), b.p(&format!("{name}/bias")));
        b.g.conv2d(x, w, Some(bias), 1)
    };
    x = conv(b, "decoder/conv_in", x);
    for name in ["decoder/conv_a", "decoder/conv_b"] {
        x = conv(b, name, x);
        x = b.g.relu(x);
    }
    for k in 0..d.num_upsample_stages - 1 {
        x = conv(b, &format!("decoder/conv_out{k}"), x);
        x = b.g.upsample2x(x);
    }
    x = b.g.tanh(x);
    let flat = b.g.shape(x)[1..].iter().product();
    let x = b.g.reshape(x, &[batch, flat]);
    b.g.slice_cols(x, 0, d.output_len)
}

/// Value-level decoder in 64-bit arithmetic.
pub fn decode(state: &ModelState, c: &Tensor<f64>, a_s: &Tensor<f64>, a_g: &Tensor<f64>) -> Result<Tensor<f64>> {
    let bc = &state.config.backbone;
    let ok = c.shape().len() == 2
        && a_s.shape().len() == 2
        && a_g.shape().len() == 2
        && c.dim(1) == bc.embed_dim
        && a_s.dim(1) == bc.artifact_proj_dim
        && a_g.dim(1) == bc.artifact_proj_dim
        && a_s.dim(0) == c.dim(0)
        && a_g.dim(0) == c.dim(0);
    if !ok {
        return Err(Error::Shape(format!(
            "decode expects c [B, {}] and a_s, a_g [B, {}], got {:?}, {:?}, {:?}",
            bc.embed_dim,
            bc.artifact_proj_dim,
            c.shape(),
            a_s.shape(),
            a_g.shape()
        )));
    }
    let mut b = Binder::<f64>::new(&state.params);
    let (cv, sv, gv) = (b.input(c.clone()), b.input(a_s.clone()), b.input(a_g.clone()));
    let y = decoder_graph(&mut b, &state.config, cv, sv, gv);
    Ok(b.g.value(y).clone())
}

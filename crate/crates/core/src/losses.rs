//! Classification, triplet, reconstruction and mutual-information terms and
//! their weighted sum.
//!
//! Every term exists once, as graph code; the value-level functions build a
//! small graph and read the result.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vocoguard_tape::{Graph, Real, Tensor, Var};

use crate::config::{fmt_f64, parse_bool, parse_value};
use crate::error::{Error, Result};
use crate::params::Binder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Authenticity term inside the classification loss.
    pub lambda1: f64,
    /// Both contrastive terms.
    pub lambda2: f64,
    /// Reconstruction.
    pub lambda3: f64,
    /// Mutual-information bound.
    pub lambda4: f64,
    /// Triplet margin `b`.
    pub margin_b: f64,
    /// When true (the default) the bound enters the total with a minus sign,
    /// so training maximizes it.
    pub mi_maximize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.3,
            lambda3: 0.05,
            lambda4: 0.03,
            margin_b: 3.0,
            mi_maximize: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("weights.lambda1", self.lambda1),
            ("weights.lambda2", self.lambda2),
            ("weights.lambda3", self.lambda3),
            ("weights.lambda4", self.lambda4),
            ("weights.margin_b", self.margin_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::bad_value(k, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Coefficient of `l_mi` in the total.
    pub fn mi_coefficient(&self) -> f64 {
        if self.mi_maximize {
            -self.lambda4
        } else {
            self.lambda4
        }
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "weights.lambda1" => self.lambda1 = parse_value(key, value)?,
            "weights.lambda2" => self.lambda2 = parse_value(key, value)?,
            "weights.lambda3" => self.lambda3 = parse_value(key, value)?,
            "weights.lambda4" => self.lambda4 = parse_value(key, value)?,
            "weights.margin_b" => self.margin_b = parse_value(key, value)?,
            "weights.mi_maximize" => self.mi_maximize = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("weights.lambda1".into(), fmt_f64(self.lambda1)),
            ("weights.lambda2".into(), fmt_f64(self.lambda2)),
            ("weights.lambda3".into(), fmt_f64(self.lambda3)),
            ("weights.lambda4".into(), fmt_f64(self.lambda4)),
            ("weights.margin_b".into(), fmt_f64(self.margin_b)),
            ("weights.mi_maximize".into(), self.mi_maximize.to_string()),
        ]
    }
}

/// Per-term values of one step. Disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_con_s: f64,
    pub l_con_g: f64,
    pub l_rec: f64,
    pub l_mi: f64,
    pub total: f64,
}

impl LossReport {
    /// The weighted sum of the stored terms.
    pub fn recompute(&self, w: &LossWeights) -> f64 {
        self.l_cls + w.lambda2 * (self.l_con_s + self.l_con_g) + w.lambda3 * self.l_rec + w.mi_coefficient() * self.l_mi
    }
}

/// `l_cls + λ2·(l_con_s + l_con_g) + λ3·l_rec − λ4·l_mi`. The `total` field
/// of `parts` is ignored.
pub fn total_loss(parts: &LossReport, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("l_cls", parts.l_cls),
        ("l_con_s", parts.l_con_s),
        ("l_con_g", parts.l_con_g),
        ("l_rec", parts.l_rec),
        ("l_mi", parts.l_mi),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} ({v})")));
        }
    }
    Ok(parts.recompute(w))
}

/// Graph form of the total; `None` terms are absent.
pub fn total_graph<T: Real>(
    g: &mut Graph<T>,
    w: &LossWeights,
    cls: Var,
    con: Option<Var>,
    rec: Option<Var>,
    mi: Option<Var>,
) -> Var {
    let mut total = cls;
    if let Some(c) = con {
        let t = g.scale(c, T::of(w.lambda2));
        total = g.add(total, t);
    }
    if let Some(r) = rec {
        let t = g.scale(r, T::of(w.lambda3));
        total = g.add(total, t);
    }
    if let Some(m) = mi {
        let t = g.scale(m, T::of(w.mi_coefficient()));
        total = g.add(total, t);
    }
    total
}

/// Mean cross-entropy of both heads, `CE(domain) + λ1·CE(auth)`.
pub fn classification_graph<T: Real>(
    g: &mut Graph<T>,
    domain_logits: Var,
    domains: &[usize],
    auth_logits: Var,
    labels: &[usize],
    lambda1: f64,
) -> Var {
    let dom = g.cross_entropy(domain_logits, domains);
    let auth = g.cross_entropy(auth_logits, labels);
    let auth = g.scale(auth, T::of(lambda1));
    g.add(dom, auth)
}

fn check_classes(logits: &Tensor<f64>, targets: &[usize], what: &str) -> Result<()> {
    if logits.shape().len() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::Shape(format!(
            "{what}: logits {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.dim(1)) {
        return Err(Error::Validation(format!(
            "{what}: class index {t} out of range for {} classes",
            logits.dim(1)
        )));
    }
    Ok(())
}

pub fn classification_loss(
    domain_logits: &Tensor<f64>,
    domains: &[usize],
    auth_logits: &Tensor<f64>,
    labels: &[usize],
    lambda1: f64,
) -> Result<f64> {
    check_classes(domain_logits, domains, "domain head")?;
    check_classes(auth_logits, labels, "authenticity head")?;
    let mut g = Graph::<f64>::new();
    let d = g.input(domain_logits.clone());
    let a = g.input(auth_logits.clone());
    let l = classification_graph(&mut g, d, domains, a, labels, lambda1);
    Ok(g.scalar(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One triplet per anchor that has both a same-source partner and a
/// different-source partner, each drawn uniformly.
pub fn mine_triplets(sources: &[usize], rng: &mut impl Rng) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, &sa) in sources.iter().enumerate() {
        let pos: Vec<usize> = (0..sources.len()).filter(|&j| j != a && sources[j] == sa).collect();
        let neg: Vec<usize> = (0..sources.len()).filter(|&j| sources[j] != sa).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        out.push(Triplet {
            anchor: a,
            positive: pos[rng.random_range(0..pos.len())],
            negative: neg[rng.random_range(0..neg.len())],
        });
    }
    out
}

/// Mean hinge `[b + ‖a − p‖ − ‖a − n‖]₊` over `triplets` of rows of
/// `feats: [N, D]`; `None` when there are no triplets.
pub fn contrastive_graph<T: Real>(g: &mut Graph<T>, feats: Var, triplets: &[Triplet], margin: f64) -> Option<Var> {
    if triplets.is_empty() {
        return None;
    }
    let pick = |g: &mut Graph<T>, f: fn(&Triplet) -> usize| {
        let idx: Vec<usize> = triplets.iter().map(f).collect();
        g.index_rows(feats, &idx)
    };
    let a = pick(g, |t| t.anchor);
    let p = pick(g, |t| t.positive);
    let n = pick(g, |t| t.negative);
    let ap = g.sub(a, p);
    let an = g.sub(a, n);
    let dp = g.row_norm(ap);
    let dn = g.row_norm(an);
    let gap = g.sub(dp, dn);
    let shifted = g.offset(gap, T::of(margin));
    let hinge = g.relu(shifted);
    Some(g.mean(hinge))
}

/// `[b + ‖anchor − positive‖₂ − ‖anchor − negative‖₂]₊`.
pub fn contrastive_loss(anchor: &[f64], positive: &[f64], negative: &[f64], b: f64) -> Result<f64> {
    let d = anchor.len();
    if positive.len() != d || negative.len() != d {
        return Err(Error::Shape("contrastive_loss: unequal dimensions".into()));
    }
    let mut g = Graph::<f64>::new();
    let mut rows = anchor.to_vec();
    rows.extend_from_slice(positive);
    rows.extend_from_slice(negative);
    let f = g.input(Tensor::new(&[3, d], rows));
    let t = [Triplet {
        anchor: 0,
        positive: 1,
        negative: 2,
    }];
    let l = contrastive_graph(&mut g, f, &t, b).expect("one triplet");
    Ok(g.scalar(l))
}

/// `mean|x − x_self| + mean|x − x_cross|`.
pub fn reconstruction_graph<T: Real>(g: &mut Graph<T>, x: Var, x_self: Var, x_cross: Var) -> Var {
    let a = g.l1_mean(x, x_self);
    let b = g.l1_mean(x, x_cross);
    g.add(a, b)
}

pub fn reconstruction_loss(x: &Tensor<f64>, x_self: &Tensor<f64>, x_cross: &Tensor<f64>) -> Result<f64> {
    if x.shape() != x_self.shape() || x.shape() != x_cross.shape() {
        return Err(Error::Shape(format!(
            "reconstruction_loss: {:?}, {:?}, {:?}",
            x.shape(),
            x_self.shape(),
            x_cross.shape()
        )));
    }
    let mut g = Graph::<f64>::new();
    let (a, b, c) = (g.input(x.clone()), g.input(x_self.clone()), g.input(x_cross.clone()));
    let l = reconstruction_graph(&mut g, a, b, c);
    Ok(g.scalar(l))
}

/// Donsker–Varadhan bound with critic `u[i, j] = ⟨a_g[i], c[j]⟩`: mean of
/// the diagonal minus the log-mean-exp of the off-diagonal entries.
pub fn mi_bound_graph<T: Real>(g: &mut Graph<T>, c: Var, a_g: Var) -> Var {
    let u = g.matmul_nt(a_g, c);
    g.dv_bound(u)
}

/// The bound after the learned critic projections of the model, which map
/// `c` and `a_g` to a common width.
pub fn mi_critic_graph<T: Real>(b: &mut Binder<T>, c: Var, a_g: Var) -> Var {
    let (wc, bc) = (b.p("mi_critic/content/weight"), b.p("mi_critic/content/bias"));
    let (wa, ba) = (b.p("mi_critic/artifact/weight"), b.p("mi_critic/artifact/bias"));
    let pc = b.g.linear(c, wc, Some(bc));
    let pa = b.g.linear(a_g, wa, Some(ba));
    mi_bound_graph(&mut b.g, pc, pa)
}

pub fn mi_lower_bound(c: &Tensor<f64>, a_g: &Tensor<f64>) -> Result<f64> {
    if c.shape().len() != 2 || c.shape() != a_g.shape() {
        return Err(Error::Shape(format!(
            "mi_lower_bound needs equal [B, D] inputs, got {:?} and {:?}",
            c.shape(),
            a_g.shape()
        )));
    }
    if c.dim(0) < 2 {
        return Err(Error::Validation("mi_lower_bound needs at least two rows".into()));
    }
    let mut g = Graph::<f64>::new();
    let (cv, av) = (g.input(c.clone()), g.input(a_g.clone()));
    let l = mi_bound_graph(&mut g, cv, av);
    Ok(g.scalar(l))
}

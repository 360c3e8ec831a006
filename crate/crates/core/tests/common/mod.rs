//! Oracles shared by several test targets.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use vocoguard::data::Label;
use vocoguard::losses::mi_critic_graph;
use vocoguard::params::{Binder, Param, ParamStore};
use vocoguard::sam::{Adam, Optimizer};
use vocoguard::seed;
use vocoguard_tape::Tensor;

/// `-½ ln(1 − ρ²)`, the mutual information of a bivariate Gaussian.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Per-sample features `[x, x²]`. A bilinear critic over raw scalars can
/// only express `x·y`; the optimal critic for Gaussians also needs the
/// squares.
fn lift(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len(), 2], v.iter().flat_map(|&x| [x, x * x]).collect())
}

/// Trains the model's affine critic projections by gradient ascent on the
/// DV bound over fresh batches of `(x, y)` with correlation `rho` (zero for
/// independent pairs). Returns the bound of every step, evaluated on the
/// batch before that step's update.
pub fn train_dv_critic(rho: f64, batch: usize, steps: usize, seed: u64) -> Vec<f64> {
    let width = 4;
    let mut rng = seed::rng(&[seed, 0x6d69]);
    let init = Normal::new(0.0, 0.1).unwrap();
    let mut store = ParamStore::new();
    for side in ["content", "artifact"] {
        let w = (0..width * 2).map(|_| init.sample(&mut rng)).collect();
        store.insert(
            format!("mi_critic/{side}/weight"),
            Param {
                shape: vec![width, 2],
                data: w,
                trainable: true,
            },
        );
        store.insert(
            format!("mi_critic/{side}/bias"),
            Param {
                shape: vec![width],
                data: vec![0.0; width],
                trainable: true,
            },
        );
    }
    let mut opt = Adam::new(5e-3);
    let noise = (1.0 - rho * rho).sqrt();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x: Vec<f64> = (0..batch).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| rho * xi + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let (bound, grads) = {
            let mut b = Binder::<f64>::new(&store);
            let c = b.input(lift(&x));
            let a = b.input(lift(&y));
            let mi = mi_critic_graph(&mut b, c, a);
            let neg = b.g.scale(mi, -1.0);
            (b.g.scalar(mi), b.grads(neg))
        };
        trace.push(bound);
        opt.step(&mut store, &grads).unwrap();
    }
    trace
}

pub fn tail_mean(v: &[f64], n: usize) -> f64 {
    let t = &v[v.len() - n..];
    t.iter().sum::<f64>() / t.len() as f64
}

/// Small procedural corpus with 256-sample clips under `dir`.
pub fn small_corpus(
    dir: &std::path::Path,
    clips_per_domain: usize,
    seen: &str,
    unseen: &str,
    seed: u64,
) -> vocoguard::data::Manifest {
    use vocoguard::config::Settings;
    let text = format!(
        "seed = {seed}\nclip_len = 256\nclips_per_domain = {clips_per_domain}\nseen_families = {seen}\nunseen_families = {unseen}\n"
    );
    let cfg = vocoguard::data::CorpusConfig::from_text(&text, "corpus").unwrap();
    vocoguard::data::generate_corpus(&cfg, dir).unwrap().manifest
}

/// Tiny-model training settings writing under `out`.
pub fn tiny_train_config(out: &std::path::Path, extra: &[&str]) -> vocoguard::pipeline::TrainConfig {
    use vocoguard::config::{parse_override, Settings};
    let mut entries = vec![
        parse_override("model.preset=tiny").unwrap(),
        parse_override("batch_size=4").unwrap(),
        parse_override("epochs=2").unwrap(),
        parse_override("precision=64").unwrap(),
        parse_override(&format!("checkpoint_dir={}", out.display())).unwrap(),
    ];
    for e in extra {
        entries.push(parse_override(e).unwrap());
    }
    vocoguard::pipeline::TrainConfig::from_entries(&entries).unwrap()
}

/// FAR and FRR at `t`, counted directly.
pub fn rates(scores: &[f64], labels: &[Label], t: f64) -> (f64, f64) {
    let fakes = labels.iter().filter(|&&l| l == Label::Fake).count() as f64;
    let reals = labels.len() as f64 - fakes;
    let fa = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == Label::Fake && s < t)
        .count() as f64;
    let fr = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == Label::Real && s >= t)
        .count() as f64;
    (fa / fakes, fr / reals)
}

/// Brute-force sweep: every midpoint between distinct scores plus both
/// infinities, rates counted from scratch at each, then the first sign change
/// of FAR - FRR interpolated linearly.
pub fn brute_force_eer(scores: &[f64], labels: &[Label]) -> f64 {
    let mut uniq = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut ts = vec![f64::NEG_INFINITY];
    ts.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    ts.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = ts.iter().map(|&t| rates(scores, labels, t)).collect();
    for k in 1..pts.len() {
        let (f0, r0) = pts[k - 1];
        let (f1, r1) = pts[k];
        if f1 >= r1 {
            if f1 == r1 {
                return f1;
            }
            let (d0, d1) = (f0 - r0, f1 - r1);
            let a = -d0 / (d1 - d0);
            return f0 + a * (f1 - f0);
        }
    }
    unreachable!("FAR reaches 1 and FRR 0 at +inf")
}

/// Area under the ROC curve (TPR over fakes vs FPR over reals) by the
/// trapezoid rule over every distinct threshold.
pub fn trapezoid_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let fakes = labels.iter().filter(|&&l| l == Label::Fake).count() as f64;
    let reals = labels.len() as f64 - fakes;
    let mut uniq = scores.to_vec();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for t in uniq {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l == Label::Fake && s >= t)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l == Label::Real && s >= t)
            .count() as f64;
        let pt = (fp / reals, tp / fakes);
        area += (pt.0 - prev.0) * (pt.1 + prev.1) / 2.0;
        prev = pt;
    }
    area
}

pub fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Label>) {
    let n = rng.random_range(50..=500);
    // Coarse grids force ties.
    let levels = [0u32, 5, 20, 1000][rng.random_range(0..4)];
    let shift = rng.random_range(0.0..1.5);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i < 2 {
            [Label::Real, Label::Fake][i]
        } else if rng.random_bool(0.5) {
            Label::Fake
        } else {
            Label::Real
        };
        let mut s: f64 = rng.random::<f64>() + if label == Label::Fake { shift } else { 0.0 };
        if levels > 0 {
            s = (s * levels as f64).round() / levels as f64;
        }
        scores.push(s);
        labels.push(label);
    }
    (scores, labels)
}

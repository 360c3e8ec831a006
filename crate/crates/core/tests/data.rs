use std::path::PathBuf;

use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use vocoguard::config::Settings;
use vocoguard::data::*;
use vocoguard::Error;

const SR: u32 = 16_000;

fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

#[test]
fn preprocess_examples() {
    assert_eq!(
        preprocess_waveform(&[0.1, -0.2], 5).unwrap(),
        vec![0.1, -0.2, 0.1, -0.2, 0.1]
    );
    let long: Vec<f32> = (0..65_536).map(|i| (i as f32 * 0.001).sin()).collect();
    assert_eq!(preprocess_waveform(&long, 65_536).unwrap(), long);
    assert_eq!(preprocess_waveform(&long, 10).unwrap(), long[..10].to_vec());
    assert!(preprocess_waveform::<f32>(&[], 4).is_err());
}

proptest! {
    #[test]
    fn preprocess_is_idempotent(raw in prop::collection::vec(-1.0f32..1.0, 1..200), n in 1usize..500) {
        let once = preprocess_waveform(&raw, n).unwrap();
        prop_assert_eq!(once.len(), n);
        prop_assert_eq!(preprocess_waveform(&once, n).unwrap(), once);
    }

    #[test]
    fn every_artifact_changes_the_clip(
        family in prop::sample::select(VocoderFamily::ALL.to_vec()),
        strength in 0.05f64..=1.0,
        seed in 0u64..1000,
    ) {
        let clean = synth_clean_voice(seed, 4096, SR);
        let spec = SyntheticVocoderSpec { family, strength, seed };
        let fake = apply_vocoder_artifact(&clean, &spec, SR).unwrap();
        prop_assert_eq!(fake.len(), clean.len());
        let d2: f64 = clean.iter().zip(&fake).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!(d2 > 0.0);
        prop_assert!(fake.iter().all(|v| v.abs() <= 1.0));
    }
}

fn manifest_text(rows: &[&str]) -> String {
    let mut s = String::from("path,label,domain,split,seen\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

#[test]
fn manifest_vocabulary_puts_real_first() {
    let text = manifest_text(&[
        "a.wav,fake,vocoder_A,train,",
        "b.wav,real,real,train,",
        "c.wav,real,real,test,1",
        "d.wav,fake,vocoder_A,test,0",
    ]);
    let m = parse_manifest(&text, "m.csv", PathBuf::new()).unwrap();
    assert_eq!(m.domain_vocabulary, vec!["real", "vocoder_A"]);
    assert_eq!(m.rows.len(), 4);
    assert_eq!(m.rows[3].seen, Some(false));
    assert!(!m.domain_is_seen("vocoder_A", Split::Test));
    assert!(m.domain_is_seen("vocoder_A", Split::Train));
    let again = parse_manifest(&m.to_csv(), "m.csv", PathBuf::new()).unwrap();
    assert_eq!(again, m);
}

#[test]
fn manifest_rejects_bad_input() {
    let dup = manifest_text(&["a.wav,real,real,train,", "a.wav,fake,x,train,"]);
    assert!(matches!(
        parse_manifest(&dup, "m", PathBuf::new()),
        Err(Error::Validation(_))
    ));

    let header_only = manifest_text(&[]);
    assert!(parse_manifest(&header_only, "m", PathBuf::new()).is_err());

    let malformed = manifest_text(&["a.wav,real,real,train,", "b.wav,maybe,real,train,"]);
    match parse_manifest(&malformed, "m.csv", PathBuf::new()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }

    let bad_split = manifest_text(&["a.wav,real,real,holdout,"]);
    assert!(matches!(
        parse_manifest(&bad_split, "m", PathBuf::new()),
        Err(Error::Validation(_))
    ));

    let mismatch = manifest_text(&["a.wav,real,vocoder_A,train,"]);
    assert!(parse_manifest(&mismatch, "m", PathBuf::new()).is_err());

    let short = manifest_text(&["a.wav,real,real"]);
    assert!(parse_manifest(&short, "m", PathBuf::new()).is_err());

    assert!(parse_manifest("p,l,d,s\n", "m", PathBuf::new()).is_err());
}

#[test]
fn clean_voice_is_deterministic_and_seed_sensitive() {
    let a = synth_clean_voice(1, 16_384, SR);
    assert_eq!(a, synth_clean_voice(1, 16_384, SR));
    let b = synth_clean_voice(2, 16_384, SR);
    assert!(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
    let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - 0.95).abs() < 1e-12);
}

#[test]
fn clean_voice_energy_sits_below_quarter_rate() {
    for seed in 0..10 {
        let x = synth_clean_voice(seed, 16_384, SR);
        let p = power_spectrum(&x);
        let cut = p.len() / 2;
        let low: f64 = p[..cut].iter().sum();
        let total: f64 = p.iter().sum();
        assert!(low / total > 0.95, "seed {seed}: {}", low / total);
    }
}

#[test]
fn quantizer_at_sixteen_bits_is_near_transparent() {
    let clean = synth_clean_voice(3, 16_384, SR);
    let levels = 2f64.powi(16);
    let worst = clean
        .iter()
        .map(|&v| (quantize_uniform(v, levels) - v).abs())
        .fold(0.0, f64::max);
    assert!(worst < 2f64.powi(-15), "{worst}");
}

#[test]
fn comb_notch_zeroes_its_bands() {
    let n = 16_384;
    let clean = synth_clean_voice(4, n, SR);
    let spec = SyntheticVocoderSpec {
        family: VocoderFamily::CombNotch,
        strength: 0.5,
        seed: 9,
    };
    let y = apply_vocoder_artifact(&clean, &spec, SR).unwrap();
    let p = power_spectrum(&y);
    let clean_p = power_spectrum(&clean);
    let width = 256;
    let k = 4;
    let notched: Vec<usize> = (1..n / 2).filter(|b| (b / width) % k == k - 1).collect();
    assert!(!notched.is_empty());
    let peak = clean_p.iter().cloned().fold(0.0, f64::max);
    for &b in &notched {
        assert!(p[b].sqrt() < 1e-9 * peak.sqrt(), "bin {b}: {}", p[b]);
    }
    let kept: f64 = (1..n / 2).filter(|b| (b / width) % k != k - 1).map(|b| p[b]).sum();
    assert!(kept > 0.0);
}

#[test]
fn artifacts_are_deterministic_and_validated() {
    let clean = synth_clean_voice(5, 8192, SR);
    for family in VocoderFamily::ALL {
        let spec = SyntheticVocoderSpec {
            family,
            strength: 0.5,
            seed: 11,
        };
        let a = apply_vocoder_artifact(&clean, &spec, SR).unwrap();
        assert_eq!(a, apply_vocoder_artifact(&clean, &spec, SR).unwrap(), "{family}");
        assert_eq!(family.name().parse::<VocoderFamily>().unwrap(), family);
    }
    assert!("wavenet".parse::<VocoderFamily>().is_err());
    let zero = SyntheticVocoderSpec {
        family: VocoderFamily::Quantize,
        strength: 0.0,
        seed: 0,
    };
    assert!(apply_vocoder_artifact(&clean, &zero, SR).is_err());
}

/// Mean and standard deviation over frames of 64-band log power, from a
/// 512-point Hann STFT with hop 256.
fn probe_features(x: &[f64]) -> Vec<f64> {
    let n = 512;
    let hop = 256;
    let bands = 64;
    let win: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut frames = Vec::new();
    let mut start = 0;
    while start + n <= x.len() {
        let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[start + i] * win[i], 0.0)).collect();
        fft.process(&mut buf);
        let per = (n / 2) / bands;
        let f: Vec<f64> = (0..bands)
            .map(|b| {
                let e: f64 = buf[b * per..(b + 1) * per].iter().map(|c| c.norm_sqr()).sum();
                (e + 1e-10).ln()
            })
            .collect();
        frames.push(f);
        start += hop;
    }
    let nf = frames.len() as f64;
    let mut out = Vec::with_capacity(2 * bands);
    for b in 0..bands {
        let m = frames.iter().map(|f| f[b]).sum::<f64>() / nf;
        out.push(m);
        let v = frames.iter().map(|f| (f[b] - m).powi(2)).sum::<f64>() / nf;
        out.push(v.sqrt());
    }
    out
}

/// Standardized logistic regression by full-batch gradient descent; returns
/// held-out accuracy.
fn linear_probe(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in train {
        for k in 0..d {
            mean[k] += x[k] / train.len() as f64;
        }
    }
    for (x, _) in train {
        for k in 0..d {
            sd[k] += (x[k] - mean[k]).powi(2) / train.len() as f64;
        }
    }
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mean[k]) / (sd[k].sqrt() + 1e-9)).collect() };
    let tr: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (z(x), *y)).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &tr {
            let s = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-s).exp());
            for k in 0..d {
                gw[k] += (p - y) * x[k];
            }
            gb += p - y;
        }
        for k in 0..d {
            w[k] -= 0.5 * (gw[k] / tr.len() as f64 + 1e-3 * w[k]);
        }
        b -= 0.5 * gb / tr.len() as f64;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let zx = z(x);
            let s = b + zx.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn families_are_pairwise_linearly_separable() {
    let per_class = 40;
    let feats: Vec<Vec<Vec<f64>>> = VocoderFamily::ALL
        .iter()
        .enumerate()
        .map(|(fi, &family)| {
            (0..per_class)
                .map(|i| {
                    let s = (fi * 1000 + i) as u64;
                    let clean = synth_clean_voice(s, 16_384, SR);
                    let spec = SyntheticVocoderSpec {
                        family,
                        strength: 0.5,
                        seed: s,
                    };
                    probe_features(&apply_vocoder_artifact(&clean, &spec, SR).unwrap())
                })
                .collect()
        })
        .collect();
    let half = per_class / 2;
    for a in 0..feats.len() {
        for b in a + 1..feats.len() {
            let split = |range: std::ops::Range<usize>| -> Vec<(Vec<f64>, f64)> {
                range
                    .clone()
                    .map(|i| (feats[a][i].clone(), 0.0))
                    .chain(range.map(|i| (feats[b][i].clone(), 1.0)))
                    .collect()
            };
            let acc = linear_probe(&split(0..half), &split(half..per_class));
            assert!(
                acc >= 0.95,
                "{} vs {}: probe accuracy {acc}",
                VocoderFamily::ALL[a],
                VocoderFamily::ALL[b]
            );
        }
    }
}

#[test]
fn corpus_structure_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        clips_per_domain: 10,
        clip_len: 512,
        ..CorpusConfig::default()
    };
    let a = generate_corpus(&cfg, &dir.path().join("a")).unwrap();
    let b = generate_corpus(&cfg, &dir.path().join("b")).unwrap();
    let ta = std::fs::read(&a.manifest_path).unwrap();
    assert_eq!(ta, std::fs::read(&b.manifest_path).unwrap());

    let m = load_manifest(&a.manifest_path).unwrap();
    assert_eq!(m.rows.len(), cfg.total_clips());
    assert_eq!(m.domain_vocabulary.len(), 7);
    assert_eq!(m.domain_vocabulary[0], "real");
    for u in &cfg.unseen_families {
        assert!(m
            .rows
            .iter()
            .filter(|r| r.domain == u.name())
            .all(|r| r.split == Split::Test && r.seen == Some(false)));
    }
    for split in Split::ALL {
        let reals = m.rows_in(split).filter(|r| r.label == Label::Real).count();
        let fakes = m.rows_in(split).filter(|r| r.label == Label::Fake).count();
        assert_eq!(reals, fakes, "{split}");
    }
    let test_domains: std::collections::BTreeSet<_> = m.rows_in(Split::Test).map(|r| r.domain.as_str()).collect();
    assert_eq!(test_domains.len(), 7);

    let clip = AudioClip::load(&m, &m.rows[0], 512).unwrap();
    assert_eq!(clip.samples.len(), 512);
    assert!(clip.samples.iter().all(|v| v.abs() <= 1.0));
    assert_eq!(clip.sample_rate, SR);
}

#[test]
fn corpus_config_parsing() {
    let cfg = CorpusConfig::from_text(
        "seed = 3\nclips_per_domain = 100\nseen_families = comb_notch,quantize,alias_resample,harmonic_hum\nunseen_families = band_phase_scramble, frame_smear\n",
        "corpus.cfg",
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.seen_families.len(), 4);
    assert_eq!(CorpusConfig::from_text(&cfg.to_text(), "snapshot").unwrap(), cfg);

    let overlap = CorpusConfig::from_text("seen_families = quantize\nunseen_families = quantize\n", "c");
    assert!(matches!(overlap, Err(Error::Validation(_))));
    assert!(matches!(
        CorpusConfig::from_text("colour = blue\n", "c"),
        Err(Error::UnknownKey(k)) if k == "colour"
    ));
    assert!(CorpusConfig::from_text("seen_families = wavenet\n", "c").is_err());
}

#[test]
fn default_corpus_has_2000_clips() {
    assert_eq!(CorpusConfig::default().total_clips(), 2000);
    let cfg = CorpusConfig {
        clips_per_domain: 100,
        ..CorpusConfig::default()
    };
    let fakes_per_domain: usize = cfg.seen_counts().iter().map(|c| c.1).sum();
    assert_eq!(fakes_per_domain, 100);
}

fn clip(label: Label, domain: &str, v: f32) -> AudioClip {
    AudioClip {
        samples: vec![v; 8],
        sample_rate: SR,
        label,
        domain: domain.into(),
        clip_id: format!("{domain}-{v}"),
    }
}

#[test]
fn pair_sampler_pairs_real_with_fake() {
    let vocab: Vec<String> = ["real", "a", "b"].iter().map(|s| s.to_string()).collect();
    let mut clips = Vec::new();
    for i in 0..40 {
        clips.push(clip(Label::Real, "real", i as f32 * 0.01));
        clips.push(clip(
            Label::Fake,
            if i % 3 == 0 { "a" } else { "b" },
            -(i as f32) * 0.01,
        ));
    }
    let s = PairSampler::new(clips.clone(), &vocab, 16, 5).unwrap();
    assert_eq!(s.batches_per_epoch(), 2);
    let e0: Vec<PairBatch> = s.epoch(0).collect();
    assert_eq!(e0.len(), 2);
    for b in &e0 {
        assert_eq!(b.len(), 16);
        assert_eq!(b.x_i.len(), 16 * 8);
        for k in 0..16 {
            assert_ne!(b.labels_i[k], b.labels_j[k]);
            assert_eq!(b.labels_i[k] == Label::Real, b.domains_i[k] == 0);
        }
    }
    let again = PairSampler::new(clips.clone(), &vocab, 16, 5).unwrap();
    assert_eq!(again.epoch(0).collect::<Vec<_>>(), e0);
    assert_ne!(s.epoch(1).next().unwrap(), e0[0]);

    let only_real: Vec<AudioClip> = clips.into_iter().filter(|c| c.label == Label::Real).collect();
    assert!(PairSampler::new(only_real, &vocab, 16, 5).is_err());
}

#[test]
fn wav_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let x: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect();
    write_wav(&path, &x, 22_050).unwrap();
    let (y, sr) = read_wav(&path).unwrap();
    assert_eq!(sr, 22_050);
    assert_eq!(x, y);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(decode_wav(&bytes).unwrap().0, x);
    assert!(decode_wav(&bytes[..30]).is_err());
    // Found by the wav_decode fuzz target: rate and byte rate both zero.
    let mut zero_rate = bytes.clone();
    zero_rate[24..32].fill(0);
    let e = decode_wav(&zero_rate).unwrap_err().to_string();
    assert!(e.contains("0 Hz"), "{e}");
}

proptest! {
    #[test]
    fn manifest_csv_round_trips(
        paths in prop::collection::hash_set("[a-z0-9 ,\"/._-]{1,12}", 1..8),
        domains in prop::collection::vec("[a-z,\" ]{1,6}", 8),
    ) {
        let rows: Vec<ManifestRow> = paths
            .iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .zip(domains.iter().map(|d| d.trim()).filter(|d| !d.is_empty() && *d != REAL_DOMAIN))
            .enumerate()
            .map(|(i, (path, domain))| {
                let fake = i % 2 == 0;
                ManifestRow {
                    path,
                    label: if fake { Label::Fake } else { Label::Real },
                    domain: if fake { domain.to_string() } else { REAL_DOMAIN.to_string() },
                    split: Split::Test,
                    seen: Some(i % 3 == 0),
                }
            })
            .collect();
        prop_assume!(!rows.is_empty());
        let m = Manifest::new(rows, PathBuf::from(".")).unwrap();
        let back = parse_manifest(&m.to_csv(), "rt", PathBuf::from(".")).unwrap();
        prop_assert_eq!(back, m);
    }
}

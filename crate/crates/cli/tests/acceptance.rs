//! Acceptance report: one PASS/FAIL line per criterion. Each check uses
//! its own oracle rather than the library's internals. Exits nonzero when
//! any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{LN_2, PI};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Instant;

use embryogen_cli::{parse_config, Pipeline, StageName, StageStatus};
use embryogen_core::classify::{confidence_interval, f1_micro, macro_scores, mcc_multiclass, Confusion};
use embryogen_core::data::{
    filter_fragmentation, generate_toy_dataset, select_representative_frames, split_sequences, DatasetManifest,
    ImageRecord, Source, Split, Stage,
};
use embryogen_core::diffusion::{forward_diffuse, make_linear_schedule, train_latent_diffusion, DiffusionTrainConfig, LatentCodec};
use embryogen_core::fid::{frechet_distance, read_fid_csv, sqrtm_psd, GaussianStats};
use embryogen_core::gan::{build_discriminator, discriminator_loss, generator_loss, r1_accumulate, r1_penalty, Generator};
use embryogen_core::nn::{sigmoid, Module, Sequential, Tensor};
use embryogen_core::turing::{
    aggregate_results, create_pool, equal_weight, EvalPool, Judgment, PoolItem, Quota, TrueSource, Verdict,
    VerdictRecord,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn stats(mu: Vec<f64>, sigma: DMatrix<f64>) -> GaussianStats {
    GaussianStats {
        mu: DVector::from_vec(mu),
        sigma,
        n: 2,
    }
}

fn fid_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let d = if case < 100 { 1 } else { rng.random_range(2..=8) };
        let mu_a: Vec<f64> = (0..d).map(|_| 3.0 * normal(&mut rng)).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| 3.0 * normal(&mut rng)).collect();
        let sd_a: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..4.0)).collect();
        let sd_b: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..4.0)).collect();
        let expected: f64 = (0..d)
            .map(|i| (mu_a[i] - mu_b[i]).powi(2) + (sd_a[i] - sd_b[i]).powi(2))
            .sum();
        let diag = |s: &[f64]| DMatrix::from_diagonal(&DVector::from_iterator(d, s.iter().map(|v| v * v)));
        let a = stats(mu_a, diag(&sd_a));
        let b = stats(mu_b, diag(&sd_b));
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        let err = (got - expected).abs() / expected.max(1.0);
        worst = worst.max(err);
        ensure(err <= 1e-8, || format!("case {case}: {got} vs {expected}"))?;
        let back = frechet_distance(&b, &a).map_err(|e| e.to_string())?;
        ensure(back == got, || format!("case {case}: asymmetric {got} vs {back}"))?;
        // Full covariance for the identity check.
        let m = DMatrix::from_fn(d, d, |_, _| normal(&mut rng));
        let full = stats(vec![0.5; d], &m * m.transpose());
        let zero = frechet_distance(&full, &full).map_err(|e| e.to_string())?;
        ensure(zero == 0.0, || format!("case {case}: self distance {zero}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("200 cases, worst relative error {worst:.1e}, {secs:.2}s"))
}

fn sqrtm_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &n in &[1usize, 2, 3, 5, 8, 13, 21, 32, 48, 64] {
        for rank_deficient in [false, true] {
            let cols = if rank_deficient { (n / 2).max(1) } else { n + 3 };
            let b = DMatrix::from_fn(n, cols, |_, _| normal(&mut rng));
            let a = &b * b.transpose();
            let s = sqrtm_psd(&a).map_err(|e| e.to_string())?;
            let err = (&s * &s - &a).norm() / a.norm();
            worst = worst.max(err);
            count += 1;
            ensure(err <= 1e-6, || format!("{n}x{n} (rank {cols}): relative error {err:.2e}"))?;
        }
    }
    Ok(format!("{count} PSD matrices up to 64x64, worst relative error {worst:.1e}"))
}

fn diffusion_invariants() -> Outcome {
    for (steps, lo, hi) in [(1000, 1e-4, 0.02), (200, 1e-4, 0.05), (50, 1e-3, 0.2)] {
        let s = make_linear_schedule(steps, lo, hi).map_err(|e| e.to_string())?;
        ensure(s.alpha_bar.windows(2).all(|w| w[1] < w[0]), || format!("alpha_bar not decreasing for T={steps}"))?;
        ensure(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0), || format!("alpha_bar outside (0,1) for T={steps}"))?;
    }
    let sched = make_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let draws = 100_000;
    let mut variances = Vec::new();
    for t in [0usize, 250, 500, 999] {
        let x0: Vec<f64> = (0..draws).map(|_| normal(&mut rng)).collect();
        let eps: Vec<f64> = (0..draws).map(|_| normal(&mut rng)).collect();
        let xt = forward_diffuse(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
        let mean = xt.iter().sum::<f64>() / draws as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        ensure((var - 1.0).abs() <= 0.05, || format!("variance {var:.4} at t={t}"))?;
        variances.push(var);
    }

    const MODES: usize = 8;
    const SIGMA: f64 = 0.1;
    let center = |k: usize| {
        let a = 2.0 * PI * k as f64 / MODES as f64;
        (2.0 * a.cos(), 2.0 * a.sin())
    };
    let data: Vec<Vec<f64>> = (0..800)
        .map(|i| {
            let (cx, cy) = center(i % MODES);
            vec![cx + SIGMA * normal(&mut rng), cy + SIGMA * normal(&mut rng)]
        })
        .collect();
    let config = DiffusionTrainConfig {
        epochs: 300,
        batch_size: 64,
        learning_rate: 2e-3,
        steps: 100,
        beta_start: 1e-4,
        beta_end: 0.1,
        fid_interval: 300,
        seed: 7,
        widths: vec![128, 128, 64],
        time_dim: 16,
    };
    let started = Instant::now();
    let run = train_latent_diffusion(&data, LatentCodec::vector(2), &config).map_err(|e| e.to_string())?;
    let model = run.checkpoints.last().ok_or("no checkpoint")?;
    let train_secs = started.elapsed().as_secs_f64();
    ensure(train_secs <= 300.0, || format!("ring training took {train_secs:.0}s"))?;
    ensure(model.sample_latents(16, 5) == model.sample_latents(16, 5), || "same seed, different samples".into())?;
    ensure(model.sample_latents(16, 5) != model.sample_latents(16, 6), || "seed ignored".into())?;
    let samples = model.sample_latents(500, 1);
    let mut hits = [0usize; MODES];
    for s in &samples {
        for (k, h) in hits.iter_mut().enumerate() {
            let (cx, cy) = center(k);
            if ((s[0] - cx).powi(2) + (s[1] - cy).powi(2)).sqrt() <= 3.0 * SIGMA {
                *h += 1;
            }
        }
    }
    let covered = hits.iter().filter(|&&h| h > 0).count();
    ensure(covered >= 7, || format!("ring coverage {covered}/8 {hits:?}"))?;
    Ok(format!(
        "alpha_bar monotone; variance {:.3}..{:.3} over 1e5 draws; seeded sampler; ring {covered}/8 modes after {train_secs:.0}s",
        variances.iter().copied().fold(f64::INFINITY, f64::min),
        variances.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences on every `stride`-th parameter of `module`.
fn fd_check<M: Module + Clone>(module: &M, grads: &[f64], stride: usize, f: impl Fn(&M) -> f64) -> Result<(usize, f64), String> {
    let values = module.clone().flat_values();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in (0..values.len()).step_by(stride) {
        let mut plus = module.clone();
        let mut v = values.clone();
        v[i] += h;
        plus.load_flat(&v).map_err(|e| e.to_string())?;
        let mut minus = module.clone();
        v[i] -= 2.0 * h;
        minus.load_flat(&v).map_err(|e| e.to_string())?;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        if fd.abs().max(grads[i].abs()) < 1e-8 {
            continue;
        }
        let e = rel_err(fd, grads[i]);
        worst = worst.max(e);
        checked += 1;
        ensure(e <= 1e-4, || format!("parameter {i}: difference {fd} vs gradient {}", grads[i]))?;
    }
    Ok((checked, worst))
}

fn gan_oracle() -> Outcome {
    let g0 = generator_loss(&[0.0]);
    ensure((g0 - LN_2).abs() <= 1e-10, || format!("generator loss at 0: {g0}"))?;
    let d0 = discriminator_loss(&[0.0], &[0.0]);
    ensure((d0 - 2.0 * LN_2).abs() <= 1e-10, || format!("discriminator loss at 0: {d0}"))?;
    let r1 = r1_penalty(&Tensor::full(&[1, 1, 2, 2], 1.0), 10.0);
    ensure(r1 == 20.0, || format!("r1 hand case {r1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut gen = Generator::new(8, 2, &[6, 4], &mut rng);
    let disc = build_discriminator(&[4], &mut rng);
    let z = Tensor::randn(&[3, 8], &mut rng);
    let noise = ChaCha8Rng::seed_from_u64(15);
    let objective = |g: &Generator| {
        let mut r = noise.clone();
        generator_loss(disc.infer(&g.forward(&z, &mut r).0).data())
    };
    let mut r = noise.clone();
    let (img, cache) = gen.forward(&z, &mut r);
    let mut d = disc.clone();
    let (logits, trace) = d.forward(&img);
    let n = logits.data().len() as f64;
    let gx = d.backward(&trace, &logits.map(|l| -sigmoid(-l) / n));
    gen.zero_grad();
    gen.backward(&cache, &gx);
    let grads = gen.flat_grads();
    let (g_checked, g_worst) = fd_check(&gen, &grads, 3, objective)?;

    let mut disc = build_discriminator(&[4], &mut rng);
    let reals = Tensor::randn(&[3, 1, 8, 8], &mut rng);
    let penalty = |d: &Sequential| {
        let mut d = d.clone();
        let (l, tr) = d.forward(&reals);
        r1_penalty(&d.backward(&tr, &Tensor::full(l.shape(), 1.0)), 10.0)
    };
    disc.zero_grad();
    let p = r1_accumulate(&mut disc, &reals, 10.0);
    ensure((p - penalty(&disc)).abs() <= 1e-12, || "r1 value mismatch".into())?;
    let grads = disc.flat_grads();
    let (r_checked, r_worst) = fd_check(&disc, &grads, 1, penalty)?;
    Ok(format!(
        "ln 2 / 2 ln 2 / 20.0 exact; {g_checked} generator and {r_checked} R1 parameters, worst relative error {:.1e}",
        g_worst.max(r_worst)
    ))
}

/// Pearson correlation of one-hot truth and prediction vectors, summed over
/// classes, from an explicit list of samples.
fn brute_mcc(samples: &[(usize, usize)], k: usize) -> f64 {
    let n = samples.len() as f64;
    let cov = |a: &dyn Fn(&(usize, usize), usize) -> f64, b: &dyn Fn(&(usize, usize), usize) -> f64| {
        (0..k)
            .map(|c| {
                let ma = samples.iter().map(|s| a(s, c)).sum::<f64>() / n;
                let mb = samples.iter().map(|s| b(s, c)).sum::<f64>() / n;
                samples.iter().map(|s| (a(s, c) - ma) * (b(s, c) - mb)).sum::<f64>()
            })
            .sum::<f64>()
    };
    let truth = |s: &(usize, usize), c: usize| if s.0 == c { 1.0 } else { 0.0 };
    let pred = |s: &(usize, usize), c: usize| if s.1 == c { 1.0 } else { 0.0 };
    let xy = cov(&truth, &pred);
    let xx = cov(&truth, &truth);
    let yy = cov(&pred, &pred);
    if xx <= 0.0 || yy <= 0.0 {
        0.0
    } else {
        xy / (xx * yy).sqrt()
    }
}

/// Per-class F1 from sample counts, averaged over classes that occur in
/// truth or predictions.
fn brute_macro_f1(samples: &[(usize, usize)], k: usize) -> f64 {
    let mut total = 0.0;
    let mut active = 0;
    for c in 0..k {
        let tp = samples.iter().filter(|s| s.0 == c && s.1 == c).count() as f64;
        let fp = samples.iter().filter(|s| s.0 != c && s.1 == c).count() as f64;
        let fneg = samples.iter().filter(|s| s.0 == c && s.1 != c).count() as f64;
        if tp + fp + fneg == 0.0 {
            continue;
        }
        active += 1;
        total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let counts: Vec<Vec<u64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { rng.random_range(0..40) } else { rng.random_range(0..12) }).collect())
            .collect();
        let mut samples = Vec::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                samples.extend(std::iter::repeat_n((i, j), c as usize));
            }
        }
        if samples.is_empty() {
            continue;
        }
        let mcc = mcc_multiclass(&counts);
        let expected = brute_mcc(&samples, 5);
        worst = worst.max((mcc - expected).abs());
        ensure((mcc - expected).abs() <= 1e-12, || format!("case {case}: MCC {mcc} vs {expected}"))?;
        let conf = Confusion::from_counts(counts.clone()).map_err(|e| e.to_string())?;
        let f1 = macro_scores(&conf).f1;
        let expected = brute_macro_f1(&samples, 5);
        worst = worst.max((f1 - expected).abs());
        ensure((f1 - expected).abs() <= 1e-12, || format!("case {case}: macro F1 {f1} vs {expected}"))?;
    }
    for case in 0..50 {
        let per_class = rng.random_range(5u64..60);
        let counts: Vec<Vec<u64>> = (0..5)
            .map(|_| {
                let mut row = vec![0u64; 5];
                for _ in 0..per_class {
                    row[rng.random_range(0..5)] += 1;
                }
                row
            })
            .collect();
        let conf = Confusion::from_counts(counts).map_err(|e| e.to_string())?;
        let (micro, acc) = (f1_micro(&conf), conf.accuracy());
        ensure((micro - acc).abs() <= 1e-12, || format!("balanced case {case}: micro F1 {micro} vs accuracy {acc}"))?;
    }
    Ok(format!("200 random 5x5 matrices, worst deviation {worst:.1e}; balanced micro-F1 = accuracy"))
}

fn ci_rows() -> Outcome {
    let (lo, hi) = confidence_interval(68.88, 5.86, 1.96, 4);
    ensure((lo - 63.137).abs() <= 1e-3 && (hi - 74.623).abs() <= 1e-3, || format!("first row ({lo}, {hi})"))?;
    let (lo2, hi2) = confidence_interval(78.08, 2.844, 1.96, 4);
    ensure((lo2 - 75.297).abs() <= 5e-3 && (hi2 - 80.863).abs() <= 5e-3, || format!("last row ({lo2}, {hi2})"))?;
    Ok(format!("({lo:.3}, {hi:.3}) and ({lo2:.3}, {hi2:.3})"))
}

fn turing_aggregate() -> Outcome {
    let direct = equal_weight(&[0.344, 0.747]) * 100.0;
    ensure((direct - 54.55).abs() <= 1e-9, || format!("equal weight {direct}"))?;
    ensure((direct - 54.5).abs() <= 0.05 + 1e-9, || format!("{direct} does not round to 54.5"))?;
    // Same figure through the report path, with unequal category sizes so
    // that pooling would give a different answer.
    let quota = Quota::uniform(0, 50, 200);
    let mut items = Vec::new();
    for stage in Stage::ALL {
        for (source, n) in [(TrueSource::Gan, 50), (TrueSource::Ldm, 200)] {
            for i in 0..n {
                items.push(PoolItem {
                    image_id: format!("{source}-{stage}-{i}"),
                    true_source: source,
                    stage,
                    origin_id: format!("o-{source}-{stage}-{i}"),
                });
            }
        }
    }
    let pool = EvalPool {
        pool_id: "agg".into(),
        quota,
        items,
    };
    let (mut gan_left, mut ldm_left) = (86, 747);
    let verdicts: Vec<VerdictRecord> = pool
        .items
        .iter()
        .map(|it| {
            let left = if it.true_source == TrueSource::Gan { &mut gan_left } else { &mut ldm_left };
            let judgment = if *left > 0 {
                *left -= 1;
                Judgment::Fake
            } else {
                Judgment::Real
            };
            VerdictRecord {
                session_id: "s".into(),
                rater_id: "r".into(),
                verdict: Verdict {
                    image_id: it.image_id.clone(),
                    judgment,
                    regions: vec![],
                    comment: None,
                },
                submitted_at_ms: 0,
            }
        })
        .collect();
    let report = aggregate_results(&verdicts, &pool).map_err(|e| e.to_string())?;
    let eq = report.overall.synthetic_equal_weight.ok_or("no synthetic rate")? * 100.0;
    ensure((eq - 54.55).abs() <= 1e-9, || format!("report path {eq}"))?;
    let pooled = report.overall.synthetic.accuracy().unwrap_or(0.0) * 100.0;
    Ok(format!("equal weight of 34.4 and 74.7 = {eq:.2} (prints as 54.5); pooled would be {pooled:.2}"))
}

fn manifest_of(stage_counts: usize, source: Source) -> DatasetManifest {
    let records = Stage::ALL
        .iter()
        .flat_map(|&stage| {
            (0..stage_counts).map(move |i| {
                let id = format!("{source:?}-{stage}-{i}");
                ImageRecord::new(id.clone(), id.clone(), stage, source, format!("{id}.png"))
            })
        })
        .collect();
    DatasetManifest::new(records, "acceptance").expect("valid manifest")
}

fn pool_composition() -> Outcome {
    let real = manifest_of(120, Source::Toy);
    let gan = manifest_of(60, Source::SyntheticGan);
    let ldm = manifest_of(60, Source::SyntheticLdm);
    let pool = create_pool("ref", &real, &gan, &ldm, &Quota::reference(), 1).map_err(|e| e.to_string())?;
    let totals = (pool.count(TrueSource::Real), pool.count(TrueSource::Gan), pool.count(TrueSource::Ldm));
    ensure(totals == (500, 250, 250), || format!("totals {totals:?}"))?;
    for stage in Stage::ALL {
        let c = (
            pool.count_stage(stage, TrueSource::Real),
            pool.count_stage(stage, TrueSource::Gan),
            pool.count_stage(stage, TrueSource::Ldm),
        );
        ensure(c == (100, 50, 50), || format!("{stage}: {c:?}"))?;
    }
    let ids: BTreeSet<&str> = pool.items.iter().map(|i| i.image_id.as_str()).collect();
    ensure(ids.len() == 1000, || "duplicate image ids".into())?;
    let short = manifest_of(49, Source::SyntheticGan);
    ensure(create_pool("ref", &real, &short, &ldm, &Quota::reference(), 1).is_err(), || "short pool accepted".into())?;
    let mut tampered = pool.clone();
    tampered.items.pop();
    ensure(tampered.validate().is_err(), || "tampered pool validated".into())?;
    Ok("1000 items, 500/250/250 overall and 100/50/50 per stage; short pool and tampered pool rejected".into())
}

fn split_hygiene() -> Outcome {
    let mut records = Vec::new();
    for stage in Stage::ALL {
        records.extend(generate_toy_dataset(stage, 200, 0, 64).map_err(|e| e.to_string())?.into_iter().map(|s| s.record));
    }
    let corpus = DatasetManifest::new(records, "toy").map_err(|e| e.to_string())?;
    let kept = select_representative_frames(&filter_fragmentation(&corpus, 15.0));
    for seed in 0..100u64 {
        let split = split_sequences(&kept, 130, 20, seed).map_err(|e| e.to_string())?;
        let mut sides: BTreeMap<&str, BTreeSet<bool>> = BTreeMap::new();
        for r in split.records() {
            if r.split != Split::Unassigned {
                sides.entry(r.sequence_id.as_str()).or_default().insert(r.split == Split::Test);
            }
        }
        let leaked = sides.values().filter(|s| s.len() > 1).count();
        ensure(leaked == 0, || format!("seed {seed}: {leaked} sequences on both sides"))?;
        for stage in Stage::ALL {
            let count = |side| split.records().iter().filter(|r| r.stage == stage && r.split == side).count();
            ensure(count(Split::Train) == 130 && count(Split::Test) == 20, || format!("seed {seed}: {stage} quota"))?;
        }
    }
    Ok(format!("100 seeded splits of {} toy sequences, zero shared sequences", kept.len() / 5))
}

fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: Option<&str>) -> Result<(u16, Vec<u8>), String> {
    let mut s = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    let body = body.unwrap_or("");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or("no header end")?;
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status: u16 = head.split_whitespace().nth(1).and_then(|c| c.parse().ok()).ok_or("bad status line")?;
    let mut payload = raw[split + 4..].to_vec();
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        let mut out = Vec::new();
        let mut rest = &payload[..];
        loop {
            let nl = rest.windows(2).position(|w| w == b"\r\n").ok_or("bad chunk")?;
            let size = usize::from_str_radix(std::str::from_utf8(&rest[..nl]).map_err(|e| e.to_string())?.trim(), 16)
                .map_err(|e| e.to_string())?;
            if size == 0 {
                break;
            }
            out.extend_from_slice(&rest[nl + 2..nl + 2 + size]);
            rest = &rest[nl + 2 + size + 2..];
        }
        payload = out;
    }
    Ok((status, payload))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = parse_config(&format!("output_dir = \"{}\"\nbind = \"127.0.0.1:0\"\n", dir.path().join("out").display()))
        .map_err(|e| e.to_string())?;
    let seeds = config.classify.seeds.len();
    let pipeline = Pipeline::new(config).map_err(|e| e.to_string())?.verbose(true);
    let started = Instant::now();
    let outcomes = pipeline.run(&StageName::BATCH.into_iter().collect()).map_err(|e| e.to_string())?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    ensure(outcomes.iter().all(|o| o.status == StageStatus::Ran), || "a stage did not run".into())?;
    ensure(minutes <= 30.0, || format!("run took {minutes:.1} min"))?;

    let fid = read_fid_csv(&pipeline.stage_dir(StageName::Report).join("fid.csv")).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        for family in ["gan", "ldm"] {
            let n = fid.iter().filter(|r| r.stage == stage && r.family == family).count();
            ensure(n >= 2, || format!("{family} {stage}: FID history has {n} points"))?;
        }
    }
    let summary = pipeline.summary().map_err(|e| e.to_string())?;
    ensure(summary.selected.len() == 10, || format!("{} selected checkpoints", summary.selected.len()))?;
    let synthetic: usize = summary.synthetic_per_stage.values().sum();
    ensure(synthetic >= 500, || format!("{synthetic} synthetic images per stage"))?;
    ensure(seeds >= 3, || format!("{seeds} seeds"))?;
    ensure(!summary.sanity.is_empty(), || "no synthetic mixes in the grid".into())?;
    let band: Vec<String> = summary
        .sanity
        .iter()
        .map(|r| format!("({},{},{}) {:+.1}pp", r.spec.real_n, r.spec.gan_n, r.spec.ldm_n, r.delta * 100.0))
        .collect();
    ensure(summary.all_within_band, || format!("outside the ±10 pp band: {}", band.join(", ")))?;

    let (store, pool_id) = pipeline.prepare_service().map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(embryogen_turing::serve(listener, embryogen_turing::AppState::new(store), async {
        let _ = stopped.await;
    }));
    let served = (|| -> Result<usize, String> {
        let (code, body) = http(addr, "POST", "/sessions", Some(&format!("{{\"rater_id\":\"acceptance\",\"pool_id\":\"{pool_id}\"}}")))?;
        ensure(code == 201, || format!("create session: {code}"))?;
        let session: serde_json::Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let sid = session["session_id"].as_str().ok_or("no session id")?.to_string();
        let (code, body) = http(addr, "GET", &format!("/sessions/{sid}/next"), None)?;
        ensure(code == 200, || format!("next: {code}"))?;
        let next: serde_json::Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let image_id = next["image_id"].as_str().ok_or("no image id")?.to_string();
        let (code, png) = http(addr, "GET", &format!("/images/{image_id}"), None)?;
        ensure(code == 200 && png.starts_with(b"\x89PNG"), || format!("image: {code}"))?;
        Ok(next["total"].as_u64().unwrap_or(0) as usize)
    })();
    let _ = stop.send(());
    let _ = runtime.block_on(server);
    let total = served?;
    Ok(format!(
        "{minutes:.1} min on {} core(s); 10 FID histories and selections; {synthetic} synthetic per stage; {seeds} seeds, {}; pool of {total} served",
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        band.join(", ")
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fid-analytic-oracle", fid_oracle),
        ("matrix-sqrt-reconstruction", sqrtm_reconstruction),
        ("diffusion-invariants", diffusion_invariants),
        ("gan-loss-penalty-oracle", gan_oracle),
        ("metrics-oracle", metrics_oracle),
        ("confidence-interval-rows", ci_rows),
        ("turing-aggregation", turing_aggregate),
        ("pool-composition", pool_composition),
        ("split-hygiene", split_hygiene),
        ("end-to-end-toy-run", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

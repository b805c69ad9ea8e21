//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1–8 are properties and fail the target when red. Criteria 9–14
//! train full models on the synthetic variations; 11 and 12 are graded as
//! orderings and 14 as a trend, and none of them fails the target. Their
//! scale is chosen with `PERMIX_BENCH_SCALE` (`desk`, the default; `smoke`
//! for a quick run; `off` to skip them).

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use permix_core::pipeline::{IDX_IMAGES, IDX_LABELS};
use permix_core::transforms::analytic_transform;
use permix_core::{
    bm_e_step, bm_fit, complete_sample, evaluate, extract_edges, from_bytes, load_idx, pem_fit_complete,
    pem_responsibilities, per_class_indices, permutation_table, prepare_data, rotate_feature_map, run_train_task,
    to_bytes, train_greedy, BernoulliMixture, BinaryRows, ChannelLayout, CompleteBatch, DataConfig, Dataset,
    EdgeConfig, EmOptions, FeatureMap, GrayImage, GroupElement, GroupSpec, Interpolation, LayerReport, MapGrid, Model,
    Network, PemOptions, PermutationMixture, PreparedData, RunConfig, TrainOptions, Variation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances
const NORMALIZATION_TOL: f64 = 1e-12;
const MONOTONE_REL_TOL: f64 = 1e-9;
const MONOTONE_BUDGET_SECS: f64 = 10.0;
const REDUCTION_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-9;
const RECOVERY_MAD: f64 = 0.1;
const RECOVERY_MIN_PASSES: usize = 9;
const PLAIN_BASIC_MAX: f64 = 3.0;
const PLAIN_BG_IMG_MAX: f64 = 13.0;
const PLAIN_BG_RAND_MAX: f64 = 10.5;
const ORIENTED_ROT_MAX: f64 = 8.0;
const ORIENTED_BG_IMG_ROT_MAX: f64 = 30.0;
const SAMPLE_100_MAX: f64 = 4.5;
const SAMPLE_10_MAX: f64 = 12.0;
const RUN_BUDGET_SECS: f64 = 45.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, o: &Outcome) -> bool {
    println!(
        "criterion {id:>2} [{}] {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, density: f64) -> BinaryRows {
    let mut rows = BinaryRows::new(dim);
    for _ in 0..n {
        let on: Vec<u32> = (0..dim as u32).filter(|_| rng.random_bool(density)).collect();
        rows.push_indices(&on).unwrap();
    }
    rows
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, blocks: usize, dim: usize, density: f64) -> CompleteBatch {
    CompleteBatch::from_rows(blocks, random_rows(rng, n * blocks, dim, density)).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn random_pem(rng: &mut ChaCha8Rng, spec: GroupSpec, f: usize, dim: usize) -> PermutationMixture {
    let k = f * spec.order();
    let mu = (0..k * dim).map(|_| rng.random_range(0.02..0.98)).collect();
    PermutationMixture::new(spec, f, dim, random_simplex(rng, k), mu, 0.01).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, max_order: usize) -> GroupSpec {
    loop {
        let (r, t) = (rng.random_range(1..=max_order), rng.random_range(1..=2));
        if r * t <= max_order {
            return GroupSpec::new(r, t).unwrap();
        }
    }
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> GrayImage {
    GrayImage::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let expected = [
        [0, 1, 2, 3, 4, 5],
        [1, 2, 0, 4, 5, 3],
        [2, 0, 1, 5, 3, 4],
        [3, 4, 5, 0, 1, 2],
        [4, 5, 3, 1, 2, 0],
        [5, 3, 4, 2, 0, 1],
    ];
    let table = permutation_table(&GroupSpec::new(3, 2).unwrap());
    let mismatches = (0..6)
        .flat_map(|i| (0..6).map(move |j| (i, j)))
        .filter(|&(i, j)| table.get(i, j) != expected[i][j])
        .count();
    outcome(mismatches == 0, format!("{} of 36 entries match", 36 - mismatches))
}

fn row_sum_error(resp: &[f64], width: usize) -> f64 {
    resp.chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for call in 0..1000 {
        let dim = rng.random_range(1..40);
        let n = rng.random_range(1..20);
        if call % 2 == 0 {
            let k = rng.random_range(1..8);
            let mu = (0..k * dim).map(|_| rng.random_range(0.01..0.99)).collect();
            let model = BernoulliMixture::new(random_simplex(&mut rng, k), mu, dim, 0.01).unwrap();
            let (resp, _) = bm_e_step(&model, &random_rows(&mut rng, n, dim, 0.3)).unwrap();
            worst = worst.max(row_sum_error(&resp, k));
        } else {
            let spec = random_spec(&mut rng, 8);
            let f = rng.random_range(1..5);
            let model = random_pem(&mut rng, spec, f, dim);
            let (resp, _) = pem_responsibilities(&model, &random_batch(&mut rng, n, spec.order(), dim, 0.3)).unwrap();
            worst = worst.max(row_sum_error(&resp, f * spec.order()));
        }
    }
    outcome(
        worst < NORMALIZATION_TOL,
        format!("max |sum - 1| = {worst:.2e} over 1000 calls"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let em = EmOptions {
            seed,
            max_iters: 30,
            rel_tol: 0.0,
            ..EmOptions::default()
        };
        let (f, dim) = (rng.random_range(1..=4), rng.random_range(1..=10));
        let n = rng.random_range(f..=50);
        let (_, trace) = bm_fit(&random_rows(&mut rng, n, dim, 0.4), f, &em).unwrap();
        if !trace.is_monotone(MONOTONE_REL_TOL) {
            bad.push(format!("bm seed {seed}"));
        }
        let spec = random_spec(&mut rng, 6);
        let n = rng.random_range(f..=50);
        let batch = random_batch(&mut rng, n, spec.order(), dim, 0.4);
        let (_, trace) = pem_fit_complete(&batch, &spec, f, &PemOptions::new(em)).unwrap();
        if !trace.is_monotone(MONOTONE_REL_TOL) {
            bad.push(format!("pem seed {seed}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < MONOTONE_BUDGET_SECS,
        format!(
            "{} of 200 traces non-decreasing in {secs:.2}s {:?}",
            200 - bad.len(),
            bad
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for seed in 0..100u64 {
        let (f, dim) = (rng.random_range(1..=4), rng.random_range(1..=10));
        let n = rng.random_range(f..=40);
        let batch = random_batch(&mut rng, n, 1, dim, 0.4);
        let pm = random_pem(&mut rng, GroupSpec::trivial(), f, dim);
        let bm = BernoulliMixture::new(pm.pi().to_vec(), pm.mu().to_vec(), dim, 0.01).unwrap();
        let (r1, l1) = pem_responsibilities(&pm, &batch).unwrap();
        let (r2, l2) = bm_e_step(&bm, batch.rows()).unwrap();
        worst = worst.max(close(&r1, &r2)).max((l1 - l2).abs() / l2.abs().max(1.0));
        let em = EmOptions {
            seed,
            max_iters: 5,
            ..EmOptions::default()
        };
        let (pf, _) = pem_fit_complete(&batch, &GroupSpec::trivial(), f, &PemOptions::new(em)).unwrap();
        let (bf, _) = bm_fit(batch.rows(), f, &em).unwrap();
        worst = worst.max(close(pf.mu(), bf.mu())).max(close(pf.pi(), bf.pi()));
    }
    outcome(
        worst < REDUCTION_TOL,
        format!("max deviation {worst:.2e} over 100 instances"),
    )
}

/// Plain-probability enumeration over `(z, w)`: component `z` under
/// permutation `w` explains block `A(w, b)` of the sample with `μ_{z,b}`.
fn enumerate_posterior(model: &PermutationMixture, batch: &CompleteBatch, n: usize) -> Vec<f64> {
    let (f, p, dim) = (model.components(), model.order(), model.dim());
    let table = permutation_table(model.spec());
    let dense: Vec<Vec<bool>> = (0..p)
        .map(|b| {
            let mut v = vec![false; dim];
            for &d in batch.block(n, b) {
                v[d as usize] = true;
            }
            v
        })
        .collect();
    let mut joint = Vec::with_capacity(f * p);
    for z in 0..f {
        for w in 0..p {
            let mut lik = model.prior(z, w);
            for b in 0..p {
                let x = &dense[table.get(w, b)];
                for (d, &m) in model.block(z, b).iter().enumerate() {
                    lik *= if x[d] { m } else { 1.0 - m };
                }
            }
            joint.push(lik);
        }
    }
    let s: f64 = joint.iter().sum();
    joint.iter().map(|v| v / s).collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let spec = random_spec(&mut rng, 6);
        let (f, dim) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let n = rng.random_range(1..10);
        let model = random_pem(&mut rng, spec, f, dim);
        let batch = random_batch(&mut rng, n, spec.order(), dim, 0.4);
        let (resp, _) = pem_responsibilities(&model, &batch).unwrap();
        let k = f * spec.order();
        for i in 0..n {
            let oracle = enumerate_posterior(&model, &batch, i);
            for (a, b) in resp[i * k..(i + 1) * k].iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        worst < ORACLE_TOL,
        format!("max deviation {worst:.2e} over 200 instances"),
    )
}

fn stroke_image(rng: &mut ChaCha8Rng) -> GrayImage {
    let (a, len) = (rng.random_range(0.0..std::f64::consts::PI), rng.random_range(5.0..10.0));
    let (cy, cx) = (rng.random_range(11.0..17.0), rng.random_range(11.0..17.0));
    let (s, c) = a.sin_cos();
    GrayImage::from_fn(28, 28, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let along = dy * s + dx * c;
        let across = dy * c - dx * s;
        if along.abs() < len && across.abs() < 1.5 {
            1.0
        } else {
            0.0
        }
    })
}

fn criterion_6(digits: Option<&Dataset>) -> Outcome {
    let quarter = GroupElement {
        rotation: 1,
        polarity: 0,
    };
    let group = GroupSpec::new(4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (images, source): (Vec<GrayImage>, &str) = match digits {
        Some(ds) => (ds.images.iter().step_by(2).take(50).cloned().collect(), "digit images"),
        None => (
            (0..50).map(|_| stroke_image(&mut rng)).collect(),
            "synthetic strokes (no digit data)",
        ),
    };
    let net = Network::from_preset(&permix_core::build_preset("oriented").unwrap()).unwrap();
    let opts = TrainOptions {
        n_patches: 2000,
        em: EmOptions {
            max_iters: 3,
            ..EmOptions::default()
        },
    };
    let (net, _) = train_greedy(net, &images, &opts).unwrap();
    let mut net_failures = 0;
    for img in &images {
        let out = net.forward(img).unwrap();
        let turned = permix_core::transform_image(img, quarter, &group, Interpolation::Bilinear);
        if net.forward(&turned).unwrap() != net.quarter_turn_output(&out, 1, 28, 28).unwrap() {
            net_failures += 1;
        }
    }

    let cfg = EdgeConfig::default();
    let layout = ChannelLayout::edges();
    let mut edge_failures = 0;
    for _ in 0..1000 {
        let side = rng.random_range(6..20);
        let img = random_image(&mut rng, side);
        let e = extract_edges(&img, &cfg).unwrap();
        let turned = extract_edges(&permix_core::rotate_image(&img, 90.0, Interpolation::Nearest), &cfg).unwrap();
        let expected = rotate_feature_map(&e, 1, &group, &layout, &MapGrid::Pixels).unwrap();
        let inverted = extract_edges(&img.map(|v| 1.0 - v), &cfg).unwrap();
        let flipped = (0..side * side * 8).all(|i| {
            let (y, x, d) = (i / (side * 8), i / 8 % side, i % 8);
            inverted.get(y, x, d) == e.get(y, x, (d + 4) % 8)
        });
        if turned != expected || !flipped {
            edge_failures += 1;
        }
    }
    outcome(
        net_failures == 0 && edge_failures == 0,
        format!(
            "oriented network: {} of 50 {source} exact; edges: {} of 1000 random images exact",
            50 - net_failures,
            1000 - edge_failures
        ),
    )
}

fn criterion_7() -> Outcome {
    let spec = GroupSpec::new(4, 1).unwrap();
    let layout = ChannelLayout::parts(1, 1, 1);
    let base = FeatureMap::from_bits(4, 4, 1, vec![1, 1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0]).unwrap();
    let mut passed = 0;
    let mut devs = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut batch = CompleteBatch::new(4, 16);
        for _ in 0..60 {
            let r = rng.random_range(0..4);
            let mut shown = rotate_feature_map(&base, r, &spec, &layout, &MapGrid::Pixels).unwrap();
            for i in 0..16 {
                if rng.random_bool(0.03) {
                    let v = shown.get(i / 4, i % 4, 0);
                    shown.set(i / 4, i % 4, 0, !v);
                }
            }
            batch
                .push(&complete_sample(&shown, &spec, analytic_transform(spec, layout)).unwrap())
                .unwrap();
        }
        let em = EmOptions {
            seed,
            ..EmOptions::default()
        };
        let (model, _) = pem_fit_complete(&batch, &spec, 1, &PemOptions::new(em)).unwrap();
        let best = (0..4)
            .map(|w| {
                model
                    .block(0, w)
                    .iter()
                    .zip(base.bits())
                    .map(|(m, &b)| (m - b as f64).abs())
                    .sum::<f64>()
                    / 16.0
            })
            .fold(f64::INFINITY, f64::min);
        devs.push(format!("{best:.3}"));
        passed += usize::from(best < RECOVERY_MAD);
    }
    outcome(
        passed >= RECOVERY_MIN_PASSES,
        format!(
            "{passed} of 10 seeds within {RECOVERY_MAD} (deviations {})",
            devs.join(" ")
        ),
    )
}

fn tiny_data(digits: Option<&Dataset>) -> PreparedData {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = match digits {
        Some(ds) => ds.select(&(0..120).collect::<Vec<_>>(), ds.split),
        None => {
            let images = (0..120).map(|_| stroke_image(&mut rng)).collect();
            Dataset::new(
                images,
                (0..120).map(|i| (i % 10) as u8).collect(),
                permix_core::SplitTag::Train,
            )
            .unwrap()
        }
    };
    PreparedData {
        id: "tiny".into(),
        train: ds.clone(),
        valid: ds.clone(),
        test: ds,
        upright_train: None,
        clamped: 0,
    }
}

fn small_model(data: &PreparedData) -> Model {
    let mut cfg = RunConfig::new("plain", DataConfig::idx(".", Variation::Basic));
    cfg.n_patches = 1500;
    cfg.em.max_iters = 3;
    let preset = cfg.resolve_preset().unwrap();
    let net = Network::from_preset(&preset).unwrap();
    let opts = TrainOptions {
        n_patches: cfg.n_patches,
        em: cfg.em,
    };
    let (net, layers) = train_greedy(net, &data.train.images, &opts).unwrap();
    run_train_task(net, layers, &cfg, data, &preset).unwrap().0
}

fn criterion_8(digits: Option<&Dataset>) -> Outcome {
    let data = tiny_data(digits);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = pool.install(|| (small_model(&data), small_model(&data)));
    let bytes = to_bytes(&a).unwrap();
    let back = from_bytes(&bytes, "memory").unwrap();
    let round_trip = back == a && to_bytes(&back).unwrap() == bytes;
    let identical = to_bytes(&b).unwrap() == bytes;
    outcome(
        round_trip && identical,
        format!(
            "round trip exact: {round_trip}; single-thread retrain byte-identical: {identical} ({} bytes)",
            bytes.len()
        ),
    )
}

// Benchmarks

#[derive(Clone, Copy)]
struct Scale {
    name: &'static str,
    train: usize,
    valid: usize,
    test: usize,
    patches: usize,
}

const DESK: Scale = Scale {
    name: "desk",
    train: 7000,
    valid: 1000,
    test: 2000,
    patches: 100_000,
};

const SMOKE: Scale = Scale {
    name: "smoke",
    train: 600,
    valid: 100,
    test: 200,
    patches: 5000,
};

struct Bench {
    dir: std::path::PathBuf,
    scale: Scale,
}

struct Trained {
    net: Network,
    layers: Vec<LayerReport>,
    data: PreparedData,
    secs: f64,
}

impl Bench {
    fn config(&self, preset: &str, variation: Variation) -> RunConfig {
        let mut data = DataConfig::idx(&self.dir, variation);
        (data.train, data.valid, data.test) = (self.scale.train, self.scale.valid, self.scale.test);
        let mut cfg = RunConfig::new(preset, data);
        cfg.n_patches = self.scale.patches;
        cfg
    }

    fn features(&self, preset: &str, variation: Variation) -> Trained {
        let start = Instant::now();
        let cfg = self.config(preset, variation);
        let data = prepare_data(&cfg.data).unwrap();
        let net = Network::from_preset(&cfg.resolve_preset().unwrap()).unwrap();
        let opts = TrainOptions {
            n_patches: cfg.n_patches,
            em: cfg.em,
        };
        let (net, layers) = train_greedy(net, &data.train.images, &opts).unwrap();
        Trained {
            net,
            layers,
            data,
            secs: start.elapsed().as_secs_f64(),
        }
    }

    /// Test error in percent and wall time of the whole run.
    fn task(&self, t: &Trained, preset: &str, variation: Variation, per_class: Option<usize>) -> (f64, f64) {
        let start = Instant::now();
        let mut cfg = self.config(preset, variation);
        cfg.data.per_class = per_class;
        let preset = cfg.resolve_preset().unwrap();
        let (model, _) = run_train_task(t.net.clone(), t.layers.clone(), &cfg, &t.data, &preset).unwrap();
        let err = evaluate(&model, &t.data.test).unwrap().error_rate;
        let secs = t.secs + start.elapsed().as_secs_f64();
        println!(
            "    {preset_name} on {} ({} labeled): {err:.2}% test error, {secs:.0}s",
            variation.name(),
            per_class.map_or(t.data.train.len(), |k| 10 * k),
            preset_name = preset.name
        );
        (err, secs)
    }
}

fn timed(pass: bool, secs: &[f64]) -> bool {
    pass && secs.iter().all(|&s| s < RUN_BUDGET_SECS)
}

fn benchmarks(bench: &Bench) -> Vec<(usize, &'static str, Outcome)> {
    let mut out = Vec::new();
    println!("benchmarks at {} scale", bench.scale.name);

    let mut plain = Vec::new();
    let mut svm = Vec::new();
    let mut basic_net = None;
    for v in [Variation::Basic, Variation::BgRand, Variation::BgImg] {
        let t = bench.features("plain", v);
        plain.push(bench.task(&t, "plain", v, None));
        svm.push(bench.task(&t, "plain-svm", v, None));
        if v == Variation::Basic {
            basic_net = Some(t);
        }
    }
    let (b, r, i) = (plain[0], plain[1], plain[2]);
    out.push((
        9,
        "plain on basic",
        outcome(
            timed(b.0 <= PLAIN_BASIC_MAX, &[b.1]),
            format!("{:.2}% (limit {PLAIN_BASIC_MAX}%)", b.0),
        ),
    ));
    out.push((
        10,
        "plain on bg-img and bg-rand",
        outcome(
            timed(i.0 <= PLAIN_BG_IMG_MAX && r.0 <= PLAIN_BG_RAND_MAX, &[i.1, r.1]),
            format!(
                "bg-img {:.2}% (limit {PLAIN_BG_IMG_MAX}%), bg-rand {:.2}% (limit {PLAIN_BG_RAND_MAX}%)",
                i.0, r.0
            ),
        ),
    ));
    let names = ["basic", "bg-rand", "bg-img"];
    let better = plain.iter().zip(&svm).all(|(p, s)| s.0 < p.0);
    let detail = names
        .iter()
        .zip(plain.iter().zip(&svm))
        .map(|(n, (p, s))| format!("{n} {:.2}% vs {:.2}%", s.0, p.0))
        .collect::<Vec<_>>()
        .join(", ");
    out.push((
        11,
        "plain-svm beats plain",
        outcome(timed(better, &svm.iter().map(|s| s.1).collect::<Vec<_>>()), detail),
    ));

    let rot_plain = bench.task(&bench.features("plain", Variation::Rot), "plain", Variation::Rot, None);
    let rot_oriented = bench.task(
        &bench.features("oriented", Variation::Rot),
        "oriented",
        Variation::Rot,
        None,
    );
    out.push((
        12,
        "oriented on rot",
        outcome(
            timed(rot_oriented.0 < rot_plain.0, &[rot_oriented.1, rot_plain.1]),
            format!(
                "{:.2}% vs plain {:.2}% (ordering graded; absolute limit {ORIENTED_ROT_MAX}% {})",
                rot_oriented.0,
                rot_plain.0,
                if rot_oriented.0 <= ORIENTED_ROT_MAX {
                    "met"
                } else {
                    "missed"
                }
            ),
        ),
    ));
    let v = Variation::BgImgRot;
    let bir = bench.task(&bench.features("oriented", v), "oriented", v, None);
    out.push((
        13,
        "oriented on bg-img-rot",
        outcome(
            timed(bir.0 <= ORIENTED_BG_IMG_ROT_MAX, &[bir.1]),
            format!("{:.2}% (limit {ORIENTED_BG_IMG_ROT_MAX}%)", bir.0),
        ),
    ));

    let t = basic_net.expect("basic network trained above");
    let most = t.data.train.class_counts().into_iter().min().unwrap_or(0).min(1000);
    let sizes = [most, 100.min(most), 10.min(most)];
    let errs: Vec<f64> = sizes
        .iter()
        .map(|&k| bench.task(&t, "plain", Variation::Basic, Some(k)).0)
        .collect();
    let trend = errs[0] < errs[1] && errs[1] < errs[2];
    out.push((
        14,
        "small-sample trend",
        outcome(
            trend,
            format!(
                "{}/class {:.2}%, {}/class {:.2}% (limit {SAMPLE_100_MAX}% {}), {}/class {:.2}% (limit {SAMPLE_10_MAX}% {}); trend graded, increasing: {trend}",
                sizes[0],
                errs[0],
                sizes[1],
                errs[1],
                if errs[1] <= SAMPLE_100_MAX { "met" } else { "missed" },
                sizes[2],
                errs[2],
                if errs[2] <= SAMPLE_10_MAX { "met" } else { "missed" },
            ),
        ),
    ));
    out
}

fn load_digits(dir: &Path) -> Option<Dataset> {
    let ds = load_idx(&dir.join(IDX_IMAGES), &dir.join(IDX_LABELS)).ok()?;
    // the digit file may be sorted by class
    let idx = per_class_indices(&ds, 12, 0).ok()?;
    Some(ds.select(&idx, ds.split))
}

fn main() -> ExitCode {
    let dir = permix_core::default_data_dir();
    let digits = load_digits(&dir);
    let mut ok = true;
    ok &= report(1, "permutation table R=3 T=2", &criterion_1());
    ok &= report(2, "responsibility normalization", &criterion_2());
    ok &= report(3, "EM monotonicity", &criterion_3());
    ok &= report(4, "trivial-group reduction", &criterion_4());
    ok &= report(5, "enumeration oracle", &criterion_5());
    ok &= report(
        6,
        "quarter-turn and polarity equivariance",
        &criterion_6(digits.as_ref()),
    );
    ok &= report(7, "synchronization recovery", &criterion_7());
    ok &= report(
        8,
        "serialization and deterministic retrain",
        &criterion_8(digits.as_ref()),
    );

    let scale = match std::env::var("PERMIX_BENCH_SCALE").as_deref() {
        Ok("off") => None,
        Ok("smoke") => Some(SMOKE),
        _ => Some(DESK),
    };
    match (scale, &digits) {
        (Some(_), _) if !ok => println!("criteria 9-14 [SKIPPED] property suite is red"),
        (None, _) => println!("criteria 9-14 [SKIPPED] PERMIX_BENCH_SCALE=off"),
        (Some(_), None) => println!("criteria 9-14 [SKIPPED] no digit data under {}", dir.display()),
        (Some(scale), Some(_)) => {
            let bench = Bench { dir, scale };
            let results = benchmarks(&bench);
            for (id, name, o) in &results {
                report(*id, name, o);
            }
            println!("criteria 9-14 run on the synthetic variations and do not fail this target");
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance suite. Each test prints one `criterion N: PASS/FAIL`
//! line and asserts its conditions; heavyweight artifacts (trained models)
//! are shared between criteria through lazily initialized fixtures.

use std::sync::OnceLock;
use std::time::Instant;

use tnet_core::analysis::{compress, compression_sweep, entropy_map, feature_entropy};
use tnet_core::classifier::{TNClassifier, Topology};
use tnet_core::encoding::{
    encode_sample, generate_synthetic, load_dataset, save_dataset, split_dataset, Dataset,
};
use tnet_core::network::{build_mps, build_ttn, TensorNetwork};
use tnet_core::persistence::{load_model, save_model};
use tnet_core::poison::{
    default_background_mask, poison_background, poison_single_pixel, PoisonSpec,
};
use tnet_core::tensor::{svd_split, DenseTensor};
use tnet_core::trainer::{init_model, train, MergedEdge, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// shared desk-scale experiment fixtures

const SCALE_N: usize = 5715;
const SCALE_CLASSES: usize = 8;
const SCALE_SIDE: usize = 16;
const SCALE_NOISE: f64 = 0.02;
const SCALE_DATA_SEED: u64 = 42;
const SCALE_SPLIT_SEED: u64 = 7;
const POISON_PIXEL: usize = 17; // (1, 1): background for every template
const PIXEL_SEED: u64 = 99;
const SPECKLE_SEED: u64 = 123;
const MASK_EXTENT: usize = 4; // speckle everything outside the central 8x8
// strong enough that the shortcut wins over the target features
const SPECKLE_VARIANCE: f64 = 0.5;

fn scale_config() -> TrainConfig {
    TrainConfig {
        max_bond_dim: 16,
        n_sweeps: 10,
        learning_rate: 0.1,
        batch_size: 250,
        truncation_eps: 1e-9,
        seed: 0,
        patience: None,
    }
}

fn scale_data() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let ds = generate_synthetic(
            SCALE_N,
            SCALE_CLASSES,
            SCALE_SIDE,
            SCALE_SIDE,
            SCALE_NOISE,
            SCALE_DATA_SEED,
        )
        .unwrap();
        let (tr, te) = split_dataset(&ds, 4000.0 / SCALE_N as f64, SCALE_SPLIT_SEED).unwrap();
        assert_eq!((tr.len(), te.len()), (4000, 1715));
        (tr, te)
    })
}

fn scale_init() -> TNClassifier {
    init_model(
        Topology::Ttn,
        SCALE_SIDE * SCALE_SIDE,
        SCALE_CLASSES,
        8,
        1,
        SCALE_SIDE,
        SCALE_SIDE,
    )
    .unwrap()
}

struct Trained {
    model: TNClassifier,
    report: TrainReport,
    secs: f64,
}

fn clean_trained() -> &'static Trained {
    static M: OnceLock<Trained> = OnceLock::new();
    M.get_or_init(|| {
        let (tr, te) = scale_data();
        let t0 = Instant::now();
        let (model, report) = train(&scale_init(), tr, te, &scale_config()).unwrap();
        Trained { model, report, secs: t0.elapsed().as_secs_f64() }
    })
}

/// Pixel-poisoned train/test pair plus the model trained on the poisoned
/// train set.
fn pixel_trained() -> &'static (Trained, Dataset) {
    static M: OnceLock<(Trained, Dataset)> = OnceLock::new();
    M.get_or_init(|| {
        let (tr, te) = scale_data();
        let spec = PoisonSpec::single_pixel(POISON_PIXEL, 1e-4, PIXEL_SEED, SCALE_CLASSES);
        let ptr = poison_single_pixel(tr, &spec).unwrap();
        let pte = poison_single_pixel(te, &spec).unwrap();
        let t0 = Instant::now();
        let (model, report) = train(&scale_init(), &ptr, &pte, &scale_config()).unwrap();
        (
            Trained { model, report, secs: t0.elapsed().as_secs_f64() },
            pte,
        )
    })
}

fn speckle_trained() -> &'static Trained {
    static M: OnceLock<Trained> = OnceLock::new();
    M.get_or_init(|| {
        let (tr, te) = scale_data();
        let mask = default_background_mask(SCALE_SIDE, SCALE_SIDE, MASK_EXTENT).unwrap();
        let spec = PoisonSpec::background_speckle(mask, SPECKLE_VARIANCE, SPECKLE_SEED, SCALE_CLASSES);
        let str_ = poison_background(tr, &spec).unwrap();
        let ste = poison_background(te, &spec).unwrap();
        let t0 = Instant::now();
        let (model, report) = train(&scale_init(), &str_, &ste, &scale_config()).unwrap();
        Trained { model, report, secs: t0.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------------------
// helpers

fn report_criterion(n: usize, what: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("criterion {n}: PASS — {what}");
    } else {
        println!("criterion {n}: FAIL — {what}: {}", failures.join("; "));
    }
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn random_small_model(rng: &mut ChaCha8Rng, trial: u64) -> TNClassifier {
    let ttn = rng.gen_bool(0.5);
    let n: usize = if ttn {
        if rng.gen_bool(0.5) { 4 } else { 8 }
    } else {
        rng.gen_range(4..=8)
    };
    let chi = rng.gen_range(2..=4);
    let c = rng.gen_range(2..=4);
    let net = if ttn {
        build_ttn(n, 2, chi, c, 1000 + trial).unwrap()
    } else {
        build_mps(n, &vec![2; n], chi, c, n / 2, 1000 + trial).unwrap()
    };
    TNClassifier {
        net: net.normalized(),
        permutation: (0..n).collect(),
        n_classes: c,
        height: 1,
        width: n,
        topology: if ttn { Topology::Ttn } else { Topology::Mps },
    }
}

/// Score vector from the fully contracted tensor and an explicitly built
/// product-state feature vector — the brute-force route.
fn brute_force_scores(model: &TNClassifier, locals: &[[f64; 2]]) -> Vec<f64> {
    let full = model.net.full_contract().unwrap();
    let n = locals.len();
    let c = model.n_classes;
    let mut scores = vec![0.0; c];
    for idx in 0..(1usize << n) {
        let mut phi = 1.0;
        for (f, loc) in locals.iter().enumerate() {
            phi *= loc[(idx >> (n - 1 - f)) & 1];
        }
        for (cc, s) in scores.iter_mut().enumerate() {
            *s += phi * full.data()[idx * c + cc];
        }
    }
    scores
}

fn full_tensor_of(net: &TensorNetwork) -> DenseTensor {
    net.full_contract().unwrap()
}

fn entropy_of_spectrum(s: &[f64]) -> f64 {
    let total: f64 = s.iter().map(|a| a * a).sum();
    let mut h = 0.0;
    for a in s {
        let p = a * a / total;
        if p >= 1e-15 {
            h -= p * p.ln();
        }
    }
    h.max(0.0)
}

// ---------------------------------------------------------------------------
// criteria

#[test]
fn criterion_1_forward_matches_brute_force() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let model = random_small_model(&mut rng, trial);
        let n = model.n_features();
        let img: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let enc = encode_sample(&img, &model.permutation).unwrap();
        let fast = model.forward(&enc).unwrap();
        let slow = brute_force_scores(&model, &enc.locals);
        let scale = slow.iter().map(|x| x.abs()).fold(1e-30, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    if worst > 1e-10 {
        failures.push(format!("worst relative error {worst:.3e} > 1e-10"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("took {secs:.1}s, budget 10s"));
    }
    report_criterion(
        1,
        &format!("forward equals brute-force contraction on 50 models (worst rel err {worst:.2e}, {secs:.2}s)"),
        &failures,
    );
}

#[test]
fn criterion_2_schmidt_and_entropy_match_full_svd() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let net = build_ttn(8, 2, 3, 3, 2000 + seed).unwrap().normalized();
        let model = TNClassifier {
            net: net.clone(),
            permutation: (0..8).collect(),
            n_classes: 3,
            height: 1,
            width: 8,
            topology: Topology::Ttn,
        };
        let full = full_tensor_of(&net);
        // every internal link: local Schmidt spectrum vs matricized SVD of
        // the bipartition the link cuts
        for l in net.internal_links() {
            let local = net.schmidt_spectrum(l).unwrap();
            let left_axes = bipartition_axes(&net, l);
            let (_, s, _) = svd_split(&full, &left_axes).unwrap();
            let nz = |v: &[f64]| -> Vec<f64> { v.iter().cloned().filter(|x| *x > 1e-12).collect() };
            let (a, b) = (nz(&local.coefficients), nz(&s));
            if a.len() != b.len() {
                failures.push(format!("seed {seed} link {l}: rank {} vs {}", a.len(), b.len()));
                continue;
            }
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
        for k in 0..8 {
            let fast = feature_entropy(&model, k).unwrap();
            let (_, s, _) = svd_split(&full, &[k]).unwrap();
            worst = worst.max((fast - entropy_of_spectrum(&s)).abs());
        }
    }
    if worst > 1e-8 {
        failures.push(format!("worst deviation {worst:.3e} > 1e-8"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 30.0 {
        failures.push(format!("took {secs:.1}s, budget 30s"));
    }
    report_criterion(
        2,
        &format!("Schmidt spectra and feature entropies match full-tensor SVD on 20 TTNs (worst dev {worst:.2e}, {secs:.2}s)"),
        &failures,
    );
}

/// Open-link axes on one side of the bipartition an internal link induces.
fn bipartition_axes(net: &TensorNetwork, link: tnet_core::network::LinkId) -> Vec<usize> {
    use tnet_core::network::Endpoint;
    let (a, b) = match net.link(link).endpoints {
        (Endpoint::Node(a), Endpoint::Node(b)) => (a, b),
        _ => unreachable!("internal link"),
    };
    // collect nodes on a's side by a DFS that never crosses `link`
    let mut side = vec![false; net.n_nodes()];
    let mut stack = vec![a];
    side[a] = true;
    while let Some(u) = stack.pop() {
        for (l, v) in net.neighbors(u) {
            if l != link && !side[v] {
                side[v] = true;
                stack.push(v);
            }
        }
    }
    let _ = b;
    net.open_links()
        .iter()
        .enumerate()
        .filter(|&(_, &ol)| {
            let (node, _) = net.open_link_attachment(ol).unwrap();
            side[node]
        })
        .map(|(axis, _)| axis)
        .collect()
}

#[test]
fn criterion_3_truncation_error_law() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut worst_single = 0.0f64;
    for seed in 0..20u64 {
        let model = random_small_model(&mut ChaCha8Rng::seed_from_u64(3000 + seed), seed);
        let net = model.net.clone();
        let full_before = full_tensor_of(&net);
        for eps in [1e-6, 1e-4, 1e-2] {
            // single-link law: distortion equals the discarded weight
            for l in net.internal_links() {
                let (truncated, discarded, _) = net.truncate_link_detailed(l, eps, None).unwrap();
                let full_after = full_tensor_of(&truncated);
                let d2: f64 = full_before
                    .data()
                    .iter()
                    .zip(full_after.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                worst_single = worst_single.max((d2 - discarded).abs());
            }
            // whole-model law: total distortion bounded by L * eps
            let n_links = net.internal_links().len();
            let (compressed, _) = compress(&model, eps).unwrap();
            let full_after = full_tensor_of(&compressed.net);
            let d2: f64 = full_before
                .data()
                .iter()
                .zip(full_after.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d2 > n_links as f64 * eps + 1e-10 {
                failures.push(format!("seed {seed} eps {eps:.0e}: whole-model distortion {d2:.3e}"));
            }
        }
    }
    if worst_single > 1e-10 {
        failures.push(format!("single-link law violated by {worst_single:.3e} > 1e-10"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 30.0 {
        failures.push(format!("took {secs:.1}s, budget 30s"));
    }
    report_criterion(
        3,
        &format!("truncation distortion equals discarded weight (worst dev {worst_single:.2e}) and L*eps bounds hold ({secs:.2}s)"),
        &failures,
    );
}

#[test]
fn criterion_4_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    for trial in 0..10u64 {
        let model = init_model(Topology::Mps, 3, 2 + (trial as usize % 2), 3, trial, 1, 3).unwrap();
        let images: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let labels: Vec<u16> = (0..4).map(|_| rng.gen_range(0..model.n_classes) as u16).collect();
        for link in model.net.internal_links() {
            let edge = MergedEdge::new(&model, link).unwrap();
            let m0 = edge.merged().clone();
            let grad = edge.batch_gradient(&m0, &images, &labels).unwrap();
            let h = 1e-5;
            for i in 0..m0.len() {
                let mut plus = m0.clone();
                plus.data_mut()[i] += h;
                let mut minus = m0.clone();
                minus.data_mut()[i] -= h;
                let fd = (edge.batch_loss(&plus, &images, &labels).unwrap()
                    - edge.batch_loss(&minus, &images, &labels).unwrap())
                    / (2.0 * h);
                let rel = (grad.data()[i] - fd).abs() / (1.0 + fd.abs());
                worst = worst.max(rel);
            }
        }
    }
    if worst > 1e-4 {
        failures.push(format!("worst relative deviation {worst:.3e} > 1e-4"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("took {secs:.1}s, budget 10s"));
    }
    report_criterion(
        4,
        &format!("merged-tensor gradients match central finite differences on 10 instances (worst {worst:.2e}, {secs:.2}s)"),
        &failures,
    );
}

#[test]
fn criterion_5_clean_training_accuracy() {
    let trained = clean_trained();
    let (_, te) = scale_data();
    let acc = trained.model.evaluate(te).unwrap().accuracy;
    let mut failures = Vec::new();
    if acc < 0.95 {
        failures.push(format!("test accuracy {acc:.4} < 0.95"));
    }
    if trained.report.train_loss.len() > 10 {
        failures.push("more than 10 sweeps".into());
    }
    if trained.secs >= 300.0 {
        failures.push(format!("training took {:.0}s, budget 300s", trained.secs));
    }
    report_criterion(
        5,
        &format!("clean TTN chi<=16 reaches test accuracy {acc:.4} in <=10 sweeps ({:.0}s)", trained.secs),
        &failures,
    );
}

#[test]
fn criterion_6_pixel_poison_detection() {
    let t0 = Instant::now();
    let (trained, poisoned_test) = pixel_trained();
    let (_, clean_test) = scale_data();
    let mut failures = Vec::new();

    let map = entropy_map(&trained.model).unwrap();
    let (argmax, top) = map.argmax();
    let mut sorted = map.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    if argmax != POISON_PIXEL {
        failures.push(format!("entropy argmax {argmax}, expected pixel {POISON_PIXEL}"));
    }
    if top < 5.0 * median {
        failures.push(format!("top entropy {top:.4} < 5x median {median:.4}"));
    }

    let acc_poisoned = trained.model.evaluate(poisoned_test).unwrap().accuracy;
    let acc_clean = trained.model.evaluate(clean_test).unwrap().accuracy;
    let gap = acc_poisoned - acc_clean;
    if gap < 0.02 {
        failures.push(format!("accuracy gap {gap:.4} < 0.02"));
    }
    let secs = trained.secs + t0.elapsed().as_secs_f64();
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0}s, budget 600s"));
    }
    report_criterion(
        6,
        &format!("pixel attack detected: argmax {argmax}, top/median {:.1}, accuracy gap {gap:+.4} ({secs:.0}s)", top / median.max(1e-12)),
        &failures,
    );
}

#[test]
fn criterion_7_speckle_poison_detection() {
    let t0 = Instant::now();
    let speckle = speckle_trained();
    let clean = clean_trained();
    let (pixel, _) = pixel_trained();
    let (_, clean_test) = scale_data();
    let mut failures = Vec::new();

    let map = entropy_map(&speckle.model).unwrap();
    let mask = default_background_mask(SCALE_SIDE, SCALE_SIDE, MASK_EXTENT).unwrap();
    let in_mask = {
        let mut v = vec![false; SCALE_SIDE * SCALE_SIDE];
        for &i in &mask {
            v[i] = true;
        }
        v
    };
    let mean = |pred: &dyn Fn(usize) -> bool| {
        let vals: Vec<f64> = (0..map.values.len())
            .filter(|&i| pred(i))
            .map(|i| map.values[i])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mask_mean = mean(&|i| in_mask[i]);
    let target_mean = mean(&|i| !in_mask[i]);
    if mask_mean < 2.0 * target_mean {
        failures.push(format!(
            "mask mean entropy {mask_mean:.4} < 2x target mean {target_mean:.4}"
        ));
    }

    let clean_acc = clean.model.evaluate(clean_test).unwrap().accuracy;
    let pixel_drop = clean_acc - pixel.model.evaluate(clean_test).unwrap().accuracy;
    let speckle_drop = clean_acc - speckle.model.evaluate(clean_test).unwrap().accuracy;
    if speckle_drop <= pixel_drop {
        failures.push(format!(
            "speckle drop {speckle_drop:.4} not above pixel drop {pixel_drop:.4}"
        ));
    }
    let secs = speckle.secs + t0.elapsed().as_secs_f64();
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0}s, budget 600s"));
    }
    report_criterion(
        7,
        &format!("speckle attack detected: mask/target entropy {:.2}, drops {speckle_drop:.4} > {pixel_drop:.4} ({secs:.0}s)", mask_mean / target_mean.max(1e-12)),
        &failures,
    );
}

#[test]
fn criterion_8_compression_tradeoff() {
    let t0 = Instant::now();
    let trained = clean_trained();
    let (_, te) = scale_data();
    let mut failures = Vec::new();
    let eps_list = [0.0, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1];
    let reports = compression_sweep(&trained.model, &eps_list, te).unwrap();
    for w in reports.windows(2) {
        if w[1].params_after > w[0].params_after {
            failures.push(format!(
                "params increased along grid: {} -> {}",
                w[0].params_after, w[1].params_after
            ));
        }
    }
    let lossless = reports.iter().any(|r| {
        r.eps > 0.0 && r.accuracy_after == r.accuracy_before && r.ratio < 1.0
    });
    if !lossless {
        failures.push("no eps > 0 with zero accuracy loss and ratio < 1".into());
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 300.0 {
        failures.push(format!("took {secs:.0}s, budget 300s"));
    }
    let best = reports
        .iter()
        .filter(|r| r.eps > 0.0 && r.accuracy_after == r.accuracy_before)
        .map(|r| r.ratio)
        .fold(1.0f64, f64::min);
    report_criterion(
        8,
        &format!("eps sweep lossless down to ratio {best:.3}, params monotone ({secs:.0}s)"),
        &failures,
    );
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();

    // dataset determinism + file round trip
    let d1 = generate_synthetic(64, 4, 8, 8, 0.3, 5).unwrap();
    let d2 = generate_synthetic(64, 4, 8, 8, 0.3, 5).unwrap();
    if d1.images != d2.images || d1.labels != d2.labels {
        failures.push("synthetic dataset not deterministic".into());
    }
    let dpath = dir.path().join("d.tnds");
    save_dataset(&d1, &dpath).unwrap();
    let d3 = load_dataset(&dpath).unwrap();
    let q = |im: &[Vec<f64>]| -> Vec<f32> {
        im.iter().flatten().map(|&x| x as f32).collect()
    };
    if q(&d3.images) != q(&d1.images) || d3.labels != d1.labels {
        failures.push("dataset file round trip not exact".into());
    }

    // training determinism, bitwise, including reports
    let (tr, te) = split_dataset(&d1, 0.75, 2).unwrap();
    let cfg = TrainConfig {
        max_bond_dim: 4,
        n_sweeps: 2,
        learning_rate: 0.1,
        batch_size: 16,
        truncation_eps: 1e-10,
        seed: 9,
        patience: None,
    };
    let model0 = init_model(Topology::Ttn, 64, 4, 4, 3, 8, 8).unwrap();
    let (m1, r1) = train(&model0, &tr, &te, &cfg).unwrap();
    let (m2, r2) = train(&model0, &tr, &te, &cfg).unwrap();
    let same_nets = m1
        .net
        .nodes()
        .iter()
        .zip(m2.net.nodes())
        .all(|(a, b)| a.tensor.data() == b.tensor.data());
    if !same_nets {
        failures.push("trained models differ between identical runs".into());
    }
    if r1.train_loss != r2.train_loss
        || r1.val_loss != r2.val_loss
        || r1.bond_dims != r2.bond_dims
    {
        failures.push("training reports differ between identical runs".into());
    }

    // model file round trip, bitwise
    let mpath = dir.path().join("m.tnmw");
    save_model(&m1, &mpath).unwrap();
    let loaded = load_model(&mpath).unwrap();
    let same = loaded
        .net
        .nodes()
        .iter()
        .zip(m1.net.nodes())
        .all(|(a, b)| a.tensor.data() == b.tensor.data() && a.links == b.links)
        && loaded.permutation == m1.permutation
        && loaded.net.center() == m1.net.center();
    if !same {
        failures.push("model file round trip not bit-exact".into());
    }

    let secs = t0.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("took {secs:.0}s, budget 60s"));
    }
    report_criterion(
        9,
        &format!("seeded runs bit-identical; dataset and model round trips exact ({secs:.1}s)"),
        &failures,
    );
}

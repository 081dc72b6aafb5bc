//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity and its threshold, then asserts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use oclb::data::{make_splits, save_dataset, PropertyEntry, PropertyKind, PropertySchema, SceneBatch, SplitSizes};
use oclb::downstream::loss::{property_loss, property_loss_grad};
use oclb::downstream::{
    analytic_baseline, backward, evaluate_probe, forward, forward_cached, train_probe, PredictorConfig, PredictorParams,
    TrainConfig,
};
use oclb::matching::{deterministic_order, hungarian, loss_costs, mask_match_costs, two_step_ood_match, CostMatrix, MatchingMode};
use oclb::metrics::{adjusted_rand_index, batch_metrics, covering, mean_of, segmentation_covering, MetricName};
use oclb::report::spearman;
use oclb::shifts::{apply_shift, ShiftKind, ShiftSpec};
use oclb::synth::{flag_corrupted, generate_scenes, mock_encode, mock_encode_logged, MockEncoderConfig, SynthConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The training criteria each hold a few GB of scenes; run them one at a time.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_time = elapsed <= budget;
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line shows even when output is captured.
    let _ = writeln!(
        std::io::stderr(),
        "[{verdict}] criterion {id:>2} {name}: {detail} ({:.1}s, budget {}s)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} over its time budget");
}

/// ARI from explicit pair enumeration.
fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u64;
            only_a += (sa && !sb) as u64;
            only_b += (!sa && sb) as u64;
            total += 1;
        }
    }
    let pairs_a = (both + only_a) as f64;
    let pairs_b = (both + only_b) as f64;
    let expected = pairs_a * pairs_b / total as f64;
    let max = 0.5 * (pairs_a + pairs_b);
    if max == expected {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}

#[test]
fn criterion_01_ari_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let ka = rng.random_range(1..=6);
        let kb = rng.random_range(1..=6);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        worst = worst.max((adjusted_rand_index(&a, &b) - ari_by_pairs(&a, &b)).abs());
    }
    report(
        1,
        "ARI vs pair counting",
        worst <= 1e-9,
        &format!("max |diff| = {worst:.2e} over 200 pairs (tol 1e-9)"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

/// Minimum over every injection of the smaller side into the larger,
/// summed in row order.
fn exhaustive_min(c: &Array2<f64>) -> f64 {
    let (m, k) = c.dim();
    let (small, large) = (m.min(k), m.max(k));
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..large).collect();
    // Every permutation of the larger side; its first `small` entries give an injection.
    loop {
        let mut pairs: Vec<(usize, usize)> = (0..small)
            .map(|i| if m <= k { (i, perm[i]) } else { (perm[i], i) })
            .collect();
        pairs.sort_unstable();
        let total: f64 = pairs.iter().map(|&(r, s)| c[[r, s]]).sum();
        best = best.min(total);
        if !next_perm(&mut perm) {
            break;
        }
    }
    best
}

fn next_perm(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[test]
fn criterion_02_hungarian_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for trial in 0..500 {
        let m = rng.random_range(1..=7);
        let k = rng.random_range(1..=7);
        // Half continuous costs, half on a coarse grid to force ties.
        let c = if trial % 2 == 0 {
            Array2::from_shape_fn((m, k), |_| rng.random_range(-10.0..10.0))
        } else {
            Array2::from_shape_fn((m, k), |_| rng.random_range(0..5) as f64 * 0.25)
        };
        let a = hungarian(&CostMatrix::new(c.clone())).unwrap();
        if a.total_cost != exhaustive_min(&c) || a.pairs.len() != m.min(k) {
            mismatches += 1;
        }
    }
    report(
        2,
        "Hungarian vs exhaustive minimum",
        mismatches == 0,
        &format!("{mismatches} of 500 totals differ (exact equality)"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

fn random_schema(rng: &mut impl Rng) -> PropertySchema {
    let n = rng.random_range(1..=3);
    let entries = (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.5) {
                PropertyKind::Categorical {
                    num_classes: rng.random_range(2..=4),
                }
            } else {
                PropertyKind::Numeric {
                    dims: rng.random_range(1..=3),
                }
            };
            PropertyEntry {
                name: format!("p{i}"),
                kind,
            }
        })
        .collect();
    PropertySchema::new(entries).unwrap()
}

#[test]
fn criterion_03_gradient_correctness() {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    // Central differences at this step carry roundoff of about
    // eps * |loss| / STEP, near 1e-10 here; relative error denominators are
    // floored a few orders above it.
    const FLOOR: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut floored = 0usize;
    for depth in 0..=3 {
        for draw in 0..20 {
            let schema = random_schema(&mut rng);
            let p = schema.width();
            let mut cfg = PredictorConfig::slot_wise(depth, rng.random_range(1..=6), p);
            cfg.hidden_width = rng.random_range(2..=12);
            let params = PredictorParams::init(&cfg, 100 * depth as u64 + draw);
            let rows = rng.random_range(1..=4);
            let x = Array2::from_shape_fn((rows, cfg.input_width), |_| rng.random_range(-2.0..2.0));
            let targets: Vec<Vec<f64>> = (0..rows)
                .map(|_| {
                    let mut t = vec![0.0; p];
                    for (i, e) in schema.entries().iter().enumerate() {
                        let o = schema.offset(i);
                        match e.kind {
                            PropertyKind::Categorical { num_classes } => t[o + rng.random_range(0..num_classes)] = 1.0,
                            PropertyKind::Numeric { dims } => {
                                for d in 0..dims {
                                    t[o + d] = rng.random_range(-1.0..1.0);
                                }
                            }
                        }
                    }
                    t
                })
                .collect();
            let included = vec![true; schema.len()];
            let total_loss = |pp: &PredictorParams| -> f64 {
                let out = forward(pp, x.view());
                (0..rows)
                    .map(|r| property_loss(&out.row(r).to_vec(), &targets[r], &schema, &included))
                    .sum()
            };
            let (out, cache) = forward_cached(&params, x.view());
            let mut g_out = Array2::zeros(out.dim());
            for r in 0..rows {
                let mut g = vec![0.0; p];
                property_loss_grad(&out.row(r).to_vec(), &targets[r], &schema, &included, &mut g, 1.0);
                g_out.row_mut(r).assign(&ndarray::Array1::from(g));
            }
            let (grads, _) = backward(&params, &cache, g_out);
            let analytic: Vec<f64> = grads.values().copied().collect();
            let signs = |pp: &PredictorParams| -> Vec<bool> {
                // Signs of all hidden pre-activations.
                let mut h = x.clone();
                let mut s = Vec::new();
                for l in &pp.layers[..pp.layers.len() - 1] {
                    let z = h.dot(&l.weight.t()) + &l.bias;
                    s.extend(z.iter().map(|&v| v > 0.0));
                    h = z.mapv(|v| if v > 0.0 { v } else { 0.01 * v });
                }
                s
            };
            let base_signs = signs(&params);
            for (idx, &a) in analytic.iter().enumerate() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                *plus.values_mut().nth(idx).unwrap() += STEP;
                *minus.values_mut().nth(idx).unwrap() -= STEP;
                if signs(&plus) != base_signs || signs(&minus) != base_signs {
                    skipped += 1;
                    continue;
                }
                let numeric = (total_loss(&plus) - total_loss(&minus)) / (2.0 * STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                floored += (a.abs().max(numeric.abs()) < FLOOR) as usize;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    report(
        3,
        "analytic vs central-difference gradients",
        worst <= TOL && checked > 0,
        &format!("max rel err = {worst:.2e} (tol {TOL:.0e}) over {checked} coordinates, depths 0-3, {skipped} kink-straddling skipped, {floored} under the {FLOOR:.0e} floor"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_06_baseline_identities() {
    let start = Instant::now();
    let batch = generate_scenes(&SynthConfig {
        num_scenes: 2000,
        height: 32,
        width: 32,
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let all: Vec<usize> = (0..batch.len()).collect();
    let scores = analytic_baseline(&batch, &all, &all);
    let mut counts = [0usize; 3];
    for i in 0..batch.len() {
        for o in batch.target_objects(i) {
            let t = batch.target_vector(i, o);
            let c = (0..3).find(|&c| t[4 + c] == 1.0).unwrap();
            counts[c] += 1;
        }
    }
    let majority = *counts.iter().max().unwrap() as f64 / counts.iter().sum::<usize>() as f64;
    let acc = scores.get("shape").unwrap().all.value.unwrap();
    let mut worst_r2 = 0f64;
    for key in ["color", "scale", "x", "y"] {
        worst_r2 = worst_r2.max(scores.get(key).unwrap().all.value.unwrap().abs());
    }
    let pass = (acc - majority).abs() <= 1e-12 && worst_r2 <= 1e-9;
    report(
        6,
        "analytic baseline identities",
        pass,
        &format!(
            "|acc - majority| = {:.1e} (tol 1e-12), max |R2| = {worst_r2:.1e} (tol 1e-9)",
            (acc - majority).abs()
        ),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn criterion_08_shift_contracts() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let batch = generate_scenes(&SynthConfig {
        num_scenes: 1000,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for kind in [ShiftKind::Occlusion, ShiftKind::Crop, ShiftKind::ObjectColor, ShiftKind::ObjectShape] {
        let spec = ShiftSpec::new(kind, 80);
        let shifted = apply_shift(&batch, &spec).unwrap();
        // Partition and value range.
        let valid = shifted.validate().is_ok();
        let (n, m, _, _) = shifted.gt_masks.dim();
        let partition = (0..n).all(|i| {
            let sums = shifted.gt_masks.index_axis(ndarray::Axis(0), i).mapv(u32::from).sum_axis(ndarray::Axis(0));
            sums.iter().all(|&s| s == 1)
        });
        let range = shifted.images.iter().all(|v| (0.0..=1.0).contains(v));
        // Byte-identical reproduction.
        let a = tmp.path().join(format!("{}_a", kind.as_str()));
        let b = tmp.path().join(format!("{}_b", kind.as_str()));
        save_dataset(&shifted, &a).unwrap();
        save_dataset(&apply_shift(&batch, &spec).unwrap(), &b).unwrap();
        let identical = dir_bytes(&a) == dir_bytes(&b);
        let mut ok = valid && partition && range && identical && m >= batch.max_objects();
        if kind == ShiftKind::Occlusion {
            let logs = shifted.shift.as_ref().unwrap().occlusion.as_ref().unwrap();
            let (sh, sw) = (64 * 2 / 5, 64 * 2 / 5);
            let argmin_ok = logs.iter().enumerate().all(|(i, log)| {
                let labels = batch.scene(i).labels();
                let overlaps: Vec<usize> = log
                    .candidates
                    .iter()
                    .map(|&[r, c]| {
                        let mut n = 0;
                        for y in r..r + sh {
                            for x in c..c + sw {
                                n += (labels[[y, x]] >= 1) as usize;
                            }
                        }
                        n
                    })
                    .collect();
                let min = *overlaps.iter().min().unwrap();
                let first = overlaps.iter().position(|&o| o == min).unwrap();
                overlaps == log.overlaps && log.chosen == first && log.candidates.len() == 5
            });
            ok &= argmin_ok;
            notes.push(format!("occlusion argmin verified={argmin_ok}"));
        }
        notes.push(format!("{}: valid={valid} partition={partition} range={range} identical={identical}", kind.as_str()));
        pass &= ok;
    }
    report(
        8,
        "shift contracts on 1000 scenes",
        pass,
        &notes.join("; "),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_09_metric_invariances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures: Vec<String> = Vec::new();

    // ARI under relabeling of either side.
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let pb: Vec<usize> = b.iter().map(|&l| perm[l] + 10).collect();
        let pa: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
        let base = adjusted_rand_index(&a, &b);
        if (base - adjusted_rand_index(&a, &pb)).abs() > 1e-12 || (base - adjusted_rand_index(&pa, &b)).abs() > 1e-12 {
            failures.push("ARI relabeling".into());
            break;
        }
    }

    // SC/mSC bounds on random scenes; equality when all GT masks share a size.
    for trial in 0..200 {
        let (h, w, k) = (6, 6, rng.random_range(1..5));
        let equal = trial % 2 == 0;
        let gt_labels = if equal {
            // Four 3×3 quadrants; object 0 takes one of them as background.
            Array2::from_shape_fn((h, w), |(r, c)| (r / 3) * 2 + c / 3)
        } else {
            Array2::from_shape_fn((h, w), |_| rng.random_range(0..4))
        };
        let mut gt = Array3::<u8>::zeros((4, h, w));
        for ((r, c), &l) in gt_labels.indexed_iter() {
            gt[[l, r, c]] = 1;
        }
        let pred = Array3::from_shape_fn((k, h, w), |_| rng.random::<f32>());
        let sums = pred.sum_axis(ndarray::Axis(0));
        let pred = &pred / &sums.insert_axis(ndarray::Axis(0));
        let sc = segmentation_covering(pred.view(), gt.view(), 4, 1, true).unwrap().unwrap();
        let msc = segmentation_covering(pred.view(), gt.view(), 4, 1, false).unwrap().unwrap();
        if !(0.0..=1.0).contains(&sc) || !(0.0..=1.0).contains(&msc) {
            failures.push(format!("SC bounds {sc} {msc}"));
        }
        if equal && (sc - msc).abs() > 1e-12 {
            failures.push(format!("equal-size SC {sc} != mSC {msc}"));
        }
    }

    // Asymmetry witness: A is one mask over all four pixels, B splits them 1+3.
    // B by A: IoUs 1/4 and 3/4; A by B: best IoU 3/4.
    let a = Array2::from_elem((1, 4), true);
    let b = ndarray::array![[true, false, false, false], [false, true, true, true]];
    for (weighted, b_by_a, a_by_b) in [(false, 0.5, 0.75), (true, 0.625, 0.75)] {
        let x = covering(a.view(), b.view(), weighted).unwrap();
        let y = covering(b.view(), a.view(), weighted).unwrap();
        if (x - b_by_a).abs() > 1e-15 || (y - a_by_b).abs() > 1e-15 || x == y {
            failures.push(format!("asymmetry witness weighted={weighted}: {x} vs {y}"));
        }
    }

    // Mask-matching costs are invariant to positive rescaling of predicted masks.
    for _ in 0..50 {
        let gt = Array3::from_shape_fn((3, 5, 5), |_| rng.random_range(0..2u8));
        let pred = Array3::from_shape_fn((4, 5, 5), |_| rng.random::<f32>());
        let scale: f32 = rng.random_range(0.1..10.0);
        let c1 = mask_match_costs(pred.view(), gt.view()).unwrap();
        let c2 = mask_match_costs((&pred * scale).view(), gt.view()).unwrap();
        let close = c1.costs.iter().zip(c2.costs.iter()).all(|(x, y)| (x - y).abs() < 1e-6);
        if !close || hungarian(&c1).unwrap().pairs != hungarian(&c2).unwrap().pairs {
            failures.push("mask cost scale invariance".into());
            break;
        }
    }

    // Deterministic order is unchanged by positive scaling of numeric properties.
    let schema = oclb::data::presets::multi_dsprites();
    for _ in 0..100 {
        let m = rng.random_range(1..7);
        let mut t = Array2::<f64>::zeros((m, schema.width()));
        for r in 0..m {
            for c in [0, 1, 2, 3, 7, 8] {
                t[[r, c]] = rng.random_range(0..4) as f64 * 0.25;
            }
            t[[r, 4 + rng.random_range(0..3)]] = 1.0;
        }
        let ood: Vec<bool> = (0..m).map(|_| rng.random_bool(0.3)).collect();
        let s: f64 = rng.random_range(0.1..10.0);
        let mut scaled = t.clone();
        for r in 0..m {
            for c in [0, 1, 2, 3, 7, 8] {
                scaled[[r, c]] *= s;
            }
        }
        if deterministic_order(t.view(), &schema, &ood) != deterministic_order(scaled.view(), &schema, &ood) {
            failures.push("deterministic order under scaling".into());
            break;
        }
    }

    report(
        9,
        "metric invariance suite",
        failures.is_empty(),
        &if failures.is_empty() {
            "ARI relabeling, SC bounds, equal-size SC=mSC, asymmetry witness, cosine scale, order scaling".to_string()
        } else {
            failures.join("; ")
        },
        start.elapsed(),
        Duration::from_secs(30),
    );
}

/// Best slot for each object under exhaustive search over injections.
fn brute_force_assignment(c: &Array2<f64>) -> Vec<usize> {
    let (m, k) = c.dim();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let total: f64 = (0..m).map(|r| c[[r, perm[r]]]).sum();
        if total < best.0 {
            best = (total, perm[..m].to_vec());
        }
        if !next_perm(&mut perm) {
            break;
        }
    }
    best.1
}

#[test]
fn criterion_10_two_step_equivalence() {
    let start = Instant::now();
    let schema = oclb::data::presets::multi_dsprites();
    let p = schema.width();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let all = vec![true; schema.len()];
    let globally_id = schema.mask_excluding(["shape"]);
    let mut plain_mismatch = 0;
    let mut ood_mismatch = 0;
    for _ in 0..200 {
        let k = rng.random_range(3..=5);
        let preds = Array2::from_shape_fn((k, p), |_| rng.random_range(-1.0..1.5));
        let mut targets = Array2::<f64>::zeros((3, p));
        for r in 0..3 {
            for c in [0, 1, 2, 3, 7, 8] {
                targets[[r, c]] = rng.random::<f64>();
            }
            targets[[r, 4 + rng.random_range(0..3)]] = 1.0;
        }
        let plain = hungarian(&loss_costs(preds.view(), targets.view(), &schema, &all).unwrap()).unwrap();
        let two = two_step_ood_match(preds.view(), targets.view(), &schema, &[false; 3], &all).unwrap();
        if plain != two {
            plain_mismatch += 1;
        }
        let flagged = rng.random_range(0..3);
        let mut ood = [false; 3];
        ood[flagged] = true;
        let two = two_step_ood_match(preds.view(), targets.view(), &schema, &ood, &globally_id).unwrap();
        let restricted = loss_costs(preds.view(), targets.view(), &schema, &globally_id).unwrap();
        let oracle = brute_force_assignment(&restricted.costs);
        if two.slot_of(flagged) != Some(oracle[flagged]) {
            ood_mismatch += 1;
        }
    }
    report(
        10,
        "two-step OOD matching equivalence",
        plain_mismatch == 0 && ood_mismatch == 0,
        &format!("{plain_mismatch}/200 differ from plain matching without OOD; {ood_mismatch}/200 OOD pairs differ from brute force"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

fn synthetic(num_scenes: usize, side: usize, seed: u64) -> SceneBatch {
    generate_scenes(&SynthConfig {
        num_scenes,
        height: side,
        width: side,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn score(scores: &oclb::downstream::ProbeScores, property: &str) -> f64 {
    scores.get(property).unwrap().all.value.unwrap()
}

#[test]
fn criterion_07_lossless_oracle_ceiling() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let sizes = SplitSizes {
        train: 10_000,
        val: 1_000,
        test: 2_000,
    };
    let batch = synthetic(sizes.total(), 64, 7);
    let splits = make_splits(batch.len(), sizes, 7).unwrap();
    let slots = mock_encode(&batch, &MockEncoderConfig::default()).unwrap();
    let cfg = PredictorConfig::slot_wise(1, slots.slot_dim(), batch.schema.width());
    let train = TrainConfig::default();
    let (params, log) = train_probe(&slots, &batch, &cfg, &train, MatchingMode::Loss, &splits).unwrap();
    let scores = evaluate_probe(&params, &cfg, &slots, &batch, MatchingMode::Loss, &splits.test).unwrap();
    let (shape, x, y) = (score(&scores, "shape"), score(&scores, "x"), score(&scores, "y"));
    report(
        7,
        "MLP1 on lossless slots",
        shape >= 0.99 && x >= 0.99 && y >= 0.99,
        &format!(
            "shape acc {shape:.4}, x R2 {x:.4}, y R2 {y:.4} (each >= 0.99) after {} steps{}",
            log.steps,
            if log.stopped_early { ", stopped early" } else { "" }
        ),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_04_segmentation_tracks_downstream() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    // Each noise level is paired with a mask blur so that slot quality and
    // segmentation quality degrade together.
    const GRID: [(f64, usize); 5] = [(0.0, 0), (0.1, 1), (0.3, 2), (1.0, 3), (3.0, 4)];
    let sizes = SplitSizes {
        train: 5_000,
        val: 1_000,
        test: 2_000,
    };
    let batch = synthetic(sizes.total(), 64, 4);
    let splits = make_splits(batch.len(), sizes, 4).unwrap();
    let ari_only = [MetricName::Ari].into_iter().collect();
    let mut aris = Vec::new();
    let mut accs = Vec::new();
    let mut runs = Vec::new();
    for (noise, blur_radius) in GRID {
        for seed in 0..4u64 {
            let slots = mock_encode(
                &batch,
                &MockEncoderConfig {
                    noise,
                    blur_radius,
                    seed,
                    ..MockEncoderConfig::default()
                },
            )
            .unwrap();
            let records = batch_metrics(&batch.select(&splits.test), &slots.select(&splits.test), &ari_only).unwrap();
            let (ari, _) = mean_of(&records, MetricName::Ari).unwrap();
            let cfg = PredictorConfig::slot_wise(1, slots.slot_dim(), batch.schema.width());
            let train = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let (params, _) = train_probe(&slots, &batch, &cfg, &train, MatchingMode::Loss, &splits).unwrap();
            let scores = evaluate_probe(&params, &cfg, &slots, &batch, MatchingMode::Loss, &splits.test).unwrap();
            let acc = score(&scores, "shape");
            runs.push(format!("({noise},{blur_radius},{seed}): ARI {ari:.3} acc {acc:.3}"));
            aris.push(ari);
            accs.push(acc);
        }
    }
    let _ = writeln!(std::io::stderr(), "criterion 4 runs: {}", runs.join("; "));
    let (rho, p) = spearman(&aris, &accs).unwrap().unwrap();
    report(
        4,
        "Spearman(ARI, shape accuracy) over 20 runs",
        rho >= 0.7 && p < 0.05,
        &format!("rho = {rho:.4} (>= 0.7), p = {p:.2e} (< 0.05)"),
        start.elapsed(),
        Duration::from_secs(900),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_05_single_object_corruption() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    const CHANCE: f64 = 1.0 / 3.0;
    let sizes = SplitSizes {
        train: 5_000,
        val: 1_000,
        test: 2_000,
    };
    let batch = synthetic(sizes.total(), 64, 5);
    let splits = make_splits(batch.len(), sizes, 5).unwrap();
    let mut ood_accs = Vec::new();
    let mut id_deltas = Vec::new();
    for seed in 0..5u64 {
        let clean_cfg = MockEncoderConfig {
            seed,
            ..MockEncoderConfig::default()
        };
        let clean = mock_encode(&batch, &clean_cfg).unwrap();
        let (corrupted, log) = mock_encode_logged(
            &batch,
            &MockEncoderConfig {
                corrupt_random_object: true,
                ..clean_cfg
            },
        )
        .unwrap();
        let flagged = flag_corrupted(&batch, &log).unwrap();
        let cfg = PredictorConfig::slot_wise(1, clean.slot_dim(), batch.schema.width());
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (params, _) = train_probe(&clean, &batch, &cfg, &train, MatchingMode::Mask, &splits).unwrap();
        // Both runs are scored against the flagged batch so the ID group is the same objects.
        let before = evaluate_probe(&params, &cfg, &clean, &flagged, MatchingMode::Mask, &splits.test).unwrap();
        let after = evaluate_probe(&params, &cfg, &corrupted, &flagged, MatchingMode::Mask, &splits.test).unwrap();
        let (b, a) = (before.get("shape").unwrap(), after.get("shape").unwrap());
        ood_accs.push(a.ood.value.unwrap());
        id_deltas.push(a.id.value.unwrap() - b.id.value.unwrap());
        let _ = writeln!(
            std::io::stderr(),
            "criterion 5 seed {seed}: OOD acc {:.4} (clean {:.4}), ID acc {:.4} -> {:.4}",
            a.ood.value.unwrap(),
            b.ood.value.unwrap(),
            b.id.value.unwrap(),
            a.id.value.unwrap()
        );
    }
    let ood = median(ood_accs);
    let delta = median(id_deltas);
    report(
        5,
        "single-object slot corruption",
        ood <= CHANCE + 0.1 && delta.abs() <= 0.02,
        &format!("median OOD shape acc {ood:.4} (<= {:.4}), median ID change {delta:+.4} (|.| <= 0.02)", CHANCE + 0.1),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

use std::collections::HashMap;

use fqb_core::analysis::{reject_count, ErcThreshold};
use fqb_core::bestrowden::{label_features, label_subject_groups, GenuineAggregate};
use fqb_core::pairs::{read_pairs_csv, write_pairs_csv};
use fqb_core::stats::spearman;
use fqb_core::synthetic::SubgroupSpec;
use fqb_core::*;
use tempfile::TempDir;

fn config(seed: u64, subjects: usize, images: usize) -> SynthConfig {
    let group = |label: &str, noise| SubgroupSpec {
        label: label.into(),
        subjects,
        images_per_subject: images,
        noise_scale: noise,
    };
    SynthConfig {
        dim: 8,
        activation_dim: 16,
        attribute: "group".into(),
        subgroups: vec![group("low", 0.1), group("high", 0.6)],
        seed,
    }
}

#[test]
fn disk_round_trip_preserves_every_downstream_number() {
    let tmp = TempDir::new().unwrap();
    let synth = generate(&config(7, 6, 3)).unwrap();
    let dir = DataDir::new(tmp.path().join("data"));
    synth.write(&dir).unwrap();
    let loaded = dir.load().unwrap();
    assert_eq!(loaded.records(), synth.dataset.records());
    assert_eq!(loaded.embeddings(), synth.dataset.embeddings());
    assert_eq!(loaded.activations(), synth.dataset.activations());

    let scored = score_pairs(&loaded, &generate_pairs(&loaded, 10, 3).unwrap()).unwrap();
    let path = tmp.path().join("pairs.csv");
    write_pairs_csv(&path, &loaded, &scored).unwrap();
    assert_eq!(read_pairs_csv(&path, &loaded).unwrap(), scored);

    let layer = LastLayer::load(dir.path(DataDir::LAYER), dir.path(DataDir::LAYER_SIDECAR)).unwrap();
    let cfg = SerfiqConfig { m: 6, ..SerfiqConfig::default() };
    let a = serfiq_dataset(&synth.dataset, &synth.layer, &cfg, 2).unwrap();
    let b = serfiq_dataset(&loaded, &layer, &cfg, 2).unwrap();
    assert_eq!(a, b);

    let qpath = tmp.path().join("q.csv");
    write_quality_csv(&qpath, &loaded, &a).unwrap();
    assert_eq!(load_quality_csv(&qpath, &loaded, "serfiq").unwrap(), a);
}

#[test]
fn serfiq_scores_follow_images_not_rows() {
    let synth = generate(&config(11, 5, 2)).unwrap();
    let ds = &synth.dataset;
    let cfg = SerfiqConfig { m: 8, ..SerfiqConfig::default() };
    let full = serfiq_dataset(ds, &synth.layer, &cfg, 5).unwrap();
    let perm: Vec<usize> = (0..ds.len()).rev().step_by(2).chain((0..ds.len()).step_by(3)).collect::<std::collections::BTreeSet<_>>().into_iter().rev().collect();
    let shuffled = ds.subset(&perm).unwrap();
    let part = serfiq_dataset(&shuffled, &synth.layer, &cfg, 5).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(part.values[k], full.values[i]);
    }
}

#[test]
fn trained_regressor_ranks_noise() {
    let synth = generate(&config(5, 15, 4)).unwrap();
    let ds = &synth.dataset;
    let scored = score_pairs(ds, &generate_pairs(ds, 200, 1).unwrap()).unwrap();
    let labels = quality_labels(ds, &scored, GenuineAggregate::Mean).unwrap();
    let rows = label_features(ds, &labels);
    let groups = label_subject_groups(ds, &labels);
    let model = train_regressor(&rows, &labels.z(), &RidgeCv::default(), Some(&groups)).unwrap();
    let q = predict_quality(&model, ds).unwrap();
    let rho = spearman(&synth.noise_magnitude, &q.values);
    assert!(rho < 0.0, "spearman {rho}");
}

/// ERC recomputed from scratch with plain loops over 20 random datasets.
#[test]
fn erc_matches_naive_recomputation() {
    for seed in 0..20u64 {
        let synth = generate(&config(seed, 4 + seed as usize % 3, 2 + seed as usize % 2)).unwrap();
        let ds = &synth.dataset;
        let scored = score_pairs(ds, &generate_pairs(ds, 50, seed).unwrap()).unwrap();
        let cfg = SerfiqConfig { m: 4, ..SerfiqConfig::default() };
        let quality = serfiq_dataset(ds, &synth.layer, &cfg, seed).unwrap();
        let grid = [0.0, 0.1, 0.3, 0.5];
        for mode in [ErcThreshold::Fixed, ErcThreshold::Rederive] {
            let curve = error_vs_reject(&scored, &quality, 0.1, &grid, mode).unwrap();
            let threshold = |imp: &[f64]| {
                let mut c: Vec<f64> = imp.to_vec();
                c.sort_by(f64::total_cmp);
                c.dedup();
                c.into_iter()
                    .find(|&t| imp.iter().filter(|&&x| x >= t).count() as f64 / imp.len() as f64 <= 0.1)
            };
            let base = threshold(&scored.impostor_scores()).unwrap();
            let n = ds.len();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| quality.values[a].total_cmp(&quality.values[b]).then(a.cmp(&b)));
            let by_rank: HashMap<usize, usize> = idx.iter().enumerate().map(|(r, &i)| (i, r)).collect();
            for (p, &r) in curve.points.iter().zip(&grid) {
                let k = reject_count(r, n);
                let keep = |i: usize| by_rank[&i] >= k;
                let g: Vec<f64> = scored.genuine.iter().filter(|s| keep(s.pair.probe) && keep(s.pair.reference)).map(|s| s.score).collect();
                let t = match mode {
                    ErcThreshold::Fixed => Some(base),
                    ErcThreshold::Rederive => {
                        let imp: Vec<f64> = scored.impostor.iter().filter(|s| keep(s.pair.probe) && keep(s.pair.reference)).map(|s| s.score).collect();
                        if imp.len() < 10 { None } else { threshold(&imp) }
                    }
                };
                let expected = match t {
                    Some(t) if !g.is_empty() => Some(g.iter().filter(|&&x| x < t).count() as f64 / g.len() as f64),
                    _ => None,
                };
                assert_eq!(p.fnmr, expected, "seed {seed} ratio {r} {mode:?}");
                assert_eq!(p.remaining_genuine, g.len());
            }
        }
    }
}

fn oracle_quality(n: usize, scored: &ScoredComparisons) -> QualityScores {
    let mut q = vec![2.0; n];
    for s in &scored.genuine {
        for i in [s.pair.probe, s.pair.reference] {
            q[i] = f64::min(q[i], s.score);
        }
    }
    QualityScores::new("oracle", q).unwrap()
}

fn fnmrs(curve: &ErrorRejectCurve) -> Vec<f64> {
    curve.points.iter().filter_map(|p| p.fnmr).collect()
}

/// With one genuine pair per image, rejecting by the image's minimum genuine
/// score removes the worst remaining pair each time, so FNMR never rises.
#[test]
fn oracle_erc_is_monotone_with_two_images_per_subject() {
    for seed in 0..20u64 {
        let synth = generate(&config(seed, 8 + seed as usize % 5, 2)).unwrap();
        let ds = &synth.dataset;
        let scored = score_pairs(ds, &generate_pairs(ds, 40, seed).unwrap()).unwrap();
        let grid: Vec<f64> = (0..45).map(|k| k as f64 / 50.0).collect();
        let curve = error_vs_reject(&scored, &oracle_quality(ds.len(), &scored), 0.1, &grid, ErcThreshold::Fixed).unwrap();
        assert!(fnmrs(&curve).windows(2).all(|w| w[1] <= w[0]), "seed {seed}");
    }
}

/// Three images A, B, C of one subject with only A-B failing, plus a failing
/// pair D-E: rejecting A leaves 1/2 failing, rejecting B too leaves 1/1.
#[test]
fn oracle_erc_can_rise_with_three_images_per_subject() {
    let records: Vec<SampleRecord> = ["s0", "s0", "s0", "s1", "s1", "s2", "s3"]
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRecord::new(format!("i{i}"), *s).with_attribute("g", "x"))
        .collect();
    let rows: Vec<Vec<f32>> = (0..7).map(|i| vec![1.0, i as f32]).collect();
    let ds = Dataset::new(records, Matrix::from_rows(&rows).unwrap(), None).unwrap();
    let sp = |a, b, score| ScoredPair { pair: Pair::new(a, b), score };
    let scored = ScoredComparisons {
        genuine: vec![sp(0, 1, 0.1), sp(0, 2, 0.9), sp(1, 2, 0.9), sp(3, 4, 0.2)],
        impostor: (0..10).map(|k| sp(5, 6, 0.3 + k as f64 / 100.0)).collect(),
    };
    let quality = oracle_quality(ds.len(), &scored);
    let curve = error_vs_reject(&scored, &quality, 0.1, &[0.0, 1.0 / 7.0, 2.0 / 7.0], ErcThreshold::Fixed).unwrap();
    assert_eq!(fnmrs(&curve), vec![0.5, 0.5, 1.0]);
}

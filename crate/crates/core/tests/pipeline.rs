//! End-to-end use of the public API on small synthetic corpora.

use crackseg::dataset::{
    generate_synthetic_corpus, LabeledImage, PatchGeometry, Ratio, SyntheticSpec,
};
use crackseg::experiments::{
    hybrid_split, run_experiment, segment_corpus, sweep_ratio, ExperimentConfig,
};
use crackseg::io::{
    load_checkpoint, load_corpus, save_checkpoint, write_image_png, write_mask_png, CheckpointMeta,
};
use crackseg::network::TrainConfig;

fn corpus(n: usize, channels: usize, seed: u64) -> Vec<LabeledImage> {
    let spec = SyntheticSpec {
        height: 32,
        width: 32,
        channels,
        ..Default::default()
    };
    generate_synthetic_corpus(&spec, n, seed).unwrap()
}

fn small_config(iterations: u64) -> ExperimentConfig {
    ExperimentConfig {
        geometry: PatchGeometry::new(4, 3).unwrap(),
        train: TrainConfig {
            iterations,
            batch_size: 32,
            seed: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn experiment_is_reproducible_and_well_formed() {
    let mut data = corpus(6, 1, 1);
    let test = data.split_off(4);
    let cfg = small_config(8);
    let a = run_experiment(&data, &test, &cfg).unwrap();
    let b = run_experiment(&data, &test, &cfg).unwrap();
    assert_eq!(a.trained.model, b.trained.model);
    assert_eq!(a.trained.trace.records, b.trained.trace.records);
    assert_eq!(a.report, b.report);

    assert_eq!(a.report.per_image.len(), test.len());
    for s in [a.report.micro, a.report.macro_avg] {
        for v in [s.precision, s.recall, s.f1] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
    assert!(a.trained.positives > 0);
    assert_eq!(a.trained.negatives, 3 * a.trained.positives);
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let mut data = corpus(4, 3, 2);
    let test = data.split_off(3);
    let cfg = small_config(4);
    let run = run_experiment(&data, &test, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let meta = CheckpointMeta {
        iterations: 4,
        seed: 5,
        ratio: Ratio::Fixed(1.0),
    };
    save_checkpoint(&path, &run.trained.model, &meta, true).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    assert!(loaded.has_optimizer_state);
    assert_eq!(loaded.model, run.trained.model);
    loaded.expect(3, 3).unwrap();
    assert!(loaded.expect(1, 3).is_err());

    let before = segment_corpus(&run.trained.model, &test, &cfg).unwrap();
    let after = segment_corpus(&loaded.model, &test, &cfg).unwrap();
    assert_eq!(
        before[0].probability.values(),
        after[0].probability.values()
    );
    assert_eq!(before[0].binary, after[0].binary);
}

#[test]
fn corpus_survives_png_roundtrip() {
    let data = corpus(3, 3, 3);
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    for li in &data {
        write_image_png(
            &li.image,
            &dir.path().join("images").join(format!("{}.png", li.stem)),
        )
        .unwrap();
        write_mask_png(
            &li.mask,
            &dir.path().join("masks").join(format!("{}.png", li.stem)),
        )
        .unwrap();
    }
    let stems: Vec<String> = data.iter().map(|li| li.stem.clone()).collect();
    let loaded = load_corpus(dir.path(), &stems).unwrap();
    for (a, b) in data.iter().zip(&loaded) {
        assert_eq!(a.stem, b.stem);
        assert_eq!(a.image.channels(), b.image.channels());
        let worst = a
            .image
            .values()
            .iter()
            .zip(b.image.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn hybrid_takes_leading_half_in_first_channel_count() {
    let gray = corpus(3, 1, 4);
    let rgb = corpus(4, 3, 5);
    let mixed = hybrid_split(&gray, &rgb).unwrap();
    assert_eq!(mixed.len(), 2 + 2);
    assert!(mixed.iter().all(|li| li.image.channels() == 1));
    assert_eq!(mixed[2].mask, rgb[0].mask);
    assert!(hybrid_split(&[], &rgb).is_err());
}

#[test]
fn ratio_sweep_holds_total_fixed() {
    let mut data = corpus(5, 1, 6);
    let test = data.split_off(4);
    let total = 300;
    let runs = sweep_ratio(
        &data,
        &test,
        &small_config(2),
        &[Ratio::Fixed(1.0), Ratio::Fixed(3.0)],
        total,
    )
    .unwrap();
    assert_eq!(runs.len(), 2);
    for (ratio, run) in &runs {
        let (p, n) = (run.trained.positives, run.trained.negatives);
        assert!(p + n <= total && p + n + 2 >= total, "{ratio:?}: {p} + {n}");
    }
    let (p3, n3) = (runs[1].1.trained.positives, runs[1].1.trained.negatives);
    assert!((n3 as f64 / p3 as f64 - 3.0).abs() < 0.05);
}

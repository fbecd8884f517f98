//! Does the synthetic world actually carry the signal the model is asked to
//! learn? With the noise turned off, object attributes must be an exact
//! linear read-out of the features; with it on, they must still decode
//! cleanly. Also drives a four-digit record count through the disk format.

use nalgebra::DMatrix;
use tempfile::TempDir;

use relcap::data::{
    build_vocabs, generate, load_header, load_split, load_vocabs, save_dataset, save_vocabs,
    DataConfig, SplitFiles, COLORS,
};

fn probe_config(noise: f64) -> DataConfig {
    DataConfig {
        train_examples: 120,
        val_examples: 2,
        questions_per_image: 2,
        max_objects: 6,
        feature_dim: 24,
        captions_per_question: 3,
        max_caption_tokens: 12,
        noise,
        count_partial: 0.0,
        ..DataConfig::default()
    }
}

/// Feature matrix and planted color index per object, one row each,
/// deduplicated by image since questions share a scene.
fn object_rows(cfg: &DataConfig, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let data = generate(cfg, seed).unwrap();
    let mut feats: Vec<f64> = Vec::new();
    let mut colors: Vec<usize> = Vec::new();
    let mut last_image = String::new();
    for (rec, meta) in data.train.records.iter().zip(&data.train.metas) {
        if rec.image_id == last_image {
            continue;
        }
        last_image = rec.image_id.clone();
        for (k, attrs) in meta.object_attrs.iter().enumerate() {
            feats.extend_from_slice(&rec.features[k * cfg.feature_dim..(k + 1) * cfg.feature_dim]);
            colors.push(attrs[1]);
        }
    }
    let n = colors.len();
    let x = DMatrix::from_row_slice(n, cfg.feature_dim, &feats);
    let mut y = DMatrix::zeros(n, COLORS.len());
    for (row, &c) in colors.iter().enumerate() {
        y[(row, c)] = 1.0;
    }
    (x, y, colors)
}

#[test]
fn clean_features_are_an_exact_linear_code_for_color() {
    let cfg = probe_config(0.0);
    let (x, y, colors) = object_rows(&cfg, 77);
    assert!(colors.len() > 100, "probe needs a real sample, got {}", colors.len());

    let svd = x.clone().svd(true, true);
    let w = svd.solve(&y, 1e-12).expect("least squares");
    let residual = (&x * &w - &y).abs().max();
    assert!(residual < 1e-8, "noise-free read-out should be exact, residual {residual}");
}

#[test]
fn noisy_features_still_decode_the_planted_color() {
    let cfg = probe_config(0.1);
    let (x, y, colors) = object_rows(&cfg, 78);

    let svd = x.clone().svd(true, true);
    let w = svd.solve(&y, 1e-12).expect("least squares");
    let scores = &x * &w;
    let mut hits = 0usize;
    for (row, &c) in colors.iter().enumerate() {
        let decoded = (0..COLORS.len())
            .max_by(|&a, &b| scores[(row, a)].total_cmp(&scores[(row, b)]))
            .unwrap();
        if decoded == c {
            hits += 1;
        }
    }
    let acc = hits as f64 / colors.len() as f64;
    assert!(acc > 0.98, "default noise drowns the attribute signal: {acc}");
}

#[test]
fn a_thousand_records_round_trip_through_disk() {
    let cfg = DataConfig {
        train_examples: 800,
        val_examples: 200,
        feature_dim: 12,
        ..DataConfig::default()
    };
    let data = generate(&cfg, 123).unwrap();
    assert_eq!(data.train.records.len() + data.val.records.len(), 1000);

    let tmp = TempDir::new().unwrap();
    save_dataset(tmp.path(), 123, &cfg, &data).unwrap();
    let (qv, cv, answers) = build_vocabs(&data.train.records, 1, 1).unwrap();
    save_vocabs(tmp.path(), &qv, &cv, &answers).unwrap();

    let header = load_header(tmp.path()).unwrap();
    assert_eq!(header.seed, 123);
    assert_eq!(header.config, cfg);
    assert_eq!(header.splits, vec!["train".to_string(), "val".to_string()]);

    let train = load_split(&SplitFiles::in_dir(tmp.path(), "train")).unwrap();
    let val = load_split(&SplitFiles::in_dir(tmp.path(), "val")).unwrap();
    assert_eq!(train.records, data.train.records);
    assert_eq!(train.metas, data.train.metas);
    assert_eq!(val.records, data.val.records);
    assert_eq!(val.metas, data.val.metas);

    let (qv2, cv2, answers2) = load_vocabs(tmp.path()).unwrap();
    assert_eq!(qv2.sha256(), qv.sha256());
    assert_eq!(cv2.sha256(), cv.sha256());
    assert_eq!(answers2, answers);
}

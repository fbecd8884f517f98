use std::time::Instant;

use rayon::prelude::*;

use relcap::data::{build_vocabs, encode_example, generate, DataConfig, EncodedExample, MAX_QUESTION_TOKENS};
use relcap::model::{Model, ModelConfig};
use relcap::selection;
use relcap::trainer::{MetricsRow, SelectionMode, TrainConfig, Trainer};

fn encode_all(cfg: &DataConfig, seed: u64) -> (Vec<EncodedExample>, Vec<EncodedExample>, usize, usize, usize, Vec<relcap::data::RecordMeta>) {
    let data = generate(cfg, seed).unwrap();
    let (qv, cv, answers) = build_vocabs(&data.train.records, 1, 1).unwrap();
    let enc = |recs: &[relcap::data::ExampleRecord]| {
        recs.iter()
            .map(|r| encode_example(r, &qv, &cv, &answers, MAX_QUESTION_TOKENS, cfg.max_caption_tokens, cfg.max_objects).unwrap())
            .collect::<Vec<_>>()
    };
    (enc(&data.train.records), enc(&data.val.records), qv.len(), cv.len(), answers.len(), data.val.metas)
}

fn val_recovery(model: &Model, val: &[EncodedExample], xi: f64) -> (f64, usize) {
    let picks: Vec<Option<bool>> = val
        .par_iter()
        .map(|ex| {
            let t = model.forward_example(ex).unwrap();
            let r = selection::report(&t, xi).unwrap();
            r.selected.map(|i| i == ex.relevant_caption_index)
        })
        .collect();
    let hits: Vec<bool> = picks.into_iter().flatten().collect();
    let n = hits.len();
    (hits.iter().filter(|&&h| h).count() as f64 / n.max(1) as f64, n)
}

fn main() {
    let cmd = std::env::args().nth(1).unwrap_or_else(|| "speed".into());
    match cmd.as_str() {
        "speed" => speed(),
        "overfit" => overfit(),
        "recover" => recover(std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32)),
        "ablate" => ablate(),
        "diag" => diag(
            std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32),
            std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(24),
        ),
        other => eprintln!("unknown probe {other}"),
    }
}

fn speed() {
    let dcfg = DataConfig::default();
    let t0 = Instant::now();
    let (train, val, qv, cv, na, _) = encode_all(&dcfg, 42);
    println!("gen+encode {:?}  qv {qv} cv {cv} answers {na}", t0.elapsed());
    for hidden in [24usize, 32, 48, 64] {
        let mcfg = ModelConfig {
            embed_dim: hidden / 2,
            hidden_dim: hidden,
            attn_dim: hidden / 2,
            decoder_att_dim: hidden,
            decoder_lang_dim: hidden,
            ..ModelConfig::default()
        };
        let model = Model::new(mcfg, qv, cv, na, dcfg.feature_dim, 1);
        let mut tr = Trainer::new(model, 0.002, 1);
        let tcfg = TrainConfig { batch_size: 32, epochs: 1, lr: 0.002, clip_norm: 10.0 };
        let t1 = Instant::now();
        let sub = &train[..512];
        let mut rows: Vec<MetricsRow> = Vec::new();
        tr.run_epochs(sub, &val[..100], &tcfg, 1, SelectionMode::Joint { xi: 0.0 }, &mut rows)
            .unwrap();
        let dt = t1.elapsed().as_secs_f64();
        println!(
            "hidden {hidden}: 512 train + 100 val in {dt:.1}s  ({:.1} ms/ex)  loss {:.3}",
            dt / 512.0 * 1000.0,
            rows[0].train_loss
        );
    }
}

fn overfit() {
    let dcfg = DataConfig::default();
    let (train, _, qv, cv, na, _) = encode_all(&dcfg, 42);
    let model = Model::new(ModelConfig::default(), qv, cv, na, dcfg.feature_dim, 3);
    let mut tr = Trainer::new(model, 0.002, 3);
    let tcfg = TrainConfig { batch_size: 8, epochs: 1, lr: 0.002, clip_norm: 10.0 };
    let fixed = &train[..8];
    let t0 = Instant::now();
    let losses = tr.run_steps(fixed, &tcfg, 500, SelectionMode::Joint { xi: 0.0 }).unwrap();
    println!(
        "500 steps in {:?}: first {:.4} last {:.4} ratio {:.4}",
        t0.elapsed(),
        losses[0],
        losses[499],
        losses[499] / losses[0]
    );
}

fn recover(hidden: usize) {
    let dcfg = DataConfig::default();
    let (train, val, qv, cv, na, metas) = encode_all(&dcfg, 42);
    let mcfg = ModelConfig {
        embed_dim: hidden / 2,
        hidden_dim: hidden,
        attn_dim: hidden / 2,
        decoder_att_dim: hidden,
        decoder_lang_dim: hidden,
        ..ModelConfig::default()
    };
    let model = Model::new(mcfg, qv, cv, na, dcfg.feature_dim, 11);
    let mut tr = Trainer::new(model, 0.002, 11);
    let tcfg = TrainConfig { batch_size: 32, epochs: 1, lr: 0.002, clip_norm: 10.0 };
    let t0 = Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();
    for ep in 0..12 {
        tr.run_epochs(&train, &val, &tcfg, 1, SelectionMode::Joint { xi: 0.0 }, &mut rows)
            .unwrap();
        let (rec, nf) = val_recovery(&tr.model, &val, 0.0);
        let r = rows.last().unwrap();
        println!(
            "ep {ep}: {:?} loss {:.3} val_acc {:.3} train_rec {:?} val_rec {rec:.3} ({nf} feasible)",
            t0.elapsed(),
            r.train_loss,
            r.val_soft_acc,
            r.planted_recovery,
        );
    }
    // criterion 5 probe on the trained model
    let with = relcap::attn_eval::evaluate_attention(&tr.model, &val, &metas, true).unwrap();
    let without = relcap::attn_eval::evaluate_attention(&tr.model, &val, &metas, false).unwrap();
    println!(
        "emd with caa {:.4} vs uniform {:.4} (n {} skipped {})",
        with.mean,
        without.mean,
        with.rows.len(),
        with.skipped
    );
}

fn ablate() {
    let dcfg = DataConfig::default();
    let (train, val, qv, cv, na, _) = encode_all(&dcfg, 42);
    for seed in [1u64, 2, 3] {
        let mut accs = Vec::new();
        for captions in [true, false] {
            let mcfg = ModelConfig {
                embed_dim: 16,
                hidden_dim: 32,
                attn_dim: 16,
                decoder_att_dim: 32,
                decoder_lang_dim: 32,
                use_captions: captions,
                ..ModelConfig::default()
            };
            let model = Model::new(mcfg, qv, cv, na, dcfg.feature_dim, seed);
            let mut tr = Trainer::new(model, 0.002, seed);
            let tcfg = TrainConfig { batch_size: 32, epochs: 1, lr: 0.002, clip_norm: 10.0 };
            let mode = if captions { SelectionMode::Joint { xi: 0.0 } } else { SelectionMode::VqaOnly };
            let t0 = Instant::now();
            let mut rows: Vec<MetricsRow> = Vec::new();
            tr.run_epochs(&train, &val, &tcfg, 6, mode, &mut rows).unwrap();
            let acc = rows.last().unwrap().val_soft_acc;
            println!(
                "seed {seed} captions={captions}: val acc {acc:.4} in {:?}",
                t0.elapsed()
            );
            accs.push(acc);
        }
        println!("seed {seed} gap: {:.2} points", (accs[0] - accs[1]) * 100.0);
    }
}

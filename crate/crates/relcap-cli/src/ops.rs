//! Command bodies behind the argument parser.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use relcap::attn_eval::{evaluate_attention, reports_to_csv, AttentionEvalReport};
use relcap::config::RunConfig;
use relcap::data::{
    build_vocabs, encode_example, generate, load_header, load_split, load_vocabs, save_dataset,
    save_vocabs, write_atomic, DatasetHeader, EncodedExample, QuestionKind, RecordMeta,
    SplitFiles, Vocab, MAX_QUESTION_TOKENS,
};
use relcap::gradcheck::{joint_suite, JointDims, DEFAULT_TOLERANCE};
use relcap::model::Model;
use relcap::trainer::{
    generate_captions, load_checkpoint, read_metrics, save_caption_dump, save_checkpoint,
    swap_captions, write_metrics, MetricsRow, SelectionMode, Trainer,
};

use crate::manifest::RunManifest;
use crate::plot::{bar_chart, line_chart, Series};

pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    pub argv: Vec<String>,
}

impl Ctx {
    fn mode(&self, model: &Model, vqa_only: bool) -> SelectionMode {
        if vqa_only || !model.cfg.use_captions {
            SelectionMode::VqaOnly
        } else {
            SelectionMode::Joint { xi: self.config.select.xi }
        }
    }
}

fn ensure_fresh(paths: &[PathBuf], force: bool) -> anyhow::Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
    }
    Ok(())
}

/// Validate, guard the outputs, open the manifest, run the body, finalize.
/// The body fills `facts` with whatever the run learned.
fn run_guarded(
    ctx: &Ctx,
    command: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    body: impl FnOnce(&mut BTreeMap<String, serde_json::Value>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    ctx.config.validate()?;
    let manifest_path = ctx.out.join("manifest.json");
    let mut guarded: Vec<PathBuf> = outputs.to_vec();
    guarded.push(manifest_path.clone());
    ensure_fresh(&guarded, ctx.force)?;
    fs::create_dir_all(&ctx.out)
        .with_context(|| format!("creating {}", ctx.out.display()))?;

    let mut manifest =
        RunManifest::begin(command, ctx.argv.clone(), ctx.seed, &ctx.config, inputs, outputs);
    manifest.write(&manifest_path)?;
    let mut facts = BTreeMap::new();
    let result = body(&mut facts);
    manifest.facts = facts;
    manifest.finish(&manifest_path, result.as_ref().map(|_| ()).map_err(|e| e))?;
    result
}

struct LoadedSplit {
    examples: Vec<EncodedExample>,
    metas: Vec<RecordMeta>,
    question_vocab: Vocab,
    caption_vocab: Vocab,
    answers: Vec<String>,
    header: DatasetHeader,
}

fn load_encoded(dir: &Path, split: &str) -> anyhow::Result<LoadedSplit> {
    let header = load_header(dir)
        .with_context(|| format!("reading dataset header in {}", dir.display()))?;
    if !header.splits.iter().any(|s| s == split) {
        bail!("dataset in {} has no split {split:?}", dir.display());
    }
    let (question_vocab, caption_vocab, answers) = load_vocabs(dir)?;
    let raw = load_split(&SplitFiles::in_dir(dir, split))?;
    let examples = raw
        .records
        .iter()
        .map(|r| {
            encode_example(
                r,
                &question_vocab,
                &caption_vocab,
                &answers,
                MAX_QUESTION_TOKENS,
                header.config.max_caption_tokens,
                header.config.max_objects,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedSplit { examples, metas: raw.metas, question_vocab, caption_vocab, answers, header })
}

fn load_model(ds: &LoadedSplit, checkpoint: &Path) -> anyhow::Result<Trainer> {
    let q_sha = ds.question_vocab.sha256();
    let c_sha = ds.caption_vocab.sha256();
    let (tr, _) = load_checkpoint(checkpoint, Some((&q_sha, &c_sha)))
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if tr.model.answers != ds.answers.len() {
        bail!(
            "checkpoint expects {} answer candidates, dataset provides {}",
            tr.model.answers,
            ds.answers.len()
        );
    }
    if tr.model.feature_dim != ds.header.config.feature_dim {
        bail!(
            "checkpoint expects feature dim {}, dataset provides {}",
            tr.model.feature_dim,
            ds.header.config.feature_dim
        );
    }
    Ok(tr)
}

pub fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let out = ctx.out.clone();
    let outputs: Vec<PathBuf> = ["dataset.json", "vocab.json"]
        .iter()
        .map(|f| out.join(f))
        .chain(
            ["train", "val"].iter().flat_map(|s| {
                let f = SplitFiles::in_dir(&out, s);
                [f.manifest, f.features, f.meta]
            }),
        )
        .collect();
    run_guarded(ctx, "gen-data", &[], &outputs, |facts| {
        let data = generate(&ctx.config.data, ctx.seed)?;
        save_dataset(&out, ctx.seed, &ctx.config.data, &data)?;
        let (qv, cv, answers) = build_vocabs(&data.train.records, 1, 1)?;
        save_vocabs(&out, &qv, &cv, &answers)?;
        println!(
            "wrote {} train and {} val records to {}",
            data.train.records.len(),
            data.val.records.len(),
            out.display()
        );
        println!(
            "question vocab {}, caption vocab {}, {} answer candidates",
            qv.len(),
            cv.len(),
            answers.len()
        );
        facts.insert("train_records".into(), json!(data.train.records.len()));
        facts.insert("val_records".into(), json!(data.val.records.len()));
        facts.insert("question_vocab".into(), json!(qv.len()));
        facts.insert("caption_vocab".into(), json!(cv.len()));
        facts.insert("answer_candidates".into(), json!(answers.len()));
        facts.insert("question_vocab_sha".into(), json!(qv.sha256()));
        facts.insert("caption_vocab_sha".into(), json!(cv.sha256()));
        Ok(())
    })
}

pub fn train(
    ctx: &Ctx,
    data: &Path,
    limit: Option<usize>,
) -> anyhow::Result<()> {
    let metrics_path = ctx.out.join("metrics.csv");
    let ckpt_path = ctx.out.join("model.ckpt");
    run_guarded(
        ctx,
        "train",
        &[data.to_path_buf()],
        &[metrics_path.clone(), ckpt_path.clone()],
        |facts| {
            let ds = load_encoded(data, "train")?;
            let val = load_encoded(data, "val")?;
            let mut train_ex = ds.examples;
            let mut val_ex = val.examples;
            if let Some(n) = limit {
                train_ex.truncate(n);
                val_ex.truncate(n);
            }
            let model = Model::new(
                ctx.config.model.clone(),
                ds.question_vocab.len(),
                ds.caption_vocab.len(),
                ds.answers.len(),
                ds.header.config.feature_dim,
                ctx.seed,
            );
            let mode = ctx.mode(&model, false);
            let mut tr = Trainer::new(model, ctx.config.train.lr, ctx.seed);
            let mut rows: Vec<MetricsRow> = Vec::new();
            for _ in 0..ctx.config.train.epochs {
                tr.run_epochs(&train_ex, &val_ex, &ctx.config.train, 1, mode, &mut rows)?;
                let r = rows.last().expect("one row per epoch");
                info!(
                    "epoch {} phase {} train_loss {:.4} val_soft_acc {:.4}",
                    r.epoch, r.phase, r.train_loss, r.val_soft_acc
                );
            }
            write_metrics(&metrics_path, &rows)?;
            save_checkpoint(
                &ckpt_path,
                &tr,
                &ds.question_vocab.sha256(),
                &ds.caption_vocab.sha256(),
            )?;
            let last = rows.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} examples: train_loss {:.4}, val_soft_acc {:.4}",
                rows.len(),
                train_ex.len(),
                last.train_loss,
                last.val_soft_acc
            );
            if let Some(r) = last.planted_recovery {
                println!("planted recovery {:.3}", r);
            }
            facts.insert("phase1_lr".into(), json!(tr.opt.lr));
            facts.insert("epochs".into(), json!(rows.len()));
            facts.insert("train_examples".into(), json!(train_ex.len()));
            facts.insert("final_train_loss".into(), json!(last.train_loss));
            facts.insert("final_val_soft_acc".into(), json!(last.val_soft_acc));
            Ok(())
        },
    )
}

pub fn generate_captions_cmd(
    ctx: &Ctx,
    data: &Path,
    checkpoint: &Path,
    split: &str,
) -> anyhow::Result<()> {
    let dump_path = ctx.out.join("captions.jsonl");
    run_guarded(
        ctx,
        "generate-captions",
        &[data.to_path_buf(), checkpoint.to_path_buf()],
        &[dump_path.clone()],
        |facts| {
            let ds = load_encoded(data, split)?;
            let tr = load_model(&ds, checkpoint)?;
            let pairs =
                generate_captions(&tr.model, &ds.examples, &ctx.config.phase2, ctx.seed, 0)?;
            save_caption_dump(&dump_path, &pairs)?;
            println!(
                "sampled {} captions for each of {} pairs into {}",
                ctx.config.phase2.captions_per_pair,
                pairs.len(),
                dump_path.display()
            );
            facts.insert("pairs".into(), json!(pairs.len()));
            facts
                .insert("captions_per_pair".into(), json!(ctx.config.phase2.captions_per_pair));
            Ok(())
        },
    )
}

pub fn finetune(
    ctx: &Ctx,
    data: &Path,
    checkpoint: &Path,
    vqa_only: bool,
) -> anyhow::Result<()> {
    let metrics_path = ctx.out.join("metrics.csv");
    let ckpt_path = ctx.out.join("model.ckpt");
    let train_dump = ctx.out.join("captions_train.jsonl");
    let val_dump = ctx.out.join("captions_val.jsonl");
    run_guarded(
        ctx,
        "finetune",
        &[data.to_path_buf(), checkpoint.to_path_buf()],
        &[metrics_path.clone(), ckpt_path.clone(), train_dump.clone(), val_dump.clone()],
        |facts| {
            let ds = load_encoded(data, "train")?;
            let val = load_encoded(data, "val")?;
            let mut tr = load_model(&ds, checkpoint)?;
            if !tr.model.cfg.use_captions {
                bail!("checkpoint was trained without the caption pathway; nothing to fine-tune");
            }
            let p2 = &ctx.config.phase2;
            let per_pair = p2.captions_per_pair;

            let pairs = generate_captions(&tr.model, &ds.examples, p2, tr.seed, 0)?;
            save_caption_dump(&train_dump, &pairs)?;
            let val_pairs = generate_captions(&tr.model, &val.examples, p2, tr.seed, 1)?;
            save_caption_dump(&val_dump, &val_pairs)?;
            let train_ex = swap_captions(&ds.examples, &pairs, per_pair)?;
            let val_ex = swap_captions(&val.examples, &val_pairs, per_pair)?;

            let phase1_lr = tr.base_lr;
            tr.enter_phase2(p2.lr_factor);
            let mode = ctx.mode(&tr.model, vqa_only || p2.vqa_only);
            let mut rows: Vec<MetricsRow> = Vec::new();
            for _ in 0..p2.epochs {
                tr.run_epochs(&train_ex, &val_ex, &ctx.config.train, 1, mode, &mut rows)?;
                let r = rows.last().expect("one row per epoch");
                info!(
                    "epoch {} phase {} train_loss {:.4} val_soft_acc {:.4}",
                    r.epoch, r.phase, r.train_loss, r.val_soft_acc
                );
            }
            write_metrics(&metrics_path, &rows)?;
            save_checkpoint(
                &ckpt_path,
                &tr,
                &ds.question_vocab.sha256(),
                &ds.caption_vocab.sha256(),
            )?;
            let last = rows.last().expect("at least one epoch");
            println!(
                "fine-tuned {} epochs at lr {}: train_loss {:.4}, val_soft_acc {:.4}",
                rows.len(),
                tr.opt.lr,
                last.train_loss,
                last.val_soft_acc
            );
            facts.insert("phase1_lr".into(), json!(phase1_lr));
            facts.insert("phase2_lr".into(), json!(tr.opt.lr));
            facts.insert("lr_factor".into(), json!(p2.lr_factor));
            facts.insert("captions_per_pair".into(), json!(per_pair));
            facts.insert("final_val_soft_acc".into(), json!(last.val_soft_acc));
            Ok(())
        },
    )
}

fn template_name(kind: QuestionKind) -> &'static str {
    match kind {
        QuestionKind::Color => "color",
        QuestionKind::Count => "count",
        QuestionKind::Exist => "exist",
    }
}

pub fn eval(ctx: &Ctx, data: &Path, checkpoint: &Path, split: &str) -> anyhow::Result<()> {
    let json_path = ctx.out.join("eval.json");
    run_guarded(
        ctx,
        "eval",
        &[data.to_path_buf(), checkpoint.to_path_buf()],
        &[json_path.clone()],
        |facts| {
            let ds = load_encoded(data, split)?;
            let tr = load_model(&ds, checkpoint)?;
            let scores: Vec<f64> = ds
                .examples
                .par_iter()
                .map(|ex| tr.model.forward_example(ex).map(|t| t.soft_score))
                .collect::<Result<_, _>>()?;
            let overall = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
            println!("{split} soft accuracy {overall:.4} (n={})", scores.len());

            let mut templates: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            if ds.metas.len() == ds.examples.len() {
                for (meta, score) in ds.metas.iter().zip(&scores) {
                    let slot = templates.entry(template_name(meta.template)).or_default();
                    slot.0 += score;
                    slot.1 += 1;
                }
                for (name, (sum, n)) in &templates {
                    println!("  {name:<6} {:.4} (n={n})", sum / *n as f64);
                }
            } else {
                println!("  (no generator metadata; template breakdown unavailable)");
            }
            let breakdown: BTreeMap<&str, serde_json::Value> = templates
                .iter()
                .map(|(name, (sum, n))| {
                    (*name, json!({"acc": sum / *n as f64, "n": n}))
                })
                .collect();
            let summary = json!({"overall": overall, "n": scores.len(), "templates": breakdown});
            write_atomic(&json_path, format!("{summary:#}\n").as_bytes())?;
            facts.insert("overall".into(), json!(overall));
            facts.insert("n".into(), json!(scores.len()));
            Ok(())
        },
    )
}

pub fn emd(ctx: &Ctx, data: &Path, checkpoint: &Path, split: &str) -> anyhow::Result<()> {
    let csv_path = ctx.out.join("emd.csv");
    let json_path = ctx.out.join("emd.json");
    run_guarded(
        ctx,
        "emd",
        &[data.to_path_buf(), checkpoint.to_path_buf()],
        &[csv_path.clone(), json_path.clone()],
        |facts| {
            let ds = load_encoded(data, split)?;
            if ds.metas.len() != ds.examples.len() {
                bail!("dataset in {} has no generator metadata (object boxes)", data.display());
            }
            let tr = load_model(&ds, checkpoint)?;
            if !tr.model.cfg.use_caa {
                bail!("checkpoint has no adjustment stage; both emd arms need one model with it");
            }
            let with = evaluate_attention(&tr.model, &ds.examples, &ds.metas, true)?;
            let without = evaluate_attention(&tr.model, &ds.examples, &ds.metas, false)?;
            let refs: Vec<&AttentionEvalReport> = vec![&with, &without];
            write_atomic(&csv_path, &reports_to_csv(&refs)?)?;
            let summary = json!({
                "with_caa": with.summary(),
                "without_caa": without.summary(),
            });
            write_atomic(&json_path, format!("{summary:#}\n").as_bytes())?;
            println!(
                "mean emd  w/ caa {:.4}   w/o caa {:.4}   (n={}, skipped={})",
                with.mean,
                without.mean,
                with.rows.len(),
                with.skipped
            );
            facts.insert("with_caa_mean".into(), json!(with.mean));
            facts.insert("without_caa_mean".into(), json!(without.mean));
            facts.insert("count".into(), json!(with.rows.len()));
            facts.insert("skipped".into(), json!(with.skipped));
            Ok(())
        },
    )
}

pub fn gradcheck(ctx: &Ctx, step: f64) -> anyhow::Result<()> {
    let json_path = ctx.out.join("gradcheck.json");
    run_guarded(ctx, "gradcheck", &[], &[json_path.clone()], |facts| {
        let checks = joint_suite(&JointDims::default(), ctx.seed, step)?;
        let mut rows = Vec::new();
        let mut failed = 0usize;
        for c in &checks {
            let pass = c.summary.passes(DEFAULT_TOLERANCE);
            if !pass {
                failed += 1;
            }
            println!(
                "{:<26} {:>5} coords   max rel err {:.3e}   {}",
                c.name,
                c.summary.checked,
                c.summary.max_rel_err,
                if pass { "PASS" } else { "FAIL" }
            );
            rows.push(json!({
                "name": c.name,
                "checked": c.summary.checked,
                "max_rel_err": c.summary.max_rel_err,
                "pass": pass,
            }));
        }
        write_atomic(&json_path, format!("{:#}\n", json!({"checks": rows})).as_bytes())?;
        facts.insert("checks".into(), json!(checks.len()));
        facts.insert("failed".into(), json!(failed));
        if failed > 0 {
            bail!("{failed} of {} gradient checks failed", checks.len());
        }
        Ok(())
    })
}

fn run_id(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
    if stem == "metrics" || stem == "emd" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str())
        {
            return parent.to_string();
        }
    }
    stem
}

fn dedup_ids(ids: Vec<String>) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    ids.into_iter()
        .map(|id| {
            let n = seen.entry(id.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                id
            } else {
                format!("{id}-{n}")
            }
        })
        .collect()
}

struct EmdSummaryFile {
    id: String,
    with_mean: Option<f64>,
    without_mean: Option<f64>,
}

pub fn report(ctx: &Ctx, metrics: &[PathBuf], emd_files: &[PathBuf]) -> anyhow::Result<()> {
    let mut outputs = vec![
        ctx.out.join("report.md"),
        ctx.out.join("loss.svg"),
        ctx.out.join("accuracy.svg"),
    ];
    if !emd_files.is_empty() {
        outputs.push(ctx.out.join("emd.svg"));
    }
    let inputs: Vec<PathBuf> = metrics.iter().chain(emd_files).cloned().collect();
    run_guarded(ctx, "report", &inputs, &outputs, |facts| {
        let ids = dedup_ids(metrics.iter().map(|p| run_id(p)).collect());
        let mut runs: Vec<(String, Vec<MetricsRow>)> = Vec::new();
        for (path, id) in metrics.iter().zip(ids) {
            let rows = read_metrics(path)
                .with_context(|| format!("reading {}", path.display()))?;
            if rows.is_empty() {
                bail!("{} holds no metric rows", path.display());
            }
            runs.push((id, rows));
        }

        let series_of = |pick: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<Series> {
            runs.iter()
                .map(|(id, rows)| Series {
                    label: id.clone(),
                    points: rows
                        .iter()
                        .filter_map(|r| pick(r).map(|v| (r.epoch as f64, v)))
                        .collect(),
                })
                .filter(|s| !s.points.is_empty())
                .collect()
        };
        let phase_starts: Vec<f64> = {
            let mut xs: Vec<f64> = runs
                .iter()
                .filter_map(|(_, rows)| {
                    rows.iter().find(|r| r.phase == 2).map(|r| r.epoch as f64)
                })
                .collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            xs
        };

        let loss = series_of(&|r| Some(r.train_loss));
        fs::write(
            ctx.out.join("loss.svg"),
            line_chart("training loss", "epoch", "mean joint loss", &loss, &phase_starts),
        )?;
        let acc = series_of(&|r| Some(r.val_soft_acc));
        fs::write(
            ctx.out.join("accuracy.svg"),
            line_chart("validation soft accuracy", "epoch", "soft accuracy", &acc, &phase_starts),
        )?;
        let recovery = series_of(&|r| r.planted_recovery);
        if !recovery.is_empty() {
            let p = ctx.out.join("recovery.svg");
            fs::write(
                &p,
                line_chart(
                    "planted caption recovery",
                    "epoch",
                    "recovery rate",
                    &recovery,
                    &phase_starts,
                ),
            )?;
        }

        let mut emd_rows: Vec<EmdSummaryFile> = Vec::new();
        let emd_ids = dedup_ids(emd_files.iter().map(|p| run_id(p)).collect());
        for (path, id) in emd_files.iter().zip(emd_ids) {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let mean_of = |key: &str| v.get(key).and_then(|s| s.get("mean")).and_then(|m| m.as_f64());
            emd_rows.push(EmdSummaryFile {
                id,
                with_mean: mean_of("with_caa"),
                without_mean: mean_of("without_caa"),
            });
        }
        if !emd_rows.is_empty() {
            let mut bars = Vec::new();
            for r in &emd_rows {
                if let Some(m) = r.with_mean {
                    bars.push((format!("{} w/ caa", r.id), m, 0));
                }
                if let Some(m) = r.without_mean {
                    bars.push((format!("{} w/o caa", r.id), m, 1));
                }
            }
            fs::write(
                ctx.out.join("emd.svg"),
                bar_chart("attention distance to truth", "mean emd", &bars),
            )?;
        }

        let mut md = String::from("# Run report\n\n## Training\n\n");
        md.push_str("| run | epochs | final train loss | final val soft acc | planted recovery |\n");
        md.push_str("|---|---|---|---|---|\n");
        for (id, rows) in &runs {
            let last = rows.last().expect("non-empty checked above");
            let rec = rows
                .iter()
                .rev()
                .find_map(|r| r.planted_recovery)
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "-".into());
            md.push_str(&format!(
                "| {id} | {} | {:.4} | {:.4} | {rec} |\n",
                rows.len(),
                last.train_loss,
                last.val_soft_acc
            ));
        }
        md.push_str("\n![training loss](loss.svg)\n\n![validation soft accuracy](accuracy.svg)\n");
        if !recovery.is_empty() {
            md.push_str("\n![planted caption recovery](recovery.svg)\n");
        }
        if !emd_rows.is_empty() {
            md.push_str("\n## Attention distance\n\n");
            md.push_str("| run | mean emd w/ caa | mean emd w/o caa |\n|---|---|---|\n");
            for r in &emd_rows {
                let f = |m: Option<f64>| {
                    m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                };
                md.push_str(&format!(
                    "| {} | {} | {} |\n",
                    r.id,
                    f(r.with_mean),
                    f(r.without_mean)
                ));
            }
            md.push_str("\n![attention distance](emd.svg)\n");
        }
        write_atomic(&ctx.out.join("report.md"), md.as_bytes())?;
        println!("report written to {}", ctx.out.join("report.md").display());
        facts.insert("runs".into(), json!(runs.len()));
        facts.insert("emd_summaries".into(), json!(emd_rows.len()));
        Ok(())
    })
}

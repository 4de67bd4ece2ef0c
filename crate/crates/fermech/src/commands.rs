//! The `gen-synthetic`, `train`, `eval`, `merge`, `correct` and `report`
//! commands. Each reads and writes plain files under the run's output
//! directory; none of them embed timestamps, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fermech_core::backbone::InputKind;
use fermech_core::correction::{count_changes, group_by_similarity, vote_correct};
use fermech_core::data::{gen_synthetic, isotropic_specs, LabeledSample, Payload};
use fermech_core::ensemble::merge_batch;
use fermech_core::metrics::{mean_f1, per_class_f1, ConfusionMatrix};
use fermech_core::train::{argmax_all, evaluate, train, Models};
use fermech_core::{rng_from_seed, Label};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats;

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const GUS_SCORES: &str = "scores_gus.csv";
pub const MRE_SCORES: &str = "scores_mre.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const MERGED: &str = "merged_predictions.csv";
pub const CORRECTED: &str = "corrected_predictions.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Joins a feature file with a label file by id, in feature-file order.
pub fn load_dataset(features: &Path, labels: &Path) -> Result<Vec<LabeledSample>> {
    let feats = formats::read_features(features)?;
    let mut by_id: BTreeMap<String, Label> = formats::read_labels(labels)?.into_iter().collect();
    let mut samples = Vec::with_capacity(feats.len());
    for (id, f) in feats {
        let label = by_id
            .remove(&id)
            .ok_or_else(|| CliError::bad_file(labels, format!("no label for id `{id}`")))?;
        samples.push(LabeledSample::new(id, Payload::Vector(f), label));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(CliError::bad_file(features, format!("no features for labeled id `{id}`")));
    }
    if samples.is_empty() {
        return Err(CliError::bad_file(features, "no samples"));
    }
    Ok(samples)
}

/// Writes seeded Gaussian train and eval splits.
pub fn run_gen_synthetic(cfg: &RunConfig) -> Result<String> {
    let s = &cfg.synthetic;
    let specs = isotropic_specs(s.dim, s.separation, s.sigma)?;
    let mut rng = rng_from_seed(cfg.seed);
    let train_set = gen_synthetic(&specs, s.train_per_class, &mut rng, "train_")?;
    let eval_set = gen_synthetic(&specs, s.eval_per_class, &mut rng, "eval_")?;
    for (set, fpath, lpath) in [
        (&train_set, &cfg.data.train_features, &cfg.data.train_labels),
        (&eval_set, &cfg.data.eval_features, &cfg.data.eval_labels),
    ] {
        let feats: Vec<(String, Vec<f64>)> = set
            .iter()
            .map(|x| (x.id.clone(), x.payload.as_slice().to_vec()))
            .collect();
        let labels: Vec<(String, Label)> = set.iter().map(|x| (x.id.clone(), x.label)).collect();
        formats::write_features(fpath, &feats)?;
        formats::write_labels(lpath, &labels)?;
    }
    Ok(format!(
        "wrote {} training and {} evaluation samples (d = {})",
        train_set.len(),
        eval_set.len(),
        s.dim
    ))
}

fn input_dim(data: &[LabeledSample], path: &Path) -> Result<usize> {
    let d = data[0].payload.len();
    if let Some(bad) = data.iter().find(|s| s.payload.len() != d) {
        return Err(CliError::bad_file(path, format!("feature width differs for `{}`", bad.id)));
    }
    Ok(d)
}

/// Trains on the training split, then optionally fine-tunes on a second
/// split. Writes the checkpoint and the per-epoch log.
pub fn run_train(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(&cfg.data.train_features, &cfg.data.train_labels)?;
    let mut pipeline = cfg.pipeline.clone();
    pipeline.backbone.input = InputKind::Vector {
        dim: input_dim(&data, &cfg.data.train_features)?,
    };
    let mut models = Models::init(&pipeline)?;
    let mut log = train(&mut models, &data, &pipeline, pipeline.train.epochs, "train")?;
    match (&cfg.data.finetune_features, &cfg.data.finetune_labels) {
        (Some(f), Some(l)) if cfg.finetune_epochs > 0 => {
            let tune = load_dataset(f, l)?;
            if input_dim(&tune, f)? != data[0].payload.len() {
                return Err(CliError::bad_file(f, "feature width differs from the training split"));
            }
            log.extend(train(&mut models, &tune, &pipeline, cfg.finetune_epochs, "finetune")?);
        }
        (None, _) if cfg.finetune_epochs > 0 => {
            return Err(CliError::config(
                "train.finetune_epochs",
                "fine-tuning needs data.finetune_features and data.finetune_labels",
            ));
        }
        _ => {}
    }
    formats::save_checkpoint(&out(cfg, CHECKPOINT), &models)?;
    formats::write_log(&out(cfg, TRAIN_LOG), &log)?;
    let last = log.last();
    Ok(format!(
        "trained {} epochs; final MRE loss {:.4}, GUS loss {:.4}",
        log.len(),
        last.map_or(f64::NAN, |r| r.mre_loss),
        last.map_or(f64::NAN, |r| r.gus_loss)
    ))
}

/// Scores the evaluation split with both paths and writes the score
/// files, the embeddings used for correction and an F1 report.
pub fn run_eval(cfg: &RunConfig) -> Result<String> {
    let ckpt = out(cfg, CHECKPOINT);
    let models = formats::load_checkpoint(&ckpt)?;
    let data = load_dataset(&cfg.data.eval_features, &cfg.data.eval_labels)?;
    let want = models.backbone().config().input.input_len();
    if input_dim(&data, &cfg.data.eval_features)? != want {
        return Err(CliError::bad_file(
            &cfg.data.eval_features,
            format!("features have width {}, the checkpoint expects {want}", data[0].payload.len()),
        ));
    }
    let res = evaluate(&models, &data, &cfg.pipeline.gus, cfg.pipeline.train.batch_size)?;
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let zip = |v: &[Vec<f64>]| -> Vec<(String, Vec<f64>)> { ids.iter().cloned().zip(v.iter().cloned()).collect() };
    formats::write_scores(&out(cfg, GUS_SCORES), &zip(&res.gus_scores))?;
    formats::write_scores(&out(cfg, MRE_SCORES), &zip(&res.mre_scores))?;
    formats::write_features(&out(cfg, EMBEDDINGS), &zip(&res.embeddings))?;

    let truth: Vec<Label> = data.iter().map(|s| s.label).collect();
    let rows = vec![
        f1_row("GUS", &truth, &argmax_all(&res.gus_scores))?,
        f1_row("MRE", &truth, &argmax_all(&res.mre_scores))?,
    ];
    let table = render_table(&rows);
    formats::write_text(&out(cfg, EVAL_REPORT), &table)?;
    Ok(table)
}

/// Aligns several id-keyed files on the id order of the first.
fn align<A, T>(first: &[(String, A)], other: Vec<(String, T)>, path: &Path) -> Result<Vec<T>> {
    let mut by_id: BTreeMap<String, T> = other.into_iter().collect();
    let aligned = first
        .iter()
        .map(|(id, _)| {
            by_id
                .remove(id)
                .ok_or_else(|| CliError::bad_file(path, format!("missing id `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(id) = by_id.keys().next() {
        return Err(CliError::bad_file(path, format!("unexpected id `{id}`")));
    }
    Ok(aligned)
}

/// Weighted merge of the GUS and MRE scores, plus the DMUE scores when a
/// file is configured, followed by argmax.
pub fn run_merge(cfg: &RunConfig) -> Result<String> {
    let gus = formats::read_scores(&cfg.merge.gus_scores)?;
    let mre = align(&gus, formats::read_scores(&cfg.merge.mre_scores)?, &cfg.merge.mre_scores)?;
    let gus_scores: Vec<Vec<f64>> = gus.iter().map(|r| r.1.clone()).collect();
    let w = cfg.weights;
    let mut sources: Vec<(&str, &[Vec<f64>], f64)> = vec![("gus", &gus_scores, w.gus), ("mre", &mre, w.mre)];
    let dmue;
    match &cfg.merge.dmue_scores {
        Some(p) => {
            dmue = align(&gus, formats::read_scores(p)?, p)?;
            sources.push(("dmue", &dmue, w.dmue));
        }
        None => log::info!("no DMUE score file configured; merging GUS and MRE only"),
    }
    if sources.iter().all(|s| s.2 == 0.0) {
        return Err(CliError::config("ensemble.weights", "all weights of the available sources are zero"));
    }
    let labels = merge_batch(&sources)?;
    let rows: Vec<(String, Label)> = gus.iter().map(|r| r.0.clone()).zip(labels).collect();
    formats::write_labels(&out(cfg, MERGED), &rows)?;
    Ok(format!("merged {} sources into {} predictions", sources.len(), rows.len()))
}

/// Similarity-vote correction of a prediction file.
pub fn run_correct(cfg: &RunConfig) -> Result<String> {
    let preds = formats::read_labels(&cfg.correct_predictions)?;
    let feats = align(&preds, formats::read_features(&cfg.correct_features)?, &cfg.correct_features)?;
    let keyed: Vec<(String, Vec<f64>)> = preds.iter().map(|p| p.0.clone()).zip(feats).collect();
    let partition = group_by_similarity(&keyed, &cfg.correction)?;
    let before: BTreeMap<String, Label> = preds.iter().cloned().collect();
    let after = vote_correct(&partition, &before, &cfg.correction)?;
    let changes = count_changes(&before, &after);
    let rows: Vec<(String, Label, bool)> = preds
        .iter()
        .map(|(id, old)| {
            let new = after[id];
            (id.clone(), new, new != *old)
        })
        .collect();
    formats::write_corrected(&out(cfg, CORRECTED), &rows)?;
    let eligible = partition
        .groups()
        .iter()
        .filter(|g| g.len() >= cfg.correction.min_subset)
        .count();
    Ok(format!(
        "changed {changes} of {} predictions ({eligible} subsets of size >= {})",
        rows.len(),
        cfg.correction.min_subset
    ))
}

/// Per-class F1 row of the report table.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Row {
    pub method: String,
    pub per_class: [f64; 6],
    pub mean: f64,
}

pub fn f1_row(method: &str, truth: &[Label], predicted: &[Label]) -> Result<F1Row> {
    let cm = ConfusionMatrix::from_predictions(truth, predicted)?;
    let per_class = per_class_f1(&cm);
    Ok(F1Row {
        method: method.to_string(),
        per_class,
        mean: mean_f1(&per_class),
    })
}

/// Aligned text table with four decimals.
pub fn render_table(rows: &[F1Row]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len()) + 2;
    let mut s = format!("{:<width$}", "Method");
    for name in Label::ALL.iter().map(|l| l.code()).chain(["MEAN"]) {
        s.push_str(&format!("{name:>8}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{:<width$}", r.method));
        for v in r.per_class.iter().chain([&r.mean]) {
            s.push_str(&format!("{v:>8.4}"));
        }
        s.push('\n');
    }
    s
}

fn render_csv(rows: &[F1Row]) -> String {
    let mut s = String::from("method,an,di,fe,ha,sa,su,mean\n");
    for r in rows {
        let vals: Vec<String> = r.per_class.iter().chain([&r.mean]).map(|v| v.to_string()).collect();
        s.push_str(&format!("{},{}\n", r.method, vals.join(",")));
    }
    s
}

/// F1 table over every prediction source found in the output directory.
pub fn run_report(cfg: &RunConfig) -> Result<String> {
    let truth = formats::read_labels(&cfg.report_labels)?;
    let truth_labels: Vec<Label> = truth.iter().map(|t| t.1).collect();
    let mut rows = Vec::new();
    let sources: [(&str, &str); 4] = [
        ("GUS", GUS_SCORES),
        ("MRE", MRE_SCORES),
        ("Ensembled", MERGED),
        ("Corrected", CORRECTED),
    ];
    for (method, file) in sources {
        let path = out(cfg, file);
        if !path.exists() {
            continue;
        }
        let preds: Vec<(String, Label)> = match file {
            GUS_SCORES | MRE_SCORES => formats::read_scores(&path)?
                .into_iter()
                .map(|(id, s)| (id, fermech_core::ensemble::predict(&s)))
                .collect(),
            CORRECTED => formats::read_corrected(&path)?
                .into_iter()
                .map(|(id, l, _)| (id, l))
                .collect(),
            _ => formats::read_labels(&path)?,
        };
        let predicted = align(&truth, preds, &path)?;
        rows.push(f1_row(method, &truth_labels, &predicted)?);
    }
    if rows.is_empty() {
        return Err(CliError::bad_file(&cfg.out_dir, "no score or prediction files to report on"));
    }
    let table = render_table(&rows);
    formats::write_text(&out(cfg, REPORT_TXT), &table)?;
    formats::write_text(&out(cfg, REPORT_CSV), &render_csv(&rows))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_aligned_with_four_decimals() {
        let truth = [Label::Anger, Label::Disgust, Label::Fear, Label::Happiness, Label::Sadness, Label::Surprise];
        let rows = vec![f1_row("Ensembled", &truth, &truth).unwrap()];
        let t = render_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Method           AN      DI      FE      HA      SA      SU    MEAN");
        assert_eq!(lines[1], "Ensembled    1.0000  1.0000  1.0000  1.0000  1.0000  1.0000  1.0000");
        assert_eq!(render_csv(&rows).lines().nth(1), Some("Ensembled,1,1,1,1,1,1,1"));
    }
}

//! CSV files, checkpoints and the training log.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file reads back to the exact values that were written. Row numbers in
//! errors are file line numbers (the header is line 1).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use fermech_core::backbone::{BackboneConfig, BackboneParams, BackboneState, InputKind};
use fermech_core::ensemble::ScoreVector;
use fermech_core::gus::{Activation, GcnLayer, GusHead};
use fermech_core::mre::{BranchParams, MreModel};
use fermech_core::train::{EpochRecord, Models};
use fermech_core::{Label, Tensor, NUM_CLASSES};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Sum tolerance for score rows read from disk.
pub const FILE_SCORE_TOLERANCE: f64 = 1e-6;

pub const SCORE_HEADER: [&str; 7] = ["id", "an", "di", "fe", "ha", "sa", "su"];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::bad_file(path, format!("{other:?}")),
    }
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| csv_err(path, e))
}

fn finish<W: Write>(w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| CliError::bad_file(path, e.to_string()))?
        .flush()
        .map_err(|e| CliError::io(path, e))
}

/// Reads a headed CSV into `(line, fields)` pairs after checking the
/// header with `check_header`. Ids in the first column must be unique.
fn read_rows(
    path: &Path,
    check_header: impl Fn(&csv::StringRecord) -> std::result::Result<(), String>,
) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(&header).map_err(|reason| CliError::bad_row(path, 1, reason))?;
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::bad_row(path, line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(CliError::bad_row(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(CliError::bad_row(path, line, format!("duplicate id `{}`", &rec[0])));
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| CliError::bad_row(path, line, format!("`{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::bad_row(path, line, format!("`{field}` is not finite")));
    }
    Ok(v)
}

fn parse_label(path: &Path, line: usize, field: &str) -> Result<Label> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::bad_row(path, line, format!("unknown label `{field}`")))
}

fn expect_header(expected: &'static [&'static str]) -> impl Fn(&csv::StringRecord) -> std::result::Result<(), String> {
    move |h| {
        if h.iter().eq(expected.iter().copied()) {
            Ok(())
        } else {
            Err(format!("expected header `{}`", expected.join(",")))
        }
    }
}

// ---- features ------------------------------------------------------------

/// `id,f0,...,f{d-1}`
pub fn write_features(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut w = csv_writer(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    write_row(&mut w, path, &header)?;
    for (id, f) in rows {
        if f.len() != d {
            return Err(CliError::bad_file(path, format!("feature width differs for `{id}`")));
        }
        let mut rec = vec![id.clone()];
        rec.extend(f.iter().map(|x| x.to_string()));
        write_row(&mut w, path, &rec)?;
    }
    finish(w, path)
}

pub fn read_features(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let rows = read_rows(path, |h| {
        let ok = h.len() >= 2
            && &h[0] == "id"
            && h.iter().skip(1).enumerate().all(|(k, f)| f == format!("f{k}"));
        if ok {
            Ok(())
        } else {
            Err("expected header `id,f0,f1,...`".into())
        }
    })?;
    rows.into_iter()
        .map(|(line, rec)| {
            let f = rec
                .iter()
                .skip(1)
                .map(|x| parse_f64(path, line, x))
                .collect::<Result<Vec<_>>>()?;
            Ok((rec[0].to_string(), f))
        })
        .collect()
}

// ---- labels and predictions ----------------------------------------------

/// `id,label` with two-letter class codes.
pub fn write_labels(path: &Path, rows: &[(String, Label)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &["id".into(), "label".into()])?;
    for (id, label) in rows {
        write_row(&mut w, path, &[id.clone(), label.code().into()])?;
    }
    finish(w, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, Label)>> {
    read_rows(path, |h| {
        if h.len() >= 2 && &h[0] == "id" && &h[1] == "label" {
            Ok(())
        } else {
            Err("expected header `id,label`".into())
        }
    })?
    .into_iter()
    .map(|(line, rec)| Ok((rec[0].to_string(), parse_label(path, line, &rec[1])?)))
    .collect()
}

/// `id,label,changed` with `changed` in {0, 1}.
pub fn write_corrected(path: &Path, rows: &[(String, Label, bool)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &["id".into(), "label".into(), "changed".into()])?;
    for (id, label, changed) in rows {
        let flag = if *changed { "1" } else { "0" };
        write_row(&mut w, path, &[id.clone(), label.code().into(), flag.into()])?;
    }
    finish(w, path)
}

pub fn read_corrected(path: &Path) -> Result<Vec<(String, Label, bool)>> {
    read_rows(path, expect_header(&["id", "label", "changed"]))?
        .into_iter()
        .map(|(line, rec)| {
            let changed = match &rec[2] {
                "0" => false,
                "1" => true,
                other => return Err(CliError::bad_row(path, line, format!("changed must be 0 or 1, got `{other}`"))),
            };
            Ok((rec[0].to_string(), parse_label(path, line, &rec[1])?, changed))
        })
        .collect()
}

// ---- scores ----------------------------------------------------------------

pub fn write_scores(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &SCORE_HEADER.map(String::from))?;
    for (id, s) in rows {
        if s.len() != NUM_CLASSES {
            return Err(CliError::bad_file(path, format!("`{id}` has {} scores", s.len())));
        }
        let mut rec = vec![id.clone()];
        rec.extend(s.iter().map(|x| x.to_string()));
        write_row(&mut w, path, &rec)?;
    }
    finish(w, path)
}

/// Reads post-softmax scores. Rows whose sum is off by more than
/// [`FILE_SCORE_TOLERANCE`] are rejected; accepted rows are rescaled to
/// sum to one, which leaves their argmax unchanged.
pub fn read_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    read_rows(path, expect_header(&SCORE_HEADER))?
        .into_iter()
        .map(|(line, rec)| {
            let raw = rec
                .iter()
                .skip(1)
                .map(|x| parse_f64(path, line, x))
                .collect::<Result<Vec<_>>>()?;
            ScoreVector::with_tolerance(&raw, FILE_SCORE_TOLERANCE)
                .map_err(|reason| CliError::bad_row(path, line, reason))?;
            let sum: f64 = raw.iter().sum();
            Ok((rec[0].to_string(), raw.iter().map(|x| x / sum).collect()))
        })
        .collect()
}

// ---- checkpoints ------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "fermech-checkpoint 1";

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
    let vals: Vec<String> = t.data().iter().map(|x| x.to_string()).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
}

/// Text checkpoint holding the backbone, the mixing branch and the graph
/// head. Values round-trip bit for bit.
pub fn save_checkpoint(path: &Path, models: &Models) -> Result<()> {
    let bb = models.backbone();
    let cfg = bb.config();
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    match cfg.input {
        InputKind::Vector { dim } => {
            let _ = writeln!(out, "input vector {dim}");
        }
        InputKind::Image {
            height,
            width,
            channels,
        } => {
            let _ = writeln!(out, "input image {height} {width} {channels}");
        }
    }
    let _ = writeln!(
        out,
        "mid {} {} {}\nhigh {}\nseed {}\nstep {}",
        cfg.mid_channels,
        cfg.mid_height,
        cfg.mid_width,
        cfg.high_dim,
        cfg.seed,
        bb.step()
    );
    for (name, t) in bb.params().tensors() {
        write_tensor(&mut out, name, t);
    }
    for (name, t) in models.mre.branch.tensors() {
        write_tensor(&mut out, name, t);
    }
    for (l, layer) in models.gus_head.layers.iter().enumerate() {
        write_tensor(&mut out, &format!("gcn_w{l}"), &layer.w);
    }
    let mut f = create(path)?;
    f.write_all(out.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Models> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| CliError::bad_file(path, format!("truncated before {what}")))
    };
    let (line, magic) = next("header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CliError::bad_row(path, line, "not a fermech checkpoint"));
    }
    let mut fields = |key: &str| -> Result<(usize, Vec<u64>)> {
        let (line, l) = next(key)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(CliError::bad_row(path, line, format!("expected `{key}`")));
        }
        let rest: Vec<&str> = parts.collect();
        let skip = usize::from(key == "input");
        let nums = rest
            .iter()
            .skip(skip)
            .map(|s| s.parse::<u64>().map_err(|_| CliError::bad_row(path, line, format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if key == "input" {
            let kind = rest.first().copied().unwrap_or("");
            let want = match kind {
                "vector" => 1,
                "image" => 3,
                _ => return Err(CliError::bad_row(path, line, format!("unknown input kind `{kind}`"))),
            };
            if nums.len() != want {
                return Err(CliError::bad_row(path, line, "wrong number of input dimensions"));
            }
        }
        Ok((line, nums))
    };
    let (_, input) = fields("input")?;
    let (line, mid) = fields("mid")?;
    if mid.len() != 3 {
        return Err(CliError::bad_row(path, line, "expected three mid dimensions"));
    }
    let (_, high) = fields("high")?;
    let (_, seed) = fields("seed")?;
    let (_, step) = fields("step")?;
    let one = |v: &[u64]| v.first().copied().unwrap_or(0);
    let config = BackboneConfig {
        input: match input.as_slice() {
            [dim] => InputKind::Vector { dim: *dim as usize },
            [h, w, c] => InputKind::Image {
                height: *h as usize,
                width: *w as usize,
                channels: *c as usize,
            },
            _ => unreachable!("checked above"),
        },
        mid_channels: mid[0] as usize,
        mid_height: mid[1] as usize,
        mid_width: mid[2] as usize,
        high_dim: one(&high) as usize,
        num_classes: NUM_CLASSES,
        seed: one(&seed),
    };

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    while let Some((line, head)) = lines.next() {
        let mut parts = head.split_whitespace();
        let (Some("tensor"), Some(name)) = (parts.next(), parts.next()) else {
            return Err(CliError::bad_row(path, line, "expected `tensor <name> <dims>`"));
        };
        let shape = parts
            .map(|s| s.parse::<usize>().map_err(|_| CliError::bad_row(path, line, format!("bad dimension `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let (line, body) = lines
            .next()
            .ok_or_else(|| CliError::bad_file(path, format!("missing values for `{name}`")))?;
        let data = body
            .split_whitespace()
            .map(|s| parse_f64(path, line, s))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| CliError::bad_row(path, line, e.to_string()))?;
        tensors.push((name.to_string(), t));
    }
    let mut take = |name: &str| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CliError::bad_file(path, format!("missing tensor `{name}`")))?;
        Ok(tensors.remove(i).1)
    };
    let params = BackboneParams {
        w1: take("w1")?,
        b1: take("b1")?,
        w2: take("w2")?,
        b2: take("b2")?,
        w3: take("w3")?,
        b3: take("b3")?,
    };
    let branch = BranchParams {
        w: take("branch_w")?,
        b: take("branch_b")?,
    };
    let mut layers = Vec::new();
    while let Ok(w) = take(&format!("gcn_w{}", layers.len())) {
        layers.push(GcnLayer {
            w,
            activation: Activation::Relu,
        });
    }
    if let Some(last) = layers.last_mut() {
        last.activation = Activation::Identity;
    }
    if let Some((name, _)) = tensors.first() {
        return Err(CliError::bad_file(path, format!("unexpected tensor `{name}`")));
    }
    let bad = |e: fermech_core::Error| CliError::bad_file(path, e.to_string());
    let backbone = BackboneState::from_parts(config, params, one(&step)).map_err(bad)?;
    if branch.w.shape() != [backbone.config().mid_channels, NUM_CLASSES] || branch.b.shape() != [NUM_CLASSES] {
        return Err(CliError::bad_file(path, "branch shape does not match the backbone"));
    }
    let gus_head = GusHead { layers };
    gus_head.validate(backbone.config().high_dim).map_err(bad)?;
    Ok(Models {
        mre: MreModel { backbone, branch },
        gus_head,
    })
}

// ---- training log --------------------------------------------------------

#[derive(Serialize)]
struct LogLine<'a> {
    phase: &'a str,
    epoch: usize,
    mre_loss: f64,
    mre_high_loss: f64,
    mre_branch_loss: f64,
    gus_loss: f64,
    mre_mean_f1: f64,
    gus_mean_f1: f64,
}

/// One JSON object per line.
pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = create(path)?;
    for r in records {
        let line = LogLine {
            phase: r.phase,
            epoch: r.epoch,
            mre_loss: r.mre_loss,
            mre_high_loss: r.mre_high_loss,
            mre_branch_loss: r.mre_branch_loss,
            gus_loss: r.gus_loss,
            mre_mean_f1: r.mre_mean_f1,
            gus_mean_f1: r.gus_mean_f1,
        };
        serde_json::to_writer(&mut f, &line)
            .map_err(|e| CliError::bad_file(path, e.to_string()))?;
        f.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    f.flush().map_err(|e| CliError::io(path, e))
}

/// Writes text as-is.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

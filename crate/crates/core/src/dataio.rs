//! On-disk formats.
//!
//! * dataset: a `manifest.tsv` with one row per utterance
//!   (`utterance_id <TAB> speaker_id <TAB> age_years <TAB> group_id <TAB>
//!   relative_path`) next to a `frames/` directory of binary frame files,
//! * frame file: `u32 c, u32 t` little endian, then `c * t` f32 values in
//!   row-major channel-by-time order,
//! * trial list: `enroll_id test_id label` per line, label 1 for same
//!   speaker,
//! * embedding export: comma-separated `utterance_id,speaker_id,age_years`
//!   followed by the embedding values,
//! * evaluation report: a fixed header and one row per trial set.
//!
//! Floats in text files use the shortest representation that parses back
//! to the same value, so write -> read is lossless.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::FeatureSequence;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::synth::{Dataset, Trial};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const FRAMES_DIR: &str = "frames";
pub const REPORT_HEADER: &str = "trial_set eer_pct min_dcf n_target n_nontarget";

/// Write one frame matrix. Frames are stored as f32 regardless of the
/// in-memory precision.
pub fn write_frames<F: Real>(path: &Path, frames: &Tensor<F>) -> Result<()> {
    if frames.rank() != 2 {
        return Err(Error::Shape(format!(
            "frame files hold rank-2 matrices, got {:?}",
            frames.shape()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let (c, t) = (frames.shape()[0] as u32, frames.shape()[1] as u32);
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    for &v in frames.data() {
        w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 8];
    r.read_exact(&mut hdr)
        .map_err(|_| Error::Data(format!("{}: truncated frame header", path.display())))?;
    let c = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
    if c == 0 || t == 0 || c.saturating_mul(t) > (1 << 28) {
        return Err(Error::Data(format!(
            "{}: implausible frame shape {c} x {t}",
            path.display()
        )));
    }
    let mut buf = vec![0u8; 4 * c * t];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data(format!("{}: truncated frame payload", path.display())))?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after {c} x {t} payload",
            path.display()
        )));
    }
    let data = buf
        .chunks_exact(4)
        .map(|b| F::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(vec![c, t], data)
}

fn frame_rel_path(id: &str) -> String {
    format!("{FRAMES_DIR}/{id}.bin")
}

/// Write a dataset directory: manifest plus one frame file per utterance.
pub fn save_dataset<F: Real>(ds: &Dataset<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(FRAMES_DIR))?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
    for (item, &group) in ds.items.iter().zip(&ds.groups) {
        let rel = frame_rel_path(&item.utterance_id);
        writeln!(
            m,
            "{}\t{}\t{}\t{}\t{}",
            item.utterance_id, item.speaker_id, item.age_years, group, rel
        )?;
        write_frames(&dir.join(&rel), &item.frames)?;
    }
    m.flush()?;
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`]. The manifest is
/// the source of truth for ages and groups.
pub fn load_dataset<F: Real>(dir: &Path) -> Result<Dataset<F>> {
    let path = dir.join(MANIFEST_NAME);
    let file = File::open(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut items = Vec::new();
    let mut groups = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!(
                "{}:{}: expected 5 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate utterance id `{id}`",
                path.display(),
                lineno + 1
            )));
        }
        let speaker: usize = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad speaker id", path.display(), lineno + 1)))?;
        let age: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad age", path.display(), lineno + 1)))?;
        let group: usize = fields[3]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad group id", path.display(), lineno + 1)))?;
        let frames = read_frames(&dir.join(fields[4]))?;
        items.push(FeatureSequence::new(id, speaker, age, frames)?);
        groups.push(group);
    }
    if items.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    Ok(Dataset {
        items,
        groups,
        age_direction: Vec::new(),
    })
}

/// Write a trial list using utterance ids.
pub fn write_trials<F: Real>(path: &Path, ds: &Dataset<F>, trials: &[Trial]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tr in trials {
        writeln!(
            w,
            "{} {} {}",
            ds.items[tr.enroll].utterance_id,
            ds.items[tr.test].utterance_id,
            if tr.target { 1 } else { 0 }
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trial list back into item indices. Unknown utterance ids are
/// collected and reported together.
pub fn read_trials(path: &Path, index: &HashMap<String, usize>) -> Result<Vec<Trial>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut trials = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected `enroll test label`",
                path.display(),
                lineno + 1
            )));
        }
        let target = match fields[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Data(format!(
                    "{}:{}: label must be 0 or 1, got `{other}`",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let mut lookup = |id: &str| -> Option<usize> {
            match index.get(id) {
                Some(&i) => Some(i),
                None => {
                    if !missing.iter().any(|m| m == id) {
                        missing.push(id.to_string());
                    }
                    None
                }
            }
        };
        let enroll = lookup(fields[0]);
        let test = lookup(fields[1]);
        if let (Some(enroll), Some(test)) = (enroll, test) {
            trials.push(Trial {
                enroll,
                test,
                target,
            });
        }
    }
    if !missing.is_empty() {
        missing.sort();
        let shown = missing
            .iter()
            .take(8)
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        let more = if missing.len() > 8 {
            format!(" (+{} more)", missing.len() - 8)
        } else {
            String::new()
        };
        return Err(Error::Data(format!(
            "{}: unknown utterance ids: {shown}{more}",
            path.display()
        )));
    }
    if trials.is_empty() {
        return Err(Error::Data(format!("{}: empty trial list", path.display())));
    }
    Ok(trials)
}

/// Id -> item index map for trial resolution.
pub fn id_index<F: Real>(ds: &Dataset<F>) -> HashMap<String, usize> {
    ds.items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.utterance_id.clone(), i))
        .collect()
}

/// Write embedding rows: `utterance_id,speaker_id,age_years,v0,...,v{d-1}`.
pub fn write_embeddings<F: Real>(
    path: &Path,
    ds: &Dataset<F>,
    rows: &Tensor<F>,
) -> Result<()> {
    if rows.rank() != 2 || rows.shape()[0] != ds.items.len() {
        return Err(Error::Shape(format!(
            "write_embeddings: {:?} rows for {} items",
            rows.shape(),
            ds.items.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (i, item) in ds.items.iter().enumerate() {
        write!(w, "{},{},{}", item.utterance_id, item.speaker_id, item.age_years)?;
        for &v in rows.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an embedding export: ids, speakers, ages, and the value matrix.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<usize>, Vec<f64>, Tensor<f64>)> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    let mut speakers = Vec::new();
    let mut ages = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Data(format!(
                "{}:{}: too few columns",
                path.display(),
                lineno + 1
            )));
        }
        let d = fields.len() - 3;
        if *width.get_or_insert(d) != d {
            return Err(Error::Data(format!(
                "{}:{}: inconsistent embedding width",
                path.display(),
                lineno + 1
            )));
        }
        ids.push(fields[0].to_string());
        speakers.push(fields[1].parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad speaker id", path.display(), lineno + 1))
        })?);
        ages.push(fields[2].parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad age", path.display(), lineno + 1))
        })?);
        for f in &fields[3..] {
            values.push(f.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad embedding value", path.display(), lineno + 1))
            })?);
        }
    }
    let d = width.ok_or_else(|| Error::Data(format!("{}: empty export", path.display())))?;
    let n = ids.len();
    Ok((ids, speakers, ages, Tensor::new(vec![n, d], values)?))
}

/// One evaluation row, formatted to four decimals.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub trial_set: String,
    pub eer_pct: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{} {:.4} {:.4} {} {}\n",
            r.trial_set, r.eer_pct, r.min_dcf, r.n_target, r.n_nontarget
        ));
    }
    out
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(format_report(rows).as_bytes())?;
    w.flush()?;
    Ok(())
}

//! Dataset container: a small versioned binary format, plus CSV ingestion for
//! externally extracted features.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic "LTDS" | version u32 | feature_dim u32 | n_samples u64 | n_classes u32
//! | has_background u8 | thresholds f64 x2
//! | features f64 x (n*dim) | labels u32 x n | split_tags u8 x n
//! | class_train_counts u64 x C | freq_splits u8 x C
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio::*;
use crate::data::{Dataset, FrequencySplit, SplitTag};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LTDS";
const VERSION: u32 = 1;

fn tag_to_u8(t: SplitTag) -> u8 {
    match t {
        SplitTag::Train => 0,
        SplitTag::Val => 1,
        SplitTag::Test => 2,
    }
}

fn tag_from_u8(v: u8) -> Option<SplitTag> {
    match v {
        0 => Some(SplitTag::Train),
        1 => Some(SplitTag::Val),
        2 => Some(SplitTag::Test),
        _ => None,
    }
}

fn freq_to_u8(f: FrequencySplit) -> u8 {
    match f {
        FrequencySplit::Many => 0,
        FrequencySplit::Medium => 1,
        FrequencySplit::Few => 2,
    }
}

fn freq_from_u8(v: u8) -> Option<FrequencySplit> {
    match v {
        0 => Some(FrequencySplit::Many),
        1 => Some(FrequencySplit::Medium),
        2 => Some(FrequencySplit::Few),
        _ => None,
    }
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);

        w.write_all(MAGIC).map_err(io_err)?;
        write_u32(&mut w, VERSION).map_err(io_err)?;
        write_u32(&mut w, self.feature_dim as u32).map_err(io_err)?;
        write_u64(&mut w, self.labels.len() as u64).map_err(io_err)?;
        write_u32(&mut w, self.class_train_counts.len() as u32).map_err(io_err)?;
        write_u8(&mut w, u8::from(self.has_background)).map_err(io_err)?;
        write_f64(&mut w, self.thresholds.0).map_err(io_err)?;
        write_f64(&mut w, self.thresholds.1).map_err(io_err)?;
        write_f64s(&mut w, &self.features).map_err(io_err)?;
        for &l in &self.labels {
            write_u32(&mut w, l).map_err(io_err)?;
        }
        for &t in &self.split_tags {
            write_u8(&mut w, tag_to_u8(t)).map_err(io_err)?;
        }
        for &c in &self.class_train_counts {
            write_u64(&mut w, c as u64).map_err(io_err)?;
        }
        for &f in &self.freq_splits {
            write_u8(&mut w, freq_to_u8(f)).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::parse(path, detail);

        let mut magic = [0u8; 4];
        std::io::Read::read_exact(&mut r, &mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic (not a dataset file)"));
        }
        let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(Error::parse(path, format!("unsupported version {version}")));
        }
        let feature_dim = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let n = sane_count(read_u64(&mut r).map_err(|_| bad("truncated header"))?, "sample")
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let classes = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let has_background = read_u8(&mut r).map_err(|_| bad("truncated header"))? != 0;
        let hi = read_f64(&mut r).map_err(|_| bad("truncated header"))?;
        let lo = read_f64(&mut r).map_err(|_| bad("truncated header"))?;

        let features = read_f64s(&mut r, n * feature_dim).map_err(|_| bad("truncated features"))?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r).map_err(|_| bad("truncated labels"))?);
        }
        let mut split_tags = Vec::with_capacity(n);
        for _ in 0..n {
            let t = read_u8(&mut r).map_err(|_| bad("truncated split tags"))?;
            split_tags.push(tag_from_u8(t).ok_or_else(|| bad("invalid split tag"))?);
        }
        let mut class_train_counts = Vec::with_capacity(classes);
        for _ in 0..classes {
            class_train_counts
                .push(read_u64(&mut r).map_err(|_| bad("truncated class counts"))? as usize);
        }
        let mut freq_splits = Vec::with_capacity(classes);
        for _ in 0..classes {
            let f = read_u8(&mut r).map_err(|_| bad("truncated frequency splits"))?;
            freq_splits.push(freq_from_u8(f).ok_or_else(|| bad("invalid frequency split"))?);
        }
        if labels.iter().any(|&l| l as usize >= classes) {
            return Err(bad("label out of range"));
        }

        // per-class train counts must match the label histogram
        let mut histogram = vec![0usize; classes];
        for (i, &l) in labels.iter().enumerate() {
            if split_tags[i] == SplitTag::Train {
                histogram[l as usize] += 1;
            }
        }
        if histogram != class_train_counts {
            return Err(bad("class train counts do not match label histogram"));
        }

        Ok(Dataset {
            feature_dim,
            features,
            labels,
            split_tags,
            class_train_counts,
            freq_splits,
            thresholds: (hi, lo),
            has_background,
        })
    }

    /// Ingest pre-extracted features from a CSV with header
    /// `label,f0,...,f{d-1}`. Every sample lands in the train split.
    pub fn from_csv(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let r = BufReader::new(file);
        let mut lines = r.lines().enumerate();

        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty file"))
            .and_then(|(i, l)| l.map(|l| (i, l)).map_err(|e| Error::io(path, e)))?;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(Error::parse(path, "header must be label,f0,...,f{d-1}"));
        }
        let dim = cols.len() - 1;
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::parse(path, format!("column {} must be named f{j}", j + 1)));
            }
        }

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected {} fields, got {}", lineno + 1, dim + 1, fields.len()),
                ));
            }
            let label: u32 = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad label '{}'", lineno + 1, fields[0])))?;
            labels.push(label);
            for f in &fields[1..] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {}: bad value '{f}'", lineno + 1)))?;
                features.push(v);
            }
        }
        Dataset::from_parts(dim, features, labels)
    }
}

/// Write a prediction batch as CSV: sample id, true label, predicted label,
/// then one probability column per class.
pub fn write_predictions_csv(
    path: &Path,
    rows: &[(usize, usize, usize, Vec<f64>)],
    classes: usize,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut header = String::from("sample,true_label,predicted");
    for c in 0..classes {
        header.push_str(&format!(",p{c}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for (id, truth, pred, probs) in rows {
        let mut line = format!("{id},{truth},{pred}");
        for p in probs {
            line.push_str(&format!(",{p:.9}"));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

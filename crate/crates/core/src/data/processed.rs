use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
use super::raw::Label;
use super::split::Sample;
use crate::error::{Error, Result};

/// Writes 28 named feature columns plus `label`.
pub fn write_processed<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.push("label");
    w.write_record(&header)?;
    for s in samples {
        let mut fields: Vec<String> = s.x.0.iter().map(|v| v.to_string()).collect();
        fields.push(s.label.code().to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_processed(path: &Path, samples: &[Sample]) -> Result<()> {
    write_processed(File::create(path)?, samples)
}

/// Reads a processed file; sample ids are the data row numbers.
pub fn read_processed<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = FEATURE_NAMES.iter().copied().chain(["label"]).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Ingest(
            "processed file header does not match the feature list".into(),
        ));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut x = [0.0; FEATURE_COUNT];
        for (k, v) in x.iter_mut().enumerate() {
            *v = rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::Ingest(format!("row {row}: bad {}", FEATURE_NAMES[k])))?;
        }
        let label = match rec[FEATURE_COUNT].trim() {
            "0" => Label::Normal,
            "1" => Label::Icing,
            "-1" => Label::Unlabeled,
            other => return Err(Error::Ingest(format!("row {row}: bad label {other:?}"))),
        };
        out.push(Sample {
            id: row,
            x: FeatureVector(x),
            label,
        });
    }
    Ok(out)
}

pub fn load_processed(path: &Path) -> Result<Vec<Sample>> {
    read_processed(File::open(path)?)
}

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use log::warn;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const RAW_COUNT: usize = 26;

/// Raw SCADA variables in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RawVar {
    WindSpeed,
    GeneratorSpeed,
    Power,
    WindDirection,
    WindDirectionMean,
    YawPosition,
    YawSpeed,
    Pitch1Angle,
    Pitch2Angle,
    Pitch3Angle,
    Pitch1Speed,
    Pitch2Speed,
    Pitch3Speed,
    Pitch1MotoTmp,
    Pitch2MotoTmp,
    Pitch3MotoTmp,
    AccX,
    AccY,
    EnvironmentTmp,
    IntTmp,
    Pitch1Ng5Tmp,
    Pitch2Ng5Tmp,
    Pitch3Ng5Tmp,
    Pitch1Ng5Dc,
    Pitch2Ng5Dc,
    Pitch3Ng5Dc,
}

impl RawVar {
    pub const ALL: [RawVar; RAW_COUNT] = [
        RawVar::WindSpeed,
        RawVar::GeneratorSpeed,
        RawVar::Power,
        RawVar::WindDirection,
        RawVar::WindDirectionMean,
        RawVar::YawPosition,
        RawVar::YawSpeed,
        RawVar::Pitch1Angle,
        RawVar::Pitch2Angle,
        RawVar::Pitch3Angle,
        RawVar::Pitch1Speed,
        RawVar::Pitch2Speed,
        RawVar::Pitch3Speed,
        RawVar::Pitch1MotoTmp,
        RawVar::Pitch2MotoTmp,
        RawVar::Pitch3MotoTmp,
        RawVar::AccX,
        RawVar::AccY,
        RawVar::EnvironmentTmp,
        RawVar::IntTmp,
        RawVar::Pitch1Ng5Tmp,
        RawVar::Pitch2Ng5Tmp,
        RawVar::Pitch3Ng5Tmp,
        RawVar::Pitch1Ng5Dc,
        RawVar::Pitch2Ng5Dc,
        RawVar::Pitch3Ng5Dc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RawVar::WindSpeed => "wind_speed",
            RawVar::GeneratorSpeed => "generator_speed",
            RawVar::Power => "power",
            RawVar::WindDirection => "wind_direction",
            RawVar::WindDirectionMean => "wind_direction_mean",
            RawVar::YawPosition => "yaw_position",
            RawVar::YawSpeed => "yaw_speed",
            RawVar::Pitch1Angle => "pitch1_angle",
            RawVar::Pitch2Angle => "pitch2_angle",
            RawVar::Pitch3Angle => "pitch3_angle",
            RawVar::Pitch1Speed => "pitch1_speed",
            RawVar::Pitch2Speed => "pitch2_speed",
            RawVar::Pitch3Speed => "pitch3_speed",
            RawVar::Pitch1MotoTmp => "pitch1_moto_tmp",
            RawVar::Pitch2MotoTmp => "pitch2_moto_tmp",
            RawVar::Pitch3MotoTmp => "pitch3_moto_tmp",
            RawVar::AccX => "acc_x",
            RawVar::AccY => "acc_y",
            RawVar::EnvironmentTmp => "environment_tmp",
            RawVar::IntTmp => "int_tmp",
            RawVar::Pitch1Ng5Tmp => "pitch1_ng5_tmp",
            RawVar::Pitch2Ng5Tmp => "pitch2_ng5_tmp",
            RawVar::Pitch3Ng5Tmp => "pitch3_ng5_tmp",
            RawVar::Pitch1Ng5Dc => "pitch1_ng5_DC",
            RawVar::Pitch2Ng5Dc => "pitch2_ng5_DC",
            RawVar::Pitch3Ng5Dc => "pitch3_ng5_DC",
        }
    }

    pub fn from_name(name: &str) -> Option<RawVar> {
        RawVar::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Record label. The CSV encoding is `0` normal, `1` icing, `-1` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Icing,
    /// Missing, unparseable or out-of-range fields.
    Invalid,
    /// Complete record without a class.
    Unlabeled,
}

impl Label {
    pub fn code(self) -> i8 {
        match self {
            Label::Normal => 0,
            Label::Icing => 1,
            Label::Invalid | Label::Unlabeled => -1,
        }
    }

    /// Class index for labeled records: 0 normal, 1 icing.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Normal => Some(0),
            Label::Icing => Some(1),
            _ => None,
        }
    }

    pub fn from_class(class: usize) -> Label {
        if class == 1 {
            Label::Icing
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub derive_from: Option<String>,
    #[serde(default)]
    pub window_s: Option<f64>,
}

/// Raw-column manifest: names, physical bounds and derived columns.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub reconstructed: bool,
    pub time_column: String,
    pub label_column: String,
    pub columns: Vec<ColumnSpec>,
}

const DEFAULT_MANIFEST: &str = include_str!("../../manifest/raw_columns.toml");

impl Manifest {
    /// The manifest shipped with the crate.
    pub fn builtin() -> Manifest {
        Manifest::parse(DEFAULT_MANIFEST).expect("builtin manifest is valid")
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.columns.len() != RAW_COUNT {
            return Err(Error::Config(format!(
                "manifest lists {} columns, expected {RAW_COUNT}",
                m.columns.len()
            )));
        }
        for (c, v) in m.columns.iter().zip(RawVar::ALL) {
            if c.name != v.name() {
                return Err(Error::Config(format!(
                    "manifest column {} should be {}",
                    c.name,
                    v.name()
                )));
            }
            if !(c.min <= c.max) {
                return Err(Error::Config(format!(
                    "manifest bounds for {} are inverted",
                    c.name
                )));
            }
            if let Some(src) = &c.derive_from {
                if RawVar::from_name(src).is_none() || c.window_s.is_none_or(|w| !(w > 0.0)) {
                    return Err(Error::Config(format!("bad derivation for {}", c.name)));
                }
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Manifest::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bounds(&self, v: RawVar) -> (f64, f64) {
        let c = &self.columns[v.index()];
        (c.min, c.max)
    }
}

/// One SCADA row. Missing values are stored as NaN.
#[derive(Debug, Clone)]
pub struct ScadaRecord {
    /// Zero-based data row in the source file; the record identity.
    pub row: usize,
    /// Seconds; NaN when the timestamp could not be parsed.
    pub time: f64,
    pub values: [f64; RAW_COUNT],
    pub label: Label,
}

impl ScadaRecord {
    pub fn get(&self, v: RawVar) -> f64 {
        self.values[v.index()]
    }

    pub fn set(&mut self, v: RawVar, value: f64) {
        self.values[v.index()] = value;
    }

    /// Every field present, finite and within manifest bounds.
    pub fn is_valid(&self, manifest: &Manifest) -> bool {
        self.label != Label::Invalid
            && self.time.is_finite()
            && RawVar::ALL.iter().all(|&v| {
                let x = self.get(v);
                let (lo, hi) = manifest.bounds(v);
                x.is_finite() && x >= lo && x <= hi
            })
    }

    /// Field-wise identity, treating NaN as equal to NaN.
    pub fn same_as(&self, other: &ScadaRecord) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.row == other.row
            && self.label == other.label
            && eq(self.time, other.time)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| eq(*a, *b))
    }
}

fn parse_time(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S%.f",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|t| t.and_utc().timestamp() as f64)
}

fn parse_value(s: &str) -> f64 {
    s.trim().parse::<f64>().unwrap_or(f64::NAN)
}

/// Reads a canonical SCADA CSV.
///
/// Columns are located by header name; extra columns are ignored. A missing
/// mandatory column is an error. Rows with blank or unparseable fields are
/// kept and labeled [`Label::Invalid`].
pub fn ingest_scada(path: &Path, manifest: &Manifest) -> Result<Vec<ScadaRecord>> {
    read_scada(File::open(path)?, manifest)
}

pub fn read_scada<R: Read>(reader: R, manifest: &Manifest) -> Result<Vec<ScadaRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let time_col = find(&manifest.time_column)
        .ok_or_else(|| Error::Ingest(format!("missing column {}", manifest.time_column)))?;
    let label_col = find(&manifest.label_column)
        .ok_or_else(|| Error::Ingest(format!("missing column {}", manifest.label_column)))?;
    let mut cols = [None; RAW_COUNT];
    for (slot, spec) in cols.iter_mut().zip(&manifest.columns) {
        *slot = find(&spec.name);
        if slot.is_none() && spec.derive_from.is_none() {
            return Err(Error::Ingest(format!("missing column {}", spec.name)));
        }
    }

    let mut records = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let time = parse_time(field(time_col)).unwrap_or(f64::NAN);
        if time < last_time {
            return Err(Error::Ingest(format!(
                "timestamps decrease at data row {row}"
            )));
        }
        if time.is_finite() {
            last_time = time;
        }
        let mut values = [f64::NAN; RAW_COUNT];
        for (v, c) in values.iter_mut().zip(&cols) {
            if let Some(c) = c {
                *v = parse_value(field(*c));
            }
        }
        let label = match field(label_col).trim() {
            "0" => Label::Normal,
            "1" => Label::Icing,
            "-1" => Label::Unlabeled,
            _ => Label::Invalid,
        };
        records.push(ScadaRecord {
            row,
            time,
            values,
            label,
        });
    }

    for (spec, c) in manifest.columns.iter().zip(&cols) {
        if let (None, Some(src), Some(w)) = (c, &spec.derive_from, spec.window_s) {
            let src = RawVar::from_name(src).expect("validated manifest");
            let dst = RawVar::from_name(&spec.name).expect("validated manifest");
            fill_trailing_direction_mean(&mut records, src, dst, w);
        }
    }
    for r in &mut records {
        if r.label != Label::Invalid && !r.is_valid(manifest) {
            r.label = Label::Invalid;
        }
    }
    Ok(records)
}

/// Writes records in canonical column order. Missing values become empty fields.
pub fn write_scada<W: Write>(
    writer: W,
    records: &[ScadaRecord],
    manifest: &Manifest,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![manifest.time_column.clone()];
    header.extend(manifest.columns.iter().map(|c| c.name.clone()));
    header.push(manifest.label_column.clone());
    w.write_record(&header)?;
    let fmt = |v: f64| {
        if v.is_nan() {
            String::new()
        } else {
            v.to_string()
        }
    };
    for r in records {
        let mut fields = vec![fmt(r.time)];
        fields.extend(r.values.iter().map(|v| fmt(*v)));
        fields.push(r.label.code().to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_scada(path: &Path, records: &[ScadaRecord], manifest: &Manifest) -> Result<()> {
    write_scada(File::create(path)?, records, manifest)
}

/// Circular mean (degrees) of `src` over records within `window_s` seconds
/// before and including each row. Rows without a finite time or source
/// value get NaN; invalid neighbours are skipped.
pub fn fill_trailing_direction_mean(
    records: &mut [ScadaRecord],
    src: RawVar,
    dst: RawVar,
    window_s: f64,
) {
    let mut start = 0;
    let (mut s, mut c, mut n) = (0.0f64, 0.0f64, 0usize);
    let usable = |r: &ScadaRecord| r.time.is_finite() && r.get(src).is_finite();
    for i in 0..records.len() {
        if usable(&records[i]) {
            let a = records[i].get(src).to_radians();
            s += a.sin();
            c += a.cos();
            n += 1;
        }
        let t = records[i].time;
        if !t.is_finite() {
            records[i].set(dst, f64::NAN);
            continue;
        }
        while start < i && !(records[start].time > t - window_s) {
            if usable(&records[start]) {
                let a = records[start].get(src).to_radians();
                s -= a.sin();
                c -= a.cos();
                n -= 1;
            }
            start += 1;
        }
        let mean = if usable(&records[i]) && n > 0 {
            s.atan2(c).to_degrees().rem_euclid(360.0)
        } else {
            f64::NAN
        };
        records[i].set(dst, mean);
    }
}

/// Drops records that are flagged invalid or fail manifest validation.
pub fn eliminate_invalid(records: Vec<ScadaRecord>, manifest: &Manifest) -> Vec<ScadaRecord> {
    let before = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| r.is_valid(manifest))
        .collect();
    if before > 0 && kept.is_empty() {
        warn!("all {before} records were invalid");
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(row: usize, label: Label) -> ScadaRecord {
        let mut values = [1.0; RAW_COUNT];
        values[RawVar::WindDirection.index()] = 90.0;
        values[RawVar::WindDirectionMean.index()] = 90.0;
        ScadaRecord {
            row,
            time: row as f64 * 7.0,
            values,
            label,
        }
    }

    fn to_string(records: &[ScadaRecord]) -> String {
        let mut buf = Vec::new();
        write_scada(&mut buf, records, &Manifest::builtin()).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn builtin_manifest_matches_enum() {
        let m = Manifest::builtin();
        assert!(m.reconstructed);
        for v in RawVar::ALL {
            assert_eq!(RawVar::from_name(v.name()), Some(v));
        }
        assert_eq!(m.columns.len(), 26);
    }

    #[test]
    fn ten_rows_ten_records() {
        let recs: Vec<_> = (0..10).map(|i| record(i, Label::Normal)).collect();
        let back = read_scada(to_string(&recs).as_bytes(), &Manifest::builtin()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in recs.iter().zip(&back) {
            assert!(a.same_as(b));
        }
    }

    #[test]
    fn empty_wind_speed_flags_invalid() {
        let mut recs = vec![record(0, Label::Normal), record(1, Label::Icing)];
        recs[1].set(RawVar::WindSpeed, f64::NAN);
        let back = read_scada(to_string(&recs).as_bytes(), &Manifest::builtin()).unwrap();
        assert_eq!(back[0].label, Label::Normal);
        assert_eq!(back[1].label, Label::Invalid);
        assert_eq!(eliminate_invalid(back, &Manifest::builtin()).len(), 1);
    }

    #[test]
    fn missing_column_is_named() {
        let text = to_string(&[record(0, Label::Normal)]).replace("acc_y", "acc_z");
        let err = read_scada(text.as_bytes(), &Manifest::builtin()).unwrap_err();
        assert!(err.to_string().contains("acc_y"), "{err}");
    }

    #[test]
    fn out_of_bounds_is_invalid() {
        let mut r = record(0, Label::Normal);
        r.set(RawVar::WindSpeed, -1.0);
        assert!(!r.is_valid(&Manifest::builtin()));
        assert!(eliminate_invalid(vec![r], &Manifest::builtin()).is_empty());
    }

    #[test]
    fn direction_mean_is_derived_when_absent() {
        let mut recs: Vec<_> = (0..6).map(|i| record(i, Label::Normal)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.time = i as f64 * 10.0;
            r.set(RawVar::WindDirection, if i % 2 == 0 { 350.0 } else { 10.0 });
        }
        let text = to_string(&recs);
        let mut lines: Vec<Vec<String>> = text
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        let col = lines[0]
            .iter()
            .position(|h| h == "wind_direction_mean")
            .unwrap();
        for l in &mut lines {
            l.remove(col);
        }
        let text: String = lines.iter().map(|l| l.join(",") + "\n").collect();
        let back = read_scada(text.as_bytes(), &Manifest::builtin()).unwrap();
        // window 25 s with 10 s spacing covers three rows: 350, 10, 350 or 10, 350, 10
        let m = back[3].get(RawVar::WindDirectionMean);
        assert!((m - 3.3).abs() < 0.1 || (m - 356.7).abs() < 0.1, "{m}");
        assert!((back[0].get(RawVar::WindDirectionMean) - 350.0).abs() < 1e-9);
    }

    #[test]
    fn decreasing_time_is_rejected() {
        let mut recs = vec![record(0, Label::Normal), record(1, Label::Normal)];
        recs[1].time = -5.0;
        assert!(read_scada(to_string(&recs).as_bytes(), &Manifest::builtin()).is_err());
    }

    #[test]
    fn datetime_timestamps_parse() {
        assert_eq!(parse_time("1970-01-01 00:01:00"), Some(60.0));
        assert_eq!(parse_time("12.5"), Some(12.5));
        assert_eq!(parse_time("soon"), None);
    }
}

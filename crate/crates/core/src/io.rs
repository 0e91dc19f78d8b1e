//! Artifact files: measure CSVs, sparse kernel triplets, key-value sidecars
//! and JSON records. Floats are written with 17 significant digits so that
//! reruns can be compared byte for byte, and every file is written to a
//! temporary sibling first and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::measure::MeasureVector;
use crate::space::Point;
use crate::ulam::MarkovModel;

/// Shortest round-trip-safe fixed-width rendering of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_point(p: &Point) -> String {
    p.coords().iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(" ")
}

/// Writes `bytes` to `path` through a temporary file and a rename, so a
/// crash never leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `# key = value` header lines carrying the configuration of a run.
pub fn header_lines(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

/// `cell_index,center_coords,mass`; 2D centers are space-separated.
pub fn measure_csv(mu: &MeasureVector, meta: &[(String, String)]) -> String {
    let part = mu.partition();
    let mut out = header_lines(meta);
    out.push_str("cell_index,center_coords,mass\n");
    for (i, m) in mu.mass().iter().enumerate() {
        let _ = writeln!(out, "{i},{},{}", fmt_point(&part.cell_center(i)), fmt_f64(*m));
    }
    out
}

pub fn write_measure(path: &Path, mu: &MeasureVector, meta: &[(String, String)]) -> Result<()> {
    write_atomic(path, measure_csv(mu, meta).as_bytes())
}

/// `row,col,prob` triplets of the kernel.
pub fn triplet_csv(model: &MarkovModel) -> String {
    let mut out = String::from("row,col,prob\n");
    for i in 0..model.len() {
        let (cols, vals) = model.row(i);
        for (j, p) in cols.iter().zip(vals) {
            let _ = writeln!(out, "{i},{j},{}", fmt_f64(*p));
        }
    }
    out
}

pub fn key_value_text(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Writes `<stem>.csv` (triplets) and `<stem>.meta` (space, resolution,
/// noise level, build mode, seed, pruning tolerance).
pub fn write_model(dir: &Path, stem: &str, model: &MarkovModel) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), triplet_csv(model).as_bytes())?;
    write_atomic(
        &dir.join(format!("{stem}.meta")),
        key_value_text(&model.metadata()).as_bytes(),
    )
}

/// Parses `key = value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Partition, StateSpace};

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 0.0, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn measure_csv_layout() {
        let part = Partition::new(StateSpace::Cylinder, 2, 2).unwrap();
        let mu = MeasureVector::dirac(part, 3);
        let meta = vec![("seed".to_string(), "7".to_string())];
        let text = measure_csv(&mu, &meta);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed = 7");
        assert_eq!(lines[1], "cell_index,center_coords,mass");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("3,7.5000000000000000e-1 5.0000000000000000e-1,1.0"));
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.txt");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn key_values_parse() {
        let kv = parse_key_values("# c\n a = 1 \n\nmodel=bowen\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("model".into(), "bowen".into())]);
        assert!(parse_key_values("oops").is_err());
    }
}

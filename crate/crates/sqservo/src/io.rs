//! Plain-text formats: XYZ point clouds and one-line `key=value` records.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use sqservo_core::superquadric::{PointCloud, Superquadric};
use sqservo_core::RpyPose;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot parse `{value}` as a number")]
    BadNumber { key: String, value: String },
    #[error("invalid superquadric: {0}")]
    Superquadric(#[from] sqservo_core::superquadric::SuperquadricError),
}

/// Reads `x y z` triples, one per line. Blank lines and lines starting with
/// `#` are skipped.
pub fn read_xyz<R: BufRead>(reader: R) -> Result<PointCloud, IoError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Syntax { line: i + 1, reason: e.to_string() })?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Syntax {
                line: i + 1,
                reason: format!("expected three finite numbers, found `{t}`"),
            });
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(PointCloud::new(points))
}

pub fn write_xyz<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), IoError> {
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud, IoError> {
    read_xyz(BufReader::new(fs::File::open(path)?))
}

pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_xyz(&mut f, cloud)?;
    f.flush()?;
    Ok(())
}

/// Ordered `key=value` pairs printed on one line, separated by spaces.
/// Floats use the shortest representation that reads back exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    fields: Vec<(String, String)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn extend(&mut self, other: &KvRecord) -> &mut Self {
        self.fields.extend(other.fields.iter().cloned());
        self
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, IoError> {
        let v = self.get(key).ok_or_else(|| IoError::MissingKey(key.to_string()))?;
        v.parse().map_err(|_| IoError::BadNumber {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    /// Accepts pairs separated by any whitespace, including newlines.
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut rec = Self::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.starts_with('#') {
                continue;
            }
            for tok in t.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| IoError::Syntax {
                    line: i + 1,
                    reason: format!("`{tok}` is not key=value"),
                })?;
                if k.is_empty() {
                    return Err(IoError::Syntax { line: i + 1, reason: "empty key".into() });
                }
                rec.push(k, v);
            }
        }
        Ok(rec)
    }
}

impl fmt::Display for KvRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub const SUPERQUADRIC_KEYS: [&str; 11] = ["a1", "a2", "a3", "e1", "e2", "x", "y", "z", "roll", "pitch", "yaw"];

pub fn superquadric_record(sq: &Superquadric, prefix: &str) -> KvRecord {
    let a = sq.semi_axes();
    let e = sq.exponents();
    let p = sq.pose().to_array();
    let vals = [a.x, a.y, a.z, e[0], e[1], p[0], p[1], p[2], p[3], p[4], p[5]];
    let mut rec = KvRecord::new();
    for (k, v) in SUPERQUADRIC_KEYS.iter().zip(vals) {
        rec.push(format!("{prefix}{k}"), v);
    }
    rec
}

pub fn superquadric_from_record(rec: &KvRecord, prefix: &str) -> Result<Superquadric, IoError> {
    let mut v = [0.0; 11];
    for (slot, k) in v.iter_mut().zip(SUPERQUADRIC_KEYS) {
        *slot = rec.get_f64(&format!("{prefix}{k}"))?;
    }
    Ok(Superquadric::new(
        Vector3::new(v[0], v[1], v[2]),
        [v[3], v[4]],
        RpyPose::from_array([v[5], v[6], v[7], v[8], v[9], v[10]]),
    )?)
}

pub fn load_superquadric(path: &Path) -> Result<Superquadric, IoError> {
    superquadric_from_record(&KvRecord::parse(&fs::read_to_string(path)?)?, "")
}

pub fn save_superquadric(path: &Path, sq: &Superquadric) -> Result<(), IoError> {
    fs::write(path, format!("{}\n", superquadric_record(sq, "")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_skips_comments_and_reports_lines() {
        let c = read_xyz("# cloud\n0 1 2\n\n  3.5 -4 5e-3 \n".as_bytes()).unwrap();
        assert_eq!(c.points, vec![Vector3::new(0.0, 1.0, 2.0), Vector3::new(3.5, -4.0, 5e-3)]);
        match read_xyz("0 1 2\n1 2\n".as_bytes()) {
            Err(IoError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_xyz("1 2 x\n".as_bytes()).is_err());
        assert!(read_xyz("1 2 NaN\n".as_bytes()).is_err());
    }

    #[test]
    fn record_parses_what_it_prints() {
        let mut r = KvRecord::new();
        r.push("a", 0.1 + 0.2).push("name", "box").push("n", 3);
        let text = r.to_string();
        assert_eq!(text, "a=0.30000000000000004 name=box n=3");
        let back = KvRecord::parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("a").unwrap(), 0.1 + 0.2);
        assert!(matches!(back.get_f64("name"), Err(IoError::BadNumber { .. })));
        assert!(matches!(back.get_f64("b"), Err(IoError::MissingKey(_))));
        assert!(KvRecord::parse("a=1 b").is_err());
    }

    #[test]
    fn superquadric_record_has_eleven_values() {
        let sq = Superquadric::new(
            Vector3::new(0.05, 0.04, 0.1),
            [0.3, 0.9],
            RpyPose::from_array([-0.3, 0.1, 0.02, 0.1, -0.2, 0.3]),
        )
        .unwrap();
        let rec = superquadric_record(&sq, "fit_");
        assert_eq!(rec.fields().len(), 11);
        assert_eq!(rec.get("fit_yaw"), Some("0.3"));
        assert_eq!(superquadric_from_record(&rec, "fit_").unwrap(), sq);
    }
}

//! Tradeoff CSV: `alpha,bits,payload_bytes,encoder_mac,toy_ap`.
//!
//! Floats use six significant digits with trailing zeros removed, integers
//! are written exactly, lines end in LF, rows are sorted by bits then α.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sim::TradeoffPoint;
use crate::slim::WidthMultiplier;

pub const HEADER: &str = "alpha,bits,payload_bytes,encoder_mac,toy_ap";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no points to export")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("bad CSV header {0:?}")]
    Header(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Six significant digits, like C's `%g` without the exponent form for
/// ordinary magnitudes.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        let s = format!("{x:.5e}");
        let (m, e) = s.split_once('e').expect("exponent form");
        return format!("{}e{e}", trim_zeros(m));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}"))
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn sorted(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.bits.cmp(&b.bits).then(a.alpha.cmp(&b.alpha)));
    p
}

pub fn to_csv(points: &[TradeoffPoint]) -> Result<String, ReportError> {
    if points.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in sorted(points) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_sig6(p.alpha.as_f64()),
            p.bits,
            p.payload_bytes,
            p.encoder_mac,
            fmt_sig6(p.toy_ap)
        ));
    }
    Ok(out)
}

pub fn export_tradeoff_csv(points: &[TradeoffPoint], path: &Path) -> Result<(), ReportError> {
    let csv = to_csv(points)?;
    fs::write(path, csv).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<TradeoffPoint>, ReportError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != HEADER {
        return Err(ReportError::Header(header.to_string()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let err = |reason: String| ReportError::Parse { line: line_no, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", f.len())));
        }
        let alpha: WidthMultiplier = f[0].parse().map_err(|e| err(format!("alpha: {e}")))?;
        out.push(TradeoffPoint {
            alpha,
            bits: f[1].parse().map_err(|e| err(format!("bits: {e}")))?,
            payload_bytes: f[2].parse().map_err(|e| err(format!("payload_bytes: {e}")))?,
            encoder_mac: f[3].parse().map_err(|e| err(format!("encoder_mac: {e}")))?,
            toy_ap: f[4].parse().map_err(|e| err(format!("toy_ap: {e}")))?,
        });
    }
    Ok(out)
}

pub fn read_tradeoff_csv(path: &Path) -> Result<Vec<TradeoffPoint>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(alpha: &str, bits: u8, ap: f64) -> TradeoffPoint {
        TradeoffPoint {
            alpha: alpha.parse().unwrap(),
            bits,
            payload_bytes: 802,
            encoder_mac: 1_234_567_890,
            toy_ap: ap,
        }
    }

    #[test]
    fn sig6() {
        assert_eq!(fmt_sig6(0.968_212_345), "0.968212");
        assert_eq!(fmt_sig6(0.33), "0.33");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(123_456_789.0), "1.23457e8");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(0.000_012_345_67), "1.23457e-5");
    }

    #[test]
    fn sorted_and_round_trips() {
        let pts = vec![pt("1.0", 8, 0.97), pt("0.25", 8, 0.9123456), pt("0.5", 4, 0.5)];
        let csv = to_csv(&pts).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HEADER);
        assert!(lines[1].starts_with("0.5,4,"));
        assert!(lines[2].starts_with("0.25,8,"));
        assert!(!csv.contains('\r'));
        let back = parse_csv(&csv).unwrap();
        for (a, b) in back.iter().zip(sorted(&pts)) {
            assert_eq!((a.alpha, a.bits, a.payload_bytes, a.encoder_mac), (b.alpha, b.bits, b.payload_bytes, b.encoder_mac));
            assert!((a.toy_ap - b.toy_ap).abs() <= 5e-7);
        }
        assert_eq!(to_csv(&pts).unwrap(), csv);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(to_csv(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn unwritable_path() {
        let r = export_tradeoff_csv(&[pt("1.0", 8, 1.0)], Path::new("/nonexistent-dir/x.csv"));
        assert!(matches!(r, Err(ReportError::Write { .. })));
    }
}

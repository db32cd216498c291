use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Formats `v` positionally with 9 significant digits, trailing zeros trimmed.
pub fn format_coord(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if exp >= 8 {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', (exp - 8) as usize));
        return out;
    }
    if exp >= 0 {
        let split = exp as usize + 1;
        out.push_str(&digits[..split]);
        out.push('.');
        out.push_str(&digits[split..]);
    } else {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    }
    let trimmed = out.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

/// One point per line, `x y z`, single spaces, 9 significant digits.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 36);
    for p in cloud.points() {
        let _ = writeln!(
            out,
            "{} {} {}",
            format_coord(p[0]),
            format_coord(p[1]),
            format_coord(p[2])
        );
    }
    out
}

/// Parses `.xyz` text. Blank lines and lines starting with `#` are skipped;
/// columns beyond the third are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields[..3]) {
            let v: f64 = f.parse().map_err(|_| err(format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
            *slot = v;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text)
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

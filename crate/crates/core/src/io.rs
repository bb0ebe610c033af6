//! CSV output with a pinned numeric format.
//!
//! Reproducibility claims are byte-level, so the format is fixed: decimal
//! scientific notation with 17 significant digits, `.` separator, LF line
//! endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

/// Canonical rendering of one value.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write rows of f64 columns under a header line.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let file = File::create(path).map_err(|e| {
        CoreError::InvalidConfiguration(format!("cannot create {}: {e}", path.display()))
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| {
        CoreError::InvalidConfiguration(format!("write to {}: {e}", path.display()))
    };
    w.write_all(header.join(",").as_bytes()).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for row in rows {
        let cells: Vec<String> = row.as_ref().iter().map(|&v| format_value(v)).collect();
        w.write_all(cells.join(",").as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_is_pinned() {
        assert_eq!(format_value(0.5), "5.0000000000000000e-1");
        assert_eq!(format_value(-1.0 / 3.0), "-3.3333333333333331e-1");
    }

    #[test]
    fn writes_lf_only() {
        let dir = std::env::temp_dir().join("shocklaw_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        write_csv(&path, &["a", "b"], [[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(!bytes.contains(&b'\r'));
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert_eq!(text.lines().count(), 3);
    }
}

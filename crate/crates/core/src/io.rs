//! CSV and JSON artifact serialization.
//!
//! Floats are written in Rust's shortest round-trip decimal form, so reading
//! a file back reproduces the exact values that were written. All file
//! writes go through a temp-file-then-rename so a crash never leaves a
//! half-written artifact behind.

use std::fs;
use std::path::Path;

use crate::flow::{DiagRow, RunRecord};
use crate::mat::Matrix;
use crate::net::Network;
use crate::{Error, Result};

/// Columns of a diagnostics CSV, in order.
pub const RECORD_HEADER: &str = "iter,loss,grad_norm,w2,mmd,wall_ms";

/// Writes `contents` to `path` atomically: the data lands in a sibling temp
/// file first and is renamed over the destination in one step.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => Path::new(".").to_path_buf(),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn point_header(cols: usize) -> String {
    if cols == 2 {
        "x,y".to_string()
    } else {
        let names: Vec<String> = (0..cols).map(|j| format!("x{}", j)).collect();
        names.join(",")
    }
}

/// Renders a point batch as CSV: a header line (`x,y` for 2D), then one row
/// per point, shortest round-trip float encoding.
pub fn points_to_csv(batch: &Matrix) -> String {
    let mut out = String::new();
    out.push_str(&point_header(batch.cols()));
    out.push('\n');
    for i in 0..batch.rows() {
        let fields: Vec<String> = batch.row(i).iter().map(|v| format!("{}", v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn parse_field(raw: &str, label: &str, line: usize) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: label.to_string(),
        line,
        msg: format!("'{}' is not a number", raw.trim()),
    })
}

/// Parses a point CSV back into a batch. `label` names the source in
/// errors; line numbers are 1-based and count the header.
pub fn points_from_csv(text: &str, label: &str) -> Result<Matrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: label.to_string(),
        line: 1,
        msg: "empty file".to_string(),
    })?;
    let cols = header.split(',').count();
    if cols == 0 || header.trim().is_empty() {
        return Err(Error::Parse {
            path: label.to_string(),
            line: 1,
            msg: "missing header".to_string(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Parse {
                path: label.to_string(),
                line: lineno,
                msg: format!("expected {} fields, found {}", cols, fields.len()),
            });
        }
        for raw in fields {
            let v = parse_field(raw, label, lineno)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: label.to_string(),
                    line: lineno,
                    msg: format!("non-finite coordinate {}", v),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: label.to_string(),
            line: 1,
            msg: "no data rows".to_string(),
        });
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_points(path: &Path, batch: &Matrix) -> Result<()> {
    write_atomic(path, &points_to_csv(batch))
}

pub fn read_points(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    points_from_csv(&text, &path.display().to_string())
}

/// Renders a diagnostics record as CSV. Skipped diagnostics appear as `NaN`.
pub fn record_to_csv(record: &RunRecord) -> String {
    let mut out = String::new();
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for row in record.rows() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iteration, row.loss, row.grad_norm, row.w2, row.mmd, row.wall_ms
        ));
    }
    out
}

/// Parses a diagnostics CSV written by [`record_to_csv`].
pub fn record_from_csv(text: &str, label: &str) -> Result<RunRecord> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: label.to_string(),
        line: 1,
        msg: "empty file".to_string(),
    })?;
    if header.trim() != RECORD_HEADER {
        return Err(Error::Parse {
            path: label.to_string(),
            line: 1,
            msg: format!("expected header '{}'", RECORD_HEADER),
        });
    }
    let mut record = RunRecord::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                path: label.to_string(),
                line: lineno,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let iteration = fields[0].trim().parse::<usize>().map_err(|_| Error::Parse {
            path: label.to_string(),
            line: lineno,
            msg: format!("'{}' is not an iteration index", fields[0].trim()),
        })?;
        let row = DiagRow {
            iteration,
            loss: parse_field(fields[1], label, lineno)?,
            grad_norm: parse_field(fields[2], label, lineno)?,
            w2: parse_field(fields[3], label, lineno)?,
            mmd: parse_field(fields[4], label, lineno)?,
            wall_ms: parse_field(fields[5], label, lineno)?,
        };
        record.push(row).map_err(|e| Error::Parse {
            path: label.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
    }
    Ok(record)
}

pub fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    write_atomic(path, &record_to_csv(record))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    record_from_csv(&text, &path.display().to_string())
}

pub fn write_network(path: &Path, net: &Network) -> Result<()> {
    write_atomic(path, &net.to_json())
}

pub fn read_network(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::network_init;

    fn awkward_batch() -> Matrix {
        Matrix::from_rows(&[
            &[0.1 + 0.2, -0.0],
            &[1e-300, 2.0f64.powi(-53)],
            &[123456789.123456789, -9.861e22],
        ])
        .unwrap()
    }

    #[test]
    fn points_round_trip_is_value_exact() {
        let batch = awkward_batch();
        let text = points_to_csv(&batch);
        let back = points_from_csv(&text, "<mem>").unwrap();
        assert_eq!(back.rows(), batch.rows());
        for (a, b) in batch.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn point_csv_shape() {
        let batch = Matrix::zeros(10, 2);
        let text = points_to_csv(&batch);
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("x,y\n"));

        let wide = Matrix::zeros(2, 3);
        assert!(points_to_csv(&wide).starts_with("x0,x1,x2\n"));
    }

    #[test]
    fn point_parse_errors_carry_line_numbers() {
        let cases = [
            ("x,y\n1.0,2.0\n3.0,oops\n", 3, "not a number"),
            ("x,y\n1.0\n", 2, "expected 2 fields"),
            ("x,y\n1.0,inf\n", 2, "non-finite"),
            ("x,y\n", 1, "no data rows"),
            ("", 1, "empty file"),
        ];
        for (text, want_line, want_msg) in cases {
            let err = points_from_csv(text, "<case>").unwrap_err();
            match err {
                Error::Parse { line, ref msg, .. } => {
                    assert_eq!(line, want_line, "{:?}", text);
                    assert!(msg.contains(want_msg), "msg '{}' for {:?}", msg, text);
                }
                other => panic!("expected parse error, got {}", other),
            }
        }
    }

    #[test]
    fn record_round_trip_preserves_nan_markers() {
        let mut record = RunRecord::new();
        record
            .push(DiagRow {
                iteration: 0,
                loss: -0.987654321012345,
                grad_norm: 1.5,
                w2: f64::NAN,
                mmd: 0.25,
                wall_ms: 12.5,
            })
            .unwrap();
        record
            .push(DiagRow {
                iteration: 100,
                loss: f64::NAN,
                grad_norm: f64::NAN,
                w2: 0.125,
                mmd: f64::NAN,
                wall_ms: 99.0,
            })
            .unwrap();
        let text = record_to_csv(&record);
        assert!(text.starts_with(RECORD_HEADER));
        let back = record_from_csv(&text, "<mem>").unwrap();
        assert_eq!(back.rows().len(), 2);
        for (a, b) in record.rows().iter().zip(back.rows()) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.loss.is_nan(), b.loss.is_nan());
            if a.loss.is_finite() {
                assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            }
            assert_eq!(a.w2.is_nan(), b.w2.is_nan());
            assert_eq!(a.wall_ms.to_bits(), b.wall_ms.to_bits());
        }
    }

    #[test]
    fn record_parse_rejects_disorder_and_bad_headers() {
        let bad_header = "iter,loss\n0,1\n";
        assert!(matches!(
            record_from_csv(bad_header, "<h>").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        let disorder = format!("{}\n5,0,0,NaN,NaN,1\n5,0,0,NaN,NaN,2\n", RECORD_HEADER);
        assert!(matches!(
            record_from_csv(&disorder, "<d>").unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
        let bad_iter = format!("{}\nx,0,0,NaN,NaN,1\n", RECORD_HEADER);
        assert!(matches!(
            record_from_csv(&bad_iter, "<i>").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn atomic_writes_create_and_replace_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let batch = awkward_batch();
        write_points(&path, &batch).unwrap();
        let back = read_points(&path).unwrap();
        assert_eq!(back.as_slice(), batch.as_slice());

        let smaller = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        write_points(&path, &smaller).unwrap();
        let replaced = read_points(&path).unwrap();
        assert_eq!(replaced.rows(), 1);

        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty(), "temp files left behind");
    }

    #[test]
    fn network_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = network_init(&[2, 8, 1], 99).unwrap();
        write_network(&path, &net).unwrap();
        let back = read_network(&path).unwrap();
        assert_eq!(net.to_json(), back.to_json());
    }

    #[test]
    fn missing_files_report_their_paths() {
        let err = read_points(Path::new("/nonexistent/xyz.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/xyz.csv"));
    }
}

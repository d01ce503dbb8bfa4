//! On-disk formats for grid functions.
//!
//! Two interchangeable encodings, both self-describing and both storing
//! 64-bit floats regardless of the in-memory scalar:
//!
//! **CSV** for interop: a header row `i1,..,id,v1,..,vk` followed by one row
//! per grid point (index columns, then value columns), points in flat-index
//! order.
//!
//! **Binary** for bulk data: little-endian throughout, laid out as
//!
//! ```text
//! magic  [u8; 4] = "GF01"
//! dim    u32
//! n      u32
//! arity  u32
//! interp u32        (0 = linear, 1 = cubic; a hint, not a constraint)
//! l_box  f64
//! values npts * arity * f64, point-major: for each flat index, all components
//! ```
//!
//! Readers validate magic, header ranges and byte counts and fail with
//! [`Error::Format`] naming what was wrong.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, Interp};
use crate::real::Real;

const MAGIC: [u8; 4] = *b"GF01";

/// Write the binary encoding.
pub fn write_binary<T: Real>(
    gf: &GridFunction<T>,
    interp: Interp,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let g = gf.grid();
    w.write_all(&MAGIC)?;
    w.write_all(&(g.dim() as u32).to_le_bytes())?;
    w.write_all(&(g.n() as u32).to_le_bytes())?;
    w.write_all(&(gf.arity() as u32).to_le_bytes())?;
    let interp_code: u32 = match interp {
        Interp::Linear => 0,
        Interp::Cubic => 1,
    };
    w.write_all(&interp_code.to_le_bytes())?;
    w.write_all(&g.l_box().to_f64_lossy().to_le_bytes())?;
    let npts = g.npts();
    for idx in 0..npts {
        for c in 0..gf.arity() {
            w.write_all(&gf.at(c, idx).to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the binary encoding.
pub fn read_binary<T: Real>(path: &Path) -> Result<(GridFunction<T>, Interp)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a grid-function header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let dim = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let arity = read_u32(&mut r)? as usize;
    let interp_code = read_u32(&mut r)?;
    let l_box = read_f64(&mut r)?;
    let interp = match interp_code {
        0 => Interp::Linear,
        1 => Interp::Cubic,
        other => {
            return Err(Error::Format(format!(
                "unknown interpolation code {other}"
            )))
        }
    };
    if arity == 0 || arity > 64 {
        return Err(Error::Format(format!("implausible arity {arity}")));
    }
    let grid = Grid::new(dim, n, T::of(l_box))
        .map_err(|e| Error::Format(format!("invalid grid header: {e}")))?;
    let npts = grid.npts();
    let mut values = vec![T::zero(); arity * npts];
    let mut buf = [0u8; 8];
    for idx in 0..npts {
        for c in 0..arity {
            r.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!(
                    "value payload truncated at point {idx}, component {c}"
                ))
            })?;
            values[c * npts + idx] = T::of(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after value payload".into()));
    }
    Ok((GridFunction::from_values(grid, arity, values)?, interp))
}

/// Write the CSV encoding.
pub fn write_csv<T: Real>(gf: &GridFunction<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let g = gf.grid();
    let d = g.dim();
    let mut header: Vec<String> = (1..=d).map(|a| format!("i{a}")).collect();
    header.extend((1..=gf.arity()).map(|c| format!("v{c}")));
    w.write_record(&header)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut multi = [0usize; crate::grid::MAX_DIM];
    let mut record: Vec<String> = Vec::with_capacity(d + gf.arity());
    for idx in 0..g.npts() {
        record.clear();
        g.multi_of(idx, &mut multi[..d]);
        for &m in &multi[..d] {
            record.push(m.to_string());
        }
        for c in 0..gf.arity() {
            record.push(format!("{}", gf.at(c, idx).to_f64_lossy()));
        }
        w.write_record(&record)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read the CSV encoding onto a caller-provided grid (the CSV stores indices,
/// not coordinates, so the grid geometry must be known).
pub fn read_csv<T: Real>(grid: Grid<T>, path: &Path) -> Result<GridFunction<T>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let d = grid.dim();
    let headers = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if headers.len() <= d {
        return Err(Error::Format(format!(
            "CSV has {} columns, need at least {} index columns plus values",
            headers.len(),
            d
        )));
    }
    let arity = headers.len() - d;
    let npts = grid.npts();
    let mut values = vec![T::zero(); arity * npts];
    let mut seen = vec![false; npts];
    let mut multi = vec![0usize; d];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != d + arity {
            return Err(Error::Format(format!(
                "row {line} has {} fields, expected {}",
                rec.len(),
                d + arity
            )));
        }
        for a in 0..d {
            multi[a] = rec[a]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("row {line}: bad index `{}`", &rec[a])))?;
            if multi[a] >= grid.n() {
                return Err(Error::Format(format!(
                    "row {line}: index {} out of range 0..{}",
                    multi[a],
                    grid.n()
                )));
            }
        }
        let idx = grid.index_of(&multi);
        seen[idx] = true;
        for c in 0..arity {
            let v: f64 = rec[d + c]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {line}: bad value `{}`", &rec[d + c])))?;
            values[c * npts + idx] = T::of(v);
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Format(format!(
            "CSV does not cover the grid: flat index {missing} missing"
        )));
    }
    GridFunction::from_values(grid, arity, values)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("header truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("header truncated".into()))?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GridFunction<f64> {
        let g = Grid::<f64>::new(2, 16, 1.5).unwrap();
        GridFunction::from_fn(g, 2, |x: &[f64], out: &mut [f64]| {
            out[0] = x[0] + 2.0 * x[1];
            out[1] = (x[0] * x[1]).sin();
        })
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gf");
        let gf = sample();
        write_binary(&gf, Interp::Cubic, &path).unwrap();
        let (back, interp) = read_binary::<f64>(&path).unwrap();
        assert_eq!(interp, Interp::Cubic);
        assert_eq!(back.arity(), 2);
        assert_eq!(back.values(), gf.values());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let gf = sample();
        write_csv(&gf, &path).unwrap();
        let back = read_csv::<f64>(*gf.grid(), &path).unwrap();
        // Shortest-round-trip float formatting makes CSV exact for f64.
        assert_eq!(back.values(), gf.values());
    }

    #[test]
    fn binary_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gf");
        let gf = sample();
        write_binary(&gf, Interp::Linear, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_binary::<f64>(&path),
            Err(Error::Format(_))
        ));
        // Truncated payload.
        write_binary(&gf, Interp::Linear, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_binary::<f64>(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn csv_rejects_incomplete_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let gf = sample();
        write_csv(&gf, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(5);
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(
            read_csv::<f64>(*gf.grid(), &path),
            Err(Error::Format(_))
        ));
    }
}

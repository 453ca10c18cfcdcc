//! Result files: VTK volumes, raw density dumps, the iteration log and
//! flat key=value config files.
//!
//! Density fields are always exchanged in x-fastest order (x, then y, then
//! z), matching the mesh numbering. The VTK writer emits legacy ASCII
//! structured points so the volumes open directly in standard viewers;
//! values are printed with 9 significant digits, which is plenty for
//! plotting. The `.bin` dump keeps full precision: three little-endian
//! u64 grid dimensions followed by the raw little-endian f64 values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Write a density field as a legacy-ASCII structured-points volume with
/// one cell-data array named "density". `dims` counts cells per axis; the
/// file declares `dims + 1` points and `spacing` edge lengths.
pub fn write_density_vtk(
    rho: &[f64],
    dims: [usize; 3],
    spacing: f64,
    path: &Path,
) -> Result<()> {
    let n = dims[0] * dims[1] * dims[2];
    if rho.len() != n {
        return Err(Error::Config(format!(
            "density length {} does not match {}x{}x{} cells",
            rho.len(),
            dims[0],
            dims[1],
            dims[2]
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "density field")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", dims[0] + 1, dims[1] + 1, dims[2] + 1)?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {spacing} {spacing} {spacing}")?;
    writeln!(w, "CELL_DATA {n}")?;
    writeln!(w, "SCALARS density double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in rho {
        writeln!(w, "{v:.8e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a file produced by [`write_density_vtk`]: cell dimensions and
/// the density array.
pub fn read_density_vtk(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut dims: Option<[usize; 3]> = None;
    let mut count: Option<usize> = None;
    let mut rho = Vec::new();
    let mut in_data = false;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if in_data {
            if line.is_empty() {
                continue;
            }
            for tok in line.split_ascii_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Config(format!("bad density value '{tok}'")))?;
                rho.push(v);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("DIMENSIONS") {
            let p: Vec<usize> = rest
                .split_ascii_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config("bad DIMENSIONS line".into()))?;
            if p.len() != 3 || p.iter().any(|&d| d < 2) {
                return Err(Error::Config("bad DIMENSIONS line".into()));
            }
            dims = Some([p[0] - 1, p[1] - 1, p[2] - 1]);
        } else if let Some(rest) = line.strip_prefix("CELL_DATA") {
            count = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| Error::Config("bad CELL_DATA line".into()))?,
            );
        } else if line.starts_with("LOOKUP_TABLE") {
            in_data = true;
        }
    }
    let dims = dims.ok_or_else(|| Error::Config("no DIMENSIONS line".into()))?;
    let count = count.ok_or_else(|| Error::Config("no CELL_DATA line".into()))?;
    if rho.len() != count || count != dims[0] * dims[1] * dims[2] {
        return Err(Error::Config(format!(
            "expected {count} density values, found {}",
            rho.len()
        )));
    }
    Ok((dims, rho))
}

/// Full-precision density dump: 24-byte header of three little-endian u64
/// cell dimensions, then the field as little-endian f64, x-fastest.
pub fn write_density_bin(rho: &[f64], dims: [usize; 3], path: &Path) -> Result<()> {
    if rho.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::Config("density length does not match dims".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in rho {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_density_bin`].
pub fn read_density_bin(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 24];
    r.read_exact(&mut head)?;
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(head[8 * i..8 * i + 8].try_into().unwrap());
        *d = usize::try_from(raw)
            .map_err(|_| Error::Config("density dimensions overflow usize".into()))?;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::Config("density dimensions overflow usize".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * n {
        return Err(Error::Config(format!(
            "expected {} density bytes, found {}",
            8 * n,
            body.len()
        )));
    }
    let rho = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, rho))
}

/// Streaming writer for the per-iteration log. One data row per LP
/// subproblem; refresh events appear as `#` comment lines so the column
/// count stays uniform for dataframe loaders.
pub struct CsvLog {
    w: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<CsvLog> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "stage,iter,accepted,F,volume,gP_inf,delta,theta,pcg_iters,time_ms"
        )?;
        Ok(CsvLog { w })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn row(
        &mut self,
        stage: &str,
        iter: usize,
        accepted: bool,
        f: f64,
        volume: f64,
        g_p_inf: Option<f64>,
        delta: f64,
        theta: f64,
        pcg_iters: usize,
        time_ms: f64,
    ) -> Result<()> {
        let gp = match g_p_inf {
            Some(g) => format!("{g:.6e}"),
            None => String::new(),
        };
        writeln!(
            self.w,
            "{stage},{iter},{},{f:.9e},{volume:.9e},{gp},{delta:.6e},{theta:.6e},{pcg_iters},{time_ms:.1}",
            u8::from(accepted)
        )?;
        Ok(())
    }

    pub fn comment(&mut self, text: &str) -> Result<()> {
        writeln!(self.w, "# {text}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Parse a flat key=value config file: one pair per line, `#` starts a
/// comment, blank lines ignored. Returns pairs in file order so later
/// assignments win.
pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let line = match line.find('#') {
            Some(p) => &line[..p],
            None => &line[..],
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, found '{line}'",
                path.display(),
                ln + 1
            )));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: empty key",
                path.display(),
                ln + 1
            )));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

//! On-disk formats: a small flat binary container for synthesized media and
//! patterns, CSV tables with a commented header block, and content hashing
//! for run manifests.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size          field
//! 0       4             magic "TBC1"
//! 4       4             u32 format version (currently 1)
//! 8       1             u8 kind
//! 9       1             u8 ndim
//! 10      2             u16 reserved, zero
//! 12      8 * ndim      u64 dims
//! ..      8 * ndim      f64 extents (physical axis lengths, meters)
//! ..      4             u32 n_params
//! ..      8 * n_params  f64 params (kind-specific echo of the generating spec)
//! ..      8 * prod(dims) f64 payload, row-major
//! ```
//!
//! The params block echoes whatever defined the stored object (grain size
//! and seed for a diffuser, screen heights and Fried parameters for a stack)
//! so a file is self-describing without a sidecar.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array1;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid1;
use crate::media::{DiffuserRealization, DiffuserSpec};
use crate::turbulence::PhaseScreenStack;

pub const CONTAINER_VERSION: u32 = 1;
pub const KIND_REAL_ARRAY: u8 = 0;
pub const KIND_DIFFUSER: u8 = 1;
pub const KIND_SCREEN_STACK: u8 = 2;
pub const KIND_PATTERN: u8 = 3;

/// Schema tag written into every CSV header block.
pub const CSV_SCHEMA: &str = "twinbeam-csv v1";

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: u8,
    pub dims: Vec<u64>,
    pub extents: Vec<f64>,
    pub params: Vec<f64>,
    pub data: Vec<f64>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() || self.dims.len() > 8 {
            return Err(Error::Format(format!("{} axes; supported 1..=8", self.dims.len())));
        }
        if self.extents.len() != self.dims.len() {
            return Err(Error::Format("one extent per axis required".into()));
        }
        let count: u64 = self.dims.iter().product();
        if count != self.data.len() as u64 {
            return Err(Error::Format(format!(
                "dims give {count} samples, payload has {}",
                self.data.len()
            )));
        }
        let mut out = Vec::with_capacity(32 + 8 * self.data.len());
        out.extend_from_slice(b"TBC1");
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.push(self.kind);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &e in &self.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        let magic = cur.take(4)?;
        if magic != b"TBC1" {
            return Err(Error::Format("bad magic; not a TBC1 container".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "container version {version}, this build reads {CONTAINER_VERSION}"
            )));
        }
        let kind = cur.take(1)?[0];
        let ndim = cur.take(1)?[0] as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Format(format!("{ndim} axes; supported 1..=8")));
        }
        cur.take(2)?; // reserved
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let mut extents = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            extents.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let n_params = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::Format("dim product overflows".into())
        })?;
        if count > (1u64 << 32) {
            return Err(Error::Format(format!("{count} samples; refusing > 2^32")));
        }
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if cur.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.at
            )));
        }
        Ok(Self { kind, dims, extents, params, data })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Media adapters
// ---------------------------------------------------------------------------

/// Pack one diffuser plate: payload rows are the OPD map (meters) and the
/// amplitude map; params echo the generating spec.
pub fn diffuser_to_container(r: &DiffuserRealization, spec: &DiffuserSpec) -> Result<Container> {
    let n = r.grid.n();
    let mut data = Vec::with_capacity(2 * n);
    data.extend(r.opd_map.iter());
    data.extend(r.amplitude_map.iter());
    Ok(Container {
        kind: KIND_DIFFUSER,
        dims: vec![2, n as u64],
        extents: vec![2.0, r.grid.extent()],
        params: vec![
            spec.coherence_length_d,
            spec.opd_rms,
            spec.loss_strength_s,
            spec.seed as f64,
        ],
        data,
    })
}

pub fn diffuser_from_container(c: &Container) -> Result<DiffuserRealization> {
    if c.kind != KIND_DIFFUSER || c.dims.len() != 2 || c.dims[0] != 2 {
        return Err(Error::Format("not a diffuser container".into()));
    }
    let n = c.dims[1] as usize;
    let grid = Grid1::new(n, c.extents[1])?;
    Ok(DiffuserRealization {
        grid,
        opd_map: Array1::from_iter(c.data[..n].iter().copied()),
        amplitude_map: Array1::from_iter(c.data[n..].iter().copied()),
    })
}

/// Pack a screen stack: payload is the m x n phase matrix at the reference
/// wavelength; params hold the ambient state, then each screen's height and
/// Fried parameter.
pub fn screen_stack_to_container(s: &PhaseScreenStack) -> Result<Container> {
    let m = s.screens.len();
    let n = s.grid.n();
    let mut data = Vec::with_capacity(m * n);
    for sc in &s.screens {
        data.extend(sc.phase.iter());
    }
    let mut params = vec![
        s.reference_wavelength,
        s.pressure_mbar,
        s.temperature_k,
        if s.dispersion_enabled { 1.0 } else { 0.0 },
    ];
    params.extend(s.screens.iter().map(|sc| sc.z));
    params.extend(s.screens.iter().map(|sc| sc.r0));
    Ok(Container {
        kind: KIND_SCREEN_STACK,
        dims: vec![m as u64, n as u64],
        extents: vec![m as f64, s.grid.extent()],
        params,
        data,
    })
}

pub fn screen_stack_from_container(c: &Container) -> Result<PhaseScreenStack> {
    if c.kind != KIND_SCREEN_STACK || c.dims.len() != 2 {
        return Err(Error::Format("not a screen-stack container".into()));
    }
    let m = c.dims[0] as usize;
    let n = c.dims[1] as usize;
    if c.params.len() != 4 + 2 * m {
        return Err(Error::Format(format!(
            "screen stack with {m} screens needs {} params, found {}",
            4 + 2 * m,
            c.params.len()
        )));
    }
    let grid = Grid1::new(n, c.extents[1])?;
    let mut stack = PhaseScreenStack::new(grid, c.params[0]);
    stack.pressure_mbar = c.params[1];
    stack.temperature_k = c.params[2];
    stack.dispersion_enabled = c.params[3] != 0.0;
    for j in 0..m {
        let phase = Array1::from_iter(c.data[j * n..(j + 1) * n].iter().copied());
        stack.push_screen(phase, c.params[4 + j], c.params[4 + m + j])?;
    }
    Ok(stack)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Render a CSV table: a `#` comment block carrying the schema tag and any
/// caller notes (units, parameters), one column-name line, then the rows.
/// Floats use the shortest round-trip representation, so output is
/// deterministic and loses no precision.
pub fn csv_table(notes: &[String], columns: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    if columns.is_empty() {
        return Err(Error::Format("CSV needs at least one column".into()));
    }
    let mut out = String::new();
    out.push_str(&format!("# schema: {CSV_SCHEMA}\n"));
    for note in notes {
        out.push_str(&format!("# {note}\n"));
    }
    out.push_str(&columns.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != columns.len() {
            return Err(Error::Format(format!(
                "row {i} has {} fields for {} columns",
                row.len(),
                columns.len()
            )));
        }
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Parse a table written by [`csv_table`]: returns (columns, rows). Comment
/// lines are skipped; numeric fields accept nan/inf spellings.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|s| {
                let t = s.trim();
                match t {
                    "nan" => Ok(f64::NAN),
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    _ => t
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {i}: bad number {t:?}"))),
                }
            })
            .collect();
        let row = row?;
        if row.len() != columns.len() {
            return Err(Error::Format(format!(
                "row {i} has {} fields for {} columns",
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

// ---------------------------------------------------------------------------
// Content hashing
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::synth_diffuser;
    use crate::turbulence::AtmosphereParams;

    #[test]
    fn container_roundtrips_through_bytes() {
        let c = Container {
            kind: KIND_REAL_ARRAY,
            dims: vec![3, 4],
            extents: vec![1.5, 2.5],
            params: vec![42.0, -1.0],
            data: (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(),
        };
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn container_rejects_malformed_input() {
        let c = Container {
            kind: 0,
            dims: vec![4],
            extents: vec![1.0],
            params: vec![],
            data: vec![0.0; 4],
        };
        let mut bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err(), "truncated");
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err(), "bad magic");

        let mismatched = Container { data: vec![0.0; 3], ..c.clone() };
        assert!(mismatched.to_bytes().is_err(), "dims disagree with payload");

        let mut extra = c.to_bytes().unwrap();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err(), "trailing garbage");
    }

    #[test]
    fn diffuser_survives_the_container() {
        let grid = Grid1::new(256, 2e-3).unwrap();
        let spec = DiffuserSpec {
            coherence_length_d: 60e-6,
            opd_rms: 0.6e-6,
            loss_strength_s: 0.3,
            seed: 9,
        };
        let r = synth_diffuser(&spec, grid).unwrap();
        let c = diffuser_to_container(&r, &spec).unwrap();
        let back = diffuser_from_container(&c).unwrap();
        assert!(back.grid.same_as(&r.grid));
        for (a, b) in r.opd_map.iter().zip(back.opd_map.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in r.amplitude_map.iter().zip(back.amplitude_map.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(c.params[3], 9.0);
    }

    #[test]
    fn screen_stack_survives_the_container() {
        let grid = Grid1::new(512, 1.0).unwrap();
        let atm = AtmosphereParams::standard(1e-15);
        let stack =
            PhaseScreenStack::from_atmosphere(grid, &atm, 5e3, 2, 404e-9, 3, 77).unwrap();
        let c = screen_stack_to_container(&stack).unwrap();
        let back = screen_stack_from_container(&c).unwrap();
        assert_eq!(back.screens.len(), stack.screens.len());
        for (a, b) in stack.screens.iter().zip(back.screens.iter()) {
            assert_eq!(a.z, b.z);
            assert_eq!(a.r0, b.r0);
            for (x, y) in a.phase.iter().zip(b.phase.iter()) {
                assert_eq!(x, y);
            }
        }
        assert_eq!(back.reference_wavelength, stack.reference_wavelength);
        assert_eq!(back.dispersion_enabled, stack.dispersion_enabled);
    }

    #[test]
    fn csv_roundtrips_and_carries_header_block() {
        let rows = vec![vec![1.0, 0.5, f64::NAN], vec![2.0, -0.125, f64::INFINITY]];
        let text = csv_table(
            &["units: m, dimensionless, dimensionless".into()],
            &["x", "beta", "flag"],
            &rows,
        )
        .unwrap();
        assert!(text.starts_with(&format!("# schema: {CSV_SCHEMA}\n")));
        assert!(text.contains("# units: m"));
        let (cols, back) = parse_csv(&text).unwrap();
        assert_eq!(cols, vec!["x", "beta", "flag"]);
        assert_eq!(back[0][0], 1.0);
        assert_eq!(back[1][1], -0.125);
        assert!(back[0][2].is_nan());
        assert!(back[1][2].is_infinite());
        // shortest round-trip float text is byte-deterministic
        let again = csv_table(
            &["units: m, dimensionless, dimensionless".into()],
            &["x", "beta", "flag"],
            &rows,
        )
        .unwrap();
        assert_eq!(text, again);
        assert!(csv_table(&[], &[], &[]).is_err());
        assert!(csv_table(&[], &["a"], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn sha256_matches_known_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

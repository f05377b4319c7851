//! Binary checkpoints: the magic `BMIX1`, a little-endian `u32` header
//! length, a JSON header and then the payload as little-endian `f64`.
//!
//! A field checkpoint stores physical temperature values; a chain
//! checkpoint stores the spectral perturbation (re, im pairs) with the step
//! index and stream, so reloading continues the chain bit for bit.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Dirichlet, ScalarField};
use crate::grid::Grid;
use crate::markov::ChainState;

pub const MAGIC: &[u8; 5] = b"BMIX1";
pub const VERSION: u32 = 1;
/// Schema tag written as the first line of every CSV series.
pub const CSV_SCHEMA: &str = "# benard-mix csv v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Field,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: Kind,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    /// Bit pattern of `c`, so the grid check is exact.
    pub c_bits: u64,
    pub t_bottom: f64,
    pub t_top: f64,
    pub k: u64,
    pub seed: u64,
    pub chain: u64,
    pub len: usize,
}

impl Header {
    fn new(grid: &Grid, kind: Kind, boundary: Dirichlet, len: usize) -> Self {
        Header {
            version: VERSION,
            kind,
            n1: grid.n1(),
            n2: grid.n2(),
            n3: grid.n3(),
            c_bits: grid.layer_height().to_bits(),
            t_bottom: boundary.bottom,
            t_top: boundary.top,
            k: 0,
            seed: 0,
            chain: 0,
            len,
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if (self.n1, self.n2, self.n3, self.c_bits) != (grid.n1(), grid.n2(), grid.n3(), grid.layer_height().to_bits()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint grid {}x{}x{} c={} does not match {grid:?}",
                self.n1,
                self.n2,
                self.n3,
                f64::from_bits(self.c_bits)
            )));
        }
        Ok(())
    }

    pub fn boundary(&self) -> Dirichlet {
        Dirichlet::new(self.t_bottom, self.t_top)
    }
}

fn write_raw(w: &mut impl Write, header: &Header, data: impl Iterator<Item = f64>) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_raw(r: &mut impl Read) -> Result<(Header, Vec<f64>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("version {} not supported (expected {VERSION})", header.version)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.len * 8 {
        return Err(Error::Checkpoint(format!("payload has {} bytes, header says {} values", bytes.len(), header.len)));
    }
    let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((header, data))
}

pub fn save_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let header = Header::new(field.grid(), Kind::Field, field.boundary(), field.values().len());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw(&mut w, &header, field.values().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn load_field(grid: &Arc<Grid>, path: impl AsRef<Path>) -> Result<ScalarField> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, data) = read_raw(&mut r)?;
    header.check_grid(grid)?;
    if header.kind != Kind::Field {
        return Err(Error::Checkpoint("not a field checkpoint".into()));
    }
    ScalarField::from_values(grid, data, header.boundary())
}

pub fn save_chain(grid: &Grid, boundary: Dirichlet, state: &ChainState, path: impl AsRef<Path>) -> Result<()> {
    if state.s.len() != grid.spec_len() {
        return Err(Error::SizeMismatch { expected: grid.spec_len(), got: state.s.len() });
    }
    let mut header = Header::new(grid, Kind::Chain, boundary, 2 * state.s.len());
    header.k = state.k;
    header.seed = state.seed;
    header.chain = state.chain;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw(&mut w, &header, state.s.iter().flat_map(|z| [z.re, z.im]))?;
    w.flush()?;
    Ok(())
}

/// Loads a chain checkpoint and returns it with the boundary data it was
/// saved with.
pub fn load_chain(grid: &Grid, path: impl AsRef<Path>) -> Result<(ChainState, Dirichlet)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, data) = read_raw(&mut r)?;
    header.check_grid(grid)?;
    if header.kind != Kind::Chain {
        return Err(Error::Checkpoint("not a chain checkpoint".into()));
    }
    if data.len() != 2 * grid.spec_len() {
        return Err(Error::Checkpoint("payload does not match grid".into()));
    }
    let s = data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    Ok((ChainState { s, k: header.k, seed: header.seed, chain: header.chain }, header.boundary()))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_raw(&mut r)?.0)
}

/// CSV of horizontal means: one row per plane, `x3,mean`.
pub fn write_profile_csv(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let g = field.grid();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_SCHEMA}")?;
    writeln!(w, "x3,mean")?;
    for (j, m) in field.horizontal_means().iter().enumerate() {
        writeln!(w, "{:.17e},{:.17e}", g.x3(j), m)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_smooth;

    #[test]
    fn field_round_trip_is_exact() {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let b = Dirichlet::new(1.0, 0.0);
        let mut f = ScalarField::conduction(&g, b).add(&random_smooth(&g, 3, 3, 3));
        f.set_boundary(b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bmix");
        save_field(&f, &p).unwrap();
        let back = load_field(&g, &p).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.boundary(), b);
    }

    #[test]
    fn chain_round_trip_keeps_stream() {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let s: Vec<Complex64> = (0..g.spec_len()).map(|i| Complex64::new(i as f64 * 0.1, -(i as f64).sqrt())).collect();
        let st = ChainState { s, k: 17, seed: 99, chain: 5 };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bmix");
        save_chain(&g, Dirichlet::new(1.0, 0.0), &st, &p).unwrap();
        assert_eq!(load_chain(&g, &p).unwrap().0, st);
    }

    #[test]
    fn rejects_version_grid_and_magic() {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let f = ScalarField::conduction(&g, Dirichlet::new(1.0, 0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bmix");
        save_field(&f, &p).unwrap();
        let other = Grid::new(8, 8, 32, 0.25).unwrap();
        assert!(matches!(load_field(&other, &p), Err(Error::Checkpoint(_))));
        assert!(load_chain(&g, &p).is_err());

        let mut header = read_header(&p).unwrap();
        header.version = VERSION + 1;
        let mut buf = Vec::new();
        write_raw(&mut buf, &header, f.values().iter().copied()).unwrap();
        std::fs::write(&p, &buf).unwrap();
        let e = load_field(&g, &p).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");

        buf[0] = b'X';
        std::fs::write(&p, &buf).unwrap();
        assert!(load_field(&g, &p).unwrap_err().to_string().contains("magic"));
    }
}

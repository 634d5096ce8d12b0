//! Matrix dumps and CSV output.
//!
//! The binary dump starts with the magic `CMDUMP01` followed by a little
//! endian `u64` entry count. Each entry is a `u64` name length, the UTF-8
//! name, `u64` rows, `u64` cols and then `rows·cols` pairs of `f64`
//! (real, imaginary) in row-major order. The CSV dump carries the same data
//! as `name,row,col,re,im` rows.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::beam::BeamAllocation;
use crate::channel::TrueChannelSlot;
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat, RMat};
use crate::mm::{MmReport, PrecoderSet};
use crate::posterior::{BlockPosterior, PosteriorModel, UserPosterior};

pub const MAGIC: &[u8; 8] = b"CMDUMP01";

/// A named complex matrix.
pub type Entry = (String, CMat);

pub fn write_dump<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, m) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_all(&m[(i, j)].re.to_le_bytes())?;
                w.write_all(&m[(i, j)].im.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Dump("truncated input".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Sizes above this are treated as corruption rather than allocated.
const MAX_LEN: u64 = 1 << 32;

pub fn read_dump<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Dump("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let count = read_u64(&mut r)?;
    if count > MAX_LEN {
        return Err(Error::Dump(format!("implausible entry count {count}")));
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_LEN {
            return Err(Error::Dump(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Dump("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Dump("name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)?;
        let cols = read_u64(&mut r)?;
        if rows.saturating_mul(cols) > MAX_LEN {
            return Err(Error::Dump(format!("implausible shape {rows}x{cols}")));
        }
        let (rows, cols) = (rows as usize, cols as usize);
        let mut m = linalg::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let re = read_f64(&mut r)?;
                let im = read_f64(&mut r)?;
                m[(i, j)] = c64(re, im);
            }
        }
        out.push((name, m));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Dump("trailing bytes".into()));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpRow {
    name: String,
    row: usize,
    col: usize,
    re: f64,
    im: f64,
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub fn write_dump_csv<W: Write>(w: W, entries: &[Entry]) -> Result<()> {
    let mut out = csv_writer(w);
    for (name, m) in entries {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.serialize(DumpRow {
                    name: name.clone(),
                    row: i,
                    col: j,
                    re: m[(i, j)].re,
                    im: m[(i, j)].im,
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV dump. Entries appear in order of first occurrence and each
/// matrix spans the largest row and column index seen for its name.
pub fn read_dump_csv<R: Read>(r: R) -> Result<Vec<Entry>> {
    let mut rows: Vec<(String, Vec<DumpRow>)> = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize::<DumpRow>() {
        let rec = rec?;
        match rows.iter_mut().find(|(n, _)| *n == rec.name) {
            Some((_, v)) => v.push(rec),
            None => rows.push((rec.name.clone(), vec![rec])),
        }
    }
    rows.into_iter()
        .map(|(name, v)| {
            let nr = v.iter().map(|x| x.row + 1).max().unwrap_or(0);
            let nc = v.iter().map(|x| x.col + 1).max().unwrap_or(0);
            if v.len() != nr * nc {
                return Err(Error::Dump(format!(
                    "entry `{name}` is not a full {nr}x{nc} matrix"
                )));
            }
            let mut m = linalg::zeros(nr, nc);
            for x in v {
                m[(x.row, x.col)] = c64(x.re, x.im);
            }
            Ok((name, m))
        })
        .collect()
}

pub fn precoder_entries(p: &PrecoderSet) -> Vec<Entry> {
    p.as_slice()
        .iter()
        .enumerate()
        .map(|(k, m)| (format!("P/{k}"), m.clone()))
        .collect()
}

pub fn precoders_from_entries(entries: &[Entry]) -> Result<PrecoderSet> {
    let mut out = Vec::new();
    for (k, (name, m)) in entries.iter().enumerate() {
        if *name != format!("P/{k}") {
            return Err(Error::Dump(format!("expected P/{k}, found `{name}`")));
        }
        out.push(m.clone());
    }
    Ok(PrecoderSet(out))
}

/// `H/{user}/{block}` for every user and block of a slot.
pub fn slot_entries(slots: &[TrueChannelSlot]) -> Vec<Entry> {
    slots
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            s.blocks
                .iter()
                .enumerate()
                .map(move |(n, h)| (format!("H/{k}/{}", n + 1), h.clone()))
        })
        .collect()
}

/// `V`, then `hhat/{block}/{user}`, `xi2/{block}/{user}` and
/// `U/{block}/{user}` for every data block.
pub fn posterior_entries(model: &PosteriorModel) -> Vec<Entry> {
    let mut out = Vec::new();
    if let Some(b) = model.blocks().first() {
        out.push(("V".to_string(), b.v.clone()));
    }
    for b in model.blocks() {
        for (k, u) in b.users.iter().enumerate() {
            out.push((format!("hhat/{}/{k}", b.block), u.hhat.clone()));
            out.push((format!("xi2/{}/{k}", b.block), linalg::complexify(&u.xi2)));
            out.push((format!("U/{}/{k}", b.block), u.u.clone()));
        }
    }
    out
}

pub fn posterior_from_entries(entries: &[Entry]) -> Result<PosteriorModel> {
    let mut it = entries.iter();
    let v = match it.next() {
        Some((n, v)) if n == "V" => v.clone(),
        _ => return Err(Error::Dump("posterior dump must start with V".into())),
    };
    let rest: Vec<&Entry> = it.collect();
    if !rest.len().is_multiple_of(3) {
        return Err(Error::Dump("posterior entries come in triples".into()));
    }
    let mut blocks: Vec<BlockPosterior> = Vec::new();
    for t in rest.chunks(3) {
        let parse = |name: &str, kind: &str| -> Result<(usize, usize)> {
            let mut parts = name.split('/');
            let ok = parts.next() == Some(kind);
            let n = parts.next().and_then(|x| x.parse().ok());
            let k = parts.next().and_then(|x| x.parse().ok());
            match (ok, n, k, parts.next()) {
                (true, Some(n), Some(k), None) => Ok((n, k)),
                _ => Err(Error::Dump(format!("unexpected entry `{name}`"))),
            }
        };
        let id = parse(&t[0].0, "hhat")?;
        if parse(&t[1].0, "xi2")? != id || parse(&t[2].0, "U")? != id {
            return Err(Error::Dump(format!(
                "incomplete posterior triple for block {} user {}",
                id.0, id.1
            )));
        }
        let xi2 = t[1].1.map(|z| z.re);
        if t[1].1.iter().any(|z| z.im != 0.0) || xi2.iter().any(|&x| x < 0.0) {
            return Err(Error::Dump("variances must be real and nonnegative".into()));
        }
        let user = UserPosterior {
            hhat: t[0].1.clone(),
            xi2: RMat::from(xi2),
            u: t[2].1.clone(),
        };
        match blocks.last_mut() {
            Some(b) if b.block == id.0 && b.users.len() == id.1 => b.users.push(user),
            _ if id.1 == 0 => blocks.push(BlockPosterior {
                block: id.0,
                v: v.clone(),
                users: vec![user],
            }),
            _ => {
                return Err(Error::Dump(format!(
                    "out-of-order entry for block {} user {}",
                    id.0, id.1
                )))
            }
        }
    }
    Ok(PosteriorModel::from_blocks(blocks))
}

/// Writes serializable rows as a CSV with a header and LF line endings.
pub fn write_records<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// One row of an MM trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub de_objective: f64,
    pub mu: f64,
    pub power: f64,
}

pub fn trace_rows(report: &MmReport) -> Vec<IterationRow> {
    report
        .objective
        .iter()
        .zip(&report.mu)
        .zip(&report.power)
        .enumerate()
        .map(|(i, ((&o, &m), &p))| IterationRow {
            iteration: i,
            de_objective: o,
            mu: m,
            power: p,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamRow {
    pub user: usize,
    pub beam: usize,
    pub power: f64,
}

pub fn beam_rows(alloc: &BeamAllocation) -> Vec<BeamRow> {
    alloc
        .rows()
        .into_iter()
        .map(|(user, beam, power)| BeamRow { user, beam, power })
        .collect()
}

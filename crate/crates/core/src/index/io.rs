//! Little-endian index and embedding-table files.
//!
//! `DNIX`: u32 `dim, nlist, m_sub, nbits, count`; f64 coarse centroids
//! (`nlist × dim`); f64 PQ codebooks (`m_sub × 2^nbits × dim/m_sub`); per list
//! a u32 length followed by `(u32 id, m_sub code bytes)` entries; then a u32
//! flag and, when set, the semantic-id block: u32 `layers, k`, f64 centroids
//! (`layers × k × dim`) and `count` records of `(u32 id, layers × u32)`.
//!
//! `DNEB`: u32 `count, dim`, then `count × dim` f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use super::ivfpq::{IvfPqIndex, PostingList};
use super::residual::{ResidualCodebook, SemanticId};
use crate::error::{Error, Result};
use crate::util::{expect_magic, get_f64s, get_u32, put_f64s, put_u32};

const INDEX_MAGIC: &[u8; 4] = b"DNIX";
const EMB_MAGIC: &[u8; 4] = b"DNEB";
const MAX_ELEMS: usize = 1 << 31;

pub fn write_index(w: &mut impl Write, ix: &IvfPqIndex) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    for v in [ix.dim, ix.nlist(), ix.m_sub(), ix.nbits as usize, ix.len()] {
        put_u32(w, v as u32)?;
    }
    put_f64s(w, ix.centroids.as_slice().expect("standard layout"))?;
    put_f64s(w, ix.codebooks.as_slice().expect("standard layout"))?;
    for list in &ix.lists {
        put_u32(w, list.ids.len() as u32)?;
        for (id, code) in list.ids.iter().zip(list.codes.chunks_exact(ix.m_sub())) {
            put_u32(w, *id)?;
            w.write_all(code)?;
        }
    }
    match &ix.semantic {
        None => put_u32(w, 0)?,
        Some((cb, ids)) => {
            put_u32(w, 1)?;
            put_u32(w, cb.layers.len() as u32)?;
            put_u32(w, cb.k() as u32)?;
            for layer in &cb.layers {
                put_f64s(w, layer.as_slice().expect("standard layout"))?;
            }
            for (doc, sid) in ids {
                put_u32(w, *doc)?;
                for &c in &sid.0 {
                    put_u32(w, c)?;
                }
            }
        }
    }
    Ok(())
}

fn checked(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMS)
        .ok_or_else(|| Error::Format(format!("implausible block shape {dims:?}")))
}

pub fn read_index(r: &mut impl Read) -> Result<IvfPqIndex> {
    expect_magic(r, INDEX_MAGIC)?;
    let mut h = [0usize; 5];
    for v in h.iter_mut() {
        *v = get_u32(r)? as usize;
    }
    let [dim, nlist, m_sub, nbits, count] = h;
    if dim == 0 || nlist == 0 || m_sub == 0 || dim % m_sub != 0 || !(1..=8).contains(&nbits) {
        return Err(Error::Format(format!("bad index header {h:?}")));
    }
    let ksub = 1usize << nbits;
    let mut centroids = Array2::zeros((nlist, dim));
    checked(&[nlist, dim])?;
    get_f64s(r, centroids.as_slice_mut().expect("standard layout"))?;
    checked(&[m_sub, ksub, dim / m_sub])?;
    let mut codebooks = Array3::zeros((m_sub, ksub, dim / m_sub));
    get_f64s(r, codebooks.as_slice_mut().expect("standard layout"))?;
    let mut lists = Vec::with_capacity(nlist);
    let mut seen = 0usize;
    for _ in 0..nlist {
        let len = get_u32(r)? as usize;
        seen += len;
        if seen > count {
            return Err(Error::Format("posting lists exceed header count".into()));
        }
        let mut list = PostingList {
            ids: Vec::with_capacity(len),
            codes: vec![0; len * m_sub],
        };
        for code in list.codes.chunks_exact_mut(m_sub) {
            list.ids.push(get_u32(r)?);
            r.read_exact(code)
                .map_err(|e| Error::Format(format!("truncated code: {e}")))?;
        }
        if list.codes.iter().any(|&c| c as usize >= ksub) {
            return Err(Error::Format("code beyond codebook size".into()));
        }
        lists.push(list);
    }
    if seen != count {
        return Err(Error::Format(format!(
            "header count {count}, lists hold {seen}"
        )));
    }
    let semantic = match get_u32(r)? {
        0 => None,
        1 => {
            let n_layers = get_u32(r)? as usize;
            let k = get_u32(r)? as usize;
            checked(&[n_layers, k, dim])?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let mut l = Array2::zeros((k, dim));
                get_f64s(r, l.as_slice_mut().expect("standard layout"))?;
                layers.push(l);
            }
            let mut ids = Vec::with_capacity(count);
            for _ in 0..count {
                let doc = get_u32(r)?;
                let sid = (0..n_layers)
                    .map(|_| get_u32(r))
                    .collect::<Result<Vec<u32>>>()?;
                if sid.iter().any(|&c| c as usize >= k) {
                    return Err(Error::Format("semantic id beyond k".into()));
                }
                ids.push((doc, SemanticId(sid)));
            }
            Some((ResidualCodebook { layers }, ids))
        }
        x => return Err(Error::Format(format!("bad semantic block flag {x}"))),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after index".into()));
    }
    Ok(IvfPqIndex {
        dim,
        nbits: nbits as u32,
        centroids,
        codebooks,
        lists,
        semantic,
    })
}

pub fn save_index(path: &Path, ix: &IvfPqIndex) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(&mut w, ix)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<IvfPqIndex> {
    read_index(&mut BufReader::new(File::open(path)?))
}

/// Writes rows as f32.
pub fn write_embeddings(w: &mut impl Write, table: &Array2<f64>) -> Result<()> {
    w.write_all(EMB_MAGIC)?;
    put_u32(w, table.nrows() as u32)?;
    put_u32(w, table.ncols() as u32)?;
    for v in table.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<Array2<f64>> {
    expect_magic(r, EMB_MAGIC)?;
    let n = get_u32(r)? as usize;
    let dim = get_u32(r)? as usize;
    checked(&[n, dim])?;
    let mut out = Array2::zeros((n, dim));
    let mut b = [0u8; 4];
    for v in out.iter_mut() {
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated embedding table: {e}")))?;
        *v = f32::from_le_bytes(b) as f64;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after embeddings".into()));
    }
    Ok(out)
}

pub fn save_embeddings(path: &Path, table: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, table)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Array2<f64>> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}

//! Little-endian tower checkpoints.
//!
//! Layout: magic `DNT1`; u32 config fields `layers, heads, hidden, dim,
//! vocab, max_pos, causal`; then every weight block as f64 in declaration
//! order (see [`TowerParams::blocks`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tower::{TowerConfig, TowerParams};
use crate::error::{Error, Result};
use crate::util::{expect_magic, get_f64s, get_u32, put_f64s, put_u32};

const MAGIC: &[u8; 4] = b"DNT1";

pub fn write_tower(w: &mut impl Write, p: &TowerParams) -> Result<()> {
    let c = &p.config;
    w.write_all(MAGIC)?;
    for v in [
        c.layers,
        c.heads,
        c.hidden,
        c.dim,
        c.vocab,
        c.max_pos,
        c.causal as usize,
    ] {
        put_u32(w, v as u32)?;
    }
    for (_, block) in p.blocks() {
        put_f64s(w, block)?;
    }
    Ok(())
}

pub fn read_tower(r: &mut impl Read) -> Result<TowerParams> {
    expect_magic(r, MAGIC)?;
    let mut f = [0usize; 7];
    for v in f.iter_mut() {
        *v = get_u32(r)? as usize;
    }
    let config = TowerConfig {
        layers: f[0],
        heads: f[1],
        hidden: f[2],
        dim: f[3],
        vocab: f[4],
        max_pos: f[5],
        causal: match f[6] {
            0 => false,
            1 => true,
            x => return Err(Error::Format(format!("bad causal flag {x}"))),
        },
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad tower header: {e}")))?;
    let mut p = TowerParams::zeros(config);
    for (_, block) in p.blocks_mut() {
        get_f64s(r, block)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tower weights".into()));
    }
    Ok(p)
}

pub fn save_tower(path: &Path, p: &TowerParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tower(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_tower(path: &Path) -> Result<TowerParams> {
    read_tower(&mut BufReader::new(File::open(path)?))
}

//! Self-describing binary checkpoint container.
//!
//! Layout (little-endian): magic `FDCK`, format version, a phase tag, the
//! full config echo as flat key=value text, the phase-local step counter,
//! then named f32 tensors (parameters plus feature statistics), then an
//! optional optimizer-state section (Adam first/second moments and step)
//! for mid-phase resume points. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    pub config_text: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        write_str(&mut w, path, &self.phase)?;
        write_str(&mut w, path, &self.config_text)?;
        w.write_u64::<LittleEndian>(self.step).map_err(io)?;
        write_tensors(&mut w, path, &self.tensors)?;
        match &self.opt {
            None => w.write_u8(0).map_err(io)?,
            Some(opt) => {
                w.write_u8(1).map_err(io)?;
                w.write_u64::<LittleEndian>(opt.step).map_err(io)?;
                write_tensors(&mut w, path, &opt.m)?;
                write_tensors(&mut w, path, &opt.v)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(fmt("bad magic (not a checkpoint file)"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt("truncated version"))?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let phase = read_str(&mut r, path)?;
        let config_text = read_str(&mut r, path)?;
        let step = r
            .read_u64::<LittleEndian>()
            .map_err(|_| fmt("truncated step"))?;
        let tensors = read_tensors(&mut r, path)?;
        let has_opt = r.read_u8().map_err(|_| fmt("truncated opt flag"))?;
        let opt = if has_opt == 1 {
            let ostep = r
                .read_u64::<LittleEndian>()
                .map_err(|_| fmt("truncated opt step"))?;
            let m = read_tensors(&mut r, path)?;
            let v = read_tensors(&mut r, path)?;
            Some(OptState { step: ostep, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            phase,
            config_text,
            step,
            tensors,
            opt,
        })
    }
}

fn write_str<W: Write>(w: &mut W, path: &Path, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)
        .map_err(|e| Error::io(path, e))?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_str<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    if len > (1 << 26) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("implausible string length {len}"),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "invalid utf-8 string".into(),
    })
}

fn write_tensors<W: Write>(w: &mut W, path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        write_str(w, path, name)?;
        w.write_u32::<LittleEndian>(t.rank() as u32).map_err(io)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let io = |e: std::io::Error| Error::io(path, e);
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if count > (1 << 20) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("implausible tensor count {count}"),
        });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(r, path)?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if rank > 8 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("implausible rank {rank} for tensor {name}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 28) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("implausible tensor size {len} for {name}"),
            });
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("truncated tensor data for {name}"),
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(out)
}

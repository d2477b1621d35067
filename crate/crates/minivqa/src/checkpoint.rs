//! Binary checkpoint container.
//!
//! Layout: magic `PLMC`, version u16, a length-prefixed UTF-8 config record
//! (JSON), then named tensors until EOF, each as (name length u16, name
//! bytes, rank u8, dims u32 each, f64 little-endian values).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLMC";
pub const VERSION: u16 = 1;

pub struct CheckpointWriter<W: Write> {
    out: W,
}

impl CheckpointWriter<BufWriter<File>> {
    pub fn create(path: &Path, config_json: &str) -> Result<Self> {
        let file = BufWriter::new(File::create(path)?);
        CheckpointWriter::new(file, config_json)
    }
}

impl<W: Write> CheckpointWriter<W> {
    pub fn new(mut out: W, config_json: &str) -> Result<Self> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let cfg = config_json.as_bytes();
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(cfg)?;
        Ok(CheckpointWriter { out })
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        self.out.write_all(&(nb.len() as u16).to_le_bytes())?;
        self.out.write_all(nb)?;
        let rank = t.shape().len();
        if rank > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank {rank} too high")));
        }
        self.out.write_all(&[rank as u8])?;
        for &d in t.shape() {
            self.out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let cfg_len = u32::from_le_bytes(len4) as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config_json = String::from_utf8(cfg)
            .map_err(|e| Error::Checkpoint(format!("config record not UTF-8: {e}")))?;

        let mut tensors = Vec::new();
        loop {
            let mut len2 = [0u8; 2];
            match r.read_exact(&mut len2) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u16::from_le_bytes(len2) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut len4)?;
                shape.push(u32::from_le_bytes(len4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f8 = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut f8)?;
                data.push(f64::from_le_bytes(f8));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint {
            config_json,
            tensors,
        })
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

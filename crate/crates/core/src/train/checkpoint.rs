//! Parameter snapshots.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   8 bytes "NUTACKPT"
//! version u32     1
//! config  u32 length + UTF-8 network config (TOML)
//! count   u32
//! count x { name u32 length + UTF-8, kind u8 (0 parameter, 1 buffer), len u64, f64[len] }
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, TwoBranchNet};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"NUTACKPT";
const VERSION: u32 = 1;

/// Named values of a network in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Vec<(String, Vec<f64>)>,
    pub buffers: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(net: &mut TwoBranchNet<T>) -> Self {
        let config = net.config().clone();
        let params = net
            .named_params_mut()
            .into_iter()
            .map(|(n, p)| (n, p.data().iter().map(|v| v.as_f64()).collect()))
            .collect();
        let buffers = net
            .named_buffers_mut()
            .into_iter()
            .map(|(n, b)| (n, b.iter().map(|v| v.as_f64()).collect()))
            .collect();
        Checkpoint { config, params, buffers }
    }

    /// Copies every stored value into `net`, which must have the same layout.
    pub fn restore<T: Scalar>(&self, net: &mut TwoBranchNet<T>) -> Result<()> {
        let mismatch = |name: &str| Error::invalid("checkpoint", format!("`{name}` missing or wrong size"));
        let params = net.named_params_mut();
        if params.len() != self.params.len() {
            return Err(Error::invalid("checkpoint", "parameter count differs from the network"));
        }
        for ((name, p), (sname, values)) in params.into_iter().zip(&self.params) {
            if &name != sname || values.len() != p.numel() {
                return Err(mismatch(&name));
            }
            *p = Tensor::param(values.iter().map(|&v| T::of(v)).collect(), p.shape().clone())?;
        }
        let buffers = net.named_buffers_mut();
        if buffers.len() != self.buffers.len() {
            return Err(Error::invalid("checkpoint", "buffer count differs from the network"));
        }
        for ((name, b), (sname, values)) in buffers.into_iter().zip(&self.buffers) {
            if &name != sname || values.len() != b.len() {
                return Err(mismatch(&name));
            }
            *b = values.iter().map(|&v| T::of(v)).collect();
        }
        Ok(())
    }

    /// A fresh network carrying the stored values.
    pub fn build<T: Scalar>(&self) -> Result<TwoBranchNet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = TwoBranchNet::init(&self.config, &mut rng)?;
        self.restore(&mut net)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |buf: &mut Vec<u8>, s: &str| {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        };
        put_str(&mut buf, &self.config.to_toml());
        buf.extend_from_slice(&((self.params.len() + self.buffers.len()) as u32).to_le_bytes());
        for (kind, list) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (name, values) in list {
                put_str(&mut buf, name);
                buf.push(kind);
                buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config = NetworkConfig::from_toml(&r.string()?).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name = r.string()?;
            let kind = r.take(1)?[0];
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let values = r
                .take(len.checked_mul(8).ok_or("bad length")?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            match kind {
                0 => params.push((name, values)),
                1 => buffers.push((name, values)),
                k => return Err(format!("unknown entry kind {k}")),
            }
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(Checkpoint { config, params, buffers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or("truncated checkpoint")?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())
    }
}

//! Captured layer hidden states and the HSR1 capture file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"HSR1"  u32 version  u32 N  u32 d  u32 layer  u32 perm_tag
//! f64 noise_scale  then N*d f32 row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::permutation::PermKind;

pub const MAGIC: &[u8; 4] = b"HSR1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenCapture {
    pub matrix: Matrix,
    pub layer: usize,
    /// Fingerprint of the producing model; not stored in files.
    pub model_fingerprint: Option<u64>,
    pub noise_scale: f64,
    pub perm_tag: PermKind,
}

impl HiddenCapture {
    pub fn from_matrix(matrix: Matrix, layer: usize) -> Self {
        Self {
            matrix,
            layer,
            model_fingerprint: None,
            noise_scale: 0.0,
            perm_tag: PermKind::None,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.matrix.data().len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.rows() as u32,
            self.dim() as u32,
            self.layer as u32,
            self.perm_tag.tag(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.noise_scale.to_le_bytes());
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("missing HSR1 magic".into()));
        }
        let u32_at = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"))
        };
        let version = u32_at(0);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (rows, dim, layer) = (u32_at(1) as usize, u32_at(2) as usize, u32_at(3) as usize);
        let perm_tag = PermKind::from_tag(u32_at(4))?;
        let noise_scale = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != rows * dim * 4 {
            return Err(Error::Format(format!(
                "payload of {} bytes, header says {rows}x{dim}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            matrix: Matrix::from_vec(rows, dim, data).map_err(|e| Error::Format(e.to_string()))?,
            layer,
            model_fingerprint: None,
            noise_scale,
            perm_tag,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Binary container shared by search checkpoints and pruned networks.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! UTF-8 JSON header, then each blob listed in the header as raw
//! little-endian `f32` values in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CIRNASCK";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors in file order.
pub type Blobs = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    blobs: Vec<BlobInfo>,
    #[serde(flatten)]
    header: H,
}

/// Writes `header` and the named tensors to `out`.
pub fn write_container<H: Serialize, W: Write>(
    out: &mut W,
    header: &H,
    blobs: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let env = Envelope {
        blobs: blobs
            .iter()
            .map(|(name, t)| BlobInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let io = |e| Error::io("writing checkpoint", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for (_, t) in blobs {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

/// Reads a container written by [`write_container`].
pub fn read_container<H: DeserializeOwned, R: Read>(input: &mut R) -> Result<(H, Blobs)> {
    let io = |e| Error::io("reading checkpoint", e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(io)?;
    let env: Envelope<H> = serde_json::from_slice(&json)?;
    let mut blobs = Vec::with_capacity(env.blobs.len());
    for info in env.blobs {
        let n: usize = info.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push((info.name, Tensor::new(info.shape, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io)? != 0 {
        return Err(Error::Format("trailing bytes after last blob".into()));
    }
    Ok((env.header, blobs))
}

pub fn save<H: Serialize>(path: &Path, header: &H, blobs: &[(String, &Tensor<f32>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_container(&mut w, header, blobs)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, Blobs)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_container(&mut std::io::BufReader::new(file))
}

/// Pops blobs by name in the expected order.
pub(crate) struct BlobReader {
    blobs: std::vec::IntoIter<(String, Tensor<f32>)>,
}

impl BlobReader {
    pub(crate) fn new(blobs: Vec<(String, Tensor<f32>)>) -> Self {
        BlobReader {
            blobs: blobs.into_iter(),
        }
    }

    pub(crate) fn next(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let (got, t) = self
            .blobs
            .next()
            .ok_or_else(|| Error::Format(format!("missing blob {name}")))?;
        if got != name || t.shape() != shape {
            return Err(Error::Format(format!(
                "expected blob {name} {shape:?}, found {got} {:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        match self.blobs.next() {
            Some((name, _)) => Err(Error::Format(format!("unexpected blob {name}"))),
            None => Ok(()),
        }
    }
}

/// Reads just the header, e.g. to dispatch on the checkpoint kind.
pub fn peek_header<H: DeserializeOwned>(path: &Path) -> Result<H> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e| Error::io("reading checkpoint", e);
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes")) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    Ok(serde_json::from_slice(&json)?)
}

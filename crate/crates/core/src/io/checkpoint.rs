//! Checkpoint binary format.
//!
//! Layout, all integers little-endian:
//!   magic "SEIN" | u32 version | u32 config-text length | config text (UTF-8)
//!   then repeated tensor records:
//!   u16 name length | name bytes | u8 dtype (0 = f32 LE) | u8 rank |
//!   u32 dims ... | raw values
//! Denoiser tensors carry their manifest names; learned-codec tensors are
//! prefixed with `codec.`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::codec::{Codec, LearnedCodec};
use crate::error::{Error, Result};
use crate::io::config::{CodecKind, Config};
use crate::nn::DenoiserParams;

pub const MAGIC: [u8; 4] = *b"SEIN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug)]
pub struct CheckpointContents {
    pub params: DenoiserParams<f32>,
    pub codec: Codec,
    pub config: Config,
}

fn codec_tensors(codec: &Codec) -> Vec<(String, ArrayD<f32>)> {
    match codec {
        Codec::Identity => Vec::new(),
        Codec::Learned(lc) => vec![
            ("codec.enc1.w".into(), lc.enc1.w.clone().into_dyn()),
            ("codec.enc1.b".into(), lc.enc1.b.clone().into_dyn()),
            ("codec.enc2.w".into(), lc.enc2.w.clone().into_dyn()),
            ("codec.enc2.b".into(), lc.enc2.b.clone().into_dyn()),
            ("codec.dec1.w".into(), lc.dec1.w.clone().into_dyn()),
            ("codec.dec1.b".into(), lc.dec1.b.clone().into_dyn()),
            ("codec.dec2.w".into(), lc.dec2.w.clone().into_dyn()),
            ("codec.dec2.b".into(), lc.dec2.b.clone().into_dyn()),
        ],
    }
}

/// Serializes parameters, codec, and the resolved config. `config.train_step`
/// records the step the parameters correspond to.
pub fn save_checkpoint(
    path: &Path,
    params: &DenoiserParams<f32>,
    codec: &Codec,
    config: &Config,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = config.to_text();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());

    let mut write_record = |name: &str, dims: &[usize], values: &mut dyn Iterator<Item = f32>| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, view) in params.named_views() {
        write_record(&name, view.shape(), &mut view.iter().copied());
    }
    for (name, tensor) in codec_tensors(codec) {
        write_record(&name, tensor.shape(), &mut tensor.iter().copied());
    }

    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Truncated);
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.at == self.data.len()
    }
}

/// Loads a checkpoint. The parameter set is rebuilt from the embedded config
/// and every tensor is filled by name; a record whose shape disagrees with
/// the architecture is reported as a shape mismatch naming that tensor.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointContents> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, at: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
    let config = Config::parse(cfg_text)?;

    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Parse(format!("tensor '{name}': unsupported dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Parse(format!("tensor '{name}': {e}")))?;
        tensors.push((name, arr));
    }

    let mut params = DenoiserParams::<f32>::init(&config.arch(), 0)?;
    let mut filled = std::collections::BTreeSet::new();
    let mut codec_records: std::collections::BTreeMap<String, ArrayD<f32>> =
        std::collections::BTreeMap::new();
    {
        let mut views: std::collections::BTreeMap<String, _> =
            params.named_views_mut().into_iter().collect();
        for (name, tensor) in tensors {
            if let Some(stripped) = name.strip_prefix("codec.") {
                codec_records.insert(stripped.to_string(), tensor);
                continue;
            }
            let view = views
                .get_mut(&name)
                .ok_or_else(|| Error::Parse(format!("unexpected tensor '{name}'")))?;
            if view.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor '{name}': checkpoint {:?} vs architecture {:?}",
                    tensor.shape(),
                    view.shape()
                )));
            }
            view.assign(&tensor);
            filled.insert(name);
        }
        if filled.len() != views.len() {
            let missing = views
                .keys()
                .find(|k| !filled.contains(*k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Parse(format!("tensor '{missing}' missing from checkpoint")));
        }
    }

    let codec = match config.codec {
        CodecKind::Identity => {
            if !codec_records.is_empty() {
                return Err(Error::Parse("identity-codec checkpoint carries codec tensors".into()));
            }
            Codec::Identity
        }
        CodecKind::Learned => {
            let mut lc =
                LearnedCodec::init(config.codec_latent_channels, config.codec_hidden, 0);
            let fill4 = |name: &str, target: &mut ndarray::Array4<f32>| -> Result<()> {
                let rec = codec_records
                    .get(name)
                    .ok_or_else(|| Error::Parse(format!("tensor 'codec.{name}' missing")))?;
                if rec.shape() != target.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor 'codec.{name}': checkpoint {:?} vs architecture {:?}",
                        rec.shape(),
                        target.shape()
                    )));
                }
                target.assign(&rec.view().into_dimensionality::<ndarray::Ix4>().unwrap());
                Ok(())
            };
            fill4("enc1.w", &mut lc.enc1.w)?;
            fill4("enc2.w", &mut lc.enc2.w)?;
            fill4("dec1.w", &mut lc.dec1.w)?;
            fill4("dec2.w", &mut lc.dec2.w)?;
            let fill1 = |name: &str, target: &mut ndarray::Array1<f32>| -> Result<()> {
                let rec = codec_records
                    .get(name)
                    .ok_or_else(|| Error::Parse(format!("tensor 'codec.{name}' missing")))?;
                if rec.shape() != target.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor 'codec.{name}': checkpoint {:?} vs architecture {:?}",
                        rec.shape(),
                        target.shape()
                    )));
                }
                target.assign(&rec.view().into_dimensionality::<ndarray::Ix1>().unwrap());
                Ok(())
            };
            fill1("enc1.b", &mut lc.enc1.b)?;
            fill1("enc2.b", &mut lc.enc2.b)?;
            fill1("dec1.b", &mut lc.dec1.b)?;
            fill1("dec2.b", &mut lc.dec2.b)?;
            Codec::Learned(lc)
        }
    };

    Ok(CheckpointContents { params, codec, config })
}

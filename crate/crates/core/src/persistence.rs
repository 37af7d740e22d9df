//! Checksummed binary container for parameter sets and training state.
//!
//! Layout: a fixed header (magic, format version, artifact kind, config hash,
//! iteration), a sequence of named blocks, then a CRC-32 of every byte
//! between the header and the CRC itself. Training checkpoints store arrays
//! as little-endian f64 so that resumed runs are bit-exact; inference
//! exports store the teacher as f32.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{ParamArray, ParameterSet};
use crate::trainer::{TrainState, TrainingConfig};

pub const MAGIC: &[u8; 8] = b"CFEAARCH";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 8 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error("{0}: not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("{path}: format version {found}, this build reads version {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{0}: checksum mismatch (truncated or corrupted)")]
    Checksum(PathBuf),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: artifact is a {found}, expected a {expected}")]
    WrongKind {
        path: PathBuf,
        found: ArtifactKind,
        expected: ArtifactKind,
    },
    #[error("config hash {found:016x} differs from the supplied config {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Training,
    Inference,
    Parameters,
}

impl ArtifactKind {
    fn code(self) -> u8 {
        match self {
            ArtifactKind::Training => 0,
            ArtifactKind::Inference => 1,
            ArtifactKind::Parameters => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ArtifactKind::Training),
            1 => Some(ArtifactKind::Inference),
            2 => Some(ArtifactKind::Parameters),
            _ => None,
        }
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArtifactKind::Training => "training checkpoint",
            ArtifactKind::Inference => "inference export",
            ArtifactKind::Parameters => "parameter file",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub kind: ArtifactKind,
    pub config_hash: u64,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

const F64_TAG: u8 = 0;
const F32_TAG: u8 = 1;
const BYTES_TAG: u8 = 2;

#[derive(Default)]
struct Archive {
    blocks: IndexMap<String, Block>,
}

impl Archive {
    fn put(&mut self, name: impl Into<String>, block: Block) {
        let name = name.into();
        let fresh = self.blocks.insert(name.clone(), block).is_none();
        debug_assert!(fresh, "duplicate block {name}");
    }

    fn put_u64(&mut self, name: &str, v: u64) {
        self.put(name, Block::Bytes(v.to_le_bytes().to_vec()));
    }

    fn put_params(&mut self, prefix: &str, p: &ParameterSet) {
        self.put_u64(&format!("{prefix}.iteration"), p.iteration);
        for (name, a) in p.iter() {
            self.put(
                format!("{prefix}/{name}"),
                Block::F64 {
                    shape: a.shape.clone(),
                    data: a.data.clone(),
                },
            );
        }
    }

    fn put_adam(&mut self, prefix: &str, opt: &AdamState) {
        self.put_u64(&format!("{prefix}.step"), opt.step);
        for (which, arrays) in [("m", &opt.m), ("v", &opt.v)] {
            for (i, a) in arrays.iter().enumerate() {
                self.put(
                    format!("{prefix}/{which}/{i}"),
                    Block::F64 {
                        shape: vec![a.len()],
                        data: a.clone(),
                    },
                );
            }
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match block {
                Block::F64 { shape, data } => {
                    out.push(F64_TAG);
                    put_shape(&mut out, shape);
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Block::F32 { shape, data } => {
                    out.push(F32_TAG);
                    put_shape(&mut out, shape);
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Block::Bytes(b) => {
                    out.push(BYTES_TAG);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

/// Bounds-checked little-endian reader over a body.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
        .into()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("block overruns body at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn shape(&mut self) -> Result<(Vec<usize>, usize)> {
        let nd = self.u32()? as usize;
        let mut shape = Vec::with_capacity(nd.min(8));
        let mut n: usize = 1;
        for _ in 0..nd {
            let d = self.u64()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| self.corrupt("array size overflows"))?;
            shape.push(d);
        }
        Ok((shape, n))
    }

    fn archive(mut self) -> Result<Archive> {
        let mut a = Archive::default();
        while self.pos < self.buf.len() {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| self.corrupt("block name is not UTF-8"))?
                .to_string();
            let tag = self.take(1)?[0];
            let block = match tag {
                F64_TAG => {
                    let (shape, n) = self.shape()?;
                    let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("size"))?)?;
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Block::F64 { shape, data }
                }
                F32_TAG => {
                    let (shape, n) = self.shape()?;
                    let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("size"))?)?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Block::F32 { shape, data }
                }
                BYTES_TAG => {
                    let n = self.u64()? as usize;
                    Block::Bytes(self.take(n)?.to_vec())
                }
                t => return Err(self.corrupt(format!("unknown block tag {t}"))),
            };
            if a.blocks.insert(name.clone(), block).is_some() {
                return Err(self.corrupt(format!("duplicate block {name}")));
            }
        }
        Ok(a)
    }
}

/// Decoded archive plus the path it came from, for error messages.
struct Loaded {
    path: PathBuf,
    header: Header,
    archive: Archive,
}

impl Loaded {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        CheckpointError::Corrupt {
            path: self.path.clone(),
            message: message.into(),
        }
        .into()
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.archive
            .blocks
            .get(name)
            .ok_or_else(|| self.corrupt(format!("missing block {name}")))
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.block(name)? {
            Block::Bytes(b) => Ok(b),
            _ => Err(self.corrupt(format!("block {name} is not a byte block"))),
        }
    }

    fn u64(&self, name: &str) -> Result<u64> {
        let b = self.bytes(name)?;
        b.try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| self.corrupt(format!("block {name} is not a u64")))
    }

    fn text(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?)
            .map_err(|_| self.corrupt(format!("block {name} is not UTF-8")))
    }

    /// Parameter arrays under `prefix/`, in stored order.
    fn params(&self, prefix: &str) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        let lead = format!("{prefix}/");
        for (name, block) in &self.archive.blocks {
            let Some(short) = name.strip_prefix(&lead) else {
                continue;
            };
            let array = match block {
                Block::F64 { shape, data } => ParamArray::new(shape.clone(), data.clone())?,
                Block::F32 { shape, data } => {
                    ParamArray::new(shape.clone(), data.iter().map(|&v| v as f64).collect())?
                }
                Block::Bytes(_) => return Err(self.corrupt(format!("block {name} is not an array"))),
            };
            p.insert(short, array)?;
        }
        if p.is_empty() {
            return Err(self.corrupt(format!("no parameter blocks under {prefix}")));
        }
        let it = format!("{prefix}.iteration");
        if self.archive.blocks.contains_key(&it) {
            p.iteration = self.u64(&it)?;
        }
        Ok(p)
    }

    fn adam(&self, prefix: &str, params: &ParameterSet) -> Result<AdamState> {
        let mut st = AdamState::new(params);
        st.step = self.u64(&format!("{prefix}.step"))?;
        for (which, arrays) in [("m", &mut st.m), ("v", &mut st.v)] {
            for (i, a) in arrays.iter_mut().enumerate() {
                match self.block(&format!("{prefix}/{which}/{i}"))? {
                    Block::F64 { data, .. } if data.len() == a.len() => a.copy_from_slice(data),
                    _ => return Err(self.corrupt(format!("bad optimizer block {prefix}/{which}/{i}"))),
                }
            }
        }
        Ok(st)
    }
}

fn encode_file(header: &Header, archive: &Archive) -> Vec<u8> {
    let body = archive.encode();
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.push(header.kind.code());
    out.extend_from_slice(&header.config_hash.to_le_bytes());
    out.extend_from_slice(&header.iteration.to_le_bytes());
    let crc = crc32fast::hash(&body);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Writes `bytes` to a sibling temp file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let res = (|| -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()).into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Checksum(path.to_path_buf()).into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let kind = ArtifactKind::from_code(bytes[12]).ok_or_else(|| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        message: format!("unknown artifact kind {}", bytes[12]),
    })?;
    Ok(Header {
        version,
        kind,
        config_hash: u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")),
        iteration: u64::from_le_bytes(bytes[21..29].try_into().expect("8 bytes")),
    })
}

fn read_file(path: &Path) -> Result<Loaded> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::NotFound(path.to_path_buf()).into())
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let header = parse_header(path, &bytes)?;
    if bytes.len() < HEADER_LEN + 4 {
        return Err(CheckpointError::Checksum(path.to_path_buf()).into());
    }
    let (body, crc) = bytes[HEADER_LEN..].split_at(bytes.len() - HEADER_LEN - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(CheckpointError::Checksum(path.to_path_buf()).into());
    }
    let archive = Reader {
        buf: body,
        pos: 0,
        path,
    }
    .archive()?;
    Ok(Loaded {
        path: path.to_path_buf(),
        header,
        archive,
    })
}

fn expect_kind(l: &Loaded, kinds: &[ArtifactKind]) -> Result<()> {
    if kinds.contains(&l.header.kind) {
        Ok(())
    } else {
        Err(CheckpointError::WrongKind {
            path: l.path.clone(),
            found: l.header.kind,
            expected: kinds[0],
        }
        .into())
    }
}

/// Reads and validates only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    Ok(read_file(path)?.header)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    a.put("config", Block::Bytes(state.config.to_toml().into_bytes()));
    a.put_params("student", &state.student);
    a.put_params("teacher", &state.teacher);
    a.put_params("disc_enc", &state.disc_enc);
    a.put_params("disc_dec", &state.disc_dec);
    a.put_adam("opt_student", &state.opt_student);
    a.put_adam("opt_disc_enc", &state.opt_disc_enc);
    a.put_adam("opt_disc_dec", &state.opt_disc_dec);
    a.put("rng.seed", Block::Bytes(state.rng.get_seed().to_vec()));
    a.put_u64("rng.stream", state.rng.get_stream());
    a.put(
        "rng.word_pos",
        Block::Bytes(state.rng.get_word_pos().to_le_bytes().to_vec()),
    );
    let header = Header {
        version: FORMAT_VERSION,
        kind: ArtifactKind::Training,
        config_hash: state.config.hash(),
        iteration: state.iteration,
    };
    write_atomic(path, &encode_file(&header, &a))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let l = read_file(path)?;
    expect_kind(&l, &[ArtifactKind::Training])?;
    let config = TrainingConfig::from_toml(l.text("config")?)?;
    if config.hash() != l.header.config_hash {
        return Err(l.corrupt("stored config does not match the header hash"));
    }
    let student = l.params("student")?;
    let teacher = l.params("teacher")?;
    let disc_enc = l.params("disc_enc")?;
    let disc_dec = l.params("disc_dec")?;
    let opts = [
        l.adam("opt_student", &student)?,
        l.adam("opt_disc_enc", &disc_enc)?,
        l.adam("opt_disc_dec", &disc_dec)?,
    ];
    let seed: [u8; 32] = l
        .bytes("rng.seed")?
        .try_into()
        .map_err(|_| l.corrupt("rng seed must be 32 bytes"))?;
    let word_pos: [u8; 16] = l
        .bytes("rng.word_pos")?
        .try_into()
        .map_err(|_| l.corrupt("rng position must be 16 bytes"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(l.u64("rng.stream")?);
    rng.set_word_pos(u128::from_le_bytes(word_pos));
    TrainState::from_parts(
        config,
        student,
        teacher,
        disc_enc,
        disc_dec,
        opts,
        l.header.iteration,
        rng,
    )
}

/// Loads a checkpoint and compares its config hash with `expected`: a
/// mismatch is refused when `strict`, otherwise logged as a warning.
pub fn load_checkpoint_checked(
    path: &Path,
    expected: &TrainingConfig,
    strict: bool,
) -> Result<TrainState> {
    let header = read_header(path)?;
    let want = expected.hash();
    if header.config_hash != want {
        if strict {
            return Err(CheckpointError::ConfigMismatch {
                expected: want,
                found: header.config_hash,
            }
            .into());
        }
        log::warn!(
            "{}: config hash {:016x} differs from supplied config {want:016x}; continuing with the checkpoint's config",
            path.display(),
            header.config_hash
        );
    }
    load_checkpoint(path)
}

/// Writes the teacher weights as f32 with the backbone config, for inference only.
pub fn export_inference(state: &TrainState, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    let text = toml::to_string(&state.config.backbone).expect("backbone config serializes");
    a.put("backbone", Block::Bytes(text.into_bytes()));
    for (name, arr) in state.teacher.iter() {
        a.put(
            format!("teacher/{name}"),
            Block::F32 {
                shape: arr.shape.clone(),
                data: arr.data.iter().map(|&v| v as f32).collect(),
            },
        );
    }
    let header = Header {
        version: FORMAT_VERSION,
        kind: ArtifactKind::Inference,
        config_hash: state.config.hash(),
        iteration: state.iteration,
    };
    write_atomic(path, &encode_file(&header, &a))
}

/// Backbone config and teacher weights from a training checkpoint or an
/// inference export.
pub fn load_inference_model(path: &Path) -> Result<(BackboneConfig, ParameterSet)> {
    let l = read_file(path)?;
    expect_kind(&l, &[ArtifactKind::Training, ArtifactKind::Inference])?;
    let config = match l.header.kind {
        ArtifactKind::Training => TrainingConfig::from_toml(l.text("config")?)?.backbone,
        _ => toml::from_str(l.text("backbone")?).map_err(|e| l.corrupt(e.to_string()))?,
    };
    Ok((config, l.params("teacher")?))
}

/// Stand-alone f64 parameter file.
pub fn save_parameters(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    a.put_params("params", params);
    let header = Header {
        version: FORMAT_VERSION,
        kind: ArtifactKind::Parameters,
        config_hash: 0,
        iteration: params.iteration,
    };
    write_atomic(path, &encode_file(&header, &a))
}

pub fn load_parameters(path: &Path) -> Result<ParameterSet> {
    let l = read_file(path)?;
    expect_kind(&l, &[ArtifactKind::Parameters])?;
    l.params("params")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a", ParamArray::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        p.insert("b", ParamArray::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        p.iteration = 9;
        p
    }

    #[test]
    fn parameters_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_parameters(&tiny(), &path).unwrap();
        let back = load_parameters(&path).unwrap();
        assert!(back.values_bit_equal(&tiny()));
        assert_eq!(back.iteration, 9);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_parameters(Path::new("/nonexistent/x.bin")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::NotFound(_))));
    }

    #[test]
    fn truncation_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_parameters(&tiny(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [1, 7, bytes.len() - HEADER_LEN - 1] {
            fs::write(&path, &bytes[..bytes.len() - cut]).unwrap();
            let err = load_parameters(&path).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::Checksum(_))),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn flipped_body_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_parameters(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_parameters(&path).unwrap_err(),
            Error::Checkpoint(CheckpointError::Checksum(_))
        ));
    }

    #[test]
    fn other_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_parameters(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_parameters(&path).unwrap_err(),
            Error::Checkpoint(CheckpointError::Version { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn foreign_file_has_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        fs::write(&path, b"hello world, definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_parameters(&path).unwrap_err(),
            Error::Checkpoint(CheckpointError::BadMagic(_))
        ));
    }
}

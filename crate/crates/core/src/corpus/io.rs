use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CorpusError, CorpusStore, FrameFeature, LiveComment, Result, VideoMeta};

pub const FEATURE_MAGIC: &[u8; 4] = b"LBFE";
pub const FEATURE_VERSION: u32 = 1;

/// Reads the manifest, comments and feature files and cross-validates them.
pub fn load_corpus(manifest: &Path, comments: &Path, features: &Path) -> Result<CorpusStore> {
    let videos = read_manifest(manifest)?;
    let comments = read_comments(comments)?;
    let (dim, features) = read_features(features)?;
    CorpusStore::new(videos, comments, features, dim)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            file: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<VideoMeta>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, v)| v).collect())
}

pub fn read_comments(path: &Path) -> Result<Vec<LiveComment>> {
    let name = path.display().to_string();
    read_jsonl::<LiveComment>(path)?
        .into_iter()
        .map(|(line, c)| {
            if c.tokens.is_empty() {
                Err(CorpusError::Malformed {
                    file: name.clone(),
                    line,
                    message: "comment has no tokens".into(),
                })
            } else {
                Ok(c)
            }
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, videos: &[VideoMeta]) -> Result<()> {
    write_jsonl(path, videos)
}

pub fn write_comments(path: &Path, comments: &[LiveComment]) -> Result<()> {
    write_jsonl(path, comments)
}

/// Streams frame records into the binary feature format.
pub struct FeatureWriter<W: Write> {
    inner: W,
    dim: usize,
}

impl FeatureWriter<BufWriter<File>> {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), dim)
    }
}

impl<W: Write> FeatureWriter<W> {
    pub fn new(mut inner: W, dim: usize) -> Result<Self> {
        let dim32 = u32::try_from(dim).map_err(|_| CorpusError::FeatureFormat("dim too large".into()))?;
        inner.write_all(FEATURE_MAGIC)?;
        inner.write_all(&FEATURE_VERSION.to_le_bytes())?;
        inner.write_all(&dim32.to_le_bytes())?;
        Ok(Self { inner, dim })
    }

    pub fn write(&mut self, video_id: &str, time: f32, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(CorpusError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let len = u16::try_from(video_id.len())
            .map_err(|_| CorpusError::FeatureFormat(format!("video_id too long: {video_id}")))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(video_id.as_bytes())?;
        self.inner.write_all(&time.to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * vector.len());
        for v in vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Fills `buf` as far as the reader allows; returns the byte count.
fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn read_features(path: &Path) -> Result<(usize, Vec<FrameFeature>)> {
    read_features_from(BufReader::new(File::open(path)?))
}

pub(crate) fn read_features_from<R: Read>(mut r: R) -> Result<(usize, Vec<FrameFeature>)> {
    let mut header = [0u8; 12];
    if read_up_to(&mut r, &mut header)? != 12 {
        return Err(CorpusError::FeatureFormat("truncated header".into()));
    }
    if &header[..4] != FEATURE_MAGIC {
        return Err(CorpusError::FeatureFormat(format!("bad magic {:?}", &header[..4])));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(CorpusError::FeatureFormat(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(CorpusError::FeatureFormat("dim must be positive".into()));
    }

    let mut out = Vec::new();
    let mut vec_buf = vec![0u8; 4 * dim];
    loop {
        let mut len = [0u8; 2];
        match read_up_to(&mut r, &mut len)? {
            0 => break,
            2 => {}
            _ => return Err(CorpusError::FeatureFormat("truncated record header".into())),
        }
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        let mut time = [0u8; 4];
        if read_up_to(&mut r, &mut id)? != id.len() || read_up_to(&mut r, &mut time)? != 4 {
            return Err(CorpusError::FeatureFormat("truncated record header".into()));
        }
        let got = read_up_to(&mut r, &mut vec_buf)?;
        if got != vec_buf.len() {
            return Err(CorpusError::DimMismatch {
                expected: dim,
                found: got / 4,
            });
        }
        let video_id = String::from_utf8(id)
            .map_err(|e| CorpusError::FeatureFormat(format!("video_id is not UTF-8: {e}")))?;
        out.push(FrameFeature {
            video_id,
            time: f32::from_le_bytes(time) as f64,
            vector: vec_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
    }
    Ok((dim, out))
}

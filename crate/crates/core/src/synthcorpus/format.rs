//! Single-file corpus container.
//!
//! ```text
//! magic "GVLMCORP" | u32 version | u64 seed | u32 len + spec (key = value lines)
//! u32 item count, then per item:
//!   u8 split | u32 T | u32 H | u32 W | T*H*W*3 f32 video
//!   u32 len + UTF-8 caption
//!   u32 span count, then (u32 start, u32 end, u32 object) per span
//!   u32 object count, then ceil(T*H*W/8) bytes of LSB-first packed mask each
//!   T bytes of scene label
//! 32-byte SHA-256 of everything above
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CaptionedVideo, Corpus, CorpusSpec, NounSpan, RegionMask, Split, VideoTensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GVLMCORP";
pub(crate) const CHECKSUM_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn encode(corpus: &Corpus, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&corpus.version.to_le_bytes());
    out.extend_from_slice(&corpus.seed.to_le_bytes());
    let spec = corpus.spec.to_kv();
    put_u32(out, spec.len());
    out.extend_from_slice(spec.as_bytes());
    put_u32(out, corpus.items.len());
    for (item, split) in corpus.items.iter().zip(&corpus.splits) {
        out.push(split.tag());
        let v = &item.video;
        put_u32(out, v.frames);
        put_u32(out, v.height);
        put_u32(out, v.width);
        for x in &v.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        put_u32(out, item.caption.len());
        out.extend_from_slice(item.caption.as_bytes());
        put_u32(out, item.noun_spans.len());
        for s in &item.noun_spans {
            put_u32(out, s.start);
            put_u32(out, s.end);
            put_u32(out, s.object);
        }
        put_u32(out, item.region_masks.len());
        for m in &item.region_masks {
            let mut packed = vec![0u8; m.bits.len().div_ceil(8)];
            for (i, &b) in m.bits.iter().enumerate() {
                if b {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        out.extend_from_slice(&item.scene_label);
    }
    let digest = Sha256::digest(&out[..]);
    out.extend_from_slice(&digest);
}

pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    encode(corpus, &mut buf);
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("corpus file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format("invalid UTF-8 text"))
    }
}

/// Reads and verifies a corpus; a checksum or structure failure returns an
/// error and no partial corpus.
pub fn read_corpus(mut r: impl Read) -> Result<Corpus> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + CHECKSUM_LEN || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a corpus file"));
    }
    let (body, digest) = buf.split_at(buf.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format("corpus checksum mismatch"));
    }
    let mut c = Cursor {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = c.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported corpus version {version}")));
    }
    let seed = c.u64()?;
    let spec = CorpusSpec::from_kv(&c.string()?)?;
    let n = c.u32()?;
    let mut items = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        splits.push(Split::from_tag(c.take(1)?[0])?);
        let (t, h, w) = (c.u32()?, c.u32()?, c.u32()?);
        let raw = c.take(t * h * w * 3 * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let video = VideoTensor::new(t, h, w, data)?;
        let caption = c.string()?;
        let n_spans = c.u32()?;
        let mut noun_spans = Vec::with_capacity(n_spans);
        for _ in 0..n_spans {
            let span = NounSpan {
                start: c.u32()?,
                end: c.u32()?,
                object: c.u32()?,
            };
            if span.end > caption.len()
                || span.start > span.end
                || !caption.is_char_boundary(span.start)
                || !caption.is_char_boundary(span.end)
            {
                return Err(Error::format("noun span outside caption"));
            }
            noun_spans.push(span);
        }
        let n_obj = c.u32()?;
        let plane = t * h * w;
        let mut region_masks = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let packed = c.take(plane.div_ceil(8))?;
            let bits = (0..plane).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            region_masks.push(RegionMask {
                frames: t,
                height: h,
                width: w,
                bits,
            });
        }
        if noun_spans.iter().any(|s| s.object >= n_obj) {
            return Err(Error::format("noun span refers to a missing object"));
        }
        let scene_label = c.take(t)?.to_vec();
        items.push(CaptionedVideo {
            video,
            caption,
            noun_spans,
            region_masks,
            scene_label,
        });
    }
    if c.pos != body.len() {
        return Err(Error::format("trailing bytes after last item"));
    }
    Ok(Corpus {
        items,
        splits,
        seed,
        spec,
        version,
    })
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        encode(self, &mut buf);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        read_corpus(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpus, CorpusSpec};
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let spec = CorpusSpec {
            size: 5,
            twoscene_frac: 0.4,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec, 3).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_is_detected() {
        let c = generate_corpus(&CorpusSpec { size: 2, ..CorpusSpec::default() }, 3).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let mid = buf.len() / 2;
        buf[mid] ^= 0x40;
        assert!(matches!(read_corpus(&buf[..]), Err(Error::Format(_))));
        buf.truncate(100);
        assert!(read_corpus(&buf[..]).is_err());
    }
}

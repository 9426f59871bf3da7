//! Binary corpus container and matrix records.
//!
//! Corpus layout (all integers little-endian u32, frames f32):
//!
//! ```text
//! magic "TSNC" | version | feature_dim | n_task_tokens
//! per task token: symbol_len | utf8 bytes
//! n_utts
//! per utterance: id_len | id bytes | n_frames | transcript_len
//!                | n_frames*feature_dim f32 | transcript_len u32
//! ```
//!
//! Matrix records ("TSNM") hold one rows×cols f32 matrix and serve as the
//! interop dump format for probability graphs.

use std::fs;
use std::path::Path;

use super::task::{Corpus, Utterance};
use super::vocab::Vocab;
use super::DataError;

const CORPUS_MAGIC: &[u8; 4] = b"TSNC";
const MATRIX_MAGIC: &[u8; 4] = b"TSNM";
const VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DataError> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DataError> {
        Ok(self.f64s(1)?[0])
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn string(&mut self) -> Result<String, DataError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| DataError::Parse {
            offset,
            what: format!("invalid utf-8 string: {e}"),
        })
    }
}

pub(crate) fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_string(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, corpus.feature_dim as u32);
    push_u32(&mut out, corpus.vocab.n_task_tokens() as u32);
    for sym in corpus.vocab.task_symbols() {
        push_string(&mut out, sym);
    }
    push_u32(&mut out, corpus.utterances.len() as u32);
    for u in &corpus.utterances {
        push_string(&mut out, &u.id);
        push_u32(&mut out, u.n_frames as u32);
        push_u32(&mut out, u.transcript.len() as u32);
        for &v in &u.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &t in &u.transcript {
            push_u32(&mut out, t);
        }
    }
    out
}

pub fn corpus_from_bytes(buf: &[u8]) -> Result<Corpus, DataError> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4)?;
    if magic != CORPUS_MAGIC {
        return Err(DataError::WrongFormat { expected: "corpus" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let feature_dim = r.u32()? as usize;
    if feature_dim == 0 {
        return Err(DataError::Parse {
            offset: r.pos - 4,
            what: "feature_dim must be positive".into(),
        });
    }
    let n_task = r.u32()? as usize;
    let symbols: Vec<String> = (0..n_task).map(|_| r.string()).collect::<Result<_, _>>()?;
    let vocab = Vocab::new(&symbols)?;
    let n_utts = r.u32()? as usize;
    let mut utterances = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let id = r.string()?;
        let n_frames = r.u32()? as usize;
        let transcript_len = r.u32()? as usize;
        let frames = r.f32s(n_frames * feature_dim)?;
        let transcript_offset = r.pos;
        let transcript: Vec<u32> = (0..transcript_len).map(|_| r.u32()).collect::<Result<_, _>>()?;
        if let Some(&bad) = transcript
            .iter()
            .find(|&&t| Vocab::is_special(t) || t as usize >= vocab.size())
        {
            return Err(DataError::Parse {
                offset: transcript_offset,
                what: format!("transcript token {bad} is special or out of range"),
            });
        }
        utterances.push(Utterance {
            id,
            frames,
            n_frames,
            feature_dim,
            transcript,
        });
    }
    if r.pos != buf.len() {
        return Err(DataError::Parse {
            offset: r.pos,
            what: "trailing bytes after corpus payload".into(),
        });
    }
    Ok(Corpus {
        vocab,
        feature_dim,
        utterances,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    Ok(fs::write(path, corpus_to_bytes(corpus))?)
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    corpus_from_bytes(&fs::read(path)?)
}

/// Plain-text transcript export: one `id<TAB>tokens` line per utterance.
pub fn write_transcripts(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    let mut out = String::new();
    for u in &corpus.utterances {
        out.push_str(&u.id);
        out.push('\t');
        out.push_str(&corpus.vocab.render(&u.transcript));
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

/// Write one rows×cols matrix (f64 values stored as f32) as a "TSNM" record.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<(), DataError> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(MATRIX_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, rows as u32);
    push_u32(&mut out, cols as u32);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(fs::write(path, out)?)
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let magic = r.take(4)?;
    if magic != MATRIX_MAGIC {
        return Err(DataError::WrongFormat { expected: "matrix" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32s(rows * cols)?.iter().map(|&v| v as f64).collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::task::{generate_corpus, TaskConfig};

    #[test]
    fn roundtrip_is_lossless() {
        let corpus = generate_corpus(&TaskConfig::default(), 25);
        let bytes = corpus_to_bytes(&corpus);
        let back = corpus_from_bytes(&bytes).unwrap();
        assert_eq!(corpus, back);
        // bit-for-bit on re-serialization too
        assert_eq!(bytes, corpus_to_bytes(&back));
    }

    #[test]
    fn truncation_reports_offset_not_crash() {
        let corpus = generate_corpus(&TaskConfig::default(), 3);
        let bytes = corpus_to_bytes(&corpus);
        for cut in [2usize, 9, 30, bytes.len() - 5] {
            match corpus_from_bytes(&bytes[..cut]) {
                Err(DataError::Truncated { offset }) => assert!(offset <= cut),
                Err(DataError::Parse { .. }) => {}
                other => panic!("cut at {cut}: expected parse failure, got {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_is_a_distinct_error() {
        let corpus = generate_corpus(&TaskConfig::default(), 2);
        let mut bytes = corpus_to_bytes(&corpus);
        bytes[0] = b'X';
        assert!(matches!(
            corpus_from_bytes(&bytes),
            Err(DataError::WrongFormat { expected: "corpus" })
        ));
    }

    #[test]
    fn matrix_record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.tsnm");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        write_matrix(&path, 3, 4, &data).unwrap();
        let (rows, cols, back) = read_matrix(&path).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(back, data); // values chosen exactly representable in f32
    }

    #[test]
    fn transcripts_export_is_tab_separated() {
        let corpus = generate_corpus(&TaskConfig::default(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.txt");
        write_transcripts(&path, &corpus).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for (line, u) in text.lines().zip(&corpus.utterances) {
            let (id, toks) = line.split_once('\t').unwrap();
            assert_eq!(id, u.id);
            assert_eq!(corpus.vocab.parse(toks).unwrap(), u.transcript);
        }
    }
}

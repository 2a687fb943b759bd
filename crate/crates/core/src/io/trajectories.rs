//! Trajectory files.
//!
//! Text format: one JSON document per line,
//! `{"id":0,"dim":16,"steps":[{"embedding":[…],"correct":false,"answer":7,"tokens":42},…]}`
//! with the optional per-step fields omitted when absent. Floats round-trip
//! exactly.
//!
//! Binary format (all integers little-endian):
//!
//! ```text
//! header:  "ORCA"  u32 version = 1  u32 embed_dim  u32 trajectory_count
//! per trajectory:
//!   u32 id, u32 length
//!   length × embed_dim f32 embeddings, row-major
//!   length × u8 correctness (0, 1, 0xFF = absent)
//!   length × u32 answer id (0xFFFFFFFF = absent)
//!   length × u32 token count (0 = absent)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::trajectory::{Step, Trajectory};

pub const MAGIC: &[u8; 4] = b"ORCA";
pub const VERSION: u32 = 1;
const LABEL_ABSENT: u8 = 0xFF;
const ANSWER_ABSENT: u32 = u32::MAX;
const TOKENS_ABSENT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Text,
    Binary,
}

impl TrajectoryFormat {
    /// `.bin` and `.orca` are binary; anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("orca") => TrajectoryFormat::Binary,
            _ => TrajectoryFormat::Text,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: u32,
    dim: usize,
    steps: Vec<Step>,
}

fn common_dim(data: &[Trajectory]) -> Result<usize> {
    let mut dim = None;
    for traj in data {
        if let Some(d) = traj.embed_dim()? {
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(OrcaError::format(format!(
                        "trajectory {} has width {d}, file uses {prev}",
                        traj.id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(dim.unwrap_or(0))
}

pub fn encode_text(data: &[Trajectory]) -> Result<String> {
    let dim = common_dim(data)?;
    let mut out = String::new();
    for traj in data {
        let line = serde_json::to_string(&TextRecord {
            id: traj.id,
            dim,
            steps: traj.steps.clone(),
        })
        .map_err(|e| OrcaError::format(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_text<R: BufRead>(reader: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)
            .map_err(|e| OrcaError::format(format!("line {}: {e}", lineno + 1)))?;
        if *dim.get_or_insert(rec.dim) != rec.dim {
            return Err(OrcaError::format(format!(
                "line {}: dim {} differs from earlier records",
                lineno + 1,
                rec.dim
            )));
        }
        if let Some(t) = rec.steps.iter().position(|s| s.embedding.len() != rec.dim) {
            return Err(OrcaError::format(format!(
                "line {}: step {} has width {}, record declares {}",
                lineno + 1,
                t + 1,
                rec.steps[t].embedding.len(),
                rec.dim
            )));
        }
        out.push(Trajectory::new(rec.id, rec.steps));
    }
    Ok(out)
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| OrcaError::format(format!("{what} {x} does not fit in u32")))
}

pub fn encode_binary(data: &[Trajectory]) -> Result<Vec<u8>> {
    let dim = common_dim(data)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "embed_dim")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(data.len(), "trajectory count")?.to_le_bytes());
    for traj in data {
        buf.extend_from_slice(&traj.id.to_le_bytes());
        buf.extend_from_slice(&to_u32(traj.len(), "trajectory length")?.to_le_bytes());
        for step in &traj.steps {
            for &x in &step.embedding {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        for step in &traj.steps {
            buf.push(step.correct.map_or(LABEL_ABSENT, u8::from));
        }
        for step in &traj.steps {
            let a = match step.answer {
                Some(ANSWER_ABSENT) => {
                    return Err(OrcaError::format("answer id 0xFFFFFFFF is reserved"))
                }
                Some(a) => a,
                None => ANSWER_ABSENT,
            };
            buf.extend_from_slice(&a.to_le_bytes());
        }
        for step in &traj.steps {
            let t = match step.tokens {
                Some(TOKENS_ABSENT) => {
                    return Err(OrcaError::format("token count 0 is reserved for absent"))
                }
                Some(t) => t,
                None => TOKENS_ABSENT,
            };
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| OrcaError::format("truncated trajectory file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(OrcaError::format(format!(
            "bad magic {:?}, expected \"ORCA\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(OrcaError::format(format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(cur.remaining() / 8));
    for _ in 0..count {
        let id = cur.u32()?;
        let len = cur.u32()? as usize;
        let need = len
            .checked_mul(dim.checked_mul(4).and_then(|x| x.checked_add(9)).unwrap_or(usize::MAX))
            .ok_or_else(|| OrcaError::format("trajectory length overflows"))?;
        if need > cur.remaining() {
            return Err(OrcaError::format(format!(
                "trajectory {id} declares {len} steps but the file is truncated"
            )));
        }
        let floats = cur.take(len * dim * 4)?;
        let mut steps: Vec<Step> = if dim == 0 {
            (0..len).map(|_| Step::new(Vec::new())).collect()
        } else {
            floats
                .chunks_exact(dim * 4)
                .map(|row| {
                    Step::new(
                        row.chunks_exact(4)
                            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                            .collect(),
                    )
                })
                .collect()
        };
        for (step, &flag) in steps.iter_mut().zip(cur.take(len)?) {
            step.correct = match flag {
                0 => Some(false),
                1 => Some(true),
                LABEL_ABSENT => None,
                other => {
                    return Err(OrcaError::format(format!(
                        "trajectory {id}: invalid label flag {other:#04x}"
                    )))
                }
            };
        }
        for step in steps.iter_mut() {
            let a = cur.u32()?;
            step.answer = (a != ANSWER_ABSENT).then_some(a);
        }
        for step in steps.iter_mut() {
            let t = cur.u32()?;
            step.tokens = (t != TOKENS_ABSENT).then_some(t);
        }
        out.push(Trajectory::new(id, steps));
    }
    if cur.remaining() != 0 {
        return Err(OrcaError::format(format!(
            "{} trailing bytes after the last trajectory",
            cur.remaining()
        )));
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, data: &[Trajectory], format: TrajectoryFormat) -> Result<()> {
    let mut file = BufWriter::new(fs::File::create(path)?);
    match format {
        TrajectoryFormat::Text => file.write_all(encode_text(data)?.as_bytes())?,
        TrajectoryFormat::Binary => file.write_all(&encode_binary(data)?)?,
    }
    file.flush()?;
    Ok(())
}

/// Reads either format, recognising binary files by their magic bytes.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let bytes = fs::read(path)?;
    match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
        None => Ok(Vec::new()),
        Some(b'{') => decode_text(BufReader::new(bytes.as_slice())),
        Some(_) => decode_binary(&bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use proptest::prelude::*;

    fn sample() -> Vec<Trajectory> {
        let mut data = generate_dataset(&SynthConfig::reference(1), 5).unwrap();
        data[1].steps[0].correct = None;
        data[2].steps[3].answer = None;
        data[3].steps[1].tokens = None;
        data
    }

    #[test]
    fn text_round_trip_is_exact() {
        let data = sample();
        let text = encode_text(&data).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(decode_text(text.as_bytes()).unwrap(), data);
    }

    #[test]
    fn binary_round_trip_at_f32_precision() {
        let data = sample();
        let bytes = encode_binary(&data).unwrap();
        let back = decode_binary(&bytes).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            for (sa, sb) in a.steps.iter().zip(&b.steps) {
                assert_eq!((sa.correct, sa.answer, sa.tokens), (sb.correct, sb.answer, sb.tokens));
                for (x, y) in sa.embedding.iter().zip(&sb.embedding) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        assert_eq!(encode_binary(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_dataset() {
        let bytes = encode_binary(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert!(decode_binary(&bytes).unwrap().is_empty());
        assert!(decode_text(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_binary() {
        let mut bytes = encode_binary(&sample()).unwrap();
        let mut wrong = bytes.clone();
        wrong[3] = b'B';
        assert!(matches!(decode_binary(&wrong), Err(OrcaError::Format(m)) if m.contains("magic")));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_binary(&v2).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(decode_binary(&bytes).is_err());
        // A huge declared length must fail cleanly rather than allocate.
        let mut huge = encode_binary(&sample()[..1]).unwrap();
        huge[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_binary(&huge).is_err());
    }

    #[test]
    fn rejects_inconsistent_text_dims() {
        let text = "{\"id\":0,\"dim\":2,\"steps\":[{\"embedding\":[1.0]}]}\n";
        assert!(decode_text(text.as_bytes()).is_err());
        let mixed = "{\"id\":0,\"dim\":1,\"steps\":[]}\n{\"id\":1,\"dim\":2,\"steps\":[]}\n";
        assert!(decode_text(mixed.as_bytes()).is_err());
    }

    #[test]
    fn files_round_trip_and_autodetect() {
        let dir = tempfile::tempdir().unwrap();
        let data = sample();
        let text = dir.path().join("t.jsonl");
        let bin = dir.path().join("t.bin");
        write_trajectories(&text, &data, TrajectoryFormat::Text).unwrap();
        write_trajectories(&bin, &data, TrajectoryFormat::Binary).unwrap();
        assert_eq!(read_trajectories(&text).unwrap(), data);
        assert_eq!(read_trajectories(&bin).unwrap().len(), data.len());
        assert_eq!(TrajectoryFormat::from_path(&bin), TrajectoryFormat::Binary);
    }

    proptest! {
        #[test]
        fn text_round_trip_arbitrary(
            rows in prop::collection::vec(
                (prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 3),
                 prop::option::of(any::<bool>()),
                 prop::option::of(0u32..u32::MAX),
                 prop::option::of(1u32..5000)),
                0..12),
        ) {
            let steps = rows.into_iter().map(|(e, c, a, t)| Step { embedding: e, correct: c, answer: a, tokens: t }).collect();
            let data = vec![Trajectory::new(7, steps)];
            let back = decode_text(encode_text(&data).unwrap().as_bytes()).unwrap();
            prop_assert_eq!(back, data.clone());
            let bin = decode_binary(&encode_binary(&data).unwrap()).unwrap();
            prop_assert_eq!(encode_binary(&bin).unwrap(), encode_binary(&data).unwrap());
        }
    }
}

//! Model artifacts.
//!
//! The canonical serialization is line-oriented text, one `key value…` pair
//! per line in a fixed order, with floats written in their shortest
//! round-trip form. A `checksum` line carries the FNV-1a 64 hash of every
//! byte above it. Lines after the checksum starting with `# ` form an
//! optional metadata block which the checksum does not cover.
//!
//! ```text
//! orca-model 1
//! variant no_qk
//! embed_dim 4
//! proj_dim -
//! smoothing_window 10
//! inner_lr_learnable false
//! label_source supervised
//! label_cumulative true
//! static false
//! train.outer_lr 0.001
//! …
//! eta 0.01
//! b0 0.0
//! w0 4 0.1 -0.2 0.0 0.3
//! checksum 6c62272e07bb0142
//! # trained_on: train.jsonl
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{OrcaError, Result};
use crate::labels::{LabelMode, LabelSource};
use crate::linalg::Matrix;
use crate::meta::{InnerLabelPolicy, TrainConfig, Truncation};
use crate::probe::{ProbeConfig, Projections, SlowWeights, Variant};

pub const MODEL_VERSION: u32 = 1;
const HEADER: &str = "orca-model";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub probe: ProbeConfig,
    pub weights: SlowWeights,
    /// Echo of the training run; absent for hand-built models.
    pub train: Option<TrainConfig>,
    pub label_mode: LabelMode,
    /// Trained as the static baseline (`η = 0`, no test-time updates).
    pub static_baseline: bool,
    /// Free-form `(key, value)` notes, excluded from the checksum.
    pub metadata: Vec<(String, String)>,
}

impl ModelArtifact {
    pub fn new(probe: ProbeConfig, weights: SlowWeights, label_mode: LabelMode) -> Self {
        ModelArtifact {
            probe,
            weights,
            train: None,
            label_mode,
            static_baseline: false,
            metadata: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.weights.validate(&self.probe)?;
        if let Some(train) = &self.train {
            train.validate()?;
        }
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains([':', '\n']) || v.contains('\n') {
                return Err(OrcaError::contract(format!("metadata entry `{k}` is not single-line")));
            }
        }
        Ok(())
    }

    /// Canonical body, checksum line and metadata block.
    pub fn to_canonical(&self) -> Result<String> {
        self.validate()?;
        let body = self.body();
        let mut out = body.clone();
        let _ = writeln!(out, "checksum {:016x}", fnv1a64(body.as_bytes()));
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        Ok(out)
    }

    fn body(&self) -> String {
        let mut s = String::new();
        let p = &self.probe;
        let _ = writeln!(s, "{HEADER} {MODEL_VERSION}");
        let _ = writeln!(s, "variant {}", p.variant);
        let _ = writeln!(s, "embed_dim {}", p.embed_dim);
        match p.proj_dim {
            Some(h) => {
                let _ = writeln!(s, "proj_dim {h}");
            }
            None => s.push_str("proj_dim -\n"),
        }
        let _ = writeln!(s, "smoothing_window {}", p.smoothing_window);
        let _ = writeln!(s, "inner_lr_learnable {}", p.inner_lr_learnable);
        let _ = writeln!(s, "label_source {}", self.label_mode.source);
        let _ = writeln!(s, "label_cumulative {}", self.label_mode.cumulative);
        let _ = writeln!(s, "static {}", self.static_baseline);
        match &self.train {
            None => s.push_str("train -\n"),
            Some(t) => {
                let _ = writeln!(s, "train.outer_lr {:?}", t.outer_lr);
                let _ = writeln!(s, "train.grad_clip {:?}", t.grad_clip);
                let _ = writeln!(s, "train.epochs {}", t.epochs);
                let _ = writeln!(s, "train.truncation {}", t.truncation);
                let _ = writeln!(s, "train.inner_label_policy {}", t.inner_label_policy);
                let _ = writeln!(s, "train.seed {}", t.seed);
                let _ = writeln!(s, "train.batch {}", t.batch);
                let _ = writeln!(s, "train.inner_lr {:?}", t.inner_lr);
            }
        }
        let w = &self.weights;
        let _ = writeln!(s, "eta {:?}", w.eta);
        let _ = writeln!(s, "b0 {:?}", w.b0);
        write_vector(&mut s, "w0", &w.w0);
        match &w.projections {
            Projections::Identity => {}
            Projections::Separate { query, key } => {
                write_matrix(&mut s, "query", query);
                write_matrix(&mut s, "key", key);
            }
            Projections::Shared(m) => write_matrix(&mut s, "shared", m),
        }
        s
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let (body, tail) = split_checksum(text)?;
        let mut lines = tail.lines();
        let stored = lines
            .next()
            .and_then(|l| l.strip_prefix("checksum "))
            .and_then(|h| (h.len() == 16).then(|| u64::from_str_radix(h, 16).ok()).flatten())
            .ok_or_else(|| OrcaError::format("malformed checksum line"))?;
        let computed = fnv1a64(body.as_bytes());
        if stored != computed {
            return Err(OrcaError::Checksum { stored, computed });
        }
        let mut metadata = Vec::new();
        for line in lines {
            let entry = line
                .strip_prefix("# ")
                .and_then(|e| e.split_once(": "))
                .ok_or_else(|| OrcaError::format(format!("unexpected line after checksum: `{line}`")))?;
            metadata.push((entry.0.to_string(), entry.1.to_string()));
        }

        let mut r = Fields { lines: body.lines() };
        let version: u32 = r.parse(HEADER)?;
        if version != MODEL_VERSION {
            return Err(OrcaError::format(format!("unknown model version {version}")));
        }
        let variant: Variant = r.parse("variant")?;
        let embed_dim = r.parse("embed_dim")?;
        let proj_dim = match r.value("proj_dim")? {
            "-" => None,
            v => Some(parse_value("proj_dim", v)?),
        };
        let probe = ProbeConfig {
            variant,
            embed_dim,
            proj_dim,
            smoothing_window: r.parse("smoothing_window")?,
            inner_lr_learnable: r.parse("inner_lr_learnable")?,
        };
        let label_mode = LabelMode {
            source: r.parse::<LabelSource>("label_source")?,
            cumulative: r.parse("label_cumulative")?,
        };
        let static_baseline = r.parse("static")?;
        let train = match r.peek_key() {
            Some("train") => {
                if r.value("train")? != "-" {
                    return Err(OrcaError::format("`train` must be `-` or expanded fields"));
                }
                None
            }
            _ => Some(TrainConfig {
                outer_lr: r.parse("train.outer_lr")?,
                grad_clip: r.parse("train.grad_clip")?,
                epochs: r.parse("train.epochs")?,
                truncation: r.parse::<Truncation>("train.truncation")?,
                inner_label_policy: r.parse::<InnerLabelPolicy>("train.inner_label_policy")?,
                seed: r.parse("train.seed")?,
                batch: r.parse("train.batch")?,
                inner_lr: r.parse("train.inner_lr")?,
            }),
        };
        let eta = r.parse("eta")?;
        let b0 = r.parse("b0")?;
        let w0 = read_vector(r.value("w0")?)?;
        let projections = match variant {
            Variant::NoQk => Projections::Identity,
            Variant::Qk => Projections::Separate {
                query: read_matrix(r.value("query")?)?,
                key: read_matrix(r.value("key")?)?,
            },
            Variant::SharedQk => Projections::Shared(read_matrix(r.value("shared")?)?),
        };
        if let Some(extra) = r.lines.next() {
            return Err(OrcaError::format(format!("unexpected line `{extra}`")));
        }
        let artifact = ModelArtifact {
            probe,
            weights: SlowWeights { w0, b0, projections, eta },
            train,
            label_mode,
            static_baseline,
            metadata,
        };
        artifact.validate().map_err(|e| OrcaError::format(e.to_string()))?;
        Ok(artifact)
    }
}

fn split_checksum(text: &str) -> Result<(&str, &str)> {
    let at = if text.starts_with("checksum ") {
        Some(0)
    } else {
        text.find("\nchecksum ").map(|i| i + 1)
    };
    at.map(|i| text.split_at(i))
        .ok_or_else(|| OrcaError::format("missing checksum line"))
}

fn write_vector(s: &mut String, key: &str, v: &[f64]) {
    let _ = write!(s, "{key} {}", v.len());
    for x in v {
        let _ = write!(s, " {x:?}");
    }
    s.push('\n');
}

fn write_matrix(s: &mut String, key: &str, m: &Matrix) {
    let _ = write!(s, "{key} {} {}", m.rows(), m.cols());
    for x in m.as_slice() {
        let _ = write!(s, " {x:?}");
    }
    s.push('\n');
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| OrcaError::format(format!("invalid value `{v}` for `{key}`")))
}

fn read_floats<'a>(it: impl Iterator<Item = &'a str>, n: usize) -> Result<Vec<f64>> {
    let out = it.map(|x| parse_value::<f64>("float", x)).collect::<Result<Vec<_>>>()?;
    if out.len() != n {
        return Err(OrcaError::format(format!("expected {n} values, found {}", out.len())));
    }
    Ok(out)
}

fn read_vector(v: &str) -> Result<Vec<f64>> {
    let mut it = v.split(' ');
    let n = parse_value("length", it.next().unwrap_or(""))?;
    read_floats(it, n)
}

fn read_matrix(v: &str) -> Result<Matrix> {
    let mut it = v.split(' ');
    let rows: usize = parse_value("rows", it.next().unwrap_or(""))?;
    let cols: usize = parse_value("cols", it.next().unwrap_or(""))?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| OrcaError::format("matrix shape overflows"))?;
    Matrix::from_vec(rows, cols, read_floats(it, n)?)
        .map_err(|e| OrcaError::format(e.to_string()))
}

struct Fields<'a> {
    lines: std::str::Lines<'a>,
}

impl<'a> Fields<'a> {
    fn peek_key(&self) -> Option<&'a str> {
        self.lines.clone().next().map(|l| l.split(' ').next().unwrap_or(""))
    }

    fn value(&mut self, key: &str) -> Result<&'a str> {
        let line = self
            .lines
            .next()
            .ok_or_else(|| OrcaError::format(format!("missing `{key}`")))?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(OrcaError::format(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.value(key)?;
        parse_value(key, v)
    }
}

pub fn write_model(path: &Path, artifact: &ModelArtifact) -> Result<()> {
    fs::write(path, artifact.to_canonical()?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelArtifact> {
    let text = fs::read_to_string(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => OrcaError::format("model file is not UTF-8"),
            _ => OrcaError::Io(e),
        })?;
    ModelArtifact::from_canonical(&text)
}

//! Binary checkpoint of a [`ModelState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ACKP" | u32 version | u32 section count
//! per section: u16 name length | name | u64 payload length | payload | sha256(payload)
//! ```
//!
//! Floats are stored as their raw bit patterns, so a save/load cycle is exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::backbone::Backbone;
use crate::config::{GateMode, Scoring};
use crate::engine::ModelState;
use crate::error::{Error, Result};
use crate::gate::{BufferEntry, InputCorruption, ReplayBuffer, SynapseGate};
use crate::nn::Linear;
use crate::prototype::{FeatureHead, PrototypeTable};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACKP";
pub const VERSION: u32 = 1;
pub const SECTIONS: [&str; 7] = [
    "meta",
    "backbone",
    "adapters",
    "gates",
    "prototypes",
    "buffer",
    "feature_head",
];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.rows());
        self.usize(t.cols());
        t.data().iter().for_each(|x| self.f64(*x));
    }
    fn linear(&mut self, l: &Linear) {
        self.tensor(&l.weight);
        self.tensor(&l.bias);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'a str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            section: self.section.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {v} too large")))
    }
    /// A count of items each at least `min_bytes` long, checked against what is left.
    fn count(&mut self, min_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_bytes) > self.buf.len() - self.pos {
            return Err(self.fail(format!("count {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| self.fail(format!("tensor {rows}x{cols} exceeds remaining data")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(rows, cols, data).map_err(|e| self.fail(e.to_string()))
    }
    fn linear(&mut self) -> Result<Linear> {
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(self.fail("bias shape does not match weight"));
        }
        Ok(Linear { weight, bias })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn mode_code(m: GateMode) -> u8 {
    match m {
        GateMode::Learned => 0,
        GateMode::Functional => 1,
        GateMode::Oracle => 2,
        GateMode::Noise => 3,
    }
}

fn mode_from(r: &Reader, c: u8) -> Result<GateMode> {
    Ok(match c {
        0 => GateMode::Learned,
        1 => GateMode::Functional,
        2 => GateMode::Oracle,
        3 => GateMode::Noise,
        other => return Err(r.fail(format!("unknown gate mode code {other}"))),
    })
}

fn encode_sections(state: &ModelState) -> Vec<(&'static str, Vec<u8>)> {
    let mut meta = Writer::default();
    meta.usize(state.step());
    meta.usize(state.embed_dim());
    meta.u8(match state.scoring {
        Scoring::Cosine => 0,
        Scoring::Dot => 1,
    });

    let mut bb = Writer::default();
    bb.usize(state.backbone.input_dim());
    bb.usize(state.backbone.layers().len());
    state.backbone.layers().iter().for_each(|l| bb.linear(l));

    let mut ad = Writer::default();
    ad.usize(state.adapters.len());
    for a in &state.adapters {
        ad.usize(a.task_id);
        ad.f64(a.scale);
        ad.linear(&a.down);
        ad.linear(&a.up);
    }

    let mut gw = Writer::default();
    gw.usize(state.gates.len());
    for g in &state.gates {
        let (hidden, out, mean, inv_std) = g.parts();
        gw.usize(g.task_id);
        gw.linear(hidden);
        gw.linear(out);
        gw.tensor(mean);
        gw.tensor(inv_std);
        gw.f64(g.threshold());
        gw.u8(mode_code(g.mode()));
        match g.corruption() {
            None => gw.u8(0),
            Some(InputCorruption::Noise { seed }) => {
                gw.u8(1);
                gw.u64(*seed);
            }
            Some(InputCorruption::Projection(m)) => {
                gw.u8(2);
                gw.tensor(m);
            }
        }
    }

    let mut pw = Writer::default();
    pw.usizes(state.prototypes.classes());
    pw.usizes(state.prototypes.task_of());
    pw.tensor(state.prototypes.prototypes());

    let mut bw = Writer::default();
    bw.usize(state.buffer.per_class());
    bw.usize(state.buffer.sampler_per_class());
    bw.usize(state.buffer.entries().len());
    for e in state.buffer.entries() {
        match e {
            BufferEntry::Stored {
                task_id,
                embeddings,
                labels,
            } => {
                bw.u8(0);
                bw.usize(*task_id);
                bw.tensor(embeddings);
                bw.usizes(labels);
            }
            BufferEntry::Gaussian {
                task_id,
                class,
                mean,
                var,
            } => {
                bw.u8(1);
                bw.usize(*task_id);
                bw.usize(*class);
                bw.f64s(mean);
                bw.f64s(var);
            }
        }
    }

    let mut fw = Writer::default();
    match &state.feature_head {
        FeatureHead::Identity => fw.u8(0),
        FeatureHead::RandomMlp(l) => {
            fw.u8(1);
            fw.linear(l);
        }
    }

    vec![
        ("meta", meta.0),
        ("backbone", bb.0),
        ("adapters", ad.0),
        ("gates", gw.0),
        ("prototypes", pw.0),
        ("buffer", bw.0),
        ("feature_head", fw.0),
    ]
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let sections = encode_sections(state);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in sections {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
    }
    out
}

/// Splits a checkpoint into verified `(name, payload)` sections.
pub fn read_sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    let mut r = Reader::new(bytes, "header");
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out: Vec<(String, &[u8])> = Vec::with_capacity(n.min(SECTIONS.len()));
    for i in 0..n {
        let expected = SECTIONS.get(i).copied().unwrap_or("unknown");
        r.section = expected;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("section name is not UTF-8"))?
            .to_string();
        if name != expected {
            return Err(r.fail(format!("found section `{name}` in position {i}")));
        }
        let len = r.usize()?;
        let payload = r.take(len)?;
        let digest = r.take(32)?;
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::ChecksumMismatch { section: name });
        }
        out.push((name, payload));
    }
    r.section = "header";
    if out.len() != SECTIONS.len() {
        return Err(r.fail(format!("expected {} sections, found {}", SECTIONS.len(), out.len())));
    }
    r.finish()?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let sections = read_sections(bytes)?;
    let payload = |name: &str| sections.iter().find(|(n, _)| n == name).expect("validated").1;

    let mut r = Reader::new(payload("meta"), "meta");
    let steps = r.usize()?;
    let dim = r.usize()?;
    let scoring = match r.u8()? {
        0 => Scoring::Cosine,
        1 => Scoring::Dot,
        c => return Err(r.fail(format!("unknown scoring code {c}"))),
    };
    r.finish()?;

    let mut r = Reader::new(payload("backbone"), "backbone");
    let input_dim = r.usize()?;
    let n = r.count(32)?;
    let layers = (0..n).map(|_| r.linear()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let backbone = Backbone::from_layers(input_dim, layers);
    if backbone.embed_dim() != dim {
        return Err(r.fail(format!("embedding width {} != recorded {dim}", backbone.embed_dim())));
    }

    let mut r = Reader::new(payload("adapters"), "adapters");
    let n = r.count(72)?;
    let mut adapters = Vec::with_capacity(n);
    for _ in 0..n {
        let task_id = r.usize()?;
        let scale = r.f64()?;
        let down = r.linear()?;
        let up = r.linear()?;
        if down.in_dim() != dim || up.out_dim() != dim || down.out_dim() != up.in_dim() {
            return Err(r.fail(format!("adapter {task_id} has inconsistent shapes")));
        }
        adapters.push(Adapter::from_parts(task_id, down, up, scale));
    }
    r.finish()?;
    if adapters.len() != steps {
        return Err(r.fail(format!("{} adapters but {steps} steps recorded", adapters.len())));
    }

    let mut r = Reader::new(payload("gates"), "gates");
    let n = r.count(8)?;
    let mut gates = Vec::with_capacity(n);
    for _ in 0..n {
        let task_id = r.usize()?;
        let hidden = r.linear()?;
        let out = r.linear()?;
        let mean = r.tensor()?;
        let inv_std = r.tensor()?;
        let threshold = r.f64()?;
        let code = r.u8()?;
        let mode = mode_from(&r, code)?;
        let corruption = match r.u8()? {
            0 => None,
            1 => Some(InputCorruption::Noise { seed: r.u64()? }),
            2 => Some(InputCorruption::Projection(r.tensor()?)),
            c => return Err(r.fail(format!("unknown corruption code {c}"))),
        };
        if hidden.in_dim() != dim || out.in_dim() != hidden.out_dim() || out.out_dim() != 1 {
            return Err(r.fail(format!("gate {task_id} has inconsistent shapes")));
        }
        if mean.shape() != (1, dim) || inv_std.shape() != (1, dim) {
            return Err(r.fail(format!("gate {task_id} has bad standardisation shapes")));
        }
        gates.push(SynapseGate::from_parts(
            task_id, hidden, out, mean, inv_std, threshold, mode, corruption,
        ));
    }
    r.finish()?;

    let mut r = Reader::new(payload("prototypes"), "prototypes");
    let classes = r.usizes()?;
    let task_of = r.usizes()?;
    let protos = r.tensor()?;
    r.finish()?;
    if protos.rows() > 0 && protos.cols() != dim {
        return Err(r.fail("prototype width does not match embedding width"));
    }
    let prototypes = PrototypeTable::from_parts(classes, task_of, protos).map_err(|e| r.fail(e.to_string()))?;

    let mut r = Reader::new(payload("buffer"), "buffer");
    let per_class = r.usize()?;
    let sampler = r.usize()?;
    let n = r.count(9)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        entries.push(match r.u8()? {
            0 => BufferEntry::Stored {
                task_id: r.usize()?,
                embeddings: r.tensor()?,
                labels: r.usizes()?,
            },
            1 => BufferEntry::Gaussian {
                task_id: r.usize()?,
                class: r.usize()?,
                mean: r.f64s()?,
                var: r.f64s()?,
            },
            c => return Err(r.fail(format!("unknown buffer entry code {c}"))),
        });
    }
    r.finish()?;
    let buffer = ReplayBuffer::from_entries(per_class, sampler, entries);

    let mut r = Reader::new(payload("feature_head"), "feature_head");
    let feature_head = match r.u8()? {
        0 => FeatureHead::Identity,
        1 => FeatureHead::RandomMlp(r.linear()?),
        c => return Err(r.fail(format!("unknown feature head code {c}"))),
    };
    r.finish()?;

    ModelState::from_parts(backbone, adapters, gates, prototypes, buffer, feature_head, scoring)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

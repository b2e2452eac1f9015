//! Attention-trace files: per-head K/V/Q rows recorded over a prompt and the
//! decoding steps that follow it.
//!
//! Binary layout (all integers and doubles little-endian):
//!
//! ```text
//! "AKVT" | u16 version
//! u32 num_layers | u32 num_heads | u32 head_dim | u32 vocab_size | u64 seed
//! u32 token_count | token_count × (u32 id, u8 class)
//! blocks until EOF: u16 layer | u16 head | u32 step | K | V | Q
//!   where each matrix is u32 value_count followed by value_count f64
//! ```
//!
//! Step 0 holds the prompt rows; step `s >= 1` holds the single row of
//! position `prompt_len + s - 1`.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{Model, ModelConfig, Projection};
use crate::tokens::{TokenAnnotation, TokenClass};

pub const MAGIC: &[u8; 4] = b"AKVT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBlock {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub q: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    config: ModelConfig,
    tokens: Vec<TokenAnnotation>,
    blocks: Vec<TraceBlock>,
}

impl AttentionTrace {
    /// Validates dimensions and step ordering; blocks are stored sorted by
    /// `(layer, head, step)`.
    pub fn new(config: ModelConfig, tokens: Vec<TokenAnnotation>, mut blocks: Vec<TraceBlock>) -> Result<Self> {
        config
            .validate()
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let d = config.head_dim;
        for b in &blocks {
            if b.layer >= config.num_layers || b.head >= config.num_heads {
                return Err(Error::TraceDimension(format!(
                    "block for layer {} head {} outside {}x{} model",
                    b.layer, b.head, config.num_layers, config.num_heads
                )));
            }
            for (name, m) in [("K", &b.k), ("V", &b.v), ("Q", &b.q)] {
                if m.cols() != d {
                    return Err(Error::TraceDimension(format!(
                        "{name} rows of layer {} head {} step {} have width {}, expected {d}",
                        b.layer, b.head, b.step, m.cols()
                    )));
                }
                if m.rows() != b.k.rows() || m.rows() == 0 {
                    return Err(Error::TraceDimension(format!(
                        "layer {} head {} step {}: K/V/Q row counts {}/{}/{}",
                        b.layer,
                        b.head,
                        b.step,
                        b.k.rows(),
                        b.v.rows(),
                        b.q.rows()
                    )));
                }
            }
            if b.step > 0 && b.k.rows() != 1 {
                return Err(Error::TraceDimension(format!(
                    "decode step {} of layer {} head {} holds {} rows, expected 1",
                    b.step,
                    b.layer,
                    b.head,
                    b.k.rows()
                )));
            }
        }
        // stable sort keeps file order within a key so duplicates are detected below
        blocks.sort_by_key(|b| (b.layer, b.head, b.step));
        for w in blocks.windows(2) {
            if (w[0].layer, w[0].head) == (w[1].layer, w[1].head) && w[0].step >= w[1].step {
                return Err(Error::TraceDimension(format!(
                    "layer {} head {}: step {} repeated",
                    w[0].layer, w[0].head, w[0].step
                )));
            }
        }
        let mut lens: Option<usize> = None;
        for (l, h) in config.head_ids() {
            let head_blocks: Vec<_> = blocks.iter().filter(|b| b.layer == l && b.head == h).collect();
            let Some(first) = head_blocks.first() else {
                return Err(Error::MissingHead { layer: l, head: h });
            };
            if first.step != 0 {
                return Err(Error::TraceDimension(format!("layer {l} head {h} has no prompt block")));
            }
            for (s, b) in head_blocks.iter().enumerate() {
                if b.step != s {
                    return Err(Error::TraceDimension(format!(
                        "layer {l} head {h}: step {} follows step {}",
                        b.step,
                        s - 1
                    )));
                }
            }
            let len = first.k.rows() + head_blocks.len() - 1;
            match lens {
                None => lens = Some(len),
                Some(n) if n != len => {
                    return Err(Error::TraceDimension(format!(
                        "layer {l} head {h} covers {len} positions, other heads {n}"
                    )))
                }
                _ => {}
            }
        }
        let covered = lens.unwrap_or(0);
        if tokens.len() < covered {
            return Err(Error::TraceDimension(format!(
                "token table has {} entries, blocks cover {covered} positions",
                tokens.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.position != i {
                return Err(Error::TraceDimension(format!("token {i} labeled position {}", t.position)));
            }
        }
        Ok(Self { config, tokens, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[TokenAnnotation] {
        &self.tokens
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }

    pub fn blocks(&self) -> &[TraceBlock] {
        &self.blocks
    }

    /// Positions covered by the step-0 block.
    pub fn prompt_len(&self) -> usize {
        self.blocks[0].k.rows()
    }

    /// Positions with recorded projections.
    pub fn covered_len(&self) -> usize {
        let per_head = self.blocks.len() / self.config.total_heads();
        self.prompt_len() + per_head - 1
    }

    pub fn decode_steps(&self) -> usize {
        self.covered_len() - self.prompt_len()
    }

    /// Bitwise equality, including the sign of zero and NaN payloads.
    pub fn bits_eq(&self, other: &AttentionTrace) -> bool {
        self.config == other.config
            && self.tokens == other.tokens
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                (a.layer, a.head, a.step) == (b.layer, b.head, b.step)
                    && a.k.bits_eq(&b.k)
                    && a.v.bits_eq(&b.v)
                    && a.q.bits_eq(&b.q)
            })
    }
}

/// Records the projections `model` produces for `tokens`, with the first
/// `prompt_len` positions in the step-0 block.
pub fn record_trace<M: Model + ?Sized>(model: &M, tokens: &[u32], prompt_len: usize) -> Result<AttentionTrace> {
    if prompt_len == 0 || prompt_len > tokens.len() {
        return Err(Error::InvalidParameter(format!(
            "prompt length {prompt_len} not in 1..={}",
            tokens.len()
        )));
    }
    let config = *model.config();
    let d = config.head_dim;
    let annotations = tokens
        .iter()
        .enumerate()
        .map(|(position, &token_id)| TokenAnnotation {
            position,
            token_id,
            class: model.token_class(position, token_id),
        })
        .collect();
    let mut blocks = Vec::new();
    for (layer, head) in config.head_ids() {
        let spans = std::iter::once((0, 0..prompt_len))
            .chain((prompt_len..tokens.len()).map(|p| (p - prompt_len + 1, p..p + 1)));
        for (step, range) in spans {
            let (mut k, mut v, mut q) = (DenseMatrix::with_cols(d), DenseMatrix::with_cols(d), DenseMatrix::with_cols(d));
            for p in range {
                let proj = model.project(layer, head, p, tokens[p])?;
                k.push_row(&proj.k)?;
                v.push_row(&proj.v)?;
                q.push_row(&proj.q)?;
            }
            blocks.push(TraceBlock { layer, head, step, k, v, q });
        }
    }
    AttentionTrace::new(config, annotations, blocks)
}

pub fn write_trace<W: Write>(trace: &AttentionTrace, mut w: W) -> Result<()> {
    let c = &trace.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for x in [c.num_layers, c.num_heads, c.head_dim, c.vocab_size] {
        w.write_all(&u32_of(x, "config field")?.to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&u32_of(trace.tokens.len(), "token count")?.to_le_bytes())?;
    for t in &trace.tokens {
        w.write_all(&t.token_id.to_le_bytes())?;
        w.write_all(&[t.class.as_u8()])?;
    }
    for b in &trace.blocks {
        w.write_all(&u16_of(b.layer)?.to_le_bytes())?;
        w.write_all(&u16_of(b.head)?.to_le_bytes())?;
        w.write_all(&u32_of(b.step, "step")?.to_le_bytes())?;
        for m in [&b.k, &b.v, &b.q] {
            w.write_all(&u32_of(m.data().len(), "array length")?.to_le_bytes())?;
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::InvalidParameter(format!("{what} {x} exceeds u32")))
}

fn u16_of(x: usize) -> Result<u16> {
    u16::try_from(x).map_err(|_| Error::InvalidParameter(format!("layer/head index {x} exceeds u16")))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::TruncatedPayload(format!("file ends inside {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact(what)?))
    }

    /// `None` at a clean end of file, an error if the file ends mid-value.
    fn u16_or_eof(&mut self, what: &str) -> Result<Option<u16>> {
        let mut buf = [0u8; 2];
        let mut got = 0;
        while got < 2 {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(Error::TruncatedPayload(format!("file ends inside {what}"))),
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(u16::from_le_bytes(buf)))
    }

    fn matrix(&mut self, d: usize, what: &str) -> Result<DenseMatrix> {
        let len = self.u32(what)? as usize;
        if len % d != 0 {
            return Err(Error::TraceDimension(format!(
                "{what} holds {len} values, not a multiple of head_dim {d}"
            )));
        }
        let mut data = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            data.push(f64::from_le_bytes(self.exact(what)?));
        }
        DenseMatrix::new(len / d, d, data).map_err(|e| Error::TraceDimension(format!("{what}: {e}")))
    }
}

/// Reads a binary trace.
pub fn read_trace<R: Read>(source: R) -> Result<AttentionTrace> {
    let mut r = Reader { inner: source };
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.inner.read(&mut magic[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if got < 4 || &magic != MAGIC {
        return Err(Error::MalformedHeader("missing AKVT magic".into()));
    }
    let version = u16::from_le_bytes(r.exact("header")?);
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("header")? as usize;
    }
    let seed = u64::from_le_bytes(r.exact("header")?);
    let config = ModelConfig {
        num_layers: dims[0],
        num_heads: dims[1],
        head_dim: dims[2],
        vocab_size: dims[3],
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let count = r.u32("token table")? as usize;
    let mut tokens = Vec::with_capacity(count.min(1 << 20));
    for position in 0..count {
        let token_id = r.u32("token table")?;
        let [code] = r.exact::<1>("token table")?;
        let class = TokenClass::from_u8(code)
            .ok_or_else(|| Error::MalformedHeader(format!("token {position} has class code {code}")))?;
        tokens.push(TokenAnnotation { position, token_id, class });
    }

    let mut blocks = Vec::new();
    while let Some(layer) = r.u16_or_eof("block tag")? {
        let head = u16::from_le_bytes(r.exact("block tag")?) as usize;
        let step = r.u32("block tag")? as usize;
        let d = config.head_dim;
        let k = r.matrix(d, "K array")?;
        let v = r.matrix(d, "V array")?;
        let q = r.matrix(d, "Q array")?;
        blocks.push(TraceBlock {
            layer: layer as usize,
            head,
            step,
            k,
            v,
            q,
        });
    }
    AttentionTrace::new(config, tokens, blocks)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header {
        version: u16,
        config: ModelConfig,
    },
    Token {
        id: u32,
        class: TokenClass,
    },
    Block {
        layer: usize,
        head: usize,
        step: usize,
        k: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    },
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// NDJSON form: a header record, one record per token, one per block.
pub fn write_trace_ndjson<W: Write>(trace: &AttentionTrace, mut w: W) -> Result<()> {
    let mut emit = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&Record::Header {
        version: VERSION,
        config: trace.config,
    })?;
    for t in &trace.tokens {
        emit(&Record::Token {
            id: t.token_id,
            class: t.class,
        })?;
    }
    for b in &trace.blocks {
        emit(&Record::Block {
            layer: b.layer,
            head: b.head,
            step: b.step,
            k: rows_of(&b.k),
            v: rows_of(&b.v),
            q: rows_of(&b.q),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_ndjson<R: BufRead>(source: R) -> Result<AttentionTrace> {
    let mut config = None;
    let mut tokens = Vec::new();
    let mut blocks = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            Record::Header { version, config: c } => {
                if config.is_some() {
                    return Err(Error::MalformedHeader(format!("second header at line {}", i + 1)));
                }
                if version != VERSION {
                    return Err(Error::MalformedHeader(format!("unsupported version {version}")));
                }
                c.validate().map_err(|e| Error::MalformedHeader(e.to_string()))?;
                config = Some(c);
            }
            _ if config.is_none() => {
                return Err(Error::MalformedHeader("first record must be the header".into()))
            }
            Record::Token { id, class } => tokens.push(TokenAnnotation {
                position: tokens.len(),
                token_id: id,
                class,
            }),
            Record::Block { layer, head, step, k, v, q } => {
                let m = |rows: Vec<Vec<f64>>, name: &str| {
                    DenseMatrix::from_rows(&rows)
                        .map_err(|e| Error::TraceDimension(format!("line {}: {name}: {e}", i + 1)))
                };
                blocks.push(TraceBlock {
                    layer,
                    head,
                    step,
                    k: m(k, "K")?,
                    v: m(v, "V")?,
                    q: m(q, "Q")?,
                });
            }
        }
    }
    let config = config.ok_or_else(|| Error::MalformedHeader("no header record".into()))?;
    AttentionTrace::new(config, tokens, blocks)
}

/// Reads either encoding, telling them apart by the leading magic.
pub fn read_trace_auto<R: BufRead>(mut source: R) -> Result<AttentionTrace> {
    let head = source.fill_buf()?;
    if head.starts_with(MAGIC) || head.is_empty() {
        read_trace(source)
    } else {
        read_trace_ndjson(source)
    }
}

/// Replays a recorded trace. Projections are looked up by position and the
/// token stream is forced to the recorded one; past the recording the model
/// reports the trace as exhausted.
#[derive(Debug, Clone)]
pub struct TraceModel {
    trace: AttentionTrace,
    rows: BTreeMap<(usize, usize), (DenseMatrix, DenseMatrix, DenseMatrix)>,
}

impl TraceModel {
    pub fn new(trace: AttentionTrace) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for b in &trace.blocks {
            let entry = rows.entry((b.layer, b.head)).or_insert_with(|| {
                let d = trace.config.head_dim;
                (DenseMatrix::with_cols(d), DenseMatrix::with_cols(d), DenseMatrix::with_cols(d))
            });
            entry.0 = entry.0.vstack(&b.k)?;
            entry.1 = entry.1.vstack(&b.v)?;
            entry.2 = entry.2.vstack(&b.q)?;
        }
        Ok(Self { trace, rows })
    }

    pub fn trace(&self) -> &AttentionTrace {
        &self.trace
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.trace.tokens[..self.trace.prompt_len()]
            .iter()
            .map(|t| t.token_id)
            .collect()
    }
}

impl Model for TraceModel {
    fn config(&self) -> &ModelConfig {
        &self.trace.config
    }

    fn token_class(&self, position: usize, token_id: u32) -> TokenClass {
        match self.trace.tokens.get(position) {
            Some(t) if t.token_id == token_id => t.class,
            _ => TokenClass::Other,
        }
    }

    fn project(&self, layer: usize, head: usize, position: usize, _token_id: u32) -> Result<Projection> {
        let (k, v, q) = self
            .rows
            .get(&(layer, head))
            .ok_or(Error::MissingHead { layer, head })?;
        if position >= k.rows() {
            return Err(Error::TraceExhausted(position));
        }
        Ok(Projection {
            q: q.row(position).to_vec(),
            k: k.row(position).to_vec(),
            v: v.row(position).to_vec(),
        })
    }

    fn logits(&self, _attention_outputs: &[f64]) -> Vec<f64> {
        vec![0.0; self.trace.config.vocab_size]
    }

    fn forced_token(&self, position: usize) -> Option<u32> {
        self.trace.tokens.get(position).map(|t| t.token_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_model, Archetype, ArchetypePlan};

    fn sample_trace() -> AttentionTrace {
        let config = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 32,
            seed: 7,
        };
        let plan = ArchetypePlan::cycle(&config, &[Archetype::SpecialDominant, Archetype::LocalDominant]);
        let model = synth_model(config, plan, 0.9).unwrap();
        let mut tokens = model.prompt(12);
        tokens.extend([9, 10, 11]);
        record_trace(&model, &tokens, 12).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let t = sample_trace();
        assert_eq!(t.prompt_len(), 12);
        assert_eq!(t.decode_steps(), 3);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        let back = read_trace(&buf[..]).unwrap();
        assert!(back.bits_eq(&t));
        assert!(read_trace_auto(&buf[..]).unwrap().bits_eq(&t));
    }

    #[test]
    fn ndjson_round_trip() {
        let t = sample_trace();
        let mut buf = Vec::new();
        write_trace_ndjson(&t, &mut buf).unwrap();
        assert!(read_trace_ndjson(&buf[..]).unwrap().bits_eq(&t));
        assert!(read_trace_auto(&buf[..]).unwrap().bits_eq(&t));
    }

    #[test]
    fn truncated_file() {
        let mut buf = Vec::new();
        write_trace(&sample_trace(), &mut buf).unwrap();
        for cut in [10, 40, buf.len() - 3, buf.len() - 8 * 5] {
            let err = read_trace(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::TruncatedPayload(_)), "cut {cut}: {err}");
            assert!(err.to_string().starts_with("truncated payload"));
        }
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(read_trace(&b"XKVT"[..]), Err(Error::MalformedHeader(_))));
        assert!(matches!(read_trace(&b""[..]), Err(Error::MalformedHeader(_))));
        let mut buf = Vec::new();
        write_trace(&sample_trace(), &mut buf).unwrap();
        buf[6..10].copy_from_slice(&0u32.to_le_bytes());
        let err = read_trace(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn dimension_mismatch() {
        let mut buf = Vec::new();
        write_trace(&sample_trace(), &mut buf).unwrap();
        // head_dim 8 -> 7: the first array length (12*8) is not a multiple of 7
        buf[14..18].copy_from_slice(&7u32.to_le_bytes());
        let err = read_trace(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::TraceDimension(_)), "{err}");
    }

    #[test]
    fn replay_matches_recording() {
        let t = sample_trace();
        let m = TraceModel::new(t.clone()).unwrap();
        assert_eq!(m.prompt().len(), 12);
        let b = &t.blocks()[1];
        let p = m.project(b.layer, b.head, 12, 9).unwrap();
        assert_eq!(p.k, b.k.row(0));
        assert!(matches!(m.project(0, 0, 15, 0), Err(Error::TraceExhausted(15))));
        assert_eq!(m.forced_token(13), Some(10));
        assert_eq!(m.forced_token(15), None);
    }
}

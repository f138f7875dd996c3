//! Container formats: the `MSVQ` model file and the `MSVP` payload file.
//!
//! All integers are little-endian. Byte-level layouts are in `docs/FORMATS.md`.

use sha2::{Digest, Sha256};

use crate::bits::{BitReader, BitWriter};
use crate::codebook::{Codebook, MsvqModel};
use crate::entropy::{read_indices, write_indices, CodeLookup, ModelCodes};
use crate::error::{Error, Result};
use crate::layout::{BitMatrix, SubVectorLayout};
use crate::matrix::FeatureMatrix;
use crate::quantizer::{decode, encode, truncation_profile, EncodedFeature, SelectionPlan};
use crate::rate::{plan_from_order, select_stages, selection_order, MarginalLossTable};

pub const MODEL_MAGIC: &[u8; 4] = b"MSVQ";
pub const PAYLOAD_MAGIC: &[u8; 4] = b"MSVP";
pub const MODEL_VERSION: u16 = 1;
pub const PAYLOAD_VERSION: u16 = 1;

const FLAG_EC: u16 = 1;
const FLAG_STRICT: u16 = 1 << 1;
const FLAG_TABLE: u16 = 1 << 2;
const FLAG_CODES: u16 = 1 << 3;

/// First eight bytes of SHA-256, read little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("sha-256 output is 32 bytes"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// `count * width` bytes, with the product checked before anything is allocated.
    fn block(&mut self, count: usize, width: usize, what: &str) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("{what} length overflows")))?;
        self.take(n, what)
    }

    fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        Ok(self
            .block(count, 4, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .block(count, 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .block(count, 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {what}",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_model(model: &MsvqModel) -> Result<Vec<u8>> {
    let layout = model.layout();
    let has_codes = model.has_entropy_codes();
    let mut flags = 0u16;
    if model.ec_enabled() {
        flags |= FLAG_EC;
    }
    if model.strict() {
        flags |= FLAG_STRICT;
    }
    if model.table_digest().is_some() {
        flags |= FLAG_TABLE;
    }
    if has_codes {
        flags |= FLAG_CODES;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [
        layout.m_dim(),
        layout.sub_dim(),
        layout.n_sub(),
        layout.n_groups(),
        layout.t_max(),
    ] {
        put_u32(&mut out, v)?;
    }
    for &p in layout.perm() {
        put_u32(&mut out, p)?;
    }
    for &g in layout.group_of() {
        put_u32(&mut out, g)?;
    }
    out.extend_from_slice(layout.bits().as_slice());
    for &m in model.means() {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for stages in model.codebooks() {
        for cb in stages {
            for &v in cb.vectors() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if model.ec_enabled() {
        for stages in model.codebooks() {
            for cb in stages {
                for &p in cb.prior() {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        for &l in model.lambda() {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    if has_codes {
        for stages in model.codebooks() {
            for cb in stages {
                out.extend_from_slice(cb.code_lengths().expect("checked above"));
            }
        }
    }
    out.extend_from_slice(&model.table_digest().unwrap_or(0).to_le_bytes());
    Ok(out)
}

/// Dimensions guard: rejects headers whose blocks could not possibly be present.
fn checked_dim(v: u32, what: &str, limit: usize) -> Result<usize> {
    let v = v as usize;
    if v == 0 || v > limit {
        return Err(Error::Format(format!("{what} = {v} is out of range")));
    }
    Ok(v)
}

pub fn read_model(bytes: &[u8]) -> Result<MsvqModel> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format("not an MSVQ model file".into()));
    }
    let version = c.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let flags = c.u16("flags")?;
    if flags & !(FLAG_EC | FLAG_STRICT | FLAG_TABLE | FLAG_CODES) != 0 {
        return Err(Error::Format(format!("unknown model flags {flags:#06x}")));
    }
    let limit = bytes.len();
    let m = checked_dim(c.u32("M")?, "M", limit)?;
    let d = checked_dim(c.u32("D")?, "D", limit)?;
    let n = checked_dim(c.u32("N")?, "N", limit)?;
    let g = checked_dim(c.u32("G")?, "G", limit)?;
    let t_max = checked_dim(c.u32("T_max")?, "T_max", 255)?;
    if n.checked_mul(d) != Some(m) {
        return Err(Error::Format(format!("N * D = {n} * {d} does not equal M = {m}")));
    }
    let perm: Vec<usize> = c.u32s(m, "permutation")?.into_iter().map(|v| v as usize).collect();
    let group_of: Vec<usize> = c.u32s(n, "group map")?.into_iter().map(|v| v as usize).collect();
    let bit_rows: Vec<Vec<u8>> = c
        .block(n, t_max, "bit matrix")?
        .chunks_exact(t_max)
        .map(|r| r.to_vec())
        .collect();
    let bits = BitMatrix::from_rows(&bit_rows).map_err(|e| Error::Format(e.to_string()))?;
    let layout = SubVectorLayout::from_parts(d, perm, group_of, g, bits)
        .map_err(|e| Error::Format(e.to_string()))?;
    let means = c.f32s(m, "means")?;
    let mut codebooks = Vec::with_capacity(g);
    for gi in 0..g {
        let mut stages = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let b = layout.group_bits(gi, t);
            let vectors = c.f32s((1usize << b) * d, "codebook")?;
            stages.push(Codebook::new(d, b, vectors).map_err(|e| Error::Format(e.to_string()))?);
        }
        codebooks.push(stages);
    }
    let ec = flags & FLAG_EC != 0;
    let mut lambda = Vec::new();
    if ec {
        for stages in codebooks.iter_mut() {
            for cb in stages.iter_mut() {
                let prior = c.f64s(cb.size(), "priors")?;
                cb.set_prior(prior)?;
            }
        }
        lambda = c.f32s(t_max, "lambda")?;
    }
    if flags & FLAG_CODES != 0 {
        for stages in codebooks.iter_mut() {
            for cb in stages.iter_mut() {
                let lengths = c.take(cb.size(), "code lengths")?.to_vec();
                *cb = cb.clone().with_code_lengths(lengths).map_err(|e| match e {
                    Error::Corruption { .. } | Error::Format(_) => e,
                    other => Error::Format(other.to_string()),
                })?;
            }
        }
    }
    let digest = c.u64("table digest")?;
    c.finish("model")?;
    let model = MsvqModel::new(layout, means, codebooks, ec, lambda)
        .map_err(|e| Error::Format(e.to_string()))?
        .with_strict(flags & FLAG_STRICT != 0)
        .with_table_digest((flags & FLAG_TABLE != 0).then_some(digest));
    Ok(model)
}

/// Digest of the serialized model; payloads carry it to bind themselves to one model.
pub fn model_digest(model: &MsvqModel) -> Result<u64> {
    Ok(digest64(&write_model(model)?))
}

/// Binds `model` to `table`, after checking the table describes the model's layout.
pub fn bind_table(model: MsvqModel, table: &MarginalLossTable) -> Result<MsvqModel> {
    table.check_model(&model)?;
    Ok(model.with_table_digest(Some(table.digest()?)))
}

fn check_binding(model: &MsvqModel, table: &MarginalLossTable) -> Result<()> {
    table.check_model(model)?;
    let found = table.digest()?;
    match model.table_digest() {
        Some(expected) if expected == found => Ok(()),
        Some(expected) => Err(Error::DigestMismatch {
            what: "table",
            expected,
            found,
        }),
        None => Err(Error::State("model is not bound to a marginal-loss table".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    /// Receiver recomputes the plan from the shared table and `b_cap`.
    Derived,
    /// Plan is carried in the header.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayloadHeader {
    pub mode: PlanMode,
    pub entropy_coded: bool,
    pub model_digest: u64,
    pub b_cap: u32,
    pub count: u32,
    pub n_sub: u32,
    pub t_max: u8,
    pub plan: Option<Vec<u8>>,
    /// Byte length of the header including its checksum.
    pub header_len: usize,
}

fn plan_width(t_max: usize) -> u32 {
    usize::BITS - t_max.leading_zeros()
}

impl PayloadHeader {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
        out.push(match self.mode {
            PlanMode::Derived => 0,
            PlanMode::Explicit => 1,
        });
        out.push(self.entropy_coded as u8);
        out.extend_from_slice(&self.model_digest.to_le_bytes());
        out.extend_from_slice(&self.b_cap.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.n_sub.to_le_bytes());
        out.push(self.t_max);
        if let Some(plan) = &self.plan {
            let w = plan_width(self.t_max as usize);
            let mut bw = BitWriter::new();
            for &t in plan {
                bw.write(t as u32, w);
            }
            out.extend_from_slice(&bw.finish());
        }
        let check = digest64(&out);
        out.extend_from_slice(&check.to_le_bytes());
        out
    }

    /// Parses and checks the header without needing a model.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if c.take(4, "magic")? != PAYLOAD_MAGIC {
            return Err(Error::Format("not an MSVP payload file".into()));
        }
        let version = c.u16("version")?;
        if version != PAYLOAD_VERSION {
            return Err(Error::Format(format!("unsupported payload version {version}")));
        }
        let mode = match c.u8("mode")? {
            0 => PlanMode::Derived,
            1 => PlanMode::Explicit,
            v => return Err(Error::corrupt(48, format!("unknown plan mode {v}"))),
        };
        let entropy_coded = match c.u8("coding")? {
            0 => false,
            1 => true,
            v => return Err(Error::corrupt(56, format!("unknown coding flag {v}"))),
        };
        let model_digest = c.u64("model digest")?;
        let b_cap = c.u32("b_cap")?;
        let count = c.u32("count")?;
        let n_sub = c.u32("N")?;
        let t_max = c.u8("T_max")?;
        if n_sub == 0 || t_max == 0 {
            return Err(Error::corrupt(c.pos as u64 * 8, "empty layout in payload header"));
        }
        let plan = match mode {
            PlanMode::Derived => None,
            PlanMode::Explicit => {
                let w = plan_width(t_max as usize);
                let nbytes = (n_sub as usize * w as usize).div_ceil(8);
                let start = c.pos as u64 * 8;
                let raw = c.take(nbytes, "explicit plan")?;
                let mut r = BitReader::with_base(raw, start);
                let mut plan = Vec::with_capacity(n_sub as usize);
                for _ in 0..n_sub {
                    let at = r.stream_offset();
                    let t = r.read(w)?;
                    if t > t_max as u32 {
                        return Err(Error::corrupt(at, format!("plan entry {t} exceeds T_max")));
                    }
                    plan.push(t as u8);
                }
                r.align()?;
                Some(plan)
            }
        };
        let body_end = c.pos;
        let check = c.u64("header checksum")?;
        let found = digest64(&bytes[..body_end]);
        if check != found {
            return Err(Error::DigestMismatch {
                what: "payload header",
                expected: check,
                found,
            });
        }
        Ok(Self {
            mode,
            entropy_coded,
            model_digest,
            b_cap,
            count,
            n_sub,
            t_max,
            plan,
            header_len: c.pos,
        })
    }
}

/// Transmitter output for a batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub bytes: Vec<u8>,
    pub header: PayloadHeader,
    pub plan: SelectionPlan,
    pub features: Vec<EncodedFeature>,
    /// Transmitter-side reconstructions, original coordinate order.
    pub z_hat: Vec<Vec<f64>>,
    /// Coded bits of each vector before byte padding.
    pub coded_bits: Vec<u64>,
}

impl EncodedBatch {
    pub fn mean_coded_bits(&self) -> f64 {
        if self.coded_bits.is_empty() {
            return 0.0;
        }
        self.coded_bits.iter().sum::<u64>() as f64 / self.coded_bits.len() as f64
    }
}

/// Receiver output for a batch.
#[derive(Debug, Clone)]
pub struct DecodedBatch {
    pub header: PayloadHeader,
    pub plan: SelectionPlan,
    pub features: Vec<EncodedFeature>,
    pub z_hat: Vec<Vec<f64>>,
}

impl DecodedBatch {
    /// Reconstructions rounded to binary32 for storage.
    pub fn to_matrix(&self, cols: usize) -> Result<FeatureMatrix> {
        let data = self.z_hat.iter().flatten().map(|&v| v as f32).collect();
        FeatureMatrix::new(self.z_hat.len(), cols, data)
    }
}

fn coded_len(model: &MsvqModel, codes: Option<&ModelCodes>, indices: &[Vec<u32>]) -> u64 {
    let layout = model.layout();
    indices
        .iter()
        .enumerate()
        .map(|(i, idx)| {
            idx.iter()
                .enumerate()
                .map(|(t, &k)| match codes {
                    Some(c) => c.code(i, t).len(k as usize) as u64,
                    None => layout.bits().get(i, t) as u64,
                })
                .sum::<u64>()
        })
        .sum()
}

/// Shrinks the derived plan by undoing greedy grants, latest first, until every
/// vector's instantaneous code length fits `b_cap`.
fn strict_plan(
    model: &MsvqModel,
    table: &MarginalLossTable,
    codes: &ModelCodes,
    data: &FeatureMatrix,
    b_cap: f64,
) -> Result<SelectionPlan> {
    let layout = model.layout();
    let mut order = selection_order(table, b_cap);
    // Per-vector code lengths at every (i, t), from one full-depth pass.
    let lens: Vec<Vec<u8>> = data
        .iter_rows()
        .map(|z| {
            let prof = truncation_profile(model, z)?;
            Ok(prof
                .indices
                .iter()
                .enumerate()
                .flat_map(|(i, idx)| {
                    idx.iter()
                        .enumerate()
                        .map(move |(t, &k)| (i, t, k))
                })
                .map(|(i, t, k)| codes.code(i, t).len(k as usize))
                .collect())
        })
        .collect::<Result<_>>()?;
    let t_max = layout.t_max();
    loop {
        let plan = plan_from_order(table, &order);
        let worst = lens
            .iter()
            .map(|l| {
                plan.stages
                    .iter()
                    .enumerate()
                    .map(|(i, &ti)| l[i * t_max..i * t_max + ti as usize].iter().map(|&b| b as u64).sum::<u64>())
                    .sum::<u64>()
            })
            .max()
            .unwrap_or(0);
        if worst as f64 <= b_cap || order.is_empty() {
            return Ok(plan);
        }
        order.pop();
    }
}

/// Encodes `data` under `b_cap`. `strict` caps every vector's instantaneous length for
/// entropy-coded models, switching to an explicit plan when that changes the plan.
pub fn encode_batch(
    model: &MsvqModel,
    table: &MarginalLossTable,
    data: &FeatureMatrix,
    b_cap: u32,
    strict: bool,
) -> Result<EncodedBatch> {
    check_binding(model, table)?;
    if data.cols() != model.layout().m_dim() {
        return Err(Error::Data(format!(
            "data has {} columns, model expects {}",
            data.cols(),
            model.layout().m_dim()
        )));
    }
    let count = u32::try_from(data.rows()).map_err(|_| Error::Config("too many vectors".into()))?;
    let ec = model.ec_enabled();
    let codes = if ec { Some(ModelCodes::from_model(model)?) } else { None };
    let derived = select_stages(table, b_cap as f64);
    let mut plan = derived.clone();
    if ec && (strict || model.strict()) {
        plan = strict_plan(model, table, codes.as_ref().unwrap(), data, b_cap as f64)?;
    }
    let mode = if plan.stages == derived.stages {
        PlanMode::Derived
    } else {
        PlanMode::Explicit
    };
    let header = PayloadHeader {
        mode,
        entropy_coded: ec,
        model_digest: model_digest(model)?,
        b_cap,
        count,
        n_sub: model.layout().n_sub() as u32,
        t_max: model.t_max() as u8,
        plan: (mode == PlanMode::Explicit).then(|| plan.stages.clone()),
        header_len: 0,
    };
    let mut bytes = header.to_bytes();
    let header = PayloadHeader {
        header_len: bytes.len(),
        ..header
    };
    let mut features = Vec::with_capacity(data.rows());
    let mut z_hat = Vec::with_capacity(data.rows());
    let mut coded_bits = Vec::with_capacity(data.rows());
    for z in data.iter_rows() {
        let (enc, rec) = encode(model, z, &plan)?;
        let mut w = BitWriter::new();
        match &codes {
            Some(c) => write_indices(&mut w, &enc.indices, c)?,
            None => {
                for (i, idx) in enc.indices.iter().enumerate() {
                    for (t, &k) in idx.iter().enumerate() {
                        w.write(k, model.layout().bits().get(i, t) as u32);
                    }
                }
            }
        }
        coded_bits.push(w.bit_len());
        debug_assert_eq!(w.bit_len(), coded_len(model, codes.as_ref(), &enc.indices));
        bytes.extend_from_slice(&w.finish());
        features.push(enc);
        z_hat.push(rec);
    }
    Ok(EncodedBatch {
        bytes,
        header,
        plan,
        features,
        z_hat,
        coded_bits,
    })
}

/// Parses a payload and reconstructs every vector.
pub fn decode_batch(model: &MsvqModel, table: &MarginalLossTable, bytes: &[u8]) -> Result<DecodedBatch> {
    let header = PayloadHeader::parse(bytes)?;
    let expected = model_digest(model)?;
    if header.model_digest != expected {
        return Err(Error::DigestMismatch {
            what: "model",
            expected,
            found: header.model_digest,
        });
    }
    let layout = model.layout();
    if header.n_sub as usize != layout.n_sub() || header.t_max as usize != layout.t_max() {
        return Err(Error::Format("payload layout differs from the model".into()));
    }
    if header.entropy_coded != model.ec_enabled() {
        return Err(Error::Format("payload coding differs from the model".into()));
    }
    check_binding(model, table)?;
    let plan = match &header.plan {
        None => select_stages(table, header.b_cap as f64),
        Some(stages) => {
            let base = SelectionPlan::new(layout, stages.clone())?;
            let avg = table.plan_bits(stages);
            base.with_avg_bits(avg)
        }
    };
    let codes = if model.ec_enabled() { Some(ModelCodes::from_model(model)?) } else { None };
    let body = &bytes[header.header_len..];
    let base = header.header_len as u64 * 8;
    let mut r = BitReader::with_base(body, base);
    let mut features = Vec::with_capacity(header.count as usize);
    let mut z_hat = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let indices = match &codes {
            Some(c) => read_indices(&mut r, &plan.stages, c)?,
            None => plan
                .stages
                .iter()
                .enumerate()
                .map(|(i, &ti)| {
                    (0..ti as usize)
                        .map(|t| r.read(layout.bits().get(i, t) as u32))
                        .collect::<Result<Vec<u32>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        };
        r.align()?;
        let enc = EncodedFeature {
            indices,
            plan: plan.clone(),
        };
        z_hat.push(decode(model, &enc)?);
        features.push(enc);
    }
    if r.remaining() != 0 {
        return Err(Error::corrupt(r.stream_offset(), "trailing bytes after the last vector"));
    }
    Ok(DecodedBatch {
        header,
        plan,
        features,
        z_hat,
    })
}

//! Codeword statistics and canonical Huffman coding of index streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::{BitReader, BitWriter};
use crate::codebook::{MsvqModel, PRIOR_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::quantizer::truncation_profile;

/// Longest codeword a Huffman table may contain.
pub const MAX_CODE_LEN: u8 = 32;

/// Laplace-smoothed, floored and renormalized frequencies: `(count + 1) / (total + K)`.
pub fn pmf_from_counts(counts: &[u64]) -> Vec<f64> {
    let k = counts.len() as f64;
    let total: u64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 + 1.0) / (total as f64 + k))
        .collect();
    floor_and_normalize(raw)
}

/// Clamps every entry to at least [`PRIOR_FLOOR`] and rescales to sum one.
pub fn floor_and_normalize(mut p: Vec<f64>) -> Vec<f64> {
    p.iter_mut().for_each(|v| *v = v.max(PRIOR_FLOOR));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Shannon entropy in bits.
pub fn entropy_bits(pmf: &[f64]) -> f64 {
    pmf.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

/// A canonical prefix code, fully determined by its code lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanCode {
    lengths: Vec<u8>,
    codes: Vec<u32>,
    /// Symbols ordered by (length, symbol index).
    sorted: Vec<u32>,
    /// Number of codes of each length, indexed by length.
    count: Vec<u32>,
}

#[derive(PartialEq)]
struct Node {
    weight: f64,
    order: usize,
    id: usize,
}

impl Eq for Node {}

impl Ord for Node {
    // Reversed so `BinaryHeap` pops the lightest node, then the earliest-created one.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .weight
            .total_cmp(&self.weight)
            .then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn huffman_lengths(pmf: &[f64]) -> Vec<u32> {
    let k = pmf.len();
    if k == 1 {
        return vec![1];
    }
    let mut parent = vec![usize::MAX; 2 * k - 1];
    let mut heap: BinaryHeap<Node> = pmf
        .iter()
        .enumerate()
        .map(|(i, &w)| Node {
            weight: w,
            order: i,
            id: i,
        })
        .collect();
    let mut next = k;
    while heap.len() > 1 {
        let a = heap.pop().unwrap();
        let b = heap.pop().unwrap();
        parent[a.id] = next;
        parent[b.id] = next;
        heap.push(Node {
            weight: a.weight + b.weight,
            order: next,
            id: next,
        });
        next += 1;
    }
    // Parents are always created after their children, so one reverse sweep gives depths.
    let mut depth = vec![0u32; 2 * k - 1];
    for node in (0..2 * k - 2).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    depth.truncate(k);
    depth
}

impl HuffmanCode {
    /// Optimal prefix code for `pmf`, canonicalized. Ties merge the lower symbol index
    /// (then the older internal node) first.
    pub fn build(pmf: &[f64]) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::Config("cannot build a code for an empty alphabet".into()));
        }
        if pmf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("pmf entries must be finite and non-negative".into()));
        }
        let mut weights = pmf.to_vec();
        let mut lengths = huffman_lengths(&weights);
        // Flatten toward uniform until the longest code fits; keeps the code complete.
        let mut mix = 1.0 / 1024.0;
        while lengths.iter().any(|&l| l > MAX_CODE_LEN as u32) {
            let u = pmf.iter().sum::<f64>() / pmf.len() as f64;
            weights = pmf.iter().map(|&p| (p + mix * u) / (1.0 + mix)).collect();
            lengths = huffman_lengths(&weights);
            mix *= 2.0;
        }
        Self::from_lengths(lengths.into_iter().map(|l| l as u8).collect())
    }

    /// Reconstructs the canonical code from lengths alone.
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Config("empty code length table".into()));
        }
        if lengths.iter().any(|&l| l == 0 || l > MAX_CODE_LEN) {
            return Err(Error::Config("code length outside 1..=32".into()));
        }
        let kraft: u128 = lengths.iter().map(|&l| 1u128 << (MAX_CODE_LEN - l)).sum();
        if kraft > 1u128 << MAX_CODE_LEN {
            return Err(Error::Config("code lengths violate the Kraft inequality".into()));
        }
        let mut sorted: Vec<u32> = (0..lengths.len() as u32).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let mut count = vec![0u32; MAX_CODE_LEN as usize + 1];
        for &l in &lengths {
            count[l as usize] += 1;
        }
        let mut codes = vec![0u32; lengths.len()];
        let mut code: u64 = 0;
        let mut prev_len = lengths[sorted[0] as usize];
        for &s in &sorted {
            let l = lengths[s as usize];
            code <<= l - prev_len;
            prev_len = l;
            codes[s as usize] = code as u32;
            code += 1;
        }
        Ok(Self {
            lengths,
            codes,
            sorted,
            count,
        })
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn len(&self, symbol: usize) -> u8 {
        self.lengths[symbol]
    }

    pub fn code(&self, symbol: usize) -> u32 {
        self.codes[symbol]
    }

    pub fn alphabet_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_length(&self) -> u8 {
        *self.lengths.iter().max().unwrap()
    }

    /// `sum_k 2^-len_k` as an exact fraction over `2^32`.
    pub fn kraft_sum_scaled(&self) -> u128 {
        self.lengths
            .iter()
            .map(|&l| 1u128 << (MAX_CODE_LEN - l))
            .sum()
    }

    pub fn is_complete(&self) -> bool {
        self.kraft_sum_scaled() == 1u128 << MAX_CODE_LEN
    }

    pub fn write_symbol(&self, w: &mut BitWriter, symbol: u32) -> Result<()> {
        let s = symbol as usize;
        if s >= self.lengths.len() {
            return Err(Error::Index(format!(
                "symbol {symbol} outside alphabet of {}",
                self.lengths.len()
            )));
        }
        w.write(self.codes[s], self.lengths[s] as u32);
        Ok(())
    }

    pub fn read_symbol(&self, r: &mut BitReader<'_>) -> Result<u32> {
        let start = r.stream_offset();
        let mut code: u64 = 0;
        let mut first: u64 = 0;
        let mut offset: usize = 0;
        for len in 1..=MAX_CODE_LEN as usize {
            code = (code << 1) | r.read_bit()? as u64;
            let n = self.count[len] as u64;
            if code < first + n {
                return Ok(self.sorted[offset + (code - first) as usize]);
            }
            offset += n as usize;
            first = (first + n) << 1;
            if offset == self.sorted.len() {
                break;
            }
        }
        Err(Error::corrupt(start, "invalid prefix code"))
    }
}

/// Mean code length under `pmf` and the entropy of `pmf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeStats {
    pub avg_bits: f64,
    pub entropy: f64,
}

pub fn avg_bits(pmf: &[f64], code: &HuffmanCode) -> Result<CodeStats> {
    if pmf.len() != code.alphabet_size() {
        return Err(Error::Config(format!(
            "pmf has {} entries, code has {}",
            pmf.len(),
            code.alphabet_size()
        )));
    }
    Ok(CodeStats {
        avg_bits: pmf
            .iter()
            .zip(code.lengths())
            .map(|(&p, &l)| p * l as f64)
            .sum(),
        entropy: entropy_bits(pmf),
    })
}

/// Index counts per group and stage from a full-depth encoding of `data`, pooled across
/// sub-vectors that share a codebook. `counts[g][t][k]`.
pub fn group_index_counts(model: &MsvqModel, data: &FeatureMatrix) -> Result<Vec<Vec<Vec<u64>>>> {
    let layout = model.layout();
    let t_max = layout.t_max();
    let empty: Vec<Vec<Vec<u64>>> = (0..layout.n_groups())
        .map(|g| {
            (0..t_max)
                .map(|t| vec![0u64; 1usize << layout.group_bits(g, t)])
                .collect()
        })
        .collect();
    let partials = data
        .as_slice()
        .par_chunks(data.cols() * 256)
        .map(|chunk| -> Result<Vec<Vec<Vec<u64>>>> {
            let mut counts = empty.clone();
            for z in chunk.chunks_exact(data.cols()) {
                let prof = truncation_profile(model, z)?;
                for (i, idx) in prof.indices.iter().enumerate() {
                    let g = layout.group_of()[i];
                    for (t, &k) in idx.iter().enumerate() {
                        counts[g][t][k as usize] += 1;
                    }
                }
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = empty;
    for part in partials {
        for (tg, pg) in total.iter_mut().zip(part) {
            for (tt, pt) in tg.iter_mut().zip(pg) {
                for (a, b) in tt.iter_mut().zip(pt) {
                    *a += b;
                }
            }
        }
    }
    Ok(total)
}

/// Smoothed codeword PMF of sub-vector `i` at stage `t`, pooled over its group.
pub fn estimate_pmf(model: &MsvqModel, data: &FeatureMatrix, i: usize, t: usize) -> Result<Vec<f64>> {
    model.resolve(i, t)?;
    let g = model.layout().group_of()[i];
    let counts = group_index_counts(model, data)?;
    Ok(pmf_from_counts(&counts[g][t]))
}

/// Measures every module's PMF on `data` and attaches the resulting Huffman code lengths.
pub fn attach_entropy_codes(model: MsvqModel, data: &FeatureMatrix) -> Result<MsvqModel> {
    let counts = group_index_counts(&model, data)?;
    model.map_codebooks(|g, t, cb| {
        let code = HuffmanCode::build(&pmf_from_counts(&counts[g][t]))?;
        cb.with_code_lengths(code.lengths().to_vec())
    })
}

/// Resolves the code for sub-vector `i`, stage `t`.
pub trait CodeLookup {
    fn code(&self, i: usize, t: usize) -> &HuffmanCode;
}

impl CodeLookup for [Vec<HuffmanCode>] {
    fn code(&self, i: usize, t: usize) -> &HuffmanCode {
        &self[i][t]
    }
}

impl CodeLookup for Vec<Vec<HuffmanCode>> {
    fn code(&self, i: usize, t: usize) -> &HuffmanCode {
        &self[i][t]
    }
}

/// Codes of a model, shared per group exactly like its codebooks.
#[derive(Debug, Clone)]
pub struct ModelCodes {
    group_of: Vec<usize>,
    codes: Vec<Vec<HuffmanCode>>,
}

impl ModelCodes {
    pub fn from_model(model: &MsvqModel) -> Result<Self> {
        let codes = model
            .codebooks()
            .iter()
            .map(|stages| {
                stages
                    .iter()
                    .map(|cb| {
                        let lengths = cb.code_lengths().ok_or_else(|| {
                            Error::State("model has no entropy codes; build them first".into())
                        })?;
                        HuffmanCode::from_lengths(lengths.to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            group_of: model.layout().group_of().to_vec(),
            codes,
        })
    }
}

impl CodeLookup for ModelCodes {
    fn code(&self, i: usize, t: usize) -> &HuffmanCode {
        &self.codes[self.group_of[i]][t]
    }
}

/// Appends the prefix codes of `streams` (sub-vector major, stage order) to `w`.
pub fn write_indices<C: CodeLookup + ?Sized>(
    w: &mut BitWriter,
    streams: &[Vec<u32>],
    codes: &C,
) -> Result<()> {
    for (i, stream) in streams.iter().enumerate() {
        for (t, &k) in stream.iter().enumerate() {
            codes.code(i, t).write_symbol(w, k)?;
        }
    }
    Ok(())
}

/// Reads one vector's index streams; `stages[i]` symbols for sub-vector `i`.
pub fn read_indices<C: CodeLookup + ?Sized>(
    r: &mut BitReader<'_>,
    stages: &[u8],
    codes: &C,
) -> Result<Vec<Vec<u32>>> {
    stages
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (0..n as usize)
                .map(|t| codes.code(i, t).read_symbol(r))
                .collect()
        })
        .collect()
}

/// Encodes all streams into a zero-padded byte buffer.
pub fn encode_indices<C: CodeLookup + ?Sized>(streams: &[Vec<u32>], codes: &C) -> Result<Vec<u8>> {
    let mut w = BitWriter::new();
    write_indices(&mut w, streams, codes)?;
    Ok(w.finish())
}

/// Inverse of [`encode_indices`] given the per-sub-vector stage counts.
pub fn decode_indices<C: CodeLookup + ?Sized>(
    buffer: &[u8],
    stages: &[u8],
    codes: &C,
) -> Result<Vec<Vec<u32>>> {
    let mut r = BitReader::new(buffer);
    let streams = read_indices(&mut r, stages, codes)?;
    r.align()?;
    if r.remaining() != 0 {
        return Err(Error::corrupt(r.position(), "trailing bytes after index payload"));
    }
    Ok(streams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smoothed_counts() {
        let p = pmf_from_counts(&[3, 1]);
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-15);
        let p = pmf_from_counts(&[10, 0, 0, 0]);
        assert!(p[1] > 0.0 && (p[1] - 1.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_assignment_within_multinomial_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 16usize;
        let n = 20_000u64;
        let mut counts = vec![0u64; k];
        for _ in 0..n {
            counts[rng.random_range(0..k)] += 1;
        }
        let p = pmf_from_counts(&counts);
        let q = 1.0 / k as f64;
        let sigma = (q * (1.0 - q) / n as f64).sqrt();
        for &pk in &p {
            assert!((pk - q).abs() <= 3.0 * sigma, "{pk} vs {q} +- {sigma}");
        }
    }

    #[test]
    fn dyadic_pmf() {
        let pmf = [0.5, 0.25, 0.125, 0.125];
        let code = HuffmanCode::build(&pmf).unwrap();
        assert_eq!(code.lengths(), &[1, 2, 3, 3]);
        let s = avg_bits(&pmf, &code).unwrap();
        assert!((s.avg_bits - 1.75).abs() < 1e-15);
        assert!((s.entropy - 1.75).abs() < 1e-15);
        assert_eq!(code.code(0), 0b0);
        assert_eq!(code.code(1), 0b10);
        assert_eq!(code.code(2), 0b110);
        assert_eq!(code.code(3), 0b111);
    }

    #[test]
    fn uniform_pmf_gives_fixed_length() {
        for b in 1..=8u32 {
            let k = 1usize << b;
            let pmf = vec![1.0 / k as f64; k];
            let code = HuffmanCode::build(&pmf).unwrap();
            assert!(code.lengths().iter().all(|&l| l as u32 == b));
            let s = avg_bits(&pmf, &code).unwrap();
            assert!((s.avg_bits - b as f64).abs() < 1e-12);
            assert!((s.entropy - b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn two_symbols_cost_one_bit() {
        let code = HuffmanCode::build(&[0.99, 0.01]).unwrap();
        assert_eq!(code.lengths(), &[1, 1]);
        assert!((avg_bits(&[0.99, 0.01], &code).unwrap().avg_bits - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_symbol_alphabet() {
        let code = HuffmanCode::build(&[1.0]).unwrap();
        assert_eq!(code.lengths(), &[1]);
        let buf = encode_indices(&[vec![0u32, 0, 0]], &vec![vec![code.clone(); 3]]).unwrap();
        assert_eq!(buf, vec![0]);
        assert!(matches!(
            decode_indices(&[0b1000_0000], &[1], &vec![vec![code]]),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn skewed_pmf_length_limited() {
        // Fibonacci-like weights would need codes longer than 32 bits.
        let mut pmf: Vec<f64> = Vec::new();
        let (mut a, mut b) = (1.0f64, 1.0f64);
        for _ in 0..60 {
            pmf.push(a);
            let c = a + b;
            a = b;
            b = c;
        }
        let s: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|p| *p /= s);
        let code = HuffmanCode::build(&pmf).unwrap();
        assert!(code.max_length() <= MAX_CODE_LEN);
        assert!(code.is_complete());
    }

    #[test]
    fn empty_plan_empty_payload() {
        let codes: Vec<Vec<HuffmanCode>> = vec![vec![]; 3];
        let buf = encode_indices(&[vec![], vec![], vec![]], &codes).unwrap();
        assert!(buf.is_empty());
        assert_eq!(decode_indices(&buf, &[0, 0, 0], &codes).unwrap(), vec![Vec::<u32>::new(); 3]);
    }

    #[test]
    fn padding_rule() {
        let code = HuffmanCode::from_lengths(vec![3; 8]).unwrap();
        let buf = encode_indices(&[vec![5u32]], &vec![vec![code.clone()]]).unwrap();
        assert_eq!(buf, vec![0b1010_0000]);
        assert_eq!(decode_indices(&buf, &[1], &vec![vec![code]]).unwrap(), vec![vec![5]]);
    }

    #[test]
    fn truncated_buffer_reports_offset() {
        let code = HuffmanCode::from_lengths(vec![4; 16]).unwrap();
        let codes = vec![vec![code.clone(), code]];
        let buf = encode_indices(&[vec![3u32, 9]], &codes).unwrap();
        assert_eq!(buf.len(), 1);
        match decode_indices(&buf, &[3], &vec![vec![codes[0][0].clone(); 3]]) {
            Err(Error::Corruption { bit_offset, .. }) => assert_eq!(bit_offset, 8),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn pmf_strategy() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(1e-6f64..1.0, 2..64).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn huffman_bounds_and_kraft(pmf in pmf_strategy()) {
                let code = HuffmanCode::build(&pmf).unwrap();
                prop_assert!(code.is_complete());
                let s = avg_bits(&pmf, &code).unwrap();
                prop_assert!(s.avg_bits >= s.entropy - 1e-12);
                prop_assert!(s.avg_bits < s.entropy + 1.0);
                let fixed = (pmf.len() as f64).log2().ceil();
                prop_assert!(s.avg_bits <= fixed + 1e-12);
            }

            #[test]
            fn streams_round_trip(seed in any::<u64>(), n_sub in 1usize..6, t_max in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let codes: Vec<Vec<HuffmanCode>> = (0..n_sub)
                    .map(|_| (0..t_max).map(|_| {
                        let k = rng.random_range(1..40usize);
                        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                        HuffmanCode::build(&w).unwrap()
                    }).collect())
                    .collect();
                let stages: Vec<u8> = (0..n_sub).map(|_| rng.random_range(0..=t_max as u8)).collect();
                let streams: Vec<Vec<u32>> = stages.iter().enumerate()
                    .map(|(i, &n)| (0..n as usize)
                        .map(|t| rng.random_range(0..codes[i][t].alphabet_size() as u32))
                        .collect())
                    .collect();
                let buf = encode_indices(&streams, &codes).unwrap();
                prop_assert_eq!(decode_indices(&buf, &stages, &codes).unwrap(), streams);
            }
        }
    }
}

//! Hash layer `u = tanh(W·z + b)`, sign binarisation, and packed bit codes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const MAX_CODE_LENGTH: usize = 512;
const DB_MAGIC: &[u8; 4] = b"FGHV";

#[derive(Debug, Clone, PartialEq)]
pub struct HashParams {
    /// `k×c′`.
    pub w: Tensor,
    /// `k`.
    pub bias: Tensor,
}

impl HashParams {
    /// Gaussian `W` with std `1/√c′`, zero bias.
    pub fn init(k: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        check_code_length(k)?;
        if embedding_dim == 0 {
            return Err(Error::dim("embedding dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (embedding_dim as f64).sqrt()).unwrap();
        Ok(Self {
            w: Tensor::from_fn(&[k, embedding_dim], |_| normal.sample(&mut rng)),
            bias: Tensor::zeros(&[k]),
        })
    }

    /// Sets the bias so every bit's pre-activation has zero mean over
    /// `embeddings`.
    pub fn center(&mut self, embeddings: &[Vec<f64>]) -> Result<()> {
        let c = self.embedding_dim();
        if embeddings.is_empty() || embeddings.iter().any(|z| z.len() != c) {
            return Err(Error::dim(format!("centring needs embeddings of length {c}")));
        }
        let mut mean = vec![0.0; c];
        for z in embeddings {
            mean.iter_mut().zip(z).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
        for j in 0..self.code_length() {
            let row = &self.w.data()[j * c..(j + 1) * c];
            self.bias.data_mut()[j] = -row.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
        }
        Ok(())
    }

    pub fn code_length(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.bias]
    }

    pub fn enable_grads(&mut self) {
        self.w.enable_grad();
        self.bias.enable_grad();
    }
}

pub fn check_code_length(k: usize) -> Result<()> {
    if k == 0 || k > MAX_CODE_LENGTH {
        return Err(Error::config("k", format!("code length {k} must be in [1, {MAX_CODE_LENGTH}]")));
    }
    Ok(())
}

/// Intermediate values of one hash-layer forward pass.
#[derive(Debug, Clone)]
pub struct HashTrace {
    z: Tensor,
    pre: Tensor,
    u: Tensor,
}

impl HashTrace {
    pub fn codes(&self) -> &Tensor {
        &self.u
    }

    /// Accumulates parameter gradients from `dL/du`; returns `dL/dz`.
    pub fn backward(mut self, params: &mut HashParams, upstream_u: &[f64]) -> Result<Vec<f64>> {
        self.pre.enable_grad();
        ops::tanh_backward(&mut self.pre, &self.u, upstream_u)?;
        let up = self.pre.grad().unwrap().to_vec();
        params.bias.accumulate_grad(&up);
        self.z.enable_grad();
        ops::matmul_backward(&mut params.w, &mut self.z, &up)?;
        Ok(self.z.grad().unwrap().to_vec())
    }
}

pub fn hash_forward_traced(z: &Tensor, params: &HashParams) -> Result<HashTrace> {
    let c = params.embedding_dim();
    if z.shape() != [c] {
        return Err(Error::dim(format!(
            "hash layer expects embedding of length {c}, got {:?}",
            z.shape()
        )));
    }
    let k = params.code_length();
    let zc = z.clone().reshape(vec![c, 1])?;
    let mut pre = ops::matmul(&params.w, &zc)?.reshape(vec![k])?;
    for (p, b) in pre.data_mut().iter_mut().zip(params.bias.data()) {
        *p += b;
    }
    let u = ops::tanh_act(&pre);
    Ok(HashTrace { z: zc, pre, u })
}

/// Relaxed code `u = tanh(W·z + b)`, each entry in `(−1, 1)`.
pub fn hash_forward(z: &Tensor, params: &HashParams) -> Result<Tensor> {
    Ok(hash_forward_traced(z, params)?.u)
}

/// Sign with `sign(0) = +1`.
pub fn binarize(u: &[f64]) -> Vec<i8> {
    u.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
}

pub fn words_per_code(k: usize) -> usize {
    k.div_ceil(64)
}

/// Bit `j` of the code is set iff entry `j` is `+1`; bits fill each word
/// from the least significant end. Padding bits stay zero.
pub fn pack(code: &[i8]) -> Result<Vec<u64>> {
    let mut words = vec![0u64; words_per_code(code.len())];
    for (j, &c) in code.iter().enumerate() {
        match c {
            1 => words[j / 64] |= 1u64 << (j % 64),
            -1 => {}
            other => return Err(Error::InvalidCode(format!("entry {j} is {other}, expected ±1"))),
        }
    }
    Ok(words)
}

pub fn unpack(words: &[u64], k: usize) -> Vec<i8> {
    (0..k)
        .map(|j| if words[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 })
        .collect()
}

/// `n` packed ±1 codes of length `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCodeMatrix {
    n: usize,
    k: usize,
    words: Vec<u64>,
}

impl BitCodeMatrix {
    pub fn new(n: usize, k: usize, words: Vec<u64>) -> Result<Self> {
        check_code_length(k)?;
        let wpc = words_per_code(k);
        if words.len() != n * wpc {
            return Err(Error::dim(format!(
                "{} words cannot hold {n} codes of {k} bits",
                words.len()
            )));
        }
        let m = Self { n, k, words };
        if (0..n).any(|i| m.padding_bits(i) != 0) {
            return Err(Error::InvalidCode("padding bits must be zero".into()));
        }
        Ok(m)
    }

    /// From a row-major `n×k` sign array.
    pub fn from_signs(n: usize, k: usize, signs: &[i8]) -> Result<Self> {
        check_code_length(k)?;
        if signs.len() != n * k {
            return Err(Error::dim("sign array does not match n×k"));
        }
        let mut words = Vec::with_capacity(n * words_per_code(k));
        for row in signs.chunks(k.max(1)).take(n) {
            words.extend(pack(row)?);
        }
        Ok(Self { n, k, words })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        let signs: Vec<i8> = (0..n * k).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        Self::from_signs(n, k, &signs)
    }

    /// Random codes whose every bit column holds `⌊n/2⌋` or `⌈n/2⌉` ones,
    /// each column an independent shuffle.
    pub fn random_balanced<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        let mut signs = vec![0i8; n * k];
        let mut column: Vec<i8> = (0..n).map(|j| if j % 2 == 0 { 1 } else { -1 }).collect();
        for m in 0..k {
            column.shuffle(rng);
            for (j, &b) in column.iter().enumerate() {
                signs[j * k + m] = b;
            }
        }
        Self::from_signs(n, k, &signs)
    }

    pub fn n_codes(&self) -> usize {
        self.n
    }

    pub fn code_length(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let wpc = words_per_code(self.k);
        &self.words[i * wpc..(i + 1) * wpc]
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        let w = self.code(i)[j / 64];
        if w >> (j % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: i8) {
        let wpc = words_per_code(self.k);
        let w = &mut self.words[i * wpc + j / 64];
        if value >= 0 {
            *w |= 1u64 << (j % 64);
        } else {
            *w &= !(1u64 << (j % 64));
        }
    }

    pub fn row_signs(&self, i: usize) -> Vec<i8> {
        unpack(self.code(i), self.k)
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.n).flat_map(|i| self.row_signs(i)).collect()
    }

    fn padding_bits(&self, i: usize) -> u64 {
        let rem = self.k % 64;
        if rem == 0 {
            return 0;
        }
        *self.code(i).last().unwrap() & (!0u64 << rem)
    }
}

/// Database codes and their labels; the payload of the `FGHV` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeDatabase {
    pub codes: BitCodeMatrix,
    pub labels: Vec<usize>,
}

impl CodeDatabase {
    pub fn new(codes: BitCodeMatrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != codes.n_codes() {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} codes",
                labels.len(),
                codes.n_codes()
            )));
        }
        Ok(Self { codes, labels })
    }

    /// `"FGHV"`, `k: u32`, `n: u32`, packed words (`u64`), labels (`u32`), CRC32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(DB_MAGIC);
        w.len_u32(self.codes.k)?.len_u32(self.codes.n)?;
        for &word in &self.codes.words {
            w.u64(word);
        }
        for &l in &self.labels {
            w.len_u32(l)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, DB_MAGIC)?;
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        check_code_length(k).map_err(|_| Error::Malformed(format!("code length {k} out of range")))?;
        let total = n
            .checked_mul(words_per_code(k))
            .ok_or_else(|| Error::Malformed("code count overflows".into()))?;
        let mut words = Vec::with_capacity(total.min(1 << 24));
        for _ in 0..total {
            words.push(r.u64()?);
        }
        let mut labels = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        r.finish()?;
        let codes = BitCodeMatrix::new(n, k, words).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::new(codes, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

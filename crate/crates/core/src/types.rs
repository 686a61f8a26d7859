//! Batched domain values shared by every stage: images, token grids,
//! reliability masks and per-position token distributions.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{ensure, Result};

/// Batch of images `[B, Ch, H, W]`, values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(data.rank() == 4, Shape, "image batch must be rank 4 [B, Ch, H, W], got {:?}", data.dims());
        let data = data.to_dtype(DType::F32)?;
        Ok(Self { data })
    }

    pub fn from_vec(values: Vec<f32>, dims: (usize, usize, usize, usize)) -> Result<Self> {
        let (b, c, h, w) = dims;
        ensure!(values.len() == b * c * h * w, Shape, "{} values cannot fill [{b}, {c}, {h}, {w}]", values.len());
        Self::new(Tensor::from_vec(values, dims, &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// `(batch, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { data: self.data.narrow(0, start, len)? })
    }

    pub fn cat(batches: &[&ImageBatch]) -> Result<Self> {
        let ts: Vec<&Tensor> = batches.iter().map(|b| &b.data).collect();
        Ok(Self { data: Tensor::cat(&ts, 0)? })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.data.device())?;
        Ok(Self { data: self.data.index_select(&idx, 0)? })
    }

    pub fn all_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

/// Integer VQ token ids on an `h x w` lattice, row-major per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    ids: Vec<u32>,
    batch: usize,
    height: usize,
    width: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<u32>, batch: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            ids.len() == batch * height * width,
            Shape,
            "{} ids cannot fill a [{batch}, {height}, {width}] grid",
            ids.len()
        );
        Ok(Self { ids, batch, height, width })
    }

    pub fn filled(value: u32, batch: usize, height: usize, width: usize) -> Self {
        Self { ids: vec![value; batch * height * width], batch, height, width }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure!(t.rank() == 3, Shape, "token tensor must be [B, h, w]");
        let (b, h, w) = t.dims3()?;
        let ids = t.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
        Self::new(ids, b, h, w)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.ids, (self.batch, self.height, self.width), device)?)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, b: usize) -> &[u32] {
        let n = self.tokens_per_sample();
        &self.ids[b * n..(b + 1) * n]
    }

    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if let Some(bad) = self.ids.iter().find(|&&id| id as usize >= codebook_size) {
            return Err(crate::Error::Validation(format!(
                "token id {bad} out of range for codebook of size {codebook_size}"
            )));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(indices.len() * self.tokens_per_sample());
        for &i in indices {
            ids.extend_from_slice(self.sample(i));
        }
        Self { ids, batch: indices.len(), height: self.height, width: self.width }
    }

    /// Fraction of positions where the two grids agree.
    pub fn agreement(&self, other: &TokenGrid) -> f64 {
        let same = self.ids.iter().zip(&other.ids).filter(|(a, b)| a == b).count();
        same as f64 / self.ids.len().max(1) as f64
    }
}

/// Binary lattice; 1 marks an unreliable (masked) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReliabilityMask {
    bits: Vec<u8>,
    batch: usize,
    height: usize,
    width: usize,
}

impl ReliabilityMask {
    pub fn new(bits: Vec<u8>, batch: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            bits.len() == batch * height * width,
            Shape,
            "{} bits cannot fill a [{batch}, {height}, {width}] mask",
            bits.len()
        );
        ensure!(bits.iter().all(|&b| b <= 1), Validation, "mask entries must be 0 or 1");
        Ok(Self { bits, batch, height, width })
    }

    pub fn all_ones(batch: usize, height: usize, width: usize) -> Self {
        Self { bits: vec![1; batch * height * width], batch, height, width }
    }

    pub fn all_zeros(batch: usize, height: usize, width: usize) -> Self {
        Self { bits: vec![0; batch * height * width], batch, height, width }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, b: usize) -> &[u8] {
        let n = self.tokens_per_sample();
        &self.bits[b * n..(b + 1) * n]
    }

    pub fn masked_count(&self, b: usize) -> usize {
        self.sample(b).iter().map(|&v| v as usize).sum()
    }

    pub fn total_masked(&self) -> usize {
        self.bits.iter().map(|&v| v as usize).sum()
    }

    pub fn is_masked(&self, b: usize, pos: usize) -> bool {
        self.bits[b * self.tokens_per_sample() + pos] == 1
    }

    /// True when every masked position of `self` is also masked in `other`.
    pub fn is_subset_of(&self, other: &ReliabilityMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    /// `[B, h, w]` float tensor of 0.0 / 1.0.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.bits.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (self.batch, self.height, self.width), device)?)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(indices.len() * self.tokens_per_sample());
        for &i in indices {
            bits.extend_from_slice(self.sample(i));
        }
        Self { bits, batch: indices.len(), height: self.height, width: self.width }
    }

    pub(crate) fn check_matches(&self, tokens: &TokenGrid) -> Result<()> {
        ensure!(
            self.batch == tokens.batch() && self.grid() == tokens.grid(),
            Shape,
            "mask [{}, {}, {}] does not match tokens [{}, {}, {}]",
            self.batch,
            self.height,
            self.width,
            tokens.batch(),
            tokens.grid().0,
            tokens.grid().1
        );
        Ok(())
    }
}

/// Per-position probability vectors over the codebook, `[B, h, w, C]`.
#[derive(Debug, Clone)]
pub struct SoftTokenDist {
    probs: Tensor,
}

impl SoftTokenDist {
    /// Wraps `probs` after checking each row is a distribution within `tol`.
    pub fn new(probs: Tensor, tol: f64) -> Result<Self> {
        let dist = Self::new_unchecked(probs)?;
        dist.validate(tol)?;
        Ok(dist)
    }

    pub(crate) fn new_unchecked(probs: Tensor) -> Result<Self> {
        ensure!(probs.rank() == 4, Shape, "soft token distribution must be [B, h, w, C], got {:?}", probs.dims());
        Ok(Self { probs: probs.to_dtype(DType::F32)? })
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Self::new_unchecked(candle_nn::ops::softmax(logits, D::Minus1)?)
    }

    pub fn one_hot(tokens: &TokenGrid, codebook_size: usize) -> Result<Self> {
        tokens.validate(codebook_size)?;
        let mut v = vec![0f32; tokens.ids().len() * codebook_size];
        for (i, &id) in tokens.ids().iter().enumerate() {
            v[i * codebook_size + id as usize] = 1.0;
        }
        let (h, w) = tokens.grid();
        Self::new_unchecked(Tensor::from_vec(v, (tokens.batch(), h, w, codebook_size), &Device::Cpu)?)
    }

    pub fn uniform(batch: usize, h: usize, w: usize, codebook_size: usize) -> Result<Self> {
        let t = Tensor::full(1.0f32 / codebook_size as f32, (batch, h, w, codebook_size), &Device::Cpu)?;
        Self::new_unchecked(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.probs.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn codebook_size(&self) -> usize {
        self.dims().3
    }

    /// Flattened rows, one `Vec` of length C per position (batch-major).
    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        let c = self.codebook_size();
        let flat = self.probs.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat.chunks(c).map(|r| r.to_vec()).collect())
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, row) in self.rows()?.iter().enumerate() {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            ensure!(
                row.iter().all(|&p| p >= 0.0 && p.is_finite()),
                Validation,
                "row {i} has a negative or non-finite entry"
            );
            ensure!((sum - 1.0).abs() <= tol, Validation, "row {i} sums to {sum}, expected 1 within {tol}");
        }
        Ok(())
    }

    /// Per-position argmax; ties resolve to the lowest id.
    pub fn argmax(&self) -> Result<TokenGrid> {
        let (b, h, w, _) = self.dims();
        let ids = self
            .rows()?
            .iter()
            .map(|row| {
                let mut best = 0usize;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect();
        TokenGrid::new(ids, b, h, w)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.probs.device())?;
        Self::new_unchecked(self.probs.index_select(&idx, 0)?)
    }
}

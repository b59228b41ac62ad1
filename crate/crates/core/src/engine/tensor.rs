use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// A `Tensor` is a plain value. It takes part in differentiation only after
/// being placed on a [`Tape`](super::Tape), which owns all gradient buffers;
/// a tensor that never enters a tape therefore never receives a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// One integer label map (`height × width`, values in `0..=C`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "label map",
                format!("{} values for {height}×{width}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Binary indicator of one class.
    pub fn indicator(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// One-hot encoding as a `1×(C+1)×H×W` tensor.
    pub fn one_hot<T: Scalar>(&self, channels: usize) -> Tensor<T> {
        Tensor::stack_one_hot(std::slice::from_ref(self), channels)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Slice out instance `i` along the leading axis (keeps a leading 1).
    pub fn instance(&self, i: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut lead = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    /// One-hot encode a batch of label maps into `N×channels×H×W`.
    pub fn stack_one_hot(labels: &[LabelMap], channels: usize) -> Self {
        let (h, w) = (labels[0].height, labels[0].width);
        let hw = h * w;
        let mut out = Self::zeros(&[labels.len(), channels, h, w]);
        for (n, lab) in labels.iter().enumerate() {
            for (i, &v) in lab.data.iter().enumerate() {
                let c = v as usize;
                if c < channels {
                    out.data[(n * channels + c) * hw + i] = T::one();
                }
            }
        }
        out
    }

    /// Per-pixel argmax over channels of an `N×C×H×W` map; ties go to the
    /// lowest channel index.
    pub fn argmax_channels(&self) -> Result<Vec<LabelMap>> {
        let (n, c, h, w) = self.dims4("argmax_channels")?;
        let hw = h * w;
        Ok((0..n)
            .map(|b| {
                let base = b * c * hw;
                let data = (0..hw)
                    .map(|i| {
                        let mut best = 0usize;
                        let mut best_v = self.data[base + i];
                        for ch in 1..c {
                            let v = self.data[base + ch * hw + i];
                            if v > best_v {
                                best = ch;
                                best_v = v;
                            }
                        }
                        best as u8
                    })
                    .collect();
                LabelMap {
                    height: h,
                    width: w,
                    data,
                }
            })
            .collect())
    }

    /// Per-pixel maximum over channels, `N×1×H×W`.
    pub fn channel_max(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("channel_max")?;
        let hw = h * w;
        let mut out = Self::zeros(&[n, 1, h, w]);
        for b in 0..n {
            for i in 0..hw {
                let mut m = self.data[b * c * hw + i];
                for ch in 1..c {
                    m = m.max(self.data[(b * c + ch) * hw + i]);
                }
                out.data[b * hw + i] = m;
            }
        }
        Ok(out)
    }

    /// Repeat an `N×1×H×W` map across `channels`.
    pub fn expand_channels(&self, channels: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("expand_channels")?;
        if c != 1 {
            return Err(Error::shape("expand_channels", format!("expected 1 channel, got {c}")));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&self.data[b * hw..(b + 1) * hw]);
            }
        }
        Ok(Self {
            shape: vec![n, channels, h, w],
            data,
        })
    }

    /// Numerically stable softmax over the channel axis (no tape).
    pub fn softmax_channels(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::shape("softmax_channels", "need at least 2 channels"));
        }
        let mut out = self.clone();
        super::kernels::softmax_channels(&mut out.data, n, c, h * w);
        Ok(out)
    }

    /// Align-corners-false bilinear resampling (no tape).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "zero output extent"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let data = super::kernels::resize_forward(&self.data, n * c, h, w, out_h, out_w);
        Ok(Self {
            shape: vec![n, c, out_h, out_w],
            data,
        })
    }

    /// Write as `TNSR v1 <rank> <d0> ...\n` followed by little-endian `f32`s.
    pub fn write_tnsr<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = format!("TNSR v1 {}", self.shape.len());
        for d in &self.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        out.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Inverse of [`write_tnsr`](Self::write_tnsr).
    pub fn read_tnsr<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "TNSR payload",
            detail,
        };
        let mut header = String::new();
        input
            .read_line(&mut header)
            .map_err(|e| bad(e.to_string()))?;
        let mut words = header.trim_end_matches('\n').split(' ');
        if words.next() != Some("TNSR") || words.next() != Some("v1") {
            return Err(bad(format!("bad header {header:?}")));
        }
        let rank: usize = words
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad(format!("bad rank in {header:?}")))?;
        let shape = words
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if shape.len() != rank {
            return Err(bad(format!("rank {rank} but {} extents", shape.len())));
        }
        let count = numel(&shape);
        let mut bytes = vec![0u8; count * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|e| bad(format!("payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Self::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_channel() {
        let p = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[0.4, 0.1, 0.4, 0.1, 0.2, 0.8]).unwrap();
        let q = p.argmax_channels().unwrap();
        assert_eq!(q[0].data, vec![0, 2]);
    }

    #[test]
    fn argmax_of_one_hot_recovers_class() {
        let lab = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let oh: Tensor<f32> = lab.one_hot(3);
        assert_eq!(oh.argmax_channels().unwrap()[0], lab);
    }

    #[test]
    fn tnsr_header_layout() {
        let t = Tensor::<f32>::from_f64(&[1, 2], &[1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert!(buf.starts_with(b"TNSR v1 2 1 2\n"));
        assert_eq!(&buf[14..18], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 8);
    }

    #[test]
    fn tnsr_rejects_garbage() {
        assert!(Tensor::<f32>::read_tnsr(&b"TNSR v2 1 1\n\0\0\0\0"[..]).is_err());
        assert!(Tensor::<f32>::read_tnsr(&b"TNSR v1 1 4\n\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn tnsr_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| ((i as u32 ^ seed) % 1000) as f32 * 0.37 - 50.0);
            let mut buf = Vec::new();
            t.write_tnsr(&mut buf).unwrap();
            let back = Tensor::<f32>::read_tnsr(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

//! Dense f32 kernels used by the toy UNet. Everything is single-threaded and
//! accumulates in a fixed order so results are bit-reproducible.

use super::ModelError;

/// Row-major token matrix: `rows` tokens of width `cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tokens {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "token matrix data length");
        Tokens { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tokens::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tokens) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Channel-major feature map `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map data length");
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One token per pixel, one column per channel.
    pub fn to_tokens(&self) -> Tokens {
        let n = self.height * self.width;
        let mut data = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for (p, &v) in self.plane(c).iter().enumerate() {
                data[p * self.channels + c] = v;
            }
        }
        Tokens::new(n, self.channels, data)
    }

    pub fn from_tokens(t: &Tokens, height: usize, width: usize) -> Self {
        assert_eq!(t.rows, height * width);
        let n = t.rows;
        let mut data = vec![0.0; n * t.cols];
        for p in 0..n {
            for (c, &v) in t.row(p).iter().enumerate() {
                data[c * n + p] = v;
            }
        }
        FeatureMap::new(t.cols, height, width, data)
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &FeatureMap) -> Result<FeatureMap, ModelError> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(ModelError::DimensionMismatch(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(FeatureMap::new(
            self.channels + other.channels,
            self.height,
            self.width,
            data,
        ))
    }
}

/// `x · Wᵀ` with `w` stored `[out, in]` row-major.
pub fn linear(x: &Tokens, w: &[f32], out_dim: usize) -> Result<Tokens, ModelError> {
    if w.len() != out_dim * x.cols {
        return Err(ModelError::DimensionMismatch(format!(
            "linear weight has {} entries, expected {out_dim}x{}",
            w.len(),
            x.cols
        )));
    }
    // [in, out] so each input feature adds a contiguous row into the output.
    let mut wt = vec![0.0f32; w.len()];
    for j in 0..out_dim {
        for i in 0..x.cols {
            wt[i * out_dim + j] = w[j * x.cols + i];
        }
    }
    let mut out = Tokens::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let orow = &mut out.data[r * out_dim..(r + 1) * out_dim];
        for (i, &xi) in x.row(r).iter().enumerate() {
            axpy(orow, xi, &wt[i * out_dim..(i + 1) * out_dim]);
        }
    }
    Ok(out)
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight fixed accumulation lanes, so it vectorizes while
/// keeping a deterministic summation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Projection matrices of one attention sublayer, each `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub wo: &'a [f32],
}

/// Multi-head scaled dot-product attention. Self-attention passes `x` as
/// its own context; cross-attention passes the text tokens.
pub fn attention(
    x: &Tokens,
    context: &Tokens,
    w: AttentionWeights<'_>,
    heads: usize,
) -> Result<Tokens, ModelError> {
    let dim = x.cols;
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(ModelError::DimensionMismatch(format!(
            "{heads} heads do not divide width {dim}"
        )));
    }
    let q = linear(x, w.wq, dim)?;
    let k = linear(context, w.wk, dim)?;
    let v = linear(context, w.wv, dim)?;
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let keys = context.rows;
    // Head-major transposes: [dim][keys], so both score and value loops run
    // over contiguous key rows.
    let kt = transpose(&k);
    let vt = transpose(&v);

    let mut merged = Tokens::zeros(x.rows, dim);
    let mut scores = vec![0.0f32; keys];
    for i in 0..x.rows {
        let qi = q.row(i);
        for h in 0..heads {
            scores.fill(0.0);
            for d in h * head_dim..(h + 1) * head_dim {
                let qd = qi[d] * scale;
                for (s, &kv) in scores.iter_mut().zip(&kt[d * keys..(d + 1) * keys]) {
                    *s += qd * kv;
                }
            }
            softmax_in_place(&mut scores);
            let out = &mut merged.row_mut(i)[h * head_dim..(h + 1) * head_dim];
            for (o, d) in out.iter_mut().zip(h * head_dim..) {
                *o = dot(&scores, &vt[d * keys..(d + 1) * keys]);
            }
        }
    }
    linear(&merged, w.wo, dim)
}

fn transpose(t: &Tokens) -> Vec<f32> {
    let mut out = vec![0.0; t.data.len()];
    for r in 0..t.rows {
        for (c, &v) in t.row(r).iter().enumerate() {
            out[c * t.rows + r] = v;
        }
    }
    out
}

pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for x in xs.iter_mut() {
        *x = fast_exp(*x - max);
    }
    let sum = xs.iter().sum::<f32>();
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `e^x` via range reduction and a degree-6 polynomial, within a few ulp of
/// `f32::exp`. Pure branch-free arithmetic, so results do not depend on the
/// platform libm. Below -87 flushes to 0, above 88 saturates to infinity,
/// NaN propagates.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let xc = x.clamp(-87.0, 88.0);
    // Adding 1.5 * 2^23 rounds to nearest and leaves the integer in the low
    // mantissa bits, which also yields 2^n without a float-to-int cast.
    const ROUND: f32 = 12_582_912.0;
    let shifted = xc * LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.666_666_7e-1 + r * (4.166_666_8e-2 + r * (8.333_334e-3 + r * 1.388_889e-3)))));
    // n is within [-126, 127] after the clamp.
    let scale = f32::from_bits(shifted.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127) << 23);
    let y = p * scale;
    let y = if x > 88.0 { f32::INFINITY } else { y };
    if x < -87.0 {
        0.0
    } else {
        y
    }
}

/// Sigmoid-form GELU, `x * sigmoid(1.702 x)`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    x / (1.0 + fast_exp(-1.702 * x))
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + fast_exp(-x))
}

/// `Wf2 · gelu(Wf1 · x)` per token. `wf1` is `[hidden, width]`, `wf2` is
/// `[width, hidden]`.
pub fn ffn(x: &Tokens, wf1: &[f32], wf2: &[f32]) -> Result<Tokens, ModelError> {
    if x.cols == 0 || !wf1.len().is_multiple_of(x.cols) {
        return Err(ModelError::DimensionMismatch(format!(
            "ffn input weight of {} entries does not match width {}",
            wf1.len(),
            x.cols
        )));
    }
    let hidden = wf1.len() / x.cols;
    let mut h = linear(x, wf1, hidden)?;
    for v in &mut h.data {
        *v = gelu(*v);
    }
    linear(&h, wf2, x.cols)
}

/// Parameter-free layer normalization over each token.
pub fn layer_norm(x: &Tokens) -> Tokens {
    let mut out = x.clone();
    for r in 0..x.rows {
        normalize(out.row_mut(r));
    }
    out
}

fn normalize(xs: &mut [f32]) {
    let n = xs.len() as f32;
    let mean = xs.iter().sum::<f32>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    for v in xs.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

/// Parameter-free group normalization.
pub fn group_norm(x: &FeatureMap, groups: usize) -> FeatureMap {
    let mut out = x.clone();
    let per_group = x.channels / groups * x.height * x.width;
    for g in out.data.chunks_mut(per_group) {
        normalize(g);
    }
    out
}

/// 3x3 convolution with zero padding; `w` is `[out, in, 3, 3]`.
pub fn conv3x3(
    x: &FeatureMap,
    w: &[f32],
    out_channels: usize,
    stride: usize,
) -> Result<FeatureMap, ModelError> {
    if w.len() != out_channels * x.channels * 9 {
        return Err(ModelError::DimensionMismatch(format!(
            "conv weight has {} entries, expected {out_channels}x{}x3x3",
            w.len(),
            x.channels
        )));
    }
    let (h, wd) = (x.height, x.width);
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let plane = oh * ow;

    // im2col: row (ic, tap) holds the input value each output pixel reads.
    let taps = x.channels * 9;
    let mut col = vec![0.0f32; taps * plane];
    for ic in 0..x.channels {
        let iplane = x.plane(ic);
        for kk in 0..9 {
            let (dy, dx) = (kk as isize / 3 - 1, kk as isize % 3 - 1);
            let crow = &mut col[(ic * 9 + kk) * plane..(ic * 9 + kk + 1) * plane];
            for oy in 0..oh {
                let iy = (oy * stride) as isize + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let irow = &iplane[iy as usize * wd..(iy as usize + 1) * wd];
                for ox in 0..ow {
                    let ix = (ox * stride) as isize + dx;
                    if ix >= 0 && ix < wd as isize {
                        crow[oy * ow + ox] = irow[ix as usize];
                    }
                }
            }
        }
    }

    let mut out = FeatureMap::zeros(out_channels, oh, ow);
    for oc in 0..out_channels {
        let oplane = &mut out.data[oc * plane..(oc + 1) * plane];
        for (t, &k) in w[oc * taps..(oc + 1) * taps].iter().enumerate() {
            axpy(oplane, k, &col[t * plane..(t + 1) * plane]);
        }
    }
    Ok(out)
}

/// 1x1 convolution; `w` is `[out, in]`.
pub fn conv1x1(x: &FeatureMap, w: &[f32], out_channels: usize) -> Result<FeatureMap, ModelError> {
    if w.len() != out_channels * x.channels {
        return Err(ModelError::DimensionMismatch(format!(
            "1x1 conv weight has {} entries, expected {out_channels}x{}",
            w.len(),
            x.channels
        )));
    }
    let n = x.height * x.width;
    let mut out = FeatureMap::zeros(out_channels, x.height, x.width);
    for oc in 0..out_channels {
        let oplane = &mut out.data[oc * n..(oc + 1) * n];
        for ic in 0..x.channels {
            axpy(oplane, w[oc * x.channels + ic], x.plane(ic));
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x up-sampling.
pub fn upsample_nearest2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let ip = x.plane(c);
        let op = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                op[y * w + xx] = ip[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

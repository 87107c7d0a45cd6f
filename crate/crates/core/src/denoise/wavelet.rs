//! Orthonormal 2-D discrete wavelet transform with periodic extension.
//!
//! The filter is the 8-tap Daubechies scaling filter (four vanishing moments).
//! Periodisation keeps the transform orthogonal for any even length, so
//! analysis followed by synthesis is exact up to rounding.

use ndarray::Array2;

use crate::error::{Error, Result};

/// 8-tap Daubechies low-pass (scaling) filter. Sums to sqrt(2), unit norm.
pub const DAUBECHIES8: [f64; 8] = [
    0.230_377_813_308_896_4,
    0.714_846_570_552_915_4,
    0.630_880_767_929_858_7,
    -0.027_983_769_416_859_9,
    -0.187_034_811_719_093_1,
    0.030_841_381_835_560_7,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_0,
];

const TAPS: usize = DAUBECHIES8.len();

/// Quadrature-mirror high-pass filter: `g[j] = (-1)^j h[L-1-j]`.
fn highpass() -> [f64; TAPS] {
    let mut g = [0.0; TAPS];
    for (j, gj) in g.iter_mut().enumerate() {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        *gj = sign * DAUBECHIES8[TAPS - 1 - j];
    }
    g
}

/// Detail subbands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    /// High-pass along rows, low-pass along columns.
    pub horizontal: Array2<f64>,
    /// Low-pass along rows, high-pass along columns.
    pub vertical: Array2<f64>,
    pub diagonal: Array2<f64>,
}

impl DetailBands {
    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        [&self.horizontal, &self.vertical, &self.diagonal].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        [&mut self.horizontal, &mut self.vertical, &mut self.diagonal].into_iter()
    }
}

/// Multiresolution decomposition. `details[0]` is the finest level.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub approx: Array2<f64>,
    pub details: Vec<DetailBands>,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

/// One periodic analysis step along a line of even length.
///
/// The detail taps are applied to differences from the first sample under
/// the filter; since the high-pass taps sum to zero this is the same
/// coefficient, and constant input yields exactly zero detail.
fn analyze(x: &[f64], approx: &mut [f64], detail: &mut [f64], g: &[f64; TAPS]) {
    let n = x.len();
    for k in 0..n / 2 {
        let base = x[2 * k];
        let mut a = 0.0;
        let mut d = 0.0;
        for j in 0..TAPS {
            let v = x[(2 * k + j) % n];
            a += DAUBECHIES8[j] * v;
            d += g[j] * (v - base);
        }
        approx[k] = a;
        detail[k] = d;
    }
}

fn synthesize(approx: &[f64], detail: &[f64], out: &mut [f64], g: &[f64; TAPS]) {
    let n = out.len();
    out.fill(0.0);
    for k in 0..n / 2 {
        let (a, d) = (approx[k], detail[k]);
        for j in 0..TAPS {
            out[(2 * k + j) % n] += DAUBECHIES8[j] * a + g[j] * d;
        }
    }
}

/// Periodic analysis of every row: returns (low-pass, high-pass) halves.
fn rows_forward(input: &Array2<f64>, g: &[f64; TAPS]) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = input.dim();
    let mut lo = Array2::zeros((h, w / 2));
    let mut hi = Array2::zeros((h, w / 2));
    let mut line = vec![0.0; w];
    let mut a = vec![0.0; w / 2];
    let mut d = vec![0.0; w / 2];
    for r in 0..h {
        line.iter_mut().zip(input.row(r)).for_each(|(o, &v)| *o = v);
        analyze(&line, &mut a, &mut d, g);
        lo.row_mut(r).iter_mut().zip(&a).for_each(|(o, &v)| *o = v);
        hi.row_mut(r).iter_mut().zip(&d).for_each(|(o, &v)| *o = v);
    }
    (lo, hi)
}

fn cols_forward(input: &Array2<f64>, g: &[f64; TAPS]) -> (Array2<f64>, Array2<f64>) {
    let (lo, hi) = rows_forward(&input.t().to_owned(), g);
    (lo.t().to_owned(), hi.t().to_owned())
}

fn rows_inverse(lo: &Array2<f64>, hi: &Array2<f64>, g: &[f64; TAPS]) -> Array2<f64> {
    let (h, half) = lo.dim();
    let mut out = Array2::zeros((h, half * 2));
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    let mut line = vec![0.0; half * 2];
    for r in 0..h {
        a.iter_mut().zip(lo.row(r)).for_each(|(o, &v)| *o = v);
        d.iter_mut().zip(hi.row(r)).for_each(|(o, &v)| *o = v);
        synthesize(&a, &d, &mut line, g);
        out.row_mut(r).iter_mut().zip(&line).for_each(|(o, &v)| *o = v);
    }
    out
}

fn cols_inverse(lo: &Array2<f64>, hi: &Array2<f64>, g: &[f64; TAPS]) -> Array2<f64> {
    rows_inverse(&lo.t().to_owned(), &hi.t().to_owned(), g)
        .t()
        .to_owned()
}

/// Decomposes a square block whose edge is divisible by `2^levels`.
pub fn wavelet_decompose(block: &Array2<f64>, levels: usize) -> Result<Pyramid> {
    let (h, w) = block.dim();
    if h != w || h == 0 {
        return Err(Error::Shape(format!("wavelet block must be square, got {w}x{h}")));
    }
    if levels == 0 || levels >= usize::BITS as usize || h % (1usize << levels) != 0 {
        return Err(Error::Shape(format!(
            "block edge {h} not divisible by 2^{levels}"
        )));
    }
    let g = highpass();
    let mut current = block.to_owned();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (row_lo, row_hi) = rows_forward(&current, &g);
        let (approx, vertical) = cols_forward(&row_lo, &g);
        let (horizontal, diagonal) = cols_forward(&row_hi, &g);
        details.push(DetailBands {
            horizontal,
            vertical,
            diagonal,
        });
        current = approx;
    }
    Ok(Pyramid {
        approx: current,
        details,
    })
}

/// Inverse of [`wavelet_decompose`].
pub fn wavelet_reconstruct(p: &Pyramid) -> Array2<f64> {
    let g = highpass();
    let mut current = p.approx.clone();
    for level in p.details.iter().rev() {
        let row_lo = cols_inverse(&current, &level.vertical, &g);
        let row_hi = cols_inverse(&level.horizontal, &level.diagonal, &g);
        current = rows_inverse(&row_lo, &row_hi, &g);
    }
    current
}

/// Zeroes the approximation band in place, leaving only detail content.
pub fn drop_approximation(p: &mut Pyramid) {
    p.approx.fill(0.0);
}

//! Dense M-mode tensors, mode unfolding and the `TNS v1` text format.
//!
//! Storage is flat row-major (last index fastest). Mode indices are 0-based
//! throughout the Rust API: mode `0` is the first axis.
//!
//! Unfolding follows the Kolda convention: the mode-`m` unfolding is an
//! `I_m x prod_{k != m} I_k` matrix whose column index enumerates the remaining
//! indices with the lowest remaining mode varying fastest.

use std::fmt::Write as _;

use crate::error::{Result, UktlError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(UktlError::InvalidArgument("tensor order must be at least 1".into()));
        }
        if dims.contains(&0) {
            return Err(UktlError::InvalidArgument(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(UktlError::DimensionMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(UktlError::NonFinite(format!("tensor value at flat index {pos}")));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f(&idx));
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(dims, values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let flat: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.values[flat]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, a: f64) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.values.iter().map(|v| a * v).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        Tensor::new(
            self.dims.clone(),
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        Tensor::new(
            self.dims.clone(),
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        )
    }

    /// Squared Frobenius distance `||self - other||_F^2`.
    pub fn distance_sq(&self, other: &Tensor) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub(crate) fn check_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(UktlError::DimensionMismatch(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(UktlError::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// For each flat row-major position, its (row, column) in the mode unfolding.
    fn unfold_positions(&self, mode: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        // Column weights: lowest remaining mode varies fastest.
        let mut col_weight = vec![0usize; self.order()];
        let mut w = 1;
        for (k, cw) in col_weight.iter_mut().enumerate() {
            if k != mode {
                *cw = w;
                w *= self.dims[k];
            }
        }
        let dims = &self.dims;
        let mut idx = vec![0usize; dims.len()];
        let mut col = 0usize;
        (0..self.values.len()).map(move |_| {
            let out = (idx[mode], col);
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                col += col_weight[k];
                if idx[k] < dims[k] {
                    break;
                }
                col -= col_weight[k] * dims[k];
                idx[k] = 0;
            }
            out
        })
    }

    /// Mode-`mode` unfolding (0-based mode).
    pub fn matricize(&self, mode: usize) -> Result<Matrix> {
        self.check_mode(mode)?;
        let rows = self.dims[mode];
        let cols = self.values.len() / rows;
        let mut out = vec![0.0; self.values.len()];
        for (v, (r, c)) in self.values.iter().zip(self.unfold_positions(mode)) {
            out[r * cols + c] = *v;
        }
        Matrix::new(rows, cols, out)
    }

    /// Inverse of [`Tensor::matricize`].
    pub fn refold(matrix: &Matrix, mode: usize, dims: &[usize]) -> Result<Tensor> {
        let template = Tensor::zeros(dims.to_vec())?;
        template.check_mode(mode)?;
        let cols = template.values.len() / dims[mode];
        if matrix.rows() != dims[mode] || matrix.cols() != cols {
            return Err(UktlError::DimensionMismatch(format!(
                "cannot refold {}x{} into dims {dims:?} along mode {mode}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let data = matrix.as_slice();
        let values = template
            .unfold_positions(mode)
            .map(|(r, c)| data[r * cols + c])
            .collect();
        Tensor::new(dims.to_vec(), values)
    }

    /// Sub-tensor along the last axis: indices `start..start + len`.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let last = *self.dims.last().expect("order >= 1");
        if len == 0 || start + len > last {
            return Err(UktlError::InvalidArgument(format!(
                "slice {start}..{} out of range for last axis of length {last}",
                start + len
            )));
        }
        self.gather_last(&(start..start + len).collect::<Vec<_>>())
    }

    /// New tensor whose last-axis positions are `indices` into this tensor's last axis.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Tensor> {
        let last = *self.dims.last().expect("order >= 1");
        if indices.is_empty() {
            return Err(UktlError::Empty("gather needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= last) {
            return Err(UktlError::InvalidArgument(format!(
                "index {bad} out of range for last axis of length {last}"
            )));
        }
        let outer = self.values.len() / last;
        let mut values = Vec::with_capacity(outer * indices.len());
        for o in 0..outer {
            let row = &self.values[o * last..(o + 1) * last];
            values.extend(indices.iter().map(|&i| row[i]));
        }
        let mut dims = self.dims.clone();
        *dims.last_mut().unwrap() = indices.len();
        Tensor::new(dims, values)
    }

    pub fn encode(&self) -> String {
        encode_tensor(self)
    }
}

/// Shortest decimal text that parses back to exactly `v`.
pub fn format_f64(v: f64) -> String {
    let plain = format!("{v}");
    let sci = format!("{v:e}");
    if sci.len() < plain.len() {
        sci
    } else {
        plain
    }
}

/// Serialize to `TNS v1`: header lines, then one value per line.
pub fn encode_tensor(t: &Tensor) -> String {
    let mut out = String::with_capacity(32 + t.len() * 20);
    out.push_str("TNS v1\n");
    let _ = writeln!(out, "order {}", t.order());
    out.push_str("dims");
    for d in &t.dims {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    for v in &t.values {
        out.push_str(&format_f64(*v));
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> UktlError {
    UktlError::Parse {
        line,
        message: message.into(),
    }
}

pub fn decode_tensor(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (ln, magic) = lines.next().ok_or_else(|| parse_err(1, "empty stream"))?;
    if magic.trim_end() != "TNS v1" {
        return Err(parse_err(ln, format!("expected header `TNS v1`, found `{magic}`")));
    }

    let (ln, order_line) = lines.next().ok_or_else(|| parse_err(2, "missing `order` line"))?;
    let order: usize = match order_line.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["order", n] => n
            .parse()
            .map_err(|_| parse_err(ln, format!("invalid order `{n}`")))?,
        _ => return Err(parse_err(ln, format!("expected `order <M>`, found `{order_line}`"))),
    };
    if order == 0 {
        return Err(parse_err(ln, "order must be at least 1"));
    }

    let (ln, dims_line) = lines.next().ok_or_else(|| parse_err(3, "missing `dims` line"))?;
    let mut toks = dims_line.split_whitespace();
    if toks.next() != Some("dims") {
        return Err(parse_err(ln, format!("expected `dims ...`, found `{dims_line}`")));
    }
    let dims = toks
        .map(|t| match t.parse::<usize>() {
            Ok(0) | Err(_) => Err(parse_err(ln, format!("invalid dimension `{t}`"))),
            Ok(d) => Ok(d),
        })
        .collect::<Result<Vec<usize>>>()?;
    if dims.len() != order {
        return Err(parse_err(
            ln,
            format!("order {order} but {} dims listed", dims.len()),
        ));
    }

    let expected: usize = dims.iter().product();
    let mut values = Vec::with_capacity(expected);
    let mut last_line = ln;
    for (ln, line) in lines {
        last_line = ln;
        for (col, tok) in token_offsets(line) {
            let v: f64 = tok.parse().map_err(|_| {
                parse_err(ln, format!("non-numeric token `{tok}` at column {}", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    ln,
                    format!("non-finite value `{tok}` at column {}", col + 1),
                ));
            }
            values.push(v);
        }
    }
    if values.len() != expected {
        return Err(parse_err(
            last_line,
            format!(
                "value-count mismatch: dims {dims:?} need {expected} values, found {}",
                values.len()
            ),
        ));
    }
    Tensor::new(dims, values)
}

fn token_offsets(line: &str) -> impl Iterator<Item = (usize, &str)> {
    line.split_whitespace()
        .map(move |tok| (tok.as_ptr() as usize - line.as_ptr() as usize, tok))
}

pub fn read_tensor(path: &std::path::Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| UktlError::io(path, e))?;
    decode_tensor(&text)
}

pub fn write_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| UktlError::io(path, e))
}

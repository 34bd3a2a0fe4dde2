use alloc::format;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Sinusoidal relative-position table over offsets `-(n_max-1) ..= n_max-1`.
///
/// Row `p + n_max - 1` holds offset `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTable {
    n_max: usize,
    d: usize,
    rows: Tensor,
}

/// Column pair `(2i, 2i+1)` of offset `p` is `(sin, cos)(p / 10000^(2i/d))`.
pub fn sinusoid_entry(p: f64, col: usize, d: usize) -> f64 {
    let i = col / 2;
    let angle = p / libm::pow(10000.0, (2 * i) as f64 / d as f64);
    if col.is_multiple_of(2) {
        libm::sin(angle)
    } else {
        libm::cos(angle)
    }
}

impl RelPosTable {
    pub fn new(n_max: usize, d: usize) -> Result<Self> {
        if !d.is_multiple_of(2) {
            return Err(config_err(format!("positional dim must be even, got {d}")));
        }
        if n_max == 0 {
            return Err(config_err("positional table needs n_max >= 1"));
        }
        let rows = 2 * n_max - 1;
        let rows = Tensor::from_fn(&[rows, d], |idx| {
            let p = (idx / d) as f64 - (n_max - 1) as f64;
            sinusoid_entry(p, idx % d, d)
        });
        Ok(Self { n_max, d, rows })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    /// Rows for offsets `lo ..= hi`, in increasing order.
    pub fn offsets(&self, lo: isize, hi: isize) -> Result<Tensor> {
        let limit = self.n_max as isize - 1;
        if lo > hi || lo < -limit || hi > limit {
            return Err(config_err(format!(
                "offsets {lo}..={hi} exceed table range ±{limit} (n_max {})",
                self.n_max
            )));
        }
        let start = (lo + limit) as usize * self.d;
        let end = (hi + limit + 1) as usize * self.d;
        Tensor::new(
            &[(hi - lo + 1) as usize, self.d],
            self.rows.data()[start..end].to_vec(),
        )
    }
}

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Outputs only at input-active sites; the active set never grows.
    Submanifold,
    /// Outputs at every site an active input can reach; supports striding.
    Spatial,
}

/// Geometry of one sparse convolution. Axes follow the tensor order `(y, x[, z])`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    rank: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
    mode: ConvMode,
}

fn expand(rank: usize, v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[..rank].copy_from_slice(&v[..rank]);
    out
}

impl KernelSpec {
    /// Submanifold kernel with unit dilation and "same" padding.
    pub fn submanifold(kernel: &[usize]) -> Self {
        let rank = kernel.len();
        let mut spec = Self {
            rank,
            kernel: expand(rank, kernel, 1),
            stride: [1; 3],
            dilation: [1; 3],
            padding: [0; 3],
            mode: ConvMode::Submanifold,
        };
        spec.padding = spec.same_padding();
        spec
    }

    /// Spatially sparse kernel with the same stride on every axis and "same" padding.
    pub fn spatial(kernel: &[usize], stride: usize) -> Self {
        let rank = kernel.len();
        let mut spec = Self {
            rank,
            kernel: expand(rank, kernel, 1),
            stride: expand(rank, &vec![stride; rank], 1),
            dilation: [1; 3],
            padding: [0; 3],
            mode: ConvMode::Spatial,
        };
        spec.padding = spec.same_padding();
        spec
    }

    /// Same dilation on every axis; padding is recomputed as "same".
    pub fn with_dilation(mut self, m: usize) -> Self {
        self.dilation = expand(self.rank, &vec![m; self.rank], 1);
        self.padding = self.same_padding();
        self
    }

    pub fn with_strides(mut self, stride: &[usize]) -> Self {
        self.stride = expand(self.rank, stride, 1);
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = expand(self.rank, padding, 0);
        self
    }

    /// Vertical column collapse: kernel and stride `(1, 1, depth)` with no padding.
    pub fn column(depth: usize) -> Self {
        Self::spatial(&[1, 1, depth], 1)
            .with_strides(&[1, 1, depth])
            .with_padding(&[0, 0, 0])
    }

    fn same_padding(&self) -> [usize; 3] {
        let mut p = [0; 3];
        for a in 0..self.rank {
            if self.kernel[a] % 2 == 1 {
                p[a] = self.dilation[a] * (self.kernel[a] - 1) / 2;
            }
        }
        p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn kernel(&self) -> &[usize] {
        &self.kernel[..self.rank]
    }

    pub fn stride(&self) -> &[usize] {
        &self.stride[..self.rank]
    }

    pub fn dilation(&self) -> &[usize] {
        &self.dilation[..self.rank]
    }

    pub fn padding(&self) -> &[usize] {
        &self.padding[..self.rank]
    }

    /// Number of kernel offsets.
    pub fn volume(&self) -> usize {
        self.kernel().iter().product()
    }

    /// Per-axis tap indices of offset `k` (row-major over axes).
    pub fn offset_index(&self, mut k: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for a in (0..self.rank).rev() {
            idx[a] = k % self.kernel[a];
            k /= self.kernel[a];
        }
        idx
    }

    /// Signed displacement of offset `k` from the kernel center, dilation applied.
    /// Only meaningful for odd kernels.
    pub fn centered_offset(&self, k: usize) -> [i64; 3] {
        let idx = self.offset_index(k);
        let mut d = [0i64; 3];
        for a in 0..self.rank {
            let c = (self.kernel[a] - 1) / 2;
            d[a] = self.dilation[a] as i64 * (idx[a] as i64 - c as i64);
        }
        d
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if rank != self.rank {
            return bad(format!("kernel rank {} applied to rank {rank} input", self.rank));
        }
        for a in 0..self.rank {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return bad(format!("axis {a}: kernel, stride and dilation must be >= 1"));
            }
        }
        if self.mode == ConvMode::Submanifold {
            if self.stride().iter().any(|&s| s != 1) {
                return bad("submanifold convolution requires stride 1".into());
            }
            if self.kernel().iter().any(|&k| k % 2 == 0) {
                return bad("submanifold convolution requires odd kernel sizes".into());
            }
        }
        Ok(())
    }

    /// Output extent per axis: `floor((in + 2p - m(K-1) - 1) / s) + 1`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if self.mode == ConvMode::Submanifold {
            return Ok(input.to_vec());
        }
        (0..self.rank)
            .map(|a| {
                let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                let padded = input[a] + 2 * self.padding[a];
                if padded < span {
                    Err(Error::InvalidSpec(format!(
                        "axis {a}: kernel span {span} exceeds padded extent {padded}"
                    )))
                } else {
                    Ok((padded - span) / self.stride[a] + 1)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_defaults() {
        let s = KernelSpec::submanifold(&[3, 3]).with_dilation(2);
        assert_eq!(s.padding(), &[2, 2]);
        let s = KernelSpec::submanifold(&[1, 9]);
        assert_eq!(s.padding(), &[0, 4]);
        assert_eq!(s.volume(), 9);
    }

    #[test]
    fn submanifold_validation() {
        let even = KernelSpec::submanifold(&[2, 2]);
        assert!(matches!(even.validate(2), Err(Error::InvalidSpec(_))));
        let strided = KernelSpec::submanifold(&[3, 3]).with_strides(&[2, 2]);
        assert!(matches!(strided.validate(2), Err(Error::InvalidSpec(_))));
        assert!(KernelSpec::submanifold(&[3, 3]).validate(3).is_err());
    }

    #[test]
    fn downsample_shapes() {
        let s = KernelSpec::spatial(&[3, 3], 2);
        let mut n = vec![1504, 1504];
        let mut seen = vec![];
        for _ in 0..5 {
            n = s.output_shape(&n).unwrap();
            seen.push(n[0]);
        }
        assert_eq!(seen, vec![752, 376, 188, 94, 47]);
        assert_eq!(s.output_shape(&[5, 7]).unwrap(), vec![3, 4]);
    }

    #[test]
    fn column_collapses_depth() {
        let s = KernelSpec::column(30);
        assert_eq!(s.volume(), 30);
        assert_eq!(s.output_shape(&[8, 8, 30]).unwrap(), vec![8, 8, 1]);
    }

    #[test]
    fn offsets_are_centered() {
        let s = KernelSpec::submanifold(&[3, 3]).with_dilation(2);
        assert_eq!(s.centered_offset(0), [-2, -2, 0]);
        assert_eq!(s.centered_offset(4), [0, 0, 0]);
        assert_eq!(s.centered_offset(5), [0, 2, 0]);
    }
}

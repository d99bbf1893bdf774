//! Floating point abstraction so every numeric component is generic over
//! precision. Tests and gradient checks run in `f64`; training defaults to
//! `f32`.

use num_traits::Float;

/// Element dtype tag, stored in checkpoints so a file records the precision
/// it was written with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element type for tensors, graphs, and the trainer.
///
/// Extends [`num_traits::Float`] with the few pieces the crate needs beyond
/// generic arithmetic: conversions through `f64` (sampling and constants are
/// specified in `f64`), little-endian byte (de)serialization for
/// checkpoints, and a matrix multiply kernel.
pub trait Real: Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn write_le<W: std::io::Write>(self, out: &mut W) -> std::io::Result<()>;
    fn read_le<R: std::io::Read>(r: &mut R) -> std::io::Result<Self>;

    /// C := alpha * A(m x k) * B(k x n) + beta * C, row-major strides given
    /// explicitly so transposed views cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }

    fn write_le<W: std::io::Write>(self, out: &mut W) -> std::io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le<R: std::io::Read>(r: &mut R) -> std::io::Result<Self> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn write_le<W: std::io::Write>(self, out: &mut W) -> std::io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le<R: std::io::Read>(r: &mut R) -> std::io::Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

//! Strided `C = A·B + beta·C` on raw slices.

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates, so a plain loop is used.
const SMALL: usize = 4096;

/// Matrix view: element (r, c) lives at `r * rs + c * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Row-major storage of a `rows x cols` matrix read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        View {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c[m x n] = a[m x k] · b[k x n] + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m * k * n < SMALL {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let ai = (i as isize * av.rs + p as isize * av.cs) as usize;
                    let bi = (p as isize * bv.rs + j as isize * bv.cs) as usize;
                    acc += a[ai] * b[bi];
                }
                let ci = i * n + j;
                c[ci] = if beta == 0.0 { acc } else { acc + beta * c[ci] };
            }
        }
        return;
    }
    // SAFETY: the views address only elements inside `a`, `b` and `c` for the
    // given dimensions; callers construct them from the slice shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

use super::real::Real;

/// Strided 2-D view over a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        View { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// Row-major storage read as its transpose when `transposed` is set.
    pub fn stored(rows: usize, cols: usize, transposed: bool) -> Self {
        let v = View::row_major(rows, cols);
        if transposed {
            v.t()
        } else {
            v
        }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize + 1
    }
}

/// `c = alpha * a · b + beta * c`.
pub(crate) fn gemm<T: Real>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.span() <= a.len() && bv.span() <= b.len() && cv.span() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: spans checked above; `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        )
    }
}

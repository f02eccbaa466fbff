use super::config::PatchGrid;
use crate::tensor::{Real, Tensor};

/// Fixed 2-D sine-cosine table of shape `[N + 1, width]`; row 0 (class token) is zero.
///
/// The first half of each row encodes the patch column, the second half the
/// patch row, each as `[sin(pos·ω), cos(pos·ω)]` with `ω_i = 10000^(-i / (width/4))`.
pub fn sincos_2d<T: Real>(width: usize, grid: PatchGrid) -> Tensor<T> {
    assert!(width % 4 == 0, "width must be divisible by 4");
    let quarter = width / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = vec![T::zero(); width];
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            for pos in [gx as f64, gy as f64] {
                out.extend(omega.iter().map(|w| T::of((pos * w).sin())));
                out.extend(omega.iter().map(|w| T::of((pos * w).cos())));
            }
        }
    }
    Tensor::new(&[grid.n() + 1, width], out).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let t = sincos_2d::<f64>(8, grid);
        assert_eq!(t.shape(), &[17, 8]);
        assert!(t.row(0).iter().all(|&v| v == 0.0));
        // patch 0 sits at (0, 0): sin terms 0, cos terms 1
        assert_eq!(t.row(1), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // patch 1 is column 1: first half uses pos 1
        assert!((t.row(2)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((t.row(2)[4]).abs() < 1e-15);
        // distinct rows
        for a in 1..17 {
            for b in (a + 1)..17 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }
}

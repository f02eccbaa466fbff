use super::config::PatchGrid;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Splits an `[H, W, C]` image into `[N, P·P·C]`; row `k` is patch `k` of the
/// row-major grid, flattened row-major.
pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Config(format!("patchify expects an [H, W, C] image, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let grid = PatchGrid::new(h, w, patch_size)?;
    let p = patch_size;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(&[grid.n(), p * p * c], out)?)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Tensor<T>> {
    let s = patches.shape();
    let p = grid.patch_size;
    if s.len() != 2 || s[0] != grid.n() || s[1] % (p * p) != 0 {
        return Err(Error::Config(format!(
            "unpatchify: {s:?} does not match a {}x{} grid of {p}x{p} patches",
            grid.grid_h, grid.grid_w
        )));
    }
    let c = s[1] / (p * p);
    let (h, w) = (grid.height(), grid.width());
    let mut out = vec![T::zero(); h * w * c];
    let src = patches.data();
    let mut k = 0;
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * c;
                out[start..start + p * c].copy_from_slice(&src[k..k + p * c]);
                k += p * c;
            }
        }
    }
    Ok(Tensor::new(&[h, w, c], out)?)
}

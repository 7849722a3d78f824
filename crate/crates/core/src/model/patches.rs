//! Non-overlapping T-F patch unfolding for channel attention.
//!
//! For `x` of shape `(B, C, T, F)` and patch `(PT, PF)`, element
//! `(b, c, t, f)` goes to `y[p, c, o]` with
//!
//! ```text
//! p = b·(T/PT)·(F/PF) + (t/PT)·(F/PF) + f/PF
//! o = (t mod PT)·PF + f mod PF
//! ```
//!
//! i.e. patches are scanned row-major over the tile grid and each tile is
//! flattened row-major.

use seld_autodiff::{Float, Tensor, TensorError, Var};

use crate::error::{Result, SeldError};

fn grid(shape: &[usize], pt: usize, pf: usize) -> Result<[usize; 6]> {
    let &[b, c, t, f] = shape else {
        return Err(TensorError::InvalidShape {
            op: "unfold_patches",
            detail: format!("expected (B, C, T, F), got {shape:?}"),
        }
        .into());
    };
    if pt == 0 || pf == 0 || t % pt != 0 || f % pf != 0 {
        return Err(SeldError::Config(format!("patch ({pt}, {pf}) does not tile ({t}, {f})")));
    }
    Ok([b, c, t / pt, pt, f / pf, pf])
}

/// Patch and offset of element `(b, t, f)`.
pub fn patch_index(b: usize, t: usize, f: usize, dims: (usize, usize), patch: (usize, usize)) -> (usize, usize) {
    let (nt, nf) = (dims.0 / patch.0, dims.1 / patch.1);
    (b * nt * nf + (t / patch.0) * nf + f / patch.1, (t % patch.0) * patch.1 + f % patch.1)
}

/// `(B, C, T, F)` → `(B·T·F/(PT·PF), C, PT·PF)`.
pub fn unfold_patches<'g, T: Float>(x: Var<'g, T>, pt: usize, pf: usize) -> Result<Var<'g, T>> {
    let [b, c, nt, pt, nf, pf] = grid(&x.shape(), pt, pf)?;
    Ok(x.reshape(&[b, c, nt, pt, nf, pf])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b * nt * nf, c, pt * pf])?)
}

/// Inverse of [`unfold_patches`].
pub fn fold_patches<'g, T: Float>(y: Var<'g, T>, shape: [usize; 4], pt: usize, pf: usize) -> Result<Var<'g, T>> {
    let [b, c, nt, pt, nf, pf] = grid(&shape, pt, pf)?;
    Ok(y.reshape(&[b, nt, nf, c, pt, pf])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&shape)?)
}

pub fn unfold_tensor<T: Float>(x: &Tensor<T>, pt: usize, pf: usize) -> Result<Tensor<T>> {
    let [b, c, nt, pt, nf, pf] = grid(x.shape(), pt, pf)?;
    Ok(x.clone()
        .reshape(vec![b, c, nt, pt, nf, pf])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(vec![b * nt * nf, c, pt * pf])?)
}

pub fn fold_tensor<T: Float>(y: &Tensor<T>, shape: [usize; 4], pt: usize, pf: usize) -> Result<Tensor<T>> {
    let [b, c, nt, pt, nf, pf] = grid(&shape, pt, pf)?;
    if y.shape() != [b * nt * nf, c, pt * pf] {
        return Err(TensorError::InvalidShape {
            op: "fold_patches",
            detail: format!("{:?} is not the unfolded form of {shape:?}", y.shape()),
        }
        .into());
    }
    Ok(y.clone()
        .reshape(vec![b, nt, nf, c, pt, pf])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(shape.to_vec())?)
}

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// Splits an `H x W x C` image into row-major square patches, each flattened
/// as `(row, col, channel)`. Output is `[(H/p)·(W/p), p²·C]`.
pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(image)?;
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let mut out = Vec::with_capacity(image.len());
    patchify_into(image.data(), h, w, c, p, &mut out);
    Tensor::new(vec![(h / p) * (w / p), p * p * c], out)
}

pub(crate) fn patchify_into<T: Copy>(
    img: &[T],
    h: usize,
    w: usize,
    c: usize,
    p: usize,
    out: &mut Vec<T>,
) {
    for gy in 0..h / p {
        for gx in 0..w / p {
            for dy in 0..p {
                let row = (gy * p + dy) * w + gx * p;
                out.extend_from_slice(&img[row * c..(row + p) * c]);
            }
        }
    }
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Result<Tensor<T>> {
    let p = patch_size;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::config("image not divisible by patch size"));
    }
    let expect = [(height / p) * (width / p), p * p * channels];
    if patches.shape() != expect {
        return Err(Error::shape("unpatchify", patches.shape(), &expect));
    }
    let mut img = vec![T::zero(); height * width * channels];
    let gw = width / p;
    for (idx, patch) in patches.data().chunks(p * p * channels).enumerate() {
        let (gy, gx) = (idx / gw, idx % gw);
        for dy in 0..p {
            let row = (gy * p + dy) * width + gx * p;
            img[row * channels..(row + p) * channels]
                .copy_from_slice(&patch[dy * p * channels..(dy + 1) * p * channels]);
        }
    }
    Tensor::new(vec![height, width, channels], img)
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        _ => Err(Error::config(format!(
            "expected an HxWxC image, got shape {:?}",
            image.shape()
        ))),
    }
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Bilinear resize of a square grid of embeddings `[g², D]` to `[new_grid², D]`.
/// Sample positions use half-pixel centres with edge clamping.
pub fn resize_posemb_grid<T: Real>(grid: &Tensor<T>, new_grid: usize) -> Result<Tensor<T>> {
    let old = square_side(grid.rows())
        .ok_or_else(|| Error::config(format!("{} embeddings do not form a square grid", grid.rows())))?;
    if new_grid == 0 {
        return Err(Error::config("target grid must be non-empty"));
    }
    if old == new_grid {
        return Ok(grid.clone());
    }
    let d = grid.cols();
    let scale = old as f64 / new_grid as f64;
    let coord = |i: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(old - 1);
        (lo, hi, T::lit(src - lo as f64))
    };
    let mut out = Tensor::zeros(&[new_grid * new_grid, d]);
    for y in 0..new_grid {
        let (y0, y1, fy) = coord(y);
        for x in 0..new_grid {
            let (x0, x1, fx) = coord(x);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let (r00, r01) = (grid.row(y0 * old + x0), grid.row(y0 * old + x1));
            let (r10, r11) = (grid.row(y1 * old + x0), grid.row(y1 * old + x1));
            let dst = out.row_mut(y * new_grid + x);
            for j in 0..d {
                dst[j] = w00 * r00[j] + w01 * r01[j] + w10 * r10[j] + w11 * r11[j];
            }
        }
    }
    Ok(out)
}

/// Resizes positional embeddings to a new patch grid. With `has_cls`, row 0 is
/// the cls embedding and is copied unchanged.
pub fn resize_posemb<T: Real>(
    posemb: &Tensor<T>,
    has_cls: bool,
    new_grid: usize,
) -> Result<Tensor<T>> {
    let lead = usize::from(has_cls);
    if posemb.shape().len() != 2 || posemb.rows() < lead {
        return Err(Error::config("positional embedding must be 2-D"));
    }
    let grid = posemb.slice_rows(lead, posemb.rows() - lead);
    let resized = resize_posemb_grid(&grid, new_grid)?;
    if !has_cls {
        return Ok(resized);
    }
    let mut data = posemb.row(0).to_vec();
    data.extend_from_slice(resized.data());
    Tensor::new(vec![resized.rows() + 1, posemb.cols()], data)
}

/// Fixed 2-D sine-cosine table for a `grid x grid` layout, `grid² x dim`.
/// A quarter of the channels each hold sin/cos of the row and column index at
/// geometrically spaced frequencies. `dim` must be a multiple of 4.
pub fn posemb_sincos_2d<T: Real>(grid: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!("sin-cos posemb needs dim divisible by 4, got {dim}")));
    }
    let q = dim / 4;
    let omega: Vec<f64> = (0..q).map(|i| 1.0 / 10000f64.powf(i as f64 / q as f64)).collect();
    Ok(Tensor::from_fn(&[grid * grid, dim], |idx| {
        let (pos, ch) = (idx / dim, idx % dim);
        let (y, x) = ((pos / grid) as f64, (pos % grid) as f64);
        let (part, i) = (ch / q, ch % q);
        T::lit(match part {
            0 => (y * omega[i]).sin(),
            1 => (y * omega[i]).cos(),
            2 => (x * omega[i]).sin(),
            _ => (x * omega[i]).cos(),
        })
    }))
}

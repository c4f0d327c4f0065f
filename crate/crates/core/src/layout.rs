//! Index maps for [`Graph::gather`](crate::autodiff::Graph::gather).
//!
//! Feature maps inside the denoiser are token-major `[h * w, c]`; public
//! image and latent tensors are channel-major `[c, h, w]`.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autodiff::GATHER_ZERO;

/// `[c, h, w]` -> `[h * w, c]`.
pub fn chw_to_tokens(c: usize, h: usize, w: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            idx.push((ch * h * w + p) as u32);
        }
    }
    idx.into()
}

/// `[h * w, c]` -> `[c, h, w]`.
pub fn tokens_to_chw(c: usize, h: usize, w: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            idx.push((p * c + ch) as u32);
        }
    }
    idx.into()
}

/// `[n, m]` -> `[m, n]`.
pub fn transpose(n: usize, m: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * m);
    for j in 0..m {
        for i in 0..n {
            idx.push((i * m + j) as u32);
        }
    }
    idx.into()
}

/// 3x3 zero-padded im2col on a token-major map: `[h * w, c]` -> `[h * w, 9 c]`,
/// column order `(dy, dx, channel)`.
pub fn im2col3x3(h: usize, w: usize, c: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                    for ch in 0..c {
                        idx.push(if inside {
                            ((sy as usize * w + sx as usize) * c + ch) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

/// Token-major `[h * w, c]` -> `[(h / f) * (w / f), f * f * c]`, patch order
/// `(py, px, channel)`.
pub fn space_to_depth(h: usize, w: usize, c: usize, f: usize) -> Rc<[u32]> {
    let (ho, wo) = (h / f, w / f);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..ho {
        for x in 0..wo {
            for py in 0..f {
                for px in 0..f {
                    for ch in 0..c {
                        idx.push((((y * f + py) * w + x * f + px) * c + ch) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Channel-major `[c, h, w]` image -> `[(h / f) * (w / f), c * f * f]` patches,
/// patch order `(channel, py, px)`.
pub fn chw_patches(c: usize, h: usize, w: usize, f: usize) -> Rc<[u32]> {
    let (ho, wo) = (h / f, w / f);
    let mut idx = Vec::with_capacity(c * h * w);
    for y in 0..ho {
        for x in 0..wo {
            for ch in 0..c {
                for py in 0..f {
                    for px in 0..f {
                        idx.push((ch * h * w + (y * f + py) * w + x * f + px) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Nearest-neighbour upsampling of a token-major map by `f`.
pub fn upsample_nearest(h: usize, w: usize, c: usize, f: usize) -> Rc<[u32]> {
    let (ho, wo) = (h * f, w * f);
    let mut idx = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for x in 0..wo {
            for ch in 0..c {
                idx.push((((y / f) * w + x / f) * c + ch) as u32);
            }
        }
    }
    idx.into()
}

/// Repeats a `[h * w]` single-channel map into `[c, h, w]`.
pub fn broadcast_channels(c: usize, hw: usize) -> Rc<[u32]> {
    (0..c * hw).map(|i| (i % hw) as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_roundtrip() {
        let a = chw_to_tokens(3, 2, 4);
        let b = tokens_to_chw(3, 2, 4);
        for i in 0..24 {
            assert_eq!(a[b[i] as usize] as usize, i);
        }
    }

    #[test]
    fn im2col_center_column_is_identity() {
        let (h, w, c) = (4, 5, 2);
        let idx = im2col3x3(h, w, c);
        for p in 0..h * w {
            for ch in 0..c {
                assert_eq!(idx[p * 9 * c + 4 * c + ch] as usize, p * c + ch);
            }
        }
        // top-left pixel has padding above and to the left
        assert_eq!(idx[0], GATHER_ZERO);
    }

    #[test]
    fn space_to_depth_is_a_permutation() {
        let mut idx: Vec<u32> = space_to_depth(4, 4, 3, 2).to_vec();
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| v as usize == i));
    }
}

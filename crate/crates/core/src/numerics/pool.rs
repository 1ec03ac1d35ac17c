use super::conv::{window_geometry, Padding};
use super::tensor::{IndexTensor, Tensor};
use crate::error::{Error, Result};

pub(crate) struct PoolGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool_geometry(
    input_shape: &[usize],
    ksize: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(PoolGeometry, usize, usize)> {
    let &[n, h, w, c] = input_shape else {
        return Err(Error::Geometry {
            op: "maxpool",
            msg: format!("input must be rank 4 [N,H,W,C], got {input_shape:?}"),
        });
    };
    let (oh, pt) = window_geometry("maxpool", h, ksize.0, stride.0, padding)?;
    let (ow, pl) = window_geometry("maxpool", w, ksize.1, stride.1, padding)?;
    Ok((PoolGeometry { n, h, w, c, oh, ow }, pt, pl))
}

/// Max pooling over `x[N,H,W,C]` returning values and winning flat offsets.
///
/// Offsets index the whole of `x` (batch included). Padding never wins, and
/// ties resolve to the smallest offset.
pub fn maxpool_argmax(
    x: &Tensor,
    ksize: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor, IndexTensor)> {
    let (g, pt, pl) = pool_geometry(x.shape(), ksize, stride, padding)?;
    let xd = x.data();
    let out_len = g.n * g.oh * g.ow * g.c;
    let mut values = Vec::with_capacity(out_len);
    let mut indices = Vec::with_capacity(out_len);
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                for c in 0..g.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for di in 0..ksize.0 {
                        let Some(ii) = (oi * stride.0 + di).checked_sub(pt).filter(|&i| i < g.h) else {
                            continue;
                        };
                        for dj in 0..ksize.1 {
                            let Some(jj) = (oj * stride.1 + dj).checked_sub(pl).filter(|&j| j < g.w) else {
                                continue;
                            };
                            let idx = ((n * g.h + ii) * g.w + jj) * g.c + c;
                            // Row-major window scan visits offsets in increasing order,
                            // so a strict comparison keeps the smallest offset on ties.
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    if best_idx == usize::MAX {
                        return Err(Error::Geometry {
                            op: "maxpool",
                            msg: format!("window at output ({n},{oi},{oj}) covers only padding"),
                        });
                    }
                    values.push(best);
                    indices.push(best_idx);
                }
            }
        }
    }
    let shape = vec![g.n, g.oh, g.ow, g.c];
    Ok((
        Tensor::from_parts(shape.clone(), values),
        IndexTensor::new(shape, indices)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_max() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (v, i) = maxpool_argmax(&x, (2, 2), (2, 2), Padding::Valid).unwrap();
        assert_eq!(v.data(), &[4.0]);
        assert_eq!(i.data(), &[x.offset(&[0, 1, 1, 0]).unwrap()]);
    }

    #[test]
    fn ties_pick_smallest_offset() {
        let x = Tensor::filled(&[2, 4, 4, 3], 1.5).unwrap();
        let (_, idx) = maxpool_argmax(&x, (2, 2), (2, 2), Padding::Valid).unwrap();
        for n in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..3 {
                        let o = ((n * 2 + i) * 2 + j) * 3 + c;
                        assert_eq!(idx.data()[o], x.offset(&[n, 2 * i, 2 * j, c]).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn offsets_follow_flattened_window_formula() {
        // For an (H,W,C) = (4,4,2) map pooled 2x2/2, the window of output (i,j,c)
        // (0-based) covers flat offsets ((2i+a)*W + 2j+b)*C + c for a,b in {0,1}.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w, c) = (4usize, 4usize, 2usize);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![1, h, w, c], data.clone()).unwrap();
        let (vals, idx) = maxpool_argmax(&x, (2, 2), (2, 2), Padding::Valid).unwrap();
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for ch in 0..c {
                    let window: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| ((2 * i + a) * w + 2 * j + b) * c + ch)
                        .collect();
                    let best = *window
                        .iter()
                        .max_by(|&&p, &&q| data[p].total_cmp(&data[q]))
                        .unwrap();
                    let out = (i * (w / 2) + j) * c + ch;
                    assert_eq!(idx.data()[out], best);
                    assert_eq!(vals.data()[out], data[best]);
                }
            }
        }
    }

    #[test]
    fn padding_never_wins() {
        let x = Tensor::filled(&[1, 3, 3, 1], -5.0).unwrap();
        let (v, idx) = maxpool_argmax(&x, (2, 2), (2, 2), Padding::Same).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2, 1]);
        assert!(v.data().iter().all(|&t| t == -5.0));
        assert!(idx.data().iter().all(|&i| i < 9));
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::zeros(&[1, 2, 2, 1]).unwrap();
        assert!(maxpool_argmax(&x, (3, 3), (1, 1), Padding::Valid).is_err());
    }
}

//! Non-overlapping max pooling and global average pooling over `[C, T, H, W]`.

use super::scalar::Scalar;

/// Output dims of a max pool whose kernel equals its stride (floor mode).
pub fn pooled_dims(dims: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
    [dims[0] / kernel[0], dims[1] / kernel[1], dims[2] / kernel[2]]
}

/// Returns the pooled map and, per output element, the flat input index of
/// the winning element (first maximum in scan order).
pub fn max_pool_forward<S: Scalar>(
    input: &[S],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
) -> (Vec<S>, Vec<u32>) {
    let [it, ih, iw] = dims;
    let [ot, oh, ow] = pooled_dims(dims, kernel);
    let [kt, kh, kw] = kernel;
    let n_out = channels * ot * oh * ow;
    let mut out = Vec::with_capacity(n_out);
    let mut idx = Vec::with_capacity(n_out);
    for c in 0..channels {
        let plane = c * it * ih * iw;
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_i = 0usize;
                    for dt in 0..kt {
                        for dy in 0..kh {
                            let line = plane + ((zt * kt + dt) * ih + zy * kh + dy) * iw + zx * kw;
                            for dx in 0..kw {
                                let v = input[line + dx];
                                if v > best {
                                    best = v;
                                    best_i = line + dx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (out, idx)
}

pub fn max_pool_backward<S: Scalar>(grad_out: &[S], argmax: &[u32], input_len: usize) -> Vec<S> {
    let mut g = vec![S::zero(); input_len];
    for (&go, &i) in grad_out.iter().zip(argmax) {
        g[i as usize] += go;
    }
    g
}

/// Mean over all positions of each channel.
pub fn global_avg_pool<S: Scalar>(input: &[S], channels: usize) -> Vec<S> {
    let per = input.len() / channels;
    let inv = S::one() / S::of(per as f64);
    input
        .chunks_exact(per)
        .map(|ch| ch.iter().copied().sum::<S>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<S: Scalar>(grad: &[S], positions: usize) -> Vec<S> {
    let inv = S::one() / S::of(positions as f64);
    grad.iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, positions))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_window_maxima() {
        // One channel, 2x2x4 input pooled by (1,2,2) -> 2x1x2.
        let input: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let (out, idx) = max_pool_forward(&input, 1, [2, 2, 4], [1, 2, 2]);
        assert_eq!(out.len(), 4);
        for (o, &i) in out.iter().zip(&idx) {
            assert_eq!(*o, input[i as usize]);
        }
        // Window (t=0, x in 0..2) covers indices 0,1,4,5 -> values 0,7,12,3.
        assert_eq!(out[0], 12.0);
        let g = max_pool_backward(&[1.0, 2.0, 3.0, 4.0], &idx, 16);
        assert_eq!(g.iter().sum::<f64>(), 10.0);
        assert_eq!(g[4], 1.0);
    }

    #[test]
    fn odd_dims_floor() {
        assert_eq!(pooled_dims([5, 7, 3], [2, 2, 2]), [2, 3, 1]);
    }

    #[test]
    fn gap_and_its_adjoint() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 10.0, 22.0];
        assert_eq!(global_avg_pool(&x, 2), vec![2.0, 12.0]);
        let g = global_avg_pool_backward(&[3.0f64, 6.0], 3);
        assert_eq!(g, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}

//! Binary thinning to 1-pixel-wide, topology-preserving skeletons
//! (Zhang-Suen two-subiteration scheme, iterated to convergence).

use ndarray::{Array2, ArrayView2};

/// Skeletonizes a binary plane. The result is a fixed point, so thinning it
/// again changes nothing.
pub fn thin(edges: ArrayView2<'_, u8>) -> Array2<u8> {
    let (h, w) = edges.dim();
    let mut img = edges.mapv(|v| u8::from(v != 0));
    let mut doomed: Vec<(usize, usize)> = Vec::new();
    let at = |img: &Array2<u8>, i: isize, j: isize| -> u8 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0
        } else {
            img[[i as usize, j as usize]]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for i in 0..h {
                for j in 0..w {
                    if img[[i, j]] == 0 {
                        continue;
                    }
                    let (ii, jj) = (i as isize, j as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, ii - 1, jj),
                        at(&img, ii - 1, jj + 1),
                        at(&img, ii, jj + 1),
                        at(&img, ii + 1, jj + 1),
                        at(&img, ii + 1, jj),
                        at(&img, ii + 1, jj - 1),
                        at(&img, ii, jj - 1),
                        at(&img, ii - 1, jj - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&n| p[n] == 0 && p[(n + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let keep = if pass == 0 {
                        n * e * s != 0 || e * s * wst != 0
                    } else {
                        n * e * wst != 0 || n * s * wst != 0
                    };
                    if !keep {
                        doomed.push((i, j));
                    }
                }
            }
            for &q in &doomed {
                img[q] = 0;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(a: &Array2<u8>) -> usize {
        a.iter().filter(|v| **v == 1).count()
    }

    #[test]
    fn thick_line_thins_to_center() {
        let mut a = Array2::<u8>::zeros((9, 20));
        for i in 3..6 {
            for j in 2..18 {
                a[[i, j]] = 1;
            }
        }
        let t = thin(a.view());
        for ((i, j), v) in t.indexed_iter() {
            if *v == 1 {
                assert_eq!(i, 4, "pixel ({i},{j}) off the center row");
            }
        }
        // Interior of the bar survives on the center row.
        assert!((4..16).all(|j| t[[4, j]] == 1));
    }

    #[test]
    fn thin_inputs_are_fixed_points() {
        let mut a = Array2::<u8>::zeros((12, 12));
        for k in 1..11 {
            a[[k, k]] = 1;
            a[[2, k]] = 1;
        }
        let t = thin(a.view());
        assert_eq!(thin(t.view()), t);
        let mut line = Array2::<u8>::zeros((5, 10));
        for j in 1..9 {
            line[[2, j]] = 1;
        }
        assert_eq!(thin(line.view()), line);
        assert_eq!(count(&thin(Array2::<u8>::zeros((4, 4)).view())), 0);
    }
}

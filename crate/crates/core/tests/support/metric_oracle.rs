//! Brute-force DSC, Hausdorff and mean surface distance over all boundary pairs.

#![allow(dead_code)]

/// Face-connected boundary in scan order, computed from first principles.
pub fn brute_boundary(shape: &[usize], labels: &[u8], spacing: &[f64], class: u8) -> Vec<[f64; 3]> {
    let mut dims = [1usize; 3];
    dims[..shape.len()].copy_from_slice(shape);
    let at = |i: usize, j: usize, k: usize| labels[(i * dims[1] + j) * dims[2] + k];
    let mut out = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if at(i, j, k) != class {
                    continue;
                }
                let idx = [i, j, k];
                let mut edge = false;
                for a in 0..shape.len() {
                    for delta in [-1isize, 1] {
                        let mut n = idx;
                        let moved = n[a] as isize + delta;
                        if moved < 0 || moved >= dims[a] as isize {
                            edge = true;
                            continue;
                        }
                        n[a] = moved as usize;
                        if at(n[0], n[1], n[2]) != class {
                            edge = true;
                        }
                    }
                }
                if edge {
                    let mut p = [0.0; 3];
                    for a in 0..shape.len() {
                        p[a] = idx[a] as f64 * spacing[a];
                    }
                    out.push(p);
                }
            }
        }
    }
    out
}

pub fn all_pairs_directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let (a, b, c) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                    a * a + b * b + c * c
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

pub fn brute_hd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    all_pairs_directed(a, b).into_iter().chain(all_pairs_directed(b, a)).fold(0.0, f64::max)
}

pub fn brute_masd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(all_pairs_directed(a, b)) + mean(all_pairs_directed(b, a)))
}

pub fn brute_dsc(a: &[u8], b: &[u8], class: u8) -> f64 {
    let na = a.iter().filter(|&&x| x == class).count();
    let nb = b.iter().filter(|&&x| x == class).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x == class && y == class).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

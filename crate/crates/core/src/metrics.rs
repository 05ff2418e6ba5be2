//! Condition-agreement metrics.

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    if a == 0 {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Mean IoU over the classes that occur in either map.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    check_pair("miou", pred.len(), gt.len())?;
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        for c in [p, g] {
            if c as usize >= classes {
                return Err(Error::ClassOutOfRange {
                    index: c as usize,
                    classes,
                });
            }
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn f1_from_counts(tp: f64, pred_pos: f64, gt_pos: f64) -> f64 {
    if pred_pos == 0.0 && gt_pos == 0.0 {
        return 1.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred_pos;
    let r = tp / gt_pos;
    2.0 * p * r / (p + r)
}

/// Pixel-exact F1 of edge maps binarized at 0.5.
pub fn f1_edge(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("f1_edge", pred.len(), gt.len())?;
    let (mut tp, mut pp, mut gp) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        tp += (p && g) as usize;
        pp += p as usize;
        gp += g as usize;
    }
    Ok(f1_from_counts(tp as f64, pp as f64, gp as f64))
}

/// F1 where an edge pixel counts as matched if the other map has an edge
/// within one pixel (8-neighbourhood).
pub fn f1_edge_tolerant(pred: &[f64], gt: &[f64], height: usize, width: usize) -> Result<f64> {
    check_pair("f1_edge_tolerant", pred.len(), gt.len())?;
    if pred.len() != height * width {
        return Err(Error::shape("f1_edge_tolerant", &[pred.len()], &[height, width]));
    }
    let near = |map: &[f64], y: usize, x: usize| {
        (y.saturating_sub(1)..(y + 2).min(height))
            .any(|yy| (x.saturating_sub(1)..(x + 2).min(width)).any(|xx| map[yy * width + xx] >= 0.5))
    };
    let (mut pp, mut gp, mut p_hit, mut g_hit) = (0usize, 0usize, 0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if pred[i] >= 0.5 {
                pp += 1;
                p_hit += near(gt, y, x) as usize;
            }
            if gt[i] >= 0.5 {
                gp += 1;
                g_hit += near(pred, y, x) as usize;
            }
        }
    }
    if pp == 0 && gp == 0 {
        return Ok(1.0);
    }
    if p_hit == 0 || g_hit == 0 {
        return Ok(0.0);
    }
    let p = p_hit as f64 / pp as f64;
    let r = g_hit as f64 / gp as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean SSIM over all 8×8 windows at stride 1, data range 1.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    check_pair("ssim", a.len(), b.len())?;
    if a.len() != height * width {
        return Err(Error::shape("ssim", &[a.len()], &[height, width]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::shape("ssim", &[height, width], &[SSIM_WINDOW, SSIM_WINDOW]));
    }
    // Summed-area tables of a, b, a², b², ab.
    let stride = width + 1;
    let mut tables = vec![vec![0.0; (height + 1) * stride]; 5];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (a[y * width + x], b[y * width + x]);
            for (t, val) in tables.iter_mut().zip([u, v, u * u, v * v, u * v]) {
                t[(y + 1) * stride + x + 1] = val + t[y * stride + x + 1] + t[(y + 1) * stride + x] - t[y * stride + x];
            }
        }
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let (wy, wx) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    for y in 0..wy {
        for x in 0..wx {
            let s = |t: &[f64]| {
                let (y1, x1) = (y + SSIM_WINDOW, x + SSIM_WINDOW);
                (t[y1 * stride + x1] - t[y * stride + x1] - t[y1 * stride + x] + t[y * stride + x]) / n
            };
            let (ma, mb) = (s(&tables[0]), s(&tables[1]));
            let va = s(&tables[2]) - ma * ma;
            let vb = s(&tables[3]) - mb * mb;
            let cov = s(&tables[4]) - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (wy * wx) as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("rmse", a.len(), b.len())?;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_extremes() {
        let a = [0u8, 1, 2, 3, 3, 2];
        assert_eq!(miou(&a, &a, 4).unwrap(), 1.0);
        assert_eq!(miou(&[0; 16], &[1; 16], 2).unwrap(), 0.0);
        assert!(miou(&[], &[], 2).is_err());
        assert!(miou(&[0, 5], &[0, 1], 4).is_err());
    }

    #[test]
    fn f1_closed_forms() {
        let gt: Vec<f64> = (0..20).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(f1_edge(&gt, &gt).unwrap(), 1.0);
        let ones = vec![1.0; 20];
        let k = 5.0;
        assert!((f1_edge(&ones, &gt).unwrap() - 2.0 * k / (20.0 + k)).abs() < 1e-12);
        assert_eq!(f1_edge(&[0.0; 4], &[0.2; 4]).unwrap(), 1.0);
    }

    #[test]
    fn tolerant_f1_accepts_one_pixel_shift() {
        let mut a = vec![0.0; 25];
        let mut b = vec![0.0; 25];
        for y in 0..5 {
            a[y * 5 + 1] = 1.0;
            b[y * 5 + 2] = 1.0;
        }
        assert_eq!(f1_edge(&a, &b).unwrap(), 0.0);
        assert_eq!(f1_edge_tolerant(&a, &b, 5, 5).unwrap(), 1.0);
    }

    #[test]
    fn ssim_cases() {
        let a: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        assert!((ssim(&a, &a, 10, 10).unwrap() - 1.0).abs() < 1e-12);
        let flat = vec![0.3; 64];
        assert!((ssim(&flat, &flat, 8, 8).unwrap() - 1.0).abs() < 1e-12);
        let board: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inv: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&board, &inv, 16, 16).unwrap() < 0.1);
        assert!(ssim(&[0.0; 49], &[0.0; 49], 7, 7).is_err());
    }

    #[test]
    fn rmse_cases() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        assert!((rmse(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert!(rmse(&a, &[0.0]).is_err());
    }
}

//! Image similarity metrics on `[0, 1]` grayscale pixel buffers and the
//! per-split report built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// `(0.01 L)^2` and `(0.03 L)^2` for dynamic range `L = 1`.
pub const SSIM_C1: f64 = 0.0001;
pub const SSIM_C2: f64 = 0.0009;

fn check(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn l1(a: &[f32], b: &[f32]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum::<f64>() / a.len() as f64)
}

fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// `10 log10(1 / MSE)`, at most `cap`.
pub fn psnr(a: &[f32], b: &[f32], cap: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / m).log10()).min(cap))
}

/// Normalised Gaussian taps of odd length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let w: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window length for a `size x size` image: 11, or the largest odd length that fits.
pub fn ssim_window(size: usize) -> usize {
    let n = SSIM_WINDOW.min(size);
    if n.is_multiple_of(2) {
        n - 1
    } else {
        n
    }
}

// Valid-mode separable filtering of a `size x size` image.
fn filter(img: &[f64], size: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let out = size - n + 1;
    let mut rows = vec![0.0; size * out];
    for r in 0..size {
        for c in 0..out {
            rows[r * out + c] = (0..n).map(|t| taps[t] * img[r * size + c + t]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for r in 0..out {
        for c in 0..out {
            res[r * out + c] = (0..n).map(|t| taps[t] * rows[(r + t) * out + c]).sum();
        }
    }
    res
}

/// Mean SSIM over all valid Gaussian windows of two `size x size` images.
pub fn ssim(a: &[f32], b: &[f32], size: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != size * size || size == 0 {
        return Err(Error::shape(size * size, a.len()));
    }
    let taps = gaussian_window(ssim_window(size), SSIM_SIGMA);
    let x: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let y: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter(&x, size, &taps);
    let my = filter(&y, size, &taps);
    let mxx = filter(&prod(&x, &x), size, &taps);
    let myy = filter(&prod(&y, &y), size, &taps);
    let mxy = filter(&prod(&x, &y), size, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Scores of one generated glyph against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub split: String,
    pub font_id: String,
    pub codepoint: u32,
    pub l1: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

impl PairRecord {
    pub fn score(split: &str, font_id: &str, codepoint: u32, generated: &[f32], truth: &[f32], size: usize) -> Result<Self> {
        Ok(Self {
            split: split.to_string(),
            font_id: font_id.to_string(),
            codepoint,
            l1: l1(generated, truth)?,
            rmse: rmse(generated, truth)?,
            psnr: psnr(generated, truth, PSNR_CAP)?,
            ssim: ssim(generated, truth, size)?,
            lpips: None,
        })
    }
}

/// Unweighted means over one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub l1: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<PairRecord>,
    pub summaries: Vec<SplitSummary>,
}

impl MetricsReport {
    /// Summaries follow the order in which splits first appear. LPIPS is
    /// averaged only when every record of the split has it.
    pub fn new(records: Vec<PairRecord>) -> Self {
        let mut splits: Vec<&str> = Vec::new();
        for r in &records {
            if !splits.contains(&r.split.as_str()) {
                splits.push(&r.split);
            }
        }
        let summaries = splits
            .iter()
            .map(|&s| {
                let rs: Vec<&PairRecord> = records.iter().filter(|r| r.split == s).collect();
                let n = rs.len() as f64;
                let mean = |f: fn(&PairRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                let lpips = rs.iter().map(|r| r.lpips).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
                SplitSummary {
                    split: s.to_string(),
                    count: rs.len(),
                    l1: mean(|r| r.l1),
                    rmse: mean(|r| r.rmse),
                    psnr: mean(|r| r.psnr),
                    ssim: mean(|r| r.ssim),
                    lpips,
                }
            })
            .collect();
        Self { records, summaries }
    }

    pub fn merge(reports: impl IntoIterator<Item = MetricsReport>) -> Self {
        Self::new(reports.into_iter().flat_map(|r| r.records).collect())
    }

    fn has_lpips(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.lpips.is_some())
    }

    /// Tab-separated summary table followed by the per-pair table.
    /// Metric columns are L1, RMSE, PSNR, SSIM and, when available, LPIPS.
    pub fn to_tsv(&self) -> String {
        let lp = self.has_lpips();
        let cols = if lp { "L1\tRMSE\tPSNR\tSSIM\tLPIPS" } else { "L1\tRMSE\tPSNR\tSSIM" };
        let mut s = format!("split\tcount\t{cols}\n");
        let tail = |v: Option<f64>| if lp { format!("\t{:.6}", v.unwrap_or(f64::NAN)) } else { String::new() };
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.6}{}",
                m.split,
                m.count,
                m.l1,
                m.rmse,
                m.psnr,
                m.ssim,
                tail(m.lpips)
            );
        }
        let _ = write!(s, "\nsplit\tfont\tcodepoint\t{cols}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{:04X}\t{:.6}\t{:.6}\t{:.4}\t{:.6}{}",
                r.split,
                r.font_id,
                r.codepoint,
                r.l1,
                r.rmse,
                r.psnr,
                r.ssim,
                tail(r.lpips)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct per-window SSIM with a 2D Gaussian, no separable filtering.
    fn ssim_loop(a: &[f32], b: &[f32], size: usize) -> f64 {
        let n = ssim_window(size);
        let g = gaussian_window(n, SSIM_SIGMA);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=size - n {
            for c in 0..=size - n {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = g[i] * g[j];
                        let x = a[(r + i) * size + c + j] as f64;
                        let y = b[(r + i) * size + c + j] as f64;
                        ux += w * x;
                        uy += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn checkerboard(size: usize, cell: usize) -> Vec<f32> {
        (0..size * size)
            .map(|i| {
                if ((i / size) / cell + (i % size) / cell).is_multiple_of(2) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn identity_cases() {
        let a: Vec<f32> = (0..1024).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, PSNR_CAP).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a, 32).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images() {
        let a = vec![0.0f32; 256];
        let b = vec![0.5f32; 256];
        assert!((l1(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((psnr(&a, &b, PSNR_CAP).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_loop_oracle() {
        let a = checkerboard(32, 4);
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        assert!((ssim(&a, &b, 32).unwrap() - ssim_loop(&a, &b, 32)).abs() < 1e-9);
        let c: Vec<f32> = (0..64).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
        let d: Vec<f32> = (0..64).map(|i| ((i * 3) % 5) as f32 / 4.0).collect();
        assert_eq!(ssim_window(8), 7);
        assert!((ssim(&c, &d, 8).unwrap() - ssim_loop(&c, &d, 8)).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(l1(&[0.0; 4], &[0.0; 5]), Err(Error::ShapeMismatch { .. })));
        assert!(ssim(&[0.0; 16], &[0.0; 16], 5).is_err());
    }

    #[test]
    fn report_aggregates_and_columns() {
        let mut recs = Vec::new();
        for (i, split) in ["SFUC", "SFUC", "UFUC"].iter().enumerate() {
            let g = vec![0.1 * i as f32; 16];
            recs.push(PairRecord::score(split, "f0", 0x4E00 + i as u32, &g, &[0.0; 16], 4).unwrap());
        }
        let rep = MetricsReport::new(recs);
        assert_eq!(rep.summaries.len(), 2);
        assert_eq!(rep.summaries[0].count, 2);
        assert!((rep.summaries[0].l1 - 0.05).abs() < 1e-7);
        let tsv = rep.to_tsv();
        assert!(tsv.starts_with("split\tcount\tL1\tRMSE\tPSNR\tSSIM\n"));
        assert!(!tsv.contains("LPIPS"));
        let back: MetricsReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(a in prop::collection::vec(0f32..1.0, 16), b in prop::collection::vec(0f32..1.0, 16), c in prop::collection::vec(0f32..1.0, 16)) {
            let ab = l1(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, l1(&b, &a).unwrap());
            prop_assert!(ab <= l1(&a, &c).unwrap() + l1(&c, &b).unwrap() + 1e-12);
            prop_assert!(rmse(&a, &b).unwrap() >= ab - 1e-12);
        }

        #[test]
        fn ssim_is_symmetric_and_bounded(a in prop::collection::vec(0f32..1.0, 144), b in prop::collection::vec(0f32..1.0, 144)) {
            let s = ssim(&a, &b, 12).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a, 12).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn aggregates_are_means(l1s in prop::collection::vec(0f64..1.0, 1..20)) {
            let recs: Vec<PairRecord> = l1s.iter().enumerate().map(|(i, &v)| PairRecord {
                split: "s".into(), font_id: "f".into(), codepoint: i as u32, l1: v, rmse: v, psnr: 10.0, ssim: 0.5, lpips: None,
            }).collect();
            let rep = MetricsReport::new(recs);
            let want = l1s.iter().sum::<f64>() / l1s.len() as f64;
            prop_assert!((rep.summaries[0].l1 - want).abs() < 1e-9);
        }
    }
}

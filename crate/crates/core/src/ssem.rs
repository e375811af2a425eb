//! Single-head structure-level attention algebra on plain row-major matrices.
//!
//! The batched tensor version lives in `attention`; this one has no backend
//! dependency and is what the browser demo runs.

use crate::error::{Error, Result};
use crate::structure::ComponentLayout;

/// Component index of every content position and every reference position.
/// Reference components of successive references are numbered consecutively.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLabels {
    pub content: Vec<usize>,
    pub m: usize,
    pub reference: Vec<usize>,
    pub n: usize,
}

impl BlockLabels {
    pub fn new(content: &ComponentLayout, refs: &[ComponentLayout]) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::EmptyReferences);
        }
        let mut reference = Vec::with_capacity(refs.len() * content.h * content.w);
        let mut n = 0;
        for r in refs {
            if (r.h, r.w) != (content.h, content.w) {
                return Err(Error::LayoutMismatch(format!(
                    "reference grid {}x{} vs content grid {}x{}",
                    r.h, r.w, content.h, content.w
                )));
            }
            reference.extend(r.labels().into_iter().map(|l| l + n));
            n += r.components.len();
        }
        Ok(Self {
            content: content.labels(),
            m: content.components.len(),
            reference,
            n,
        })
    }

    pub fn rows(&self) -> usize {
        self.content.len()
    }

    pub fn cols(&self) -> usize {
        self.reference.len()
    }

    fn check(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.rows() * self.cols() {
            return Err(Error::LayoutMismatch(format!(
                "attention has {} entries, layouts imply {}x{}",
                a.len(),
                self.rows(),
                self.cols()
            )));
        }
        Ok(())
    }
}

/// Mean of the patch weights inside every (content component, reference component) block; `m x n`.
pub fn structure_attention(a: &[f64], labels: &BlockLabels) -> Result<Vec<f64>> {
    labels.check(a)?;
    let cols = labels.cols();
    let mut sum = vec![0.0; labels.m * labels.n];
    let mut count = vec![0usize; labels.m * labels.n];
    for (x, &i) in labels.content.iter().enumerate() {
        let row = &a[x * cols..(x + 1) * cols];
        for (&v, &j) in row.iter().zip(&labels.reference) {
            sum[i * labels.n + j] += v;
            count[i * labels.n + j] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
}

/// Adds each block mean back onto the patch weights of its block.
pub fn reweight(a: &[f64], a_stru: &[f64], labels: &BlockLabels) -> Result<Vec<f64>> {
    labels.check(a)?;
    if a_stru.len() != labels.m * labels.n {
        return Err(Error::LayoutMismatch(format!(
            "structure attention has {} entries, expected {}x{}",
            a_stru.len(),
            labels.m,
            labels.n
        )));
    }
    let cols = labels.cols();
    let mut out = a.to_vec();
    for (x, &i) in labels.content.iter().enumerate() {
        for (y, &j) in labels.reference.iter().enumerate() {
            out[x * cols + y] += a_stru[i * labels.n + j];
        }
    }
    Ok(out)
}

pub fn softmax_rows(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// Average probability mass that a content component's rows put on each reference component; `m x n`.
pub fn block_mass(probs: &[f64], labels: &BlockLabels) -> Result<Vec<f64>> {
    labels.check(probs)?;
    let cols = labels.cols();
    let mut mass = vec![0.0; labels.m * labels.n];
    let mut rows = vec![0usize; labels.m];
    for (x, &i) in labels.content.iter().enumerate() {
        rows[i] += 1;
        for (y, &j) in labels.reference.iter().enumerate() {
            mass[i * labels.n + j] += probs[x * cols + y];
        }
    }
    for i in 0..labels.m {
        for j in 0..labels.n {
            mass[i * labels.n + j] /= rows[i].max(1) as f64;
        }
    }
    Ok(mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{decompose, StructureCategory};

    fn layouts(c: StructureCategory, r: &[StructureCategory], g: usize) -> (ComponentLayout, Vec<ComponentLayout>) {
        let content = decompose(0, c, (g, g)).unwrap();
        let refs = r.iter().map(|&cat| decompose(1, cat, (g, g)).unwrap()).collect();
        (content, refs)
    }

    #[test]
    fn hand_computed_two_by_two() {
        // Content: left-right on 2x2 -> {(0,0),(1,0)}, {(0,1),(1,1)}; same for the reference.
        let (c, r) = layouts(StructureCategory::LeftRight, &[StructureCategory::LeftRight], 2);
        let labels = BlockLabels::new(&c, &r).unwrap();
        #[rustfmt::skip]
        let a = [
            1.0, 2.0, 3.0, 4.0,
            5.0, 6.0, 7.0, 8.0,
            9.0, 10.0, 11.0, 12.0,
            13.0, 14.0, 15.0, 16.0,
        ];
        // Rows 0 and 2 are content component 0; columns 0 and 2 are reference component 0.
        let s = structure_attention(&a, &labels).unwrap();
        assert_eq!(
            s,
            vec![
                (1.0 + 3.0 + 9.0 + 11.0) / 4.0,
                (2.0 + 4.0 + 10.0 + 12.0) / 4.0,
                (5.0 + 7.0 + 13.0 + 15.0) / 4.0,
                (6.0 + 8.0 + 14.0 + 16.0) / 4.0
            ]
        );
        let rw = reweight(&a, &s, &labels).unwrap();
        assert_eq!(rw[0], 1.0 + 6.0);
        assert_eq!(rw[1], 2.0 + 7.0);
        assert_eq!(rw[5], 6.0 + 11.0);
    }

    #[test]
    fn uniform_and_single_component() {
        let (c, r) = layouts(
            StructureCategory::TopBottom,
            &[StructureCategory::LeftCenterRight, StructureCategory::Independent],
            6,
        );
        let labels = BlockLabels::new(&c, &r).unwrap();
        assert_eq!((labels.m, labels.n), (2, 4));
        let a = vec![0.3; labels.rows() * labels.cols()];
        let s = structure_attention(&a, &labels).unwrap();
        assert!(s.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let rw = reweight(&a, &s, &labels).unwrap();
        assert!(rw.iter().all(|v| (v - 0.6).abs() < 1e-12));

        let (c, r) = layouts(StructureCategory::Independent, &[StructureCategory::Independent], 4);
        let labels = BlockLabels::new(&c, &r).unwrap();
        let a: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let s = structure_attention(&a, &labels).unwrap();
        assert_eq!(s, vec![127.5]);
    }

    #[test]
    fn zero_structure_attention_is_neutral() {
        let (c, r) = layouts(StructureCategory::FullyEncompassed, &[StructureCategory::TopBottom], 4);
        let labels = BlockLabels::new(&c, &r).unwrap();
        let a: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        let rw = reweight(&a, &vec![0.0; labels.m * labels.n], &labels).unwrap();
        assert_eq!(rw, a);
    }

    #[test]
    fn softmax_rows_normalise() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[3], 1.0);
    }

    #[test]
    fn mismatched_layouts() {
        let c = decompose(0, StructureCategory::LeftRight, (4, 4)).unwrap();
        let r = decompose(0, StructureCategory::LeftRight, (6, 6)).unwrap();
        assert!(matches!(BlockLabels::new(&c, &[r]), Err(Error::LayoutMismatch(_))));
        assert!(matches!(BlockLabels::new(&c, &[]), Err(Error::EmptyReferences)));
        let labels = BlockLabels::new(&c, std::slice::from_ref(&c)).unwrap();
        assert!(structure_attention(&[0.0; 3], &labels).is_err());
    }
}

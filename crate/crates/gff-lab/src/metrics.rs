//! Confusion matrices and the segmentation scores derived from them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// `K x K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Shape(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            return Err(Error::Shape(format!(
                "prediction {}x{}x{} vs ground truth {}x{}x{}",
                pred.n, pred.h, pred.w, gt.n, gt.h, gt.w
            )));
        }
        // validate first so a bad map leaves the matrix untouched
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore && (p as usize >= self.k || g as usize >= self.k) {
                return Err(Error::Invalid(format!("label pair ({g}, {p}) outside 0..{}", self.k)));
            }
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merging {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs in
    /// either ground truth or prediction.
    pub fn per_class_iou(&self) -> Result<Vec<Option<f64>>> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        Ok((0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect())
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou()?.into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `class,iou` rows followed by `mIoU` and `pixel_acc` summary rows.
    /// Classes with an empty union are written as `nan`.
    pub fn to_csv(&self, names: &[&str]) -> Result<String> {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class_iou()?.iter().enumerate() {
            let name = names.get(c).copied().map(str::to_string).unwrap_or_else(|| format!("class{c}"));
            match iou {
                Some(v) => writeln!(out, "{name},{v:.6}").unwrap(),
                None => writeln!(out, "{name},nan").unwrap(),
            }
        }
        writeln!(out, "mIoU,{:.6}", self.miou()?).unwrap();
        writeln!(out, "pixel_acc,{:.6}", self.pixel_acc()?).unwrap();
        Ok(out)
    }
}

/// Per-pixel class of the largest logit; ties go to the lowest class index.
pub fn argmax_predict<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let [n, k, h, w] = logits.dims4()?;
    if k == 0 || k > 256 {
        return Err(Error::Invalid(format!("{k} classes")));
    }
    let plane = h * w;
    let v = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = v[b * k * plane + p];
            for c in 1..k {
                let x = v[(b * k + c) * plane + p];
                if x > best_v {
                    best = c;
                    best_v = x;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(&[0, 1, 1, 1]), &map(&[0, 0, 1, 1]), 255).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        let ious = cm.per_class_iou().unwrap();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert!((cm.pixel_acc().unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(&[0, 1, 2, 2]), &map(&[0, 1, 2, 2]), 255).unwrap();
        assert!((0..3).all(|g| (0..3).all(|p| g == p || cm.get(g, p) == 0)));
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.pixel_acc().unwrap(), 1.0);
        let before = cm.clone();
        cm.accumulate(&map(&[0, 1, 2, 0]), &map(&[255; 4]), 255).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(&[0, 1, 1, 1]), &map(&[0, 0, 1, 1]), 255).unwrap();
        assert_eq!(cm.per_class_iou().unwrap()[2], None);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.miou(), Err(Error::EmptyConfusion)));
        assert!(matches!(cm.pixel_acc(), Err(Error::EmptyConfusion)));
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&map(&[0, 2]), &map(&[0, 1]), 255).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn argmax_ties_and_shift() {
        let logits = Tensor::<f64>::new(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 5.0, 0.0, 5.0]).unwrap();
        assert_eq!(argmax_predict(&logits).unwrap().data, vec![0, 1]);
        let equal = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert!(argmax_predict(&equal).unwrap().data.iter().all(|&c| c == 0));
        let shifted = logits.map(|v| v + 3.25);
        assert_eq!(argmax_predict(&shifted).unwrap(), argmax_predict(&logits).unwrap());
    }

    #[test]
    fn csv_layout() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(&[0, 1, 1, 1]), &map(&[0, 0, 1, 1]), 255).unwrap();
        let csv = cm.to_csv(&["road", "car"]).unwrap();
        assert_eq!(csv, "class,iou\nroad,0.500000\ncar,0.666667\nmIoU,0.583333\npixel_acc,0.750000\n");
    }
}

//! Depth evaluation metrics over ground-truth pixels within a range cap.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAPS: [f64; 3] = [50.0, 70.0, 80.0];

pub const CSV_HEADER: &str =
    "split,mae,rmse,absrel,log10,rmselog,delta1,delta2,delta3,eval_cap,pixel_count,alpha,tag";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub absrel: f64,
    pub log10: f64,
    pub rmselog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub eval_cap: f64,
    pub pixel_count: usize,
}

/// Running sums, mergeable across frames in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    rel: f64,
    log10: f64,
    sqlog: f64,
    hits: [usize; 3],
    count: usize,
}

impl MetricAccumulator {
    /// Adds every pixel with `0 < gt ≤ cap`.
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, cap: f64) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(dim_err!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
        }
        for (&p, &d) in pred.data().iter().zip(gt.data()) {
            if !(d > 0.0 && d <= cap) {
                continue;
            }
            if !(p > 0.0) {
                return Err(Error::Data(format!("non-positive predicted depth {p}")));
            }
            let e = p - d;
            self.abs += e.abs();
            self.sq += e * e;
            self.rel += e.abs() / d;
            self.log10 += (p.log10() - d.log10()).abs();
            let l = p.ln() - d.ln();
            self.sqlog += l * l;
            let ratio = (p / d).max(d / p);
            for (t, hit) in self.hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(t as i32 + 1) {
                    *hit += 1;
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn report(&self, cap: f64) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::Data(format!("no ground-truth pixels within {cap} m")));
        }
        let n = self.count as f64;
        Ok(MetricReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            absrel: self.rel / n,
            log10: self.log10 / n,
            rmselog: (self.sqlog / n).sqrt(),
            delta1: self.hits[0] as f64 / n,
            delta2: self.hits[1] as f64 / n,
            delta3: self.hits[2] as f64 / n,
            eval_cap: cap,
            pixel_count: self.count,
        })
    }
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, cap: f64) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, cap)?;
    acc.report(cap)
}

/// Pools all pixels of all frames (in frame order) into one report.
pub fn evaluate_frames(frames: &[(Tensor, Tensor)], cap: f64) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for (pred, gt) in frames {
        acc.add(pred, gt, cap)?;
    }
    acc.report(cap)
}

impl MetricReport {
    pub fn csv_row(&self, split: &str, alpha: f64, tag: &str) -> String {
        format!(
            "{split},{},{},{},{},{},{},{},{},{},{},{alpha},{tag}",
            self.mae,
            self.rmse,
            self.absrel,
            self.log10,
            self.rmselog,
            self.delta1,
            self.delta2,
            self.delta3,
            self.eval_cap,
            self.pixel_count
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = Tensor::new(&[2, 2], vec![1.0, 10.0, 60.0, 0.0]).unwrap();
        let r = evaluate(&gt, &gt, 80.0).unwrap();
        assert_eq!(
            (r.mae, r.rmse, r.absrel, r.log10, r.rmselog, r.delta1, r.delta2, r.delta3),
            (0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(r.pixel_count, 3);
        assert_eq!(evaluate(&gt, &gt, 50.0).unwrap().pixel_count, 2);
    }

    #[test]
    fn doubled_prediction() {
        let gt = Tensor::new(&[1, 3], vec![2.0, 5.0, 30.0]).unwrap();
        let r = evaluate(&gt.scale(2.0), &gt, 80.0).unwrap();
        assert!((r.absrel - 1.0).abs() < 1e-15);
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
        assert!((r.log10 - 2f64.log10()).abs() < 1e-15);
    }

    #[test]
    fn empty_cap_is_data_error() {
        let gt = Tensor::new(&[1, 2], vec![90.0, 0.0]).unwrap();
        assert!(matches!(evaluate(&gt, &gt, 80.0), Err(Error::Data(_))));
        let bad = Tensor::zeros(&[2, 1]);
        assert!(evaluate(&bad, &gt, 80.0).is_err());
    }

    #[test]
    fn csv_row_has_header_arity() {
        let gt = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        let row = evaluate(&gt, &gt, 50.0).unwrap().csv_row("val", 1.0, "full");
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("val,0,0,"));
        assert!(row.ends_with(",50,1,1,full"));
    }
}

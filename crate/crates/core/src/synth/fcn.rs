use super::{BoldSeries, Fcn};
use crate::error::{Error, Result};

/// Pearson correlation between every pair of ROI time series.
///
/// The diagonal is set to exactly 1 and the upper triangle is mirrored so the
/// result is exactly symmetric. Constant ROI rows are rejected.
pub fn bold_to_fcn(bold: &BoldSeries) -> Result<Fcn> {
    let n = bold.n_rois();
    let t = bold.n_timepoints() as f64;
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = bold.roi(i);
        let mean = row.iter().sum::<f64>() / t;
        let c: Vec<f64> = row.iter().map(|x| x - mean).collect();
        let ss = c.iter().map(|x| x * x).sum::<f64>();
        if ss <= 0.0 || !ss.is_finite() {
            return Err(Error::ZeroVarianceRoi { roi: i });
        }
        norms.push(ss.sqrt());
        centered.push(c);
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i * n + j] = r;
            m[j * n + i] = r;
        }
    }
    Fcn::new(n, m)
}

/// Node feature matrix: row `i` of the FCN is node `i`'s feature vector.
pub fn fcn_node_features(fcn: &Fcn) -> Vec<f64> {
    fcn.matrix().to_vec()
}

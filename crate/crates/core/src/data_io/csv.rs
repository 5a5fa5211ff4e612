use std::fmt::Write as _;

use super::config::format_noise;
use crate::tokenfield::SpectrumReport;
use crate::training::{MetricsRow, NoiseReport};
use crate::verify::VerifyReport;

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,loss,logdet_mean,grad_norm\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.lr, r.loss, r.logdet_mean, r.grad_norm);
    }
    out
}

/// One row per component; the last column repeats the smallest component
/// count reaching `threshold`.
pub fn spectrum_csv(report: &SpectrumReport, threshold: f64, intrinsic_dim: usize) -> String {
    let mut out = format!("component,eigenvalue,cumulative_explained,intrinsic_dim_{threshold}\n");
    for (i, (e, c)) in report.eigenvalues.iter().zip(&report.cumulative_explained).enumerate() {
        let _ = writeln!(out, "{},{:e},{:.9},{}", i + 1, e, c, intrinsic_dim);
    }
    out
}

pub fn nll_csv(labels: &[Option<u32>], nll: &[f64], nll_per_dim: &[f64]) -> String {
    let mut out = String::from("index,label,nll,nll_per_dim\n");
    for (i, ((l, a), b)) in labels.iter().zip(nll).zip(nll_per_dim).enumerate() {
        let label = l.map_or_else(|| "none".to_string(), |c| c.to_string());
        let _ = writeln!(out, "{i},{label},{a:e},{b:e}");
    }
    out
}

pub fn verify_csv(reports: &[VerifyReport]) -> String {
    let mut out = format!("{}\n", VerifyReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn noise_report_csv(report: &NoiseReport) -> String {
    let mut out = String::from("schedule,train_noise,eval_noise,test_nll_per_dim,final_train_loss,constant_wins\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.schedule,
            format_noise(r.train_noise),
            format_noise(report.eval_noise),
            r.test_nll_per_dim,
            r.final_train_loss,
            report.constant_wins
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_rows() {
        let rows = [MetricsRow { step: 1, lr: 1e-3, loss: 0.5, logdet_mean: -2.0, grad_norm: 3.0 }];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,lr,loss,logdet_mean,grad_norm"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields, vec![1.0, 1e-3, 0.5, -2.0, 3.0]);
    }

    #[test]
    fn spectrum_rows_carry_intrinsic_dim() {
        let s = SpectrumReport::from_eigenvalues(vec![3.0, 1.0]);
        let csv = spectrum_csv(&s, 0.99, 2);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("2,1e0,1.000000000,2"));
    }

    #[test]
    fn nll_rows() {
        let csv = nll_csv(&[Some(2), None], &[1.0, 2.0], &[0.5, 1.0]);
        assert_eq!(csv.lines().nth(2).unwrap(), "1,none,2e0,1e0");
    }
}

//! Task metrics and gradient-norm telemetry.
//!
//! Zero-denominator conventions: F1 and Matthews correlation return 0 when a
//! factor of their denominator is 0, matching common benchmark tooling.
//! Telemetry stores raw per-group L2 norms; any log scaling is a plotting
//! concern downstream.

use crate::error::{Error, Result};
use crate::model::Model;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-group L2 gradient norms at one iteration. Groups whose parameters
/// carry no gradient (frozen during adapter-only training) report exactly 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradNormSnapshot {
    pub iteration: usize,
    pub norms: BTreeMap<String, f64>,
}

/// L2 norm of the concatenated gradients of each parameter group.
pub fn grad_norm_by_group(model: &Model, iteration: usize) -> GradNormSnapshot {
    let mut norms = BTreeMap::new();
    for g in model.groups() {
        let sq: f64 = g
            .params
            .iter()
            .flat_map(|p| model.param(*p).grad.iter())
            .map(|v| v * v)
            .sum();
        norms.insert(g.name.clone(), sq.sqrt());
    }
    GradNormSnapshot { iteration, norms }
}

fn check_lengths(preds: usize, labels: usize) -> Result<()> {
    if preds == 0 || preds != labels {
        return Err(Error::Usage(format!(
            "metric needs equal non-empty sequences, got {preds} predictions and {labels} labels"
        )));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Confusion counts with `positive` as the positive class.
pub fn confusion(preds: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionCounts> {
    check_lengths(preds.len(), labels.len())?;
    let mut c = ConfusionCounts::default();
    for (p, l) in preds.iter().zip(labels) {
        match (*p == positive, *l == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; 0 when the denominator is 0.
pub fn f1_binary(preds: &[usize], labels: &[usize], positive: usize) -> Result<f64> {
    let c = confusion(preds, labels, positive)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

/// Matthews correlation coefficient; 0 when any denominator factor is 0.
pub fn matthews_corr(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let c = confusion(preds, labels, 1)?;
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let factors = [(tp + fp), (tp + fn_), (tn + fp), (tn + fn_)];
    if factors.iter().any(|f| *f == 0.0) {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt())
}

/// Average ranks (1-based), ties receiving the mean of their rank range.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].partial_cmp(&xs[*b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j share the averaged rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data(
            "correlation undefined for a constant input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Dump predictions as `example_id,pred,label` CSV rows with a header.
pub fn write_predictions_csv(path: &std::path::Path, preds: &[usize], labels: &[usize]) -> Result<()> {
    use std::io::Write;
    check_lengths(preds.len(), labels.len())?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "example_id,pred,label")?;
    for (i, (p, l)) in preds.iter().zip(labels).enumerate() {
        writeln!(f, "{i},{p},{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Read back a prediction dump; returns (preds, labels).
pub fn read_predictions_csv(path: &std::path::Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let raw = std::fs::read_to_string(path)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Schema(format!(
                "prediction CSV line {}: expected 3 columns",
                lineno + 1
            )));
        }
        preds.push(cols[1].trim().parse().map_err(|_| {
            Error::Data(format!("prediction CSV line {}: bad pred", lineno + 1))
        })?);
        labels.push(cols[2].trim().parse().map_err(|_| {
            Error::Data(format!("prediction CSV line {}: bad label", lineno + 1))
        })?);
    }
    Ok((preds, labels))
}

/// Pearson correlation plus Spearman (Pearson on average-ranked data).
pub fn pearson_spearman(preds: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::Usage(format!(
            "correlation needs two equal-length sequences of at least 2, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Data("correlation inputs must be finite".into()));
    }
    let p = pearson(preds, labels)?;
    let s = pearson(&average_ranks(preds), &average_ranks(labels))?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        // TP=2, FP=1, FN=1 -> 2*2/(2*2+1+1) = 2/3
        let preds = [1, 1, 1, 0, 0, 0];
        let labels = [1, 1, 0, 1, 0, 0];
        assert!((f1_binary(&preds, &labels, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // no positive predictions, no positive labels
        assert_eq!(f1_binary(&[0, 0], &[0, 0], 1).unwrap(), 0.0);
    }

    #[test]
    fn mcc_cases() {
        assert_eq!(matthews_corr(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        // all-same-class predictions: a zero factor
        assert_eq!(matthews_corr(&[1, 1, 1], &[1, 0, 1]).unwrap(), 0.0);
        // TP=3, TN=4, FP=1, FN=2 fixture
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        preds.extend([1, 1, 1]); // TP
        labels.extend([1, 1, 1]);
        preds.extend([0, 0, 0, 0]); // TN
        labels.extend([0, 0, 0, 0]);
        preds.push(1); // FP
        labels.push(0);
        preds.extend([0, 0]); // FN
        labels.extend([1, 1]);
        let want = (3.0 * 4.0 - 1.0 * 2.0) / ((3.0f64 + 1.0) * (3.0 + 2.0) * (4.0 + 1.0) * (4.0 + 2.0)).sqrt();
        assert!((matthews_corr(&preds, &labels).unwrap() - want).abs() < 1e-15);
        assert!(matthews_corr(&preds, &labels).unwrap().abs() <= 1.0);
    }

    #[test]
    fn correlation_cases() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (p, s) = pearson_spearman(&xs, &xs).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (p, s) = pearson_spearman(&xs, &neg).unwrap();
        assert!((p + 1.0).abs() < 1e-12 && (s + 1.0).abs() < 1e-12);

        // monotone nonlinear map: Spearman 1, Pearson < 1
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
        let (p, s) = pearson_spearman(&xs, &cubed).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "spearman {s}");
        assert!(p < 1.0 - 1e-6, "pearson {p}");

        assert!(pearson_spearman(&[1.0, 1.0, 1.0], &xs[..3].to_vec()).is_err());
        assert!(pearson_spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_handle_ties() {
        let r = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn metrics_invariant_under_pair_permutation() {
        let preds = [0usize, 1, 1, 0, 1, 0, 0, 1];
        let labels = [0usize, 1, 0, 0, 1, 1, 0, 1];
        let perm = [3usize, 1, 7, 0, 5, 2, 6, 4];
        let pp: Vec<usize> = perm.iter().map(|i| preds[*i]).collect();
        let pl: Vec<usize> = perm.iter().map(|i| labels[*i]).collect();
        assert_eq!(
            accuracy(&preds, &labels).unwrap(),
            accuracy(&pp, &pl).unwrap()
        );
        assert_eq!(
            f1_binary(&preds, &labels, 1).unwrap(),
            f1_binary(&pp, &pl, 1).unwrap()
        );
        assert_eq!(
            matthews_corr(&preds, &labels).unwrap(),
            matthews_corr(&pp, &pl).unwrap()
        );
    }

    #[test]
    fn grad_norms_zero_three_four_five_and_union() {
        let cfg = ModelConfig {
            vocab_size: 20,
            max_seq_len: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout_rate: 0.0,
            init_std: 0.02,
            adapter: None,
        };
        let mut m = build_model(&cfg, 1).unwrap();
        let snap = grad_norm_by_group(&m, 0);
        assert!(snap.norms.values().all(|v| *v == 0.0));

        // a 3-4-5 triangle in one group
        let pid = m.group("pooler").unwrap().params[0];
        m.param_mut(pid).grad[0] = 3.0;
        m.param_mut(pid).grad[1] = 4.0;
        let snap = grad_norm_by_group(&m, 1);
        assert_eq!(snap.norms["pooler"], 5.0);

        // union-of-groups: norm^2 equality against a flat recomputation
        for (i, p) in (0..m.params().len()).zip(0..) {
            let _ = p;
            let numel = m.params()[i].numel();
            for j in 0..numel.min(3) {
                m.param_mut(crate::model::ParamId(i)).grad[j] = (i as f64 + 1.0) * 0.1 + j as f64;
            }
        }
        let snap = grad_norm_by_group(&m, 2);
        let sum_sq: f64 = snap.norms.values().map(|v| v * v).sum();
        let flat_sq: f64 = m
            .params()
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|v| v * v)
            .sum();
        assert!(
            (sum_sq - flat_sq).abs() <= 1e-9 * flat_sq.max(1.0),
            "{sum_sq} vs {flat_sq}"
        );
    }
}

//! Confusion matrix, overall/average accuracy and Cohen's kappa.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K × K` counts; rows are the true class, columns the prediction, both
/// 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion_matrix", format!("rows must all have length {k}")));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    /// Tallies 0-based `(truth, prediction)` pairs.
    pub fn from_pairs(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} labels vs {} predictions", truth.len(), pred.len()),
            ));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Data(format!(
                "class index out of range: truth {truth}, prediction {pred}, K = {}",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.k..(c + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }
}

fn nonempty(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::Data("confusion matrix is empty".into())),
        n => Ok(n as f64),
    }
}

/// Overall accuracy: trace over total.
pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / nonempty(cm)?)
}

/// Recall of each class.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    (0..cm.n_classes())
        .map(|c| match cm.row_sum(c) {
            0 => Err(Error::Data(format!("class {} has no evaluated pixels", c + 1))),
            n => Ok(cm.get(c, c) as f64 / n as f64),
        })
        .collect()
}

/// Average accuracy: mean per-class recall.
pub fn aa(cm: &ConfusionMatrix) -> Result<f64> {
    let acc = per_class_accuracy(cm)?;
    if acc.is_empty() {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Cohen's kappa, evaluated as `(n·trace − Σ r·c) / (n² − Σ r·c)` in
/// integers so that only the final division rounds.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    let n = cm.total() as u128;
    let chance: u128 = (0..cm.n_classes())
        .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
        .sum();
    if chance >= n * n {
        return Err(Error::Data("kappa undefined: chance agreement is 1".into()));
    }
    let num = (n * cm.trace() as u128) as f64 - chance as f64;
    Ok(num / (n * n - chance) as f64)
}

/// Evaluation summary in fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<f64>,
}

impl Report {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Report {
            oa: oa(cm)?,
            aa: aa(cm)?,
            kappa: kappa(cm)?,
            per_class: per_class_accuracy(cm)?,
        })
    }

    /// Human-readable table in percent with two decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>8}", "metric", "value").unwrap();
        for (name, v) in [("OA", self.oa), ("AA", self.aa), ("Kappa", self.kappa)] {
            writeln!(s, "{name:<10} {:>8.2}", 100.0 * v).unwrap();
        }
        for (i, v) in self.per_class.iter().enumerate() {
            writeln!(s, "{:<10} {:>8.2}", format!("class {}", i + 1), 100.0 * v).unwrap();
        }
        s
    }

    /// One `key=value` per line: `oa`, `aa`, `kappa`, `per_class_{i}` with
    /// 1-based `i`.
    pub fn key_values(&self) -> String {
        let mut s = format!("oa={}\naa={}\nkappa={}\n", self.oa, self.aa, self.kappa);
        for (i, v) in self.per_class.iter().enumerate() {
            writeln!(s, "per_class_{}={v}", i + 1).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn worked_two_class_example() {
        let m = cm(&[&[40, 10], &[20, 30]]);
        assert_eq!(oa(&m).unwrap(), 0.7);
        assert_eq!(aa(&m).unwrap(), 0.7);
        assert_eq!(kappa(&m).unwrap(), 0.4);
    }

    #[test]
    fn imbalanced_aa_differs_from_oa() {
        let m = cm(&[&[1, 0], &[99, 1]]);
        assert!((aa(&m).unwrap() - 0.505).abs() < 1e-15);
        assert!((oa(&m).unwrap() - 2.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_and_off_diagonal() {
        let d = cm(&[&[3, 0, 0], &[0, 5, 0], &[0, 0, 2]]);
        assert_eq!((oa(&d).unwrap(), aa(&d).unwrap(), kappa(&d).unwrap()), (1.0, 1.0, 1.0));
        let off = cm(&[&[0, 4], &[6, 0]]);
        assert_eq!(oa(&off).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(oa(&ConfusionMatrix::new(3)).is_err());
        assert!(aa(&cm(&[&[3, 0], &[0, 0]])).is_err());
        assert!(kappa(&cm(&[&[7]])).is_err());
        assert!(ConfusionMatrix::new(2).add(2, 0).is_err());
    }

    #[test]
    fn independent_predictions_give_zero_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..5)).collect();
        let m = ConfusionMatrix::from_pairs(5, &truth, &pred).unwrap();
        assert!(kappa(&m).unwrap().abs() <= 0.02);
    }

    #[test]
    fn report_formats() {
        let r = Report::from_confusion(&cm(&[&[40, 10], &[20, 30]])).unwrap();
        assert!(r.table().contains("OA            70.00"));
        assert!(r.key_values().starts_with("oa=0.7\naa=0.7\nkappa=0.4\n"));
        assert!(r.key_values().contains("per_class_2=0.6\n"));
    }

    proptest! {
        #[test]
        fn invariant_under_class_relabeling(
            counts in proptest::collection::vec(1u64..50, 9),
            perm_seed in any::<u64>(),
        ) {
            let k = 3;
            let m = ConfusionMatrix { k, counts: counts.clone() };
            let mut perm: Vec<usize> = (0..k).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut p = ConfusionMatrix::new(k);
            for r in 0..k {
                for c in 0..k {
                    p.counts[perm[r] * k + perm[c]] = m.get(r, c);
                }
            }
            prop_assert!((oa(&m).unwrap() - oa(&p).unwrap()).abs() < 1e-12);
            prop_assert!((aa(&m).unwrap() - aa(&p).unwrap()).abs() < 1e-12);
            prop_assert!((kappa(&m).unwrap() - kappa(&p).unwrap()).abs() < 1e-12);
            prop_assert!(kappa(&m).unwrap() < oa(&m).unwrap());
        }
    }
}

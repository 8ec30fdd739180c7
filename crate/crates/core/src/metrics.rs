//! Routing diagnostics in bits: per-sample gate entropy, utilization
//! entropy, the expert-by-class selection table and the mutual information
//! between selected expert and class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUM_TOLERANCE: f64 = 1e-6;

/// Shannon entropy in bits with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::contract(format!("probability entry {v} is negative or NaN")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::contract(format!("probabilities sum to {total}, not 1")));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.log2()).sum();
    // a one-hot row sums to -0.0
    Ok(h + 0.0)
}

/// Mean per-sample entropy of the gate distribution.
pub fn h_s(gate: &Tensor) -> Result<f64> {
    let (n, _) = gate.dims2("h_s")?;
    let mut total = 0.0;
    for row in gate.rows() {
        total += entropy(row)?;
    }
    Ok(total / n as f64)
}

/// Entropy of the batch-averaged gate distribution.
pub fn h_u(gate: &Tensor) -> Result<f64> {
    let (n, m) = gate.dims2("h_u")?;
    let mut mean = vec![0.0; m];
    for row in gate.rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    entropy(&mean)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts of samples per (argmax expert, class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    /// `counts[i][j]`: samples of class `j` whose argmax expert is `i`.
    pub counts: Vec<Vec<u64>>,
    pub expert_names: Vec<String>,
    pub class_names: Vec<String>,
}

impl SelectionTable {
    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut c = vec![0; self.classes()];
        for row in &self.counts {
            for (a, v) in c.iter_mut().zip(row) {
                *a += v;
            }
        }
        c
    }

    /// Header of class names, then one row per expert led by its name.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert");
        for c in &self.class_names {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, row) in self.expert_names.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Binary grayscale heatmap (PGM `P5`): experts down, classes across,
    /// each count drawn as a `cell`×`cell` block, brighter = more samples.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let cell = cell.max(1);
        let (w, h) = (self.classes() * cell, self.experts() * cell);
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in &self.counts {
            let line: Vec<u8> = row
                .iter()
                .flat_map(|&c| {
                    let level = ((c as f64 / max as f64) * 255.0).round() as u8;
                    std::iter::repeat_n(level, cell)
                })
                .collect();
            for _ in 0..cell {
                out.extend_from_slice(&line);
            }
        }
        out
    }
}

pub fn selection_table(gate: &Tensor, labels: &[usize], class_names: &[String]) -> Result<SelectionTable> {
    let (n, m) = gate.dims2("selection_table")?;
    if labels.len() != n {
        return Err(Error::shape("selection_table", &[n, m], &[labels.len()]));
    }
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; m];
    for (row, &l) in gate.rows().zip(labels) {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        counts[argmax(row)][l] += 1;
    }
    Ok(SelectionTable {
        counts,
        expert_names: (1..=m).map(|i| format!("E{i}")).collect(),
        class_names: class_names.to_vec(),
    })
}

/// `I(E;Y) = H(E) + H(Y) − H(E,Y)` from the empirical joint distribution of
/// the table, with tiny negative round-off clamped to zero.
pub fn mutual_information(table: &SelectionTable) -> Result<f64> {
    let n = table.total();
    if n == 0 {
        return Err(Error::contract("mutual information of an empty table"));
    }
    let nf = n as f64;
    let norm = |v: &[u64]| -> Vec<f64> { v.iter().map(|&c| c as f64 / nf).collect() };
    let joint: Vec<u64> = table.counts.iter().flatten().copied().collect();
    let h_e = entropy(&norm(&table.row_sums()))?;
    let h_y = entropy(&norm(&table.col_sums()))?;
    let h_ey = entropy(&norm(&joint))?;
    let i = h_e + h_y - h_ey;
    Ok(if i < 0.0 && i > -1e-12 { 0.0 } else { i })
}

/// Fraction of rows whose argmax (ties to the lowest class) differs from
/// the label.
pub fn classification_error(y: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = y.dims2("classification_error")?;
    if labels.len() != n {
        return Err(Error::shape("classification_error", &[n, k], &[labels.len()]));
    }
    let wrong = y.rows().zip(labels).filter(|(r, &l)| argmax(r) != l).count();
    Ok(wrong as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub h_s: f64,
    pub h_u: f64,
    pub i_ey: f64,
    pub error: f64,
    pub n: usize,
    pub table: SelectionTable,
}

impl MetricsReport {
    /// All diagnostics for one evaluation set, treated as a single batch.
    pub fn compute(y: &Tensor, gate: &Tensor, labels: &[usize], class_names: &[String]) -> Result<Self> {
        let table = selection_table(gate, labels, class_names)?;
        Ok(MetricsReport {
            h_s: h_s(gate)?,
            h_u: h_u(gate)?,
            i_ey: mutual_information(&table)?,
            error: classification_error(y, labels)?,
            n: labels.len(),
            table,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| i.to_string()).collect()
    }

    fn random_gate(n: usize, m: usize, rng: &mut Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            // some exact zeros to exercise the 0·log 0 convention
            let raw: Vec<f64> = (0..m)
                .map(|_| if rng.below(4) == 0 { 0.0 } else { rng.uniform(0.0, 1.0) })
                .collect();
            let s: f64 = raw.iter().sum();
            if s == 0.0 {
                let mut r = vec![0.0; m];
                r[rng.below(m)] = 1.0;
                data.extend(r);
            } else {
                data.extend(raw.iter().map(|v| v / s));
            }
        }
        Tensor::new(vec![n, m], data).unwrap()
    }

    fn loop_entropy(p: &[f64]) -> f64 {
        let mut h = 0.0;
        for &v in p {
            if v > 0.0 {
                h -= v * v.ln() / 2f64.ln();
            }
        }
        h
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let u = entropy(&[0.2; 5]).unwrap();
        assert!((u - 5f64.log2()).abs() < 1e-12);
        assert!((u - 2.32).abs() < 5e-3);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(entropy(&[1.1, -0.1]), Err(Error::Contract(_))));
        assert!(matches!(entropy(&[0.5, 0.4]), Err(Error::Contract(_))));
    }

    #[test]
    fn gate_entropy_examples() {
        let mut onehot = Tensor::zeros(&[10, 5]);
        for r in 0..10 {
            onehot.data_mut()[r * 5 + r % 5] = 1.0;
        }
        assert_eq!(h_s(&onehot).unwrap(), 0.0);
        assert!((h_u(&onehot).unwrap() - 5f64.log2()).abs() < 1e-12);

        let uniform = Tensor::full(&[7, 5], 0.2);
        assert!((h_s(&uniform).unwrap() - 5f64.log2()).abs() < 1e-12);

        let mut collapse = Tensor::zeros(&[6, 5]);
        for r in 0..6 {
            collapse.data_mut()[r * 5 + 3] = 1.0;
        }
        assert_eq!(h_u(&collapse).unwrap(), 0.0);
    }

    #[test]
    fn gate_entropies_match_loop_oracles() {
        let mut rng = Rng::new(2024);
        for _ in 0..1000 {
            let n = 1 + rng.below(12);
            let m = 1 + rng.below(6);
            let p = random_gate(n, m, &mut rng);
            let mut hs = 0.0;
            let mut mean = vec![0.0; m];
            for r in 0..n {
                hs += loop_entropy(p.row(r));
                for e in 0..m {
                    mean[e] += p.at2(r, e) / n as f64;
                }
            }
            hs /= n as f64;
            let hs_got = h_s(&p).unwrap();
            let hu_got = h_u(&p).unwrap();
            assert!((hs_got - hs).abs() < 1e-12);
            assert!((hu_got - loop_entropy(&mean)).abs() < 1e-12);
            let cap = (m as f64).log2() + 1e-12;
            assert!(hs_got <= cap && hu_got <= cap);
        }
    }

    #[test]
    fn selection_table_examples() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.4], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let t = selection_table(&p, &[0, 0, 1, 1], &names(2)).unwrap();
        assert_eq!(t.counts, vec![vec![2, 2], vec![0, 0]]);
        assert_eq!(t.total(), 4);
        assert!(matches!(
            selection_table(&p, &[0, 0, 2, 1], &names(2)),
            Err(Error::Contract(_))
        ));
        assert_eq!(t.to_csv(), "expert,0,1\nE1,2,2\nE2,0,0\n");
        let pgm = t.to_pgm(2);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 16);
        assert_eq!(&pgm[header.len()..header.len() + 4], &[255, 255, 255, 255]);
        assert_eq!(pgm[pgm.len() - 1], 0);
    }

    #[test]
    fn selection_table_matches_loop_build() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let (n, m, k) = (1 + rng.below(40), 1 + rng.below(5), 1 + rng.below(10));
            let p = random_gate(n, m, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let t = selection_table(&p, &labels, &names(k)).unwrap();
            let mut expect = vec![vec![0u64; k]; m];
            for s in 0..n {
                let mut best = 0;
                for e in 1..m {
                    if p.at2(s, e) > p.at2(s, best) {
                        best = e;
                    }
                }
                expect[best][labels[s]] += 1;
            }
            assert_eq!(t.counts, expect);
            let mut hist = vec![0u64; k];
            labels.iter().for_each(|&l| hist[l] += 1);
            assert_eq!(t.col_sums(), hist);
            assert_eq!(t.total(), n as u64);
        }
    }

    fn table(counts: Vec<Vec<u64>>) -> SelectionTable {
        let (m, k) = (counts.len(), counts[0].len());
        SelectionTable {
            counts,
            expert_names: names(m),
            class_names: names(k),
        }
    }

    #[test]
    fn mutual_information_examples() {
        let product = table(vec![vec![2, 4, 6], vec![1, 2, 3], vec![3, 6, 9]]);
        assert!(mutual_information(&product).unwrap().abs() < 1e-12);
        let diag = table(
            (0..4)
                .map(|i| (0..4).map(|j| if i == j { 25 } else { 0 }).collect())
                .collect(),
        );
        assert!((mutual_information(&diag).unwrap() - 2.0).abs() < 1e-12);
        let empty = table(vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(mutual_information(&empty), Err(Error::Contract(_))));
    }

    #[test]
    fn mutual_information_matches_direct_formula() {
        let mut rng = Rng::new(99);
        for _ in 0..1000 {
            let counts: Vec<Vec<u64>> = (0..5)
                .map(|_| {
                    (0..10)
                        .map(|_| if rng.below(3) == 0 { 0 } else { rng.below(50) as u64 })
                        .collect()
                })
                .collect();
            let t = table(counts);
            if t.total() == 0 {
                continue;
            }
            let n = t.total() as f64;
            let (rows, cols) = (t.row_sums(), t.col_sums());
            let mut oracle = 0.0;
            for i in 0..5 {
                for j in 0..10 {
                    let p = t.counts[i][j] as f64 / n;
                    if p > 0.0 {
                        let pe = rows[i] as f64 / n;
                        let py = cols[j] as f64 / n;
                        oracle += p * (p / (pe * py)).log2();
                    }
                }
            }
            let mi = mutual_information(&t).unwrap();
            assert!((mi - oracle).abs() < 1e-10);
            let h_e = entropy(&rows.iter().map(|&c| c as f64 / n).collect::<Vec<_>>()).unwrap();
            let h_y = entropy(&cols.iter().map(|&c| c as f64 / n).collect::<Vec<_>>()).unwrap();
            assert!(mi >= 0.0 && mi <= h_e.min(h_y) + 1e-10);
        }
    }

    #[test]
    fn classification_error_examples() {
        let y = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_eq!(classification_error(&y, &[0, 0, 1]).unwrap(), 0.0);
        assert_eq!(classification_error(&y, &[1, 1, 0]).unwrap(), 1.0);
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let n = 1 + rng.below(30);
            let y = random_gate(n, 4, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let mut wrong = 0;
            for s in 0..n {
                let mut best = 0;
                for c in 1..4 {
                    if y.at2(s, c) > y.at2(s, best) {
                        best = c;
                    }
                }
                if best != labels[s] {
                    wrong += 1;
                }
            }
            assert_eq!(classification_error(&y, &labels).unwrap(), wrong as f64 / n as f64);
        }
    }

    proptest! {
        #[test]
        fn report_respects_bounds(seed in 0u64..10_000, n in 1usize..50, m in 1usize..6, k in 1usize..8) {
            let mut rng = Rng::new(seed);
            let p = random_gate(n, m, &mut rng);
            let y = random_gate(n, k, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let r = MetricsReport::compute(&y, &p, &labels, &names(k)).unwrap();
            let lm = (m as f64).log2() + 1e-12;
            prop_assert!(r.h_s >= 0.0 && r.h_s <= lm);
            prop_assert!(r.h_u >= 0.0 && r.h_u <= lm);
            prop_assert!(r.i_ey >= 0.0 && r.i_ey <= lm.min((k as f64).log2() + 1e-10));
            prop_assert!((0.0..=1.0).contains(&r.error));
            prop_assert_eq!(r.table.row_sums().iter().sum::<u64>(), n as u64);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::Conversation;
use crate::error::{Error, Result};
use crate::taxonomy::{Axis, DialogAct, Emotion, Mechanism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Joint,
    Conditional,
}

/// Labeled frequency table between two label axes.
///
/// In the conditional form each row with support sums to one; rows without
/// support stay all-zero and are reported by [`DistributionTable::is_row_empty`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub kind: TableKind,
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Raw count (or planted mass) behind each row.
    pub row_support: Vec<f64>,
}

impl DistributionTable {
    pub fn new_counts(x_axis: Axis, y_axis: Axis) -> Self {
        let row_labels: Vec<String> = x_axis.labels().iter().map(|s| s.to_string()).collect();
        let col_labels: Vec<String> = y_axis.labels().iter().map(|s| s.to_string()).collect();
        DistributionTable {
            kind: TableKind::Joint,
            x_axis,
            y_axis,
            rows: vec![vec![0.0; col_labels.len()]; row_labels.len()],
            row_support: vec![0.0; row_labels.len()],
            row_labels,
            col_labels,
        }
    }

    pub(crate) fn add(&mut self, x: usize, y: usize, mass: f64) {
        self.rows[x][y] += mass;
        self.row_support[x] += mass;
    }

    /// Normalizes the whole table to a joint distribution.
    pub(crate) fn into_joint(mut self) -> Self {
        let total: f64 = self.row_support.iter().sum();
        if total > 0.0 {
            for row in &mut self.rows {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        self.kind = TableKind::Joint;
        self
    }

    /// Normalizes each populated row to sum to one.
    pub(crate) fn into_conditional(mut self) -> Self {
        for (row, &support) in self.rows.iter_mut().zip(&self.row_support) {
            if support > 0.0 {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        self.kind = TableKind::Conditional;
        self
    }

    pub fn is_row_empty(&self, row: usize) -> bool {
        self.row_support[row] <= 0.0
    }

    pub fn row_index(&self, label: &str) -> Option<usize> {
        self.row_labels.iter().position(|l| l == label)
    }

    pub fn col_index(&self, label: &str) -> Option<usize> {
        self.col_labels.iter().position(|l| l == label)
    }

    /// `P(y | x)` (or the joint cell) by label.
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        Some(self.rows[self.row_index(row)?][self.col_index(col)?])
    }

    /// Column label with the largest value in `row`; first wins ties.
    pub fn row_argmax(&self, row: usize) -> Option<&str> {
        if self.is_row_empty(row) {
            return None;
        }
        let best = crate::numerics::argmax(&self.rows[row]);
        Some(&self.col_labels[best])
    }

    /// Largest absolute cell difference over rows populated in both tables.
    pub fn max_abs_diff(&self, other: &DistributionTable) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, (a, b)) in self.rows.iter().zip(&other.rows).enumerate() {
            if self.is_row_empty(i) || other.is_row_empty(i) {
                continue;
            }
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    /// Row label, then one column per Y label. Empty rows are written as
    /// zeros.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\\{}", self.x_axis, self.y_axis);
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.rows) {
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn title(&self) -> String {
        match self.kind {
            TableKind::Conditional => format!("P({} | {})", self.y_axis, self.x_axis),
            TableKind::Joint => format!("P({}, {})", self.x_axis, self.y_axis),
        }
    }
}

fn counts(corpus: &[Conversation], x: Axis, y: Axis) -> Result<DistributionTable> {
    if corpus.is_empty() {
        return Err(Error::invalid("distribution of an empty corpus"));
    }
    if x == y {
        return Err(Error::invalid(format!("axis {x} paired with itself")));
    }
    let mut table = DistributionTable::new_counts(x, y);
    for conv in corpus {
        let triple = conv.response_triple();
        table.add(x.value_of(&triple), y.value_of(&triple), 1.0);
    }
    Ok(table)
}

/// Joint frequency of two response-side label axes.
pub fn joint_distribution(corpus: &[Conversation], x: Axis, y: Axis) -> Result<DistributionTable> {
    Ok(counts(corpus, x, y)?.into_joint())
}

/// `P(y | x)` over the final responses of `corpus`.
pub fn conditional_distribution(
    corpus: &[Conversation],
    x: Axis,
    y: Axis,
) -> Result<DistributionTable> {
    Ok(counts(corpus, x, y)?.into_conditional())
}

/// Per-axis label frequencies of the final responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    /// Share of responses adopting each mechanism, computed independently
    /// (a response can adopt several).
    pub cm: [f64; 3],
    pub da: Vec<f64>,
    pub em: Vec<f64>,
    pub count: usize,
}

pub fn factor_marginals(corpus: &[Conversation]) -> Result<Marginals> {
    if corpus.is_empty() {
        return Err(Error::invalid("marginals of an empty corpus"));
    }
    let mut cm = [0.0; 3];
    let mut da = vec![0.0; DialogAct::COUNT];
    let mut em = vec![0.0; Emotion::COUNT];
    for conv in corpus {
        let t = conv.response_triple();
        for m in Mechanism::ALL {
            if t.cm.get(m) {
                cm[m.index()] += 1.0;
            }
        }
        da[t.da.index()] += 1.0;
        em[t.em.index()] += 1.0;
    }
    let n = corpus.len() as f64;
    cm.iter_mut().for_each(|v| *v /= n);
    da.iter_mut().for_each(|v| *v /= n);
    em.iter_mut().for_each(|v| *v /= n);
    Ok(Marginals {
        cm,
        da,
        em,
        count: corpus.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::conv;
    use super::*;

    #[test]
    fn delta_conditional() {
        let c = vec![conv("a", &[0, 1], (true, false, false), "questioning", "surprise")];
        let t = conditional_distribution(&c, Axis::Da, Axis::Em).unwrap();
        assert_eq!(t.get("questioning", "surprise"), Some(1.0));
        assert!(t.is_row_empty(t.row_index("consoling").unwrap()));
    }

    #[test]
    fn hand_counted_conditionals() {
        let c = vec![
            conv("1", &[0, 1], (true, false, false), "questioning", "joy"),
            conv("2", &[0, 1], (true, false, false), "questioning", "joy"),
            conv("3", &[0, 1], (true, false, false), "consoling", "joy"),
            conv("4", &[0, 1], (false, true, false), "consoling", "joy"),
        ];
        let er = conditional_distribution(&c, Axis::Er, Axis::Da).unwrap();
        assert!((er.get("yes", "questioning").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((er.get("yes", "consoling").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let ip = conditional_distribution(&c, Axis::Ip, Axis::Da).unwrap();
        assert_eq!(ip.get("yes", "consoling"), Some(1.0));
        for table in [&er, &ip] {
            for (i, row) in table.rows.iter().enumerate() {
                if !table.is_row_empty(i) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
        let joint = joint_distribution(&c, Axis::Er, Axis::Da).unwrap();
        let total: f64 = joint.rows.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(joint.get("yes", "questioning"), Some(0.5));
    }

    #[test]
    fn csv_layout() {
        let c = vec![conv("a", &[0, 1], (false, false, true), "questioning", "surprise")];
        let t = conditional_distribution(&c, Axis::Ex, Axis::Da).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("cm-ex\\da,questioning,acknowledging"));
        assert!(lines.next().unwrap().starts_with("no,0,0"));
        assert!(lines.next().unwrap().starts_with("yes,1,0"));
    }

    #[test]
    fn marginals() {
        let c = vec![
            conv("1", &[0, 1], (true, false, true), "questioning", "joy"),
            conv("2", &[0, 1], (true, false, false), "questioning", "joy"),
            conv("3", &[0, 1], (true, false, false), "consoling", "caring"),
            conv("4", &[0, 1], (true, true, false), "wishing", "joy"),
            conv("5", &[0, 1], (true, false, false), "questioning", "surprise"),
        ];
        let m = factor_marginals(&c).unwrap();
        assert_eq!(m.cm, [1.0, 0.2, 0.2]);
        let da = |n: &str| m.da[n.parse::<DialogAct>().unwrap().index()];
        assert_eq!(da("questioning"), 0.6);
        assert_eq!(da("consoling"), 0.2);
        assert_eq!(da("wishing"), 0.2);
        assert!((m.da.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((m.em.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(factor_marginals(&[]).is_err());
        assert!(conditional_distribution(&[], Axis::Da, Axis::Em).is_err());
    }
}

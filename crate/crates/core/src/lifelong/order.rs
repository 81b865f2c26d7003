use std::collections::BTreeSet;

use crate::error::{LfsError, Result};

/// Symmetric pairwise distances between named domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub names: Vec<String>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if values.len() != n * n {
            return Err(LfsError::shape("distance matrix", n * n, values.len()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != n {
            return Err(LfsError::Config("duplicate domain names in distance matrix".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if !a.is_finite() || (a - b).abs() > 1e-12 {
                    return Err(LfsError::Config(format!(
                        "distance matrix must be finite and symmetric at ({}, {})",
                        names[i], names[j]
                    )));
                }
            }
        }
        Ok(DistanceMatrix { names, values })
    }

    /// Parses a CSV with a header row and a leading name column. A blank
    /// cell takes its mirrored value; a blank diagonal is 0.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<String>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
            .collect();
        let (header, body) = rows.split_first().ok_or(LfsError::Empty("distance matrix"))?;
        let names: Vec<String> = header.iter().skip(1).cloned().collect();
        let n = names.len();
        if n == 0 {
            return Err(LfsError::Empty("distance matrix"));
        }
        if body.len() != n {
            return Err(LfsError::shape("distance matrix rows", n, body.len()));
        }
        let mut cells: Vec<Option<f64>> = vec![None; n * n];
        for (i, row) in body.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(LfsError::shape("distance matrix columns", n + 1, row.len()));
            }
            if row[0] != names[i] {
                return Err(LfsError::Config(format!(
                    "row {} is labelled `{}` but the header says `{}`",
                    i + 1,
                    row[0],
                    names[i]
                )));
            }
            for (j, cell) in row[1..].iter().enumerate() {
                if !cell.is_empty() {
                    let v = cell
                        .parse::<f64>()
                        .map_err(|_| LfsError::Config(format!("bad distance `{cell}`")))?;
                    cells[i * n + j] = Some(v);
                }
            }
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = match (cells[i * n + j], cells[j * n + i]) {
                    (Some(v), _) | (None, Some(v)) => v,
                    (None, None) if i == j => 0.0,
                    (None, None) => {
                        return Err(LfsError::Config(format!("missing distance {} / {}", names[i], names[j])));
                    }
                };
            }
        }
        DistanceMatrix::new(names, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(",{}\n", self.names.join(","));
        let n = self.names.len();
        for (i, name) in self.names.iter().enumerate() {
            let row: Vec<String> = self.values[i * n..(i + 1) * n].iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{name},{}\n", row.join(",")));
        }
        out
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.names.len() + j]
    }
}

/// Greedy farthest-next ordering starting from `source`; ties go to the
/// alphabetically first name.
pub fn order_tasks(matrix: &DistanceMatrix, source: &str) -> Result<Vec<String>> {
    let mut current = matrix
        .index(source)
        .ok_or_else(|| LfsError::UnknownTask(source.to_string()))?;
    let mut remaining: Vec<usize> = (0..matrix.names.len()).filter(|&i| i != current).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for pos in 1..remaining.len() {
            let (cand, inc) = (remaining[pos], remaining[best]);
            let (dc, di) = (matrix.get(current, cand), matrix.get(current, inc));
            if dc > di || (dc == di && matrix.names[cand] < matrix.names[inc]) {
                best = pos;
            }
        }
        current = remaining.remove(best);
        order.push(matrix.names[current].clone());
    }
    Ok(order)
}

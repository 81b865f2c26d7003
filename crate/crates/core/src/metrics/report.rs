use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Flat list of named metric values for one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub task_id: String,
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn new(task_id: impl Into<String>) -> Self {
        MetricsReport {
            task_id: task_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.entries.push((metric.into(), value));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    /// One `metric=value` line per entry.
    pub fn to_lines(&self) -> String {
        self.entries.iter().map(|(m, v)| format!("{m}={v}\n")).collect()
    }

    /// Rows of `task_id,metric,value`, without header.
    pub fn to_csv_rows(&self) -> String {
        self.entries
            .iter()
            .map(|(m, v)| format!("{},{m},{v}\n", self.task_id))
            .collect()
    }

    /// Appends rows to `path`, writing the header when the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            f.write_all(b"task_id,metric,value\n")?;
        }
        f.write_all(self.to_csv_rows().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_and_csv() {
        let mut r = MetricsReport::new("t1");
        r.push("b_lpips", 0.25);
        r.push("frechet", 3.0);
        assert_eq!(r.to_lines(), "b_lpips=0.25\nfrechet=3\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.append_csv(&p).unwrap();
        r.append_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), "task_id,metric,value");
        assert_eq!(r.get("frechet"), Some(3.0));
    }
}

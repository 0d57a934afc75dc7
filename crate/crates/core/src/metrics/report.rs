//! Tabular evaluation output.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub name: String,
    pub values: Vec<f64>,
}

/// Per-image metric table plus dataset-level means.
///
/// Rendered as tab-separated text:
///
/// ```text
/// task	discovery
/// image	ari_fg
/// 0000	0.981132
/// 0001	1.000000
/// mean	0.990566
/// ```
///
/// followed by any `note` lines (for example the cluster-to-class matching).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub columns: Vec<String>,
    pub images: Vec<ImageRow>,
    pub notes: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>, columns: &[&str]) -> Self {
        EvalReport {
            task: task.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            images: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "row width");
        self.images.push(ImageRow {
            name: name.into(),
            values,
        });
    }

    pub fn note(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.notes.push((key.into(), value.into()));
    }

    /// Arithmetic mean of every column over the images, in image order.
    pub fn means(&self) -> Vec<f64> {
        let n = self.images.len().max(1) as f64;
        (0..self.columns.len())
            .map(|c| self.images.iter().map(|r| r.values[c]).sum::<f64>() / n)
            .collect()
    }

    pub fn mean_of(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.means()[c])
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task\t{}", self.task)?;
        writeln!(f, "image\t{}", self.columns.join("\t"))?;
        let line = |f: &mut fmt::Formatter<'_>, name: &str, values: &[f64]| {
            write!(f, "{name}")?;
            for v in values {
                write!(f, "\t{v:.6}")?;
            }
            writeln!(f)
        };
        for r in &self.images {
            line(f, &r.name, &r.values)?;
        }
        line(f, "mean", &self.means())?;
        for (k, v) in &self.notes {
            writeln!(f, "{k}\t{v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_rows_and_mean() {
        let mut r = EvalReport::new("fg", &["miou", "dice"]);
        r.push("0000", vec![0.5, 1.0]);
        r.push("0001", vec![1.0, 0.0]);
        r.note("images", "2");
        assert_eq!(
            r.to_string(),
            "task\tfg\nimage\tmiou\tdice\n0000\t0.500000\t1.000000\n0001\t1.000000\t0.000000\nmean\t0.750000\t0.500000\nimages\t2\n"
        );
        assert_eq!(r.mean_of("dice"), Some(0.5));
        assert_eq!(r.mean_of("ari"), None);
    }
}

//! Two-stage incremental clustering for text-assignment executions.

pub const TAU_LOOSE: f64 = 0.3;
pub const TAU_STRICT: f64 = 0.1;

/// Levenshtein distance over chars divided by the longer length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case-insensitive substring in either direction after whitespace
/// collapse.
pub fn contains_either(a: &str, b: &str) -> bool {
    let (a, b) = (collapse(a), collapse(b));
    a.contains(&b) || b.contains(&a)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextClustering {
    pub labels: Vec<usize>,
    /// Index of the string that founded each cluster.
    pub prototypes: Vec<usize>,
}

impl TextClustering {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.prototypes.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Stage 1 joins the first prototype that contains or is contained in the
/// string with ED ≤ `tau_loose`; stage 2 joins the nearest prototype with
/// ED ≤ `tau_strict` (first on ties); otherwise the string founds a new
/// cluster.
pub fn cluster_text<S: AsRef<str>>(strings: &[S], tau_loose: f64, tau_strict: f64) -> TextClustering {
    let mut labels = Vec::with_capacity(strings.len());
    let mut prototypes: Vec<usize> = Vec::new();
    for (i, x) in strings.iter().enumerate() {
        let x = x.as_ref();
        let dists: Vec<f64> = prototypes.iter().map(|&p| normalized_edit_distance(x, strings[p].as_ref())).collect();
        let loose = prototypes
            .iter()
            .zip(&dists)
            .position(|(&p, &d)| d <= tau_loose && contains_either(x, strings[p].as_ref()));
        let strict = || {
            dists
                .iter()
                .enumerate()
                .filter(|(_, d)| **d <= tau_strict)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
        };
        match loose.or_else(strict) {
            Some(j) => labels.push(j),
            None => {
                labels.push(prototypes.len());
                prototypes.push(i);
            }
        }
    }
    TextClustering { labels, prototypes }
}

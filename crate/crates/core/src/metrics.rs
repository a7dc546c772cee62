//! Recognition metrics and attention misalignment diagnostics.

use std::fmt::Write as _;

/// Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Character-level edit distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b)
}

fn ratio(errors: usize, total: usize) -> f64 {
    match (errors, total) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => errors as f64 / total as f64,
    }
}

/// Total character edit distance over total ground-truth characters.
pub fn cer<S: AsRef<str>, T: AsRef<str>>(preds: &[S], gts: &[T]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "cer needs paired predictions and labels");
    let (mut errors, mut total) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        errors += edit_distance(p.as_ref(), g.as_ref());
        total += g.as_ref().chars().count();
    }
    ratio(errors, total)
}

/// Word-level analogue of [`cer`]; words are separated by whitespace.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(preds: &[S], gts: &[T]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "wer needs paired predictions and labels");
    let (mut errors, mut total) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let pw: Vec<&str> = p.as_ref().split_whitespace().collect();
        let gw: Vec<&str> = g.as_ref().split_whitespace().collect();
        errors += levenshtein(&pw, &gw);
        total += gw.len();
    }
    ratio(errors, total)
}

/// Fraction of exact matches.
pub fn seq_acc<S: AsRef<str>, T: AsRef<str>>(preds: &[S], gts: &[T]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "seq_acc needs paired predictions and labels");
    if gts.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    hits as f64 / gts.len() as f64
}

/// Number of steps whose attention center lies strictly left of the previous one.
pub fn measure_misalignment(xs: &[usize]) -> usize {
    xs.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Length buckets `[0,30), [30,40), [40,50), [50,60), [60,70)`.
pub const DEFAULT_BUCKETS: [(usize, usize); 5] = [(0, 30), (30, 40), (40, 50), (50, 60), (60, 70)];

/// Parse `"0,30,40"` style boundaries into consecutive half-open buckets.
pub fn parse_buckets(s: &str) -> Option<Vec<(usize, usize)>> {
    let edges = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().ok())
        .collect::<Option<Vec<_>>>()?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return None;
    }
    Some(edges.windows(2).map(|w| (w[0], w[1])).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    /// `None` for a bucket without samples.
    pub mm_per_img: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisalignmentReport {
    pub buckets: Vec<BucketStats>,
    /// `(label length, misalignment count)` per sample, in input order.
    pub samples: Vec<(usize, usize)>,
}

impl MisalignmentReport {
    /// Mean misalignments over every sample, bucketed or not.
    pub fn overall(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let total: usize = self.samples.iter().map(|s| s.1).sum();
        Some(total as f64 / self.samples.len() as f64)
    }

    /// `bucket_lo,bucket_hi,n,mm_per_img`; empty buckets leave the value blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_lo,bucket_hi,n,mm_per_img\n");
        for b in &self.buckets {
            let _ = writeln!(out, "{},{},{},{}", b.lo, b.hi, b.n, fmt_opt(b.mm_per_img));
        }
        out
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Group `(length, count)` samples into half-open length buckets.
pub fn mm_per_image(samples: &[(usize, usize)], buckets: &[(usize, usize)]) -> MisalignmentReport {
    let buckets = buckets
        .iter()
        .map(|&(lo, hi)| {
            let (n, total) = samples
                .iter()
                .filter(|s| (lo..hi).contains(&s.0))
                .fold((0, 0), |(n, t), s| (n + 1, t + s.1));
            BucketStats {
                lo,
                hi,
                n,
                mm_per_img: (n > 0).then(|| total as f64 / n as f64),
            }
        })
        .collect();
    MisalignmentReport {
        buckets,
        samples: samples.to_vec(),
    }
}

/// CER restricted to samples whose label length falls in each bucket.
pub fn bucket_cer(preds: &[String], gts: &[String], buckets: &[(usize, usize)]) -> Vec<Option<f64>> {
    buckets
        .iter()
        .map(|&(lo, hi)| {
            let idx: Vec<usize> = (0..gts.len())
                .filter(|&i| (lo..hi).contains(&gts[i].chars().count()))
                .collect();
            if idx.is_empty() {
                return None;
            }
            let p: Vec<&str> = idx.iter().map(|&i| preds[i].as_str()).collect();
            let g: Vec<&str> = idx.iter().map(|&i| gts[i].as_str()).collect();
            Some(cer(&p, &g))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn misalignment_examples() {
        assert_eq!(measure_misalignment(&[2, 5, 3, 7, 6]), 2);
        assert_eq!(measure_misalignment(&[4]), 0);
        assert_eq!(measure_misalignment(&[3, 3, 3]), 0);
    }

    #[test]
    fn bucket_parsing() {
        assert_eq!(parse_buckets("0,30,40"), Some(vec![(0, 30), (30, 40)]));
        assert_eq!(parse_buckets("5"), None);
        assert_eq!(parse_buckets("5,3"), None);
    }
}

//! Single-view admission filter over open-vocabulary label scores.
//!
//! An image enters the synthesis pool when its single highest-scoring
//! label is a positive label. Exact ties that involve any negative label
//! reject, biasing the pool toward precision. Scoring itself happens out
//! of process; score vectors arrive through files or a caller-supplied
//! client, aligned with the label set's fixed order (positives first,
//! then negatives).

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("score vector holds {got} entries, label set holds {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label set must have nonempty, disjoint positive and negative lists: {0}")]
    BadLabelSet(String),
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("label file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("failed to read label file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Positive and negative admission labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionLabelSet {
    positive: Vec<String>,
    negative: Vec<String>,
}

impl AdmissionLabelSet {
    pub fn new(positive: Vec<String>, negative: Vec<String>) -> Result<Self, FilterError> {
        if positive.is_empty() || negative.is_empty() {
            return Err(FilterError::BadLabelSet("a list is empty".into()));
        }
        if positive.iter().any(|p| negative.contains(p)) {
            return Err(FilterError::BadLabelSet("lists share a label".into()));
        }
        Ok(Self { positive, negative })
    }

    /// The compiled-in label inventory.
    pub fn builtin() -> Self {
        let positive = [
            "an iPhone photo of an indoor scene",
            "an iphone photo of an outdoor scene",
            "a DSLR photo of an indoor scene",
            "a DSLR of an outdoor scene",
        ];
        let negative = [
            "a close up shot of a single object",
            "a product displayed in front of a white background",
            "an artwork",
            "a painting",
            "a screenshot of a graphical user interface",
            "a piece of text",
            "a sketch",
        ];
        Self {
            positive: positive.iter().map(|s| s.to_string()).collect(),
            negative: negative.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Loads `positive\t<label>` / `negative\t<label>` records; blank
    /// lines and '#' comments are skipped.
    pub fn from_text(content: &str) -> Result<Self, FilterError> {
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (side, label) = line.split_once('\t').ok_or_else(|| FilterError::Parse {
                line: i + 1,
                reason: "expected '<side>\\t<label>'".into(),
            })?;
            match side {
                "positive" => positive.push(label.to_string()),
                "negative" => negative.push(label.to_string()),
                other => {
                    return Err(FilterError::Parse {
                        line: i + 1,
                        reason: format!("unknown side '{other}'"),
                    })
                }
            }
        }
        Self::new(positive, negative)
    }

    pub fn from_path(path: &Path) -> Result<Self, FilterError> {
        let content = std::fs::read_to_string(path).map_err(|source| FilterError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&content)
    }

    pub fn positive(&self) -> &[String] {
        &self.positive
    }

    pub fn negative(&self) -> &[String] {
        &self.negative
    }

    /// Positives then negatives; score vectors follow this order.
    pub fn all_labels(&self) -> impl Iterator<Item = &str> {
        self.positive.iter().chain(&self.negative).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees both lists nonempty
    }
}

/// One similarity score per label, in label-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelScores(Vec<f64>);

impl LabelScores {
    pub fn new(scores: Vec<f64>) -> Result<Self, FilterError> {
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(FilterError::NonFiniteScore(bad));
        }
        Ok(Self(scores))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// True when the single top-scoring label is positive. Any exact tie with
/// a negative label rejects.
pub fn admit(scores: &LabelScores, labels: &AdmissionLabelSet) -> Result<bool, FilterError> {
    if scores.0.len() != labels.len() {
        return Err(FilterError::LengthMismatch { expected: labels.len(), got: scores.0.len() });
    }
    let top = scores.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut any_positive = false;
    for (i, &s) in scores.0.iter().enumerate() {
        if s == top {
            if i >= labels.positive.len() {
                return Ok(false); // a negative label shares the top score
            }
            any_positive = true;
        }
    }
    Ok(any_positive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_with_top(labels: &AdmissionLabelSet, top_index: usize) -> LabelScores {
        let mut v = vec![0.1; labels.len()];
        v[top_index] = 0.9;
        LabelScores::new(v).unwrap()
    }

    #[test]
    fn top_positive_admits() {
        let labels = AdmissionLabelSet::builtin();
        let idx = labels
            .all_labels()
            .position(|l| l == "a DSLR photo of an indoor scene")
            .unwrap();
        let scores = scores_with_top(&labels, idx);
        assert!(admit(&scores, &labels).unwrap());
    }

    #[test]
    fn top_negative_rejects() {
        let labels = AdmissionLabelSet::builtin();
        let idx = labels
            .all_labels()
            .position(|l| l == "a close up shot of a single object")
            .unwrap();
        let scores = scores_with_top(&labels, idx);
        assert!(!admit(&scores, &labels).unwrap());
    }

    #[test]
    fn all_equal_rejects() {
        let labels = AdmissionLabelSet::builtin();
        let scores = LabelScores::new(vec![0.5; labels.len()]).unwrap();
        assert!(!admit(&scores, &labels).unwrap());
    }

    #[test]
    fn tie_between_positives_admits() {
        let labels = AdmissionLabelSet::builtin();
        let mut v = vec![0.0; labels.len()];
        v[0] = 0.7;
        v[1] = 0.7;
        assert!(admit(&LabelScores::new(v).unwrap(), &labels).unwrap());
    }

    #[test]
    fn length_mismatch_is_configuration_error() {
        let labels = AdmissionLabelSet::builtin();
        let scores = LabelScores::new(vec![0.5; 3]).unwrap();
        assert!(matches!(
            admit(&scores, &labels).unwrap_err(),
            FilterError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn decision_invariant_under_joint_permutation() {
        // permuting labels (with scores permuted identically) within each
        // side never changes the decision
        let labels = AdmissionLabelSet::builtin();
        let mut rng = crate::rng::SeededRng::new(8);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..labels.len()).map(|_| rng.next_f64()).collect();
            let baseline =
                admit(&LabelScores::new(scores.clone()).unwrap(), &labels).unwrap();

            let mut pos_idx: Vec<usize> = (0..labels.positive().len()).collect();
            let mut neg_idx: Vec<usize> =
                (labels.positive().len()..labels.len()).collect();
            rng.shuffle(&mut pos_idx);
            rng.shuffle(&mut neg_idx);
            let permuted_labels = AdmissionLabelSet::new(
                pos_idx.iter().map(|&i| labels.positive()[i].clone()).collect(),
                neg_idx
                    .iter()
                    .map(|&i| labels.negative()[i - labels.positive().len()].clone())
                    .collect(),
            )
            .unwrap();
            let permuted_scores: Vec<f64> =
                pos_idx.iter().chain(&neg_idx).map(|&i| scores[i]).collect();
            let permuted =
                admit(&LabelScores::new(permuted_scores).unwrap(), &permuted_labels).unwrap();
            assert_eq!(baseline, permuted);
        }
    }

    #[test]
    fn decision_invariant_under_constant_shift() {
        let labels = AdmissionLabelSet::builtin();
        let mut rng = crate::rng::SeededRng::new(9);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..labels.len()).map(|_| rng.next_f64()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 3.75).collect();
            let a = admit(&LabelScores::new(scores).unwrap(), &labels).unwrap();
            let b = admit(&LabelScores::new(shifted).unwrap(), &labels).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn label_set_validation() {
        assert!(AdmissionLabelSet::new(vec![], vec!["x".into()]).is_err());
        assert!(AdmissionLabelSet::new(vec!["x".into()], vec!["x".into()]).is_err());
    }

    #[test]
    fn label_file_round_trip() {
        let labels = AdmissionLabelSet::builtin();
        let mut text = String::new();
        for l in labels.positive() {
            text.push_str(&format!("positive\t{l}\n"));
        }
        for l in labels.negative() {
            text.push_str(&format!("negative\t{l}\n"));
        }
        assert_eq!(AdmissionLabelSet::from_text(&text).unwrap(), labels);
    }
}

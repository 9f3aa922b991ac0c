//! Top-1 accuracy for single-label data and macro ROC AUC for multi-label data.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::argmax;
use crate::error::CoreError;
use crate::types::{PosteriorClip, Prediction, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Top1Report {
    pub accuracy: f64,
    pub n_clips: usize,
    /// Clips with a missing or unusable prediction; counted as wrong.
    pub n_unscored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucReport {
    pub macro_auc: f64,
    /// Categories with at least one positive and one negative clip.
    pub scored_categories: usize,
    pub n_clips: usize,
    pub n_unscored: usize,
}

fn index_predictions<'a>(
    preds: &'a [PredictionRecord],
    clips: &[PosteriorClip],
) -> Result<BTreeMap<&'a str, &'a Prediction>, CoreError> {
    let known: BTreeMap<&str, ()> = clips.iter().map(|c| (c.clip_id.as_str(), ())).collect();
    let mut by_clip = BTreeMap::new();
    for rec in preds {
        if !known.contains_key(rec.clip_id.as_str()) {
            return Err(CoreError::UnknownClip(rec.clip_id.clone()));
        }
        if by_clip.insert(rec.clip_id.as_str(), &rec.predicted).is_some() {
            return Err(CoreError::DuplicateClip(rec.clip_id.clone()));
        }
    }
    Ok(by_clip)
}

/// Fraction of clips whose predicted category equals the single true label.
/// Score-vector predictions are reduced by argmax.
pub fn top1_accuracy(
    preds: &[PredictionRecord],
    clips: &[PosteriorClip],
) -> Result<Top1Report, CoreError> {
    let by_clip = index_predictions(preds, clips)?;
    let mut correct = 0usize;
    let mut unscored = 0usize;
    for clip in clips {
        let label = clip
            .single_label()
            .ok_or_else(|| CoreError::MultiLabelData(clip.clip_id.clone()))?;
        let guess = match by_clip.get(clip.clip_id.as_str()) {
            Some(Prediction::Category(c)) => Some(*c),
            Some(Prediction::Scores(s)) if !s.is_empty() => Some(argmax(s)),
            _ => None,
        };
        match guess {
            Some(g) if g == label => correct += 1,
            Some(_) => {}
            None => unscored += 1,
        }
    }
    let accuracy = if clips.is_empty() {
        0.0
    } else {
        correct as f64 / clips.len() as f64
    };
    Ok(Top1Report {
        accuracy,
        n_clips: clips.len(),
        n_unscored: unscored,
    })
}

/// ROC AUC of one category via the Mann–Whitney rank statistic, ties counted as one half.
/// `None` when either class is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of per-category ROC AUC over categories that have both classes.
///
/// Category predictions count as one-hot scores; missing or unscored clips get all-zero scores.
pub fn macro_auc(
    preds: &[PredictionRecord],
    clips: &[PosteriorClip],
    num_categories: usize,
) -> Result<AucReport, CoreError> {
    let by_clip = index_predictions(preds, clips)?;
    let mut unscored = 0usize;
    let mut matrix: Vec<Vec<f64>> = Vec::with_capacity(clips.len());
    for clip in clips {
        let row = match by_clip.get(clip.clip_id.as_str()) {
            Some(Prediction::Scores(s)) => {
                if s.len() != num_categories {
                    return Err(CoreError::ShapeMismatch("score vector length differs from C"));
                }
                s.clone()
            }
            Some(Prediction::Category(c)) => {
                let mut one_hot = vec![0.0; num_categories];
                *one_hot.get_mut(*c).ok_or(CoreError::LabelOutOfRange {
                    label: *c,
                    num_categories,
                })? = 1.0;
                one_hot
            }
            _ => {
                unscored += 1;
                vec![0.0; num_categories]
            }
        };
        matrix.push(row);
    }

    let mut total = 0.0;
    let mut scored = 0usize;
    let mut column = Vec::with_capacity(clips.len());
    let mut positive = Vec::with_capacity(clips.len());
    for c in 0..num_categories {
        column.clear();
        positive.clear();
        column.extend(matrix.iter().map(|r| r[c]));
        positive.extend(clips.iter().map(|clip| clip.labels.contains(&c)));
        if let Some(auc) = roc_auc(&column, &positive) {
            total += auc;
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(CoreError::NoScorableCategory);
    }
    Ok(AucReport {
        macro_auc: total / scored as f64,
        scored_categories: scored,
        n_clips: clips.len(),
        n_unscored: unscored,
    })
}

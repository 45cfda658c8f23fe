use crate::error::{usage_err, Result};

/// Mann–Whitney ROC AUC: `P(s_anom > s_nom) + ½·P(tie)`, via midranks.
///
/// Sums are kept in doubled integer units, so the result is bit-identical to
/// counting pairs.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(usage_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(usage_err!("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(usage_err!("AUC needs both nominal and anomalous samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // 2·(rank sum of positives), ranks 1-based; a tie block spanning ranks
    // i+1..=j has midrank (i+1+j)/2
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += positives * (i as u64 + 1 + j as u64);
        i = j;
    }
    // 2U = 2·R − n₁(n₁+1)
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// How pixel scores are aggregated across samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelAucMode {
    /// One AUC over all pixels of all samples.
    #[default]
    Pooled,
    /// Mean of per-sample AUCs over samples whose map has both classes.
    PerSampleMean,
}

impl PixelAucMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pooled" => Ok(Self::Pooled),
            "per_sample" => Ok(Self::PerSampleMean),
            other => Err(usage_err!("unknown pixel AUC mode '{other}' (pooled | per_sample)")),
        }
    }
}

/// Pixel-level AUC of heatmaps against binary ground-truth maps. Both are
/// flattened per sample, one slice per sample.
pub fn pixel_auc(heatmaps: &[Vec<f64>], masks: &[Vec<bool>], mode: PixelAucMode) -> Result<f64> {
    if heatmaps.len() != masks.len() {
        return Err(usage_err!("{} heatmaps but {} masks", heatmaps.len(), masks.len()));
    }
    for (i, (h, m)) in heatmaps.iter().zip(masks).enumerate() {
        if h.len() != m.len() {
            return Err(usage_err!("heatmap {i} has {} pixels, mask has {}", h.len(), m.len()));
        }
    }
    match mode {
        PixelAucMode::Pooled => {
            let scores: Vec<f64> = heatmaps.iter().flatten().copied().collect();
            let labels: Vec<bool> = masks.iter().flatten().copied().collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                return Err(usage_err!("pixel AUC needs both anomalous and nominal pixels"));
            }
            roc_auc(&scores, &labels)
        }
        PixelAucMode::PerSampleMean => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (h, m) in heatmaps.iter().zip(masks) {
                if m.iter().any(|&l| l) && m.iter().any(|&l| !l) {
                    total += roc_auc(h, m)?;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(usage_err!("no sample has both anomalous and nominal pixels"));
            }
            Ok(total / count as f64)
        }
    }
}

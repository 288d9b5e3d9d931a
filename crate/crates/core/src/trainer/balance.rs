use crate::raster::LabelMask;

use super::TrainError;

/// Median-frequency class weights: `median(freq) / freq[c]`, with
/// frequencies over the non-void pixels of all masks. The median is taken
/// over classes that occur; a class that never occurs gets weight 0.
pub fn median_frequency_weights(masks: &[LabelMask], classes: usize) -> Result<Vec<f64>, TrainError> {
    let mut counts = vec![0u64; classes];
    for m in masks {
        for p in 0..m.data().len() {
            if let Some(c) = m.class_at(p) {
                if c >= classes {
                    return Err(TrainError::InvalidData(format!("class {c} outside 0..{classes}")));
                }
                counts[c] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(TrainError::InvalidData("every pixel is void".into()));
    }
    let freqs: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(weights_from_frequencies(&freqs))
}

/// Median-frequency weights from class frequencies; zero frequencies map to
/// zero weight and are left out of the median.
pub fn weights_from_frequencies(freqs: &[f64]) -> Vec<f64> {
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    if present.is_empty() {
        return vec![0.0; freqs.len()];
    }
    present.sort_by(f64::total_cmp);
    let mid = present.len() / 2;
    let median = if present.len() % 2 == 1 { present[mid] } else { 0.5 * (present[mid - 1] + present[mid]) };
    freqs
        .iter()
        .enumerate()
        .map(|(c, &f)| {
            if f > 0.0 {
                median / f
            } else {
                log::warn!("class {c} never occurs; its weight is 0");
                0.0
            }
        })
        .collect()
}

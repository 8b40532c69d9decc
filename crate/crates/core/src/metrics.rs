//! Overlap metrics on hard label maps.

use crate::error::{Error, Result};
use crate::tensor::LabelVolume;

/// Dice coefficient `2|P∩G| / (|P| + |G|)` for one class. Both sets empty
/// counts as perfect agreement.
pub fn dice_metric(pred: &LabelVolume, truth: &LabelVolume, class_id: u32) -> Result<f64> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape, truth.shape
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&truth.data) {
        let (a, b) = (p == class_id, g == class_id);
        inter += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Dice per foreground class `1..num_classes`.
pub fn foreground_dice(pred: &LabelVolume, truth: &LabelVolume, num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes as u32).map(|k| dice_metric(pred, truth, k)).collect()
}

/// Mean foreground Dice; with a single class the background is scored.
pub fn mean_foreground_dice(pred: &LabelVolume, truth: &LabelVolume, num_classes: usize) -> Result<f64> {
    if num_classes <= 1 {
        return dice_metric(pred, truth, 0);
    }
    let d = foreground_dice(pred, truth, num_classes)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[u32]) -> LabelVolume {
        LabelVolume::new([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn empty_against_empty_is_one() {
        assert_eq!(dice_metric(&lv(&[0, 0]), &lv(&[0, 0]), 1).unwrap(), 1.0);
    }

    #[test]
    fn partial_overlap() {
        // P = {0,1}, G = {1,2}: 2·1/(2+2)
        assert_eq!(dice_metric(&lv(&[1, 1, 0]), &lv(&[0, 1, 1]), 1).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(dice_metric(&lv(&[1]), &lv(&[1, 1]), 1).is_err());
    }
}

//! Level usage statistics for quantized tensors.

use std::collections::BTreeMap;

use crate::quant::LevelTensor;

/// Count of every representable level `n..=p`, including unused ones.
pub fn level_histogram(levels: &LevelTensor) -> BTreeMap<i32, usize> {
    let spec = levels.spec();
    let mut hist: BTreeMap<i32, usize> = (spec.lower_clip()..=spec.upper_clip()).map(|l| (l, 0)).collect();
    for &i in levels.indices() {
        *hist.entry(i).or_default() += 1;
    }
    hist
}

/// Number of levels that occur at least once.
pub fn distinct_levels(levels: &LevelTensor) -> usize {
    level_histogram(levels).values().filter(|&&c| c > 0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{QuantSpec, ScaleRule};

    #[test]
    fn histogram_covers_full_range() {
        let spec = QuantSpec::new(3, ScaleRule::LevelCount).unwrap();
        let t = LevelTensor::new(vec![-4, 0, 0, 3, 3, 3], spec, 0.5).unwrap();
        let h = level_histogram(&t);
        assert_eq!(h.len(), 8);
        assert_eq!(h[&3], 3);
        assert_eq!(h[&-1], 0);
        assert_eq!(h.values().sum::<usize>(), 6);
        assert_eq!(distinct_levels(&t), 3);
    }
}

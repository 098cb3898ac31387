use crate::networks::AvailabilityMask;

/// Four-modality row order as `(FLAIR, T1, T1c, T2)` bit patterns.
const TABLE_ORDER_4: [[bool; 4]; 15] = {
    const O: bool = false;
    const X: bool = true;
    [
        [O, O, O, X],
        [O, O, X, O],
        [O, X, O, O],
        [X, O, O, O],
        [O, O, X, X],
        [O, X, X, O],
        [X, X, O, O],
        [O, X, O, X],
        [X, O, O, X],
        [X, O, X, O],
        [X, X, X, O],
        [X, X, O, X],
        [X, O, X, X],
        [O, X, X, X],
        [X, X, X, X],
    ]
};

/// All `2^m - 1` non-empty subsets in report order.
///
/// With four modalities this is the conventional BraTS report order. Otherwise subsets
/// ascend in size, and within a size in the binary value of the mask read
/// with the last modality as the least significant bit.
pub fn subset_order(m: usize) -> Vec<AvailabilityMask> {
    if m == 4 {
        return TABLE_ORDER_4.iter().map(|r| AvailabilityMask::new(r.to_vec())).collect();
    }
    let mut masks: Vec<Vec<bool>> = (1u64..1 << m)
        .map(|bits| (0..m).map(|j| bits >> (m - 1 - j) & 1 == 1).collect())
        .collect();
    masks.sort_by_key(|d| (d.iter().filter(|&&b| b).count(), d.iter().fold(0u64, |acc, &b| acc << 1 | b as u64)));
    masks.into_iter().map(AvailabilityMask::new).collect()
}

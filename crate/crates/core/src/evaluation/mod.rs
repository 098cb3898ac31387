//! Missing-modality evaluation: subset enumeration, sliding-window inference,
//! region Dice reports and representation export.

mod infer;
mod metrics;
mod report;
mod representations;
mod subsets;


pub use infer::{argmax_classes, encode_subject, infer_subset, subset_logits, window_starts, EncodedSubject};
pub use metrics::{dice_score, region_dice, RegionSpec};
pub use report::{check_region_nesting, evaluate_all_subsets, evaluate_subsets, subject_subset_dice, SubsetReport, SubsetRow};
pub use representations::{
    alignment_metrics, encode_representations, export_representations, representations_csv, AlignmentReport,
    RepresentationRecord,
};
pub use subsets::subset_order;

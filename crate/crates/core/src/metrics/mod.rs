//! Recall of predicted graphs and layout-constraint accuracy of generated
//! scenes.

pub mod constraints;
pub mod recall;
pub mod relations;

pub use constraints::{count_constraints, eval_constraints, eval_constraints_many, ConstraintCounts, ConstraintReport, RelationAccuracy};
pub use recall::{recall, recall_counts, RecallCounts, RecallReport};
pub use relations::{annotate, holds, most_specific, AnnotationMode, Placed, Relation, RelationThresholds};

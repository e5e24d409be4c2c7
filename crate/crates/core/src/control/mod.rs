//! Reading senses and intervening on them: vocabulary projections, topic
//! control through δ reweighting, gender-bias mitigation by sense scaling,
//! and knowledge editing.
//!
//! Interventions return new [`ModelView`](crate::model::ModelView)s; the
//! model they were built from is never modified.

mod bias;
mod edit;
mod projection;
mod topic;

pub use bias::{
    bias_ratio, find_bias_sense, nullspace_debias_baseline, nullspace_project, optimize_sense_scale, prompt_bias,
    scale_sense, BiasEvalSuite, BiasSense, EncodedProfession, EncodedSuite, PromptSet, ScaleFit, SCALE_GRID_STEPS, SLOT,
};
pub use edit::{knowledge_edit, EditMode, EditSpec};
pub use projection::{
    sense_projection, sense_projection_bottomk, sense_projection_topk, topic_scores, BagOfWords, Normalizer,
    TopicScore, TopicScores, TOPIC_BAGS,
};
pub use topic::{
    anneal_delta, anneal_deltas, assign_deltas, topic_csv_row, topic_generate, topic_generate_with, AnnealState, ControlStrength,
    DeltaTraceStep, InitialDeltas, TopicGeneration, DELTA_TABLE, QUANTILES, TOPIC_CSV_HEADER,
};

/// Quotes a CSV field when it needs it.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

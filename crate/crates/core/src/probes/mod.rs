//! Mechanism readouts computed on frozen snapshots.

mod attention;
mod record;
mod spectral;

pub use attention::{attention_entropy, attention_entropy_rows, logit_ratio, logit_rms, lower_copy_score, CopyScore};
pub use record::{
    ablation_ppl_delta, eval_loss, ffn_write_rms, probe_model, tokens_to_target, FfnWriteRms, ProbeContext, ProbeRecord,
};
pub use spectral::{
    estimate_projector, locality_ratios, operator_norm, qk_bilinear_top_sv, ImmatureProjector, Locality, PowerResult,
    PROJECTOR_METHOD,
};

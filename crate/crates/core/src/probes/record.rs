use serde::{Deserialize, Serialize};

use super::attention::{attention_entropy, logit_ratio, logit_rms, lower_copy_score};
use super::spectral::{estimate_projector, locality_ratios, qk_bilinear_top_sv};
use crate::data::PackedBatch;
use crate::error::{Error, Result};
use crate::model::{AblationMode, CaptureRequest, DecoderModel, ForwardCaptures, ModelView};
use crate::scalar::Scalar;

/// Every readout taken at one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub tokens: u64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub lower_copy: f64,
    pub lower_copy_valid: usize,
    pub upper_entropy: f64,
    pub lower_entropy: f64,
    pub upper_logit_rms: f64,
    pub lower_logit_rms: f64,
    pub logit_ratio: Option<f64>,
    /// Per upper layer, in layer order.
    pub qk_top_sv: Vec<f64>,
    pub qk_sv_converged: bool,
    /// `‖W_QW_Kᵀ − (W_QW_Kᵀ)₀‖_F` on the first upper layer, when the initial form is known.
    pub qk_displacement: Option<f64>,
    pub ffn_write_rms: Vec<f64>,
    pub ffn_write_upper_mean: f64,
    pub ffn_write_first_upper: f64,
    pub ablation_ppl_delta: f64,
    pub lambda_q: Option<f64>,
    pub lambda_k: Option<f64>,
    pub rp_fraction: Option<f64>,
    pub projector_method: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnWriteRms {
    pub per_layer: Vec<f64>,
    pub upper_mean: f64,
    pub first_upper: f64,
}

/// Per-layer RMS of captured FFN residual writes.
pub fn ffn_write_rms<T: Scalar>(caps: &ForwardCaptures<T>, upper_start: usize) -> FfnWriteRms {
    let per_layer: Vec<f64> = caps
        .layers
        .iter()
        .map(|c| {
            c.as_ref().and_then(|c| c.ffn_write.as_ref()).map_or(0.0, |w| {
                let s: f64 = w.data().iter().map(|v| v.f64() * v.f64()).sum();
                (s / w.numel() as f64).sqrt()
            })
        })
        .collect();
    let upper = &per_layer[upper_start.min(per_layer.len())..];
    let upper_mean = if upper.is_empty() { 0.0 } else { upper.iter().sum::<f64>() / upper.len() as f64 };
    FfnWriteRms { upper_mean, first_upper: upper.first().copied().unwrap_or(0.0), per_layer }
}

/// Mean next-token loss over the batches.
pub fn eval_loss<T: Scalar>(view: ModelView<'_, T>, batches: &[PackedBatch], batch: usize) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Config("no evaluation batches".into()));
    }
    let mut tot = 0.0;
    for b in batches {
        tot += view.loss(&b.inputs, &b.targets, batch)?;
    }
    Ok(tot / batches.len() as f64)
}

/// `ppl(zeroed upper Q/K) − ppl(model)` on identical windows.
pub fn ablation_ppl_delta<T: Scalar>(model: &DecoderModel<T>, batches: &[PackedBatch], batch: usize) -> Result<f64> {
    let base = eval_loss(model.view(), batches, batch)?;
    let abl = eval_loss(model.ablate_upper_qk(AblationMode::ZeroBoth), batches, batch)?;
    Ok(abl.exp() - base.exp())
}

/// First interpolated token count where the loss curve reaches `target`.
pub fn tokens_to_target(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let i = curve.iter().position(|&(_, l)| l <= target)?;
    if i == 0 {
        return Some(curve[0].0);
    }
    let ((t0, l0), (t1, l1)) = (curve[i - 1], curve[i]);
    Some(t0 + (l0 - target) / (l0 - l1) * (t1 - t0))
}

/// Rolling state carried between evaluations of one run.
#[derive(Debug, Clone, Default)]
pub struct ProbeContext {
    /// Rank of the immature projector; `None` uses `⌈0.2·d⌉`.
    pub projector_k: Option<usize>,
    /// Initial head-concatenated `W_QW_Kᵀ` of the first upper layer.
    pub initial_bilinear: Option<Vec<f64>>,
    prev_input: Option<(u64, Vec<f64>)>,
}

impl ProbeContext {
    pub fn new<T: Scalar>(model: &DecoderModel<T>, projector_k: Option<usize>) -> Self {
        let first = model.config.upper_start();
        let initial_bilinear = (first < model.config.n_layers).then(|| model.qk_bilinear(first));
        Self { projector_k, initial_bilinear, prev_input: None }
    }
}

fn to_f64<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.f64()).collect()
}

/// Full probe record. Mechanism captures use the first batch; losses use all of them.
pub fn probe_model<T: Scalar>(
    model: &DecoderModel<T>,
    batches: &[PackedBatch],
    batch: usize,
    ctx: &mut ProbeContext,
    step: u64,
    tokens: u64,
) -> Result<ProbeRecord> {
    let c = &model.config;
    let (d, first_upper) = (c.width, c.upper_start());
    let lower: Vec<usize> = (0..first_upper).collect();
    let upper: Vec<usize> = (first_upper..c.n_layers).collect();
    let val_loss = eval_loss(model.view(), batches, batch)?;
    let abl_loss = eval_loss(model.ablate_upper_qk(AblationMode::ZeroBoth), batches, batch)?;
    let probe_batch = &batches[0];
    let caps = model.view().run(&probe_batch.inputs, batch, &CaptureRequest::all())?;
    let copy = lower_copy_score(&caps, &probe_batch.inputs, &lower);
    let (upper_rms, lower_rms) = (logit_rms(&caps, &upper), logit_rms(&caps, &lower));
    let mut converged = true;
    let qk_top_sv = upper
        .iter()
        .map(|&l| {
            let r = qk_bilinear_top_sv(
                &to_f64(model.param(model.layers[l].w_q).data()),
                &to_f64(model.param(model.layers[l].w_k).data()),
                d,
                d,
            );
            converged &= r.converged;
            r.value
        })
        .collect();
    let qk_displacement = ctx.initial_bilinear.as_ref().map(|b0| {
        let b = model.qk_bilinear(first_upper);
        b.iter().zip(b0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    });
    let ffn = ffn_write_rms(&caps, first_upper);

    let mut locality = None;
    let mut method = None;
    if let Some(x) = caps.layer(first_upper).and_then(|l| l.input.as_ref()) {
        let x = to_f64(x.data());
        let rows = x.len() / d;
        if let Some((prev_step, prev)) = ctx.prev_input.as_ref() {
            let k = ctx.projector_k.unwrap_or((d as f64 * 0.2).ceil() as usize);
            if let Ok(p) = estimate_projector(prev, &x, rows, d, k, (*prev_step, step)) {
                let lp = &model.layers[first_upper];
                locality = locality_ratios(
                    &x,
                    rows,
                    &to_f64(model.param(lp.w_q).data()),
                    &to_f64(model.param(lp.w_k).data()),
                    d,
                    &p,
                );
                method = Some(p.method);
            }
        }
        ctx.prev_input = Some((step, x));
    }

    Ok(ProbeRecord {
        step,
        tokens,
        val_loss,
        val_ppl: val_loss.exp(),
        lower_copy: copy.score,
        lower_copy_valid: copy.valid,
        upper_entropy: attention_entropy(&caps, &upper),
        lower_entropy: attention_entropy(&caps, &lower),
        upper_logit_rms: upper_rms,
        lower_logit_rms: lower_rms,
        logit_ratio: logit_ratio(upper_rms, lower_rms),
        qk_top_sv,
        qk_sv_converged: converged,
        qk_displacement,
        ffn_write_rms: ffn.per_layer,
        ffn_write_upper_mean: ffn.upper_mean,
        ffn_write_first_upper: ffn.first_upper,
        ablation_ppl_delta: abl_loss.exp() - val_loss.exp(),
        lambda_q: locality.map(|l| l.lambda_q),
        lambda_k: locality.map(|l| l.lambda_k),
        rp_fraction: locality.map(|l| l.rp_fraction),
        projector_method: method,
    })
}

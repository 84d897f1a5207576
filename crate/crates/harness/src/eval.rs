use anyhow::{bail, Result};
use sparling::datagen::DomainSpec;
use sparling::metrics::{self, binning_sweep, BinningRow, MetricsReport, QuantileBinner};
use sparling::models::Model;
use sparling::sparsity::{extract_motifs, MotifMap};
use sparling::training::EvalSet;

/// Motif maps, truth maps and `(truth, prediction)` sequences of one pass.
pub struct Predictions {
    pub motifs: Vec<MotifMap>,
    pub truths: Vec<MotifMap>,
    pub sequences: Vec<(Vec<u8>, Vec<u8>)>,
}

pub fn predict(model: &mut Model, set: &EvalSet) -> Result<Predictions> {
    let out = model.infer(&set.images)?;
    Ok(Predictions {
        motifs: extract_motifs(&out.motifs)?,
        truths: set.samples.iter().map(|s| s.truth.clone()).collect(),
        sequences: set
            .samples
            .iter()
            .zip(out.decoded)
            .map(|(s, d)| (s.label.clone(), d))
            .collect(),
    })
}

pub fn evaluate(model: &mut Model, set: &EvalSet, spec: &DomainSpec, eta: f64) -> Result<MetricsReport> {
    let p = predict(model, set)?;
    Ok(metrics::report(
        &p.motifs,
        &p.truths,
        &spec.footprints(),
        &p.sequences,
        Some(eta),
    )?)
}

/// End-to-end error when every nonzero bottleneck activation is replaced by
/// the median of its `2^k` quantile bin, for each `k`. Returns the rows and
/// the smallest tolerated `k`.
pub fn binning(model: &mut Model, set: &EvalSet, ks: &[u32]) -> Result<(f64, Vec<BinningRow>, Option<u32>)> {
    let base = model.infer(&set.images)?;
    let values: Vec<f64> = base
        .motifs
        .data()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| v as f64)
        .collect();
    if values.is_empty() {
        bail!(sparling::Error::InvalidArgument(
            "model produces no nonzero activations to bin".into()
        ));
    }
    let e2ee_of = |decoded: &[Vec<u8>]| -> Result<f64> {
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = set
            .samples
            .iter()
            .zip(decoded)
            .map(|(s, d)| (s.label.clone(), d.clone()))
            .collect();
        Ok(metrics::e2ee(&pairs)?)
    };
    let baseline = e2ee_of(&base.decoded)?;
    let (rows, eta) = binning_sweep(baseline, ks, |k| {
        let binner = QuantileBinner::fit(&values, k)?;
        let out = model.infer_with(&set.images, |m| {
            for v in m.data_mut() {
                if *v > 0.0 {
                    *v = binner.apply(*v as f64) as f32;
                }
            }
            Ok(())
        })?;
        e2ee_of(&out.decoded).map_err(|e| sparling::Error::Validation(e.to_string()))
    })?;
    Ok((baseline, rows, eta))
}

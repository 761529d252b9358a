//! Inspection helpers: attention maps and embedding similarities.

use crate::data::{ActionEvent, Instance};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::encoder::{
    block_settings, encode_action, encode_sequence_forward, stack_action_embeddings,
};
use crate::model::params::ModelParams;
use crate::model::qte::{qte_forward, QteCache};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix, Mode};

fn eval_rng() -> rand::rngs::mock::StepRng {
    rand::rngs::mock::StepRng::new(0, 0)
}

/// Eval-mode trace of the action encoder (always runs the attention stack,
/// even when the action ablation is set).
pub fn action_encoder_trace<T: Scalar>(
    event: &ActionEvent,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> QteCache<T> {
    let x = stack_action_embeddings(event, params);
    let (_, cache) = qte_forward(
        &x,
        params.q_c.as_slice(),
        &params.action,
        block_settings(config),
        Mode::Eval,
        &mut eval_rng(),
    );
    cache
}

/// Head-averaged 4 × 4 attention of the final action-encoder layer.
/// Rows and columns are ordered device, control, day-of-week, hour.
pub fn export_action_attention<T: Scalar>(
    event: &ActionEvent,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    crate::model::encoder::encode_action(event, params, config, Mode::Eval, &mut eval_rng())?;
    let trace = action_encoder_trace(event, params, config);
    Ok(trace.blocks.last().expect("at least one layer").mean_attention())
}

/// Eval-mode trace of the sequence encoder for one instance.
pub fn sequence_encoder_trace<T: Scalar>(
    instance: &Instance,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<QteCache<T>> {
    let mut rng = eval_rng();
    let mut action_vecs = Matrix::zeros(config.history_len(), config.d);
    for (i, event) in instance.history.iter().enumerate() {
        let v = encode_action(event, params, config, Mode::Eval, &mut rng)?;
        action_vecs.row_mut(i).copy_from_slice(&v);
    }
    let (_, cache) = encode_sequence_forward(
        &action_vecs,
        instance.target_dow,
        instance.target_hour_bin,
        params,
        config,
        Mode::Eval,
        &mut rng,
    )?;
    Ok(cache.qte)
}

/// Query-attention weights α over the history positions.
pub fn sequence_attention_weights<T: Scalar>(
    instance: &Instance,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<T>> {
    Ok(sequence_encoder_trace(instance, params, config)?.query.alpha)
}

/// Cosine similarity between every pair of rows. Zero-norm rows get
/// similarity 0 to everything except themselves.
pub fn embedding_similarity<T: Scalar>(table: &Matrix<T>) -> Matrix<T> {
    let n = table.rows();
    let norms: Vec<T> = table.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = T::one();
        for j in i + 1..n {
            let denom = norms[i] * norms[j];
            let c = if denom > T::zero() {
                (dot(table.row(i), table.row(j)) / denom).max(-T::one()).min(T::one())
            } else {
                T::zero()
            };
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    s
}

/// Mean cosine similarity of hour-bin embeddings grouped by circular bin
/// distance `0..=n/2`.
pub fn hour_similarity_by_gap<T: Scalar>(hour_table: &Matrix<T>) -> Vec<(usize, T)> {
    let n = hour_table.rows();
    let s = embedding_similarity(hour_table);
    (0..=n / 2)
        .map(|gap| {
            let mut sum = T::zero();
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let diff = i.abs_diff(j);
                    if diff.min(n - diff) == gap {
                        sum += s[(i, j)];
                        count += 1;
                    }
                }
            }
            (gap, sum / T::from_usize(count.max(1)).unwrap())
        })
        .collect()
}

/// Mean and population standard deviation of the off-diagonal entries.
pub fn off_diagonal_stats<T: Scalar>(s: &Matrix<T>) -> (f64, f64) {
    let n = s.rows();
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| s[(i, j)].to_f64_lossy())
        .collect();
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

//! Action encoder, sequence encoder and prediction head.

use rand::Rng;

use crate::data::{check_index, ActionEvent, Instance};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::model::qte::{qte_backward, qte_forward, BlockSettings, QteCache};
use crate::scalar::Scalar;
use crate::tensor::{matmul_bt, softmax_in_place, Matrix, Mode};

pub fn block_settings(config: &ModelConfig) -> BlockSettings {
    BlockSettings {
        heads: config.heads,
        dropout: config.dropout,
        layer_norm: config.layer_norm,
    }
}

fn check_event(event: &ActionEvent, config: &ModelConfig) -> Result<()> {
    check_index("device", event.device_id, config.num_devices)?;
    check_index("control", event.control_id, config.num_controls)?;
    check_index("day-of-week", event.dow, config.num_dow)?;
    check_index("hour bin", event.hour_bin, config.num_hour_bins)
}

/// The 4 × d stack `[device; control; day-of-week; hour]` of an event.
pub fn stack_action_embeddings<T: Scalar>(event: &ActionEvent, params: &ModelParams<T>) -> Matrix<T> {
    Matrix::from_rows(&[
        params.e_dev.row(event.device_id).to_vec(),
        params.e_ctrl.row(event.control_id).to_vec(),
        params.e_dow.row(event.dow).to_vec(),
        params.e_hour.row(event.hour_bin).to_vec(),
    ])
    .expect("embedding tables share width d")
}

#[derive(Clone, Debug)]
pub struct ActionCache<T> {
    event: ActionEvent,
    /// `None` under the action-encoder ablation.
    pub qte: Option<QteCache<T>>,
}

pub fn encode_action_forward<T: Scalar, R: Rng + ?Sized>(
    event: &ActionEvent,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<T>, ActionCache<T>)> {
    check_event(event, config)?;
    let x = stack_action_embeddings(event, params);
    if config.ablations.act_off {
        return Ok((x.row_mean(), ActionCache { event: *event, qte: None }));
    }
    let (out, cache) = qte_forward(&x, params.q_c.as_slice(), &params.action, block_settings(config), mode, rng);
    Ok((
        out,
        ActionCache {
            event: *event,
            qte: Some(cache),
        },
    ))
}

/// Encodes one event into a d-vector.
pub fn encode_action<T: Scalar, R: Rng + ?Sized>(
    event: &ActionEvent,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    encode_action_forward(event, params, config, mode, rng).map(|(v, _)| v)
}

fn add_row<T: Scalar>(table: &mut Matrix<T>, row: usize, values: &[T]) {
    for (t, &v) in table.row_mut(row).iter_mut().zip(values) {
        *t += v;
    }
}

pub fn encode_action_backward<T: Scalar>(
    cache: &ActionCache<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    grad_out: &[T],
    grads: &mut ModelParams<T>,
) {
    let e = cache.event;
    let g_x = match &cache.qte {
        None => {
            let quarter = T::one() / T::from_usize(4).unwrap();
            let g: Vec<T> = grad_out.iter().map(|&g| g * quarter).collect();
            Matrix::from_rows(&[g.clone(), g.clone(), g.clone(), g]).unwrap()
        }
        Some(qte) => {
            let (g_x, g_q) = qte_backward(
                qte,
                params.q_c.as_slice(),
                &params.action,
                block_settings(config),
                grad_out,
                &mut grads.action,
            );
            add_row(&mut grads.q_c, 0, &g_q);
            g_x
        }
    };
    add_row(&mut grads.e_dev, e.device_id, g_x.row(0));
    add_row(&mut grads.e_ctrl, e.control_id, g_x.row(1));
    add_row(&mut grads.e_dow, e.dow, g_x.row(2));
    add_row(&mut grads.e_hour, e.hour_bin, g_x.row(3));
}

#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    target_dow: usize,
    target_hour_bin: usize,
    query: Vec<T>,
    pub qte: QteCache<T>,
}

/// The sequence query `concat(z_dow, z_hour)`, or zeros under the sequence ablation.
pub fn sequence_query<T: Scalar>(
    target_dow: usize,
    target_hour_bin: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Vec<T> {
    if config.ablations.seq_off {
        return vec![T::zero(); 2 * config.d];
    }
    let mut q = params.e_dow.row(target_dow).to_vec();
    q.extend_from_slice(params.e_hour.row(target_hour_bin));
    q
}

pub fn encode_sequence_forward<T: Scalar, R: Rng + ?Sized>(
    action_vecs: &Matrix<T>,
    target_dow: usize,
    target_hour_bin: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<T>, SequenceCache<T>)> {
    if action_vecs.rows() != config.history_len() || action_vecs.cols() != config.d {
        return Err(Error::Shape(format!(
            "sequence encoder expects {}x{} action vectors, got {}x{}",
            config.history_len(),
            config.d,
            action_vecs.rows(),
            action_vecs.cols()
        )));
    }
    check_index("day-of-week", target_dow, config.num_dow)?;
    check_index("hour bin", target_hour_bin, config.num_hour_bins)?;
    let x = action_vecs.add(&params.pos);
    let query = sequence_query(target_dow, target_hour_bin, params, config);
    let (out, qte) = qte_forward(&x, &query, &params.sequence, block_settings(config), mode, rng);
    Ok((
        out,
        SequenceCache {
            target_dow,
            target_hour_bin,
            query,
            qte,
        },
    ))
}

/// Encodes `W − 1` action vectors under the target temporal context.
pub fn encode_sequence<T: Scalar, R: Rng + ?Sized>(
    action_vecs: &Matrix<T>,
    target_dow: usize,
    target_hour_bin: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    encode_sequence_forward(action_vecs, target_dow, target_hour_bin, params, config, mode, rng).map(|(v, _)| v)
}

/// Returns the gradient w.r.t. the action vectors.
pub fn encode_sequence_backward<T: Scalar>(
    cache: &SequenceCache<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    grad_out: &[T],
    grads: &mut ModelParams<T>,
) -> Matrix<T> {
    let (g_x, g_query) = qte_backward(
        &cache.qte,
        &cache.query,
        &params.sequence,
        block_settings(config),
        grad_out,
        &mut grads.sequence,
    );
    grads.pos.add_assign(&g_x);
    if !config.ablations.seq_off {
        let d = config.d;
        add_row(&mut grads.e_dow, cache.target_dow, &g_query[..d]);
        add_row(&mut grads.e_hour, cache.target_hour_bin, &g_query[d..]);
    }
    g_x
}

#[derive(Clone, Debug)]
pub struct PredictCache<T> {
    pub actions: Vec<ActionCache<T>>,
    pub sequence: SequenceCache<T>,
    pub summary: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

pub fn predict_forward<T: Scalar, R: Rng + ?Sized>(
    instance: &Instance,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<PredictCache<T>> {
    if instance.history.len() != config.history_len() {
        return Err(Error::Shape(format!(
            "instance history has {} events, expected {}",
            instance.history.len(),
            config.history_len()
        )));
    }
    let mut actions = Vec::with_capacity(instance.history.len());
    let mut action_vecs = Matrix::zeros(config.history_len(), config.d);
    for (i, event) in instance.history.iter().enumerate() {
        let (v, cache) = encode_action_forward(event, params, config, mode, rng)?;
        action_vecs.row_mut(i).copy_from_slice(&v);
        actions.push(cache);
    }
    let (summary, sequence) = encode_sequence_forward(
        &action_vecs,
        instance.target_dow,
        instance.target_hour_bin,
        params,
        config,
        mode,
        rng,
    )?;
    let logits = matmul_bt(&Matrix::row_vector(&summary), params.output_matrix());
    let logits = logits.into_vec();
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    Ok(PredictCache {
        actions,
        sequence,
        summary,
        logits,
        probs,
    })
}

/// Probability of every device control for the instance's next action.
pub fn predict_controls<T: Scalar, R: Rng + ?Sized>(
    instance: &Instance,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    predict_forward(instance, params, config, mode, rng).map(|c| c.probs)
}

/// Eval-mode prediction; no randomness is consumed.
pub fn predict_eval<T: Scalar>(instance: &Instance, params: &ModelParams<T>, config: &ModelConfig) -> Result<Vec<T>> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    predict_controls(instance, params, config, Mode::Eval, &mut rng)
}

/// Backpropagates `grad_logits` (gradient w.r.t. the pre-softmax scores)
/// through the whole model.
pub fn predict_backward<T: Scalar>(
    cache: &PredictCache<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    grad_logits: &[T],
    grads: &mut ModelParams<T>,
) {
    let d = config.d;
    let out_matrix = params.output_matrix();
    let mut g_summary = vec![T::zero(); d];
    {
        let g_out = grads.e_out.as_mut().unwrap_or(&mut grads.e_ctrl);
        for (c, &gl) in grad_logits.iter().enumerate() {
            if gl == T::zero() {
                continue;
            }
            for ((g, &s), (gs, &e)) in g_out
                .row_mut(c)
                .iter_mut()
                .zip(&cache.summary)
                .zip(g_summary.iter_mut().zip(out_matrix.row(c)))
            {
                *g += gl * s;
                *gs += gl * e;
            }
        }
    }
    let g_actions = encode_sequence_backward(&cache.sequence, params, config, &g_summary, grads);
    for (i, action) in cache.actions.iter().enumerate() {
        encode_action_backward(action, params, config, g_actions.row(i), grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            window: 4,
            num_devices: 3,
            num_controls: 5,
            ..ModelConfig::default()
        }
    }

    fn instance() -> Instance {
        let ev = |d, c, w, h| ActionEvent {
            device_id: d,
            control_id: c,
            dow: w,
            hour_bin: h,
        };
        Instance {
            history: vec![ev(0, 1, 2, 3), ev(1, 4, 0, 7), ev(2, 0, 6, 0)],
            target_dow: 5,
            target_hour_bin: 4,
            target_control_id: 2,
        }
    }

    #[test]
    fn act_ablation_is_embedding_mean() {
        let config = ModelConfig {
            ablations: crate::model::config::Ablations::parse("act").unwrap(),
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let ev = instance().history[0];
        let out = encode_action(&ev, &params, &config, Mode::Train, &mut rng).unwrap();
        let x = stack_action_embeddings(&ev, &params);
        assert_eq!(out, x.row_mean());
    }

    #[test]
    fn out_of_range_event_is_rejected() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let mut ev = instance().history[0];
        ev.control_id = 99;
        assert!(matches!(
            encode_action(&ev, &params, &config, Mode::Eval, &mut rng),
            Err(Error::IndexOutOfRange { kind: "control", .. })
        ));
    }

    #[test]
    fn sequence_rejects_wrong_row_count() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let h = Matrix::zeros(2, 8);
        assert!(encode_sequence(&h, 0, 0, &params, &config, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn zero_parameters_predict_uniform() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap().zeros_like();
        let p = predict_eval(&instance(), &params, &config).unwrap();
        for &pi in &p {
            assert!((pi - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_prediction_is_deterministic() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let a = predict_eval(&instance(), &params, &config).unwrap();
        let b = predict_eval(&instance(), &params, &config).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

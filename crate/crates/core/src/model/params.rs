use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Weights of one self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// d × 4d
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    /// 4d × d
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn init<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            wq: Matrix::random_uniform(d, d, scale, rng),
            wk: Matrix::random_uniform(d, d, scale, rng),
            wv: Matrix::random_uniform(d, d, scale, rng),
            wo: Matrix::random_uniform(d, d, scale, rng),
            w1: Matrix::random_uniform(d, 4 * d, scale, rng),
            b1: Matrix::zeros(1, 4 * d),
            w2: Matrix::random_uniform(4 * d, d, scale, rng),
            b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, T::one()),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, T::one()),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix<T>); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 12] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }
}

/// A queried transformer encoder: stacked self-attention blocks followed by
/// query attention with projection `wh` (d' × d) and bias `bh` (1 × d').
#[derive(Clone, Debug, PartialEq)]
pub struct QteWeights<T> {
    pub layers: Vec<LayerWeights<T>>,
    pub wh: Matrix<T>,
    pub bh: Matrix<T>,
}

impl<T: Scalar> QteWeights<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, query_dim: usize, layers: usize, scale: f64, rng: &mut R) -> Self {
        let layers = (0..layers).map(|_| LayerWeights::init(d, scale, rng)).collect();
        Self {
            layers,
            wh: Matrix::random_uniform(query_dim, d, scale, rng),
            bh: Matrix::zeros(1, query_dim),
        }
    }

    pub fn query_dim(&self) -> usize {
        self.wh.rows()
    }
}

/// All trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub e_dev: Matrix<T>,
    pub e_ctrl: Matrix<T>,
    pub e_dow: Matrix<T>,
    pub e_hour: Matrix<T>,
    /// Global query of the action encoder (1 × d).
    pub q_c: Matrix<T>,
    /// Positional embeddings ((W−1) × d).
    pub pos: Matrix<T>,
    pub action: QteWeights<T>,
    pub sequence: QteWeights<T>,
    /// Output matrix; `None` when tied to `e_ctrl`.
    pub e_out: Option<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded uniform(−s, s) initialization; biases zero, layer-norm gains one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let s = config.init_scale;
        let e_dev = Matrix::random_uniform(config.num_devices, d, s, rng);
        let e_ctrl = Matrix::random_uniform(config.num_controls, d, s, rng);
        let e_dow = Matrix::random_uniform(config.num_dow, d, s, rng);
        let e_hour = Matrix::random_uniform(config.num_hour_bins, d, s, rng);
        let q_c = Matrix::random_uniform(1, d, s, rng);
        let pos = Matrix::random_uniform(config.history_len(), d, s, rng);
        let action = QteWeights::init(d, d, config.layers, s, rng);
        let sequence = QteWeights::init(d, 2 * d, config.layers, s, rng);
        let e_out = (!config.tie_output).then(|| Matrix::random_uniform(config.num_controls, d, s, rng));
        Ok(Self {
            e_dev,
            e_ctrl,
            e_dow,
            e_hour,
            q_c,
            pos,
            action,
            sequence,
            e_out,
        })
    }

    /// Same structure with every entry zero; doubles as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, m| m.fill(T::zero()));
        z
    }

    pub fn output_matrix(&self) -> &Matrix<T> {
        self.e_out.as_ref().unwrap_or(&self.e_ctrl)
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Matrix<T>)) {
        f("e_dev".into(), &self.e_dev);
        f("e_ctrl".into(), &self.e_ctrl);
        f("e_dow".into(), &self.e_dow);
        f("e_hour".into(), &self.e_hour);
        f("q_c".into(), &self.q_c);
        f("pos".into(), &self.pos);
        for (prefix, qte) in [("action", &self.action), ("sequence", &self.sequence)] {
            for (l, layer) in qte.layers.iter().enumerate() {
                for (name, m) in layer.tensors() {
                    f(format!("{prefix}.layer{l}.{name}"), m);
                }
            }
            f(format!("{prefix}.wh"), &qte.wh);
            f(format!("{prefix}.bh"), &qte.bh);
        }
        if let Some(e) = &self.e_out {
            f("e_out".into(), e);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(String, &'a mut Matrix<T>)) {
        f("e_dev".into(), &mut self.e_dev);
        f("e_ctrl".into(), &mut self.e_ctrl);
        f("e_dow".into(), &mut self.e_dow);
        f("e_hour".into(), &mut self.e_hour);
        f("q_c".into(), &mut self.q_c);
        f("pos".into(), &mut self.pos);
        for (prefix, qte) in [("action", &mut self.action), ("sequence", &mut self.sequence)] {
            for (l, layer) in qte.layers.iter_mut().enumerate() {
                for (name, m) in layer.tensors_mut() {
                    f(format!("{prefix}.layer{l}.{name}"), m);
                }
            }
            f(format!("{prefix}.wh"), &mut qte.wh);
            f(format!("{prefix}.bh"), &mut qte.bh);
        }
        if let Some(e) = &mut self.e_out {
            f("e_out".into(), e);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.visit(|n, m| out.push((n, m)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        self.visit_mut(|n, m| out.push((n, m)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += other` tensor by tensor (structures must match).
    pub fn add_assign(&mut self, other: &Self) {
        let others = other.named_tensors();
        for ((_, a), (_, b)) in self.named_tensors_mut().into_iter().zip(others) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.visit_mut(|_, m| m.scale(alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let qte = |q: &QteWeights<T>| QteWeights {
            layers: q
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                })
                .collect(),
            wh: q.wh.cast(),
            bh: q.bh.cast(),
        };
        ModelParams {
            e_dev: self.e_dev.cast(),
            e_ctrl: self.e_ctrl.cast(),
            e_dow: self.e_dow.cast(),
            e_hour: self.e_hour.cast(),
            q_c: self.q_c.cast(),
            pos: self.pos.cast(),
            action: qte(&self.action),
            sequence: qte(&self.sequence),
            e_out: self.e_out.as_ref().map(Matrix::cast),
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = {
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            ModelParams::<T>::init(config, &mut rng)?
        };
        let expected: Vec<_> = reference
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let got: Vec<_> = self
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if expected != got {
            return Err(Error::Shape(format!(
                "parameter layout does not match configuration: expected {expected:?}, found {got:?}"
            )));
        }
        Ok(())
    }
}

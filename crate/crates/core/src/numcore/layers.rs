use rand::Rng;

use super::{shape_err, NumError, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Half-width of the uniform initialisation interval for weight matrices.
pub const INIT_RANGE: f64 = 0.08;

pub fn init_uniform<F: Real, R: Rng + ?Sized>(shape: Vec<usize>, range: f64, rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-range..=range))).collect();
    Tensor::new(shape, data).expect("shape and data built together")
}

pub(crate) fn dropout_mask<F: Real, R: Rng + ?Sized>(n: usize, rate: F, rng: &mut R) -> Vec<F> {
    let keep = F::one() / (F::one() - rate);
    let rate = rate.f64();
    (0..n).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect()
}

/// Gated recurrent unit weights: `w_*` act on the input, `u_*` on the previous hidden state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
}

const GRU_PARTS: [&str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

impl GruParams {
    /// Registers `prefix.w_z`, ..., `prefix.b_n` with uniform weights and zero biases.
    pub fn register<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let mut ids = Vec::with_capacity(9);
        for part in GRU_PARTS {
            let tensor = match &part[..1] {
                "w" => init_uniform(vec![hidden_dim, input_dim], INIT_RANGE, rng),
                "u" => init_uniform(vec![hidden_dim, hidden_dim], INIT_RANGE, rng),
                _ => Tensor::zeros(vec![hidden_dim]),
            };
            ids.push(store.add(format!("{prefix}.{part}"), tensor)?);
        }
        Ok(Self::from_ids(input_dim, hidden_dim, &ids))
    }

    /// Looks the gate tensors up by name and checks their shapes.
    pub fn lookup<F: Real>(store: &ParamStore<F>, prefix: &str, input_dim: usize, hidden_dim: usize) -> Result<Self, NumError> {
        let mut ids = Vec::with_capacity(9);
        for part in GRU_PARTS {
            let id = store.id(&format!("{prefix}.{part}"))?;
            let expected = match &part[..1] {
                "w" => vec![hidden_dim, input_dim],
                "u" => vec![hidden_dim, hidden_dim],
                _ => vec![hidden_dim],
            };
            if store.get(id).shape() != expected.as_slice() {
                return Err(shape_err("GruParams::lookup", expected, store.get(id).shape()));
            }
            ids.push(id);
        }
        Ok(Self::from_ids(input_dim, hidden_dim, &ids))
    }

    fn from_ids(input_dim: usize, hidden_dim: usize, ids: &[ParamId]) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_z: ids[0],
            w_r: ids[1],
            w_n: ids[2],
            u_z: ids[3],
            u_r: ids[4],
            u_n: ids[5],
            b_z: ids[6],
            b_r: ids[7],
            b_n: ids[8],
        }
    }
}

/// One GRU step:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<F: Real>(tape: &mut Tape<'_, F>, x: Var, h: Var, p: &GruParams) -> Result<Var, NumError> {
    let (xn, hn): (usize, usize) = (tape.shape(x).iter().product(), tape.shape(h).iter().product());
    if xn != p.input_dim || hn != p.hidden_dim {
        return Err(shape_err("gru_cell", (p.input_dim, p.hidden_dim), (xn, hn)));
    }
    let gate = |tape: &mut Tape<'_, F>, w: ParamId, u: ParamId, b: ParamId| -> Result<Var, NumError> {
        let (w, u, b) = (tape.param(w), tape.param(u), tape.param(b));
        let wx = tape.linear(w, x, Some(b))?;
        let uh = tape.linear(u, h, None)?;
        let pre = tape.add(wx, uh)?;
        Ok(tape.sigmoid(pre))
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z)?;
    let r = gate(tape, p.w_r, p.u_r, p.b_r)?;

    let (w_n, u_n, b_n) = (tape.param(p.w_n), tape.param(p.u_n), tape.param(p.b_n));
    let wx = tape.linear(w_n, x, Some(b_n))?;
    let uh = tape.linear(u_n, h, None)?;
    let ruh = tape.mul(r, uh)?;
    let pre = tape.add(wx, ruh)?;
    let n = tape.tanh(pre);

    // (1 − z) ⊙ n + z ⊙ h  ==  n + z ⊙ (h − n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Additive (tanh-scored) attention weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnParams {
    pub query_dim: usize,
    pub key_dim: usize,
    pub attn_dim: usize,
    pub query_proj: ParamId,
    pub key_proj: ParamId,
    pub score_vector: ParamId,
}

/// Attention keys with their projection precomputed, reusable across queries.
#[derive(Debug, Clone, Copy)]
pub struct AttnKeys {
    pub rows: Var,
    pub projected: Var,
    pub len: usize,
}

impl AttnParams {
    pub fn register<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let query_proj = store.add(format!("{prefix}.query_proj"), init_uniform(vec![attn_dim, query_dim], INIT_RANGE, rng))?;
        let key_proj = store.add(format!("{prefix}.key_proj"), init_uniform(vec![attn_dim, key_dim], INIT_RANGE, rng))?;
        let score_vector = store.add(format!("{prefix}.score_vector"), init_uniform(vec![attn_dim], INIT_RANGE, rng))?;
        Ok(Self { query_dim, key_dim, attn_dim, query_proj, key_proj, score_vector })
    }

    pub fn lookup<F: Real>(store: &ParamStore<F>, prefix: &str, query_dim: usize, key_dim: usize, attn_dim: usize) -> Result<Self, NumError> {
        let get = |part: &str, shape: Vec<usize>| -> Result<ParamId, NumError> {
            let id = store.id(&format!("{prefix}.{part}"))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(shape_err("AttnParams::lookup", shape, store.get(id).shape()));
            }
            Ok(id)
        };
        Ok(Self {
            query_dim,
            key_dim,
            attn_dim,
            query_proj: get("query_proj", vec![attn_dim, query_dim])?,
            key_proj: get("key_proj", vec![attn_dim, key_dim])?,
            score_vector: get("score_vector", vec![attn_dim])?,
        })
    }

    pub fn project_keys<F: Real>(&self, tape: &mut Tape<'_, F>, keys: &[Var]) -> Result<AttnKeys, NumError> {
        if keys.is_empty() {
            return Err(NumError::EmptySource { op: "attention" });
        }
        let rows = tape.stack_rows(keys)?;
        self.project_rows(tape, rows)
    }

    /// Like [`AttnParams::project_keys`] for keys already stacked as `[n, key_dim]`.
    pub fn project_rows<F: Real>(&self, tape: &mut Tape<'_, F>, rows: Var) -> Result<AttnKeys, NumError> {
        let shape = tape.shape(rows).to_vec();
        if shape.len() != 2 || shape[1] != self.key_dim {
            return Err(shape_err("attention keys", ("n", self.key_dim), shape));
        }
        let kp = tape.param(self.key_proj);
        let projected = tape.matmul_nt(rows, kp)?;
        Ok(AttnKeys { rows, projected, len: shape[0] })
    }
}

/// `score_i = v · tanh(W_q q + W_k k_i)`, `weights = softmax(score)`,
/// `context = Σ weights_i k_i`. Returns `(context, weights)`.
pub fn attention<F: Real>(tape: &mut Tape<'_, F>, query: Var, keys: &AttnKeys, p: &AttnParams) -> Result<(Var, Var), NumError> {
    let qw = tape.param(p.query_proj);
    let qp = tape.linear(qw, query, None)?;
    let v = tape.param(p.score_vector);
    let scores = tape.additive_scores(qp, keys.projected, v)?;
    let weights = tape.softmax(scores);
    let context = tape.weighted_rows(weights, keys.rows)?;
    Ok((context, weights))
}

/// Inverted dropout on a detached tensor: in training mode each element is
/// zeroed with probability `rate` and survivors are scaled by `1 / (1 − rate)`.
pub fn dropout<F: Real, R: Rng + ?Sized>(x: &Tensor<F>, rate: F, training: bool, rng: &mut R) -> Result<Tensor<F>, NumError> {
    if !(rate >= F::zero() && rate < F::one()) {
        return Err(NumError::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == F::zero() {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(mask).map(|(&v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

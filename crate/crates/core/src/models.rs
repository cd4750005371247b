//! Small differentiable models with hand-derived gradients, and the synthetic
//! datasets they train on.
//!
//! Parameters are flat `f64` slices; every loss is a mean over the batch so that
//! averaging equal-sized shard gradients reproduces the full-batch gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Purpose, Rng};

fn default_seq_len() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Least squares `mean 1/2 (a.x - y)^2` on noise-free targets.
    Quadratic {
        dim: usize,
    },
    SoftmaxRegression {
        inputs: usize,
        classes: usize,
    },
    /// One tanh hidden layer with inverted dropout on the hidden activations.
    Mlp1 {
        inputs: usize,
        hidden: usize,
        classes: usize,
        #[serde(default)]
        dropout: f64,
    },
    /// Elman RNN over characters; the embedding is tied to the output layer.
    RnnChar {
        alphabet: usize,
        hidden: usize,
        #[serde(default = "default_seq_len")]
        seq_len: usize,
        #[serde(default)]
        dropout: f64,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Quadratic { .. } => "quadratic",
            ModelSpec::SoftmaxRegression { .. } => "softmax_regression",
            ModelSpec::Mlp1 { .. } => "mlp1",
            ModelSpec::RnnChar { .. } => "rnn_char",
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::Quadratic { dim } => dim,
            ModelSpec::SoftmaxRegression { inputs, classes } => classes * inputs + classes,
            ModelSpec::Mlp1 {
                inputs,
                hidden,
                classes,
                ..
            } => hidden * inputs + hidden + classes * hidden + classes,
            ModelSpec::RnnChar {
                alphabet, hidden, ..
            } => alphabet * hidden + hidden * hidden + hidden + alphabet,
        }
    }

    pub fn dropout(&self) -> f64 {
        match *self {
            ModelSpec::Mlp1 { dropout, .. } | ModelSpec::RnnChar { dropout, .. } => dropout,
            _ => 0.0,
        }
    }

    pub fn supports_dropout(&self) -> bool {
        matches!(self, ModelSpec::Mlp1 { .. } | ModelSpec::RnnChar { .. })
    }

    /// Copy of this spec with the dropout rate replaced (no-op for models without dropout).
    pub fn with_dropout(&self, p: f64) -> ModelSpec {
        let mut spec = *self;
        match &mut spec {
            ModelSpec::Mlp1 { dropout, .. } | ModelSpec::RnnChar { dropout, .. } => *dropout = p,
            _ => {}
        }
        spec
    }

    /// Whether the loss is a cross-entropy (perplexity is meaningful).
    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Quadratic { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        match *self {
            ModelSpec::Quadratic { dim } => positive("dim", dim)?,
            ModelSpec::SoftmaxRegression { inputs, classes } => {
                positive("inputs", inputs)?;
                positive("classes", classes)?;
            }
            ModelSpec::Mlp1 {
                inputs,
                hidden,
                classes,
                ..
            } => {
                positive("inputs", inputs)?;
                positive("hidden", hidden)?;
                positive("classes", classes)?;
            }
            ModelSpec::RnnChar {
                alphabet,
                hidden,
                seq_len,
                ..
            } => {
                positive("hidden", hidden)?;
                positive("seq_len", seq_len)?;
                if !(2..=64).contains(&alphabet) {
                    return Err(Error::config("model.alphabet", "must be in [2, 64]"));
                }
            }
        }
        let p = self.dropout();
        if !(0.0..=0.8).contains(&p) {
            return Err(Error::config("model.dropout", "must be in [0, 0.8]"));
        }
        Ok(())
    }

    /// Approximate multiply-adds for one forward+backward pass over one example.
    pub fn ops_per_example(&self) -> u64 {
        let ops = match *self {
            ModelSpec::Quadratic { dim } => 4 * dim,
            ModelSpec::SoftmaxRegression { inputs, classes } => 6 * inputs * classes,
            ModelSpec::Mlp1 {
                inputs,
                hidden,
                classes,
                ..
            } => 6 * (inputs * hidden + hidden * classes),
            ModelSpec::RnnChar {
                alphabet,
                hidden,
                seq_len,
                ..
            } => 6 * seq_len * (hidden * hidden + alphabet * hidden),
        };
        ops as u64
    }

    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = scale * rng.normal();
            }
        };
        match *self {
            ModelSpec::Quadratic { .. } => {}
            ModelSpec::SoftmaxRegression { inputs, classes } => {
                fill(0..classes * inputs, 0.01);
            }
            ModelSpec::Mlp1 {
                inputs,
                hidden,
                classes,
                ..
            } => {
                let w1 = hidden * inputs;
                fill(0..w1, 1.0 / (inputs as f64).sqrt());
                let w2 = w1 + hidden;
                fill(w2..w2 + classes * hidden, 1.0 / (hidden as f64).sqrt());
            }
            ModelSpec::RnnChar {
                alphabet, hidden, ..
            } => {
                let emb = alphabet * hidden;
                fill(0..emb, 0.1);
                fill(emb..emb + hidden * hidden, 0.5 / (hidden as f64).sqrt());
            }
        }
        params
    }

    /// Mean loss over `rows` and its exact gradient.
    ///
    /// `dropout` is the mask stream during training; `None` evaluates without dropout.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        data: &Dataset,
        rows: &[usize],
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::config("batch", "must be nonempty"));
        }
        let p = self.dropout();
        let mask_rng = dropout.filter(|_| p > 0.0);
        let (loss, grad) = match (*self, data) {
            (ModelSpec::Quadratic { dim }, Dataset::Regression { x, y, .. }) => {
                quadratic(dim, params, x, y, rows)
            }
            (
                ModelSpec::SoftmaxRegression { inputs, classes },
                Dataset::Classification { x, labels, .. },
            ) => softmax_regression(inputs, classes, params, x, labels, rows),
            (
                ModelSpec::Mlp1 {
                    inputs,
                    hidden,
                    classes,
                    ..
                },
                Dataset::Classification { x, labels, .. },
            ) => mlp1(
                inputs, hidden, classes, p, params, x, labels, rows, mask_rng,
            ),
            (
                ModelSpec::RnnChar {
                    alphabet,
                    hidden,
                    seq_len,
                    ..
                },
                Dataset::Sequences { tokens, .. },
            ) => rnn_char(alphabet, hidden, seq_len, p, params, tokens, rows, mask_rng),
            _ => {
                return Err(Error::config(
                    "model.kind",
                    "dataset does not match model kind",
                ))
            }
        };
        if !loss.is_finite() {
            return Err(Error::Diverged);
        }
        Ok((loss, grad))
    }

    /// Mean loss without dropout.
    pub fn loss(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.loss_and_grad(params, data, rows, None).map(|(l, _)| l)
    }
}

pub fn perplexity(mean_ce: f64) -> f64 {
    mean_ce.exp()
}

fn log_softmax_grad(logits: &mut [f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[target];
    for z in logits.iter_mut() {
        *z = (*z - lse).exp();
    }
    logits[target] -= 1.0;
    loss
}

fn quadratic(dim: usize, params: &[f64], x: &[f64], y: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; dim];
    let mut loss = 0.0;
    for &r in rows {
        let a = &x[r * dim..(r + 1) * dim];
        let resid: f64 = a.iter().zip(params).map(|(a, p)| a * p).sum::<f64>() - y[r];
        loss += 0.5 * resid * resid;
        for (g, a) in grad.iter_mut().zip(a) {
            *g += resid * a * scale;
        }
    }
    (loss * scale, grad)
}

fn softmax_regression(
    inputs: usize,
    classes: usize,
    params: &[f64],
    x: &[f64],
    labels: &[u32],
    rows: &[usize],
) -> (f64, Vec<f64>) {
    let (w, b) = params.split_at(classes * inputs);
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for &r in rows {
        let xr = &x[r * inputs..(r + 1) * inputs];
        for c in 0..classes {
            z[c] = b[c] + dot(&w[c * inputs..(c + 1) * inputs], xr);
        }
        loss += log_softmax_grad(&mut z, labels[r] as usize);
        let (gw, gb) = grad.split_at_mut(classes * inputs);
        for c in 0..classes {
            let d = z[c] * scale;
            gb[c] += d;
            for (g, xi) in gw[c * inputs..(c + 1) * inputs].iter_mut().zip(xr) {
                *g += d * xi;
            }
        }
    }
    (loss * scale, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
fn dropout_mask(mask: &mut [f64], p: f64, rng: Option<&mut Rng>) {
    match rng {
        Some(rng) => {
            let keep = 1.0 / (1.0 - p);
            for m in mask.iter_mut() {
                *m = if rng.next_f64() < p { 0.0 } else { keep };
            }
        }
        None => mask.fill(1.0),
    }
}

#[allow(clippy::too_many_arguments)]
fn mlp1(
    inputs: usize,
    hidden: usize,
    classes: usize,
    p: f64,
    params: &[f64],
    x: &[f64],
    labels: &[u32],
    rows: &[usize],
    mut rng: Option<&mut Rng>,
) -> (f64, Vec<f64>) {
    let o_b1 = hidden * inputs;
    let o_w2 = o_b1 + hidden;
    let o_b2 = o_w2 + classes * hidden;
    let (w1, b1, w2, b2) = (
        &params[..o_b1],
        &params[o_b1..o_w2],
        &params[o_w2..o_b2],
        &params[o_b2..],
    );
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut h = vec![0.0; hidden];
    let mut mask = vec![1.0; hidden];
    let mut hd = vec![0.0; hidden];
    let mut dh = vec![0.0; hidden];
    let mut z = vec![0.0; classes];
    for &r in rows {
        let xr = &x[r * inputs..(r + 1) * inputs];
        for j in 0..hidden {
            h[j] = (b1[j] + dot(&w1[j * inputs..(j + 1) * inputs], xr)).tanh();
        }
        if rng.is_some() {
            dropout_mask(&mut mask, p, rng.as_deref_mut());
            for j in 0..hidden {
                hd[j] = h[j] * mask[j];
            }
        } else {
            hd.copy_from_slice(&h);
        }
        for c in 0..classes {
            z[c] = b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], &hd);
        }
        loss += log_softmax_grad(&mut z, labels[r] as usize);

        dh.fill(0.0);
        for c in 0..classes {
            let d = z[c] * scale;
            grad[o_b2 + c] += d;
            let row = o_w2 + c * hidden;
            for j in 0..hidden {
                grad[row + j] += d * hd[j];
                dh[j] += d * w2[c * hidden + j];
            }
        }
        for j in 0..hidden {
            let dpre = dh[j] * mask[j] * (1.0 - h[j] * h[j]);
            grad[o_b1 + j] += dpre;
            for (g, xi) in grad[j * inputs..(j + 1) * inputs].iter_mut().zip(xr) {
                *g += dpre * xi;
            }
        }
    }
    (loss * scale, grad)
}

#[allow(clippy::too_many_arguments)]
fn rnn_char(
    alphabet: usize,
    hidden: usize,
    seq_len: usize,
    p: f64,
    params: &[f64],
    tokens: &[u8],
    rows: &[usize],
    mut rng: Option<&mut Rng>,
) -> (f64, Vec<f64>) {
    let o_w = alphabet * hidden;
    let o_bh = o_w + hidden * hidden;
    let o_bo = o_bh + hidden;
    let (emb, w, bh, bo) = (
        &params[..o_w],
        &params[o_w..o_bh],
        &params[o_bh..o_bo],
        &params[o_bo..],
    );
    let stride = seq_len + 1;
    let scale = 1.0 / (rows.len() * seq_len) as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;

    // Per-step activations: h_t (pre-dropout), dropout multipliers, softmax residuals.
    let mut hs = vec![0.0; (seq_len + 1) * hidden];
    let mut masks = vec![1.0; seq_len * hidden];
    let mut dz = vec![0.0; seq_len * alphabet];
    let mut hd = vec![0.0; hidden];
    let mut dh_next = vec![0.0; hidden];
    let mut dh = vec![0.0; hidden];
    let mut dpre = vec![0.0; hidden];

    for &r in rows {
        let seq = &tokens[r * stride..(r + 1) * stride];
        // Forward. hs[0..hidden] is the zero initial state.
        hs[..hidden].fill(0.0);
        for t in 0..seq_len {
            let tok = seq[t] as usize;
            let (prev, cur) = hs.split_at_mut((t + 1) * hidden);
            let prev = &prev[t * hidden..];
            let cur = &mut cur[..hidden];
            for j in 0..hidden {
                cur[j] =
                    (emb[tok * hidden + j] + bh[j] + dot(&w[j * hidden..(j + 1) * hidden], prev))
                        .tanh();
            }
            let mask = &mut masks[t * hidden..(t + 1) * hidden];
            if rng.is_some() {
                dropout_mask(mask, p, rng.as_deref_mut());
            }
            for j in 0..hidden {
                hd[j] = cur[j] * mask[j];
            }
            let z = &mut dz[t * alphabet..(t + 1) * alphabet];
            for c in 0..alphabet {
                z[c] = bo[c] + dot(&emb[c * hidden..(c + 1) * hidden], &hd);
            }
            loss += log_softmax_grad(z, seq[t + 1] as usize);
        }

        // Backward through time.
        dh_next.fill(0.0);
        for t in (0..seq_len).rev() {
            let tok = seq[t] as usize;
            let h_prev = &hs[t * hidden..(t + 1) * hidden];
            let h_cur = &hs[(t + 1) * hidden..(t + 2) * hidden];
            let mask = &masks[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                hd[j] = h_cur[j] * mask[j];
            }
            dh.fill(0.0);
            for c in 0..alphabet {
                let d = dz[t * alphabet + c] * scale;
                grad[o_bo + c] += d;
                for j in 0..hidden {
                    grad[c * hidden + j] += d * hd[j];
                    dh[j] += d * emb[c * hidden + j];
                }
            }
            for j in 0..hidden {
                dpre[j] = (dh[j] * mask[j] + dh_next[j]) * (1.0 - h_cur[j] * h_cur[j]);
            }
            dh_next.fill(0.0);
            for j in 0..hidden {
                let d = dpre[j];
                grad[tok * hidden + j] += d;
                grad[o_bh + j] += d;
                let row = o_w + j * hidden;
                for k in 0..hidden {
                    grad[row + k] += d * h_prev[k];
                    dh_next[k] += d * w[j * hidden + k];
                }
            }
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Standard deviation of the class centres (classification tasks).
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 2048,
            validation: 512,
            test: 512,
            separation: 1.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("data.train", self.train),
            ("data.validation", self.validation),
            ("data.test", self.test),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.separation >= 0.0) {
            return Err(Error::config("data.separation", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Regression {
        dim: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    },
    Classification {
        dim: usize,
        x: Vec<f64>,
        labels: Vec<u32>,
    },
    /// Back-to-back sequences of `seq_len + 1` tokens.
    Sequences { seq_len: usize, tokens: Vec<u8> },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Regression { y, .. } => y.len(),
            Dataset::Classification { labels, .. } => labels.len(),
            Dataset::Sequences { seq_len, tokens } => tokens.len() / (seq_len + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Exact minimiser, known for the quadratic task.
    pub optimum: Option<Vec<f64>>,
}

/// Step distribution of the character random walk over offsets -2..=2.
const WALK_STEPS: [(i64, f64); 5] = [(-2, 0.1), (-1, 0.2), (0, 0.1), (1, 0.4), (2, 0.2)];

pub fn synth_data(spec: &ModelSpec, cfg: &DataConfig, seed: u64) -> Splits {
    let mut rng = Rng::for_purpose(seed, Purpose::Data, 0);
    let sizes = [cfg.train, cfg.validation, cfg.test];
    match *spec {
        ModelSpec::Quadratic { dim } => {
            let optimum: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let [train, validation, test] = sizes.map(|rows| {
                let x: Vec<f64> = (0..rows * dim).map(|_| rng.normal()).collect();
                let y = x.chunks(dim).map(|a| dot(a, &optimum)).collect();
                Dataset::Regression { dim, x, y }
            });
            Splits {
                train,
                validation,
                test,
                optimum: Some(optimum),
            }
        }
        ModelSpec::SoftmaxRegression {
            inputs: dim,
            classes,
        }
        | ModelSpec::Mlp1 {
            inputs: dim,
            classes,
            ..
        } => {
            let centres: Vec<f64> = (0..classes * dim)
                .map(|_| cfg.separation * rng.normal())
                .collect();
            let [train, validation, test] = sizes.map(|rows| {
                let labels: Vec<u32> = (0..rows).map(|j| (j % classes) as u32).collect();
                let mut x = Vec::with_capacity(rows * dim);
                for &c in &labels {
                    let c = c as usize;
                    x.extend((0..dim).map(|k| centres[c * dim + k] + rng.normal()));
                }
                Dataset::Classification { dim, x, labels }
            });
            Splits {
                train,
                validation,
                test,
                optimum: None,
            }
        }
        ModelSpec::RnnChar {
            alphabet, seq_len, ..
        } => {
            let stride = seq_len + 1;
            let total = (cfg.train + cfg.validation + cfg.test) * stride;
            let mut tokens = Vec::with_capacity(total);
            let mut cur = rng.below(alphabet as u64) as i64;
            for _ in 0..total {
                tokens.push(cur as u8);
                let u = rng.next_f64();
                let mut acc = 0.0;
                let mut step = WALK_STEPS[WALK_STEPS.len() - 1].0;
                for &(s, p) in &WALK_STEPS {
                    acc += p;
                    if u < acc {
                        step = s;
                        break;
                    }
                }
                cur = (cur + step).rem_euclid(alphabet as i64);
            }
            let mut rest = tokens;
            let mut take = |rows: usize| {
                let tail = rest.split_off(rows * stride);
                let head = std::mem::replace(&mut rest, tail);
                Dataset::Sequences {
                    seq_len,
                    tokens: head,
                }
            };
            let train = take(cfg.train);
            let validation = take(cfg.validation);
            let test = take(cfg.test);
            Splits {
                train,
                validation,
                test,
                optimum: None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error, DEFAULT_FD_STEP};

    fn small_data() -> DataConfig {
        DataConfig {
            train: 64,
            validation: 16,
            test: 16,
            separation: 1.5,
        }
    }

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::Quadratic { dim: 6 },
            ModelSpec::SoftmaxRegression {
                inputs: 5,
                classes: 3,
            },
            ModelSpec::Mlp1 {
                inputs: 4,
                hidden: 6,
                classes: 3,
                dropout: 0.3,
            },
            ModelSpec::RnnChar {
                alphabet: 7,
                hidden: 5,
                seq_len: 4,
                dropout: 0.2,
            },
        ]
    }

    #[test]
    fn param_counts() {
        assert_eq!(specs()[0].param_count(), 6);
        assert_eq!(specs()[1].param_count(), 18);
        assert_eq!(specs()[2].param_count(), 24 + 6 + 18 + 3);
        assert_eq!(specs()[3].param_count(), 35 + 25 + 5 + 7);
    }

    #[test]
    fn quadratic_optimum_has_zero_loss_and_gradient() {
        let spec = ModelSpec::Quadratic { dim: 5 };
        let splits = synth_data(&spec, &small_data(), 1);
        let opt = splits.optimum.unwrap();
        let (loss, grad) = spec
            .loss_and_grad(&opt, &splits.train, &splits.train.all_rows(), None)
            .unwrap();
        assert!(loss < 1e-25, "loss {loss}");
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn softmax_zero_weights_gives_log_classes() {
        let spec = ModelSpec::SoftmaxRegression {
            inputs: 4,
            classes: 7,
        };
        let splits = synth_data(&spec, &small_data(), 2);
        let loss = spec
            .loss(&vec![0.0; spec.param_count()], &splits.train, &[0, 1, 2, 3])
            .unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for spec in specs() {
            let splits = synth_data(&spec, &small_data(), 3);
            let mut rng = Rng::new(3, 3);
            let params: Vec<f64> = (0..spec.param_count())
                .map(|_| 0.5 * rng.normal())
                .collect();
            let rows = [1, 5, 9, 13, 20];
            let mask = Rng::new(99, 0);
            let (_, analytic) = spec
                .loss_and_grad(&params, &splits.train, &rows, Some(&mut mask.clone()))
                .unwrap();
            let numeric = finite_diff_gradient(
                |p| {
                    spec.loss_and_grad(p, &splits.train, &rows, Some(&mut mask.clone()))
                        .unwrap()
                        .0
                },
                &params,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{}: {err}", spec.kind());
        }
    }

    #[test]
    fn zero_dropout_is_identity() {
        let spec = ModelSpec::Mlp1 {
            inputs: 4,
            hidden: 8,
            classes: 3,
            dropout: 0.0,
        };
        let splits = synth_data(&spec, &small_data(), 4);
        let params = spec.init_params(&mut Rng::new(4, 0));
        let rows = splits.train.all_rows();
        let with = spec
            .loss_and_grad(&params, &splits.train, &rows, Some(&mut Rng::new(1, 1)))
            .unwrap();
        let without = spec
            .loss_and_grad(&params, &splits.train, &rows, None)
            .unwrap();
        assert_eq!(with.0.to_bits(), without.0.to_bits());
        assert_eq!(with.1, without.1);
    }

    #[test]
    fn dataset_mismatch_and_nan_are_errors() {
        let spec = ModelSpec::Quadratic { dim: 3 };
        let other = ModelSpec::SoftmaxRegression {
            inputs: 3,
            classes: 2,
        };
        let splits = synth_data(&other, &small_data(), 5);
        assert!(spec.loss(&[0.0; 3], &splits.train, &[0]).is_err());
        let splits = synth_data(&spec, &small_data(), 5);
        assert!(matches!(
            spec.loss(&[f64::NAN; 3], &splits.train, &[0]),
            Err(Error::Diverged)
        ));
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(10_000f64.ln()) - 10_000.0).abs() < 1e-8);
        assert!((perplexity(1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn synth_data_is_deterministic_and_balanced() {
        for spec in specs() {
            assert_eq!(
                synth_data(&spec, &small_data(), 7),
                synth_data(&spec, &small_data(), 7)
            );
        }
        let spec = ModelSpec::SoftmaxRegression {
            inputs: 3,
            classes: 5,
        };
        let cfg = DataConfig {
            train: 103,
            ..small_data()
        };
        let Dataset::Classification { labels, x, .. } = synth_data(&spec, &cfg, 7).train else {
            panic!()
        };
        let mut counts = [0usize; 5];
        for l in labels {
            counts[l as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        let Dataset::Classification { x: test_x, .. } = synth_data(&spec, &cfg, 7).test else {
            panic!()
        };
        for row in test_x.chunks(3) {
            assert!(x.chunks(3).all(|r| r != row));
        }
    }

    #[test]
    fn untrained_rnn_is_near_uniform() {
        let spec = ModelSpec::RnnChar {
            alphabet: 27,
            hidden: 32,
            seq_len: 16,
            dropout: 0.0,
        };
        let splits = synth_data(&spec, &small_data(), 8);
        let params = spec.init_params(&mut Rng::new(8, 0));
        let ce = spec
            .loss(&params, &splits.test, &splits.test.all_rows())
            .unwrap();
        let ppl = perplexity(ce);
        assert!((ppl - 27.0).abs() / 27.0 < 0.02, "ppl {ppl}");
    }

    #[test]
    fn equal_shards_average_to_full_batch() {
        for spec in specs() {
            let splits = synth_data(&spec, &small_data(), 9);
            let params = spec.init_params(&mut Rng::new(9, 1));
            let rows: Vec<usize> = (0..16).collect();
            let (_, full) = spec
                .loss_and_grad(&params, &splits.train, &rows, None)
                .unwrap();
            for w in [2usize, 4] {
                let mut avg = vec![0.0f64; full.len()];
                for shard in rows.chunks(rows.len() / w) {
                    let (_, g) = spec
                        .loss_and_grad(&params, &splits.train, shard, None)
                        .unwrap();
                    for (a, x) in avg.iter_mut().zip(&g) {
                        *a += (*x as f32) as f64;
                    }
                }
                let avg: Vec<f64> = avg.iter().map(|a| ((a / w as f64) as f32) as f64).collect();
                let full32: Vec<f64> = full.iter().map(|x| (*x as f32) as f64).collect();
                let scale = full32.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let err = avg
                    .iter()
                    .zip(&full32)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err <= 1e-6 * scale, "{}: {err}", spec.kind());
            }
        }
    }
}

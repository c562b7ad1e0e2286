//! Loss functions, leave-one-out training over sequence datasets, and model
//! checkpointing.
//!
//! The per-transition residual is
//! `u^{(k+1)} - sum_q C(p,q)(-1)^{q+1} u^{(k-q+1)} - dt * F(D Phi^{-1} u^{(k)})`,
//! evaluated at interior sites. Gradients flow through the output network,
//! the feature contraction, the ridge solve (adjoint method) and the
//! derivative-feature network; the shape parameter receives contributions
//! both from Phi and from the kernel-value input channel of the L-net.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, SiteSet};
use crate::model::{binomial_weights, tensor_from_rows, OperatorModel};
use crate::nn::{AdamHyper, AdamState, MlpGrads, MlpParams, TrainableGrads, TrainableParams};
use crate::rbf::{default_sigma, pairwise_distances, RbfKernel, RidgeSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// h = 1, no output network; the contraction itself is the update.
    Linear,
    /// Derivative features fed through the output network.
    Nonlinear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub temporal_order: usize,
    pub feature_width: usize,
    pub variant: ModelVariant,
    pub seed: u64,
    pub loo_enabled: bool,
    /// Score the residual only at the held-out site instead of at all sites.
    pub loo_loss_only_heldout: bool,
    /// Initial shape parameter; derived from the site spacing when absent.
    pub sigma0: Option<f64>,
    pub val_fraction: f64,
    pub l_hidden: Vec<usize>,
    pub f_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.001,
            lambda: 1e-4,
            temporal_order: 1,
            feature_width: 16,
            variant: ModelVariant::Nonlinear,
            seed: 0,
            loo_enabled: true,
            loo_loss_only_heldout: false,
            sigma0: None,
            val_fraction: 0.1,
            l_hidden: vec![64, 32],
            f_hidden: vec![128, 64, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub sigma: Vec<f64>,
    pub final_sigma: f64,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// CSV columns: epoch, train_loss, val_loss, sigma.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,sigma\n");
        for e in 0..self.train_loss.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e, self.train_loss[e], self.val_loss[e], self.sigma[e]
            ));
        }
        out
    }
}

/// Uniform leave-one-out site choice (0-based).
pub fn loo_select(n_sites: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_sites < 2 {
        return Err(Error::Invalid(format!(
            "leave-one-out needs at least 2 sites, got {n_sites}"
        )));
    }
    Ok(rng.random_range(0..n_sites))
}

/// One training sample: a single transition of one sequence, with an
/// optional held-out site and a loss weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample {
    pub seq: usize,
    /// Index of the newest history frame; the target is frame k+1.
    pub k: usize,
    pub loo: Option<usize>,
    pub weight: f64,
}

/// Shared machinery for loss and gradient evaluation over interior sites.
pub struct LossEngine {
    interior: Vec<Point>,
    dists: DMatrix<f64>,
    /// Pair input template (n^2 x (2d+1)); the kernel column is refreshed
    /// from sigma on every evaluation.
    input_template: DMatrix<f64>,
    dim: usize,
    p: usize,
    m_vars: usize,
    dt: f64,
    lambda: f64,
    loo_loss_only_heldout: bool,
}

impl LossEngine {
    pub fn new(
        interior: &[Point],
        p: usize,
        m_vars: usize,
        dt: f64,
        lambda: f64,
        loo_loss_only_heldout: bool,
    ) -> Result<Self> {
        let n = interior.len();
        if n == 0 {
            return Err(Error::Invalid("need at least one interior site".into()));
        }
        let dim = interior[0].len();
        if interior.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("inconsistent site dimensions".into()));
        }
        if !(dt > 0.0) || lambda < 0.0 || p == 0 || m_vars == 0 {
            return Err(Error::Invalid(
                "dt must be positive, lambda nonnegative, p and M positive".into(),
            ));
        }
        let dists = pairwise_distances(interior, interior);
        let input_template = DMatrix::from_fn(n * n, 2 * dim + 1, |row, col| {
            let (i, j) = (row / n, row % n);
            if col < dim {
                interior[i][col]
            } else if col < 2 * dim {
                interior[j][col - dim]
            } else {
                0.0
            }
        });
        Ok(LossEngine {
            interior: interior.to_vec(),
            dists,
            input_template,
            dim,
            p,
            m_vars,
            dt,
            lambda,
            loo_loss_only_heldout,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.interior.len()
    }

    /// Weighted loss (and optionally its gradient) over a set of samples.
    ///
    /// `sequences[s]` holds the interior frames of sequence s, each n x M.
    pub fn eval(
        &self,
        params: &TrainableParams,
        sequences: &[Vec<DMatrix<f64>>],
        samples: &[WeightedSample],
        want_grads: bool,
    ) -> Result<(f64, Option<TrainableGrads>)> {
        let n = self.interior.len();
        let kernel = RbfKernel::new(params.sigma)?;
        let weights = binomial_weights(self.p);

        // Shared per-call state: Phi, pair inputs, derivative tensor.
        let phi_full = self.dists.map(|r| kernel.value(r));
        let mut l_input = self.input_template.clone();
        for row in 0..n * n {
            l_input[(row, 2 * self.dim)] = phi_full[(row / n, row % n)];
        }
        let (l_out, l_cache) = params.l_net.forward(&l_input)?;
        let h = l_out.ncols();
        let d_tensor = tensor_from_rows(&l_out, n, n);

        // One factorization per distinct held-out site.
        let mut solvers: HashMap<Option<usize>, (RidgeSolver, Vec<usize>)> = HashMap::new();
        for s in samples {
            self.check_sample(s, sequences)?;
            if !solvers.contains_key(&s.loo) {
                let keep: Vec<usize> = (0..n).filter(|&i| Some(i) != s.loo).collect();
                let phi_sub = phi_full.select_rows(&keep).select_columns(&keep);
                solvers.insert(s.loo, (RidgeSolver::new(&phi_sub, self.lambda)?, keep));
            }
        }

        let mut loss = 0.0;
        let mut d_bar: Vec<DMatrix<f64>> = (0..h).map(|_| DMatrix::zeros(n, n)).collect();
        let mut phi_bar = DMatrix::zeros(n, n);
        let mut f_grads = params.f_net.as_ref().map(MlpGrads::zeros_like);

        for sample in samples {
            let frames = &sequences[sample.seq];
            let (solver, keep) = &solvers[&sample.loo];
            let u_cur = &frames[sample.k];
            let u_in = match sample.loo {
                Some(_) => u_cur.select_rows(keep.as_slice()),
                None => u_cur.clone(),
            };
            let coeffs = solver.solve(&u_in)?;
            // Pad held-out rows with zeros so the full tensor contraction
            // equals the column-dropped one.
            let c_ext = match sample.loo {
                Some(_) => {
                    let mut c = DMatrix::zeros(n, self.m_vars);
                    for (row, &src) in keep.iter().enumerate() {
                        c.row_mut(src).copy_from(&coeffs.row(row));
                    }
                    c
                }
                None => coeffs.clone(),
            };
            let g_feats: Vec<DMatrix<f64>> = d_tensor.mats.iter().map(|d| d * &c_ext).collect();

            let (rhs, f_cache) = match &params.f_net {
                None => (g_feats[0].clone(), None),
                Some(f_net) => {
                    let f_input = DMatrix::from_fn(n, self.m_vars * h, |i, col| {
                        g_feats[col % h][(i, col / h)]
                    });
                    let (out, cache) = f_net.forward(&f_input)?;
                    (out, Some(cache))
                }
            };

            let mut residual = frames[sample.k + 1].clone() - &rhs * self.dt;
            for (q, w) in weights.iter().enumerate() {
                residual -= &frames[sample.k - q] * *w;
            }
            if self.loo_loss_only_heldout {
                if let Some(l) = sample.loo {
                    for i in 0..n {
                        if i != l {
                            residual.row_mut(i).fill(0.0);
                        }
                    }
                }
            }
            loss += sample.weight * residual.norm_squared();

            if !want_grads {
                continue;
            }
            let rhs_bar = residual * (-2.0 * sample.weight * self.dt);
            let g_bars: Vec<DMatrix<f64>> = match &params.f_net {
                None => vec![rhs_bar],
                Some(f_net) => {
                    let (fg, feats_bar) =
                        f_net.backward(f_cache.as_ref().expect("cache set"), &rhs_bar)?;
                    f_grads.as_mut().expect("grads allocated").add_assign(&fg);
                    (0..h)
                        .map(|r| {
                            DMatrix::from_fn(n, self.m_vars, |i, v| feats_bar[(i, v * h + r)])
                        })
                        .collect()
                }
            };

            let mut c_ext_bar = DMatrix::zeros(n, self.m_vars);
            for (d, g_bar) in d_tensor.mats.iter().zip(&g_bars) {
                c_ext_bar += d.transpose() * g_bar;
            }
            let c_ext_t = c_ext.transpose();
            for (d_acc, g_bar) in d_bar.iter_mut().zip(&g_bars) {
                *d_acc += g_bar * &c_ext_t;
            }
            let c_bar = match sample.loo {
                Some(_) => c_ext_bar.select_rows(keep.as_slice()),
                None => c_ext_bar,
            };

            // Adjoint of c = (Phi^T Phi + lambda I)^{-1} Phi^T u:
            //   w = (Phi^T Phi + lambda I)^{-1} c_bar
            //   Phi_bar = (u - Phi c) w^T - (Phi w) c^T
            let w_adj = solver.solve_normal(&c_bar)?;
            let phi_sub = solver.phi();
            let resid_fit = &u_in - phi_sub * &coeffs;
            let phi_sub_bar = &resid_fit * w_adj.transpose() - (phi_sub * &w_adj) * coeffs.transpose();
            match sample.loo {
                Some(_) => {
                    for (r, &src_r) in keep.iter().enumerate() {
                        for (c, &src_c) in keep.iter().enumerate() {
                            phi_bar[(src_r, src_c)] += phi_sub_bar[(r, c)];
                        }
                    }
                }
                None => phi_bar += phi_sub_bar,
            }
        }

        if !want_grads {
            return Ok((loss, None));
        }

        // Backprop through the derivative-feature network once for the
        // accumulated upstream, then collect the sigma contributions.
        let upstream = DMatrix::from_fn(n * n, h, |row, r| d_bar[r][(row / n, row % n)]);
        let (l_grads, input_bar) = params.l_net.backward(&l_cache, &upstream)?;

        let mut sigma_grad = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dphi_dsigma = kernel.value_dsigma(self.dists[(i, j)]);
                sigma_grad += phi_bar[(i, j)] * dphi_dsigma;
                sigma_grad += input_bar[(i * n + j, 2 * self.dim)] * dphi_dsigma;
            }
        }

        Ok((
            loss,
            Some(TrainableGrads {
                l_net: l_grads,
                f_net: f_grads,
                sigma: sigma_grad,
            }),
        ))
    }

    fn check_sample(&self, s: &WeightedSample, sequences: &[Vec<DMatrix<f64>>]) -> Result<()> {
        let frames = sequences
            .get(s.seq)
            .ok_or_else(|| Error::Invalid(format!("sample references sequence {}", s.seq)))?;
        if s.k + 1 >= frames.len() || s.k + 1 < self.p {
            return Err(Error::Invalid(format!(
                "transition k = {} needs {} history frames and a target within {} frames",
                s.k,
                self.p,
                frames.len()
            )));
        }
        if let Some(l) = s.loo {
            if l >= self.interior.len() || self.interior.len() < 2 {
                return Err(Error::Invalid(format!(
                    "held-out site {l} invalid for {} sites",
                    self.interior.len()
                )));
            }
        }
        for f in frames {
            if f.shape() != (self.interior.len(), self.m_vars) {
                return Err(Error::Dimension(format!(
                    "frame is {:?}, expected ({}, {})",
                    f.shape(),
                    self.interior.len(),
                    self.m_vars
                )));
            }
        }
        Ok(())
    }
}

fn params_view(model: &OperatorModel) -> TrainableParams {
    TrainableParams {
        l_net: model.l_net.clone(),
        f_net: model.f_net.clone(),
        sigma: model.kernel.sigma,
    }
}

fn samples_for_sequence(seq: usize, n_frames: usize, p: usize, loo: Option<usize>) -> Vec<WeightedSample> {
    let k_steps = n_frames - 1;
    ((p - 1)..k_steps)
        .map(|k| WeightedSample {
            seq,
            k,
            loo,
            weight: 1.0 / k_steps as f64,
        })
        .collect()
}

/// Mean squared one-step residual over a sequence of K transitions,
/// normalized by K. `frames` are interior-site frames, oldest first.
/// With `loo` given, prediction inputs exclude that site while the residual
/// is still scored at every site.
pub fn sequence_loss(
    model: &OperatorModel,
    interior: &[Point],
    frames: &[DMatrix<f64>],
    dt: f64,
    lambda: f64,
    loo: Option<usize>,
) -> Result<f64> {
    let (loss, _) = sequence_loss_impl(model, interior, frames, dt, lambda, loo, false)?;
    Ok(loss)
}

/// Loss plus its gradient w.r.t. every trainable parameter including sigma.
pub fn sequence_loss_and_grads(
    model: &OperatorModel,
    interior: &[Point],
    frames: &[DMatrix<f64>],
    dt: f64,
    lambda: f64,
    loo: Option<usize>,
) -> Result<(f64, TrainableGrads)> {
    let (loss, grads) = sequence_loss_impl(model, interior, frames, dt, lambda, loo, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

fn sequence_loss_impl(
    model: &OperatorModel,
    interior: &[Point],
    frames: &[DMatrix<f64>],
    dt: f64,
    lambda: f64,
    loo: Option<usize>,
    want_grads: bool,
) -> Result<(f64, Option<TrainableGrads>)> {
    model.validate()?;
    if frames.len() < model.p + 1 {
        return Err(Error::Invalid(format!(
            "need at least p+1 = {} frames, got {}",
            model.p + 1,
            frames.len()
        )));
    }
    let engine = LossEngine::new(interior, model.p, model.m_vars, dt, lambda, false)?;
    let sequences = vec![frames.to_vec()];
    let samples = samples_for_sequence(0, frames.len(), model.p, loo);
    engine.eval(&params_view(model), &sequences, &samples, want_grads)
}

/// Training over a shared-site sequence dataset, following the
/// leave-one-out procedure with per-transition minibatches.
///
/// `sequences` hold frames at all sites; only the interior prefix is used.
/// Returns the model from the best validation epoch and the loss history.
pub fn train(
    sites: &SiteSet,
    dt: f64,
    sequences: &[Vec<DMatrix<f64>>],
    config: &TrainConfig,
) -> Result<(OperatorModel, TrainReport)> {
    let start = Instant::now();
    validate_config(config)?;
    if sequences.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let n_int = sites.n_interior();
    let p = config.temporal_order;
    let m_vars = sequences[0]
        .first()
        .map(|f| f.ncols())
        .ok_or_else(|| Error::Invalid("sequence with no frames".into()))?;
    let k_steps = sequences[0].len() - 1;
    if k_steps < p + 1 {
        return Err(Error::Invalid(format!(
            "sequence length K = {k_steps} must be at least p+1 = {}",
            p + 1
        )));
    }
    for (s, frames) in sequences.iter().enumerate() {
        if frames.len() != k_steps + 1 {
            return Err(Error::Invalid(format!(
                "sequence {s} has {} frames, expected {}",
                frames.len(),
                k_steps + 1
            )));
        }
        for f in frames {
            if f.nrows() != sites.n_total() || f.ncols() != m_vars {
                return Err(Error::Dimension(format!(
                    "sequence {s}: frame is {:?}, expected ({}, {m_vars})",
                    f.shape(),
                    sites.n_total()
                )));
            }
        }
    }

    // Interior slices only: boundary values are untouched by the spatial
    // operator and excluded from training.
    let interior_frames: Vec<Vec<DMatrix<f64>>> = sequences
        .iter()
        .map(|frames| frames.iter().map(|f| f.rows(0, n_int).into_owned()).collect())
        .collect();

    // Validation split, fixed by seed.
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(3);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((sequences.len() as f64 * config.val_fraction).round() as usize)
        .min(sequences.len() - 1);
    let val_ids: Vec<usize> = order[..n_val].to_vec();
    let train_ids: Vec<usize> = order[n_val..].to_vec();

    // Parameter initialization.
    let dim = sites.points[0].len();
    let sigma0 = config.sigma0.unwrap_or_else(|| default_sigma(sites.interior()));
    let h = match config.variant {
        ModelVariant::Linear => 1,
        ModelVariant::Nonlinear => config.feature_width,
    };
    if config.variant == ModelVariant::Linear && m_vars != 1 {
        return Err(Error::Invalid(
            "the linear variant supports a single variable".into(),
        ));
    }
    let mut params = initial_params(config, dim, m_vars, sigma0)?;
    let mut adam = AdamState::new(&params, AdamHyper::with_learning_rate(config.learning_rate));

    let engine = LossEngine::new(
        sites.interior(),
        p,
        m_vars,
        dt,
        config.lambda,
        config.loo_loss_only_heldout,
    )?;

    let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    epoch_rng.set_stream(2);

    let mut report = TrainReport {
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        sigma: Vec::with_capacity(config.epochs),
        final_sigma: sigma0,
        best_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, TrainableParams)> = None;
    let mut first_epoch_loss = f64::INFINITY;

    for epoch in 0..config.epochs {
        // Every (sequence, transition) pair once per epoch, shuffled, each
        // with a fresh held-out site.
        let mut pool: Vec<(usize, usize)> = train_ids
            .iter()
            .flat_map(|&s| ((p - 1)..k_steps).map(move |k| (s, k)))
            .collect();
        pool.shuffle(&mut epoch_rng);

        let mut epoch_loss_sum = 0.0;
        for chunk in pool.chunks(config.batch_size) {
            let w = 1.0 / chunk.len() as f64;
            let samples: Vec<WeightedSample> = chunk
                .iter()
                .map(|&(seq, k)| {
                    let loo = if config.loo_enabled {
                        Some(loo_select(n_int, &mut epoch_rng).expect("n_int >= 2"))
                    } else {
                        None
                    };
                    Ok(WeightedSample {
                        seq,
                        k,
                        loo,
                        weight: w,
                    })
                })
                .collect::<Result<_>>()?;
            let (batch_loss, grads) = engine.eval(&params, &interior_frames, &samples, true)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical {
                    step: epoch,
                    msg: "training loss became non-finite".into(),
                });
            }
            epoch_loss_sum += batch_loss * chunk.len() as f64;
            adam.step(&mut params, &grads.expect("gradients requested"))?;
        }
        let train_loss = epoch_loss_sum / pool.len() as f64;
        if epoch == 0 {
            first_epoch_loss = train_loss;
        }
        if train_loss > 1e6 * first_epoch_loss.max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical {
                step: epoch,
                msg: format!("training diverged: epoch loss {train_loss:.3e}"),
            });
        }

        let val_loss = if val_ids.is_empty() {
            train_loss
        } else {
            let mut total = 0.0;
            for &s in &val_ids {
                let samples = samples_for_sequence(s, k_steps + 1, p, None);
                let (loss, _) = engine.eval(&params, &interior_frames, &samples, false)?;
                total += loss;
            }
            total / val_ids.len() as f64
        };

        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.sigma.push(params.sigma);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            report.best_epoch = epoch;
        }
    }

    let (_, best_params) = best.ok_or_else(|| Error::Invalid("no epochs were run".into()))?;
    report.final_sigma = best_params.sigma;
    report.wall_seconds = start.elapsed().as_secs_f64();

    let model = OperatorModel::new(
        best_params.l_net,
        best_params.f_net,
        RbfKernel::new(best_params.sigma)?,
        p,
        m_vars,
        h,
        dim,
        config.lambda,
    )?;
    Ok((model, report))
}

/// The parameter set `train` starts from, exposed so callers can reproduce
/// a run's initialization exactly.
pub fn initial_params(
    config: &TrainConfig,
    dim: usize,
    m_vars: usize,
    sigma0: f64,
) -> Result<TrainableParams> {
    let h = match config.variant {
        ModelVariant::Linear => 1,
        ModelVariant::Nonlinear => config.feature_width,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let mut l_sizes = vec![2 * dim + 1];
    l_sizes.extend_from_slice(&config.l_hidden);
    l_sizes.push(h);
    let l_net = MlpParams::init(&l_sizes, &mut init_rng)?;
    let f_net = match config.variant {
        ModelVariant::Linear => None,
        ModelVariant::Nonlinear => {
            let mut f_sizes = vec![m_vars * h];
            f_sizes.extend_from_slice(&config.f_hidden);
            f_sizes.push(m_vars);
            Some(MlpParams::init(&f_sizes, &mut init_rng)?)
        }
    };
    Ok(TrainableParams {
        l_net,
        f_net,
        sigma: sigma0,
    })
}

fn validate_config(config: &TrainConfig) -> Result<()> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Invalid("epochs and batch size must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0) || config.lambda < 0.0 {
        return Err(Error::Invalid(
            "learning rate must be positive, lambda nonnegative".into(),
        ));
    }
    if config.temporal_order == 0 || config.feature_width == 0 {
        return Err(Error::Invalid("p and h must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Invalid("val_fraction must be in [0, 1)".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NetJson {
    layer_sizes: Vec<usize>,
    /// Row-major entries per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    sigma: f64,
    p: usize,
    h: usize,
    #[serde(rename = "M")]
    m: usize,
    d: usize,
    lambda: f64,
    #[serde(rename = "L_net")]
    l_net: NetJson,
    #[serde(rename = "F_net")]
    f_net: Option<NetJson>,
}

fn net_to_json(net: &MlpParams) -> NetJson {
    NetJson {
        layer_sizes: net.layer_sizes.clone(),
        weights: net
            .weights
            .iter()
            .map(|w| {
                let mut flat = Vec::with_capacity(w.len());
                for i in 0..w.nrows() {
                    for j in 0..w.ncols() {
                        flat.push(w[(i, j)]);
                    }
                }
                flat
            })
            .collect(),
        biases: net.biases.iter().map(|b| b.iter().copied().collect()).collect(),
    }
}

fn net_from_json(json: &NetJson) -> Result<MlpParams> {
    let mut net = MlpParams::zeros(&json.layer_sizes)?;
    if json.weights.len() != net.weights.len() || json.biases.len() != net.biases.len() {
        return Err(Error::Schema("checkpoint layer count mismatch".into()));
    }
    for (l, (w, flat)) in net.weights.iter_mut().zip(&json.weights).enumerate() {
        if flat.len() != w.len() {
            return Err(Error::Schema(format!(
                "checkpoint weight {l} has {} entries, expected {}",
                flat.len(),
                w.len()
            )));
        }
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                w[(i, j)] = flat[i * w.ncols() + j];
            }
        }
    }
    for (l, (b, vals)) in net.biases.iter_mut().zip(&json.biases).enumerate() {
        if vals.len() != b.len() {
            return Err(Error::Schema(format!(
                "checkpoint bias {l} has {} entries, expected {}",
                vals.len(),
                b.len()
            )));
        }
        for (dst, &src) in b.iter_mut().zip(vals) {
            *dst = src;
        }
    }
    net.validate()?;
    Ok(net)
}

pub fn save_checkpoint(model: &OperatorModel, path: &Path) -> Result<()> {
    let json = CheckpointJson {
        sigma: model.kernel.sigma,
        p: model.p,
        h: model.h,
        m: model.m_vars,
        d: model.dim,
        lambda: model.lambda,
        l_net: net_to_json(&model.l_net),
        f_net: model.f_net.as_ref().map(net_to_json),
    };
    std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<OperatorModel> {
    let text = std::fs::read_to_string(path)?;
    let json: CheckpointJson = serde_json::from_str(&text)?;
    let l_net = net_from_json(&json.l_net)?;
    let f_net = json.f_net.as_ref().map(net_from_json).transpose()?;
    OperatorModel::new(
        l_net,
        f_net,
        RbfKernel::new(json.sigma)?,
        json.p,
        json.m,
        json.h,
        json.d,
        json.lambda,
    )
}

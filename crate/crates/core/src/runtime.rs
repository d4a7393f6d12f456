//! End-to-end training orchestration: the second-order over-the-air
//! algorithm, its perfect-aggregation variant, and the first-order /
//! two-stage baselines, all against a cached centralized reference solve.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, ConstantsInput, TheoryConstants};
use crate::channel::{
    aircomp_aggregate, default_channel_config, draw_channels, scaling_factor,
    uniform_forcing_b, weighted_mean, BeamformerSolution, ChannelConfig, RoundChannel,
};
use crate::data::{partition, PartitionScheme, SampleSet};
use crate::error::{Error, Result};
use crate::model::{self, armijo_line_search, LineSearchConfig, LocalUpdate, LossConfig};
use crate::rng::{self, Purpose};
use crate::sysopt::{
    self, dca_beamforming, sdr_beamforming, BeamformerMethod, GibbsOptions, SysOptContext,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Proposed,
    PerfectAggregation,
    AircompFedavg,
    AircompGiant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SysOptMode {
    GsDca,
    GsSdr,
    DcaOnly,
    SdrOnly,
    NoneFullParticipation,
}

/// Device distance placement.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceScheme {
    Uniform { range: (f64, f64) },
    /// a fraction of devices placed far, the rest near
    FarNear { frac_far: f64, far: (f64, f64), near: (f64, f64) },
}

impl Default for DistanceScheme {
    fn default() -> Self {
        DistanceScheme::Uniform { range: (100.0, 120.0) }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub m: usize,
    pub k: usize,
    pub rounds: usize,
    pub snr_db: f64,
    pub p0: f64,
    pub gamma: f64,
    pub algorithm: Algorithm,
    pub sysopt_mode: SysOptMode,
    pub master_seed: u64,
    pub test_fraction: f64,
    pub partition: PartitionScheme,
    pub distances: DistanceScheme,
    pub lambda: f64,
    pub delta_tilde: f64,
    pub gibbs: GibbsOptions,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub line_search: LineSearchConfig,
    /// bypass the line search with a fixed step when set
    pub fixed_step: Option<f64>,
    /// local gradient steps per round for the first-order baseline
    pub local_epochs: usize,
    /// local learning rate for the first-order baseline
    pub local_lr: f64,
    pub reference_tol: f64,
    /// report zero wall time so output files are byte-stable
    pub deterministic_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 20,
            k: 5,
            rounds: 20,
            snr_db: 80.0,
            p0: 1.0,
            gamma: 1e-8,
            algorithm: Algorithm::Proposed,
            sysopt_mode: SysOptMode::GsDca,
            master_seed: 0,
            test_fraction: 0.2,
            partition: PartitionScheme::Uniform,
            distances: DistanceScheme::default(),
            lambda: 0.1,
            delta_tilde: 0.01,
            gibbs: GibbsOptions::default(),
            cg_tol: 1e-10,
            cg_max_iters: 500,
            line_search: LineSearchConfig::default(),
            fixed_step: None,
            local_epochs: 1,
            local_lr: 1.0,
            reference_tol: 1e-12,
            deterministic_timing: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0, 1)".into()));
        }
        if !(0.0 < self.delta_tilde && self.delta_tilde < 1.0) {
            return Err(Error::Config("delta_tilde must be in (0, 1)".into()));
        }
        if self.algorithm == Algorithm::PerfectAggregation
            && self.sysopt_mode != SysOptMode::NoneFullParticipation
        {
            return Err(Error::Config(
                "perfect aggregation has no channel; sysopt_mode must be none_full_participation"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One round of measurements, shaped for the output CSV.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub t: usize,
    pub selected: Vec<usize>,
    pub j: f64,
    pub a_norm: f64,
    pub eta: f64,
    pub loss: f64,
    pub gap: f64,
    pub accuracy: f64,
    pub alpha: f64,
    pub delta_norm: f64,
    pub constants: TheoryConstants,
    pub sigma_min_h: f64,
    pub kappa: f64,
    /// realized aggregation-noise norms, one entry per AirComp use
    pub noise_norms: Vec<f64>,
    /// quadratic Newton model evaluated at the applied direction
    pub phi_recovered: f64,
    /// quadratic Newton model at its exact minimizer (lower-bounds the above)
    pub phi_exact: f64,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "round,selected_count,selected_ids,J,objective_loss,optimality_gap,test_accuracy,alpha,delta_norm,sigma_min_H,kappa,epsilon_prime,zeta2,wall_ms";

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        let ids: Vec<String> = self.selected.iter().map(|i| i.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.selected.len(),
            ids.join(";"),
            fmt(self.j),
            fmt(self.loss),
            fmt(self.gap),
            fmt(self.accuracy),
            fmt(self.alpha),
            fmt(self.delta_norm),
            fmt(self.sigma_min_h),
            fmt(self.kappa),
            fmt(self.constants.epsilon_prime),
            fmt(self.constants.zeta2),
            fmt(self.wall_ms),
        )
    }
}

/// Full-data Newton solve to gradient norm <= tol. Used as the optimality
/// reference for every run.
pub fn centralized_reference(set: &SampleSet, gamma: f64, tol: f64) -> Result<(DVector<f64>, f64)> {
    let cfg = LossConfig { gamma };
    let all: Vec<usize> = (0..set.n()).collect();
    let ls = LineSearchConfig::default();
    let mut w = DVector::zeros(set.d());
    let mut prev_gnorm = f64::INFINITY;
    for _ in 0..200 {
        let g = model::local_gradient(set, &all, &w, &cfg);
        if g.norm() <= tol {
            return Ok((w.clone(), model::local_loss(set, &all, &w, &cfg)));
        }
        // the loss is evaluated in f64; near the optimum its decrease per
        // step drops below machine precision and the gradient norm floors
        // out. Accept the floor when it is within two decades of tol.
        if g.norm() >= 0.999 * prev_gnorm {
            if g.norm() <= tol * 100.0 {
                return Ok((w.clone(), model::local_loss(set, &all, &w, &cfg)));
            }
            return Err(Error::Other(
                "centralized reference stalled before reaching tolerance".into(),
            ));
        }
        prev_gnorm = g.norm();
        let p = model::conjugate_gradient(
            |x| model::hessian_vec(set, &all, &w, &cfg, x),
            &g,
            1e-14,
            50 * set.d().max(100),
            usize::MAX,
        )?;
        let alpha = armijo_line_search(
            |x| model::local_loss(set, &all, x, &cfg),
            &w,
            &p,
            &g,
            &ls,
        );
        if alpha == 0.0 {
            // line search exhausted: accept the full step only if the
            // gradient is already near tolerance
            if g.norm() <= tol * 10.0 {
                return Ok((w.clone(), model::local_loss(set, &all, &w, &cfg)));
            }
            return Err(Error::Other(
                "centralized reference stalled before reaching tolerance".into(),
            ));
        }
        w -= p * alpha;
    }
    Err(Error::Other(
        "centralized reference did not converge in 200 iterations".into(),
    ))
}

/// JSON checkpoint: enough to resume a run deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub w: Vec<f64>,
    pub round: usize,
    pub master_seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad checkpoint: {e}")))
    }
}

/// Prepared run state: split, sharded, distance-assigned, and referenced.
pub struct Experiment {
    pub cfg: RunConfig,
    pub train: SampleSet,
    pub shards: Vec<Vec<usize>>,
    pub test: SampleSet,
    pub channel_cfg: ChannelConfig,
    pub w_star: DVector<f64>,
    pub f_star: f64,
    pub w: DVector<f64>,
    pub round: usize,
}

fn draw_distances(cfg: &RunConfig) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng::stream(cfg.master_seed, Purpose::Distances);
    match &cfg.distances {
        DistanceScheme::Uniform { range } => {
            (0..cfg.m).map(|_| rng.gen_range(range.0..range.1)).collect()
        }
        DistanceScheme::FarNear { frac_far, far, near } => {
            let n_far = ((cfg.m as f64) * frac_far).round() as usize;
            (0..cfg.m)
                .map(|i| {
                    if i < n_far {
                        rng.gen_range(far.0..far.1)
                    } else {
                        rng.gen_range(near.0..near.1)
                    }
                })
                .collect()
        }
    }
}

impl Experiment {
    pub fn new(cfg: RunConfig, dataset: &SampleSet) -> Result<Self> {
        cfg.validate()?;
        let (train_idx, test_idx) =
            dataset.train_test_indices(cfg.test_fraction, &mut rng::stream(cfg.master_seed, Purpose::Split));
        let train = dataset.subset(&train_idx);
        let test = dataset.subset(&test_idx);
        let fed = partition(
            &train,
            cfg.m,
            &cfg.partition,
            &mut rng::stream(cfg.master_seed, Purpose::Partition),
        )?;
        let distances = draw_distances(&cfg);
        let channel_cfg = default_channel_config(cfg.k, cfg.p0, cfg.snr_db, distances);
        channel_cfg.validate()?;
        let (w_star, f_star) = centralized_reference(&train, cfg.gamma, cfg.reference_tol)?;
        let w = DVector::zeros(train.d());
        Ok(Self {
            shards: fed.shards,
            cfg,
            train,
            test,
            channel_cfg,
            w_star,
            f_star,
            w,
            round: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            w: self.w.iter().cloned().collect(),
            round: self.round,
            master_seed: self.cfg.master_seed,
        }
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.master_seed != self.cfg.master_seed {
            return Err(Error::Config("checkpoint belongs to a different seed".into()));
        }
        if ck.w.len() != self.w.len() {
            return Err(Error::Config("checkpoint dimension mismatch".into()));
        }
        self.w = DVector::from_vec(ck.w.clone());
        self.round = ck.round;
        Ok(())
    }

    fn loss_cfg(&self) -> LossConfig {
        LossConfig { gamma: self.cfg.gamma }
    }

    fn global_loss(&self, w: &DVector<f64>) -> f64 {
        let all: Vec<usize> = (0..self.train.n()).collect();
        model::local_loss(&self.train, &all, w, &self.loss_cfg())
    }

    fn global_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let all: Vec<usize> = (0..self.train.n()).collect();
        model::local_gradient(&self.train, &all, w, &self.loss_cfg())
    }

    fn test_accuracy(&self, w: &DVector<f64>) -> f64 {
        let mut correct = 0usize;
        for i in 0..self.test.n() {
            let score = self.test.features.row(i).transpose().dot(w);
            if score * self.test.labels[i] > 0.0 {
                correct += 1;
            }
        }
        correct as f64 / self.test.n() as f64
    }

    /// Local Newton directions for every device; selection later only gates
    /// transmission. Devices that are already converged report zero norm
    /// and are excluded from the candidate pool.
    fn local_newton_updates(&self) -> Result<Vec<LocalUpdate>> {
        let cfg = self.loss_cfg();
        self.shards
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                model::newton_direction(
                    &self.train,
                    rows,
                    &self.w,
                    &cfg,
                    self.cfg.cg_tol,
                    self.cfg.cg_max_iters,
                    i,
                )
                .map_err(|e| e.in_round(self.round))
            })
            .collect()
    }

    /// Model deltas after E local gradient steps (first-order baseline).
    fn local_delta_updates(&self) -> Vec<LocalUpdate> {
        let cfg = self.loss_cfg();
        self.shards
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                let mut w_local = self.w.clone();
                for _ in 0..self.cfg.local_epochs {
                    let g = model::local_gradient(&self.train, rows, &w_local, &cfg);
                    w_local.axpy(-self.cfg.local_lr, &g, 1.0);
                }
                let p = &self.w - &w_local;
                let norm_scaled = rows.len() as f64 * p.norm();
                let converged = norm_scaled == 0.0;
                LocalUpdate {
                    p,
                    norm_scaled,
                    device: i,
                    size: rows.len(),
                    converged_locally: converged,
                }
            })
            .collect()
    }

    /// One AirComp pass: selection (by mode), beamforming, uniform forcing,
    /// aggregation. `stage` keys the channel/noise substreams so multi-pass
    /// algorithms see independent fading blocks.
    fn aircomp_pass(
        &self,
        updates: &[LocalUpdate],
        stage: u64,
        reuse_selection: Option<&[usize]>,
    ) -> Result<(DVector<f64>, Vec<usize>, f64, f64, f64, f64)> {
        let eligible: Vec<usize> = updates
            .iter()
            .filter(|u| !u.converged_locally)
            .map(|u| u.device)
            .collect();
        if eligible.is_empty() {
            return Err(Error::EmptySelection.in_round(self.round));
        }

        let mut ch_rng = rng::substream(
            self.cfg.master_seed,
            &[self.round as u64, Purpose::Channel as u64, stage],
        );
        let h_all = draw_channels(&self.channel_cfg, self.cfg.m, &mut ch_rng);
        let h_eligible: Vec<_> = eligible.iter().map(|&i| h_all[i].clone()).collect();
        let norms: Vec<f64> = eligible.iter().map(|&i| updates[i].norm_scaled).collect();
        let rc = RoundChannel::from_raw(h_eligible, &norms, self.channel_cfg.sigma2())
            .map_err(|e| e.in_round(self.round))?;

        // selection objective inputs from the full-data curvature
        let m_factor = analysis::hessian_factor(&self.train, &self.w);
        let (sigma_min_h, _) = analysis::hessian_spectrum(&m_factor, self.cfg.gamma);
        let n_cols = analysis::gradient_columns(&self.train, &self.w, &self.loss_cfg());
        let max_grad_norm = analysis::max_column_norm(&n_cols);

        let ctx = SysOptContext {
            h_eff: rc.h_eff.clone(),
            sizes: eligible.iter().map(|&i| updates[i].size).collect(),
            n: self.train.n(),
            d: self.train.d(),
            p0: self.cfg.p0,
            sigma2: rc.sigma2,
            lambda: self.cfg.lambda,
            delta_tilde: self.cfg.delta_tilde,
            sigma_min_h,
            max_update_norm: max_grad_norm,
        };

        // indices below are positions within `eligible`
        let mut gibbs_rng = rng::substream(
            self.cfg.master_seed,
            &[self.round as u64, Purpose::Gibbs as u64, stage],
        );
        let mut sdr_rng = rng::substream(
            self.cfg.master_seed,
            &[self.round as u64, Purpose::SdrRandomization as u64, stage],
        );
        let (sel_local, beam_a, j) = if let Some(sel) = reuse_selection {
            let sel_local: Vec<usize> = sel
                .iter()
                .filter_map(|&dev| eligible.iter().position(|&e| e == dev))
                .collect();
            if sel_local.is_empty() {
                return Err(Error::EmptySelection.in_round(self.round));
            }
            let channels: Vec<_> = sel_local.iter().map(|&i| &ctx.h_eff[i]).collect();
            let beam = match self.cfg.gibbs.method {
                BeamformerMethod::Dca => dca_beamforming(&channels, &self.cfg.gibbs.dca, None),
                BeamformerMethod::Sdr => sdr_beamforming(&channels, &self.cfg.gibbs.sdr, &mut sdr_rng),
            }
            .map_err(|e| e.in_round(self.round))?;
            let j = sysopt::objective_j(&ctx, &sel_local, &beam.a);
            (sel_local, beam.a, j)
        } else {
            match self.cfg.sysopt_mode {
                SysOptMode::GsDca | SysOptMode::GsSdr => {
                    let mut opts = self.cfg.gibbs.clone();
                    opts.method = if self.cfg.sysopt_mode == SysOptMode::GsDca {
                        BeamformerMethod::Dca
                    } else {
                        BeamformerMethod::Sdr
                    };
                    let res = sysopt::gibbs_select(&ctx, &opts, &mut gibbs_rng)
                        .map_err(|e| e.in_round(self.round))?;
                    (res.selection, res.beamformer.a, res.objective)
                }
                SysOptMode::DcaOnly | SysOptMode::SdrOnly | SysOptMode::NoneFullParticipation => {
                    let sel_local: Vec<usize> = (0..eligible.len()).collect();
                    let channels: Vec<_> = sel_local.iter().map(|&i| &ctx.h_eff[i]).collect();
                    let beam = if self.cfg.sysopt_mode == SysOptMode::SdrOnly {
                        sdr_beamforming(&channels, &self.cfg.gibbs.sdr, &mut sdr_rng)
                    } else {
                        dca_beamforming(&channels, &self.cfg.gibbs.dca, None)
                    }
                    .map_err(|e| e.in_round(self.round))?;
                    let j = sysopt::objective_j(&ctx, &sel_local, &beam.a);
                    (sel_local, beam.a, j)
                }
            }
        };

        let sel_updates: Vec<&LocalUpdate> = sel_local.iter().map(|&i| &updates[eligible[i]]).collect();
        let sel_channels: Vec<&DVector<Complex64>> = sel_local.iter().map(|&i| &rc.h_eff[i]).collect();
        let eta = scaling_factor(&beam_a, &sel_channels, self.train.d(), self.cfg.p0)
            .map_err(|e| e.in_round(self.round))?;
        let b: Vec<Complex64> = sel_channels
            .iter()
            .enumerate()
            .map(|(i, h)| uniform_forcing_b(&beam_a, h, eta, sel_updates[i].device))
            .collect::<Result<_>>()
            .map_err(|e| e.in_round(self.round))?;
        let beam = BeamformerSolution { a: beam_a, eta, b };

        let mut noise_rng = rng::substream(
            self.cfg.master_seed,
            &[self.round as u64, Purpose::Noise as u64, stage],
        );
        let out = aircomp_aggregate(&sel_updates, &sel_channels, &beam, rc.sigma2, &mut noise_rng)
            .map_err(|e| e.in_round(self.round))?;
        let selected_devices: Vec<usize> = sel_local.iter().map(|&i| eligible[i]).collect();
        Ok((
            out.p_hat,
            selected_devices,
            j,
            beam.a.norm(),
            eta,
            out.noise.norm(),
        ))
    }

    /// Run one round and advance the model.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let start = std::time::Instant::now();
        let cfg = self.loss_cfg();

        // (p_hat, selected, J, ||a||, eta, realized noise norms)
        let (p_hat, selected, j, a_norm, eta, noise_norms): (
            DVector<f64>,
            Vec<usize>,
            f64,
            f64,
            f64,
            Vec<f64>,
        ) = match self.cfg.algorithm {
            Algorithm::PerfectAggregation => {
                let updates = self.local_newton_updates()?;
                let live: Vec<&LocalUpdate> = updates.iter().filter(|u| !u.converged_locally).collect();
                if live.is_empty() {
                    (DVector::zeros(self.train.d()), (0..self.cfg.m).collect(), 0.0, 0.0, 0.0, vec![])
                } else {
                    let p = weighted_mean(&live).map_err(|e| e.in_round(self.round))?;
                    ((p), (0..self.cfg.m).collect(), 0.0, 0.0, 0.0, vec![])
                }
            }
            Algorithm::Proposed => {
                let updates = self.local_newton_updates()?;
                let (p, sel, j, a_norm, eta, nn) = self.aircomp_pass(&updates, 0, None)?;
                (p, sel, j, a_norm, eta, vec![nn])
            }
            Algorithm::AircompFedavg => {
                let updates = self.local_delta_updates();
                let (p, sel, j, a_norm, eta, nn) = self.aircomp_pass(&updates, 0, None)?;
                (p, sel, j, a_norm, eta, vec![nn])
            }
            Algorithm::AircompGiant => {
                // stage A: aggregate local gradients over the air
                let grads: Vec<LocalUpdate> = self
                    .shards
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| {
                        let g = model::local_gradient(&self.train, rows, &self.w, &cfg);
                        let norm_scaled = rows.len() as f64 * g.norm();
                        LocalUpdate {
                            converged_locally: norm_scaled == 0.0,
                            p: g,
                            norm_scaled,
                            device: i,
                            size: rows.len(),
                        }
                    })
                    .collect();
                let (g_hat, sel, j, _, _, nn_a) = self.aircomp_pass(&grads, 0, None)?;
                // stage B: devices solve H_i p = g_hat and aggregate again,
                // over a fresh fading block but the same selection
                let dirs: Vec<LocalUpdate> = self
                    .shards
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| {
                        let p = if g_hat.norm() == 0.0 {
                            DVector::zeros(self.train.d())
                        } else {
                            model::conjugate_gradient(
                                |x| model::hessian_vec(&self.train, rows, &self.w, &cfg, x),
                                &g_hat,
                                self.cfg.cg_tol,
                                self.cfg.cg_max_iters,
                                i,
                            )?
                        };
                        let norm_scaled = rows.len() as f64 * p.norm();
                        Ok(LocalUpdate {
                            converged_locally: norm_scaled == 0.0,
                            p,
                            norm_scaled,
                            device: i,
                            size: rows.len(),
                        })
                    })
                    .collect::<Result<_>>()
                    .map_err(|e: Error| e.in_round(self.round))?;
                let (p, sel_b, _, a_norm, eta, nn_b) = self.aircomp_pass(&dirs, 1, Some(&sel))?;
                let _ = sel_b;
                (p, sel, j, a_norm, eta, vec![nn_a, nn_b])
            }
        };

        // constants at the pre-update iterate
        let m_factor = analysis::hessian_factor(&self.train, &self.w);
        let (sigma_min_h, sigma_max_h) = analysis::hessian_spectrum(&m_factor, self.cfg.gamma);
        let n_cols = analysis::gradient_columns(&self.train, &self.w, &cfg);
        let max_grad_norm = analysis::max_column_norm(&n_cols);
        let mu = analysis::coherence(&m_factor).unwrap_or(1.0);
        let constants = analysis::compute_constants(&ConstantsInput {
            lambda: self.cfg.lambda,
            delta_i: vec![self.cfg.delta_tilde; self.cfg.m],
            mu,
            sigma_max_gram: analysis::sigma_max_gram(&m_factor),
            gamma: self.cfg.gamma,
            n: self.train.n(),
            m: self.cfg.m,
            d: self.train.d(),
            selected_sizes: selected.iter().map(|&i| self.shards[i].len()).collect(),
            sigma_min_h,
            sigma: if self.cfg.algorithm == Algorithm::PerfectAggregation {
                0.0
            } else {
                self.channel_cfg.sigma2().sqrt()
            },
            a_norm,
            eta: if eta > 0.0 { eta } else { 1.0 },
            max_grad_norm,
            realized_noise_norm: noise_norms.iter().cloned().fold(0.0, f64::max),
        });

        // quadratic-model values at the applied and exact directions
        let all_rows: Vec<usize> = (0..self.train.n()).collect();
        let g_full = model::local_gradient(&self.train, &all_rows, &self.w, &cfg);
        let p_star = analysis::exact_newton_step(&self.train, &self.w, &cfg, self.cfg.cg_tol)
            .map_err(|e| e.in_round(self.round))?;
        let phi_recovered = analysis::quadratic_phi(
            |v| model::hessian_vec(&self.train, &all_rows, &self.w, &cfg, v),
            &g_full,
            &p_hat,
        );
        let phi_exact = analysis::quadratic_phi(
            |v| model::hessian_vec(&self.train, &all_rows, &self.w, &cfg, v),
            &g_full,
            &p_star,
        );

        // global step with Armijo safeguarding (or a fixed step)
        let alpha = if p_hat.norm() == 0.0 {
            0.0
        } else {
            match self.cfg.fixed_step {
                Some(a) => a,
                None => {
                    let g = self.global_gradient(&self.w);
                    armijo_line_search(|x| self.global_loss(x), &self.w, &p_hat, &g, &self.cfg.line_search)
                }
            }
        };
        self.w.axpy(-alpha, &p_hat, 1.0);
        self.round += 1;

        let loss = self.global_loss(&self.w);
        let record = RoundRecord {
            t: self.round,
            selected,
            j,
            a_norm,
            eta,
            loss,
            gap: loss - self.f_star,
            accuracy: self.test_accuracy(&self.w),
            alpha,
            delta_norm: (&self.w - &self.w_star).norm(),
            constants,
            sigma_min_h,
            kappa: sigma_max_h / sigma_min_h,
            noise_norms,
            phi_recovered,
            phi_exact,
            wall_ms: if self.cfg.deterministic_timing {
                0.0
            } else {
                start.elapsed().as_secs_f64() * 1e3
            },
        };
        Ok(record)
    }

    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(self.cfg.rounds);
        while self.round < self.cfg.rounds {
            records.push(self.step()?);
        }
        Ok(records)
    }
}

/// Convenience wrapper: build an experiment from a dataset and run it.
pub fn run_experiment(cfg: RunConfig, dataset: &SampleSet) -> Result<(Experiment, Vec<RoundRecord>)> {
    let mut exp = Experiment::new(cfg, dataset)?;
    let records = exp.run()?;
    Ok((exp, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_logistic;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn small_dataset(seed: u64, n: usize, d: usize) -> SampleSet {
        synth_logistic(n, d, 5.0, &mut stream(seed, Purpose::Synth)).unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            m: 3,
            k: 2,
            rounds: 2,
            snr_db: 60.0,
            gamma: 1e-4,
            sysopt_mode: SysOptMode::DcaOnly,
            ..RunConfig::default()
        }
    }

    #[test]
    fn reference_meets_gradient_tolerance() {
        let set = small_dataset(50, 300, 8);
        let (w_star, f_star) = centralized_reference(&set, 1e-4, 1e-12).unwrap();
        let cfg = LossConfig { gamma: 1e-4 };
        let all: Vec<usize> = (0..set.n()).collect();
        let g = model::local_gradient(&set, &all, &w_star, &cfg);
        assert!(g.norm() <= 1e-12);
        assert_relative_eq!(f_star, model::local_loss(&set, &all, &w_star, &cfg));
    }

    #[test]
    fn reference_shrinks_with_large_gamma() {
        let set = small_dataset(51, 200, 6);
        let gamma = 1e6;
        let (w_star, _) = centralized_reference(&set, gamma, 1e-12).unwrap();
        let cfg = LossConfig { gamma };
        let all: Vec<usize> = (0..set.n()).collect();
        let g0 = model::local_gradient(&set, &all, &DVector::zeros(6), &cfg);
        assert!(w_star.norm() <= g0.norm() / gamma);
    }

    #[test]
    fn reference_matches_gradient_descent_oracle() {
        let set = small_dataset(52, 250, 10);
        let gamma = 1e-3;
        let (_, f_star) = centralized_reference(&set, gamma, 1e-12).unwrap();
        // long-horizon gradient descent with backtracking as an
        // independent first-order solve
        let cfg = LossConfig { gamma };
        let all: Vec<usize> = (0..set.n()).collect();
        let ls = LineSearchConfig::default();
        let mut w = DVector::zeros(10);
        for _ in 0..20_000 {
            let g = model::local_gradient(&set, &all, &w, &cfg);
            if g.norm() < 1e-10 {
                break;
            }
            let alpha = armijo_line_search(
                |x| model::local_loss(&set, &all, x, &cfg),
                &w,
                &g,
                &g,
                &ls,
            );
            if alpha == 0.0 {
                break;
            }
            w.axpy(-alpha, &g, 1.0);
        }
        let f_gd = model::local_loss(&set, &all, &w, &cfg);
        assert!((f_gd - f_star).abs() < 1e-10, "|{f_gd} - {f_star}|");
        assert!(f_gd >= f_star - 1e-12);
    }

    #[test]
    fn perfect_aggregation_is_weighted_mean() {
        let set = small_dataset(53, 240, 5);
        let cfg = RunConfig {
            algorithm: Algorithm::PerfectAggregation,
            sysopt_mode: SysOptMode::NoneFullParticipation,
            rounds: 1,
            m: 4,
            gamma: 1e-4,
            ..RunConfig::default()
        };
        let mut exp = Experiment::new(cfg, &set).unwrap();
        let w0 = exp.w.clone();
        let updates = exp.local_newton_updates().unwrap();
        let live: Vec<&LocalUpdate> = updates.iter().filter(|u| !u.converged_locally).collect();
        let expected_dir = weighted_mean(&live).unwrap();
        let rec = exp.step().unwrap();
        let step = (w0 - &exp.w) / rec.alpha;
        assert!((step - expected_dir).norm() < 1e-12);
        assert!(rec.gap >= -1e-10);
        assert!(rec.accuracy >= 0.0 && rec.accuracy <= 1.0);
    }

    #[test]
    fn identical_shards_pass_through() {
        // all shards identical and noise-free: the aggregate equals each
        // device's own direction
        let set = small_dataset(54, 120, 4);
        // duplicate every sample 3 times, sharded so each device sees one copy
        let mut features = nalgebra::DMatrix::zeros(360, 4);
        let mut labels = DVector::zeros(360);
        for rep in 0..3 {
            for i in 0..120 {
                for jc in 0..4 {
                    features[(rep * 120 + i, jc)] = set.features[(i, jc)];
                }
                labels[rep * 120 + i] = set.labels[i];
            }
        }
        let big = SampleSet::new(features, labels).unwrap();
        let cfg = RunConfig {
            m: 3,
            k: 2,
            rounds: 1,
            snr_db: 400.0, // effectively noise-free
            gamma: 1e-4,
            sysopt_mode: SysOptMode::DcaOnly,
            test_fraction: 0.0,
            ..RunConfig::default()
        };
        let mut exp = Experiment::new(cfg, &big).unwrap();
        // overwrite the (shuffled) training set and shards with aligned copies
        exp.train = big.clone();
        exp.shards = (0..3).map(|r| ((r * 120)..(r * 120 + 120)).collect()).collect();
        let updates = exp.local_newton_updates().unwrap();
        let (p_hat, _, _, _, _, _) = exp.aircomp_pass(&updates, 0, None).unwrap();
        assert!((&p_hat - &updates[0].p).norm() / updates[0].p.norm() < 1e-9);
    }

    #[test]
    fn deterministic_records() {
        let set = small_dataset(55, 200, 5);
        let run = |seed: u64| {
            let cfg = RunConfig {
                master_seed: seed,
                ..tiny_config()
            };
            let (_, records) = run_experiment(cfg, &set).unwrap();
            records.iter().map(|r| r.csv_row()).collect::<Vec<_>>()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a, b);
        let c = run(8);
        assert_ne!(a, c);
    }

    #[test]
    fn fedavg_noise_free_matches_centralized_gradient_step() {
        // equal shard sizes, E = 1, perfect channel: the aggregated delta
        // is lr times the global gradient
        let set = small_dataset(56, 240, 5);
        let cfg = RunConfig {
            m: 4,
            k: 2,
            rounds: 1,
            snr_db: 300.0,
            gamma: 1e-4,
            algorithm: Algorithm::AircompFedavg,
            sysopt_mode: SysOptMode::DcaOnly,
            local_epochs: 1,
            local_lr: 0.5,
            test_fraction: 0.0,
            ..RunConfig::default()
        };
        let exp = Experiment::new(cfg, &set).unwrap();
        let g = exp.global_gradient(&exp.w.clone());
        let updates = exp.local_delta_updates();
        let (p_hat, _, _, _, _, _) = exp.aircomp_pass(&updates, 0, None).unwrap();
        // shards may differ by one sample; compare against the exact
        // weighted mean of local gradients instead of requiring equality
        let sizes: Vec<f64> = exp.shards.iter().map(|s| s.len() as f64).collect();
        let equal = sizes.iter().all(|&s| s == sizes[0]);
        if equal {
            assert!((&p_hat - &g * 0.5).norm() / (0.5 * g.norm()) < 1e-9);
        } else {
            let lc = exp.loss_cfg();
            let mut acc = DVector::zeros(5);
            let mut tot = 0.0;
            for rows in &exp.shards {
                let gl = model::local_gradient(&exp.train, rows, &exp.w, &lc);
                acc.axpy(0.5 * rows.len() as f64, &gl, 1.0);
                tot += rows.len() as f64;
            }
            acc /= tot;
            assert!((&p_hat - &acc).norm() / acc.norm() < 1e-9);
        }
    }

    #[test]
    fn giant_noise_free_reproduces_two_stage_direction() {
        let set = small_dataset(57, 240, 5);
        let cfg = RunConfig {
            m: 3,
            k: 2,
            rounds: 1,
            snr_db: 300.0,
            gamma: 1e-4,
            algorithm: Algorithm::AircompGiant,
            sysopt_mode: SysOptMode::DcaOnly,
            test_fraction: 0.0,
            ..RunConfig::default()
        };
        let mut exp = Experiment::new(cfg, &set).unwrap();
        let lc = exp.loss_cfg();
        // oracle: weighted-mean gradient, then weighted mean of H_i^{-1} g_hat
        let mut g_hat = DVector::zeros(5);
        let mut tot = 0.0;
        for rows in &exp.shards {
            let g = model::local_gradient(&exp.train, rows, &exp.w, &lc);
            g_hat.axpy(rows.len() as f64, &g, 1.0);
            tot += rows.len() as f64;
        }
        g_hat /= tot;
        let mut expected = DVector::zeros(5);
        for (i, rows) in exp.shards.iter().enumerate() {
            let p = model::conjugate_gradient(
                |x| model::hessian_vec(&exp.train, rows, &exp.w, &lc, x),
                &g_hat,
                1e-12,
                1000,
                i,
            )
            .unwrap();
            expected.axpy(rows.len() as f64, &p, 1.0);
        }
        expected /= tot;
        let w0 = exp.w.clone();
        let rec = exp.step().unwrap();
        assert_eq!(rec.noise_norms.len(), 2);
        let step = (w0 - &exp.w) / rec.alpha;
        assert!((step - &expected).norm() / expected.norm() < 1e-6);
    }

    #[test]
    fn giant_accrues_noise_in_both_stages() {
        let set = small_dataset(58, 240, 5);
        let cfg = RunConfig {
            m: 3,
            k: 2,
            rounds: 1,
            snr_db: 20.0,
            gamma: 1e-4,
            algorithm: Algorithm::AircompGiant,
            sysopt_mode: SysOptMode::DcaOnly,
            ..RunConfig::default()
        };
        let mut exp = Experiment::new(cfg, &set).unwrap();
        let rec = exp.step().unwrap();
        assert_eq!(rec.noise_norms.len(), 2);
        assert!(rec.noise_norms[0] > 0.0);
        assert!(rec.noise_norms[1] > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let set = small_dataset(59, 200, 5);
        let cfg = tiny_config();
        let mut exp = Experiment::new(cfg.clone(), &set).unwrap();
        let r1 = exp.step().unwrap();
        let ck = Checkpoint::from_json(&exp.checkpoint().to_json()).unwrap();
        let r2 = exp.step().unwrap();

        let mut exp2 = Experiment::new(cfg, &set).unwrap();
        exp2.restore(&ck).unwrap();
        let r2b = exp2.step().unwrap();
        assert_eq!(r2.csv_row(), r2b.csv_row());
        let _ = r1;
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.algorithm = Algorithm::PerfectAggregation;
        cfg.sysopt_mode = SysOptMode::GsDca;
        assert!(cfg.validate().is_err());
        cfg.sysopt_mode = SysOptMode::NoneFullParticipation;
        assert!(cfg.validate().is_ok());
        // rounds = 0 is a legal edge: a run that only emits its summary
        cfg.rounds = 0;
        assert!(cfg.validate().is_ok());
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_row_shape() {
        let set = small_dataset(60, 200, 5);
        let (_, records) = run_experiment(tiny_config(), &set).unwrap();
        assert_eq!(CSV_HEADER.split(',').count(), 14);
        for r in &records {
            assert_eq!(r.csv_row().split(',').count(), 14);
            assert!(r.gap >= -1e-10);
        }
    }
}

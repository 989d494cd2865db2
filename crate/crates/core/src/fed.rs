//! Server/client round state machine: sample-count-weighted averaging,
//! BN-excluding aggregation, and the proximal local objective.
//!
//! A round is broadcast → local SSL training → aggregate. Each client
//! trains from `stream(seed, "local-train", [client_id, round])`, so the
//! trajectory depends only on (config, seed) and never on execution
//! interleaving; sequential and parallel rounds are bit-identical.

use crate::augment::{two_view_batch, AugmentConfig};
use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::model::{
    forward_predictor, forward_projected, stage, ArchitectureSpec, Phase, Staged,
};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::rng::stream;
use crate::ssl::{
    barlow_loss, info_nce, simsiam_loss, tico_loss, vicreg_loss, FeatureMemory, Method, SslConfig,
};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Aggregation scheme for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    FedAvg,
    FedBn,
    FedProx,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::FedAvg, Scheme::FedBn, Scheme::FedProx];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Scheme::FedAvg),
            "fedbn" => Ok(Scheme::FedBn),
            "fedprox" => Ok(Scheme::FedProx),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?}, expected fedavg, fedbn, or fedprox"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::FedAvg => "fedavg",
            Scheme::FedBn => "fedbn",
            Scheme::FedProx => "fedprox",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedConfig {
    pub scheme: Scheme,
    /// FedProx proximal weight; ignored by the other schemes.
    pub mu: f64,
    /// Fraction of clients selected each round.
    pub participation: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            scheme: Scheme::FedAvg,
            mu: 0.001,
            participation: 1.0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "mu must be finite and nonnegative, got {}",
                self.mu
            )));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must be in (0,1], got {}",
                self.participation
            )));
        }
        Ok(())
    }
}

/// Per-round training shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundPlan {
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(format!(
                "plan needs local_epochs >= 1 and batch_size >= 2, got E={} B={}",
                self.local_epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

/// One simulated client: its parameter view, its shard of the train set,
/// and (for the feature-memory method) its running second-moment matrix.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: ParamSet,
    pub shard: Vec<usize>,
    pub memory: Option<FeatureMemory>,
}

impl ClientState {
    pub fn new(
        id: usize,
        params: ParamSet,
        shard: Vec<usize>,
        spec: &ArchitectureSpec,
        method: Method,
    ) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Partition(format!("client {id} has an empty shard")));
        }
        let memory = if method.uses_feature_memory() {
            Some(FeatureMemory::new(spec.proj_dim()?))
        } else {
            None
        };
        Ok(ClientState {
            id,
            params,
            shard,
            memory,
        })
    }
}

/// One client's trained weights plus its aggregation weight n_k.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: u64,
    pub n_k: u64,
    pub params: ParamSet,
}

/// Losses observed during one round, per participating client.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoundSummary {
    pub round: u64,
    /// (client id, mean loss over that client's local steps).
    pub client_losses: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ParamSet,
    pub round: u64,
    pub history: Vec<RoundSummary>,
}

impl ServerState {
    pub fn new(global: ParamSet) -> Self {
        ServerState {
            global,
            round: 0,
            history: Vec::new(),
        }
    }
}

/// Everything one round of training reads; shared immutably across
/// clients.
pub struct TrainContext<'a> {
    pub spec: &'a ArchitectureSpec,
    pub data: &'a DatasetContainer,
    pub ssl: &'a SslConfig,
    pub augment: &'a AugmentConfig,
    pub plan: &'a RoundPlan,
    pub fed: &'a FedConfig,
    pub lr: f64,
    pub seed: u64,
    pub parallel: bool,
}

/// Sample-count-weighted mean of every entry, BN included.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ParamSet> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    let mut n_total: u64 = 0;
    for update in updates {
        if update.n_k == 0 {
            return Err(Error::Aggregation(format!(
                "client {} reports n_k = 0",
                update.client_id
            )));
        }
        first.params.compatible(&update.params)?;
        n_total += update.n_k;
    }

    let mut out = first.params.clone();
    out.sample_count = n_total;
    for (name, entry) in out.iter_mut() {
        let acc = entry.tensor.data_mut();
        acc.fill(0.0);
        for update in updates {
            let weight = update.n_k as f64 / n_total as f64;
            let source = update.params.get(name)?;
            for (a, &v) in acc.iter_mut().zip(source.tensor.data()) {
                *a += weight * v;
            }
        }
    }
    Ok(out)
}

/// FedAVG over non-BN entries only. BN entries stay client-local: the
/// returned global carries the round-start values as placeholders, and
/// [`broadcast`] never writes BN entries under this scheme.
pub fn aggregate_fedbn(updates: &[ClientUpdate], round_start: &ParamSet) -> Result<ParamSet> {
    let mut out = aggregate_fedavg(updates)?;
    round_start.compatible(&out)?;
    for (name, entry) in out.iter_mut() {
        if entry.is_batchnorm {
            let placeholder = round_start.get(name)?;
            entry.tensor = placeholder.tensor.clone();
        }
    }
    Ok(out)
}

/// Install the global view into a client's parameters: every entry for the
/// averaging schemes, non-BN entries only for the BN-excluding scheme.
pub fn broadcast(scheme: Scheme, global: &ParamSet, client: &mut ParamSet) -> Result<()> {
    global.compatible(client)?;
    let keep_bn = scheme == Scheme::FedBn;
    for (name, entry) in client.iter_mut() {
        if keep_bn && entry.is_batchnorm {
            continue;
        }
        entry.tensor = global.get(name)?.tensor.clone();
    }
    Ok(())
}

/// Proximal term (μ/2)·‖w − w^t‖² over every entry. Trainable entries go
/// through the tape; running statistics carry no gradient and enter as a
/// constant, keeping the value faithful to the full parameter vector. No
/// μ = 0 short-circuit: the penalty nodes are always built, and the μ = 0
/// trajectory must match the penalty-free one bit-for-bit anyway.
pub fn fedprox_penalty(
    tape: &mut Tape,
    staged: &Staged,
    local: &ParamSet,
    anchor: &ParamSet,
    mu: f64,
) -> Result<Var> {
    anchor.compatible(local)?;
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("mu must be nonnegative, got {mu}")));
    }

    let mut total: Option<Var> = None;
    for (name, var) in staged.iter() {
        let anchor_leaf = tape.leaf(anchor.get(name)?.tensor.clone());
        let diff = tape.sub(var, anchor_leaf)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }

    let mut constant = 0.0;
    for (name, entry) in local.iter() {
        if !entry.trainable {
            let anchor_entry = anchor.get(name)?;
            constant += entry
                .tensor
                .data()
                .iter()
                .zip(anchor_entry.tensor.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    let constant_leaf = tape.leaf(Tensor::scalar(constant));
    let combined = match total {
        Some(t) => tape.add(t, constant_leaf)?,
        None => constant_leaf,
    };
    tape.scalar_mul(combined, mu / 2.0)
}

/// Scalar loss for one two-view batch under the configured method.
fn ssl_step_loss(
    tape: &mut Tape,
    spec: &ArchitectureSpec,
    staged: &Staged,
    ssl: &SslConfig,
    memory: Option<&mut FeatureMemory>,
    phase: &mut Phase<'_>,
    view_a: Tensor,
    view_b: Tensor,
) -> Result<Var> {
    let xa = tape.leaf(view_a);
    let xb = tape.leaf(view_b);
    let z1 = forward_projected(spec, tape, staged, xa, phase)?;
    let z2 = forward_projected(spec, tape, staged, xb, phase)?;
    match ssl.method {
        Method::SimClr => info_nce(tape, z1, z2, ssl.temperature),
        Method::SimSiam => {
            let p1 = forward_predictor(spec, tape, staged, z1, phase)?;
            let p2 = forward_predictor(spec, tape, staged, z2, phase)?;
            let z1_frozen = tape.detach(z1);
            let z2_frozen = tape.detach(z2);
            simsiam_loss(tape, p1, p2, z1_frozen, z2_frozen)
        }
        Method::Barlow => barlow_loss(tape, z1, z2, ssl.barlow_lambda),
        Method::VicReg => vicreg_loss(
            tape,
            z1,
            z2,
            ssl.vicreg_inv,
            ssl.vicreg_var,
            ssl.vicreg_cov,
            ssl.vicreg_gamma,
        ),
        Method::Tico => {
            let memory = memory.ok_or_else(|| {
                Error::contract("ssl_step_loss", "feature-memory method without a memory")
            })?;
            let z1n = tape.row_l2_normalize(z1)?;
            let z2n = tape.row_l2_normalize(z2)?;
            tico_loss(tape, memory, z1n, z2n, ssl.tico_beta, ssl.tico_rho)
        }
    }
}

/// E local epochs of SSL training on one client; returns its update and
/// the mean loss across steps.
pub fn local_train(
    client: &mut ClientState,
    anchor: &ParamSet,
    ctx: &TrainContext<'_>,
    round: u64,
) -> Result<(ClientUpdate, f64)> {
    let mut rng = stream(ctx.seed, "local-train", &[client.id as u64, round]);
    let mut opt = Sgd::new(ctx.lr, 0.0)?;
    let n_k = client.shard.len() as u64;

    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..ctx.plan.local_epochs {
        let mut order = client.shard.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(ctx.plan.batch_size) {
            if batch.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let images = ctx.data.image_batch(batch)?;
            let (view_a, view_b) = two_view_batch(&images, ctx.augment, &mut rng)?;

            let mut tape = Tape::new();
            let staged = stage(&mut tape, &client.params);
            let loss = {
                let mut phase = Phase::Train(&mut client.params);
                ssl_step_loss(
                    &mut tape,
                    ctx.spec,
                    &staged,
                    ctx.ssl,
                    client.memory.as_mut(),
                    &mut phase,
                    view_a,
                    view_b,
                )?
            };
            let total = if ctx.fed.scheme == Scheme::FedProx {
                let penalty =
                    fedprox_penalty(&mut tape, &staged, &client.params, anchor, ctx.fed.mu)?;
                tape.add(loss, penalty)?
            } else {
                loss
            };

            loss_sum += tape.value(total).scalar_value()?;
            steps += 1;
            tape.backward(total)?;
            opt.step(&mut client.params, &staged, &mut tape)?;
        }
    }

    if steps == 0 {
        log::warn!(
            "client {} trained zero steps (shard of {} cannot fill a batch)",
            client.id,
            client.shard.len()
        );
    }
    let mean_loss = if steps > 0 {
        loss_sum / steps as f64
    } else {
        0.0
    };

    let mut params = client.params.clone();
    params.sample_count = n_k;
    Ok((
        ClientUpdate {
            client_id: client.id,
            round,
            n_k,
            params,
        },
        mean_loss,
    ))
}

/// Clients selected for a round: everyone at full participation, otherwise
/// a seeded draw of ceil(fraction·K), reported in ascending id order.
fn select_clients(n_clients: usize, fed: &FedConfig, seed: u64, round: u64) -> Vec<usize> {
    if fed.participation >= 1.0 {
        return (0..n_clients).collect();
    }
    let want = ((fed.participation * n_clients as f64).ceil() as usize).clamp(1, n_clients);
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut rng = stream(seed, "participation", &[round]);
    ids.shuffle(&mut rng);
    ids.truncate(want);
    ids.sort_unstable();
    ids
}

/// One communication round: broadcast, local training on every selected
/// client (in parallel when the context asks), aggregation, and a history
/// entry. Any client failure aborts the round with the server untouched.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    ctx: &TrainContext<'_>,
) -> Result<()> {
    ctx.fed.validate()?;
    ctx.plan.validate()?;
    ctx.ssl.validate()?;
    if clients.is_empty() {
        return Err(Error::Aggregation("no clients to train".into()));
    }

    let round = server.round;
    let selected = select_clients(clients.len(), ctx.fed, ctx.seed, round);
    let anchor = server.global.clone();

    let mut participants: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect();
    for client in participants.iter_mut() {
        broadcast(ctx.fed.scheme, &server.global, &mut client.params)?;
    }

    let results: Result<Vec<(ClientUpdate, f64)>> = if ctx.parallel {
        participants
            .par_iter_mut()
            .map(|client| local_train(client, &anchor, ctx, round))
            .collect()
    } else {
        participants
            .iter_mut()
            .map(|client| local_train(client, &anchor, ctx, round))
            .collect()
    };
    let results = results?;

    let updates: Vec<ClientUpdate> = results.iter().map(|(u, _)| u.clone()).collect();
    let aggregated = match ctx.fed.scheme {
        Scheme::FedAvg | Scheme::FedProx => aggregate_fedavg(&updates)?,
        Scheme::FedBn => aggregate_fedbn(&updates, &anchor)?,
    };

    server.global = aggregated;
    server.round = round + 1;
    server.history.push(RoundSummary {
        round,
        client_losses: results
            .iter()
            .map(|(u, loss)| (u.client_id, *loss))
            .collect(),
    });
    Ok(())
}

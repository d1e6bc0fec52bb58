//! Coordinator and client loops over a frame transport.
//!
//! Both transports move the same encoded frames. `in_process` connects each
//! client thread to the coordinator with channels; `tcp` opens a listener and
//! has each client connect over a real socket. The coordinator observes every
//! frame in both directions through an optional audit hook.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aggregate::{aggregate_updates, apply_global_update, GradientUpdate};
use super::config::{FedMode, FederationConfig, Transport};
use super::partition::partition_dataset;
use super::protocol::{decode_message, encode_message, read_frame, ClientStats, Message, RoundReport};
use crate::digest::Fnv64;
use crate::kinematics::Dataset;
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::PckConfig;
use crate::training::{evaluate, train_local, ObjectiveConfig, Personalization};
use crate::{Error, Result};

/// Environment variable overriding the coordinator's TCP bind address.
pub const BIND_ADDR_ENV: &str = "FJL_BIND_ADDR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToClient,
    ToCoordinator,
}

/// Observer called with every frame the coordinator sends or receives.
pub type FrameHook = Arc<dyn Fn(Direction, &[u8]) + Send + Sync>;

/// Everything a federated run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct TrainingSetup<'a> {
    pub data: &'a Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub pck: PckConfig,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub reports: Vec<RoundReport>,
    pub params: ModelParams,
}

#[derive(Default)]
pub struct RunHooks<'h> {
    pub frames: Option<FrameHook>,
    /// Called after each round with the report and the updated global model.
    pub on_round: Option<Box<dyn FnMut(&RoundReport, &ModelParams) -> Result<()> + 'h>>,
}

/// Client `k`'s identifier.
pub fn client_id(k: usize) -> String {
    format!("client{k:02}")
}

pub(crate) fn mix(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Fnv64::new();
    h.update(&seed.to_le_bytes());
    for p in parts {
        h.update(p);
    }
    h.finish()
}

enum Incoming {
    Frame(usize, Vec<u8>),
    Closed(usize, String),
}

trait ClientLink {
    fn send(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

struct ChannelLink {
    conn: usize,
    up: Sender<Incoming>,
    down: Receiver<Vec<u8>>,
}

impl ClientLink for ChannelLink {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.up
            .send(Incoming::Frame(self.conn, frame))
            .map_err(|_| Error::Federation("coordinator hung up".into()))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.down
            .recv()
            .map_err(|_| Error::Federation("coordinator hung up".into()))
    }
}

struct TcpLink(TcpStream);

impl ClientLink for TcpLink {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.0.write_all(&frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        read_frame(&mut self.0)
    }
}

/// Coordinator's send half of one connection.
enum Downlink {
    Channel(Sender<Vec<u8>>),
    Tcp(TcpStream),
}

impl Downlink {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        match self {
            Downlink::Channel(tx) => tx
                .send(frame.to_vec())
                .map_err(|_| Error::Federation("client hung up".into())),
            Downlink::Tcp(s) => Ok(s.write_all(frame)?),
        }
    }
}

struct ClientJob<'a> {
    id: String,
    indices: Vec<usize>,
    setup: &'a TrainingSetup<'a>,
    cfg: &'a FederationConfig,
    seed: u64,
}

fn run_client(job: ClientJob<'_>, link: &mut dyn ClientLink) -> Result<()> {
    let layout_hash = ModelParams::init(&job.setup.model, 0)?.layout_hash();
    link.send(encode_message(&Message::Register {
        client_id: job.id.clone(),
    }))?;
    let mut last_round = None;
    loop {
        let msg = decode_message(&link.recv()?)?;
        if let Some(r) = msg.round() {
            if last_round.is_some_and(|last| r < last) {
                return Err(Error::Protocol(format!("round went backwards to {r}")));
            }
            last_round = Some(r);
        }
        match msg {
            Message::ModelBroadcast {
                round,
                layout_hash: h,
                params,
                peers,
            } => {
                if h != layout_hash {
                    return Err(Error::Federation("broadcast layout does not match local model".into()));
                }
                let start = ModelParams::unflatten(&job.setup.model, &params)?;
                let personal = (job.cfg.mode == FedMode::Personalized).then_some(Personalization {
                    lambda: job.cfg.lambda,
                    sigma: job.cfg.sigma,
                    peers: &peers,
                });
                let seed = mix(job.seed, &[job.id.as_bytes(), &round.to_le_bytes()]);
                let out = train_local(
                    &start,
                    job.setup.data,
                    &job.indices,
                    &job.cfg.local(),
                    &job.setup.objective,
                    personal.as_ref(),
                    seed,
                )?;
                let update = GradientUpdate::from_params(
                    &job.id,
                    round,
                    &params,
                    &out.params.flatten(),
                    job.cfg.optimizer.learning_rate,
                    job.indices.len() as u64,
                    out.mean_loss,
                    layout_hash,
                )?;
                link.send(encode_message(&Message::GradUpload(update)))?;
            }
            Message::RoundEnd(_) => {}
            Message::Shutdown => return Ok(()),
            other => {
                return Err(Error::Protocol(format!(
                    "client received unexpected {:?}",
                    other.kind()
                )))
            }
        }
    }
}

/// Resolve the coordinator bind address: `FJL_BIND_ADDR` as `host:port` or
/// bare `host`, else loopback; the port comes from the config when absent.
pub fn bind_address(port: u16) -> Result<SocketAddr> {
    let spec = std::env::var(BIND_ADDR_ENV).unwrap_or_else(|_| "127.0.0.1".into());
    if let Ok(addr) = spec.parse::<SocketAddr>() {
        return Ok(addr);
    }
    (spec.as_str(), port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::Config(format!("{BIND_ADDR_ENV}={spec} does not resolve")))
}

struct Hub {
    ids: Vec<String>,
    conn_of: BTreeMap<String, usize>,
    down: Vec<Downlink>,
    up: Receiver<Incoming>,
    hook: Option<FrameHook>,
    timeout: Duration,
}

impl Hub {
    fn observe(&self, dir: Direction, frame: &[u8]) {
        if let Some(h) = &self.hook {
            h(dir, frame);
        }
    }

    fn send_to(&mut self, id: &str, msg: &Message) -> Result<()> {
        let frame = encode_message(msg);
        self.observe(Direction::ToClient, &frame);
        let conn = self.conn_of[id];
        self.down[conn].send(&frame)
    }

    fn recv(&self, deadline: Instant) -> Result<Option<(usize, Message)>> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.up.recv_timeout(wait) {
            Ok(Incoming::Frame(conn, frame)) => {
                self.observe(Direction::ToCoordinator, &frame);
                Ok(Some((conn, decode_message(&frame)?)))
            }
            Ok(Incoming::Closed(conn, why)) => Err(Error::Federation(format!("connection {conn} closed: {why}"))),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Federation("all clients disconnected".into())),
        }
    }

    /// Wait for a REGISTER from every connection.
    fn register(&mut self, n: usize) -> Result<()> {
        let deadline = Instant::now() + self.timeout;
        let mut by_conn = BTreeMap::new();
        while by_conn.len() < n {
            match self.recv(deadline)? {
                Some((conn, Message::Register { client_id })) => {
                    if by_conn.values().any(|v| v == &client_id) {
                        return Err(Error::Protocol(format!("client id {client_id} registered twice")));
                    }
                    by_conn.insert(conn, client_id);
                }
                Some((_, other)) => {
                    return Err(Error::Protocol(format!("expected REGISTER, got {:?}", other.kind())));
                }
                None => return Err(Error::Timeout("waiting for clients to register".into())),
            }
        }
        self.conn_of = by_conn.iter().map(|(c, id)| (id.clone(), *c)).collect();
        self.ids = self.conn_of.keys().cloned().collect();
        Ok(())
    }

    /// Collect one update per client for `round`. On timeout the broadcast is
    /// re-sent once to the clients that have not answered.
    fn collect(&mut self, round: u32, broadcasts: &BTreeMap<String, Message>) -> Result<Vec<GradientUpdate>> {
        let mut got: BTreeMap<String, GradientUpdate> = BTreeMap::new();
        for attempt in 0..2 {
            let deadline = Instant::now() + self.timeout;
            while got.len() < self.ids.len() {
                match self.recv(deadline)? {
                    Some((conn, Message::GradUpload(u))) => {
                        let expected = self.conn_of.get(&u.client_id);
                        if expected != Some(&conn) {
                            return Err(Error::Protocol(format!(
                                "update for {} arrived on the wrong connection",
                                u.client_id
                            )));
                        }
                        if u.round != round {
                            log::warn!("discarding stale update from {} for round {}", u.client_id, u.round);
                            continue;
                        }
                        got.insert(u.client_id.clone(), u);
                    }
                    Some((_, other)) => {
                        return Err(Error::Protocol(format!(
                            "expected GRAD_UPLOAD, got {:?}",
                            other.kind()
                        )))
                    }
                    None => break,
                }
            }
            if got.len() == self.ids.len() {
                break;
            }
            let missing: Vec<String> = self.ids.iter().filter(|id| !got.contains_key(*id)).cloned().collect();
            if attempt == 1 {
                return Err(Error::Timeout(format!(
                    "round {round}: no update from {} after retry",
                    missing.join(", ")
                )));
            }
            log::warn!("round {round}: retrying broadcast to {}", missing.join(", "));
            for id in &missing {
                self.send_to(id, &broadcasts[id])?;
            }
        }
        Ok(got.into_values().collect())
    }
}

/// Held-out subset scored after every round.
fn eval_subset(test: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if cap == 0 || test.len() <= cap {
        return test.to_vec();
    }
    let mut pick = test.to_vec();
    pick.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, &[b"eval"])));
    pick.truncate(cap);
    pick.sort_unstable();
    pick
}

fn coordinate(
    cfg: &FederationConfig,
    setup: &TrainingSetup<'_>,
    seed: u64,
    hub: &mut Hub,
    on_round: &mut Option<Box<dyn FnMut(&RoundReport, &ModelParams) -> Result<()> + '_>>,
) -> Result<FederatedRun> {
    hub.register(cfg.n_clients)?;
    let mut params = ModelParams::init(&setup.model, seed)?;
    let layout_hash = params.layout_hash();
    let lr = cfg.optimizer.learning_rate;
    let eval_idx = eval_subset(&setup.test, cfg.eval_max_samples, seed);
    let started = Instant::now();
    let mut snapshots: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds as u32 {
        let theta = params.flatten();
        let mut broadcasts = BTreeMap::new();
        for id in &hub.ids {
            let peers = if cfg.mode == FedMode::Personalized {
                snapshots
                    .iter()
                    .filter(|(peer, _)| *peer != id)
                    .map(|(_, v)| v.clone())
                    .collect()
            } else {
                Vec::new()
            };
            broadcasts.insert(
                id.clone(),
                Message::ModelBroadcast {
                    round,
                    layout_hash,
                    params: theta.clone(),
                    peers,
                },
            );
        }
        for id in hub.ids.clone() {
            hub.send_to(&id, &broadcasts[&id])?;
        }
        let updates = hub.collect(round, &broadcasts)?;
        let delta = aggregate_updates(&updates, cfg.weighted)?;
        let next = apply_global_update(&theta, &delta, cfg.eta())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "global update" });
        }
        if cfg.mode == FedMode::Personalized {
            for u in &updates {
                let local = theta.iter().zip(&u.delta).map(|(t, d)| t - lr * d).collect();
                snapshots.insert(u.client_id.clone(), local);
            }
        }
        params = ModelParams::unflatten(&setup.model, &next)?;

        let eval = evaluate(&params, setup.data, &eval_idx, &setup.pck, &[], 256)?;
        let report = RoundReport {
            round,
            global_loss: eval.mse,
            global_pck: eval.pck,
            spearman_loss_metric: eval.spearman_loss_metric,
            per_client: updates
                .iter()
                .map(|u| {
                    (
                        u.client_id.clone(),
                        ClientStats {
                            local_loss: u.local_loss,
                            n_samples: u.n_samples,
                        },
                    )
                })
                .collect(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: loss {:.6} pck {:.4} spearman {:.4}",
            report.global_loss,
            report.global_pck,
            report.spearman_loss_metric
        );
        for id in hub.ids.clone() {
            hub.send_to(&id, &Message::RoundEnd(report.clone()))?;
        }
        if let Some(cb) = on_round.as_mut() {
            cb(&report, &params)?;
        }
        reports.push(report);
    }
    Ok(FederatedRun { reports, params })
}

/// Full federated training: partition the training samples, spin up
/// `n_clients` clients on the configured transport and run the rounds.
pub fn run_federated_training(
    cfg: &FederationConfig,
    setup: &TrainingSetup<'_>,
    seed: u64,
    hooks: RunHooks<'_>,
) -> Result<FederatedRun> {
    cfg.validate()?;
    setup.model.validate()?;
    if setup.test.is_empty() {
        return Err(Error::Invalid("empty held-out set".into()));
    }
    let parts = partition_dataset(setup.data, &setup.train, cfg.n_clients, cfg.partition, seed)?;
    if let Some(k) = parts.iter().position(|p| p.is_empty()) {
        return Err(Error::Invalid(format!("partition leaves {} without data", client_id(k))));
    }
    let RunHooks { frames, mut on_round } = hooks;
    let timeout = Duration::from_secs_f64(cfg.timeout_s);
    let (up_tx, up_rx) = mpsc::channel();

    std::thread::scope(|s| -> Result<FederatedRun> {
        let mut down = Vec::with_capacity(cfg.n_clients);
        let jobs: Vec<ClientJob> = parts
            .into_iter()
            .enumerate()
            .map(|(k, indices)| ClientJob {
                id: client_id(k),
                indices,
                setup,
                cfg,
                seed,
            })
            .collect();
        match cfg.transport {
            Transport::InProcess => {
                for (conn, job) in jobs.into_iter().enumerate() {
                    let (tx, rx) = mpsc::channel();
                    down.push(Downlink::Channel(tx));
                    let up = up_tx.clone();
                    s.spawn(move || {
                        let mut link = ChannelLink {
                            conn,
                            up: up.clone(),
                            down: rx,
                        };
                        if let Err(e) = run_client(job, &mut link) {
                            let _ = up.send(Incoming::Closed(conn, e.to_string()));
                        }
                    });
                }
            }
            Transport::Tcp => {
                let listener = TcpListener::bind(bind_address(cfg.port)?)?;
                let mut addr = listener.local_addr()?;
                if addr.ip().is_unspecified() {
                    addr.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
                }
                log::info!("coordinator listening on {}", listener.local_addr()?);
                for job in jobs {
                    let id = job.id.clone();
                    s.spawn(move || {
                        let result = TcpStream::connect(addr)
                            .map_err(Error::from)
                            .and_then(|stream| run_client(job, &mut TcpLink(stream)));
                        if let Err(e) = result {
                            log::error!("{id}: {e}");
                        }
                    });
                }
                listener.set_nonblocking(true)?;
                let deadline = Instant::now() + timeout;
                while down.len() < cfg.n_clients {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            stream.set_nonblocking(false)?;
                            stream.set_nodelay(true)?;
                            let conn = down.len();
                            let mut reader = stream.try_clone()?;
                            let up = up_tx.clone();
                            s.spawn(move || loop {
                                match read_frame(&mut reader) {
                                    Ok(frame) => {
                                        if up.send(Incoming::Frame(conn, frame)).is_err() {
                                            return;
                                        }
                                    }
                                    Err(e) => {
                                        let _ = up.send(Incoming::Closed(conn, e.to_string()));
                                        return;
                                    }
                                }
                            });
                            down.push(Downlink::Tcp(stream));
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            if Instant::now() > deadline {
                                return Err(Error::Timeout("waiting for client connections".into()));
                            }
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        drop(up_tx);
        let mut hub = Hub {
            ids: Vec::new(),
            conn_of: BTreeMap::new(),
            down,
            up: up_rx,
            hook: frames,
            timeout,
        };
        let result = coordinate(cfg, setup, seed, &mut hub, &mut on_round);
        // Release every client whether or not the run succeeded.
        let bye = encode_message(&Message::Shutdown);
        for k in 0..hub.down.len() {
            hub.observe(Direction::ToClient, &bye);
            let _ = hub.down[k].send(&bye);
        }
        for d in hub.down.drain(..) {
            if let Downlink::Tcp(s) = d {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
        result
    })
}

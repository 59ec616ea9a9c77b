//! The STA coordinator: collects one round of uploads, computes O2O and
//! clustering, and hands every organization its cluster and buffers.
//!
//! Round state is a single consistency domain behind one mutex; connection
//! handlers serialize their transitions through it and block on a condvar
//! until the round resolves. Uploads are idempotent per `(org, round)`:
//! re-sending byte-identical content re-acknowledges, conflicting content
//! is rejected without disturbing the round.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{recv, send, NetError, Phase, WireMessage};
use crate::collab::{cluster, ClusterAssignment, ClusteringSpec, SimilarityMatrix};
use crate::ingest::OrgId;
use crate::privacy::{sta_compute, PairBuffer, StaUpload};

#[derive(Debug, Clone)]
pub struct StaConfig {
    /// Organizations that must upload before the round computes.
    pub expected: Vec<OrgId>,
    pub clustering: ClusteringSpec,
    pub round: u64,
    /// How long to wait for the last upload before aborting.
    pub timeout: Duration,
    /// Newline-delimited hex dump of every received frame.
    pub transcript_path: Option<PathBuf>,
}

/// What the coordinator learned from one round.
#[derive(Debug)]
pub struct StaOutcome {
    pub o2o: Option<SimilarityMatrix>,
    pub assignment: Option<ClusterAssignment>,
    /// Raw bytes of every frame the STA received, in arrival order.
    pub received_frames: Vec<Vec<u8>>,
    pub aborted: Option<String>,
}

impl StaOutcome {
    /// All received bytes concatenated, ready for the blindness scanner.
    pub fn received_bytes(&self) -> Vec<u8> {
        self.received_frames.concat()
    }
}

struct RoundResult {
    o2o: SimilarityMatrix,
    assignment: ClusterAssignment,
    buffers: Vec<PairBuffer>,
}

#[derive(Default)]
struct RoundState {
    uploads: BTreeMap<OrgId, (StaUpload, [u8; 32])>,
    received_frames: Vec<Vec<u8>>,
    result: Option<Arc<RoundResult>>,
    aborted: Option<String>,
    failed: Option<String>,
}

impl RoundState {
    fn resolved(&self) -> bool {
        self.result.is_some() || self.aborted.is_some() || self.failed.is_some()
    }
}

struct Shared {
    cfg: StaConfig,
    state: Mutex<RoundState>,
    wake: Condvar,
}

/// Runs one round on an already-bound listener and returns its outcome.
/// The caller binds (so tests can use an ephemeral port and learn the
/// address first); multi-window runs are independent rounds.
pub fn serve_sta(listener: TcpListener, cfg: StaConfig) -> Result<StaOutcome, NetError> {
    let shared = Arc::new(Shared {
        cfg,
        state: Mutex::new(RoundState::default()),
        wake: Condvar::new(),
    });

    listener.set_nonblocking(true)?;
    let acceptor = {
        let shared = Arc::clone(&shared);
        std::thread::spawn(move || accept_loop(listener, shared))
    };

    // Barrier with timeout: either every expected org uploads (a handler
    // computes the result) or the round aborts.
    let deadline = Instant::now() + shared.cfg.timeout;
    {
        let mut state = shared.state.lock().unwrap();
        while !state.resolved() {
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<String> = shared
                    .cfg
                    .expected
                    .iter()
                    .filter(|o| !state.uploads.contains_key(*o))
                    .map(|o| o.to_string())
                    .collect();
                state.aborted =
                    Some(format!("timeout waiting for uploads from: {}", missing.join(", ")));
                shared.wake.notify_all();
                break;
            }
            let (next, _) = shared.wake.wait_timeout(state, deadline - now).unwrap();
            state = next;
        }
    }

    // Give handlers a moment to deliver, then stop accepting.
    std::thread::sleep(Duration::from_millis(50));
    let _ = acceptor.join();

    let mut state = shared.state.lock().unwrap();
    if let Some(err) = state.failed.take() {
        return Err(NetError::Unexpected(err));
    }
    let outcome = StaOutcome {
        o2o: state.result.as_ref().map(|r| r.o2o.clone()),
        assignment: state.result.as_ref().map(|r| r.assignment.clone()),
        received_frames: std::mem::take(&mut state.received_frames),
        aborted: state.aborted.clone(),
    };
    if let Some(path) = &shared.cfg.transcript_path {
        let mut file = std::fs::File::create(path)?;
        for frame in &outcome.received_frames {
            writeln!(file, "{}", hex::encode(frame))?;
        }
    }
    Ok(outcome)
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut handlers = Vec::new();
    loop {
        if shared.state.lock().unwrap().resolved() {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = Arc::clone(&shared);
                handlers.push(std::thread::spawn(move || {
                    if let Err(err) = handle_connection(stream, &shared) {
                        log::debug!("sta connection ended: {err}");
                    }
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("sta accept failed: {e}");
                break;
            }
        }
    }
    for h in handlers {
        let _ = h.join();
    }
}

fn status(phase: Phase, uploads: u64, detail: &str, round: u64) -> WireMessage {
    WireMessage::RoundStatus { round, phase, uploads, detail: detail.to_string() }
}

fn handle_connection(mut stream: TcpStream, shared: &Arc<Shared>) -> Result<(), NetError> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let round = shared.cfg.round;

    // HELLO
    let hello = match recv(&mut stream, None) {
        Ok((msg, frame)) => {
            shared.state.lock().unwrap().received_frames.push(frame);
            msg
        }
        Err(NetError::VersionMismatch { ours, theirs }) => {
            let _ = send(
                &mut stream,
                &WireMessage::Error {
                    round,
                    code: "version".into(),
                    msg: format!("server speaks version {ours}, client sent {theirs}"),
                },
            );
            return Err(NetError::VersionMismatch { ours, theirs });
        }
        Err(e) => return Err(e),
    };
    let org = match hello {
        WireMessage::Hello { round: r, org } if r == round => org,
        WireMessage::Hello { round: r, .. } => {
            send(
                &mut stream,
                &WireMessage::Error {
                    round,
                    code: "round".into(),
                    msg: format!("server is running round {round}, not {r}"),
                },
            )?;
            return Ok(());
        }
        other => {
            send(
                &mut stream,
                &WireMessage::Error {
                    round,
                    code: "protocol".into(),
                    msg: format!("expected HELLO, got {}", other.type_name()),
                },
            )?;
            return Ok(());
        }
    };
    if !shared.cfg.expected.contains(&org) {
        send(
            &mut stream,
            &WireMessage::Error {
                round,
                code: "unknown-org".into(),
                msg: format!("{org} is not registered for this round"),
            },
        )?;
        return Ok(());
    }
    {
        let state = shared.state.lock().unwrap();
        send(&mut stream, &status(Phase::Collecting, state.uploads.len() as u64, "hello", round))?;
    }

    // UPLOAD
    let (upload, frame) = match recv(&mut stream, None)? {
        (WireMessage::Upload { round: r, upload }, frame) if r == round => (upload, frame),
        (other, _) => {
            send(
                &mut stream,
                &WireMessage::Error {
                    round,
                    code: "protocol".into(),
                    msg: format!("expected UPLOAD, got {}", other.type_name()),
                },
            )?;
            return Ok(());
        }
    };
    if upload.org != org {
        send(
            &mut stream,
            &WireMessage::Error {
                round,
                code: "org-mismatch".into(),
                msg: format!("HELLO said {org} but the upload claims {}", upload.org),
            },
        )?;
        return Ok(());
    }
    let digest: [u8; 32] = Sha256::digest(&frame).into();

    let uploads_now = {
        let mut state = shared.state.lock().unwrap();
        state.received_frames.push(frame);
        match state.uploads.get(&org) {
            Some((_, existing)) if *existing == digest => {
                // idempotent retry of the same logical upload
            }
            Some(_) => {
                drop(state);
                send(
                    &mut stream,
                    &WireMessage::Error {
                        round,
                        code: "duplicate".into(),
                        msg: format!("{org} already uploaded different content this round"),
                    },
                )?;
                return Ok(());
            }
            None => {
                state.uploads.insert(org.clone(), (upload, digest));
            }
        }
        let n = state.uploads.len();
        if n == shared.cfg.expected.len() && !state.resolved() {
            let uploads: Vec<StaUpload> =
                state.uploads.values().map(|(u, _)| u.clone()).collect();
            drop(state);
            let computed = sta_compute(&uploads)
                .map_err(NetError::from)
                .and_then(|(o2o, buffers)| {
                    let assignment = cluster(&o2o, &shared.cfg.clustering)?;
                    Ok(RoundResult { o2o, assignment, buffers })
                });
            let mut state = shared.state.lock().unwrap();
            match computed {
                Ok(result) => state.result = Some(Arc::new(result)),
                Err(e) => state.failed = Some(e.to_string()),
            }
            shared.wake.notify_all();
            n
        } else {
            n
        }
    };
    send(&mut stream, &status(Phase::Collecting, uploads_now as u64, "upload accepted", round))?;

    // Wait for the barrier to resolve, then deliver.
    let result = {
        let mut state = shared.state.lock().unwrap();
        while !state.resolved() {
            state = shared.wake.wait(state).unwrap();
        }
        if let Some(reason) = &state.aborted {
            let reason = reason.clone();
            drop(state);
            send(&mut stream, &status(Phase::Aborted, 0, &reason, round))?;
            return Ok(());
        }
        if let Some(err) = &state.failed {
            let err = err.clone();
            drop(state);
            send(
                &mut stream,
                &WireMessage::Error { round, code: "compute".into(), msg: err },
            )?;
            return Ok(());
        }
        Arc::clone(state.result.as_ref().unwrap())
    };

    let peers: Vec<OrgId> = result.assignment.co_members(&org).into_iter().collect();
    let (mode, cluster_id) = match &result.assignment {
        ClusterAssignment::Partition { clusters, .. } => (
            "partition",
            clusters
                .iter()
                .position(|c| c.contains(&org))
                .map(|i| i.to_string())
                .unwrap_or_else(|| "-".into()),
        ),
        ClusterAssignment::Neighborhoods { .. } => ("knn", "-".to_string()),
    };
    send(
        &mut stream,
        &WireMessage::Clusters {
            round,
            peers: peers.clone(),
            outlier: result.assignment.outliers().contains(&org),
            cluster: cluster_id,
            mode: mode.into(),
        },
    )?;
    let mut mine: Vec<PairBuffer> = result
        .buffers
        .iter()
        .filter(|b| b.receiver == org && peers.contains(&b.source))
        .cloned()
        .collect();
    mine.sort_by(|a, b| a.source.cmp(&b.source));
    send(&mut stream, &WireMessage::Buffers { round, buffers: mine })?;
    Ok(())
}

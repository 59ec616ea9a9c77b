//! The organization client: encrypt, upload, await buffers, decrypt.
//!
//! The shared key reaches an org from a file or from a peer over a direct
//! org-to-org `KEY_OFFER` connection; it never touches the STA. Uploads
//! are retried through transient disconnects -- the frame bytes are
//! prepared once, so every retry carries a byte-identical upload and the
//! coordinator can deduplicate on content.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use super::{recv, send, write_frame, NetError, Phase, WireMessage};
use crate::collab::SharedPool;
use crate::ingest::{CountMode, OrgDataset, OrgId};
use crate::privacy::{decrypt_shared, encrypt_dataset, PairBuffer, RejectStats, SharedKey};

/// Where an org's copy of the shared key comes from.
#[derive(Debug, Clone)]
pub enum KeySource {
    /// Hex-encoded 16-byte key in a file.
    File(PathBuf),
    /// Fetch a `KEY_OFFER` from another organization.
    Peer(String),
    /// Already in hand (tests, embedding).
    Inline(SharedKey),
}

impl KeySource {
    pub fn load(&self, round: u64, timeout: Duration) -> Result<SharedKey, NetError> {
        match self {
            KeySource::File(path) => {
                let text = std::fs::read_to_string(path)?;
                Ok(SharedKey::from_hex(&text)?)
            }
            KeySource::Peer(addr) => fetch_key(addr, round, timeout),
            KeySource::Inline(key) => Ok(key.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrgConfig {
    pub sta: String,
    pub org: OrgId,
    pub round: u64,
    pub key: KeySource,
    pub mode: CountMode,
    /// Handshake read timeout.
    pub io_timeout: Duration,
    /// How long to wait for the round barrier to resolve.
    pub result_timeout: Duration,
    /// Reconnect attempts after transient failures.
    pub retries: u32,
}

impl OrgConfig {
    pub fn new(sta: impl Into<String>, org: OrgId, key: KeySource) -> Self {
        OrgConfig {
            sta: sta.into(),
            org,
            round: 0,
            key,
            mode: CountMode::Presence,
            io_timeout: Duration::from_secs(10),
            result_timeout: Duration::from_secs(120),
            retries: 3,
        }
    }
}

/// What one round yields for an organization.
#[derive(Debug)]
pub struct OrgOutcome {
    pub pool: SharedPool,
    pub peers: Vec<OrgId>,
    pub outlier: bool,
    pub cluster: String,
    pub rejects: RejectStats,
}

fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, NetError> {
    let mut last = None;
    for resolved in addr
        .to_socket_addrs()
        .map_err(|_| NetError::BadAddress(addr.to_string()))?
    {
        match TcpStream::connect_timeout(&resolved, timeout) {
            Ok(stream) => return Ok(stream),
            Err(e) => last = Some(e),
        }
    }
    Err(last.map(NetError::Io).unwrap_or_else(|| NetError::BadAddress(addr.to_string())))
}

fn retryable(err: &NetError) -> bool {
    matches!(err, NetError::Io(_) | NetError::ConnectionClosed)
}

/// Runs one full protocol round for this organization.
pub fn run_org(cfg: &OrgConfig, dataset: &OrgDataset) -> Result<OrgOutcome, NetError> {
    let key = cfg.key.load(cfg.round, cfg.io_timeout)?;
    let encrypted = encrypt_dataset(dataset, &key, cfg.mode)?;
    // One encoding for every attempt: retries stay byte-identical.
    let upload_frame =
        WireMessage::Upload { round: cfg.round, upload: encrypted.upload() }.encode();

    let mut attempt = 0;
    loop {
        match attempt_round(cfg, &upload_frame, &encrypted) {
            Ok(outcome) => return Ok(outcome),
            Err(err) if retryable(&err) && attempt < cfg.retries => {
                attempt += 1;
                log::warn!("{}: attempt {attempt} failed ({err}), retrying", cfg.org);
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            Err(err) if retryable(&err) => {
                return Err(NetError::RetriesExhausted(err.to_string()))
            }
            Err(err) => return Err(err),
        }
    }
}

fn attempt_round(
    cfg: &OrgConfig,
    upload_frame: &[u8],
    encrypted: &crate::privacy::EncryptedDataset,
) -> Result<OrgOutcome, NetError> {
    let mut stream = connect(&cfg.sta, cfg.io_timeout)?;
    stream.set_read_timeout(Some(cfg.io_timeout))?;

    send(&mut stream, &WireMessage::Hello { round: cfg.round, org: cfg.org.clone() })?;
    expect_status(recv(&mut stream, Some(&cfg.org))?.0)?;

    write_frame(&mut stream, upload_frame)?;
    expect_status(recv(&mut stream, Some(&cfg.org))?.0)?;

    // Upload acknowledged; now wait out the barrier.
    stream.set_read_timeout(Some(cfg.result_timeout))?;
    let (peers, outlier, cluster) = match recv(&mut stream, Some(&cfg.org))?.0 {
        WireMessage::Clusters { peers, outlier, cluster, .. } => (peers, outlier, cluster),
        WireMessage::RoundStatus { phase: Phase::Aborted, detail, .. } => {
            return Err(NetError::Aborted(detail))
        }
        WireMessage::Error { code, msg, .. } => return Err(NetError::Remote { code, msg }),
        other => return Err(NetError::Unexpected(other.type_name().into())),
    };
    let buffers: Vec<PairBuffer> = match recv(&mut stream, Some(&cfg.org))?.0 {
        WireMessage::Buffers { buffers, .. } => buffers,
        other => return Err(NetError::Unexpected(other.type_name().into())),
    };

    let refs: Vec<&PairBuffer> = buffers.iter().collect();
    let (pool, rejects) = decrypt_shared(&cfg.org, &refs, encrypted.keys());
    if rejects.total() > 0 {
        log::warn!("{}: {} buffer entries rejected", cfg.org, rejects.total());
    }
    Ok(OrgOutcome { pool, peers, outlier, cluster, rejects })
}

fn expect_status(msg: WireMessage) -> Result<(), NetError> {
    match msg {
        WireMessage::RoundStatus { phase: Phase::Aborted, detail, .. } => {
            Err(NetError::Aborted(detail))
        }
        WireMessage::RoundStatus { .. } => Ok(()),
        WireMessage::Error { code, msg, .. } => Err(NetError::Remote { code, msg }),
        other => Err(NetError::Unexpected(other.type_name().into())),
    }
}

// ---------------------------------------------------------------------------
// Org-to-org key distribution
// ---------------------------------------------------------------------------

/// Serves the shared key to `count` connecting peers, then returns. Runs
/// on a direct org-to-org listener; the STA is never involved.
pub fn serve_key_offers(
    listener: TcpListener,
    key: &SharedKey,
    count: usize,
    round: u64,
) -> Result<(), NetError> {
    for _ in 0..count {
        let (mut stream, _) = listener.accept()?;
        send(&mut stream, &WireMessage::KeyOffer { round, key: key.clone() })?;
    }
    Ok(())
}

/// Fetches the shared key from a peer running [`serve_key_offers`].
pub fn fetch_key(addr: &str, round: u64, timeout: Duration) -> Result<SharedKey, NetError> {
    let mut stream = connect(addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    match recv(&mut stream, None)?.0 {
        WireMessage::KeyOffer { round: r, key } if r == round => Ok(key),
        WireMessage::KeyOffer { round: r, .. } => {
            Err(NetError::Unexpected(format!("key offer for round {r}")))
        }
        other => Err(NetError::Unexpected(other.type_name().into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::{ClusterAlgo, ClusteringSpec};
    use crate::ingest::Prefix24;
    use crate::net::{serve_sta, StaConfig, StaOutcome};
    use crate::privacy::{scan_transcript, simulate_round};
    use std::collections::BTreeMap;

    fn spec() -> ClusteringSpec {
        ClusteringSpec { algo: ClusterAlgo::Agglomerative, k: 1, threshold_pct: 100.0, seed: 7 }
    }

    /// Orgs share a high-entropy prefix universe (so the 5-byte blindness
    /// scan cannot collide with framing bytes) with per-org gaps that
    /// create a non-trivial overlap structure.
    fn datasets(n: usize) -> BTreeMap<OrgId, OrgDataset> {
        let mut out = BTreeMap::new();
        for i in 0..n {
            let org = OrgId::new(&format!("org{i}"));
            let mut d = OrgDataset::new(org.clone());
            for v in 0..20u32 {
                if (v as usize + i) % 3 != 0 {
                    let prefix = (v + 1).wrapping_mul(2654435761) & 0xff_ffff;
                    d.record(Prefix24::from_value(prefix).unwrap(), (v % 5) as u16, 1 + v as u64 % 3);
                }
            }
            out.insert(org, d);
        }
        out
    }

    fn spawn_sta(expected: Vec<OrgId>, timeout: Duration) -> (String, std::thread::JoinHandle<Result<StaOutcome, NetError>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let cfg = StaConfig {
            expected,
            clustering: spec(),
            round: 1,
            timeout,
            transcript_path: None,
        };
        let handle = std::thread::spawn(move || serve_sta(listener, cfg));
        (addr, handle)
    }

    fn org_cfg(addr: &str, org: &OrgId, key: &SharedKey) -> OrgConfig {
        let mut cfg = OrgConfig::new(addr, org.clone(), KeySource::Inline(key.clone()));
        cfg.round = 1;
        cfg.mode = CountMode::Raw;
        cfg.io_timeout = Duration::from_secs(5);
        cfg.result_timeout = Duration::from_secs(20);
        cfg
    }

    #[test]
    fn full_round_matches_the_in_process_simulation() {
        let data = datasets(3);
        let orgs: Vec<OrgId> = data.keys().cloned().collect();
        let (addr, sta) = spawn_sta(orgs.clone(), Duration::from_secs(20));
        let key = SharedKey::generate();

        let clients: Vec<_> = orgs
            .iter()
            .map(|org| {
                let cfg = org_cfg(&addr, org, &key);
                let ds = data[org].clone();
                std::thread::spawn(move || run_org(&cfg, &ds))
            })
            .collect();
        let outcomes: BTreeMap<OrgId, OrgOutcome> = clients
            .into_iter()
            .zip(&orgs)
            .map(|(h, org)| (org.clone(), h.join().unwrap().unwrap()))
            .collect();
        let sta = sta.join().unwrap().unwrap();
        assert!(sta.aborted.is_none());

        // Each org got exactly one CLUSTERS and one BUFFERS message and the
        // results equal the in-process simulation byte for byte.
        let sim = simulate_round(&data, &spec(), CountMode::Raw).unwrap();
        assert_eq!(sta.o2o.as_ref().unwrap().to_csv(), sim.o2o.to_csv());
        assert_eq!(
            sta.assignment.as_ref().unwrap().to_csv(&orgs),
            sim.assignment.to_csv(&orgs)
        );
        for org in &orgs {
            assert_eq!(outcomes[org].pool.to_csv(), sim.pools[org].to_csv());
            assert_eq!(outcomes[org].rejects.total(), 0);
        }

        // STA blindness over the real wire transcript.
        let report = scan_transcript(&sta.received_bytes(), &key, data.values());
        assert!(report.clean(), "{report:?}");
    }

    #[test]
    fn missing_upload_aborts_after_the_timeout() {
        let data = datasets(3);
        let orgs: Vec<OrgId> = data.keys().cloned().collect();
        let (addr, sta) = spawn_sta(orgs.clone(), Duration::from_millis(600));
        let key = SharedKey::generate();

        // Only two of the three expected orgs show up.
        let clients: Vec<_> = orgs[..2]
            .iter()
            .map(|org| {
                let cfg = org_cfg(&addr, org, &key);
                let ds = data[org].clone();
                std::thread::spawn(move || run_org(&cfg, &ds))
            })
            .collect();
        for h in clients {
            match h.join().unwrap() {
                Err(NetError::Aborted(reason)) => assert!(reason.contains("timeout")),
                other => panic!("expected an abort, got {other:?}"),
            }
        }
        let sta = sta.join().unwrap().unwrap();
        assert!(sta.aborted.is_some());
        assert!(sta.o2o.is_none());
    }

    #[test]
    fn conflicting_duplicate_upload_is_rejected_without_breaking_the_round() {
        let data = datasets(2);
        let orgs: Vec<OrgId> = data.keys().cloned().collect();
        let (addr, sta) = spawn_sta(orgs.clone(), Duration::from_secs(20));
        let key = SharedKey::generate();

        // First org uploads and waits for results on a worker thread.
        let honest = {
            let cfg = org_cfg(&addr, &orgs[0], &key);
            let ds = data[&orgs[0]].clone();
            std::thread::spawn(move || run_org(&cfg, &ds))
        };
        std::thread::sleep(Duration::from_millis(300));

        // A conflicting upload for the same org id must be turned away.
        let rogue = {
            let mut cfg = org_cfg(&addr, &orgs[0], &key);
            cfg.retries = 0;
            let mut other = OrgDataset::new(orgs[0].clone());
            other.record(Prefix24::from_value(999).unwrap(), 0, 1);
            run_org(&cfg, &other)
        };
        match rogue {
            Err(NetError::Remote { code, .. }) => assert_eq!(code, "duplicate"),
            other => panic!("expected a duplicate rejection, got {other:?}"),
        }

        // The round still completes once the second org arrives.
        let second = {
            let cfg = org_cfg(&addr, &orgs[1], &key);
            let ds = data[&orgs[1]].clone();
            std::thread::spawn(move || run_org(&cfg, &ds))
        };
        assert!(second.join().unwrap().is_ok());
        assert!(honest.join().unwrap().is_ok());
        assert!(sta.join().unwrap().unwrap().aborted.is_none());
    }

    #[test]
    fn interrupted_upload_retries_to_exactly_one_registration() {
        let data = datasets(2);
        let orgs: Vec<OrgId> = data.keys().cloned().collect();
        let (addr, sta) = spawn_sta(orgs.clone(), Duration::from_secs(20));
        let key = SharedKey::generate();

        // A client that dies right after sending its upload, before it can
        // read the acknowledgment.
        let encrypted =
            crate::privacy::encrypt_dataset(&data[&orgs[0]], &key, CountMode::Raw).unwrap();
        let upload_frame =
            WireMessage::Upload { round: 1, upload: encrypted.upload() }.encode();
        {
            let mut stream = connect(&addr, Duration::from_secs(5)).unwrap();
            send(&mut stream, &WireMessage::Hello { round: 1, org: orgs[0].clone() }).unwrap();
            let _ = recv(&mut stream, None).unwrap();
            write_frame(&mut stream, &upload_frame).unwrap();
            // dropped here without reading the ack
        }

        // The retry re-sends the byte-identical frame, exactly as run_org
        // does across its reconnects, and must be acknowledged rather than
        // rejected as a duplicate.
        let mut retry = connect(&addr, Duration::from_secs(5)).unwrap();
        retry.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        send(&mut retry, &WireMessage::Hello { round: 1, org: orgs[0].clone() }).unwrap();
        let _ = recv(&mut retry, None).unwrap();
        write_frame(&mut retry, &upload_frame).unwrap();
        match recv(&mut retry, None).unwrap().0 {
            WireMessage::RoundStatus { uploads, .. } => assert_eq!(uploads, 1),
            other => panic!("expected an ack, got {other:?}"),
        }

        // The second org completes the round; the retried connection still
        // receives its results.
        let second = {
            let cfg = org_cfg(&addr, &orgs[1], &key);
            let ds = data[&orgs[1]].clone();
            std::thread::spawn(move || run_org(&cfg, &ds))
        };
        assert!(second.join().unwrap().is_ok());
        assert!(matches!(
            recv(&mut retry, Some(&orgs[0])).unwrap().0,
            WireMessage::Clusters { .. }
        ));
        assert!(matches!(
            recv(&mut retry, Some(&orgs[0])).unwrap().0,
            WireMessage::Buffers { .. }
        ));
        assert!(sta.join().unwrap().unwrap().aborted.is_none());
    }

    #[test]
    fn key_offers_flow_org_to_org() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let key = SharedKey::generate();
        let server = {
            let key = key.clone();
            std::thread::spawn(move || serve_key_offers(listener, &key, 2, 4))
        };
        let a = fetch_key(&addr, 4, Duration::from_secs(5)).unwrap();
        let b = fetch_key(&addr, 4, Duration::from_secs(5)).unwrap();
        server.join().unwrap().unwrap();
        assert_eq!(a, key);
        assert_eq!(b, key);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut data = datasets(2);
        data.insert(OrgId::new("org0"), OrgDataset::new(OrgId::new("org0")));
        let orgs: Vec<OrgId> = data.keys().cloned().collect();
        let (addr, sta) = spawn_sta(orgs.clone(), Duration::from_secs(20));
        let key = SharedKey::generate();
        let clients: Vec<_> = orgs
            .iter()
            .map(|org| {
                let cfg = org_cfg(&addr, org, &key);
                let ds = data[org].clone();
                std::thread::spawn(move || run_org(&cfg, &ds))
            })
            .collect();
        for h in clients {
            let outcome = h.join().unwrap().unwrap();
            assert!(outcome.pool.is_empty() || !outcome.peers.is_empty());
        }
        assert!(sta.join().unwrap().unwrap().aborted.is_none());
    }
}

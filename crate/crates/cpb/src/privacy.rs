//! The server-aided PRP protocol.
//!
//! All organizations share a 128-bit key `kappa` that the STA never sees.
//! Each org encodes every `(prefix, day)` element of its multiset, with a
//! counter per repeated unit, and uploads:
//!
//! * `S` -- the AES-128 permutation of each `(element, counter)` block.
//!   Equal elements at different orgs map to equal 16-byte values, so the
//!   STA can count matches without learning anything about the plaintext;
//!   the counter keeps multiplicities hidden inside one org's set.
//! * `E` -- index-aligned AES-256-GCM ciphertexts of the element, each
//!   under a key derived by hashing `(element, counter)`. Only someone who
//!   already holds the same element can derive the key and decrypt.
//!
//! The STA intersects the `S` sets pairwise to build the O2O similarity
//! matrix, clusters it, and forwards each org the matched values plus the
//! peer's aligned ciphertexts. Decrypting those yields exactly the
//! element-level intersection pools -- verified against the plaintext
//! oracle in `collab`.
//!
//! Byte-exact encodings (fixed so independent implementations interoperate):
//!
//! ```text
//! element   = prefix (3 bytes BE) || day (2 bytes BE)
//! PRP input = element || counter (4 bytes BE) || zero padding to 16
//! S entry   = AES-128-Enc(kappa, PRP input)
//! elem key  = SHA-256(element || counter)            (32 bytes)
//! E entry   = nonce (12 bytes) || GCM body || tag (16 bytes)
//! ```

use std::collections::{BTreeMap, HashMap};

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes_gcm::aead::Aead;
use aes_gcm::{Aes256Gcm, Nonce};
use rand::rngs::OsRng;
use rand::seq::SliceRandom;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collab::{
    cluster, ClusterAssignment, ClusteringSpec, SharedPool, SimilarityMatrix,
};
use crate::ingest::{CountMode, DayIndex, OrgDataset, OrgId, Prefix24};

pub const ELEMENT_LEN: usize = 5;
pub const PRP_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Every E entry is nonce || 5-byte body || tag.
pub const CIPHERTEXT_LEN: usize = NONCE_LEN + ELEMENT_LEN + TAG_LEN;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("setup needs at least 2 organizations, got {0}")]
    TooFewOrgs(usize),
    #[error("element ({prefix}, day {day}) has multiplicity {count} > 2^32-1")]
    CountOverflow { prefix: Prefix24, day: DayIndex, count: u64 },
    #[error("duplicate upload from {0}")]
    DuplicateUpload(OrgId),
    #[error("upload from {0} has misaligned S/E sequences")]
    MisalignedUpload(OrgId),
    #[error("upload from {0} repeats an S entry")]
    RepeatedSEntry(OrgId),
    #[error("bad key material: {0}")]
    BadKey(String),
}

// ---------------------------------------------------------------------------
// Keys
// ---------------------------------------------------------------------------

/// The 128-bit key shared by all organizations and withheld from the STA.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedKey([u8; 16]);

impl SharedKey {
    pub fn generate() -> Self {
        let mut bytes = [0u8; 16];
        OsRng.fill_bytes(&mut bytes);
        SharedKey(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        SharedKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, PrivacyError> {
        let bytes = hex::decode(s.trim()).map_err(|e| PrivacyError::BadKey(e.to_string()))?;
        let bytes: [u8; 16] = bytes
            .try_into()
            .map_err(|_| PrivacyError::BadKey("expected 16 key bytes".into()))?;
        Ok(SharedKey(bytes))
    }
}

impl std::fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedKey(..)")
    }
}

/// One org draws `kappa` and every org ends up with an identical copy; the
/// key travels org-to-org and never through the STA.
pub fn setup(orgs: &[OrgId]) -> Result<BTreeMap<OrgId, SharedKey>, PrivacyError> {
    if orgs.len() < 2 {
        return Err(PrivacyError::TooFewOrgs(orgs.len()));
    }
    let kappa = SharedKey::generate();
    Ok(orgs.iter().map(|o| (o.clone(), kappa.clone())).collect())
}

// ---------------------------------------------------------------------------
// Encodings and primitives
// ---------------------------------------------------------------------------

pub fn encode_element(prefix: Prefix24, day: DayIndex) -> [u8; ELEMENT_LEN] {
    let p = prefix.octets();
    let d = day.to_be_bytes();
    [p[0], p[1], p[2], d[0], d[1]]
}

pub fn decode_element(bytes: &[u8]) -> Option<(Prefix24, DayIndex)> {
    if bytes.len() != ELEMENT_LEN {
        return None;
    }
    let prefix = Prefix24::from_value(
        u32::from(bytes[0]) << 16 | u32::from(bytes[1]) << 8 | u32::from(bytes[2]),
    )?;
    Some((prefix, DayIndex::from_be_bytes([bytes[3], bytes[4]])))
}

fn prp_input(element: &[u8; ELEMENT_LEN], counter: u32) -> [u8; PRP_LEN] {
    let mut block = [0u8; PRP_LEN];
    block[..ELEMENT_LEN].copy_from_slice(element);
    block[ELEMENT_LEN..ELEMENT_LEN + 4].copy_from_slice(&counter.to_be_bytes());
    block
}

/// The keyed pseudo-random permutation: one AES-128 block.
pub fn prp_eval(key: &SharedKey, prefix: Prefix24, day: DayIndex, counter: u32) -> [u8; PRP_LEN] {
    let cipher = aes::Aes128::new(GenericArray::from_slice(key.as_bytes()));
    let mut block = GenericArray::from(prp_input(&encode_element(prefix, day), counter));
    cipher.encrypt_block(&mut block);
    block.into()
}

/// Per-unit decryption key: the full SHA-256 of `element || counter`.
/// Anyone holding the same element unit can derive it; the STA cannot.
pub fn element_key(prefix: Prefix24, day: DayIndex, counter: u32) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(encode_element(prefix, day));
    hasher.update(counter.to_be_bytes());
    hasher.finalize().into()
}

fn seal_with_nonce(key: &[u8; 32], nonce: &[u8; NONCE_LEN], element: &[u8; ELEMENT_LEN]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(GenericArray::from_slice(key));
    let body = cipher
        .encrypt(Nonce::from_slice(nonce), element.as_slice())
        .expect("GCM encryption cannot fail on a 5-byte message");
    let mut out = Vec::with_capacity(CIPHERTEXT_LEN);
    out.extend_from_slice(nonce);
    out.extend_from_slice(&body);
    out
}

fn seal(key: &[u8; 32], element: &[u8; ELEMENT_LEN]) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    seal_with_nonce(key, &nonce, element)
}

/// Authenticated decryption of an E entry. `None` on any tampering.
pub fn open(key: &[u8; 32], ciphertext: &[u8]) -> Option<Vec<u8>> {
    if ciphertext.len() < NONCE_LEN + TAG_LEN {
        return None;
    }
    let (nonce, body) = ciphertext.split_at(NONCE_LEN);
    let cipher = Aes256Gcm::new(GenericArray::from_slice(key));
    cipher.decrypt(Nonce::from_slice(nonce), body).ok()
}

// ---------------------------------------------------------------------------
// Per-org encryption (Algorithm: Encryption)
// ---------------------------------------------------------------------------

/// An organization's protocol state: the uploadable `(S, E)` sequences and
/// the locally kept key map `K` from PRP value to element key.
#[derive(Debug, Clone)]
pub struct EncryptedDataset {
    org: OrgId,
    s: Vec<[u8; PRP_LEN]>,
    e: Vec<Vec<u8>>,
    keys: BTreeMap<[u8; PRP_LEN], [u8; 32]>,
}

impl EncryptedDataset {
    pub fn org(&self) -> &OrgId {
        &self.org
    }

    pub fn s(&self) -> &[[u8; PRP_LEN]] {
        &self.s
    }

    pub fn e(&self) -> &[Vec<u8>] {
        &self.e
    }

    /// The key map stays local; it never ships to the STA.
    pub fn keys(&self) -> &BTreeMap<[u8; PRP_LEN], [u8; 32]> {
        &self.keys
    }

    /// What actually goes on the wire.
    pub fn upload(&self) -> StaUpload {
        StaUpload { org: self.org.clone(), s: self.s.clone(), e: self.e.clone() }
    }
}

/// Encrypts a dataset under the shared key: one `(S, E)` pair per element
/// unit, in a freshly shuffled order so the upload leaks nothing about
/// insertion order.
pub fn encrypt_dataset(
    dataset: &OrgDataset,
    key: &SharedKey,
    mode: CountMode,
) -> Result<EncryptedDataset, PrivacyError> {
    let cipher = aes::Aes128::new(GenericArray::from_slice(key.as_bytes()));
    let mut s = Vec::new();
    let mut e = Vec::new();
    let mut keys = BTreeMap::new();

    for ((prefix, day), count) in dataset.effective(mode) {
        if count > u64::from(u32::MAX) {
            return Err(PrivacyError::CountOverflow { prefix, day, count });
        }
        let element = encode_element(prefix, day);
        for counter in 1..=count as u32 {
            let mut block = GenericArray::from(prp_input(&element, counter));
            cipher.encrypt_block(&mut block);
            let prp: [u8; PRP_LEN] = block.into();
            let k = element_key(prefix, day, counter);
            s.push(prp);
            e.push(seal(&k, &element));
            keys.insert(prp, k);
        }
    }

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.shuffle(&mut OsRng);
    let s = order.iter().map(|&i| s[i]).collect();
    let e = order.iter().map(|&i| std::mem::take(&mut e[i])).collect();

    Ok(EncryptedDataset { org: dataset.org().clone(), s, e, keys })
}

// ---------------------------------------------------------------------------
// STA-side computation (Algorithm: O2O Computation)
// ---------------------------------------------------------------------------

/// The STA-visible part of an org's protocol state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaUpload {
    pub org: OrgId,
    pub s: Vec<[u8; PRP_LEN]>,
    pub e: Vec<Vec<u8>>,
}

/// Matched values between a pair, with the source's aligned ciphertexts.
/// Receivers key their `K` map by PRP value, which is why the value itself
/// travels alongside the ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBuffer {
    pub receiver: OrgId,
    pub source: OrgId,
    pub entries: Vec<([u8; PRP_LEN], Vec<u8>)>,
}

/// Intersects all uploads pairwise: the O2O similarity matrix (diagonal =
/// own set size) plus a buffer per ordered pair with at least one match.
/// The STA sees only PRP values, ciphertexts, sizes, and match structure.
pub fn sta_compute(
    uploads: &[StaUpload],
) -> Result<(SimilarityMatrix, Vec<PairBuffer>), PrivacyError> {
    let mut sorted: Vec<&StaUpload> = uploads.iter().collect();
    sorted.sort_by(|a, b| a.org.cmp(&b.org));
    for pair in sorted.windows(2) {
        if pair[0].org == pair[1].org {
            return Err(PrivacyError::DuplicateUpload(pair[0].org.clone()));
        }
    }

    let mut index: Vec<HashMap<&[u8; PRP_LEN], usize>> = Vec::with_capacity(sorted.len());
    for up in &sorted {
        if up.s.len() != up.e.len() {
            return Err(PrivacyError::MisalignedUpload(up.org.clone()));
        }
        let map: HashMap<&[u8; PRP_LEN], usize> =
            up.s.iter().enumerate().map(|(i, v)| (v, i)).collect();
        if map.len() != up.s.len() {
            return Err(PrivacyError::RepeatedSEntry(up.org.clone()));
        }
        index.push(map);
    }

    let mut matrix = SimilarityMatrix::zeroed(sorted.iter().map(|u| u.org.clone()).collect());
    let mut buffers = Vec::new();
    for i in 0..sorted.len() {
        matrix.set_sym(i, i, sorted[i].s.len() as u64);
        for j in i + 1..sorted.len() {
            // scan the smaller set against the larger one's hash index
            let (small, large) = if sorted[i].s.len() <= sorted[j].s.len() {
                (i, j)
            } else {
                (j, i)
            };
            let mut matches: Vec<([u8; PRP_LEN], usize, usize)> = Vec::new();
            for (small_idx, value) in sorted[small].s.iter().enumerate() {
                if let Some(&large_idx) = index[large].get(value) {
                    matches.push((*value, small_idx, large_idx));
                }
            }
            matrix.set_sym(i, j, matches.len() as u64);
            if matches.is_empty() {
                continue;
            }
            matches.sort_by(|a, b| a.0.cmp(&b.0));
            let (idx_of_i, idx_of_j): (Vec<usize>, Vec<usize>) = if small == i {
                matches.iter().map(|&(_, si, li)| (si, li)).unzip()
            } else {
                matches.iter().map(|&(_, si, li)| (li, si)).unzip()
            };
            buffers.push(PairBuffer {
                receiver: sorted[i].org.clone(),
                source: sorted[j].org.clone(),
                entries: matches
                    .iter()
                    .zip(&idx_of_j)
                    .map(|(&(v, _, _), &jj)| (v, sorted[j].e[jj].clone()))
                    .collect(),
            });
            buffers.push(PairBuffer {
                receiver: sorted[j].org.clone(),
                source: sorted[i].org.clone(),
                entries: matches
                    .iter()
                    .zip(&idx_of_i)
                    .map(|(&(v, _, _), &ii)| (v, sorted[i].e[ii].clone()))
                    .collect(),
            });
        }
    }
    Ok((matrix, buffers))
}

// ---------------------------------------------------------------------------
// Receiver-side decryption (Algorithm: Log Sharing)
// ---------------------------------------------------------------------------

/// Entries dropped while decrypting buffers. Rejections signal corruption
/// or a protocol violation; processing always continues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RejectStats {
    pub auth_failures: u64,
    pub unknown_values: u64,
    pub malformed: u64,
}

impl RejectStats {
    pub fn total(&self) -> u64 {
        self.auth_failures + self.unknown_values + self.malformed
    }
}

/// Decrypts the buffers destined for one org into its shared pool.
pub fn decrypt_shared(
    org: &OrgId,
    buffers: &[&PairBuffer],
    keys: &BTreeMap<[u8; PRP_LEN], [u8; 32]>,
) -> (SharedPool, RejectStats) {
    let mut pool = SharedPool::new(org.clone());
    let mut stats = RejectStats::default();
    for buffer in buffers {
        debug_assert_eq!(&buffer.receiver, org);
        for (value, ciphertext) in &buffer.entries {
            let Some(key) = keys.get(value) else {
                stats.unknown_values += 1;
                log::warn!("{org}: buffer value from {} not in local key map", buffer.source);
                continue;
            };
            let Some(plain) = open(key, ciphertext) else {
                stats.auth_failures += 1;
                log::warn!("{org}: ciphertext from {} failed authentication", buffer.source);
                continue;
            };
            let Some((prefix, day)) = decode_element(&plain) else {
                stats.malformed += 1;
                log::warn!("{org}: ciphertext from {} decoded to garbage", buffer.source);
                continue;
            };
            pool.insert(prefix, day, buffer.source.clone(), 1);
        }
    }
    (pool, stats)
}

// ---------------------------------------------------------------------------
// Whole-round simulation
// ---------------------------------------------------------------------------

/// Outcome of one in-process protocol round.
#[derive(Debug)]
pub struct SimRound {
    pub o2o: SimilarityMatrix,
    pub assignment: ClusterAssignment,
    pub pools: BTreeMap<OrgId, SharedPool>,
    pub rejects: RejectStats,
    /// Everything the STA received, concatenated; feed to
    /// [`scan_transcript`].
    pub sta_received: Vec<u8>,
    pub kappa: SharedKey,
}

/// Runs setup, encryption, STA computation, clustering, and buffer
/// decryption entirely in process. The plaintext-equivalent outputs (O2O,
/// assignment, pools) are deterministic given the clustering seed; key and
/// nonce bytes are not.
pub fn simulate_round(
    datasets: &BTreeMap<OrgId, OrgDataset>,
    spec: &ClusteringSpec,
    mode: CountMode,
) -> Result<SimRound, crate::CpbError> {
    let orgs: Vec<OrgId> = datasets.keys().cloned().collect();
    let keys = setup(&orgs)?;
    let kappa = keys[&orgs[0]].clone();

    let mut encrypted = BTreeMap::new();
    let mut uploads = Vec::new();
    let mut sta_received = Vec::new();
    for (org, dataset) in datasets {
        let enc = encrypt_dataset(dataset, &keys[org], mode)?;
        let up = enc.upload();
        sta_received.extend_from_slice(org.as_str().as_bytes());
        for v in &up.s {
            sta_received.extend_from_slice(v);
        }
        for c in &up.e {
            sta_received.extend_from_slice(c);
        }
        uploads.push(up);
        encrypted.insert(org.clone(), enc);
    }

    let (o2o, buffers) = sta_compute(&uploads)?;
    let assignment = cluster(&o2o, spec)?;

    let mut pools = BTreeMap::new();
    let mut rejects = RejectStats::default();
    for org in &orgs {
        let peers = assignment.co_members(org);
        let mine: Vec<&PairBuffer> = buffers
            .iter()
            .filter(|b| &b.receiver == org && peers.contains(&b.source))
            .collect();
        let (pool, r) = decrypt_shared(org, &mine, encrypted[org].keys());
        rejects.auth_failures += r.auth_failures;
        rejects.unknown_values += r.unknown_values;
        rejects.malformed += r.malformed;
        pools.insert(org.clone(), pool);
    }

    Ok(SimRound { o2o, assignment, pools, rejects, sta_received, kappa })
}

// ---------------------------------------------------------------------------
// Transcript scanning
// ---------------------------------------------------------------------------

/// What a blindness scan found in STA-visible bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub kappa_hits: usize,
    pub element_hits: usize,
    pub scanned_bytes: usize,
}

impl ScanReport {
    pub fn clean(&self) -> bool {
        self.kappa_hits == 0 && self.element_hits == 0
    }
}

fn count_occurrences(haystack: &[u8], needle: &[u8]) -> usize {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Scans STA-received bytes for the shared key and for any plaintext
/// element encoding of the given datasets.
pub fn scan_transcript<'a>(
    transcript: &[u8],
    kappa: &SharedKey,
    datasets: impl IntoIterator<Item = &'a OrgDataset>,
) -> ScanReport {
    let mut report = ScanReport { scanned_bytes: transcript.len(), ..Default::default() };
    report.kappa_hits = count_occurrences(transcript, kappa.as_bytes());
    let mut seen = std::collections::BTreeSet::new();
    for dataset in datasets {
        for (&(prefix, day), _) in dataset.elements() {
            if seen.insert((prefix, day)) {
                report.element_hits +=
                    count_occurrences(transcript, &encode_element(prefix, day));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::{element_intersection_pools, o2o_plain, ClusterAlgo};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn p(v: u32) -> Prefix24 {
        Prefix24::from_value(v).unwrap()
    }

    fn fixed_key() -> SharedKey {
        SharedKey::from_bytes(std::array::from_fn(|i| i as u8))
    }

    // Vectors computed with an independent AES/SHA-256 implementation
    // (Python `cryptography`), frozen here.
    #[test]
    fn prp_matches_the_frozen_test_vectors() {
        let key = fixed_key();
        assert_eq!(
            hex::encode(prp_eval(&key, p(0x68d9e6), 16592, 1)),
            "6ca327de9e0410aa5ad152609246faf5"
        );
        assert_eq!(
            hex::encode(prp_eval(&key, p(0x68d9e6), 16592, 2)),
            "06e200923645b224233ef2672df4dd8b"
        );
        assert_eq!(
            hex::encode(prp_eval(&key, p(0x010203), 3, 1)),
            "9bd064617a6feb224b56b977b9c11e5f"
        );
    }

    #[test]
    fn element_keys_match_the_frozen_test_vectors() {
        assert_eq!(
            hex::encode(element_key(p(0x68d9e6), 16592, 1)),
            "bfe8010fd01a8eddffd24ad027f60f07717d84990bd73746836b392925151b94"
        );
        assert_eq!(
            hex::encode(element_key(p(0x68d9e6), 16592, 2)),
            "b5b38f8cd1b50ebf054816b81d914c09043f319e0f0abb27c785062026a6c6f2"
        );
    }

    #[test]
    fn gcm_sealing_matches_the_frozen_test_vector() {
        let key = element_key(p(0x68d9e6), 16592, 1);
        let nonce: [u8; NONCE_LEN] = std::array::from_fn(|i| i as u8);
        let element = encode_element(p(0x68d9e6), 16592);
        let sealed = seal_with_nonce(&key, &nonce, &element);
        assert_eq!(
            hex::encode(&sealed),
            "000102030405060708090a0b1a289e3015fde01f1389f65132147d24091c9e165c"
        );
        assert_eq!(open(&key, &sealed).unwrap(), element);
    }

    #[test]
    fn element_encoding_round_trips() {
        for (v, day) in [(0u32, 0u16), (0x68d9e6, 16592), ((1 << 24) - 1, u16::MAX)] {
            let enc = encode_element(p(v), day);
            assert_eq!(decode_element(&enc), Some((p(v), day)));
        }
        assert_eq!(decode_element(&[0; 4]), None);
    }

    #[test]
    fn setup_gives_every_org_the_same_fresh_key() {
        let orgs: Vec<OrgId> = ["a", "b", "c"].iter().map(|s| OrgId::new(s)).collect();
        let keys = setup(&orgs).unwrap();
        assert_eq!(keys.len(), 3);
        assert!(keys.values().all(|k| k == &keys[&orgs[0]]));
        let again = setup(&orgs).unwrap();
        assert_ne!(keys[&orgs[0]], again[&orgs[0]]);
        assert!(matches!(setup(&orgs[..1]), Err(PrivacyError::TooFewOrgs(1))));
    }

    #[test]
    fn multiplicity_three_yields_three_distinct_entries() {
        let mut d = OrgDataset::new(OrgId::new("a"));
        d.record(p(7), 2, 3);
        let enc = encrypt_dataset(&d, &fixed_key(), CountMode::Raw).unwrap();
        assert_eq!(enc.s().len(), 3);
        assert_eq!(enc.e().len(), 3);
        let unique: std::collections::BTreeSet<_> = enc.s().iter().collect();
        assert_eq!(unique.len(), 3);
        // presence mode collapses to one unit
        let enc = encrypt_dataset(&d, &fixed_key(), CountMode::Presence).unwrap();
        assert_eq!(enc.s().len(), 1);
    }

    #[test]
    fn counter_entries_for_one_element_are_unrelated() {
        // The STA must not be able to group repeats: entries for the same
        // element differ completely, not just in a suffix.
        let key = fixed_key();
        let a = prp_eval(&key, p(0x68d9e6), 16592, 1);
        let b = prp_eval(&key, p(0x68d9e6), 16592, 2);
        assert_ne!(a, b);
        let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
        assert!(common < 8, "byte prefix of length {common} shared");
    }

    #[test]
    fn equal_elements_at_two_orgs_match_in_s_but_not_in_e() {
        let key = fixed_key();
        let mut da = OrgDataset::new(OrgId::new("a"));
        let mut db = OrgDataset::new(OrgId::new("b"));
        da.record(p(42), 5, 1);
        db.record(p(42), 5, 1);
        let ea = encrypt_dataset(&da, &key, CountMode::Raw).unwrap();
        let eb = encrypt_dataset(&db, &key, CountMode::Raw).unwrap();
        assert_eq!(ea.s(), eb.s());
        assert_ne!(ea.e()[0], eb.e()[0], "nonces must differ");
        let k = ea.keys()[&ea.s()[0]];
        assert_eq!(open(&k, &ea.e()[0]), open(&k, &eb.e()[0]));
    }

    fn random_datasets(
        rng: &mut ChaCha12Rng,
        n: usize,
        max_elements: usize,
    ) -> BTreeMap<OrgId, OrgDataset> {
        (0..n)
            .map(|i| {
                let org = OrgId::new(&format!("org{i}"));
                let mut d = OrgDataset::new(org.clone());
                for _ in 0..rng.gen_range(0..=max_elements) {
                    d.record(
                        p(rng.gen_range(0..200)),
                        rng.gen_range(0..10),
                        rng.gen_range(1..=4),
                    );
                }
                (org, d)
            })
            .collect()
    }

    #[test]
    fn sta_o2o_equals_the_plaintext_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for trial in 0..20 {
            let mode = if trial % 2 == 0 { CountMode::Raw } else { CountMode::Presence };
            let n = rng.gen_range(2..=5);
            let datasets = random_datasets(&mut rng, n, 120);
            let keys = setup(&datasets.keys().cloned().collect::<Vec<_>>()).unwrap();
            let uploads: Vec<StaUpload> = datasets
                .values()
                .map(|d| encrypt_dataset(d, &keys[d.org()], mode).unwrap().upload())
                .collect();
            let (o2o, buffers) = sta_compute(&uploads).unwrap();
            assert_eq!(o2o, o2o_plain(&datasets, mode));
            // |Buff[i,j]| == O2O[i,j] for all pairs with matches
            for b in &buffers {
                let i = o2o.index_of(&b.receiver).unwrap();
                let j = o2o.index_of(&b.source).unwrap();
                assert_eq!(b.entries.len() as u64, o2o.cell(i, j));
            }
        }
    }

    #[test]
    fn disjoint_uploads_produce_a_zero_matrix_and_no_buffers() {
        let mut da = OrgDataset::new(OrgId::new("a"));
        let mut db = OrgDataset::new(OrgId::new("b"));
        da.record(p(1), 0, 1);
        db.record(p(2), 0, 1);
        let keys = setup(&[OrgId::new("a"), OrgId::new("b")]).unwrap();
        let uploads: Vec<StaUpload> = [&da, &db]
            .iter()
            .map(|d| encrypt_dataset(d, &keys[d.org()], CountMode::Raw).unwrap().upload())
            .collect();
        let (o2o, buffers) = sta_compute(&uploads).unwrap();
        assert_eq!(o2o.cell(0, 1), 0);
        assert!(buffers.is_empty());
    }

    #[test]
    fn duplicate_uploads_are_a_protocol_error() {
        let mut d = OrgDataset::new(OrgId::new("a"));
        d.record(p(1), 0, 1);
        let key = fixed_key();
        let up = encrypt_dataset(&d, &key, CountMode::Raw).unwrap().upload();
        assert!(matches!(
            sta_compute(&[up.clone(), up]),
            Err(PrivacyError::DuplicateUpload(_))
        ));
    }

    #[test]
    fn decrypted_pools_equal_the_element_intersection_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for trial in 0..10 {
            let mode = if trial % 2 == 0 { CountMode::Raw } else { CountMode::Presence };
            let n = rng.gen_range(2..=5);
            let datasets = random_datasets(&mut rng, n, 80);
            let spec = ClusteringSpec {
                algo: ClusterAlgo::Agglomerative,
                k: 1,
                threshold_pct: 100.0,
                seed: 0,
            };
            let round = simulate_round(&datasets, &spec, mode).unwrap();
            assert_eq!(round.rejects, RejectStats::default());
            let oracle = element_intersection_pools(&round.assignment, &datasets, mode);
            assert_eq!(round.pools, oracle);
        }
    }

    #[test]
    fn tampered_ciphertexts_are_rejected_without_collateral() {
        let mut da = OrgDataset::new(OrgId::new("a"));
        let mut db = OrgDataset::new(OrgId::new("b"));
        for v in 0..5 {
            da.record(p(v), 1, 1);
            db.record(p(v), 1, 1);
        }
        let keys = setup(&[OrgId::new("a"), OrgId::new("b")]).unwrap();
        let enc_a = encrypt_dataset(&da, &keys[da.org()], CountMode::Raw).unwrap();
        let enc_b = encrypt_dataset(&db, &keys[db.org()], CountMode::Raw).unwrap();
        let (_, mut buffers) = sta_compute(&[enc_a.upload(), enc_b.upload()]).unwrap();

        let buf = buffers
            .iter_mut()
            .find(|b| b.receiver == OrgId::new("a"))
            .unwrap();
        let last = buf.entries.last_mut().unwrap();
        *last.1.last_mut().unwrap() ^= 0xff;

        let shared: Vec<&PairBuffer> =
            buffers.iter().filter(|b| b.receiver == OrgId::new("a")).collect();
        let (pool, stats) = decrypt_shared(&OrgId::new("a"), &shared, enc_a.keys());
        assert_eq!(stats.auth_failures, 1);
        assert_eq!(pool.len(), 4, "the other four entries survive");
    }

    #[test]
    fn empty_buffers_decrypt_to_an_empty_pool() {
        let (pool, stats) = decrypt_shared(&OrgId::new("a"), &[], &BTreeMap::new());
        assert!(pool.is_empty());
        assert_eq!(stats.total(), 0);
    }

    #[test]
    fn empty_dataset_still_uploads_cleanly() {
        let d = OrgDataset::new(OrgId::new("a"));
        let enc = encrypt_dataset(&d, &fixed_key(), CountMode::Raw).unwrap();
        assert!(enc.s().is_empty() && enc.e().is_empty());
    }

    #[test]
    fn simulated_transcripts_are_blind() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let datasets = random_datasets(&mut rng, 4, 100);
        let spec = ClusteringSpec {
            algo: ClusterAlgo::Agglomerative,
            k: 1,
            threshold_pct: 100.0,
            seed: 0,
        };
        let round = simulate_round(&datasets, &spec, CountMode::Raw).unwrap();
        let report = scan_transcript(&round.sta_received, &round.kappa, datasets.values());
        assert!(report.clean(), "{report:?}");
        assert!(report.scanned_bytes > 0);
    }

    #[test]
    fn scanner_detects_planted_leaks() {
        let mut d = OrgDataset::new(OrgId::new("a"));
        d.record(p(0xa1b2c3), 7, 1);
        let kappa = fixed_key();
        let mut transcript = Vec::new();
        transcript.extend_from_slice(&encode_element(p(0xa1b2c3), 7));
        transcript.extend_from_slice(kappa.as_bytes());
        let report = scan_transcript(&transcript, &kappa, [&d]);
        assert_eq!(report.kappa_hits, 1);
        assert_eq!(report.element_hits, 1);
    }
}

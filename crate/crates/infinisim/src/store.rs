//! Capacity-checked device / host / NVMe storage with asynchronous tickets.
//!
//! Device and host tiers are in-memory maps. The NVMe tier keeps one file
//! per key under `nvme_root`, named by the percent-encoded key plus
//! `.shard`. A shard file is a 20-byte header followed by the little-endian
//! payload:
//!
//! ```text
//! 0..4    b"ZINF"
//! 4..8    version, u32 LE (= 1)
//! 8       dtype (0 = f32, 1 = f16, 2 = f64)
//! 9..12   zero
//! 12..20  element count, u64 LE
//! ```
//!
//! File writes go to a temporary name and are renamed once complete, so a
//! key is never readable with partial content. NVMe transfers are streamed
//! through a fixed pool of reusable buffers.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use infinisim_core::{DType, TierKind, TypedArray};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

pub const MAGIC: [u8; 4] = *b"ZINF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const NVME_ROOT_ENV: &str = "INFINISIM_NVME_ROOT";

const KEY_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("{tier} capacity exceeded: {requested} bytes requested with {used} of {capacity} in use")]
    CapacityExceeded { tier: TierKind, requested: u64, used: u64, capacity: u64 },
    #[error("key `{key}` not found in {tier} tier")]
    KeyNotFound { tier: TierKind, key: String },
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad shard file {path}: {message}")]
    Format { path: String, message: String },
    #[error("buffer pool exhausted")]
    PoolExhausted,
    #[error("invalid key `{0}`")]
    InvalidKey(String),
    #[error("empty write to `{0}`")]
    EmptyWrite(String),
    #[error("range {start}..{end} outside `{key}` of length {len}")]
    OutOfRange { key: String, start: usize, end: usize, len: usize },
    #[error("`{key}` holds {found} data, expected {expected}")]
    DTypeMismatch { key: String, expected: &'static str, found: &'static str },
    #[error("streaming write to `{key}` got {got} of {expected} elements")]
    Incomplete { key: String, got: usize, expected: usize },
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn format_err(path: &Path, message: impl Into<String>) -> StoreError {
    StoreError::Format { path: path.display().to_string(), message: message.into() }
}

pub fn encode_header(dtype: DType, count: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[8] = dtype.code();
    h[12..20].copy_from_slice(&count.to_le_bytes());
    h
}

/// Parses a shard header, returning `(dtype, element count)`.
pub fn decode_header(h: &[u8]) -> Result<(DType, u64), String> {
    if h.len() < HEADER_LEN {
        return Err(format!("header is {} bytes, need {HEADER_LEN}", h.len()));
    }
    if h[0..4] != MAGIC {
        return Err(format!("bad magic {:02x?}", &h[0..4]));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = DType::from_code(h[8]).ok_or_else(|| format!("unknown dtype code {}", h[8]))?;
    if h[9..12] != [0, 0, 0] {
        return Err("nonzero reserved bytes".into());
    }
    Ok((dtype, u64::from_le_bytes(h[12..20].try_into().unwrap())))
}

pub fn shard_file_name(key: &str) -> String {
    format!("{}.shard", utf8_percent_encode(key, KEY_SET))
}

fn key_from_file_name(name: &str) -> Option<String> {
    let enc = name.strip_suffix(".shard")?;
    percent_decode_str(enc).decode_utf8().ok().map(|k| k.into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPolicy {
    /// `acquire` waits for a buffer to come back.
    Block,
    /// `acquire` fails with [`StoreError::PoolExhausted`].
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub buffer_size: usize,
    pub buffer_count: usize,
    pub policy: PoolPolicy,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec { buffer_size: 4 << 20, buffer_count: 8, policy: PoolPolicy::Block }
    }
}

/// Fixed set of reusable staging buffers.
#[derive(Debug)]
pub struct BufferPool {
    spec: PoolSpec,
    free: Mutex<Vec<Vec<u8>>>,
    returned: Condvar,
    waits: AtomicU64,
}

impl BufferPool {
    pub fn new(spec: PoolSpec) -> Self {
        let spec = PoolSpec { buffer_size: spec.buffer_size.max(8), buffer_count: spec.buffer_count.max(1), ..spec };
        let free = (0..spec.buffer_count).map(|_| Vec::with_capacity(spec.buffer_size)).collect();
        BufferPool { spec, free: Mutex::new(free), returned: Condvar::new(), waits: AtomicU64::new(0) }
    }

    pub fn spec(&self) -> PoolSpec {
        self.spec
    }

    pub fn pooled_bytes(&self) -> u64 {
        (self.spec.buffer_size * self.spec.buffer_count) as u64
    }

    pub fn acquire(&self) -> Result<PooledBuffer<'_>, StoreError> {
        let mut free = lock(&self.free);
        let mut waited = false;
        loop {
            if let Some(mut buf) = free.pop() {
                buf.clear();
                return Ok(PooledBuffer { pool: self, buf: Some(buf) });
            }
            if self.spec.policy == PoolPolicy::Fail {
                return Err(StoreError::PoolExhausted);
            }
            if !waited {
                self.waits.fetch_add(1, Ordering::Relaxed);
                waited = true;
            }
            free = self.returned.wait(free).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn free_count(&self) -> usize {
        lock(&self.free).len()
    }

    pub fn in_use(&self) -> usize {
        self.spec.buffer_count - self.free_count()
    }

    pub fn waits(&self) -> u64 {
        self.waits.load(Ordering::Relaxed)
    }
}

pub struct PooledBuffer<'a> {
    pool: &'a BufferPool,
    buf: Option<Vec<u8>>,
}

impl std::ops::Deref for PooledBuffer<'_> {
    type Target = Vec<u8>;
    fn deref(&self) -> &Vec<u8> {
        self.buf.as_ref().unwrap()
    }
}

impl std::ops::DerefMut for PooledBuffer<'_> {
    fn deref_mut(&mut self) -> &mut Vec<u8> {
        self.buf.as_mut().unwrap()
    }
}

impl Drop for PooledBuffer<'_> {
    fn drop(&mut self) {
        if let Some(mut buf) = self.buf.take() {
            // never let a buffer grow past its nominal size while pooled
            buf.clear();
            buf.shrink_to(self.pool.spec.buffer_size);
            lock(&self.pool.free).push(buf);
            self.pool.returned.notify_one();
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoMode {
    /// Tickets are serviced by this many background workers.
    Async { workers: usize },
    /// Every ticket completes before the issuing call returns.
    Sync,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Capacity in bytes per tier, indexed by `TierKind::index()`.
    pub capacities: [u64; 3],
    pub nvme_root: PathBuf,
    pub pool: PoolSpec,
    pub io: IoMode,
}

impl StoreConfig {
    pub fn new(nvme_root: impl Into<PathBuf>) -> Self {
        StoreConfig {
            capacities: [u64::MAX; 3],
            nvme_root: nvme_root.into(),
            pool: PoolSpec::default(),
            io: IoMode::Async { workers: 4 },
        }
    }

    pub fn with_capacity(mut self, tier: TierKind, bytes: u64) -> Self {
        self.capacities[tier.index()] = bytes;
        self
    }

    pub fn with_pool(mut self, pool: PoolSpec) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_io(mut self, io: IoMode) -> Self {
        self.io = io;
        self
    }
}

/// Picks the NVMe root: an explicit flag wins, then the environment, then the
/// config file value, then `default`.
pub fn resolve_nvme_root(flag: Option<&Path>, config: Option<&Path>, default: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(NVME_ROOT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.unwrap_or(default).to_path_buf()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TierStats {
    pub used: u64,
    pub capacity: u64,
    pub peak: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreStats {
    pub tiers: [TierStats; 3],
    pub buffer_waits: u64,
    pub pool_in_use: usize,
    pub pool_free: usize,
}

impl StoreStats {
    pub fn tier(&self, t: TierKind) -> &TierStats {
        &self.tiers[t.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoKind {
    Read,
    Write,
    Move,
}

type Outcome = Result<Option<TypedArray>, StoreError>;

#[derive(Debug)]
struct TicketInner {
    id: u64,
    kind: IoKind,
    key: String,
    tier: TierKind,
    state: Mutex<Option<Outcome>>,
    done: Condvar,
}

/// Handle to one asynchronous operation. Completes exactly once.
#[derive(Debug, Clone)]
pub struct IoTicket(Arc<TicketInner>);

impl IoTicket {
    fn new(id: u64, kind: IoKind, key: &str, tier: TierKind) -> Self {
        IoTicket(Arc::new(TicketInner {
            id,
            kind,
            key: key.to_string(),
            tier,
            state: Mutex::new(None),
            done: Condvar::new(),
        }))
    }

    fn complete(&self, outcome: Outcome) {
        let mut s = lock(&self.0.state);
        debug_assert!(s.is_none(), "ticket completed twice");
        if s.is_none() {
            *s = Some(outcome);
            self.0.done.notify_all();
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn kind(&self) -> IoKind {
        self.0.kind
    }

    pub fn key(&self) -> &str {
        &self.0.key
    }

    pub fn tier(&self) -> TierKind {
        self.0.tier
    }

    pub fn is_complete(&self) -> bool {
        lock(&self.0.state).is_some()
    }

    /// Blocks until completion and returns the operation's error, if any.
    pub fn wait(&self) -> Result<(), StoreError> {
        let mut s = lock(&self.0.state);
        while s.is_none() {
            s = self.0.done.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        match s.as_ref().unwrap() {
            Ok(_) => Ok(()),
            Err(e) => Err(e.clone()),
        }
    }

    /// Waits, then hands over the data of a completed read (once).
    pub fn take_data(&self) -> Result<TypedArray, StoreError> {
        self.wait()?;
        let mut s = lock(&self.0.state);
        match s.as_mut().unwrap() {
            Ok(data) => data.take().ok_or_else(|| StoreError::KeyNotFound { tier: self.0.tier, key: self.0.key.clone() }),
            Err(e) => Err(e.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NvmeEntry {
    version: u64,
}

#[derive(Debug, Default)]
struct State {
    mem: [HashMap<String, Arc<TypedArray>>; 2],
    nvme: HashMap<String, NvmeEntry>,
    /// Bytes charged per key, including writes still in flight.
    sizes: [HashMap<String, u64>; 3],
    used: [u64; 3],
    peak: [u64; 3],
    next_version: u64,
    latest: HashMap<String, u64>,
}

impl State {
    fn charge(&mut self, tier: TierKind, key: &str, bytes: u64, capacity: u64) -> Result<(), StoreError> {
        let i = tier.index();
        let old = self.sizes[i].get(key).copied().unwrap_or(0);
        let used = self.used[i] - old;
        if used.checked_add(bytes).is_none_or(|u| u > capacity) {
            return Err(StoreError::CapacityExceeded { tier, requested: bytes, used: self.used[i], capacity });
        }
        self.used[i] = used + bytes;
        self.peak[i] = self.peak[i].max(self.used[i]);
        self.sizes[i].insert(key.to_string(), bytes);
        Ok(())
    }

    fn uncharge(&mut self, tier: TierKind, key: &str) {
        let i = tier.index();
        if let Some(old) = self.sizes[i].remove(key) {
            self.used[i] -= old;
        }
    }

    fn issue_version(&mut self, key: &str) -> u64 {
        self.next_version += 1;
        self.latest.insert(key.to_string(), self.next_version);
        self.next_version
    }
}

struct Inner {
    capacities: [u64; 3],
    root: PathBuf,
    state: Mutex<State>,
    read: [AtomicU64; 3],
    written: [AtomicU64; 3],
    pool: BufferPool,
    next_ticket: AtomicU64,
}

impl Inner {
    fn path(&self, key: &str) -> PathBuf {
        self.root.join(shard_file_name(key))
    }

    fn count_read(&self, tier: TierKind, n: u64) {
        self.read[tier.index()].fetch_add(n, Ordering::Relaxed);
    }

    fn count_written(&self, tier: TierKind, n: u64) {
        self.written[tier.index()].fetch_add(n, Ordering::Relaxed);
    }

    fn write_payload(&self, f: &mut File, path: &Path, data: &TypedArray) -> Result<u64, StoreError> {
        let size = data.dtype().size();
        let per_buf = (self.pool.spec().buffer_size / size).max(1);
        let mut written = 0u64;
        let mut start = 0;
        while start < data.len() {
            let n = per_buf.min(data.len() - start);
            let mut buf = self.pool.acquire()?;
            data.encode_le(start, n, &mut buf);
            f.write_all(&buf).map_err(|e| io_err(path, e))?;
            written += buf.len() as u64;
            start += n;
        }
        Ok(written)
    }

    fn nvme_write(&self, key: &str, version: u64, data: &TypedArray) -> Result<(), StoreError> {
        let path = self.path(key);
        let tmp = path.with_extension(format!("shard.tmp{version}"));
        let result = (|| {
            let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
            f.write_all(&encode_header(data.dtype(), data.len() as u64)).map_err(|e| io_err(&tmp, e))?;
            let n = self.write_payload(&mut f, &tmp, data)?;
            f.flush().map_err(|e| io_err(&tmp, e))?;
            Ok(n + HEADER_LEN as u64)
        })();
        match result {
            Ok(bytes) => {
                self.count_written(TierKind::Nvme, bytes);
                self.commit_nvme(key, version, &tmp, &path)
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                self.rollback_nvme(key, version);
                Err(e)
            }
        }
    }

    fn commit_nvme(&self, key: &str, version: u64, tmp: &Path, path: &Path) -> Result<(), StoreError> {
        let mut st = lock(&self.state);
        let newest = st.latest.get(key).copied().unwrap_or(0);
        let committed = st.nvme.get(key).map(|e| e.version).unwrap_or(0);
        if version < committed || version < newest && !st.sizes[TierKind::Nvme.index()].contains_key(key) {
            // superseded or deleted while in flight
            drop(st);
            let _ = fs::remove_file(tmp);
            return Ok(());
        }
        if let Err(e) = fs::rename(tmp, path) {
            let _ = fs::remove_file(tmp);
            drop(st);
            self.rollback_nvme(key, version);
            return Err(io_err(path, e));
        }
        st.nvme.insert(key.to_string(), NvmeEntry { version });
        Ok(())
    }

    fn rollback_nvme(&self, key: &str, version: u64) {
        let mut st = lock(&self.state);
        if st.latest.get(key) == Some(&version) {
            st.uncharge(TierKind::Nvme, key);
            if st.nvme.contains_key(key) {
                let bytes = fs::metadata(self.path(key)).map(|m| m.len()).unwrap_or(0);
                let _ = st.charge(TierKind::Nvme, key, bytes, u64::MAX);
            }
        }
    }

    fn open_shard(&self, key: &str) -> Result<(File, PathBuf, DType, u64), StoreError> {
        let path = self.path(key);
        let mut f = File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut h = [0u8; HEADER_LEN];
        f.read_exact(&mut h).map_err(|e| format_err(&path, format!("short header: {e}")))?;
        let (dtype, count) = decode_header(&h).map_err(|m| format_err(&path, m))?;
        let len = f.metadata().map_err(|e| io_err(&path, e))?.len();
        let expect = HEADER_LEN as u64 + count * dtype.size() as u64;
        if len != expect {
            return Err(format_err(&path, format!("file is {len} bytes, header implies {expect}")));
        }
        Ok((f, path, dtype, count))
    }

    fn nvme_read(&self, key: &str, range: Option<(usize, usize)>) -> Result<TypedArray, StoreError> {
        let (mut f, path, dtype, count) = self.open_shard(key)?;
        let count = count as usize;
        let (start, n) = range.unwrap_or((0, count));
        if start + n > count {
            return Err(StoreError::OutOfRange { key: key.to_string(), start, end: start + n, len: count });
        }
        let size = dtype.size();
        if start > 0 {
            f.seek(SeekFrom::Start((HEADER_LEN + start * size) as u64)).map_err(|e| io_err(&path, e))?;
        }
        let per_buf = (self.pool.spec().buffer_size / size).max(1);
        let mut out = TypedArray::zeros(dtype, 0);
        let mut done = 0;
        while done < n {
            let m = per_buf.min(n - done);
            let mut buf = self.pool.acquire()?;
            buf.resize(m * size, 0);
            f.read_exact(&mut buf).map_err(|e| format_err(&path, format!("truncated payload: {e}")))?;
            out.extend_from(&TypedArray::decode_le(dtype, &buf));
            done += m;
        }
        self.count_read(TierKind::Nvme, (HEADER_LEN + n * size) as u64);
        Ok(out)
    }
}

type Job = Box<dyn FnOnce() + Send + 'static>;

/// Tiered key/value store for typed 1-D arrays. Shareable across threads.
pub struct TierStore {
    inner: Arc<Inner>,
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for TierStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TierStore").field("root", &self.inner.root).field("stats", &self.stats()).finish()
    }
}

impl TierStore {
    /// Opens a store. Existing `.shard` files under the root become readable
    /// NVMe keys; leftover temporary files are removed.
    pub fn create(cfg: StoreConfig) -> Result<Self, StoreError> {
        let root = cfg.nvme_root.clone();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let probe = root.join(".probe");
        File::create(&probe).map_err(|e| io_err(&root, e))?;
        let _ = fs::remove_file(&probe);

        let mut state = State::default();
        for entry in fs::read_dir(&root).map_err(|e| io_err(&root, e))? {
            let entry = entry.map_err(|e| io_err(&root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.contains(".shard.tmp") {
                let _ = fs::remove_file(entry.path());
                continue;
            }
            let Some(key) = key_from_file_name(&name) else { continue };
            let bytes = entry.metadata().map_err(|e| io_err(&entry.path(), e))?.len();
            let version = state.issue_version(&key);
            state.nvme.insert(key.clone(), NvmeEntry { version });
            state.charge(TierKind::Nvme, &key, bytes, u64::MAX)?;
        }
        state.peak = state.used;

        let inner = Arc::new(Inner {
            capacities: cfg.capacities,
            root,
            state: Mutex::new(state),
            read: Default::default(),
            written: Default::default(),
            pool: BufferPool::new(cfg.pool),
            next_ticket: AtomicU64::new(1),
        });
        let (tx, workers) = match cfg.io {
            IoMode::Sync => (None, Vec::new()),
            IoMode::Async { workers } => {
                let (tx, rx) = mpsc::channel::<Job>();
                let rx = Arc::new(Mutex::new(rx));
                let handles = (0..workers.max(1))
                    .map(|i| {
                        let rx: Arc<Mutex<Receiver<Job>>> = Arc::clone(&rx);
                        std::thread::Builder::new()
                            .name(format!("tier-io-{i}"))
                            .spawn(move || loop {
                                let job = lock(&rx).recv();
                                match job {
                                    Ok(job) => job(),
                                    Err(_) => break,
                                }
                            })
                            .expect("spawn io worker")
                    })
                    .collect();
                (Some(tx), handles)
            }
        };
        Ok(TierStore { inner, tx, workers })
    }

    pub fn nvme_root(&self) -> &Path {
        &self.inner.root
    }

    pub fn pool(&self) -> &BufferPool {
        &self.inner.pool
    }

    pub fn capacity(&self, tier: TierKind) -> u64 {
        self.inner.capacities[tier.index()]
    }

    fn ticket(&self, kind: IoKind, key: &str, tier: TierKind) -> IoTicket {
        IoTicket::new(self.inner.next_ticket.fetch_add(1, Ordering::Relaxed), kind, key, tier)
    }

    fn dispatch(&self, ticket: &IoTicket, job: impl FnOnce() -> Outcome + Send + 'static) {
        let t = ticket.clone();
        let run = move || t.complete(job());
        match &self.tx {
            Some(tx) => {
                if let Err(mpsc::SendError(job)) = tx.send(Box::new(run)) {
                    job();
                }
            }
            None => run(),
        }
    }

    fn check_key(key: &str) -> Result<(), StoreError> {
        if key.is_empty() || key.contains('\0') {
            Err(StoreError::InvalidKey(key.to_string()))
        } else {
            Ok(())
        }
    }

    fn stored_bytes(tier: TierKind, data: &TypedArray) -> u64 {
        data.byte_len() as u64 + if tier == TierKind::Nvme { HEADER_LEN as u64 } else { 0 }
    }

    /// Stores `data` under `key`. Capacity is checked when the write is
    /// issued; in-memory tiers complete immediately.
    pub fn write(&self, key: &str, data: TypedArray, tier: TierKind) -> Result<IoTicket, StoreError> {
        Self::check_key(key)?;
        if data.is_empty() {
            return Err(StoreError::EmptyWrite(key.to_string()));
        }
        let bytes = Self::stored_bytes(tier, &data);
        let ticket = self.ticket(IoKind::Write, key, tier);
        let mut st = lock(&self.inner.state);
        st.charge(tier, key, bytes, self.capacity(tier))?;
        match tier {
            TierKind::Device | TierKind::Host => {
                st.mem[tier.index()].insert(key.to_string(), Arc::new(data));
                drop(st);
                self.inner.count_written(tier, bytes);
                ticket.complete(Ok(None));
            }
            TierKind::Nvme => {
                let version = st.issue_version(key);
                drop(st);
                let inner = Arc::clone(&self.inner);
                let k = key.to_string();
                self.dispatch(&ticket, move || inner.nvme_write(&k, version, &data).map(|_| None));
            }
        }
        Ok(ticket)
    }

    pub fn contains(&self, key: &str, tier: TierKind) -> bool {
        let st = lock(&self.inner.state);
        match tier {
            TierKind::Nvme => st.nvme.contains_key(key),
            t => st.mem[t.index()].contains_key(key),
        }
    }

    /// Sorted keys readable in `tier`.
    pub fn keys(&self, tier: TierKind) -> Vec<String> {
        let st = lock(&self.inner.state);
        let mut keys: Vec<String> = match tier {
            TierKind::Nvme => st.nvme.keys().cloned().collect(),
            t => st.mem[t.index()].keys().cloned().collect(),
        };
        keys.sort();
        keys
    }

    fn read_impl(&self, key: &str, tier: TierKind, range: Option<(usize, usize)>) -> Result<IoTicket, StoreError> {
        let ticket = self.ticket(IoKind::Read, key, tier);
        let st = lock(&self.inner.state);
        match tier {
            TierKind::Device | TierKind::Host => {
                let data = st.mem[tier.index()]
                    .get(key)
                    .cloned()
                    .ok_or_else(|| StoreError::KeyNotFound { tier, key: key.to_string() })?;
                drop(st);
                let (start, n) = range.unwrap_or((0, data.len()));
                if start + n > data.len() {
                    return Err(StoreError::OutOfRange { key: key.to_string(), start, end: start + n, len: data.len() });
                }
                let out = if range.is_none() { (*data).clone() } else { data.slice(start, n) };
                self.inner.count_read(tier, out.byte_len() as u64);
                ticket.complete(Ok(Some(out)));
            }
            TierKind::Nvme => {
                if !st.nvme.contains_key(key) {
                    return Err(StoreError::KeyNotFound { tier, key: key.to_string() });
                }
                drop(st);
                let inner = Arc::clone(&self.inner);
                let k = key.to_string();
                self.dispatch(&ticket, move || inner.nvme_read(&k, range).map(Some));
            }
        }
        Ok(ticket)
    }

    /// Issues a read of the last completed write of `key`.
    pub fn read(&self, key: &str, tier: TierKind) -> Result<IoTicket, StoreError> {
        self.read_impl(key, tier, None)
    }

    /// Issues a read of elements `[start, start + count)`.
    pub fn read_range(&self, key: &str, tier: TierKind, start: usize, count: usize) -> Result<IoTicket, StoreError> {
        self.read_impl(key, tier, Some((start, count)))
    }

    /// Waits for every ticket; returns the first error in slice order.
    pub fn flush(&self, tickets: &[IoTicket]) -> Result<(), StoreError> {
        let mut first = None;
        for t in tickets {
            if let Err(e) = t.wait() {
                first.get_or_insert(e);
            }
        }
        first.map_or(Ok(()), Err)
    }

    pub fn read_now(&self, key: &str, tier: TierKind) -> Result<TypedArray, StoreError> {
        self.read(key, tier)?.take_data()
    }

    pub fn write_now(&self, key: &str, data: TypedArray, tier: TierKind) -> Result<(), StoreError> {
        self.write(key, data, tier)?.wait()
    }

    pub fn delete(&self, key: &str, tier: TierKind) -> Result<(), StoreError> {
        let mut st = lock(&self.inner.state);
        match tier {
            TierKind::Device | TierKind::Host => {
                st.mem[tier.index()]
                    .remove(key)
                    .ok_or_else(|| StoreError::KeyNotFound { tier, key: key.to_string() })?;
                st.uncharge(tier, key);
            }
            TierKind::Nvme => {
                let present = st.nvme.remove(key).is_some();
                let pending = st.sizes[tier.index()].contains_key(key);
                if !present && !pending {
                    return Err(StoreError::KeyNotFound { tier, key: key.to_string() });
                }
                st.issue_version(key);
                st.uncharge(tier, key);
                if present {
                    let path = self.inner.path(key);
                    fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
                }
            }
        }
        Ok(())
    }

    /// Moves `key` between tiers. If the destination rejects the write the
    /// source copy is left untouched.
    pub fn move_key(&self, key: &str, from: TierKind, to: TierKind) -> Result<IoTicket, StoreError> {
        let ticket = self.ticket(IoKind::Move, key, to);
        if from == to {
            if !self.contains(key, from) {
                return Err(StoreError::KeyNotFound { tier: from, key: key.to_string() });
            }
            ticket.complete(Ok(None));
            return Ok(ticket);
        }
        let data = self.read_now(key, from)?;
        self.write_now(key, data, to)?;
        self.delete(key, from)?;
        ticket.complete(Ok(None));
        Ok(ticket)
    }

    /// Charges `bytes` of anonymous usage to `tier` until the guard drops.
    pub fn reserve(&self, tier: TierKind, bytes: u64) -> Result<Reservation<'_>, StoreError> {
        let mut st = lock(&self.inner.state);
        let i = tier.index();
        let cap = self.capacity(tier);
        if st.used[i].checked_add(bytes).is_none_or(|u| u > cap) {
            return Err(StoreError::CapacityExceeded { tier, requested: bytes, used: st.used[i], capacity: cap });
        }
        st.used[i] += bytes;
        st.peak[i] = st.peak[i].max(st.used[i]);
        Ok(Reservation { store: self, tier, bytes })
    }

    /// Restarts peak tracking from current usage.
    pub fn reset_peaks(&self) {
        let mut st = lock(&self.inner.state);
        st.peak = st.used;
    }

    /// Opens a streaming write of exactly `count` elements. The key becomes
    /// readable on [`ShardWriter::commit`].
    pub fn begin_write(&self, key: &str, tier: TierKind, dtype: DType, count: usize) -> Result<ShardWriter<'_>, StoreError> {
        Self::check_key(key)?;
        if count == 0 {
            return Err(StoreError::EmptyWrite(key.to_string()));
        }
        let bytes = (count * dtype.size()) as u64 + if tier == TierKind::Nvme { HEADER_LEN as u64 } else { 0 };
        let mut st = lock(&self.inner.state);
        let prev = st.sizes[tier.index()].get(key).copied();
        st.charge(tier, key, bytes, self.capacity(tier))?;
        let sink = match tier {
            TierKind::Nvme => {
                let version = st.issue_version(key);
                drop(st);
                let path = self.inner.path(key);
                let tmp = path.with_extension(format!("shard.tmp{version}"));
                let opened = File::create(&tmp).and_then(|mut f| {
                    f.write_all(&encode_header(dtype, count as u64))?;
                    Ok(f)
                });
                match opened {
                    Ok(file) => Sink::File { file, tmp, path, version },
                    Err(e) => {
                        let _ = fs::remove_file(&tmp);
                        self.inner.rollback_nvme(key, version);
                        return Err(io_err(&tmp, e));
                    }
                }
            }
            _ => Sink::Mem(TypedArray::zeros(dtype, 0)),
        };
        Ok(ShardWriter { store: self, key: key.to_string(), tier, dtype, count, got: 0, prev, sink: Some(sink) })
    }

    pub fn stats(&self) -> StoreStats {
        let st = lock(&self.inner.state);
        let mut tiers = [TierStats::default(); 3];
        for t in TierKind::ALL {
            let i = t.index();
            tiers[i] = TierStats {
                used: st.used[i],
                capacity: self.inner.capacities[i],
                peak: st.peak[i],
                bytes_read: self.inner.read[i].load(Ordering::Relaxed),
                bytes_written: self.inner.written[i].load(Ordering::Relaxed),
            };
        }
        drop(st);
        let pool = &self.inner.pool;
        let free = pool.free_count();
        StoreStats { tiers, buffer_waits: pool.waits(), pool_in_use: pool.spec().buffer_count - free, pool_free: free }
    }
}

impl Drop for TierStore {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Anonymous usage charged to a tier; released on drop.
#[must_use]
pub struct Reservation<'a> {
    store: &'a TierStore,
    tier: TierKind,
    bytes: u64,
}

impl Reservation<'_> {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        let mut st = lock(&self.store.inner.state);
        st.used[self.tier.index()] -= self.bytes;
    }
}

enum Sink {
    Mem(TypedArray),
    File { file: File, tmp: PathBuf, path: PathBuf, version: u64 },
}

/// Streaming writer from [`TierStore::begin_write`]. Dropping it without
/// committing discards the partial data.
pub struct ShardWriter<'a> {
    store: &'a TierStore,
    key: String,
    tier: TierKind,
    dtype: DType,
    count: usize,
    got: usize,
    prev: Option<u64>,
    sink: Option<Sink>,
}

impl ShardWriter<'_> {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn append(&mut self, chunk: &TypedArray) -> Result<(), StoreError> {
        if chunk.dtype() != self.dtype {
            return Err(StoreError::DTypeMismatch {
                key: self.key.clone(),
                expected: self.dtype.name(),
                found: chunk.dtype().name(),
            });
        }
        if self.got + chunk.len() > self.count {
            return Err(StoreError::OutOfRange {
                key: self.key.clone(),
                start: self.got,
                end: self.got + chunk.len(),
                len: self.count,
            });
        }
        match self.sink.as_mut().expect("writer already finished") {
            Sink::Mem(buf) => {
                buf.extend_from(chunk);
            }
            Sink::File { file, tmp, .. } => {
                let n = self.store.inner.write_payload(file, tmp, chunk)?;
                self.store.inner.count_written(TierKind::Nvme, n);
            }
        }
        self.got += chunk.len();
        Ok(())
    }

    pub fn commit(mut self) -> Result<(), StoreError> {
        if self.got != self.count {
            return Err(StoreError::Incomplete { key: self.key.clone(), got: self.got, expected: self.count });
        }
        let inner = &self.store.inner;
        match self.sink.take().expect("writer already finished") {
            Sink::Mem(data) => {
                let bytes = data.byte_len() as u64;
                lock(&inner.state).mem[self.tier.index()].insert(self.key.clone(), Arc::new(data));
                inner.count_written(self.tier, bytes);
                Ok(())
            }
            Sink::File { mut file, tmp, path, version } => {
                file.flush().map_err(|e| io_err(&tmp, e))?;
                drop(file);
                inner.count_written(TierKind::Nvme, HEADER_LEN as u64);
                inner.commit_nvme(&self.key, version, &tmp, &path)
            }
        }
    }
}

impl Drop for ShardWriter<'_> {
    fn drop(&mut self) {
        let Some(sink) = self.sink.take() else { return };
        let inner = &self.store.inner;
        match sink {
            Sink::Mem(_) => {
                let mut st = lock(&inner.state);
                st.uncharge(self.tier, &self.key);
                if let Some(prev) = self.prev {
                    let _ = st.charge(self.tier, &self.key, prev, u64::MAX);
                }
            }
            Sink::File { file, tmp, version, .. } => {
                drop(file);
                let _ = fs::remove_file(&tmp);
                inner.rollback_nvme(&self.key, version);
            }
        }
    }
}

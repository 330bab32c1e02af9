//! Wire protocol between the master and remote workers.
//!
//! Every message is one frame: a 4-byte big-endian payload length followed
//! by a JSON document tagged by `kind`. Workers connect to the master, send
//! `hello`, and then execute one `customize_request` at a time until told
//! to `shutdown`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufReader, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coordinator::{Executor, JobId};
use crate::customizer::{self, CustomizationJob, CustomizationResult};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

const KINDS: [&str; 5] = [
    "hello",
    "customize_request",
    "customize_result",
    "job_error",
    "shutdown",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Hello {
        worker_id: String,
        protocol_version: u32,
    },
    CustomizeRequest {
        job_id: JobId,
        job: Box<CustomizationJob>,
    },
    CustomizeResult {
        job_id: JobId,
        result: Box<CustomizationResult>,
    },
    JobError {
        job_id: JobId,
        reason: String,
    },
    Shutdown,
}

impl Message {
    pub fn hello(worker_id: &str) -> Self {
        Message::Hello {
            worker_id: worker_id.to_string(),
            protocol_version: PROTOCOL_VERSION,
        }
    }
}

/// The complete frame for `message`.
pub fn encode(message: &Message) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(message).map_err(|e| Error::Protocol(e.to_string()))?;
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME_LEN)
        .ok_or_else(|| Error::Framing(format!("payload of {} bytes is too large", payload.len())))?;
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Parse a frame payload.
pub fn decode_payload(payload: &[u8]) -> Result<Message> {
    let value: serde_json::Value =
        serde_json::from_slice(payload).map_err(|e| Error::Protocol(format!("malformed payload: {e}")))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some(kind) if KINDS.contains(&kind) => {}
        Some(kind) => return Err(Error::Protocol(format!("unknown message kind {kind:?}"))),
        None => return Err(Error::Protocol("message without kind".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("malformed message: {e}")))
}

/// Read exactly one frame. A stream that ends anywhere inside a frame,
/// including before its first byte, is a framing error.
pub fn decode<R: Read>(reader: &mut R) -> Result<Message> {
    let mut len = [0u8; 4];
    read_full(reader, &mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(Error::Framing(format!("declared length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    read_full(reader, &mut payload)?;
    decode_payload(&payload)
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Framing(format!("stream ended before {} bytes", buf.len())),
        _ => Error::Io(e),
    })
}

pub fn send<W: Write>(writer: &mut W, message: &Message) -> Result<()> {
    writer.write_all(&encode(message)?)?;
    writer.flush()?;
    Ok(())
}

fn check_version(message: Message) -> Result<String> {
    match message {
        Message::Hello {
            worker_id,
            protocol_version: PROTOCOL_VERSION,
        } => Ok(worker_id),
        Message::Hello { protocol_version, .. } => Err(Error::Handshake(format!(
            "peer speaks protocol version {protocol_version}, expected {PROTOCOL_VERSION}"
        ))),
        other => Err(Error::Handshake(format!("expected hello, got {other:?}"))),
    }
}

fn connect_with_retry(addr: &str, patience: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + patience;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect to {addr} failed ({e}), retrying");
                thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(Error::Connectivity(format!("cannot reach master at {addr}: {e}"))),
        }
    }
}

/// Worker loop: connect to the master at `master`, handshake, then run
/// jobs one at a time until `shutdown`. Connection attempts are retried for
/// `patience`. Losing the master mid-job drops the job.
pub fn serve_worker(master: &str, worker_id: &str, patience: Duration) -> Result<()> {
    let stream = connect_with_retry(master, patience)?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    send(&mut writer, &Message::hello(worker_id))?;
    check_version(decode(&mut reader)?)?;
    log::info!("worker {worker_id} connected to {master}");
    loop {
        let message = match decode(&mut reader) {
            Ok(m) => m,
            Err(Error::Framing(_)) | Err(Error::Io(_)) => {
                return Err(Error::Connectivity(format!("lost connection to master {master}")))
            }
            Err(e) => return Err(e),
        };
        let reply = match message {
            Message::CustomizeRequest { job_id, job } => {
                log::info!("worker {worker_id}: job {job_id} for {}", job.detector_id);
                match customizer::customize(&job, job.nmm.target_value) {
                    Ok(result) => Message::CustomizeResult {
                        job_id,
                        result: Box::new(result),
                    },
                    Err(e) => Message::JobError {
                        job_id,
                        reason: e.to_string(),
                    },
                }
            }
            Message::Shutdown => {
                log::info!("worker {worker_id}: shutdown");
                let _ = writer.shutdown(Shutdown::Both);
                return Ok(());
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected message from master: {other:?}"
                )))
            }
        };
        if send(&mut writer, &reply).is_err() {
            return Err(Error::Connectivity(format!("lost connection to master {master}")));
        }
    }
}

enum Event {
    Message(usize, Message),
    Lost(usize, Error),
}

struct Worker {
    id: String,
    stream: Option<TcpStream>,
    busy: Option<JobId>,
}

impl Worker {
    fn alive(&self) -> bool {
        self.stream.is_some()
    }
}

struct Pending {
    job: CustomizationJob,
    dispatches: usize,
}

/// Master side of the protocol: hands jobs to connected workers, first idle
/// worker first, and re-dispatches a job once if its worker disappears.
pub struct RemoteDispatcher {
    listener: TcpListener,
    workers: Vec<Worker>,
    events_tx: Sender<Event>,
    events: Receiver<Event>,
    queue: VecDeque<JobId>,
    pending: HashMap<JobId, Pending>,
    finished: HashSet<JobId>,
}

impl RemoteDispatcher {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let listener =
            TcpListener::bind(addr).map_err(|e| Error::Connectivity(format!("cannot listen: {e}")))?;
        let (events_tx, events) = mpsc::channel();
        Ok(RemoteDispatcher {
            listener,
            workers: Vec::new(),
            events_tx,
            events,
            queue: VecDeque::new(),
            pending: HashMap::new(),
            finished: HashSet::new(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept workers until `count` have completed the handshake. Fails
    /// with a connectivity error if they do not all arrive within
    /// `timeout`. A peer with the wrong protocol version is dropped.
    pub fn accept_workers(&mut self, count: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        self.listener.set_nonblocking(true)?;
        let target = self.workers.len() + count;
        while self.workers.len() < target {
            match self.listener.accept() {
                Ok((stream, peer)) => match self.handshake(stream) {
                    Ok(()) => log::info!("worker {} connected from {peer}", self.workers.last().unwrap().id),
                    Err(e) => log::warn!("rejected connection from {peer}: {e}"),
                },
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        self.listener.set_nonblocking(false)?;
                        return Err(Error::Connectivity(format!(
                            "{} of {count} workers connected before the timeout",
                            count + self.workers.len() - target
                        )));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.listener.set_nonblocking(false)?;
        Ok(())
    }

    fn handshake(&mut self, stream: TcpStream) -> Result<()> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = stream.try_clone()?;
        let worker_id = match decode(&mut reader).and_then(check_version) {
            Ok(id) => id,
            Err(e) => {
                // Tell the peer which version we speak before hanging up.
                let _ = send(&mut writer, &Message::hello("master"));
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
        };
        send(&mut writer, &Message::hello("master"))?;
        stream.set_read_timeout(None)?;

        let index = self.workers.len();
        let events = self.events_tx.clone();
        thread::Builder::new()
            .name(format!("link-{worker_id}"))
            .spawn(move || loop {
                match decode(&mut reader) {
                    Ok(m) => {
                        if events.send(Event::Message(index, m)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = events.send(Event::Lost(index, e));
                        return;
                    }
                }
            })?;
        self.workers.push(Worker {
            id: worker_id,
            stream: Some(stream),
            busy: None,
        });
        Ok(())
    }

    /// Number of workers still connected.
    pub fn live_workers(&self) -> usize {
        self.workers.iter().filter(|w| w.alive()).count()
    }

    fn lose(&mut self, index: usize, why: &str) -> Result<()> {
        let worker = &mut self.workers[index];
        if let Some(s) = worker.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
            log::warn!("lost worker {}: {why}", worker.id);
        }
        if let Some(job_id) = worker.busy.take() {
            let pending = self.pending.get(&job_id).expect("in-flight job is pending");
            if pending.dispatches >= 2 {
                return Err(Error::Connectivity(format!(
                    "job {job_id} for {} lost on two workers",
                    pending.job.detector_id
                )));
            }
            self.queue.push_front(job_id);
        }
        Ok(())
    }

    fn dispatch(&mut self) -> Result<()> {
        while let Some(&job_id) = self.queue.front() {
            let Some(index) = self.workers.iter().position(|w| w.alive() && w.busy.is_none()) else {
                break;
            };
            self.queue.pop_front();
            let pending = self.pending.get_mut(&job_id).expect("queued job is pending");
            pending.dispatches += 1;
            let message = Message::CustomizeRequest {
                job_id,
                job: Box::new(pending.job.clone()),
            };
            let worker = &mut self.workers[index];
            worker.busy = Some(job_id);
            let stream = worker.stream.as_mut().expect("alive");
            if let Err(e) = send(stream, &message) {
                // Undo the count so the failed write does not use up the
                // job's one reassignment.
                self.pending.get_mut(&job_id).unwrap().dispatches -= 1;
                self.lose(index, &e.to_string())?;
            }
        }
        if !self.queue.is_empty() && self.live_workers() == 0 {
            return Err(Error::Connectivity("all workers lost".into()));
        }
        Ok(())
    }

    /// Ask every connected worker to exit and close the connections.
    pub fn shutdown(&mut self) {
        for w in &mut self.workers {
            if let Some(mut s) = w.stream.take() {
                let _ = send(&mut s, &Message::Shutdown);
                let _ = s.shutdown(Shutdown::Write);
            }
        }
    }
}

impl Executor for RemoteDispatcher {
    fn submit(&mut self, job_id: JobId, job: CustomizationJob) -> Result<()> {
        if self.pending.contains_key(&job_id) || self.finished.contains(&job_id) {
            return Err(Error::Protocol(format!("job id {job_id} used twice")));
        }
        self.pending.insert(job_id, Pending { job, dispatches: 0 });
        self.queue.push_back(job_id);
        self.dispatch()
    }

    fn recv(&mut self) -> Result<(JobId, CustomizationResult)> {
        loop {
            if self.pending.is_empty() {
                return Err(Error::Protocol("no job is outstanding".into()));
            }
            if self.live_workers() == 0 {
                return Err(Error::Connectivity("all workers lost".into()));
            }
            let event = self
                .events
                .recv()
                .map_err(|_| Error::Connectivity("worker links closed".into()))?;
            match event {
                Event::Lost(index, e) => {
                    self.lose(index, &e.to_string())?;
                    self.dispatch()?;
                }
                Event::Message(index, Message::CustomizeResult { job_id, result }) => {
                    if self.finished.contains(&job_id) {
                        return Err(Error::Protocol(format!("duplicate result for job {job_id}")));
                    }
                    if self.workers[index].busy != Some(job_id) {
                        return Err(Error::Protocol(format!(
                            "worker {} returned job {job_id} it was not given",
                            self.workers[index].id
                        )));
                    }
                    self.workers[index].busy = None;
                    self.pending.remove(&job_id);
                    self.finished.insert(job_id);
                    self.dispatch()?;
                    return Ok((job_id, *result));
                }
                Event::Message(index, Message::JobError { job_id, reason }) => {
                    let detector = self
                        .pending
                        .get(&job_id)
                        .map(|p| p.job.detector_id.clone())
                        .unwrap_or_default();
                    self.workers[index].busy = None;
                    return Err(
                        Error::Data(format!("remote job {job_id} failed: {reason}")).for_detector(&detector)
                    );
                }
                Event::Message(index, other) => {
                    let id = self.workers[index].id.clone();
                    return Err(Error::Protocol(format!(
                        "unexpected message from worker {id}: {other:?}"
                    )));
                }
            }
        }
    }
}

impl Drop for RemoteDispatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Helper for tests and tools: a raw connection that has completed the
/// worker side of the handshake.
pub fn connect_raw(master: &str, worker_id: &str) -> Result<(BufReader<TcpStream>, TcpStream)> {
    let stream = TcpStream::connect(master).map_err(|e| Error::Connectivity(e.to_string()))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    send(&mut writer, &Message::hello(worker_id))?;
    check_version(decode(&mut reader)?)?;
    Ok((reader, writer))
}

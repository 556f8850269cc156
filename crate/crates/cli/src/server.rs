//! TCP steering service. One thread owns the session and steps it against
//! the wall clock; each client gets a reader thread that forwards commands
//! and a writer thread fed by a small drop-oldest snapshot buffer, so a slow
//! client never stalls the physics.

use anyhow::{Context, Result};
use ssim::config::ScenarioConfig;
use ssim::steering::{
    read_frame, decode_payload, write_frame, ClientMessage, Command, FrameError, ServerMessage, Session, Snapshot,
};
use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

/// Snapshots held per subscriber before the oldest is discarded.
const SNAPSHOT_BUFFER: usize = 4;
/// Share of a frame the loop may spend stepping before it gives up on
/// keeping pace and lets sim time fall behind.
const STEP_BUDGET: f64 = 0.8;

#[derive(Default)]
struct Queues {
    replies: VecDeque<ServerMessage>,
    snapshots: VecDeque<Snapshot>,
    closed: bool,
}

#[derive(Default)]
struct Outbox {
    q: Mutex<Queues>,
    ready: Condvar,
}

impl Outbox {
    fn reply(&self, m: ServerMessage) {
        self.q.lock().unwrap().replies.push_back(m);
        self.ready.notify_one();
    }

    fn snapshot(&self, s: Snapshot) {
        let mut q = self.q.lock().unwrap();
        if q.snapshots.len() == SNAPSHOT_BUFFER {
            q.snapshots.pop_front();
        }
        q.snapshots.push_back(s);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.q.lock().unwrap().closed = true;
        self.ready.notify_one();
    }

    /// Replies go out before snapshots. `None` once closed and drained.
    fn next(&self) -> Option<ServerMessage> {
        let mut q = self.q.lock().unwrap();
        loop {
            if let Some(m) = q.replies.pop_front() {
                return Some(m);
            }
            if let Some(s) = q.snapshots.pop_front() {
                return Some(ServerMessage::Snapshot(s));
            }
            if q.closed {
                return None;
            }
            q = self.ready.wait(q).unwrap();
        }
    }
}

enum Event {
    Join(u64, Arc<Outbox>),
    Leave(u64),
    Command(u64, u64, Command),
}

pub fn serve(cfg: ScenarioConfig, addr: &str, log_dir: &Path, snapshot_hz: f64) -> Result<()> {
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    std::fs::create_dir_all(log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
    let session = Session::new(&cfg)?;
    println!("listening on {}", listener.local_addr()?);
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || accept_loop(listener, tx));
    run_session(session, rx, log_dir, snapshot_hz)
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>) {
    let ids = AtomicU64::new(1);
    for stream in listener.incoming().flatten() {
        let id = ids.fetch_add(1, Ordering::Relaxed);
        let tx = tx.clone();
        thread::spawn(move || {
            if let Err(e) = client(stream, id, &tx) {
                eprintln!("client {id}: {e}");
            }
            let _ = tx.send(Event::Leave(id));
        });
    }
}

fn client(stream: TcpStream, id: u64, tx: &Sender<Event>) -> Result<()> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut raw_writer = BufWriter::new(stream.try_clone()?);
    let refuse = |w: &mut BufWriter<TcpStream>, reason: String| -> Result<()> {
        write_frame(w, &ServerMessage::Refused { reason: reason.clone() })?;
        let _ = stream.shutdown(std::net::Shutdown::Both);
        anyhow::bail!("refused: {reason}")
    };
    match read_frame(&mut reader).and_then(|p| decode_payload::<ClientMessage>(&p)) {
        Ok(ClientMessage::Hello) => {}
        Ok(_) => return refuse(&mut raw_writer, "expected hello first".into()),
        Err(FrameError::Closed) => return Ok(()),
        Err(e) => return refuse(&mut raw_writer, e.to_string()),
    }

    let outbox = Arc::new(Outbox::default());
    let writer_box = outbox.clone();
    let writer_stream = stream.try_clone()?;
    let writer = thread::spawn(move || {
        let mut w = raw_writer;
        while let Some(m) = writer_box.next() {
            if write_frame(&mut w, &m).is_err() {
                break;
            }
            if matches!(m, ServerMessage::Refused { .. }) {
                break;
            }
        }
        let _ = writer_stream.shutdown(std::net::Shutdown::Both);
    });
    tx.send(Event::Join(id, outbox.clone())).ok();

    loop {
        let payload = match read_frame(&mut reader) {
            Ok(p) => p,
            Err(FrameError::Closed) => break,
            Err(e) => {
                outbox.reply(ServerMessage::Refused { reason: e.to_string() });
                break;
            }
        };
        match decode_payload::<ClientMessage>(&payload) {
            Ok(ClientMessage::Command { id: tag, cmd }) => {
                if tx.send(Event::Command(id, tag, cmd)).is_err() {
                    break;
                }
            }
            Ok(ClientMessage::Hello) => outbox.reply(ServerMessage::Error {
                id: None,
                reason: "already greeted".into(),
            }),
            Err(FrameError::Version(v)) => {
                outbox.reply(ServerMessage::Refused {
                    reason: FrameError::Version(v).to_string(),
                });
                break;
            }
            Err(e) => outbox.reply(ServerMessage::Error {
                id: None,
                reason: e.to_string(),
            }),
        }
    }
    outbox.close();
    let _ = writer.join();
    Ok(())
}

struct Hub<'a> {
    session: Session,
    clients: HashMap<u64, Arc<Outbox>>,
    log_dir: &'a Path,
    started: u64,
    epoch: u32,
}

impl Hub<'_> {
    fn log_path(&self) -> PathBuf {
        self.log_dir
            .join(format!("session-{}-{}-seed{}.jsonl", self.started, self.epoch, self.session.log().seed))
    }

    fn save_log(&self) {
        if self.session.log().entries.is_empty() {
            return;
        }
        let path = self.log_path();
        if let Err(e) = std::fs::write(&path, self.session.log().to_jsonl()) {
            eprintln!("cannot write {}: {e}", path.display());
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Join(id, outbox) => {
                outbox.reply(ServerMessage::Welcome {
                    seed: self.session.log().seed,
                    config_hash: self.session.log().config_hash.clone(),
                    state: self.session.snapshot(),
                });
                self.clients.insert(id, outbox);
            }
            Event::Leave(id) => {
                self.clients.remove(&id);
            }
            Event::Command(client, tag, cmd) => {
                let reset = matches!(cmd, Command::Reset { .. });
                let reply = match self.session.handle(&cmd) {
                    Ok(light_id) => ServerMessage::Ack {
                        id: tag,
                        time: self.session.time(),
                        step: self.session.step_index(),
                        light_id,
                    },
                    Err(reason) => ServerMessage::Error { id: Some(tag), reason },
                };
                let ok = matches!(reply, ServerMessage::Ack { .. });
                if let Some(o) = self.clients.get(&client) {
                    o.reply(reply);
                }
                if ok && reset {
                    self.epoch += 1;
                    let msg = ServerMessage::Reset {
                        seed: self.session.log().seed,
                        config_hash: self.session.log().config_hash.clone(),
                        state: self.session.snapshot(),
                    };
                    for o in self.clients.values() {
                        o.reply(msg.clone());
                    }
                }
                if ok {
                    self.save_log();
                }
            }
        }
    }

    fn broadcast(&self) {
        let snap = self.session.snapshot();
        for o in self.clients.values() {
            o.snapshot(snap.clone());
        }
    }
}

fn run_session(session: Session, rx: Receiver<Event>, log_dir: &Path, snapshot_hz: f64) -> Result<()> {
    let frame = Duration::from_secs_f64(1.0 / snapshot_hz);
    let dt = session.config().physics.dt;
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut hub = Hub {
        session,
        clients: HashMap::new(),
        log_dir,
        started,
        epoch: 0,
    };
    let mut next_frame = Instant::now() + frame;
    // Sim seconds owed to the wall clock, carried between frames.
    let mut owed = 0.0;
    let mut last_sent: Option<(u32, u64)> = None;
    loop {
        match rx.recv_timeout(next_frame.saturating_duration_since(Instant::now())) {
            Ok(ev) => {
                hub.handle(ev);
                continue;
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        }
        let tick = Instant::now();
        next_frame = (next_frame + frame).max(tick);
        if hub.session.paused() {
            owed = 0.0;
            continue;
        }
        owed += frame.as_secs_f64() * hub.session.timescale();
        let deadline = tick + frame.mul_f64(STEP_BUDGET);
        while owed >= dt && !hub.session.paused() {
            // Commands land on the step boundary they arrive at.
            while let Ok(ev) = rx.try_recv() {
                hub.handle(ev);
            }
            if hub.session.paused() {
                break;
            }
            match hub.session.step() {
                Ok(_) => owed -= dt,
                Err(e) => {
                    eprintln!("simulation halted: {e}");
                    for o in hub.clients.values() {
                        o.reply(ServerMessage::Error { id: None, reason: e.to_string() });
                    }
                }
            }
            if Instant::now() >= deadline {
                owed = 0.0;
                break;
            }
        }
        let mark = (hub.epoch, hub.session.step_index());
        if last_sent.map_or(true, |m| m != mark) && hub.session.step_index() > 0 {
            hub.broadcast();
            last_sent = Some(mark);
        }
    }
}

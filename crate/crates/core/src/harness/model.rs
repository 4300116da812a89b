//! Models under test: the in-process reference segmenter and out-of-process
//! models reached through the framed stdin/stdout protocol.

use std::io::{BufReader, BufWriter, Read};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::protocol;
use crate::error::{Error, Result};
use crate::imgcore::{Image, ProbMap};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Keep at most this much of a model's stderr for error reports.
const DIAGNOSTICS_LIMIT: usize = 8 * 1024;

/// How long a dead model's stderr may take to drain.
const STDERR_GRACE: Duration = Duration::from_millis(500);

pub trait SegmentationModel: Send + Sync {
    fn predict(&self, img: &Image) -> Result<ProbMap>;
}

/// Adapts a closure into a model; handy for tests and benchmarks.
pub struct FnModel<F>(pub F);

impl<F> SegmentationModel for FnModel<F>
where
    F: Fn(&Image) -> Result<ProbMap> + Send + Sync,
{
    fn predict(&self, img: &Image) -> Result<ProbMap> {
        (self.0)(img)
    }
}

/// Deterministic "bright thing" segmenter: 3x3 box-filtered luminance
/// pushed through a smoothstep between `t0` and `t1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceModel {
    pub t0: f32,
    pub t1: f32,
}

impl Default for ReferenceModel {
    fn default() -> Self {
        Self { t0: 0.55, t1: 0.75 }
    }
}

pub fn smoothstep(t0: f64, t1: f64, x: f64) -> f64 {
    let u = ((x - t0) / (t1 - t0)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl SegmentationModel for ReferenceModel {
    fn predict(&self, img: &Image) -> Result<ProbMap> {
        let (w, h) = img.dims();
        let lum = img.luminance();
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f64;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += lum[yy * w + xx] as f64;
                    }
                }
                out.push(smoothstep(self.t0 as f64, self.t1 as f64, s / 9.0) as f32);
            }
        }
        ProbMap::new(w, h, out)
    }
}

enum Frame {
    Hello(u16),
    Map(ProbMap),
}

struct Worker {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    frames: Receiver<Result<Frame>>,
    stderr: Arc<Mutex<Vec<u8>>>,
    stderr_done: Option<Receiver<()>>,
}

impl Worker {
    fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(format!("spawning model `{command}`"), e))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");

        let (tx, frames) = mpsc::channel();
        std::thread::spawn(move || {
            let hello = protocol::read_handshake(&mut stdout).map(Frame::Hello);
            let ok = hello.is_ok();
            if tx.send(hello).is_err() || !ok {
                return;
            }
            loop {
                let frame = protocol::read_response(&mut stdout).map(Frame::Map);
                let ok = frame.is_ok();
                if tx.send(frame).is_err() || !ok {
                    return;
                }
            }
        });

        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&stderr);
        let (done_tx, stderr_done) = mpsc::channel();
        std::thread::spawn(move || {
            let _done = done_tx;
            let mut buf = [0u8; 4096];
            while let Ok(n) = stderr_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap_or_else(|p| p.into_inner());
                s.extend_from_slice(&buf[..n]);
                if s.len() > DIAGNOSTICS_LIMIT {
                    let cut = s.len() - DIAGNOSTICS_LIMIT;
                    s.drain(..cut);
                }
            }
        });

        let mut worker = Self {
            child,
            stdin: Some(stdin),
            frames,
            stderr,
            stderr_done: Some(stderr_done),
        };
        if let Err(e) = protocol::write_handshake(worker.input(), protocol::VERSION) {
            return Err(worker.fail(format!("handshake failed: {e}")));
        }
        match worker.receive(timeout) {
            Ok(Frame::Hello(v)) if v == protocol::VERSION => Ok(worker),
            Ok(Frame::Hello(v)) => Err(worker.fail(format!(
                "protocol version mismatch: model speaks {v}, harness speaks {}",
                protocol::VERSION
            ))),
            Ok(Frame::Map(_)) => Err(worker.fail("model answered the handshake with a map")),
            Err(Error::Timeout(t)) => {
                worker.shutdown();
                Err(Error::Timeout(t))
            }
            Err(e) => Err(worker.fail(format!("handshake failed: {e}"))),
        }
    }

    fn input(&mut self) -> &mut BufWriter<ChildStdin> {
        self.stdin.as_mut().expect("worker is live")
    }

    fn receive(&mut self, timeout: Duration) -> Result<Frame> {
        match self.frames.recv_timeout(timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Model {
                message: "model output closed".into(),
                diagnostics: String::new(),
            }),
        }
    }

    fn predict(&mut self, img: &Image, timeout: Duration) -> Result<ProbMap> {
        protocol::write_request(self.input(), img)?;
        match self.receive(timeout)? {
            Frame::Map(map) if map.dims() == img.dims() => Ok(map),
            Frame::Map(map) => Err(Error::Model {
                message: format!(
                    "response is {:?} for a {:?} request",
                    map.dims(),
                    img.dims()
                ),
                diagnostics: String::new(),
            }),
            Frame::Hello(_) => unreachable!("reader sends one handshake"),
        }
    }

    /// Kills the process and collects whatever it wrote to stderr.
    fn shutdown(&mut self) -> String {
        // grandchildren of `sh` survive the kill; closing stdin lets
        // well-behaved ones exit and release the stderr pipe
        drop(self.stdin.take());
        let _ = self.child.kill();
        let status = self.child.wait().ok();
        if let Some(done) = self.stderr_done.take() {
            let _ = done.recv_timeout(STDERR_GRACE);
        }
        let mut diag =
            String::from_utf8_lossy(&self.stderr.lock().unwrap_or_else(|p| p.into_inner()))
                .trim_end()
                .to_string();
        if let Some(code) = status.and_then(|s| s.code()) {
            if !diag.is_empty() {
                diag.push('\n');
            }
            diag.push_str(&format!("exit status {code}"));
        }
        diag
    }

    fn fail(&mut self, message: impl Into<String>) -> Error {
        Error::Model {
            message: message.into(),
            diagnostics: self.shutdown(),
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        if self.stderr_done.is_some() {
            self.shutdown();
        }
    }
}

/// A model served by child processes speaking the wire protocol. Each worker
/// connection serves one request at a time; a worker that fails is killed
/// and respawned on its next use.
pub struct SubprocessModel {
    command: String,
    timeout: Duration,
    slots: Vec<Mutex<Option<Worker>>>,
}

impl SubprocessModel {
    /// Spawns the first worker immediately so a broken command or handshake
    /// fails here rather than mid-run.
    pub fn new(command: impl Into<String>, workers: usize, timeout: Duration) -> Result<Self> {
        let command = command.into();
        let mut slots = vec![Mutex::new(Some(Worker::spawn(&command, timeout)?))];
        slots.extend((1..workers.max(1)).map(|_| Mutex::new(None)));
        Ok(Self {
            command,
            timeout,
            slots,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }
}

impl SegmentationModel for SubprocessModel {
    fn predict(&self, img: &Image) -> Result<ProbMap> {
        let slot = rayon::current_thread_index().unwrap_or(0) % self.slots.len();
        let mut guard = self.slots[slot].lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Worker::spawn(&self.command, self.timeout)?);
        }
        let worker = guard.as_mut().expect("worker present");
        match worker.predict(img, self.timeout) {
            Ok(map) => Ok(map),
            Err(e) => {
                let mut worker = guard.take().expect("worker present");
                Err(match e {
                    Error::Timeout(t) => {
                        worker.shutdown();
                        Error::Timeout(t)
                    }
                    Error::Model { message, .. } => worker.fail(message),
                    other => worker.fail(other.to_string()),
                })
            }
        }
    }
}

/// The model a run talks to: `builtin` selects the reference segmenter,
/// anything else is a shell command speaking the wire protocol.
pub enum ModelHandle {
    Reference(ReferenceModel),
    Subprocess(SubprocessModel),
}

impl ModelHandle {
    pub fn open(spec: &str, timeout: Duration) -> Result<Self> {
        match spec.trim() {
            "" => Err(Error::invalid("empty model specification")),
            "builtin" | "reference" => Ok(Self::Reference(ReferenceModel::default())),
            cmd => SubprocessModel::new(cmd, rayon::current_num_threads(), timeout)
                .map(Self::Subprocess),
        }
    }
}

impl SegmentationModel for ModelHandle {
    fn predict(&self, img: &Image) -> Result<ProbMap> {
        match self {
            Self::Reference(m) => m.predict(img),
            Self::Subprocess(m) => m.predict(img),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grey(l: f32) -> Image {
        Image::filled(5, 4, [l; 3])
    }

    #[test]
    fn reference_model_examples() {
        let m = ReferenceModel::default();
        assert!(m
            .predict(&grey(0.9))
            .unwrap()
            .data()
            .iter()
            .all(|&p| p == 1.0));
        assert!(m
            .predict(&grey(0.3))
            .unwrap()
            .data()
            .iter()
            .all(|&p| p == 0.0));
        for &p in m.predict(&grey(0.65)).unwrap().data() {
            assert!((p - 0.5).abs() < 1e-5, "{p}");
        }
        assert_eq!(smoothstep(0.0, 1.0, 0.25), 0.15625);
    }

    #[test]
    fn reference_model_box_filter_matches_direct_sum() {
        let img =
            Image::from_rgb8(3, 3, &(0..27).map(|i| (i * 9) as u8).collect::<Vec<_>>()).unwrap();
        let lum = img.luminance();
        let p = ReferenceModel { t0: 0.0, t1: 1.0 }.predict(&img).unwrap();
        // centre pixel sees the whole image
        let mean = lum.iter().map(|&v| v as f64).sum::<f64>() / 9.0;
        assert!((p.get(1, 1) as f64 - smoothstep(0.0, 1.0, mean)).abs() < 1e-6);
        // corner (0,0) sees rows/cols {0,0,1} clamped
        let idx = [0, 0, 1];
        let mut s = 0.0;
        for y in idx {
            for x in idx {
                s += lum[y * 3 + x] as f64;
            }
        }
        assert!((p.get(0, 0) as f64 - smoothstep(0.0, 1.0, s / 9.0)).abs() < 1e-6);
    }

    #[test]
    fn subprocess_failures_carry_diagnostics() {
        let t = Duration::from_secs(10);
        match SubprocessModel::new("echo broken model >&2; exit 3", 1, t) {
            Err(Error::Model { diagnostics, .. }) => {
                assert!(diagnostics.contains("broken model"), "{diagnostics}");
                assert!(diagnostics.contains("exit status 3"), "{diagnostics}");
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
        // `cat` echoes the handshake, then echoes the request where a
        // response is expected
        let m = SubprocessModel::new("cat", 1, t).unwrap();
        let err = m.predict(&grey(0.5)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        // the failed worker was replaced on the next call
        assert!(m.predict(&grey(0.5)).is_err());
    }

    #[test]
    fn silent_model_times_out() {
        let err = SubprocessModel::new("sleep 5", 1, Duration::from_millis(200))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Timeout(_)));
    }

    #[test]
    fn open_parses_specs() {
        assert!(matches!(
            ModelHandle::open("builtin", DEFAULT_TIMEOUT).unwrap(),
            ModelHandle::Reference(_)
        ));
        assert!(ModelHandle::open("  ", DEFAULT_TIMEOUT).is_err());
    }
}

//! Sample stream handles.
//!
//! Every source runs as a producer thread feeding a bounded FIFO sized for
//! at least two seconds of data. Real-time producers never block: if the
//! FIFO is full the handle reports [`AcqError::Overflow`] on the next read.

use std::io::Read;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::cyton::{parse_cyton_packet, CytonFramer};
use super::synth::{LabelSchedule, SynthConfig, SynthSource};
use super::{AcqError, MontageConfig, RawSample, SamplingConfig};
use crate::dataset::RawRecording;

/// Largest tolerated jump in packet sequence numbers.
pub const MAX_SEQ_GAP: u32 = 32;

#[derive(Debug, Clone)]
pub enum SourceKind {
    /// A serial device node already configured for 115200 8N1.
    Serial(PathBuf),
    /// `host:port` serving raw concatenated Cyton frames.
    Tcp(String),
    /// A raw recording file.
    FileReplay(PathBuf),
    Synthetic {
        montage: MontageConfig,
        synth: SynthConfig,
        schedule: LabelSchedule,
    },
}

#[derive(Debug, Clone)]
pub struct StreamOptions {
    /// Sleep to emit file/synthetic samples at the nominal rate.
    pub paced: bool,
    /// FIFO capacity in seconds of samples (clamped to >= 2).
    pub buffer_secs: f64,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            paced: false,
            buffer_secs: 2.0,
        }
    }
}

/// Tracks wrapping sequence numbers and reports dropped packets.
#[derive(Debug, Default, Clone)]
pub struct SeqTracker {
    last: Option<u8>,
}

impl SeqTracker {
    /// Returns the number of packets missing before `seq`.
    pub fn observe(&mut self, seq: u8) -> Result<u32, AcqError> {
        let gap = match self.last {
            None => 0,
            Some(prev) => seq.wrapping_sub(prev).wrapping_sub(1) as u32,
        };
        self.last = Some(seq);
        if gap > MAX_SEQ_GAP {
            return Err(AcqError::DesyncDetected { gap });
        }
        Ok(gap)
    }
}

enum Msg {
    Sample(RawSample),
    Fail(AcqError),
}

/// Single-reader handle on a running source.
pub struct StreamHandle {
    rx: Receiver<Msg>,
    gaps: Arc<AtomicU64>,
    overflow: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
    sampling: SamplingConfig,
    realtime: bool,
}

impl StreamHandle {
    /// Next sample, `Ok(None)` at end of stream.
    pub fn recv(&mut self) -> Result<Option<RawSample>, AcqError> {
        if self.overflow.load(Ordering::Acquire) {
            return Err(AcqError::Overflow);
        }
        match self.rx.recv() {
            Ok(Msg::Sample(s)) => Ok(Some(s)),
            Ok(Msg::Fail(e)) => Err(e),
            Err(_) => {
                if self.overflow.load(Ordering::Acquire) {
                    Err(AcqError::Overflow)
                } else {
                    Ok(None)
                }
            }
        }
    }

    /// Packets lost to sequence gaps so far.
    pub fn gap_count(&self) -> u64 {
        self.gaps.load(Ordering::Relaxed)
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.sampling
    }

    /// True when samples arrive at the acquisition rate whether or not the
    /// reader keeps up (devices, paced replays).
    pub fn is_realtime(&self) -> bool {
        self.realtime
    }
}

impl Iterator for StreamHandle {
    type Item = Result<RawSample, AcqError>;
    fn next(&mut self) -> Option<Self::Item> {
        self.recv().transpose()
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        // Producers blocked on device reads are left detached.
        if let Some(w) = self.worker.take() {
            if w.is_finished() {
                let _ = w.join();
            }
        }
    }
}

struct Producer {
    tx: SyncSender<Msg>,
    overflow: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    realtime: bool,
}

impl Producer {
    /// Returns false when the producer should exit.
    fn emit(&self, msg: Msg) -> bool {
        if self.stop.load(Ordering::Acquire) {
            return false;
        }
        if self.realtime {
            match self.tx.try_send(msg) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    self.overflow.store(true, Ordering::Release);
                    false
                }
                Err(TrySendError::Disconnected(_)) => false,
            }
        } else {
            self.tx.send(msg).is_ok()
        }
    }
}

/// Opens a source and starts its producer thread.
pub fn stream_source(
    kind: SourceKind,
    cfg: &SamplingConfig,
    opts: &StreamOptions,
) -> Result<StreamHandle, AcqError> {
    cfg.validate()?;
    let capacity = (opts.buffer_secs.max(2.0) * cfg.sample_rate).ceil() as usize;
    let (tx, rx) = mpsc::sync_channel(capacity);
    let gaps = Arc::new(AtomicU64::new(0));
    let overflow = Arc::new(AtomicBool::new(false));
    let stop = Arc::new(AtomicBool::new(false));
    let mut sampling = cfg.clone();
    let realtime = match &kind {
        SourceKind::Serial(_) | SourceKind::Tcp(_) => true,
        SourceKind::FileReplay(_) | SourceKind::Synthetic { .. } => opts.paced,
    };

    let worker = match kind {
        SourceKind::Serial(path) => {
            let file = std::fs::File::open(&path).map_err(|e| {
                AcqError::SourceUnavailable(format!("{}: {e}", path.display()))
            })?;
            let p = producer(&tx, &overflow, &stop, true);
            let g = gaps.clone();
            let c = cfg.clone();
            std::thread::spawn(move || read_frames(file, &c, &p, &g))
        }
        SourceKind::Tcp(addr) => {
            let sock = TcpStream::connect(&addr)
                .map_err(|e| AcqError::SourceUnavailable(format!("{addr}: {e}")))?;
            let p = producer(&tx, &overflow, &stop, true);
            let g = gaps.clone();
            let c = cfg.clone();
            std::thread::spawn(move || read_frames(sock, &c, &p, &g))
        }
        SourceKind::FileReplay(path) => {
            let rec = RawRecording::load(&path).map_err(|e| {
                AcqError::SourceUnavailable(format!("{}: {e}", path.display()))
            })?;
            sampling = rec.sampling.clone();
            let p = producer(&tx, &overflow, &stop, opts.paced);
            let paced = opts.paced;
            std::thread::spawn(move || {
                let dt = rec.sampling.dt();
                let start = Instant::now();
                for (i, row) in rec.rows.iter().enumerate() {
                    let t = i as f64 * dt;
                    if paced {
                        pace(start, t);
                    }
                    let s = RawSample {
                        seq: (i % 256) as u8,
                        t,
                        volts: row.iter().map(|&v| v as f64).collect(),
                    };
                    if !p.emit(Msg::Sample(s)) {
                        return;
                    }
                }
            })
        }
        SourceKind::Synthetic {
            montage,
            synth,
            schedule,
        } => {
            let mut src = SynthSource::new(cfg, &montage, &synth)?;
            let p = producer(&tx, &overflow, &stop, opts.paced);
            let paced = opts.paced;
            std::thread::spawn(move || {
                let start = Instant::now();
                loop {
                    let t = src.next_t();
                    if t >= schedule.end() {
                        return;
                    }
                    let Some(label) = schedule.label_at(t) else {
                        p.emit(Msg::Fail(AcqError::ScheduleGap(t)));
                        return;
                    };
                    if paced {
                        pace(start, t);
                    }
                    if !p.emit(Msg::Sample(src.next_sample(label))) {
                        return;
                    }
                }
            })
        }
    };

    Ok(StreamHandle {
        rx,
        gaps,
        overflow,
        stop,
        worker: Some(worker),
        sampling,
        realtime,
    })
}

fn producer(
    tx: &SyncSender<Msg>,
    overflow: &Arc<AtomicBool>,
    stop: &Arc<AtomicBool>,
    realtime: bool,
) -> Producer {
    Producer {
        tx: tx.clone(),
        overflow: overflow.clone(),
        stop: stop.clone(),
        realtime,
    }
}

fn pace(start: Instant, t: f64) {
    let due = Duration::from_secs_f64(t);
    let elapsed = start.elapsed();
    if due > elapsed {
        std::thread::sleep(due - elapsed);
    }
}

fn read_frames<R: Read>(mut input: R, cfg: &SamplingConfig, p: &Producer, gaps: &AtomicU64) {
    let mut framer = CytonFramer::new();
    let mut tracker = SeqTracker::default();
    let mut buf = [0u8; 4096];
    let mut index: u64 = 0;
    let mut first = true;
    loop {
        let n = match input.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => {
                p.emit(Msg::Fail(AcqError::Io(e)));
                return;
            }
        };
        framer.push(&buf[..n]);
        while let Some(frame) = framer.next_frame() {
            let mut sample = match parse_cyton_packet(&frame, cfg) {
                Ok(s) => s,
                Err(e) => {
                    p.emit(Msg::Fail(e));
                    return;
                }
            };
            match tracker.observe(sample.seq) {
                Ok(gap) => {
                    if !first {
                        index += 1 + gap as u64;
                    }
                    first = false;
                    gaps.fetch_add(gap as u64, Ordering::Relaxed);
                }
                Err(e) => {
                    p.emit(Msg::Fail(e));
                    return;
                }
            }
            sample.t = index as f64 / cfg.sample_rate;
            if !p.emit(Msg::Sample(sample)) {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{encode_packet, AdcCount};
    use crate::dataset::ClassLabel;
    use std::io::Write;
    use std::net::TcpListener;

    fn frames(seqs: &[u8]) -> Vec<u8> {
        seqs.iter()
            .flat_map(|&s| encode_packet(s, &[AdcCount::new(s as i32).unwrap(); 8], 0))
            .collect()
    }

    #[test]
    fn seq_tracker_counts_gaps() {
        let mut t = SeqTracker::default();
        assert_eq!(t.observe(254).unwrap(), 0);
        assert_eq!(t.observe(255).unwrap(), 0);
        assert_eq!(t.observe(0).unwrap(), 0);
        assert_eq!(t.observe(3).unwrap(), 2);
        assert!(matches!(
            t.observe(3 + 34),
            Err(AcqError::DesyncDetected { gap: 33 })
        ));
    }

    #[test]
    fn tcp_source_reports_gaps() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut bytes = frames(&[10, 11, 12, 15, 16]);
            bytes.insert(33, 0x55); // line noise between frames
            s.write_all(&bytes).unwrap();
        });
        let mut h = stream_source(
            SourceKind::Tcp(addr),
            &SamplingConfig::default(),
            &StreamOptions::default(),
        )
        .unwrap();
        let got: Vec<_> = h.by_ref().map(|r| r.unwrap()).collect();
        server.join().unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(h.gap_count(), 2);
        let ts: Vec<f64> = got.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0.0, 0.004, 0.008, 0.02, 0.024]);
    }

    #[test]
    fn tcp_desync_is_reported() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            s.write_all(&frames(&[0, 1, 100])).unwrap();
        });
        let mut h = stream_source(
            SourceKind::Tcp(addr),
            &SamplingConfig::default(),
            &StreamOptions::default(),
        )
        .unwrap();
        assert!(h.recv().unwrap().is_some());
        assert!(h.recv().unwrap().is_some());
        assert!(matches!(h.recv(), Err(AcqError::DesyncDetected { .. })));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_sources() {
        let cfg = SamplingConfig::default();
        let r = stream_source(
            SourceKind::Serial("/nonexistent/tty".into()),
            &cfg,
            &StreamOptions::default(),
        );
        assert!(matches!(r, Err(AcqError::SourceUnavailable(_))));
        let r = stream_source(
            SourceKind::Tcp("127.0.0.1:1".into()),
            &cfg,
            &StreamOptions::default(),
        );
        assert!(matches!(r, Err(AcqError::SourceUnavailable(_))));
    }

    #[test]
    fn synthetic_stream_matches_direct_generation() {
        let cfg = SamplingConfig::default();
        let schedule = LabelSchedule::cycle(&ClassLabel::ALL, 0.5, 2.0);
        let direct = crate::acquisition::synth_stream(
            &cfg,
            &MontageConfig::default(),
            &SynthConfig::default(),
            &schedule,
            2.0,
        )
        .unwrap();
        let h = stream_source(
            SourceKind::Synthetic {
                montage: MontageConfig::default(),
                synth: SynthConfig::default(),
                schedule,
            },
            &cfg,
            &StreamOptions::default(),
        )
        .unwrap();
        let streamed: Vec<_> = h.map(|r| r.unwrap()).collect();
        assert_eq!(direct, streamed);
    }

    #[test]
    fn slow_consumer_overflows() {
        let cfg = SamplingConfig {
            sample_rate: 250.0,
            ..Default::default()
        };
        // Serve 10 s of frames at once to a real-time producer with a 2 s FIFO.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let seqs: Vec<u8> = (0..2500u32).map(|i| (i % 256) as u8).collect();
            let _ = s.write_all(&frames(&seqs));
        });
        let mut h = stream_source(SourceKind::Tcp(addr), &cfg, &StreamOptions::default()).unwrap();
        server.join().unwrap();
        std::thread::sleep(Duration::from_millis(200));
        let mut saw_overflow = false;
        for _ in 0..3000 {
            match h.recv() {
                Err(AcqError::Overflow) => {
                    saw_overflow = true;
                    break;
                }
                Ok(None) => break,
                _ => {}
            }
        }
        assert!(saw_overflow);
    }
}

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::customizer::{self, CustomizationJob, CustomizationResult};
use crate::error::{Error, Result};

/// Identifier of a dispatched job, unique within a run.
pub type JobId = u64;

/// Somewhere customization jobs can be sent and results collected from.
///
/// Results may come back in any order; the coordinator matches them by id.
/// The threshold a job should reach travels in `job.nmm.target_value`.
pub trait Executor {
    fn submit(&mut self, job_id: JobId, job: CustomizationJob) -> Result<()>;

    /// Block until some submitted job finishes. A job that fails with an
    /// error is reported as `Err`, naming the detector.
    fn recv(&mut self) -> Result<(JobId, CustomizationResult)>;
}

type Outcome = (JobId, String, Result<CustomizationResult>);

/// `P` worker threads pulling jobs from one shared queue.
pub struct LocalPool {
    jobs: Option<Sender<(JobId, CustomizationJob)>>,
    results: Receiver<Outcome>,
    cancelled: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl LocalPool {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("worker count must be at least 1"));
        }
        let (job_tx, job_rx) = mpsc::channel::<(JobId, CustomizationJob)>();
        let (result_tx, results) = mpsc::channel::<Outcome>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let cancelled = Arc::new(AtomicBool::new(false));
        let handles = (0..workers)
            .map(|w| {
                let job_rx = Arc::clone(&job_rx);
                let result_tx = result_tx.clone();
                let cancelled = Arc::clone(&cancelled);
                thread::Builder::new()
                    .name(format!("customizer-{w}"))
                    .spawn(move || worker_loop(&job_rx, &result_tx, &cancelled))
                    .map_err(Error::Io)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalPool {
            jobs: Some(job_tx),
            results,
            cancelled,
            handles,
        })
    }
}

fn worker_loop(
    jobs: &Mutex<Receiver<(JobId, CustomizationJob)>>,
    results: &Sender<Outcome>,
    cancelled: &AtomicBool,
) {
    loop {
        // The lock is released before the job runs.
        let next = jobs.lock().map(|rx| rx.recv());
        let Ok(Ok((id, job))) = next else { return };
        if cancelled.load(Ordering::Relaxed) {
            return;
        }
        let outcome = customizer::customize(&job, job.nmm.target_value);
        if results.send((id, job.detector_id, outcome)).is_err() {
            return;
        }
    }
}

impl Executor for LocalPool {
    fn submit(&mut self, job_id: JobId, job: CustomizationJob) -> Result<()> {
        self.jobs
            .as_ref()
            .and_then(|tx| tx.send((job_id, job)).ok())
            .ok_or_else(|| Error::Connectivity("local worker pool has shut down".into()))
    }

    fn recv(&mut self) -> Result<(JobId, CustomizationResult)> {
        match self.results.recv() {
            Ok((id, _, Ok(result))) => Ok((id, result)),
            Ok((_, detector, Err(e))) => Err(e.for_detector(&detector)),
            Err(_) => Err(Error::Connectivity("all local workers exited".into())),
        }
    }
}

impl Drop for LocalPool {
    fn drop(&mut self) {
        // Queued jobs are abandoned; running ones finish first.
        self.cancelled.store(true, Ordering::Relaxed);
        self.jobs.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

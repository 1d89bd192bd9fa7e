//! Threaded gradient executor: per-sample jobs fan out over a scoped thread
//! pool, results come back indexed by job, and the caller reduces in job
//! order — so worker count never changes the arithmetic.

use gto_core::train::{GradExecutor, GradOut, Sequential};
use gto_core::Real;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub struct Threaded {
    workers: usize,
}

impl Threaded {
    pub fn new(workers: usize) -> Threaded {
        Threaded {
            workers: workers.max(1),
        }
    }

    /// One worker per available core, capped by the flag.
    pub fn capped(cap: usize) -> Threaded {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        Threaded::new(cores.min(cap.max(1)))
    }
}

impl<R: Real> GradExecutor<R> for Threaded {
    fn map(
        &self,
        n_jobs: usize,
        job: &(dyn Fn(usize) -> gto_core::Result<GradOut<R>> + Sync),
    ) -> Vec<gto_core::Result<GradOut<R>>> {
        if self.workers == 1 || n_jobs <= 1 {
            return Sequential.map(n_jobs, job);
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<gto_core::Result<GradOut<R>>>>> =
            Mutex::new((0..n_jobs).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(n_jobs) {
                let next = &next;
                let slots = &slots;
                scope.spawn(move || loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    if k >= n_jobs {
                        break;
                    }
                    let out = job(k);
                    slots.lock().expect("result store")[k] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .expect("result store")
            .into_iter()
            .map(|s| s.expect("job completed"))
            .collect()
    }
}

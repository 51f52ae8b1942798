use std::sync::Arc;

use super::{Clock, SamplerError, Stop, Target, TargetExit, VirtualClock, Wait};
use crate::trace::ThreadIp;

/// Instruction pointer of thread `tid` at `t` ns of target time; `None`
/// when the thread does not exist then.
pub type IpScript = Box<dyn FnMut(u32, u64) -> Option<u64>>;

/// A deterministic stand-in for a live process, driven by a virtual clock.
///
/// The target runs for `duration_ns` of its own time. Each stop costs
/// `stop_cost_ns` of wall time, during which the target makes no progress,
/// so its exit moves back by the same amount.
pub struct ScriptedTarget {
    clock: Arc<VirtualClock>,
    start_ns: u64,
    end_ns: u64,
    paused_ns: u64,
    threads: Vec<u32>,
    ip_at: IpScript,
    stop_cost_ns: u64,
    exit: TargetExit,
    stopped: bool,
    detached: bool,
}

impl ScriptedTarget {
    pub fn new(clock: Arc<VirtualClock>, duration_ns: u64, threads: Vec<u32>, ip_at: IpScript) -> Self {
        let start_ns = clock.now_ns();
        ScriptedTarget {
            clock,
            start_ns,
            end_ns: start_ns + duration_ns,
            paused_ns: 0,
            threads,
            ip_at,
            stop_cost_ns: 0,
            exit: TargetExit::Exited(0),
            stopped: false,
            detached: false,
        }
    }

    pub fn with_stop_cost(mut self, ns: u64) -> Self {
        self.stop_cost_ns = ns;
        self
    }

    pub fn with_exit(mut self, exit: TargetExit) -> Self {
        self.exit = exit;
        self
    }

    pub fn detached(&self) -> bool {
        self.detached
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }
}

impl Target for ScriptedTarget {
    fn start_ns(&self) -> u64 {
        self.start_ns
    }

    fn wait_until(&mut self, _clock: &dyn Clock, deadline_ns: u64) -> Result<Wait, SamplerError> {
        if deadline_ns >= self.end_ns {
            self.clock.advance_to(self.end_ns);
            return Ok(Wait::Exited { at_ns: self.end_ns, exit: self.exit });
        }
        self.clock.advance_to(deadline_ns);
        Ok(Wait::Due)
    }

    fn stop(&mut self, _clock: &dyn Clock) -> Result<Stop, SamplerError> {
        let now = self.clock.now_ns();
        if now >= self.end_ns {
            return Ok(Stop::Exited { at_ns: self.end_ns, exit: self.exit });
        }
        let t = now - self.start_ns - self.paused_ns;
        let ips = self
            .threads
            .iter()
            .filter_map(|&tid| (self.ip_at)(tid, t).map(|ip| ThreadIp { tid, ip }))
            .collect();
        self.stopped = true;
        self.clock.advance_by(self.stop_cost_ns);
        self.paused_ns += self.stop_cost_ns;
        self.end_ns += self.stop_cost_ns;
        Ok(Stop::Stopped { threads: ips, since_ns: now })
    }

    fn resume(&mut self) -> Result<(), SamplerError> {
        self.stopped = false;
        Ok(())
    }

    fn detach(&mut self) -> Result<(), SamplerError> {
        self.stopped = false;
        self.detached = true;
        Ok(())
    }
}

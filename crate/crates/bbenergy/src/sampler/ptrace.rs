//! Live targets through ptrace.
//!
//! Every thread is seized (no stop on attach). A sample interrupts all
//! threads, waits for each to report its stop, reads the instruction
//! pointers and continues them. Threads created since the previous sample
//! are found by listing `/proc/PID/task` and seized on the spot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::os::fd::{AsFd, FromRawFd, OwnedFd};
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use bbenergy_core::blockmap::{AddressRange, ModuleRegion};
use nix::errno::Errno;
use nix::libc;
use nix::poll::{ppoll, PollFd, PollFlags};
use nix::sys::ptrace;
use nix::sys::signal::Signal;
use nix::sys::time::TimeSpec;
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;
use object::{Object, ObjectKind, ObjectSegment};

use super::{affinity, Clock, SamplerError, Stop, Target, TargetExit, Wait};
use crate::trace::ThreadIp;

/// How often the memory map is re-read when pointers fall outside every
/// known module.
const MAPS_RESCAN_NS: u64 = 1_000_000_000;

#[derive(Debug, Default)]
struct ThreadState {
    /// Stopped by us and not yet continued.
    stopped: bool,
    /// Signal intercepted in a signal-delivery stop, to be reinjected.
    pending: Option<Signal>,
    /// Our interrupt has not produced its stop yet.
    interrupt_pending: bool,
}

pub struct PtraceTarget {
    pid: Pid,
    start_ns: u64,
    threads: BTreeMap<i32, ThreadState>,
    pidfd: Option<OwnedFd>,
    exited: Option<(u64, TargetExit)>,
    attached: bool,
    excluded_core: Option<usize>,
    known_modules: BTreeMap<String, ModuleRegion>,
    reported: BTreeSet<String>,
    last_scan_ns: Option<u64>,
}

fn debug_err(what: &str, tid: i32, e: Errno) -> SamplerError {
    SamplerError::Debug(format!("{what} on thread {tid}: {e}"))
}

fn list_tasks(pid: Pid) -> std::io::Result<Vec<i32>> {
    let mut tids: Vec<i32> = fs::read_dir(format!("/proc/{pid}/task"))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    tids.sort_unstable();
    Ok(tids)
}

fn open_pidfd(pid: Pid) -> Option<OwnedFd> {
    // SAFETY: pidfd_open takes a pid and flags and returns a new descriptor
    // or -1; nothing is borrowed.
    let fd = unsafe { libc::syscall(libc::SYS_pidfd_open, pid.as_raw(), 0) };
    if fd < 0 {
        return None;
    }
    // SAFETY: the descriptor was just created and is owned by nobody else.
    Some(unsafe { OwnedFd::from_raw_fd(fd as i32) })
}

#[cfg(target_arch = "x86_64")]
fn read_ip(tid: Pid) -> nix::Result<u64> {
    ptrace::getregs(tid).map(|r| r.rip)
}

#[cfg(any(target_arch = "aarch64", target_arch = "riscv64"))]
fn read_ip(tid: Pid) -> nix::Result<u64> {
    ptrace::getregs(tid).map(|r| r.pc)
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64", target_arch = "riscv64")))]
fn read_ip(_tid: Pid) -> nix::Result<u64> {
    Err(Errno::ENOSYS)
}

impl PtraceTarget {
    /// Starts `cmd` and takes control of it. The run's start time is taken
    /// just before the spawn.
    pub fn spawn(cmd: &mut Command, clock: &dyn Clock) -> Result<Self, SamplerError> {
        let start_ns = clock.now_ns();
        let child = cmd.spawn().map_err(SamplerError::Spawn)?;
        let pid = Pid::from_raw(child.id() as i32);
        // the child is reaped through waitpid below, not through `Child`
        drop(child);
        Self::seize_all(pid, start_ns)
    }

    /// Takes control of a running process.
    pub fn attach(pid: i32, clock: &dyn Clock) -> Result<Self, SamplerError> {
        let start_ns = clock.now_ns();
        Self::seize_all(Pid::from_raw(pid), start_ns)
    }

    fn seize_all(pid: Pid, start_ns: u64) -> Result<Self, SamplerError> {
        let attach_err = |msg: String| SamplerError::Attach { pid: pid.as_raw(), msg };
        let mut t = PtraceTarget {
            pid,
            start_ns,
            threads: BTreeMap::new(),
            pidfd: open_pidfd(pid),
            exited: None,
            attached: false,
            excluded_core: None,
            known_modules: BTreeMap::new(),
            reported: BTreeSet::new(),
            last_scan_ns: None,
        };
        ptrace::seize(pid, ptrace::Options::empty()).map_err(|e| {
            attach_err(match e {
                Errno::EPERM => "permission denied (check ptrace_scope or CAP_SYS_PTRACE)".into(),
                Errno::ESRCH => "no such process".into(),
                e => e.to_string(),
            })
        })?;
        t.attached = true;
        t.threads.insert(pid.as_raw(), ThreadState::default());
        t.refresh_threads().map_err(|e| attach_err(e.to_string()))?;
        Ok(t)
    }

    pub fn pid(&self) -> i32 {
        self.pid.as_raw()
    }

    /// Live thread ids as last seen.
    pub fn thread_ids(&self) -> Vec<i32> {
        self.threads.keys().copied().collect()
    }

    /// Keeps the target's threads off `core`, where the control loop runs.
    /// Returns `false` when the machine has no other core to offer.
    pub fn exclude_core(&mut self, core: usize) -> bool {
        self.excluded_core = Some(core);
        self.threads.keys().all(|&tid| affinity::exclude_core(tid, core).unwrap_or(false))
    }

    fn seize_thread(&mut self, tid: i32) {
        if self.threads.contains_key(&tid) {
            return;
        }
        match ptrace::seize(Pid::from_raw(tid), ptrace::Options::empty()) {
            // already traced: threads cloned from a traced thread are not
            // auto-attached without options, so this is a race with exit
            Ok(()) | Err(Errno::EPERM) => {
                self.threads.insert(tid, ThreadState::default());
                if let Some(core) = self.excluded_core {
                    let _ = affinity::exclude_core(tid, core);
                }
            }
            Err(_) => {}
        }
    }

    fn refresh_threads(&mut self) -> std::io::Result<()> {
        match list_tasks(self.pid) {
            Ok(tids) => {
                for tid in tids {
                    self.seize_thread(tid);
                }
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn thread_gone(&mut self, tid: i32, status: Option<TargetExit>, clock: &dyn Clock) {
        self.threads.remove(&tid);
        if tid == self.pid.as_raw() {
            if let Some(exit) = status {
                self.exited = Some((clock.now_ns(), exit));
            }
        }
        if self.threads.is_empty() && self.exited.is_none() {
            let exit = self.reap_leader();
            self.exited = Some((clock.now_ns(), exit));
        }
    }

    fn reap_leader(&mut self) -> TargetExit {
        loop {
            match waitpid(self.pid, Some(WaitPidFlag::__WALL)) {
                Ok(WaitStatus::Exited(_, code)) => return TargetExit::Exited(code),
                Ok(WaitStatus::Signaled(_, sig, _)) => return TargetExit::Signaled(sig as i32),
                Ok(_) => continue,
                Err(Errno::EINTR) => continue,
                Err(_) => return TargetExit::Unknown,
            }
        }
    }

    /// Handles one wait status of a thread that is not being sampled.
    fn handle_async(&mut self, status: WaitStatus, clock: &dyn Clock) -> Result<(), SamplerError> {
        match status {
            WaitStatus::Exited(tid, code) => self.thread_gone(tid.as_raw(), Some(TargetExit::Exited(code)), clock),
            WaitStatus::Signaled(tid, sig, _) => {
                self.thread_gone(tid.as_raw(), Some(TargetExit::Signaled(sig as i32)), clock)
            }
            WaitStatus::Stopped(tid, sig) => {
                // signal-delivery stop: pass the signal on
                if let Err(e) = ptrace::cont(tid, sig) {
                    if e != Errno::ESRCH {
                        return Err(debug_err("continue", tid.as_raw(), e));
                    }
                }
            }
            WaitStatus::PtraceEvent(tid, _, _) | WaitStatus::PtraceSyscall(tid) => {
                if let Some(t) = self.threads.get_mut(&tid.as_raw()) {
                    t.interrupt_pending = false;
                }
                if let Err(e) = ptrace::cont(tid, None) {
                    if e != Errno::ESRCH {
                        return Err(debug_err("continue", tid.as_raw(), e));
                    }
                }
            }
            WaitStatus::Continued(_) | WaitStatus::StillAlive => {}
        }
        Ok(())
    }

    /// Collects pending events of every thread without blocking.
    fn drain(&mut self, clock: &dyn Clock) -> Result<(), SamplerError> {
        let tids: Vec<i32> = self.threads.keys().copied().collect();
        for tid in tids {
            loop {
                match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::WNOHANG | WaitPidFlag::__WALL)) {
                    Ok(WaitStatus::StillAlive) => break,
                    Ok(status) => {
                        let done = matches!(status, WaitStatus::Exited(..) | WaitStatus::Signaled(..));
                        self.handle_async(status, clock)?;
                        if done {
                            break;
                        }
                    }
                    Err(Errno::EINTR) => continue,
                    Err(Errno::ECHILD) => {
                        self.thread_gone(tid, None, clock);
                        break;
                    }
                    Err(e) => return Err(debug_err("wait", tid, e)),
                }
            }
            if self.exited.is_some() {
                break;
            }
        }
        Ok(())
    }

    /// Waits for the stop our interrupt causes. Returns `false` if the
    /// thread is gone.
    fn wait_for_stop(&mut self, tid: i32, clock: &dyn Clock) -> Result<bool, SamplerError> {
        loop {
            match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::__WALL)) {
                Ok(WaitStatus::PtraceEvent(..)) | Ok(WaitStatus::PtraceSyscall(_)) => {
                    if let Some(t) = self.threads.get_mut(&tid) {
                        t.interrupt_pending = false;
                        t.stopped = true;
                    }
                    return Ok(true);
                }
                Ok(WaitStatus::Stopped(_, sig)) => {
                    // a signal arrived first; hold it and keep the thread
                    // stopped, our interrupt fires after the next continue
                    if let Some(t) = self.threads.get_mut(&tid) {
                        t.pending = Some(sig);
                        t.stopped = true;
                    }
                    return Ok(true);
                }
                Ok(WaitStatus::Exited(_, code)) => {
                    self.thread_gone(tid, Some(TargetExit::Exited(code)), clock);
                    return Ok(false);
                }
                Ok(WaitStatus::Signaled(_, sig, _)) => {
                    self.thread_gone(tid, Some(TargetExit::Signaled(sig as i32)), clock);
                    return Ok(false);
                }
                Ok(_) | Err(Errno::EINTR) => continue,
                Err(Errno::ECHILD) => {
                    self.thread_gone(tid, None, clock);
                    return Ok(false);
                }
                Err(e) => return Err(debug_err("wait", tid, e)),
            }
        }
    }

    fn stop_all(&mut self, clock: &dyn Clock) -> Result<(), SamplerError> {
        let tids: Vec<i32> = self.threads.keys().copied().collect();
        let mut interrupted = Vec::with_capacity(tids.len());
        for tid in tids {
            let Some(state) = self.threads.get_mut(&tid) else { continue };
            if state.interrupt_pending {
                interrupted.push(tid);
                continue;
            }
            match ptrace::interrupt(Pid::from_raw(tid)) {
                Ok(()) => {
                    state.interrupt_pending = true;
                    interrupted.push(tid);
                }
                Err(Errno::ESRCH) => interrupted.push(tid),
                Err(e) => return Err(debug_err("interrupt", tid, e)),
            }
        }
        for tid in interrupted {
            if self.threads.contains_key(&tid) {
                self.wait_for_stop(tid, clock)?;
            }
        }
        Ok(())
    }

    fn continue_all(&mut self) -> Result<(), SamplerError> {
        let mut rearm = Vec::new();
        for (&tid, state) in self.threads.iter_mut() {
            if !state.stopped {
                continue;
            }
            state.stopped = false;
            let sig = state.pending.take();
            if sig.is_some() && state.interrupt_pending {
                rearm.push(tid);
            }
            match ptrace::cont(Pid::from_raw(tid), sig) {
                Ok(()) | Err(Errno::ESRCH) => {}
                Err(e) => return Err(debug_err("continue", tid, e)),
            }
        }
        // the interrupt still queued behind a delivered signal stops the
        // thread again right away; let it go without waiting for the next
        // sample
        for tid in rearm {
            for _ in 0..200 {
                match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::WNOHANG | WaitPidFlag::__WALL)) {
                    Ok(WaitStatus::StillAlive) => std::thread::sleep(Duration::from_micros(1)),
                    Ok(WaitStatus::PtraceEvent(..)) => {
                        if let Some(t) = self.threads.get_mut(&tid) {
                            t.interrupt_pending = false;
                        }
                        let _ = ptrace::cont(Pid::from_raw(tid), None);
                        break;
                    }
                    Ok(WaitStatus::Stopped(p, sig)) => {
                        let _ = ptrace::cont(p, sig);
                    }
                    _ => break,
                }
            }
        }
        Ok(())
    }

    fn scan_modules(&mut self) {
        let Ok(text) = fs::read_to_string(format!("/proc/{}/maps", self.pid)) else { return };
        for region in parse_maps(&text) {
            self.known_modules.entry(region.name.clone()).or_insert(region);
        }
    }
}

/// Executable file-backed modules of a `/proc/PID/maps` listing.
///
/// A module's region spans all its mappings. Its load bias is the start of
/// its offset-0 mapping minus its lowest link-time segment address for
/// position-independent files and 0 otherwise.
pub fn parse_maps(text: &str) -> Vec<ModuleRegion> {
    struct Acc {
        start: u64,
        end: u64,
        base: Option<u64>,
        exec: bool,
    }
    let mut by_path: Vec<(String, Acc)> = Vec::new();
    for line in text.lines() {
        let mut rest = line;
        let mut fields = [""; 5];
        for f in fields.iter_mut() {
            rest = rest.trim_start();
            let end = rest.find(' ').unwrap_or(rest.len());
            *f = &rest[..end];
            rest = &rest[end..];
        }
        let path = rest.trim();
        if path.is_empty() || !(path.starts_with('/') || path == "[vdso]") {
            continue;
        }
        let Some((s, e)) = fields[0].split_once('-') else { continue };
        let (Ok(start), Ok(end)) = (u64::from_str_radix(s, 16), u64::from_str_radix(e, 16)) else { continue };
        let Ok(offset) = u64::from_str_radix(fields[2], 16) else { continue };
        let exec = fields[1].contains('x');
        let acc = match by_path.iter_mut().find(|(p, _)| p == path) {
            Some((_, a)) => a,
            None => {
                by_path.push((path.to_string(), Acc { start, end, base: None, exec: false }));
                &mut by_path.last_mut().expect("just pushed").1
            }
        };
        acc.start = acc.start.min(start);
        acc.end = acc.end.max(end);
        acc.exec |= exec;
        if offset == 0 && acc.base.is_none() {
            acc.base = Some(start);
        }
    }
    by_path
        .into_iter()
        .filter(|(_, a)| a.exec)
        .filter_map(|(path, a)| {
            let range = AddressRange::new(a.start, a.end).ok()?;
            let load_bias = match a.base {
                Some(base) if path.starts_with('/') => link_base(Path::new(&path)).map_or(0, |lb| base.wrapping_sub(lb)),
                _ => 0,
            };
            let name = Path::new(&path).file_name().map_or(path.clone(), |n| n.to_string_lossy().into_owned());
            Some(ModuleRegion { name, range, load_bias })
        })
        .collect()
}

/// Lowest page-aligned segment address of a position-independent file;
/// `None` for fixed-address executables and unreadable files.
fn link_base(path: &Path) -> Option<u64> {
    let data = fs::read(path).ok()?;
    let file = object::File::parse(&*data).ok()?;
    if file.kind() != ObjectKind::Dynamic {
        return None;
    }
    let lowest = file.segments().map(|s| s.address()).min().unwrap_or(0);
    Some(lowest & !0xfff)
}

impl Target for PtraceTarget {
    fn start_ns(&self) -> u64 {
        self.start_ns
    }

    fn wait_until(&mut self, clock: &dyn Clock, deadline_ns: u64) -> Result<Wait, SamplerError> {
        loop {
            self.drain(clock)?;
            if let Some((at_ns, exit)) = self.exited {
                return Ok(Wait::Exited { at_ns, exit });
            }
            let now = clock.now_ns();
            if now >= deadline_ns {
                return Ok(Wait::Due);
            }
            let remaining = Duration::from_nanos(deadline_ns - now);
            match &self.pidfd {
                Some(fd) => {
                    let mut fds = [PollFd::new(fd.as_fd(), PollFlags::POLLIN)];
                    match ppoll(&mut fds, Some(TimeSpec::from_duration(remaining)), None) {
                        // the process is exiting; its status may lag a little
                        Ok(n) if n > 0 => std::thread::sleep(Duration::from_micros(50)),
                        Ok(_) | Err(Errno::EINTR) => {}
                        Err(e) => return Err(SamplerError::Debug(format!("poll: {e}"))),
                    }
                }
                None => std::thread::sleep(remaining.min(Duration::from_millis(1))),
            }
        }
    }

    fn stop(&mut self, clock: &dyn Clock) -> Result<Stop, SamplerError> {
        self.drain(clock)?;
        if let Some((at_ns, exit)) = self.exited {
            return Ok(Stop::Exited { at_ns, exit });
        }
        self.refresh_threads().map_err(|e| SamplerError::Debug(format!("listing threads: {e}")))?;
        let since_ns = clock.now_ns();
        self.stop_all(clock)?;
        if let Some((at_ns, exit)) = self.exited {
            return Ok(Stop::Exited { at_ns, exit });
        }
        let mut ips = Vec::with_capacity(self.threads.len());
        let stopped: Vec<i32> = self.threads.iter().filter(|(_, s)| s.stopped).map(|(&t, _)| t).collect();
        for tid in stopped {
            match read_ip(Pid::from_raw(tid)) {
                Ok(ip) => ips.push(ThreadIp { tid: tid as u32, ip }),
                // exited while stopped (killed by another thread's exit_group)
                Err(Errno::ESRCH) => {}
                Err(e) => return Err(debug_err("read registers", tid, e)),
            }
        }
        Ok(Stop::Stopped { threads: ips, since_ns })
    }

    fn resume(&mut self) -> Result<(), SamplerError> {
        self.continue_all()
    }

    fn detach(&mut self) -> Result<(), SamplerError> {
        if !self.attached || self.exited.is_some() {
            self.attached = false;
            return Ok(());
        }
        let clock = super::MonotonicClock::new();
        self.drain(&clock)?;
        self.stop_all(&clock)?;
        for (&tid, state) in self.threads.iter_mut() {
            let _ = ptrace::detach(Pid::from_raw(tid), state.pending.take());
        }
        self.threads.clear();
        self.attached = false;
        Ok(())
    }

    fn new_modules(&mut self, threads: &[ThreadIp], now_ns: u64) -> Vec<ModuleRegion> {
        let covered = |ip: u64, mods: &BTreeMap<String, ModuleRegion>| mods.values().any(|m| m.range.contains(ip));
        let stale = self.last_scan_ns.is_none_or(|t| now_ns.saturating_sub(t) >= MAPS_RESCAN_NS);
        if stale && threads.iter().any(|t| !covered(t.ip, &self.known_modules)) {
            self.scan_modules();
            self.last_scan_ns = Some(now_ns);
        }
        let mut out = Vec::new();
        for m in self.known_modules.values() {
            if !self.reported.contains(&m.name) && threads.iter().any(|t| m.range.contains(t.ip)) {
                out.push(m.clone());
            }
        }
        for m in &out {
            self.reported.insert(m.name.clone());
        }
        out
    }
}

impl Drop for PtraceTarget {
    fn drop(&mut self) {
        let _ = self.detach();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_listing_yields_executable_modules_with_bias() {
        let exe = std::env::current_exe().unwrap();
        let text = fs::read_to_string("/proc/self/maps").unwrap();
        let mods = parse_maps(&text);
        let name = exe.file_name().unwrap().to_string_lossy().into_owned();
        let me = mods.iter().find(|m| m.name == name).expect("own executable listed");
        let f = maps_listing_yields_executable_modules_with_bias as fn() as usize as u64;
        assert!(me.range.contains(f));
        // the bias maps this function back to its symbol-table address
        let syms = crate::blockmap_io::read_symbols(&exe).unwrap();
        let link = f.wrapping_sub(me.load_bias);
        assert!(
            syms.iter().any(|(n, r)| r.contains(link) && n.contains("maps_listing_yields")),
            "no symbol at link address {link:#x}"
        );
    }

    #[test]
    fn synthetic_maps() {
        let text = "\
00400000-00401000 r--p 00000000 08:01 42 /opt/app
00401000-00402000 r-xp 00001000 08:01 42 /opt/app
7fff0000-7fff1000 rw-p 00000000 00:00 0 [stack]
7fff2000-7fff3000 r-xp 00000000 00:00 0 [vdso]
7fff4000-7fff5000 rw-p 00000000 00:00 0
";
        let m = parse_maps(text);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].name.as_str(), m[0].range.start(), m[0].range.end()), ("app", 0x400000, 0x402000));
        assert_eq!(m[0].load_bias, 0, "unreadable file falls back to no bias");
        assert_eq!(m[1].name, "[vdso]");
    }
}

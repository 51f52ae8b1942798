//! Keeping the control loop and the target on different cores.

use nix::sched::{sched_getaffinity, sched_setaffinity, CpuSet};
use nix::unistd::Pid;

/// Number of cores this process may run on.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Pins the calling thread to `core`.
pub fn pin_current_thread(core: usize) -> nix::Result<()> {
    let mut set = CpuSet::new();
    set.set(core)?;
    sched_setaffinity(Pid::from_raw(0), &set)
}

/// Removes `core` from a thread's allowed set. Returns `false` without
/// changing anything when that would leave the thread no core at all.
pub fn exclude_core(tid: i32, core: usize) -> nix::Result<bool> {
    let pid = Pid::from_raw(tid);
    let mut set = sched_getaffinity(pid)?;
    if !set.is_set(core)? {
        return Ok(true);
    }
    set.unset(core)?;
    let remaining = (0..CpuSet::count()).filter(|&c| set.is_set(c).unwrap_or(false)).count();
    if remaining == 0 {
        return Ok(false);
    }
    sched_setaffinity(pid, &set)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinning_to_an_allowed_core_succeeds() {
        let set = sched_getaffinity(Pid::from_raw(0)).unwrap();
        let core = (0..CpuSet::count()).find(|&c| set.is_set(c).unwrap()).unwrap();
        // run in a scratch thread so the test harness thread keeps its mask
        std::thread::spawn(move || {
            pin_current_thread(core).unwrap();
            let now = sched_getaffinity(Pid::from_raw(0)).unwrap();
            assert!(now.is_set(core).unwrap());
        })
        .join()
        .unwrap();
        assert!(available_cores() >= 1);
    }
}

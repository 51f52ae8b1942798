//! CPU-bound target for live sampler tests.
//!
//! `spin` runs a fixed amount of work in `bbenergy_selftest_spin` on every
//! thread, so nearly every sample of a profiled run lands in that symbol.

use std::hint::black_box;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbenergy-selftest", about = "Fixed-work target for profiler tests")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spin for a fixed number of iterations per thread.
    Spin {
        #[arg(long, default_value_t = 100_000_000)]
        iterations: u64,
        /// Total thread count, main thread included.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Spin, then die from SIGABRT.
    Crash {
        #[arg(long, default_value_t = 10_000_000)]
        iterations: u64,
    },
    /// Sleep, then exit with the given code.
    Sleep {
        #[arg(long, default_value_t = 100)]
        ms: u64,
        #[arg(long, default_value_t = 0)]
        code: u8,
    },
}

#[inline(never)]
#[no_mangle]
pub extern "C" fn bbenergy_selftest_spin(iterations: u64) -> u64 {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut i = 0;
    while i < iterations {
        x = black_box(x ^ (x << 13));
        x ^= x >> 7;
        x ^= x << 17;
        i += 1;
    }
    x
}

fn main() -> ExitCode {
    match Args::parse().cmd {
        Cmd::Spin { iterations, threads } => {
            let workers: Vec<_> = (1..threads.max(1))
                .map(|_| std::thread::spawn(move || bbenergy_selftest_spin(iterations)))
                .collect();
            let mut acc = bbenergy_selftest_spin(iterations);
            for w in workers {
                acc ^= w.join().expect("worker panicked");
            }
            black_box(acc);
            ExitCode::SUCCESS
        }
        Cmd::Crash { iterations } => {
            black_box(bbenergy_selftest_spin(iterations));
            std::process::abort()
        }
        Cmd::Sleep { ms, code } => {
            std::thread::sleep(std::time::Duration::from_millis(ms));
            ExitCode::from(code)
        }
    }
}

use std::io::{self, Write};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use crate::trace::{TraceLine, TraceSink, TraceWriter};

/// A trace sink that hands lines to a writer thread through a bounded
/// queue, keeping file IO off the control loop.
pub struct QueuedWriter {
    tx: Option<SyncSender<TraceLine>>,
    handle: Option<JoinHandle<io::Result<()>>>,
}

impl QueuedWriter {
    pub fn spawn<W: Write + Send + 'static>(out: W, capacity: usize) -> Self {
        let (tx, rx) = sync_channel::<TraceLine>(capacity);
        let handle = std::thread::spawn(move || {
            let mut w = TraceWriter::new(out);
            for line in rx {
                w.write_line(&line)?;
            }
            w.into_inner().flush()
        });
        QueuedWriter { tx: Some(tx), handle: Some(handle) }
    }

    fn join(&mut self) -> io::Result<()> {
        self.tx = None;
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(io::Error::other("trace writer panicked"))),
            None => Ok(()),
        }
    }

    /// Flushes everything queued and reports the writer's outcome.
    pub fn finish(mut self) -> io::Result<()> {
        self.join()
    }
}

impl TraceSink for QueuedWriter {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        let Some(tx) = &self.tx else {
            return Err(io::Error::other("trace writer already closed"));
        };
        if tx.send(line.clone()).is_err() {
            // the writer thread stopped; surface its error
            return Err(self.join().err().unwrap_or_else(|| io::Error::other("trace writer stopped")));
        }
        Ok(())
    }
}

impl Drop for QueuedWriter {
    fn drop(&mut self) {
        let _ = self.join();
    }
}

/// Writes every line to both sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: TraceSink, B: TraceSink> TraceSink for Tee<A, B> {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        self.0.write_line(line)?;
        self.1.write_line(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);
    impl Write for Shared {
        fn write(&mut self, b: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    struct Broken;
    impl Write for Broken {
        fn write(&mut self, _: &[u8]) -> io::Result<usize> {
            Err(io::Error::other("broken pipe"))
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn lines_arrive_in_order() {
        let buf = Shared::default();
        let mut w = QueuedWriter::spawn(buf.clone(), 2);
        for i in 0..100 {
            w.write_line(&TraceLine::TExec(i)).unwrap();
        }
        w.finish().unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 100);
        assert_eq!(text.lines().last(), Some("# t_exec_ns=99"));
    }

    #[test]
    fn writer_errors_surface() {
        let mut w = QueuedWriter::spawn(Broken, 1);
        let mut failed = false;
        for i in 0..10 {
            if w.write_line(&TraceLine::TExec(i)).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed || w.finish().is_err());
    }
}

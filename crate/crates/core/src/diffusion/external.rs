use std::io::BufReader;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use ndarray::Array2;
use num_complex::Complex64;

use super::protocol;
use super::Denoiser;
use crate::error::{Error, Result};
use crate::spectral::Spectrogram;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Denoiser served by a child process speaking the [`protocol`] over its
/// standard input and output. Requests are serialized; any protocol violation,
/// exit or timeout kills the child and poisons the handle.
pub struct ExternalDenoiser {
    command: String,
    child: Child,
    requests: Option<Sender<Vec<u8>>>,
    responses: Receiver<Result<Array2<Complex64>>>,
    timeout: Duration,
    n_requests: u64,
    broken: Option<String>,
}

impl std::fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiser")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .field("n_requests", &self.n_requests)
            .field("broken", &self.broken)
            .finish()
    }
}

impl ExternalDenoiser {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        Self::spawn_with_timeout(command, DEFAULT_TIMEOUT)
    }

    pub fn spawn_with_timeout(command: &str, timeout: Duration) -> Result<Self> {
        let mut cmd = Command::new("sh");
        // own process group, so that killing it also reaches whatever the shell started
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
        let mut child = cmd
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::DenoiserProtocol(format!("cannot start `{command}`: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (req_tx, req_rx) = mpsc::channel::<Vec<u8>>();
        thread::spawn(move || {
            for frame in req_rx {
                if protocol::write_frame(&mut stdin, &frame).is_err() {
                    break;
                }
            }
        });
        let (resp_tx, resp_rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = protocol::read_response(&mut reader);
                let stop = frame.is_err();
                if resp_tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            command: command.to_owned(),
            child,
            requests: Some(req_tx),
            responses: resp_rx,
            timeout,
            n_requests: 0,
            broken: None,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    fn fail(&mut self, msg: String) -> Error {
        let status = self.child.try_wait().ok().flatten();
        let msg = match status {
            Some(s) => format!("{msg} (process exited: {s})"),
            None => msg,
        };
        self.kill();
        self.broken = Some(msg.clone());
        Error::DenoiserProtocol(msg)
    }

    fn kill(&mut self) {
        self.requests = None;
        #[cfg(unix)]
        if let Ok(pgid) = libc::pid_t::try_from(self.child.id()) {
            // SAFETY: plain syscall on a process group this handle created
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// Sends one raw tensor and returns the response payload.
    pub fn exchange(&mut self, t: u32, data: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        if let Some(reason) = &self.broken {
            return Err(Error::DenoiserProtocol(format!("`{}` is unusable after an earlier failure: {reason}", self.command)));
        }
        self.n_requests += 1;
        let (f, l) = data.dim();
        let ctx = format!("`{}` request #{} (t={t}, {f}x{l})", self.command, self.n_requests);
        let frame = protocol::encode_request(t, data)?;
        let sent = self.requests.as_ref().map(|tx| tx.send(frame).is_ok()).unwrap_or(false);
        if !sent {
            return Err(self.fail(format!("{ctx}: input stream closed")));
        }
        match self.responses.recv_timeout(self.timeout) {
            Ok(Ok(resp)) if resp.dim() == (f, l) => Ok(resp),
            Ok(Ok(resp)) => {
                let (rf, rl) = resp.dim();
                Err(self.fail(format!("{ctx}: response has dims {rf}x{rl}")))
            }
            Ok(Err(e)) => Err(self.fail(format!("{ctx}: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(format!("{ctx}: no response within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(self.fail(format!("{ctx}: output stream closed"))),
        }
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        self.kill();
    }
}

impl Denoiser for ExternalDenoiser {
    fn estimate_noise(&mut self, x_t: &Spectrogram, t: usize) -> Result<Spectrogram> {
        let t = u32::try_from(t).map_err(|_| Error::invalid(format!("step {t} does not fit the protocol")))?;
        let resp = self.exchange(t, x_t.data())?;
        if resp.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(self.fail(format!("`{}` returned non-finite values", self.command)));
        }
        Ok(x_t.with_data(resp))
    }
}

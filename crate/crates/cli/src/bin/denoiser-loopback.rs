//! Test double for the external denoiser protocol.
//!
//! Usage: `denoiser-loopback [MODE]` where MODE is one of
//! `echo` (default), `zeros`, `scale:<s>`, `bad-magic`, `bad-version`,
//! `bad-dims`, `truncated`, `garbage`, `exit`, `hang`. The faulty modes answer
//! the first request correctly when suffixed with `@<n>` and misbehave on
//! request `n` (1-based), e.g. `bad-dims@3`.

use std::io::{self, BufReader, BufWriter, Write};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use ndarray::Array2;
use uadps::diffusion::protocol::{encode_response, read_request, write_frame};
use uadps::Complex64;

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    BadMagic,
    BadVersion,
    BadDims,
    Truncated,
    Garbage,
    Exit,
    Hang,
}

enum Mode {
    Scale(f64),
    Faulty(Fault, u64),
}

fn parse_mode(arg: &str) -> Option<Mode> {
    let (name, at) = match arg.split_once('@') {
        Some((n, k)) => (n, k.parse().ok()?),
        None => (arg, 1),
    };
    let fault = match name {
        "echo" => return Some(Mode::Scale(1.0)),
        "zeros" => return Some(Mode::Scale(0.0)),
        s if s.starts_with("scale:") => return s[6..].parse().ok().map(Mode::Scale),
        "bad-magic" => Fault::BadMagic,
        "bad-version" => Fault::BadVersion,
        "bad-dims" => Fault::BadDims,
        "truncated" => Fault::Truncated,
        "garbage" => Fault::Garbage,
        "exit" => Fault::Exit,
        "hang" => Fault::Hang,
        _ => return None,
    };
    Some(Mode::Faulty(fault, at))
}

fn respond(out: &mut impl Write, data: &Array2<Complex64>) -> io::Result<()> {
    let frame = encode_response(data).map_err(io::Error::other)?;
    write_frame(out, &frame)
}

fn misbehave(out: &mut impl Write, fault: Fault, data: &Array2<Complex64>) -> io::Result<()> {
    let mut frame = encode_response(data).map_err(io::Error::other)?;
    match fault {
        Fault::BadMagic => frame[..4].copy_from_slice(b"NOPE"),
        Fault::BadVersion => frame[4..8].copy_from_slice(&7u32.to_le_bytes()),
        Fault::BadDims => {
            let (f, l) = data.dim();
            frame = encode_response(&Array2::zeros((f + 1, l))).map_err(io::Error::other)?;
        }
        Fault::Truncated => frame.truncate(frame.len() / 2),
        Fault::Garbage => frame = (0..64u8).map(|i| i.wrapping_mul(37) ^ 0xa5).collect(),
        Fault::Exit => std::process::exit(3),
        Fault::Hang => loop {
            thread::sleep(Duration::from_secs(3600));
        },
    }
    write_frame(out, &frame)?;
    if fault == Fault::Truncated {
        std::process::exit(0);
    }
    // stay alive so the client sees the bad frame rather than a closed pipe
    loop {
        thread::sleep(Duration::from_secs(3600));
    }
}

fn main() -> ExitCode {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "echo".into());
    let Some(mode) = parse_mode(&arg) else {
        eprintln!("denoiser-loopback: unknown mode `{arg}`");
        return ExitCode::from(2);
    };
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    let mut n = 0u64;
    loop {
        let req = match read_request(&mut input) {
            Ok(Some(r)) => r,
            Ok(None) => return ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("denoiser-loopback: {e}");
                return ExitCode::from(1);
            }
        };
        n += 1;
        let result = match mode {
            Mode::Scale(s) => respond(&mut output, &req.data.mapv(|z| z * s)),
            Mode::Faulty(fault, at) if n >= at => misbehave(&mut output, fault, &req.data),
            Mode::Faulty(..) => respond(&mut output, &req.data),
        };
        if result.is_err() {
            return ExitCode::from(1);
        }
    }
}

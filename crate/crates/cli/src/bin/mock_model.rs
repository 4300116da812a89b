//! Test model process speaking the wire protocol.
//!
//! ```text
//! falsify-mock-model echo_rect [--protocol-version N]
//! falsify-mock-model constant:0.5
//! ```
//!
//! `echo_rect` answers 1.0 inside `[w/4, 3w/4) x [h/4, 3h/4)` and 0.0
//! elsewhere; `constant:V` answers V everywhere.

use std::io::{self, BufReader, BufWriter, Write};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use falsify_core::harness::protocol;
use falsify_core::{Image, ProbMap};

#[derive(Parser)]
struct Args {
    /// `echo_rect` or `constant:V`
    model: String,
    /// Version announced in the handshake.
    #[arg(long, default_value_t = protocol::VERSION)]
    protocol_version: u16,
}

enum Mock {
    EchoRect,
    Constant(f32),
}

impl Mock {
    fn parse(s: &str) -> anyhow::Result<Self> {
        if s == "echo_rect" {
            return Ok(Mock::EchoRect);
        }
        if let Some(v) = s.strip_prefix("constant:") {
            let v: f32 = v.parse().with_context(|| format!("bad constant `{v}`"))?;
            if !(0.0..=1.0).contains(&v) {
                bail!("constant {v} not in [0, 1]");
            }
            return Ok(Mock::Constant(v));
        }
        bail!("unknown model `{s}` (expected echo_rect or constant:V)")
    }

    fn predict(&self, img: &Image) -> ProbMap {
        let (w, h) = img.dims();
        match *self {
            Mock::Constant(v) => ProbMap::filled(w, h, v),
            Mock::EchoRect => {
                let data = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .map(|(x, y)| {
                        let inside = 4 * x >= w && 4 * x < 3 * w && 4 * y >= h && 4 * y < 3 * h;
                        if inside {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                ProbMap::new(w, h, data).expect("dimensions match")
            }
        }
    }
}

fn serve(args: &Args) -> anyhow::Result<()> {
    let mock = Mock::parse(&args.model)?;
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    let theirs = protocol::read_handshake(&mut input).context("handshake")?;
    protocol::write_handshake(&mut output, args.protocol_version)?;
    output.flush()?;
    if theirs != args.protocol_version {
        bail!(
            "protocol version mismatch: peer {theirs}, mine {}",
            args.protocol_version
        );
    }
    while let Some(img) = protocol::read_request(&mut input).context("reading request")? {
        protocol::write_response(&mut output, &mock.predict(&img))?;
        output.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match serve(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("falsify-mock-model: {e:#}");
            ExitCode::FAILURE
        }
    }
}

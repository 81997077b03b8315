//! Reference JSON-lines oracle for protocol tests.
//!
//! Reads `{"id", "smiles"}` lines from stdin and answers `{"id", "score"}`.
//! Heavy atoms are counted as uppercase letters of the SMILES.

use std::io::{self, BufRead, Write};

use clap::{Parser, ValueEnum};
use serde::Deserialize;
use serde_json::json;

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Zero,
    HeavyAtoms,
    NegHeavyTenth,
}

#[derive(Parser, Debug)]
#[command(name = "limo-echo-oracle")]
struct Args {
    #[arg(long, value_enum, default_value_t = Mode::HeavyAtoms)]
    mode: Mode,
    /// Hold this many responses and release them in reverse order.
    #[arg(long, default_value_t = 1)]
    shuffle: usize,
    /// Never answer this request id.
    #[arg(long)]
    drop_id: Option<u64>,
    /// Sleep this long before each response.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

#[derive(Deserialize)]
struct Request {
    id: u64,
    smiles: String,
}

fn score(mode: Mode, smiles: &str) -> f64 {
    let heavy = smiles.chars().filter(char::is_ascii_uppercase).count() as f64;
    match mode {
        Mode::Zero => 0.0,
        Mode::HeavyAtoms => heavy,
        Mode::NegHeavyTenth => -heavy / 10.0,
    }
}

fn flush(held: &mut Vec<String>, out: &mut impl Write) -> io::Result<()> {
    while let Some(line) = held.pop() {
        writeln!(out, "{line}")?;
    }
    out.flush()
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut held = Vec::new();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("bad request: {e}");
                continue;
            }
        };
        if Some(req.id) == args.drop_id {
            continue;
        }
        if args.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(args.delay_ms));
        }
        held.push(json!({"id": req.id, "score": score(args.mode, &req.smiles)}).to_string());
        if held.len() >= args.shuffle.max(1) {
            flush(&mut held, &mut out)?;
        }
    }
    flush(&mut held, &mut out)
}

mod args;
mod commands;
mod error;
mod output;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, Result};

/// Flags from a `--config` JSON object, placed right after the subcommand so that
/// anything given on the command line overrides them.
fn with_config(raw: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = raw.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, s) in strs.iter().enumerate() {
        if s == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(raw);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Usage(format!("config {path}: expected a JSON object")))?;
    let mut extra = Vec::new();
    for (k, v) in obj {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => extra.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => extra.extend([flag, s.clone()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(|x| x.as_str().map(str::to_string).unwrap_or(x.to_string())).collect();
                extra.extend([flag, joined.join(",")]);
            }
            other => extra.extend([flag, other.to_string()]),
        }
    }
    // The subcommand is the first argument that is neither a flag nor a flag value.
    let mut at = None;
    let mut i = 1;
    while i < strs.len() {
        let s = &strs[i];
        if s == "--threads" || s == "--config" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            at = Some(i + 1);
            break;
        }
        i += 1;
    }
    let Some(at) = at else {
        return Ok(raw);
    };
    let mut out = raw[..at].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&raw[at..]);
    Ok(out)
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => commands::synth(a),
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::Ares(a) => commands::ares(a),
        Command::Trajectory(a) => commands::trajectory(a),
        Command::Eval(a) => commands::eval(a),
        Command::McVerify(a) => commands::mc_verify(a),
    }
}

fn run() -> Result<()> {
    let args = with_config(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let msg = rendered.trim_end().strip_prefix("error: ").unwrap_or(rendered.trim_end());
            return Err(CliError::Usage(msg.to_string()));
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    dispatch(&cli.command).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", cli.command.name())),
        u => u,
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

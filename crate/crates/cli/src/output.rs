use std::io::IsTerminal;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, OnceLock};

use anyhow::{Context, Result};
use serde::Serialize;

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).context("encoding json")?);
    Ok(())
}

/// Colors only when enabled and stdout is a terminal.
pub fn use_color(enabled: bool) -> bool {
    enabled && std::io::stdout().is_terminal()
}

pub fn paint_state(state: &str, color: bool) -> String {
    if !color {
        return state.to_string();
    }
    let code = match state {
        "done" => "32",
        "failed" => "31",
        "cancelled" => "33",
        "running" => "36",
        "pending" | "submitted" => "34",
        _ => return state.to_string(),
    };
    format!("\x1b[{code}m{state}\x1b[0m")
}

/// Left-aligned columns separated by two spaces. Widths ignore ANSI
/// escapes so colored cells stay aligned.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    fn visible(s: &str) -> usize {
        let mut n = 0;
        let mut in_esc = false;
        for c in s.chars() {
            match (in_esc, c) {
                (false, '\x1b') => in_esc = true,
                (true, 'm') => in_esc = false,
                (true, _) => {}
                (false, _) => n += 1,
            }
        }
        n
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(visible(c));
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            s.push_str(c);
            let pad = widths[i].saturating_sub(visible(c)) + 2;
            s.extend(std::iter::repeat_n(' ', pad));
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// Process-wide interrupt flag, set by Ctrl-C once installed.
pub fn interrupt_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || {
            f.store(true, std::sync::atomic::Ordering::SeqCst);
        }) {
            log::warn!("cannot install interrupt handler: {e}");
        }
        flag
    })
    .clone()
}

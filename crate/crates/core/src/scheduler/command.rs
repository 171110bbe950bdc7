use std::collections::VecDeque;
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    pub fn ok(stdout: impl Into<String>) -> Self {
        CommandOutput {
            code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn fail(code: i32, stderr: impl Into<String>) -> Self {
        CommandOutput {
            code,
            stdout: String::new(),
            stderr: stderr.into(),
        }
    }

    pub fn success(&self) -> bool {
        self.code == 0
    }
}

pub trait CommandRunner: Send + Sync {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> std::io::Result<CommandOutput>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemRunner;

impl CommandRunner for SystemRunner {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> std::io::Result<CommandOutput> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty argv"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(if stdin.is_some() {
                Stdio::piped()
            } else {
                Stdio::null()
            })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            pipe.write_all(input.as_bytes())?;
        }
        let out = child.wait_with_output()?;
        Ok(CommandOutput {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }
}

/// Replays canned outputs in order and records every command line.
/// Running out of replies behaves like a missing executable.
#[derive(Debug, Default)]
pub struct TranscriptRunner {
    replies: Mutex<VecDeque<CommandOutput>>,
    calls: Mutex<Vec<Vec<String>>>,
}

impl TranscriptRunner {
    pub fn new(replies: impl IntoIterator<Item = CommandOutput>) -> Arc<Self> {
        Arc::new(TranscriptRunner {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn push(&self, reply: CommandOutput) {
        self.replies.lock().unwrap().push_back(reply);
    }

    pub fn calls(&self) -> Vec<Vec<String>> {
        self.calls.lock().unwrap().clone()
    }

    /// Each recorded call joined with spaces.
    pub fn command_lines(&self) -> Vec<String> {
        self.calls().iter().map(|c| c.join(" ")).collect()
    }
}

impl CommandRunner for TranscriptRunner {
    fn run(&self, argv: &[String], _stdin: Option<&str>) -> std::io::Result<CommandOutput> {
        self.calls.lock().unwrap().push(argv.to_vec());
        self.replies.lock().unwrap().pop_front().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "no transcript entry")
        })
    }
}

/// Runs commands on this machine or, when a remote host is configured,
/// through the system `ssh` client.
#[derive(Clone)]
pub struct Transport {
    runner: Arc<dyn CommandRunner>,
    host: Option<String>,
    user: Option<String>,
}

impl Transport {
    pub fn new(runner: Arc<dyn CommandRunner>, host: Option<String>, user: Option<String>) -> Self {
        Transport { runner, host, user }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.host.as_deref(), Some(h) if h != "localhost")
    }

    pub fn host(&self) -> Option<&str> {
        self.host.as_deref()
    }

    fn destination(&self) -> String {
        let host = self.host.clone().unwrap_or_default();
        match &self.user {
            Some(u) => format!("{u}@{host}"),
            None => host,
        }
    }

    fn ssh_argv(&self, remote_command: String) -> Vec<String> {
        vec![
            "ssh".into(),
            "-o".into(),
            "BatchMode=yes".into(),
            self.destination(),
            remote_command,
        ]
    }

    fn exec(&self, argv: Vec<String>) -> Result<CommandOutput> {
        let out = self.runner.run(&argv, None).map_err(|e| {
            Error::Transport(format!("cannot run `{}`: {e}", argv.join(" ")))
        })?;
        if self.is_remote() && out.code == 255 {
            return Err(Error::Transport(format!(
                "ssh to {} failed: {}",
                self.destination(),
                out.stderr.trim()
            )));
        }
        Ok(out)
    }

    /// Runs `program args...`; over ssh the words are shell-quoted.
    pub fn run(&self, program: &str, args: &[&str]) -> Result<CommandOutput> {
        let mut words = vec![program.to_string()];
        words.extend(args.iter().map(|a| a.to_string()));
        if self.is_remote() {
            self.exec(self.ssh_argv(quote_words(&words)))
        } else {
            self.exec(words)
        }
    }

    /// Runs a shell command line with `sh -c` locally or as the ssh
    /// remote command.
    pub fn run_shell(&self, command: &str) -> Result<CommandOutput> {
        if self.is_remote() {
            self.exec(self.ssh_argv(command.to_string()))
        } else {
            self.exec(vec!["sh".into(), "-c".into(), command.to_string()])
        }
    }

    /// Copies a local directory into `remote_parent` on the host.
    pub fn upload_dir(&self, local: &std::path::Path, remote_parent: &str) -> Result<()> {
        let argv = vec![
            "scp".into(),
            "-q".into(),
            "-r".into(),
            "-o".into(),
            "BatchMode=yes".into(),
            local.display().to_string(),
            format!("{}:{}/", self.destination(), remote_parent),
        ];
        let out = self
            .runner
            .run(&argv, None)
            .map_err(|e| Error::Transport(format!("cannot run scp: {e}")))?;
        if !out.success() {
            return Err(Error::Transport(format!(
                "scp to {} failed: {}",
                self.destination(),
                out.stderr.trim()
            )));
        }
        Ok(())
    }
}

pub fn quote(word: &str) -> String {
    shlex::try_quote(word)
        .map(|q| q.into_owned())
        .unwrap_or_else(|_| format!("'{}'", word.replace('\0', "")))
}

pub fn quote_words(words: &[String]) -> String {
    words.iter().map(|w| quote(w)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remote_commands_go_through_ssh() {
        let runner = TranscriptRunner::new([CommandOutput::ok("")]);
        let t = Transport::new(runner.clone(), Some("login1".into()), Some("alice".into()));
        t.run("sbatch", &["/scratch/a b/job.sh"]).unwrap();
        assert_eq!(
            runner.calls()[0],
            ["ssh", "-o", "BatchMode=yes", "alice@login1", "sbatch '/scratch/a b/job.sh'"]
        );
    }

    #[test]
    fn localhost_runs_directly() {
        let runner = TranscriptRunner::new([CommandOutput::ok("")]);
        let t = Transport::new(runner.clone(), Some("localhost".into()), None);
        t.run("sbatch", &["/x/job.sh"]).unwrap();
        assert_eq!(runner.command_lines(), ["sbatch /x/job.sh"]);
    }

    #[test]
    fn ssh_255_is_a_transport_error() {
        let runner = TranscriptRunner::new([CommandOutput::fail(255, "Connection refused")]);
        let t = Transport::new(runner, Some("h".into()), None);
        assert!(matches!(t.run("true", &[]), Err(Error::Transport(_))));
    }

    #[test]
    fn missing_program_is_a_transport_error() {
        let t = Transport::new(Arc::new(SystemRunner), None, None);
        assert!(matches!(
            t.run("/definitely/not/here", &[]),
            Err(Error::Transport(_))
        ));
    }
}

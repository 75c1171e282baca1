//! `key=value` config files supplying flag defaults.
//!
//! A bare `key` applies to every subcommand that has a `--key` flag; a
//! `subcommand.key` entry applies to that subcommand only. Blank lines and
//! lines starting with `#` are ignored. Boolean flags take `true`/`false`.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Command};

use crate::Entries;

pub fn parse(text: &str, origin: &Path) -> Result<Entries> {
    let mut out = Entries::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", origin.display(), i + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Entries> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text, path)
}

fn subcommand_position(cmd: &Command, argv: &[OsString]) -> Option<(usize, String)> {
    argv.iter().enumerate().skip(1).find_map(|(i, a)| {
        let s = a.to_str()?;
        cmd.find_subcommand(s).map(|_| (i, s.to_string()))
    })
}

fn given(argv: &[OsString], flag: &str) -> bool {
    let long = format!("--{flag}");
    argv.iter().filter_map(|a| a.to_str()).any(|a| {
        a == long
            || a.strip_prefix(long.as_str())
                .is_some_and(|rest| rest.starts_with('='))
    })
}

/// Adds config defaults as flags after the subcommand name for every flag
/// not given explicitly in `argv`.
pub fn merge(cmd: &Command, argv: &[OsString], entries: &Entries) -> Result<Vec<OsString>> {
    let Some((pos, name)) = subcommand_position(cmd, argv) else {
        return Ok(argv.to_vec());
    };
    let sub = cmd.find_subcommand(&name).expect("found above");
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let (scope, flag) = match key.split_once('.') {
            Some((s, f)) => (Some(s), f),
            None => (None, key.as_str()),
        };
        if let Some(s) = scope {
            if cmd.find_subcommand(s).is_none() {
                bail!("config key {key:?} names unknown subcommand {s:?}");
            }
            if s != name {
                continue;
            }
        }
        let arg = sub.get_arguments().find(|a| a.get_long() == Some(flag));
        let Some(arg) = arg else {
            let known_anywhere = cmd
                .get_subcommands()
                .any(|c| c.get_arguments().any(|a| a.get_long() == Some(flag)));
            if scope.is_some() || !known_anywhere {
                bail!(
                    "config key {key:?} matches no flag of {}",
                    if scope.is_some() {
                        name.as_str()
                    } else {
                        "any subcommand"
                    }
                );
            }
            continue;
        };
        if arg.is_global_set() || ["config", "data-dir", "threads"].contains(&flag) {
            bail!("config key {key:?} cannot be set from a config file");
        }
        if given(&argv[pos + 1..], flag) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => injected.push(format!("--{flag}").into()),
                "false" => {}
                _ => bail!("config key {key:?} expects true or false"),
            },
            _ => injected.push(format!("--{flag}={value}").into()),
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Cli, Command as Cmd};
    use clap::{CommandFactory, Parser};

    fn argv(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    fn entries(text: &str) -> Entries {
        parse(text, Path::new("test.conf")).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let e = entries("# defaults\nrho = 0.7\nimages=50\nsynth.seed=9\ntrain-captioner.lr=0.5\n");
        let merged = merge(
            &Cli::command(),
            &argv("fluentcap synth --out d --images 20"),
            &e,
        )
        .unwrap();
        let cli = Cli::try_parse_from(merged).unwrap();
        let Cmd::Synth(a) = cli.command else { panic!() };
        assert_eq!((a.images, a.rho, a.seed), (20, 0.7, 9));
    }

    #[test]
    fn underscores_are_accepted() {
        let e = entries("max_len=7");
        let merged = merge(
            &Cli::command(),
            &argv("fluentcap caption --features f --model m --out o"),
            &e,
        )
        .unwrap();
        let Cmd::Caption(a) = Cli::try_parse_from(merged).unwrap().command else {
            panic!()
        };
        assert_eq!(a.max_len, 7);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = entries("colour=red");
        assert!(merge(&Cli::command(), &argv("fluentcap synth --out d"), &e).is_err());
        let e = entries("synth.lr=0.1");
        assert!(merge(&Cli::command(), &argv("fluentcap synth --out d"), &e).is_err());
        assert!(parse("novalue", Path::new("x")).is_err());
    }
}

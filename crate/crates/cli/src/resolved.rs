//! Renders the fully resolved command line, defaults included, so any run
//! can be repeated by pasting the block back into a shell.

use clap::{ArgAction, ArgMatches, CommandFactory};

use crate::args::Cli;

fn shell_word(s: &str) -> String {
    let plain = !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./,:=+@%".contains(c));
    if plain {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

pub fn render(matches: &ArgMatches, threads: Option<usize>) -> String {
    let Some((name, sub)) = matches.subcommand() else {
        return String::new();
    };
    let cmd = Cli::command();
    let Some(def) = cmd.find_subcommand(name) else {
        return String::new();
    };
    let mut lines = vec![format!("eadnet {name}")];
    let mut unset = Vec::new();
    for arg in def.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if !arg.get_action().takes_values() {
            if matches!(arg.get_action(), ArgAction::SetTrue) && sub.get_flag(id) {
                lines.push(format!("--{long}"));
            }
            continue;
        }
        match sub.get_raw(id) {
            Some(values) => {
                let joined: Vec<String> =
                    values.map(|v| v.to_string_lossy().into_owned()).collect();
                lines.push(format!("--{long} {}", shell_word(&joined.join(","))));
            }
            None => unset.push(format!("# --{long} unset")),
        }
    }
    let mut out = String::from("resolved configuration:\n");
    if let Some(n) = threads {
        out.push_str(&format!("  EADNET_THREADS={n} \\\n"));
    }
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate() {
        let cont = if i < last { " \\" } else { "" };
        out.push_str(&format!("  {line}{cont}\n"));
    }
    for line in unset {
        out.push_str(&format!("  {line}\n"));
    }
    out
}

//! Markdown reference generated from the clap definitions and the default configuration.

use std::fmt::Write as _;

use clap::CommandFactory;

use crate::config::RunConfig;
use crate::Cli;

const SYNTH_EXAMPLE: &str = r#"# a seeded suite (profile: train, motion_size or static) ...
[suite]
profile = "motion_size"
count = 4
length = 40
seed = 7

# ... and/or explicit sequences
[[sequence]]
id = "blob"
width = 160
height = 128
length = 30
waypoints = [[40.0, 40.0], [110.0, 80.0]]
sigma = [5.0, 8.0]
intensity = [150.0, 140.0]
background = 60.0
texture = 12.0
noise_sigma = 3.0
distractors = 1
attributes = ["motion", "size_increase"]
seed = 42
"#;

pub fn markdown() -> String {
    let mut s = String::from("# tsf command reference\n\n");
    s.push_str("Generated by `tsf reference`; do not edit by hand.\n\n");
    s.push_str("Exit codes: `0` success, `1` usage error (bad flag, bad config key), `2` data error, `3` numerical failure.\n\n");
    let cmd = Cli::command();
    s.push_str("## Global flags\n\n");
    for a in cmd.get_arguments().filter(|a| a.get_long().is_some()) {
        arg_line(&mut s, a);
    }
    for sub in cmd.get_subcommands() {
        let _ = writeln!(s, "\n## `tsf {}`\n", sub.get_name());
        if let Some(about) = sub.get_about() {
            let _ = writeln!(s, "{about}\n");
        }
        let mut any = false;
        for a in sub.get_arguments() {
            if a.get_id() == "help" || a.is_global_set() {
                continue;
            }
            arg_line(&mut s, a);
            any = true;
        }
        if !any {
            s.push_str("No flags.\n");
        }
    }
    s.push_str("\n## Run configuration (`--config`)\n\n");
    s.push_str("TOML. Every key is optional; omitted keys take the defaults below. Unknown keys are rejected and named in the error.\n");
    s.push_str("`train` uses `seed`, `variant`, `data`, `sampling`, `stage1`/`stage2`; `track` uses only `[track]`. ");
    s.push_str("With `data.root` unset, training generates a synthetic suite from the `synthetic_*` keys.\n\n```toml\n");
    s.push_str(&toml::to_string_pretty(&RunConfig::default()).expect("default config serializes"));
    s.push_str("```\n\n## Synthetic dataset spec (`tsf synth --spec`)\n\n```toml\n");
    s.push_str(SYNTH_EXAMPLE);
    s.push_str("```\n");
    s
}

fn arg_line(s: &mut String, a: &clap::Arg) {
    let name = match a.get_long() {
        Some(l) => format!("--{l}"),
        None => format!("<{}>", a.get_id().as_str().to_uppercase()),
    };
    let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
    let default: Vec<String> = a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect();
    let _ = write!(s, "- `{name}`");
    if a.is_required_set() {
        s.push_str(" (required)");
    }
    if !help.is_empty() {
        let end = if help.ends_with('.') { "" } else { "." };
        let _ = write!(s, ": {help}{end}");
    }
    if !default.is_empty() && default != ["false"] {
        let _ = write!(s, " Default: `{}`.", default.join(","));
    }
    s.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_with_defaults, SynthFile};

    #[test]
    fn synth_example_is_valid() {
        let f: SynthFile = parse_with_defaults(SYNTH_EXAMPLE, "example").unwrap();
        assert_eq!(f.specs().len(), 5);
        for s in f.specs() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn checked_in_reference_is_current() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/reference.md");
        let on_disk = std::fs::read_to_string(path).unwrap_or_default();
        assert!(on_disk == markdown(), "docs/reference.md is stale; regenerate with `tsf reference > docs/reference.md`");
    }

    #[test]
    fn every_subcommand_is_documented() {
        let md = markdown();
        for sub in ["synth", "train", "track", "eval", "compare", "overlay"] {
            assert!(md.contains(&format!("## `tsf {sub}`")), "{sub}");
        }
        assert!(md.contains("--no-update") && md.contains("[stage1]"));
    }
}

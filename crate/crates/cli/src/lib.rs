//! Command-line front end for the `freemcg` tool.

pub mod array;
pub mod commands;
pub mod config;
pub mod exit;
pub mod manifest;

pub fn run(cli: &config::Cli) -> anyhow::Result<()> {
    commands::run(&cli.command)
}

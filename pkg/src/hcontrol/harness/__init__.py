"""Command-line harness: config loading, task runners, figures."""

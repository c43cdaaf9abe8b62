"""File formats, experiment configuration, the report writer and the CLI."""

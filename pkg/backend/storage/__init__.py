"""Run directories: archived config, reports and trajectory checkpoints."""

"""Experiment file definitions."""
from mfdelay.forms.experiment import ExperimentConfig, load_config, parse_config

__all__ = ['ExperimentConfig', 'load_config', 'parse_config']

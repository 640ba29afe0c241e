"""Incremental neural architecture search: cell spaces, neighborhoods, oracles and a Q-learning agent."""

from .graph import CellGraph, canonical_hash, hash_hex, validate
from .space import Architecture, EdgeCell, SpaceSpec, load_spec, sample_uniform
from .neighbors import neighbors
from .oracle import ShapingConfig, SyntheticOracle, ingest_table, shape, step_reward
from .env import EnvConfig, NASEnv, VectorEnv

__version__ = "0.1.0"

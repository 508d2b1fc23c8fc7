"""Grant-free many-access uplink: block-precoded transmission, greedy block-sparse
recovery with and without per-iteration decoding, and an order-statistics
performance predictor with a Monte Carlo harness to check it."""
from .config import Bernoulli, ConfigError, FixedCount, SystemConfig, load_config, parse_config_text

__version__ = "0.1.0"

__all__ = ["Bernoulli", "ConfigError", "FixedCount", "SystemConfig", "load_config",
           "parse_config_text", "__version__"]

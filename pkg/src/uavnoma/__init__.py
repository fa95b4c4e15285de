"""Active generative-model resource allocation for UAV cognitive NOMA uplinks."""

from .config import ConfigError, ScenarioConfig, load_config

__all__ = ["ConfigError", "ScenarioConfig", "load_config"]
__version__ = "0.1.0"

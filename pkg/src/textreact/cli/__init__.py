from .config import ConfigTypeError, MissingRequired, RunConfig, UnknownKey, parse_config
from .main import main, run_command

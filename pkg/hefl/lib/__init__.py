from .config import add_args, check_config, get_config
from .log import setup_logging
from .runner import Runner

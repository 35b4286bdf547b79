"""Mean-field delayed forward-backward systems with jumps: simulation,
adjoint equations and maximum-principle checks."""
import logging

from mfdelay.config import get_config

LOG_LEVELS = {
    'error': logging.ERROR,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}

__version__ = '1.0.0'

# Set up logging
logging.basicConfig(
    level=LOG_LEVELS.get(str(get_config().LOG_LEVEL).lower(), logging.INFO),
    format='%(asctime)s %(levelname)s %(name)s: %(message)s',
)
logger = logging.getLogger(__name__)

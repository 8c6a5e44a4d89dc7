import logging
import sys

from mmdsfi.cli import main
from mmdsfi.config.settings import LOG_LEVEL

# Set up logging
logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(1)

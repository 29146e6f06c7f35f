from logger.logger import logger, set_verbosity

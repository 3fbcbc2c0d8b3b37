import logging

LOG_FORMAT = "%(asctime)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class MemoryLogHandler(logging.Handler):
    """Keeps every formatted line so a run can hand its log back with the results."""

    def __init__(self):
        super().__init__()
        self.lines = []

    def emit(self, record):
        self.lines.append(self.format(record))

    def text(self):
        return "".join(f"{line}\n" for line in self.lines)


def setup_logging(level=logging.INFO, memory_handler=None):
    """
    Configure the "IllusionLab" logger tree with timestamped lines on stderr
    :param level: logging level for the lab loggers
    :param memory_handler: optional MemoryLogHandler that also receives every line
    :return: the root lab logger
    """
    logger = logging.getLogger("IllusionLab")
    logger.setLevel(level)
    logger.handlers.clear()
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    logger.addHandler(stream)
    if memory_handler is not None:
        memory_handler.setFormatter(formatter)
        logger.addHandler(memory_handler)
    logger.propagate = False
    return logger


def get_logger(name):
    return logging.getLogger(f"IllusionLab.{name}")
